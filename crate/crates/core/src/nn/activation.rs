use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

pub fn relu<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Passes the gradient where the forward input was strictly positive.
pub fn relu_backward<T: Float>(x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("relu_backward", x, grad_out)?;
    let data = x
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
        .collect();
    Ok(Tensor::from_parts(x.dims().to_vec(), data))
}

#[inline]
fn sigmoid_scalar<T: Float>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub fn sigmoid<T: Float>(x: &Tensor<T>) -> Tensor<T> {
    x.map(sigmoid_scalar)
}

/// Uses the forward output `y = σ(x)`: `dx = dy · y · (1 − y)`.
pub fn sigmoid_backward<T: Float>(y: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    same_dims("sigmoid_backward", y, grad_out)?;
    let data = y
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&s, &g)| g * s * (T::one() - s))
        .collect();
    Ok(Tensor::from_parts(y.dims().to_vec(), data))
}

fn same_dims<T: Float>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.dims() != b.dims() {
        return Err(Error::ShapeMismatch {
            op,
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    Ok(())
}
