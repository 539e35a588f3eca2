use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::Rng;
use crate::tensor::Tensor;

use super::param::{he_normal, Parameter};

/// `out = x · weightᵀ + bias`, with `x: [N, Fin]`, `weight: [Fout, Fin]`.
pub fn linear<T: Float>(x: &Tensor<T>, weight: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, fin] = x.dims2()?;
    let [fout, wfin] = weight.dims2()?;
    if wfin != fin || bias.dims() != [fout] {
        return Err(Error::ShapeMismatch {
            op: "linear",
            left: x.dims().to_vec(),
            right: weight.dims().to_vec(),
        });
    }
    let mut out = Vec::with_capacity(n * fout);
    for _ in 0..n {
        out.extend_from_slice(bias.data());
    }
    T::gemm(n, fin, fout, T::one(), x.data(), false, weight.data(), true, T::one(), &mut out);
    Ok(Tensor::from_parts(vec![n, fout], out))
}

#[derive(Clone, Debug)]
pub struct LinearGrads<T> {
    pub input: Tensor<T>,
    pub weight: Tensor<T>,
    pub bias: Tensor<T>,
}

pub fn linear_backward<T: Float>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<LinearGrads<T>> {
    let [n, fin] = x.dims2()?;
    let [fout, _] = weight.dims2()?;
    if grad_out.dims() != [n, fout] {
        return Err(Error::ShapeMismatch {
            op: "linear_backward",
            left: vec![n, fout],
            right: grad_out.dims().to_vec(),
        });
    }
    let dy = grad_out.data();
    let mut dx = vec![T::zero(); n * fin];
    T::gemm(n, fout, fin, T::one(), dy, false, weight.data(), false, T::zero(), &mut dx);
    let mut dw = vec![T::zero(); fout * fin];
    T::gemm(fout, n, fin, T::one(), dy, true, x.data(), false, T::zero(), &mut dw);
    let mut db = vec![T::zero(); fout];
    for row in dy.chunks(fout) {
        db.iter_mut().zip(row).for_each(|(a, &b)| *a += b);
    }
    Ok(LinearGrads {
        input: Tensor::from_parts(vec![n, fin], dx),
        weight: Tensor::from_parts(vec![fout, fin], dw),
        bias: Tensor::from_parts(vec![fout], db),
    })
}

#[derive(Clone, Debug)]
pub struct Linear<T = f32> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

impl<T: Float> Linear<T> {
    pub fn new(name: &str, fin: usize, fout: usize, rng: &mut Rng) -> Self {
        Self {
            weight: Parameter::new(format!("{name}.weight"), he_normal(&[fout, fin], fin, rng)),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[fout])),
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        linear(x, self.weight.value(), self.bias.value())
    }

    pub fn backward(&mut self, x: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let g = linear_backward(x, self.weight.value(), grad_out)?;
        self.weight.accumulate_grad(&g.weight)?;
        self.bias.accumulate_grad(&g.bias)?;
        Ok(g.input)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.weight);
        f(&self.bias);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.weight);
        f(&mut self.bias);
    }
}
