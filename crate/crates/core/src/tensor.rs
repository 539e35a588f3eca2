//! Dense row-major tensors and the primitive array operations the network is
//! built from.
//!
//! Feature maps use the fixed layout `(N, C, D, H, W)`. Every operation
//! returns a fresh dense tensor; there are no views or strides.

use crate::error::{Error, Result};
use crate::float::Float;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T = f32> {
    dims: Vec<usize>,
    data: Vec<T>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryOp {
    Add,
    Mul,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceMode {
    Mean,
    Max,
}

impl<T: Float> Tensor<T> {
    /// Builds a tensor, checking that `dims` matches `data.len()` and that
    /// every element is finite.
    pub fn new(dims: Vec<usize>, data: Vec<T>) -> Result<Self> {
        check_dims(&dims)?;
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::InvalidShape {
                dims,
                reason: format!("implies {expected} elements, got {}", data.len()),
            });
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("Tensor::new"));
        }
        Ok(Self { dims, data })
    }

    /// Crate-internal constructor for results whose shape is correct by
    /// construction.
    pub(crate) fn from_parts(dims: Vec<usize>, data: Vec<T>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), data.len());
        Self { dims, data }
    }

    pub fn zeros(dims: &[usize]) -> Self {
        Self::full(dims, T::zero())
    }

    pub fn ones(dims: &[usize]) -> Self {
        Self::full(dims, T::one())
    }

    pub fn full(dims: &[usize], value: T) -> Self {
        let n = dims.iter().product();
        Self {
            dims: dims.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn zeros_like(other: &Self) -> Self {
        Self::zeros(&other.dims)
    }

    pub fn scalar(value: T) -> Self {
        Self {
            dims: vec![1],
            data: vec![value],
        }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn rank(&self) -> usize {
        self.dims.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |acc, v| if v.abs() > acc { v.abs() } else { acc })
    }

    pub fn sum(&self) -> T {
        self.data.iter().copied().sum()
    }

    /// Same data under a new shape with the same element count.
    pub fn reshape(self, dims: &[usize]) -> Result<Self> {
        check_dims(dims)?;
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.dims,
                right: dims.to_vec(),
            });
        }
        Ok(Self {
            dims: dims.to_vec(),
            data: self.data,
        })
    }

    pub fn cast<U: Float>(&self) -> Tensor<U> {
        Tensor {
            dims: self.dims.clone(),
            data: self.data.iter().map(|v| U::of(v.as_f64())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            dims: self.dims.clone(),
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| v * s)
    }

    /// Interprets the tensor as a 5-D feature map `(N, C, D, H, W)`.
    pub fn dims5(&self) -> Result<[usize; 5]> {
        match self.dims.as_slice() {
            &[n, c, d, h, w] => Ok([n, c, d, h, w]),
            other => Err(Error::InvalidShape {
                dims: other.to_vec(),
                reason: "expected a 5-D (N, C, D, H, W) tensor".into(),
            }),
        }
    }

    pub fn dims2(&self) -> Result<[usize; 2]> {
        match self.dims.as_slice() {
            &[a, b] => Ok([a, b]),
            other => Err(Error::InvalidShape {
                dims: other.to_vec(),
                reason: "expected a 2-D tensor".into(),
            }),
        }
    }

    /// Flat row-major offset of a multi-index.
    pub fn offset(&self, index: &[usize]) -> usize {
        debug_assert_eq!(index.len(), self.dims.len());
        index
            .iter()
            .zip(&self.dims)
            .fold(0, |acc, (&i, &d)| acc * d + i)
    }

    pub fn get(&self, index: &[usize]) -> T {
        self.data[self.offset(index)]
    }

    /// Slice `n` along the leading axis, keeping a leading extent of 1.
    pub fn batch_item(&self, n: usize) -> Result<Self> {
        let Some((&batch, rest)) = self.dims.split_first() else {
            return Err(Error::Empty("batch_item"));
        };
        if n >= batch {
            return Err(Error::InvalidArgument(format!(
                "batch index {n} out of range for extent {batch}"
            )));
        }
        let stride: usize = rest.iter().product();
        let mut dims = vec![1];
        dims.extend_from_slice(rest);
        Ok(Self::from_parts(
            dims,
            self.data[n * stride..(n + 1) * stride].to_vec(),
        ))
    }

    /// Concatenates along the leading (batch) axis; trailing extents must agree.
    pub fn stack_batch(items: &[Self]) -> Result<Self> {
        let first = items.first().ok_or(Error::Empty("stack_batch"))?;
        let rest = &first.dims[1..];
        let mut batch = 0;
        let mut data = Vec::with_capacity(items.iter().map(Self::len).sum());
        for item in items {
            if &item.dims[1..] != rest {
                return Err(Error::ShapeMismatch {
                    op: "stack_batch",
                    left: first.dims.clone(),
                    right: item.dims.clone(),
                });
            }
            batch += item.dims[0];
            data.extend_from_slice(&item.data);
        }
        let mut dims = vec![batch];
        dims.extend_from_slice(rest);
        Ok(Self::from_parts(dims, data))
    }
}

fn check_dims(dims: &[usize]) -> Result<()> {
    if dims.is_empty() || dims.contains(&0) {
        return Err(Error::InvalidShape {
            dims: dims.to_vec(),
            reason: "extents must be positive".into(),
        });
    }
    Ok(())
}

fn finite_or<T: Float>(t: Tensor<T>, op: &'static str) -> Result<Tensor<T>> {
    if t.is_finite() {
        Ok(t)
    } else {
        Err(Error::NonFinite(op))
    }
}

pub fn elementwise<T: Float>(a: &Tensor<T>, b: &Tensor<T>, op: BinaryOp) -> Result<Tensor<T>> {
    if a.dims != b.dims {
        return Err(Error::ShapeMismatch {
            op: "elementwise",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(&x, &y)| match op {
            BinaryOp::Add => x + y,
            BinaryOp::Mul => x * y,
        })
        .collect();
    finite_or(Tensor::from_parts(a.dims.clone(), data), "elementwise")
}

pub fn add<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, BinaryOp::Add)
}

pub fn mul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    elementwise(a, b, BinaryOp::Mul)
}

/// `out[n,c,d,h,w] = x[n,c,d,h,w] * gate[n,c,0,0,0]`
pub fn broadcast_mul_channel<T: Float>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    if gate.dims != [n, c, 1, 1, 1] {
        return Err(Error::ShapeMismatch {
            op: "broadcast_mul_channel",
            left: x.dims.clone(),
            right: gate.dims.clone(),
        });
    }
    let vol = d * h * w;
    let mut out = x.data.clone();
    for (plane, &g) in out.chunks_mut(vol).zip(&gate.data) {
        plane.iter_mut().for_each(|v| *v *= g);
    }
    Ok(Tensor::from_parts(x.dims.clone(), out))
}

/// `out[n,c,d,h,w] = x[n,c,d,h,w] * gate[n,0,d,h,w]`
pub fn broadcast_mul_spatial<T: Float>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    if gate.dims != [n, 1, d, h, w] {
        return Err(Error::ShapeMismatch {
            op: "broadcast_mul_spatial",
            left: x.dims.clone(),
            right: gate.dims.clone(),
        });
    }
    let vol = d * h * w;
    let mut out = x.data.clone();
    for (i, plane) in out.chunks_mut(vol).enumerate() {
        let g = &gate.data[(i / c) * vol..(i / c + 1) * vol];
        plane.iter_mut().zip(g).for_each(|(v, &g)| *v *= g);
    }
    Ok(Tensor::from_parts(x.dims.clone(), out))
}

/// Reduces `axes` to extent 1 by arithmetic mean or maximum.
pub fn reduce<T: Float>(x: &Tensor<T>, axes: &[usize], mode: ReduceMode) -> Result<Tensor<T>> {
    if x.is_empty() {
        return Err(Error::Empty("reduce"));
    }
    let rank = x.rank();
    let mut reduced = vec![false; rank];
    for &a in axes {
        if a >= rank {
            return Err(Error::InvalidAxis { axis: a, rank });
        }
        reduced[a] = true;
    }
    let out_dims: Vec<usize> = x
        .dims
        .iter()
        .zip(&reduced)
        .map(|(&d, &r)| if r { 1 } else { d })
        .collect();
    let out_len: usize = out_dims.iter().product();
    let count = x.len() / out_len;

    // Output stride per input axis (0 on reduced axes).
    let mut out_strides = vec![0usize; rank];
    let mut s = 1;
    for ax in (0..rank).rev() {
        if !reduced[ax] {
            out_strides[ax] = s;
            s *= x.dims[ax];
        }
    }

    let mut acc = match mode {
        ReduceMode::Mean => vec![T::zero(); out_len],
        ReduceMode::Max => vec![T::neg_infinity(); out_len],
    };
    let mut idx = vec![0usize; rank];
    for &v in &x.data {
        let o: usize = idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum();
        match mode {
            ReduceMode::Mean => acc[o] += v,
            ReduceMode::Max => {
                if v > acc[o] {
                    acc[o] = v
                }
            }
        }
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < x.dims[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    if mode == ReduceMode::Mean {
        let inv = T::one() / T::of(count as f64);
        acc.iter_mut().for_each(|v| *v *= inv);
    }
    Ok(Tensor::from_parts(out_dims, acc))
}

/// `out[m,p] = Σ_k a[m,k]·b[k,p]`
pub fn matmul<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [m, k] = a.dims2()?;
    let [k2, p] = b.dims2()?;
    if k != k2 {
        return Err(Error::ShapeMismatch {
            op: "matmul",
            left: a.dims.clone(),
            right: b.dims.clone(),
        });
    }
    let mut out = vec![T::zero(); m * p];
    T::gemm(m, k, p, T::one(), &a.data, false, &b.data, false, T::zero(), &mut out);
    finite_or(Tensor::from_parts(vec![m, p], out), "matmul")
}
