use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Avg,
    Max,
}

/// A pooled tensor plus, for max pooling, the flat input index each output
/// element was taken from.
#[derive(Clone, Debug)]
pub struct Pooled<T> {
    pub out: Tensor<T>,
    pub argmax: Option<Vec<usize>>,
}

/// Pools every `(n, c)` volume to one value: `[N,C,D,H,W] → [N,C,1,1,1]`.
/// Max ties resolve to the first element in row-major order.
pub fn global_pool3d<T: Float>(x: &Tensor<T>, mode: PoolMode) -> Result<Pooled<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let vol = d * h * w;
    let mut out = Vec::with_capacity(n * c);
    let mut argmax = Vec::new();
    for (i, plane) in x.data().chunks(vol).enumerate() {
        match mode {
            PoolMode::Avg => out.push(plane.iter().copied().sum::<T>() / T::of(vol as f64)),
            PoolMode::Max => {
                let (mut best, mut at) = (plane[0], 0);
                for (j, &v) in plane.iter().enumerate().skip(1) {
                    if v > best {
                        best = v;
                        at = j;
                    }
                }
                out.push(best);
                argmax.push(i * vol + at);
            }
        }
    }
    Ok(Pooled {
        out: Tensor::from_parts(vec![n, c, 1, 1, 1], out),
        argmax: (mode == PoolMode::Max).then_some(argmax),
    })
}

pub fn global_pool3d_backward<T: Float>(
    input_dims: &[usize],
    pooled: &Pooled<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let total: usize = input_dims.iter().product();
    let planes = grad_out.len();
    if pooled.out.dims() != grad_out.dims() || planes == 0 || total % planes != 0 {
        return Err(Error::ShapeMismatch {
            op: "global_pool3d_backward",
            left: pooled.out.dims().to_vec(),
            right: grad_out.dims().to_vec(),
        });
    }
    let vol = total / planes;
    let mut dx = vec![T::zero(); total];
    match &pooled.argmax {
        None => {
            let inv = T::one() / T::of(vol as f64);
            for (plane, &g) in dx.chunks_mut(vol).zip(grad_out.data()) {
                plane.fill(g * inv);
            }
        }
        Some(idx) => {
            for (&i, &g) in idx.iter().zip(grad_out.data()) {
                dx[i] += g;
            }
        }
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), dx))
}

/// Mean or max across channels at every voxel: `[N,C,D,H,W] → [N,1,D,H,W]`.
pub fn channel_pool<T: Float>(x: &Tensor<T>, mode: PoolMode) -> Result<Pooled<T>> {
    let [n, c, d, h, w] = x.dims5()?;
    let vol = d * h * w;
    let mut out = vec![T::zero(); n * vol];
    let mut argmax = vec![0usize; if mode == PoolMode::Max { n * vol } else { 0 }];
    for b in 0..n {
        let o = &mut out[b * vol..(b + 1) * vol];
        let base = b * c * vol;
        o.copy_from_slice(&x.data()[base..base + vol]);
        if mode == PoolMode::Max {
            argmax[b * vol..(b + 1) * vol]
                .iter_mut()
                .enumerate()
                .for_each(|(v, a)| *a = base + v);
        }
        for ch in 1..c {
            let plane = &x.data()[base + ch * vol..base + (ch + 1) * vol];
            match mode {
                PoolMode::Avg => o.iter_mut().zip(plane).for_each(|(a, &v)| *a += v),
                PoolMode::Max => {
                    for (v, (a, &xv)) in o.iter_mut().zip(plane).enumerate() {
                        if xv > *a {
                            *a = xv;
                            argmax[b * vol + v] = base + ch * vol + v;
                        }
                    }
                }
            }
        }
        if mode == PoolMode::Avg {
            let inv = T::one() / T::of(c as f64);
            o.iter_mut().for_each(|a| *a *= inv);
        }
    }
    Ok(Pooled {
        out: Tensor::from_parts(vec![n, 1, d, h, w], out),
        argmax: (mode == PoolMode::Max).then_some(argmax),
    })
}

pub fn channel_pool_backward<T: Float>(
    input_dims: &[usize],
    pooled: &Pooled<T>,
    grad_out: &Tensor<T>,
) -> Result<Tensor<T>> {
    let &[n, c, d, h, w] = input_dims else {
        return Err(Error::InvalidShape {
            dims: input_dims.to_vec(),
            reason: "expected 5-D input dims".into(),
        });
    };
    if grad_out.dims() != [n, 1, d, h, w] {
        return Err(Error::ShapeMismatch {
            op: "channel_pool_backward",
            left: vec![n, 1, d, h, w],
            right: grad_out.dims().to_vec(),
        });
    }
    let vol = d * h * w;
    let mut dx = vec![T::zero(); n * c * vol];
    match &pooled.argmax {
        None => {
            let inv = T::one() / T::of(c as f64);
            for b in 0..n {
                let g = &grad_out.data()[b * vol..(b + 1) * vol];
                for ch in 0..c {
                    let base = (b * c + ch) * vol;
                    dx[base..base + vol]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &gv)| *a = gv * inv);
                }
            }
        }
        Some(idx) => {
            for (&i, &g) in idx.iter().zip(grad_out.data()) {
                dx[i] += g;
            }
        }
    }
    Ok(Tensor::from_parts(input_dims.to_vec(), dx))
}

/// Stacks `b`'s channels after `a`'s.
pub fn concat_channel<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, ca, d, h, w] = a.dims5()?;
    let [nb, cb, db, hb, wb] = b.dims5()?;
    if (n, d, h, w) != (nb, db, hb, wb) {
        return Err(Error::ShapeMismatch {
            op: "concat_channel",
            left: a.dims().to_vec(),
            right: b.dims().to_vec(),
        });
    }
    let vol = d * h * w;
    let mut out = Vec::with_capacity(a.len() + b.len());
    for i in 0..n {
        out.extend_from_slice(&a.data()[i * ca * vol..(i + 1) * ca * vol]);
        out.extend_from_slice(&b.data()[i * cb * vol..(i + 1) * cb * vol]);
    }
    Ok(Tensor::from_parts(vec![n, ca + cb, d, h, w], out))
}

/// Inverse of [`concat_channel`]: the first `ca` channels, then the rest.
pub fn split_channel<T: Float>(x: &Tensor<T>, ca: usize) -> Result<(Tensor<T>, Tensor<T>)> {
    let [n, c, d, h, w] = x.dims5()?;
    if ca == 0 || ca >= c {
        return Err(Error::InvalidArgument(format!(
            "cannot split {c} channels at {ca}"
        )));
    }
    let vol = d * h * w;
    let cb = c - ca;
    let mut a = Vec::with_capacity(n * ca * vol);
    let mut b = Vec::with_capacity(n * cb * vol);
    for i in 0..n {
        let base = i * c * vol;
        a.extend_from_slice(&x.data()[base..base + ca * vol]);
        b.extend_from_slice(&x.data()[base + ca * vol..base + c * vol]);
    }
    Ok((
        Tensor::from_parts(vec![n, ca, d, h, w], a),
        Tensor::from_parts(vec![n, cb, d, h, w], b),
    ))
}
