use crate::error::{Error, Result};
use crate::float::Float;
use crate::tensor::Tensor;

use super::param::Parameter;
use super::Mode;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

/// Per-channel batch normalization over `(N, D, H, W)`.
#[derive(Clone, Debug)]
pub struct BatchNorm3d<T = f32> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
    pub running_mean: Tensor<T>,
    pub running_var: Tensor<T>,
    pub eps: f64,
    pub momentum: f64,
    name: String,
}

/// What backward needs from a forward pass.
#[derive(Clone, Debug)]
pub struct BnCache<T> {
    mode: Mode,
    xhat: Tensor<T>,
    inv_std: Vec<T>,
    batch_mean: Vec<T>,
    batch_var: Vec<T>,
}

impl<T: Float> BatchNorm3d<T> {
    pub fn new(name: &str, channels: usize) -> Self {
        Self {
            gamma: Parameter::new(format!("{name}.gamma"), Tensor::ones(&[channels])),
            beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[channels])),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::ones(&[channels]),
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
            name: name.to_string(),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn channels(&self) -> usize {
        self.gamma.value().len()
    }

    /// Forward pass. Running statistics are left untouched; call
    /// [`BatchNorm3d::commit`] with the returned cache to update them.
    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, BnCache<T>)> {
        let [n, c, d, h, w] = x.dims5()?;
        if c != self.channels() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm3d",
                left: x.dims().to_vec(),
                right: vec![self.channels()],
            });
        }
        let vol = d * h * w;
        let count = n * vol;
        let (mean, var) = match mode {
            Mode::Train => {
                if count < 2 {
                    return Err(Error::InvalidArgument(format!(
                        "batchnorm3d `{}` in train mode needs ≥ 2 values per channel, got {count}",
                        self.name
                    )));
                }
                channel_stats(x.data(), n, c, vol)
            }
            Mode::Eval => (
                self.running_mean.data().to_vec(),
                self.running_var.data().to_vec(),
            ),
        };
        let eps = T::of(self.eps);
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gamma = self.gamma.value().data();
        let beta = self.beta.value().data();
        let mut xhat = x.data().to_vec();
        let mut y = vec![T::zero(); x.len()];
        for (i, (xh, yy)) in xhat.chunks_mut(vol).zip(y.chunks_mut(vol)).enumerate() {
            let ch = i % c;
            let (m, s, g, b) = (mean[ch], inv_std[ch], gamma[ch], beta[ch]);
            for (a, o) in xh.iter_mut().zip(yy.iter_mut()) {
                *a = (*a - m) * s;
                *o = g * *a + b;
            }
        }
        let cache = BnCache {
            mode,
            xhat: Tensor::from_parts(x.dims().to_vec(), xhat),
            inv_std,
            batch_mean: if mode == Mode::Train { mean } else { Vec::new() },
            batch_var: if mode == Mode::Train { var } else { Vec::new() },
        };
        Ok((Tensor::from_parts(x.dims().to_vec(), y), cache))
    }

    /// `running ← (1 − m)·running + m·batch` using a train-mode cache.
    pub fn commit(&mut self, cache: &BnCache<T>) {
        if cache.mode != Mode::Train {
            return;
        }
        let m = T::of(self.momentum);
        let keep = T::one() - m;
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&cache.batch_mean) {
            *r = keep * *r + m * b;
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&cache.batch_var) {
            *r = keep * *r + m * b;
        }
    }

    pub fn backward(&mut self, cache: &BnCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, d, h, w] = grad_out.dims5()?;
        if grad_out.dims() != cache.xhat.dims() {
            return Err(Error::ShapeMismatch {
                op: "batchnorm3d_backward",
                left: cache.xhat.dims().to_vec(),
                right: grad_out.dims().to_vec(),
            });
        }
        let vol = d * h * w;
        let dy = grad_out.data();
        let xhat = cache.xhat.data();
        let mut dgamma = vec![T::zero(); c];
        let mut dbeta = vec![T::zero(); c];
        for (i, (g, xh)) in dy.chunks(vol).zip(xhat.chunks(vol)).enumerate() {
            let ch = i % c;
            for (&gv, &xv) in g.iter().zip(xh) {
                dbeta[ch] += gv;
                dgamma[ch] += gv * xv;
            }
        }
        let gamma = self.gamma.value().data().to_vec();
        let mut dx = vec![T::zero(); dy.len()];
        match cache.mode {
            Mode::Train => {
                // dx = γ·inv_std/M · (M·dy − Σdy − x̂·Σ(dy·x̂))
                let m = T::of((n * vol) as f64);
                for (i, ((o, g), xh)) in dx.chunks_mut(vol).zip(dy.chunks(vol)).zip(xhat.chunks(vol)).enumerate() {
                    let ch = i % c;
                    let k = gamma[ch] * cache.inv_std[ch] / m;
                    for ((ov, &gv), &xv) in o.iter_mut().zip(g).zip(xh) {
                        *ov = k * (m * gv - dbeta[ch] - xv * dgamma[ch]);
                    }
                }
            }
            Mode::Eval => {
                for (i, (o, g)) in dx.chunks_mut(vol).zip(dy.chunks(vol)).enumerate() {
                    let ch = i % c;
                    let k = gamma[ch] * cache.inv_std[ch];
                    o.iter_mut().zip(g).for_each(|(ov, &gv)| *ov = k * gv);
                }
            }
        }
        self.gamma.accumulate_grad(&Tensor::from_parts(vec![c], dgamma))?;
        self.beta.accumulate_grad(&Tensor::from_parts(vec![c], dbeta))?;
        Ok(Tensor::from_parts(grad_out.dims().to_vec(), dx))
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        f(&self.gamma);
        f(&self.beta);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        f(&mut self.gamma);
        f(&mut self.beta);
    }
}

/// Per-channel mean and biased variance, accumulated in f64 (two-pass).
fn channel_stats<T: Float>(x: &[T], n: usize, c: usize, vol: usize) -> (Vec<T>, Vec<T>) {
    let count = (n * vol) as f64;
    let mut sum = vec![0.0f64; c];
    for (i, plane) in x.chunks(vol).enumerate() {
        sum[i % c] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / count).collect();
    let mut sq = vec![0.0f64; c];
    for (i, plane) in x.chunks(vol).enumerate() {
        let m = mean[i % c];
        sq[i % c] += plane.iter().map(|v| (v.as_f64() - m).powi(2)).sum::<f64>();
    }
    (
        mean.iter().map(|&m| T::of(m)).collect(),
        sq.iter().map(|&s| T::of(s / count)).collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::Rng;

    #[test]
    fn constant_channels_normalize_to_zero() {
        let bn = BatchNorm3d::<f64>::new("bn", 2);
        let mut data = vec![3.0; 16];
        data[8..].fill(-1.0);
        let x = Tensor::new(vec![1, 2, 2, 2, 2], data).unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn train_output_is_standardized() {
        let bn = BatchNorm3d::<f64>::new("bn", 3);
        let mut r = Rng::new(5);
        let x = Tensor::new(
            vec![2, 3, 3, 3, 3],
            (0..162).map(|i| 4.0 * r.normal() + (i % 7) as f64).collect(),
        )
        .unwrap();
        let (y, _) = bn.forward(&x, Mode::Train).unwrap();
        for ch in 0..3 {
            let vals: Vec<f64> = (0..2)
                .flat_map(|n| y.data()[(n * 3 + ch) * 27..(n * 3 + ch + 1) * 27].to_vec())
                .collect();
            let m = vals.iter().sum::<f64>() / 54.0;
            let v = vals.iter().map(|a| (a - m).powi(2)).sum::<f64>() / 54.0;
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-4, "{v}");
        }
    }

    #[test]
    fn eval_with_unit_stats_is_near_identity() {
        let bn = BatchNorm3d::<f64>::new("bn", 1);
        let x = Tensor::new(vec![1, 1, 1, 2, 2], vec![1.0, -2.0, 0.5, 4.0]).unwrap();
        let (y, _) = bn.forward(&x, Mode::Eval).unwrap();
        for (a, b) in y.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-4 * b.abs().max(1.0));
        }
    }

    #[test]
    fn single_value_train_is_error() {
        let bn = BatchNorm3d::<f64>::new("bn", 1);
        assert!(bn.forward(&Tensor::zeros(&[1, 1, 1, 1, 1]), Mode::Train).is_err());
    }

    #[test]
    fn commit_moves_running_stats() {
        let mut bn = BatchNorm3d::<f64>::new("bn", 1);
        let x = Tensor::new(vec![1, 1, 1, 1, 2], vec![1.0, 3.0]).unwrap();
        let (_, cache) = bn.forward(&x, Mode::Train).unwrap();
        bn.commit(&cache);
        assert!((bn.running_mean.data()[0] - 0.2).abs() < 1e-12);
        assert!((bn.running_var.data()[0] - (0.9 + 0.1)).abs() < 1e-12);
    }
}
