//! Parameter update rules with coupled L2 regularization: the gradient used
//! by both rules is `grad + weight_decay · value`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{ParamSet, Parameter};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimKind {
    SgdMomentum,
    Adam,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub kind: OptimKind,
    pub lr: f64,
    /// SGD momentum, or Adam's first-moment decay.
    pub momentum: f64,
    pub beta2: f64,
    pub weight_decay: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self::desk()
    }
}

impl OptimConfig {
    /// Adam tuned for small synthetic runs.
    pub fn desk() -> Self {
        Self {
            kind: OptimKind::Adam,
            lr: 1e-3,
            momentum: 0.9,
            beta2: 0.999,
            weight_decay: 1e-6,
            eps: 1e-8,
        }
    }

    /// Momentum SGD with the published learning rate and L2 weight.
    pub fn reference_sgd() -> Self {
        Self {
            kind: OptimKind::SgdMomentum,
            lr: 1e-6,
            ..Self::desk()
        }
    }

    pub fn sgd(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimKind::SgdMomentum,
            lr,
            momentum,
            weight_decay,
            ..Self::desk()
        }
    }

    pub fn adam(lr: f64) -> Self {
        Self {
            lr,
            weight_decay: 0.0,
            ..Self::desk()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lr > 0.0
            && self.lr.is_finite()
            && (0.0..1.0).contains(&self.momentum)
            && (0.0..1.0).contains(&self.beta2)
            && self.weight_decay >= 0.0
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "optimizer needs lr > 0, momentum/beta2 in [0, 1), weight_decay ≥ 0, eps > 0; got {self:?}"
            )))
        }
    }
}

/// Per-parameter slots, keyed by registry order.
#[derive(Clone, Debug)]
pub struct Optimizer<T = f32> {
    config: OptimConfig,
    step: u64,
    first: Vec<Tensor<T>>,
    second: Vec<Tensor<T>>,
}

impl<T: Float> Optimizer<T> {
    pub fn new(config: OptimConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        })
    }

    pub fn config(&self) -> &OptimConfig {
        &self.config
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Velocity (SGD) or first moment (Adam) of the `i`-th parameter.
    pub fn first_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.first.get(i)
    }

    pub fn second_moment(&self, i: usize) -> Option<&Tensor<T>> {
        self.second.get(i)
    }

    /// Applies one update to every parameter. Fails without touching any
    /// value if some parameter has no gradient.
    pub fn step<P: ParamSet<T> + ?Sized>(&mut self, params: &mut P) -> Result<()> {
        let mut missing = None;
        let mut dims = Vec::new();
        params.visit_params(&mut |p| {
            if !p.has_grad() && missing.is_none() {
                missing = Some(p.name().to_string());
            }
            dims.push(p.value().dims().to_vec());
        });
        if let Some(name) = missing {
            return Err(Error::MissingGradient(name));
        }
        if self.first.is_empty() {
            self.first = dims.iter().map(|d| Tensor::zeros(d)).collect();
            if self.config.kind == OptimKind::Adam {
                self.second = self.first.clone();
            }
        } else if self.first.len() != dims.len()
            || (self.config.kind == OptimKind::Adam && self.second.len() != dims.len())
            || self.first.iter().zip(&dims).any(|(s, d)| s.dims() != d.as_slice())
        {
            return Err(Error::InvalidArgument(
                "optimizer state does not match the parameter set".into(),
            ));
        }
        self.step += 1;
        let c = self.config.clone();
        let t = self.step as i32;
        let mut i = 0;
        params.visit_params_mut(&mut |p: &mut Parameter<T>| {
            let grad = p.grad().data().to_vec();
            let first = self.first[i].data_mut();
            match c.kind {
                OptimKind::SgdMomentum => {
                    let (lr, mu, wd) = (T::of(c.lr), T::of(c.momentum), T::of(c.weight_decay));
                    for ((w, v), g) in p.value_mut().iter_mut().zip(first.iter_mut()).zip(&grad) {
                        let g = *g + wd * *w;
                        *v = mu * *v + g;
                        *w -= lr * *v;
                    }
                }
                OptimKind::Adam => {
                    let second = self.second[i].data_mut();
                    let (b1, b2) = (c.momentum, c.beta2);
                    let bc1 = 1.0 - b1.powi(t);
                    let bc2 = 1.0 - b2.powi(t);
                    let (b1t, b2t, wd, eps) = (T::of(b1), T::of(b2), T::of(c.weight_decay), T::of(c.eps));
                    let (lr_hat, sq_bc2) = (T::of(c.lr / bc1), T::of(bc2.sqrt()));
                    for (((w, m), v), g) in p
                        .value_mut()
                        .iter_mut()
                        .zip(first.iter_mut())
                        .zip(second.iter_mut())
                        .zip(&grad)
                    {
                        let g = *g + wd * *w;
                        *m = b1t * *m + (T::one() - b1t) * g;
                        *v = b2t * *v + (T::one() - b2t) * g * g;
                        *w -= lr_hat * *m / ((*v).sqrt() / sq_bc2 + eps);
                    }
                }
            }
            i += 1;
        });
        Ok(())
    }

    /// `(step count, first moments, second moments)` in registry order.
    pub fn export_state(&self) -> (u64, Vec<Tensor<T>>, Vec<Tensor<T>>) {
        (self.step, self.first.clone(), self.second.clone())
    }

    pub fn import_state(&mut self, step: u64, first: Vec<Tensor<T>>, second: Vec<Tensor<T>>) {
        self.step = step;
        self.first = first;
        self.second = second;
    }
}

/// Clears every gradient in the set.
pub fn zero_grads<T: Float, P: ParamSet<T> + ?Sized>(params: &mut P) {
    params.visit_params_mut(&mut |p| p.zero_grad());
}
