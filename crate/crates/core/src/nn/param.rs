use crate::error::{Error, Result};
use crate::float::Float;
use crate::rng::Rng;
use crate::tensor::Tensor;

/// A learnable tensor together with its accumulated gradient.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameter<T = f32> {
    name: String,
    value: Tensor<T>,
    grad: Tensor<T>,
    has_grad: bool,
}

impl<T: Float> Parameter<T> {
    pub fn new(name: impl Into<String>, value: Tensor<T>) -> Self {
        let grad = Tensor::zeros_like(&value);
        Self {
            name: name.into(),
            value,
            grad,
            has_grad: false,
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.value
    }

    /// Mutable access to the values. The shape cannot change, so the
    /// gradient always matches.
    pub fn value_mut(&mut self) -> &mut [T] {
        self.value.data_mut()
    }

    pub fn grad(&self) -> &Tensor<T> {
        &self.grad
    }

    /// Whether any gradient has been accumulated since the last zeroing.
    pub fn has_grad(&self) -> bool {
        self.has_grad
    }

    pub fn accumulate_grad(&mut self, g: &Tensor<T>) -> Result<()> {
        if g.dims() != self.value.dims() {
            return Err(Error::ShapeMismatch {
                op: "accumulate_grad",
                left: self.value.dims().to_vec(),
                right: g.dims().to_vec(),
            });
        }
        self.grad
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .for_each(|(a, &b)| *a += b);
        self.has_grad = true;
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad.data_mut().iter_mut().for_each(|g| *g = T::zero());
        self.has_grad = false;
    }

    /// Replaces the value, keeping the shape.
    pub fn set_value(&mut self, value: Tensor<T>) -> Result<()> {
        if value.dims() != self.value.dims() {
            return Err(Error::ShapeMismatch {
                op: "set_value",
                left: self.value.dims().to_vec(),
                right: value.dims().to_vec(),
            });
        }
        self.value = value;
        Ok(())
    }
}

/// Anything that owns an ordered collection of parameters.
pub trait ParamSet<T: Float> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>));
    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>));

    fn parameter_count(&self) -> usize {
        let mut n = 0;
        self.visit_params(&mut |p| n += p.value().len());
        n
    }

    fn parameter_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        self.visit_params(&mut |p| names.push(p.name().to_string()));
        names
    }

    fn zero_grads(&mut self) {
        self.visit_params_mut(&mut |p| p.zero_grad());
    }
}

impl<T: Float> ParamSet<T> for Vec<Parameter<T>> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.iter().for_each(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.iter_mut().for_each(f);
    }
}

/// He-scaled normal initialization: N(0, sqrt(2 / fan_in)).
pub fn he_normal<T: Float>(dims: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = dims.iter().product();
    let data = (0..n).map(|_| T::of(std * rng.normal())).collect();
    Tensor::from_parts(dims.to_vec(), data)
}
