//! Helpers shared by the integration tests: finite-difference gradient
//! checking and independent reference implementations.
#![allow(dead_code)]

use dam3d::attention::{ChannelAttention, DualAttention, SpatialAttention};
use dam3d::data::{generate_synthetic, SynthConfig, VolumeRecord};
use dam3d::model::{Backbone, ModelConfig};
use dam3d::nn::{
    channel_pool, channel_pool_backward, global_pool3d, global_pool3d_backward, relu, relu_backward, sigmoid, sigmoid_backward, softmax_cross_entropy,
    BatchNorm3d, Conv3d, ConvGeometry, Linear, Mode, ParamSet, Parameter, PoolMode,
};
use dam3d::rng::Rng;
use dam3d::tensor::{broadcast_mul_channel, broadcast_mul_spatial, Tensor};

pub fn rand64(dims: &[usize], seed: u64) -> Tensor<f64> {
    let mut r = Rng::new(seed);
    let n = dims.iter().product();
    Tensor::new(dims.to_vec(), (0..n).map(|_| r.normal()).collect()).unwrap()
}

pub fn rand32(dims: &[usize], seed: u64) -> Tensor<f32> {
    rand64(dims, seed).cast()
}

/// Pushes every value at least `margin` away from zero, keeping its sign.
pub fn away_from_zero(t: &Tensor<f64>, margin: f64) -> Tensor<f64> {
    t.map(|v| if v >= 0.0 { v + margin } else { v - margin })
}

pub const FD_STEP: f64 = 1e-6;

/// `‖a − n‖ / max(‖a‖, ‖n‖)`; zero when both norms are below 1e-12.
pub fn rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut analytic.iter().zip(numeric).map(|(a, b)| a - b));
    let scale = norm(&mut analytic.iter().copied()).max(norm(&mut numeric.iter().copied()));
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

/// Central difference of `f` at every coordinate of `x`.
pub fn numeric_grad(x: &Tensor<f64>, mut f: impl FnMut(&Tensor<f64>) -> f64) -> Vec<f64> {
    let mut probe = x.clone();
    (0..x.len())
        .map(|i| {
            let v = x.data()[i];
            probe.data_mut()[i] = v + FD_STEP;
            let up = f(&probe);
            probe.data_mut()[i] = v - FD_STEP;
            let down = f(&probe);
            probe.data_mut()[i] = v;
            (up - down) / (2.0 * FD_STEP)
        })
        .collect()
}

fn dot(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| x * y).sum()
}

/// A differentiable map with learnable parameters, checked through the
/// scalar probe `L = Σ forward(x) ⊙ R`.
pub trait Checkable: Clone {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64>;
    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64>;
    fn visit(&self, _f: &mut dyn FnMut(&Parameter<f64>)) {}
    fn visit_mut(&mut self, _f: &mut dyn FnMut(&mut Parameter<f64>)) {}
}

/// Relative error for the input and every parameter tensor.
pub fn check_layer<L: Checkable>(layer: &L, x: &Tensor<f64>, seed: u64) -> Vec<(String, f64)> {
    let probe = rand64(layer.forward(x).dims(), seed);
    let loss = |l: &L, x: &Tensor<f64>| dot(&l.forward(x), &probe);

    let mut analytic = layer.clone();
    analytic.visit_mut(&mut |p| p.zero_grad());
    let dx = analytic.backward(x, &probe);
    let mut out = vec![("input".to_string(), rel_err(dx.data(), &numeric_grad(x, |x| loss(layer, x))))];

    let mut grads = Vec::new();
    analytic.visit(&mut |p| grads.push((p.name().to_string(), p.grad().data().to_vec(), p.value().clone())));
    for (pi, (name, g, value)) in grads.into_iter().enumerate() {
        let numeric = numeric_grad(&value, |v| {
            let mut l = layer.clone();
            let mut i = 0;
            l.visit_mut(&mut |p| {
                if i == pi {
                    p.set_value(v.clone()).unwrap();
                }
                i += 1;
            });
            loss(&l, x)
        });
        out.push((name, rel_err(&g, &numeric)));
    }
    out
}

impl Checkable for Conv3d<f64> {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        Conv3d::forward(self, x).unwrap()
    }
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        Conv3d::backward(self, x, dy).unwrap()
    }
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        Conv3d::visit(self, f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        Conv3d::visit_mut(self, f)
    }
}

impl Checkable for Linear<f64> {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        Linear::forward(self, x).unwrap()
    }
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        Linear::backward(self, x, dy).unwrap()
    }
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        Linear::visit(self, f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        Linear::visit_mut(self, f)
    }
}

#[derive(Clone)]
pub struct Bn(pub BatchNorm3d<f64>, pub Mode);

impl Checkable for Bn {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        self.0.forward(x, self.1).unwrap().0
    }
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        let (_, cache) = self.0.forward(x, self.1).unwrap();
        self.0.backward(&cache, dy).unwrap()
    }
    fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
        self.0.visit(f)
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
        self.0.visit_mut(f)
    }
}

macro_rules! attention_checkable {
    ($ty:ty, |$s:ident, $c:ident, $dy:ident| $bwd:expr) => {
        impl Checkable for $ty {
            fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
                <$ty>::forward(self, x).unwrap().0
            }
            fn backward(&mut self, x: &Tensor<f64>, $dy: &Tensor<f64>) -> Tensor<f64> {
                let (_, $c) = <$ty>::forward(self, x).unwrap();
                let $s = self;
                $bwd
            }
            fn visit(&self, f: &mut dyn FnMut(&Parameter<f64>)) {
                <$ty>::visit(self, f)
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<f64>)) {
                <$ty>::visit_mut(self, f)
            }
        }
    };
}

attention_checkable!(ChannelAttention<f64>, |s, c, dy| s.backward(&c, dy).unwrap());
attention_checkable!(SpatialAttention<f64>, |s, c, dy| s.backward(&c, dy).unwrap());
attention_checkable!(DualAttention<f64>, |s, c, dy| s.backward(&c, dy).unwrap().input);

/// A parameterless op given as forward and vector-Jacobian product.
#[derive(Clone)]
pub struct Op {
    pub forward: fn(&Tensor<f64>) -> Tensor<f64>,
    pub backward: fn(&Tensor<f64>, &Tensor<f64>) -> Tensor<f64>,
}

impl Checkable for Op {
    fn forward(&self, x: &Tensor<f64>) -> Tensor<f64> {
        (self.forward)(x)
    }
    fn backward(&mut self, x: &Tensor<f64>, dy: &Tensor<f64>) -> Tensor<f64> {
        (self.backward)(x, dy)
    }
}

pub fn max_err(results: &[(String, f64)]) -> f64 {
    results.iter().map(|r| r.1).fold(0.0, f64::max)
}

/// Gradient checks of every differentiable building block, as
/// `(check name, worst relative error)`.
pub fn op_gradient_suite() -> Vec<(String, f64)> {
    let mut rng = Rng::new(11);
    let mut out = Vec::new();
    let mut push = |name: &str, r: Vec<(String, f64)>| out.push((name.to_string(), max_err(&r)));

    for (i, (k, stride, pad)) in [(3, 1, 1), (3, 2, 1), (1, 2, 0), (2, 1, 0)].into_iter().enumerate() {
        let c = Conv3d::<f64>::new("c", 2, 3, k, ConvGeometry::new(stride, pad), true, &mut rng);
        let x = rand64(&[2, 2, 5, 4, 3], 100 + i as u64);
        push(&format!("conv3d k{k} s{stride} p{pad}"), check_layer(&c, &x, 1));
    }
    let lin = Linear::<f64>::new("fc", 4, 3, &mut rng);
    push("linear", check_layer(&lin, &rand64(&[3, 4], 2), 3));

    let x5 = rand64(&[2, 3, 3, 2, 4], 4);
    let mut bn = BatchNorm3d::<f64>::new("bn", 3);
    bn.gamma.set_value(rand64(&[3], 5)).unwrap();
    bn.beta.set_value(rand64(&[3], 6)).unwrap();
    push("batchnorm train", check_layer(&Bn(bn.clone(), Mode::Train), &x5, 7));
    bn.running_mean = rand64(&[3], 8);
    bn.running_var = rand64(&[3], 9).map(|v| v.abs() + 0.5);
    push("batchnorm eval", check_layer(&Bn(bn, Mode::Eval), &x5, 10));

    let ops: [(&str, Op); 8] = [
        ("relu", Op { forward: |x| relu(x), backward: |x, dy| relu_backward(x, dy).unwrap() }),
        ("sigmoid", Op { forward: |x| sigmoid(x), backward: |x, dy| sigmoid_backward(&sigmoid(x), dy).unwrap() }),
        (
            "global avg pool",
            Op {
                forward: |x| global_pool3d(x, PoolMode::Avg).unwrap().out,
                backward: |x, dy| global_pool3d_backward(x.dims(), &global_pool3d(x, PoolMode::Avg).unwrap(), dy).unwrap(),
            },
        ),
        (
            "global max pool",
            Op {
                forward: |x| global_pool3d(x, PoolMode::Max).unwrap().out,
                backward: |x, dy| global_pool3d_backward(x.dims(), &global_pool3d(x, PoolMode::Max).unwrap(), dy).unwrap(),
            },
        ),
        (
            "channel avg pool",
            Op {
                forward: |x| channel_pool(x, PoolMode::Avg).unwrap().out,
                backward: |x, dy| channel_pool_backward(x.dims(), &channel_pool(x, PoolMode::Avg).unwrap(), dy).unwrap(),
            },
        ),
        (
            "channel max pool",
            Op {
                forward: |x| channel_pool(x, PoolMode::Max).unwrap().out,
                backward: |x, dy| channel_pool_backward(x.dims(), &channel_pool(x, PoolMode::Max).unwrap(), dy).unwrap(),
            },
        ),
        (
            "channel gating (input side)",
            Op {
                forward: |x| broadcast_mul_channel(x, &rand64(&[2, 3, 1, 1, 1], 77)).unwrap(),
                backward: |_, dy| broadcast_mul_channel(dy, &rand64(&[2, 3, 1, 1, 1], 77)).unwrap(),
            },
        ),
        (
            "spatial gating (input side)",
            Op {
                forward: |x| broadcast_mul_spatial(x, &rand64(&[2, 1, 3, 2, 4], 78)).unwrap(),
                backward: |_, dy| broadcast_mul_spatial(dy, &rand64(&[2, 1, 3, 2, 4], 78)).unwrap(),
            },
        ),
    ];
    let x_relu = away_from_zero(&x5, 0.05);
    for (i, (name, op)) in ops.into_iter().enumerate() {
        let x = if name == "relu" { &x_relu } else { &x5 };
        push(name, check_layer(&op, x, 20 + i as u64));
    }

    let logits = rand64(&[4, 3], 30);
    let labels = [0usize, 2, 1, 2];
    let (_, g) = softmax_cross_entropy(&logits, &labels).unwrap();
    let n = numeric_grad(&logits, |l| softmax_cross_entropy(l, &labels).unwrap().0);
    out.push(("softmax cross-entropy".into(), rel_err(g.data(), &n)));

    let f = rand64(&[2, 8, 4, 3, 5], 31);
    let ca = ChannelAttention::<f64>::new("ca", 8, 4, &mut rng);
    out.push(("channel attention".into(), max_err(&check_layer(&ca, &f, 32))));
    for (merge, tag) in [(dam3d::attention::SpatialMerge::Concat, "concat"), (dam3d::attention::SpatialMerge::Sum, "sum")] {
        let sa = SpatialAttention::<f64>::new("sa", 3, merge, &mut rng);
        out.push((format!("spatial attention ({tag})"), max_err(&check_layer(&sa, &f, 33))));
    }
    let dam = DualAttention::<f64>::new("dam", 8, 4, 3, Default::default(), &mut rng);
    out.push(("dual attention".into(), max_err(&check_layer(&dam, &f, 34))));
    out
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        widths: [2, 2, 2, 2],
        input_size: [16, 16, 16],
        seed: 5,
        ..ModelConfig::default()
    }
}

/// End-to-end check of every parameter of a `[2,2,2,2]`-width model on two
/// 16³ volumes, in train mode. Returns `(parameter, rel. error)`.
pub fn end_to_end_gradient_check() -> Vec<(String, f64)> {
    let model = Backbone::<f64>::build(&tiny_model_config()).unwrap();
    let x = rand64(&[2, 1, 16, 16, 16], 40);
    let labels = [0usize, 1];
    let loss = |m: &Backbone<f64>| {
        let t = m.run(&x, Mode::Train).unwrap();
        softmax_cross_entropy(&t.logits, &labels).unwrap().0
    };
    let mut analytic = model.clone();
    analytic.zero_grads();
    let trace = analytic.run(&x, Mode::Train).unwrap();
    let (_, d) = softmax_cross_entropy(&trace.logits, &labels).unwrap();
    analytic.backward(&trace, &d).unwrap();
    let mut grads = Vec::new();
    analytic.visit_params(&mut |p| grads.push((p.name().to_string(), p.grad().data().to_vec(), p.value().clone())));
    grads
        .into_iter()
        .enumerate()
        .map(|(pi, (name, g, value))| {
            let numeric = numeric_grad(&value, |v| {
                let mut m = model.clone();
                let mut i = 0;
                m.visit_params_mut(&mut |p| {
                    if i == pi {
                        p.set_value(v.clone()).unwrap();
                    }
                    i += 1;
                });
                loss(&m)
            });
            (name, rel_err(&g, &numeric))
        })
        .collect()
}

/// Direct seven-deep loop convolution with zero padding, in f64.
pub fn naive_conv3d(x: &Tensor<f64>, w: &Tensor<f64>, b: Option<&Tensor<f64>>, stride: usize, pad: usize) -> Tensor<f64> {
    let [n, cin, d, h, wd] = x.dims5().unwrap();
    let [cout, _, k, _, _] = w.dims5().unwrap();
    let out_ext = |e: usize| (e + 2 * pad - k) / stride + 1;
    let (od, oh, ow) = (out_ext(d), out_ext(h), out_ext(wd));
    let mut out = vec![0.0; n * cout * od * oh * ow];
    let mut o = 0;
    for b_ in 0..n {
        for co in 0..cout {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b.data()[co]);
                        for ci in 0..cin {
                            for kz in 0..k {
                                for ky in 0..k {
                                    for kx in 0..k {
                                        let iz = (z * stride + kz) as isize - pad as isize;
                                        let iy = (y * stride + ky) as isize - pad as isize;
                                        let ix = (xx * stride + kx) as isize - pad as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        acc += x.get(&[b_, ci, iz as usize, iy as usize, ix as usize])
                                            * w.get(&[co, ci, kz, ky, kx]);
                                    }
                                }
                            }
                        }
                        out[o] = acc;
                        o += 1;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, od, oh, ow], out).unwrap()
}

/// AUC by enumerating every (positive, negative) pair.
pub fn pair_count_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut twice_credit, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1;
                twice_credit += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice_credit as f64 / (2 * pairs) as f64
}

/// Parameter count from the layer-shape formulas.
pub fn closed_form_parameter_count(c: &ModelConfig) -> usize {
    let k3 = c.conv_kernel.pow(3);
    let [w0, w1, w2, w3] = c.widths;
    let bn = |ch: usize| 2 * ch;
    let stem = c.input_channels * w0 * k3 + bn(w0);
    let block = |i: usize, o: usize| o * i * k3 + o * o * k3 + o * i + 3 * bn(o);
    let [ks1, ks2] = c.attention_kernels();
    let merged = match c.spatial_merge {
        dam3d::attention::SpatialMerge::Concat => 2,
        dam3d::attention::SpatialMerge::Sum => 1,
    };
    let dam = |ch: usize, ks: usize| {
        let hid = (ch / c.reduction).max(1);
        hid * ch + hid + ch * hid + ch + merged * ks.pow(3) + 1
    };
    stem + block(w0, w1) + block(w1, w2) + dam(w2, ks1) + block(w2, w3) + dam(w3, ks2) + c.num_classes * w3 + c.num_classes
}

/// Writes a phantom dataset of `2·n` subjects and returns its records.
pub fn phantom_dataset(dir: &std::path::Path, size: usize, n: usize, seed: u64, tag: &str, shift: f64) -> Vec<VolumeRecord> {
    let cfg = SynthConfig {
        n_per_class: n,
        seed,
        ..SynthConfig::for_size(size).shifted(tag, shift)
    };
    generate_synthetic(&cfg, dir).unwrap()
}
