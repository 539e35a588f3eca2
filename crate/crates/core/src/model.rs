//! The full network:
//!
//! ```text
//! stem conv+BN+ReLU → RB-A → RB-B → DAM-1 → RB-C → DAM-2 → global avg pool → FC
//! ```
//!
//! Each residual block is `conv(s=2)→BN→ReLU→conv(s=1)→BN` plus a strided
//! `1×1×1 conv + BN` projection shortcut, with ReLU after the addition.
//!
//! | stage | layer            | parameters                                   |
//! |-------|------------------|----------------------------------------------|
//! | stem  | conv k³, no bias | `w0·cin·k³`                                  |
//! |       | BN               | `2·w0`                                       |
//! | RB    | conv1 k³ s2      | `out·in·k³`                                  |
//! |       | BN1, BN2, BN-skip| `3 · 2·out`                                  |
//! |       | conv2 k³ s1      | `out·out·k³`                                 |
//! |       | skip conv 1³ s2  | `out·in`                                     |
//! | DAM   | MLP              | `hid·C + hid + C·hid + C`, `hid = max(1, C/r)`|
//! |       | spatial conv     | `2·ks³ + 1` (`ks³ + 1` with sum-merge)       |
//! | head  | FC               | `classes·w3 + classes`                       |
//!
//! Convolutions followed by BN carry no bias.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attention::{effective_spatial_kernel, DamCache, DualAttention, SpatialMerge};
use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{
    conv_out_extent, global_pool3d, global_pool3d_backward, relu, relu_backward, BatchNorm3d,
    BnCache, Conv3d, ConvGeometry, Linear, Mode, ParamSet, Parameter, PoolMode, Pooled,
};
use crate::rng::Rng;
use crate::tensor::{add, Tensor};

/// Smallest accepted spatial extent per axis.
pub const MIN_INPUT_EXTENT: usize = 16;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub widths: [usize; 4],
    pub conv_kernel: usize,
    pub spatial_attn_kernel: usize,
    pub reduction: usize,
    pub num_classes: usize,
    pub input_channels: usize,
    /// Nominal input extents; used to clamp the spatial-attention kernels to
    /// the feature maps they will see.
    pub input_size: [usize; 3],
    pub spatial_merge: SpatialMerge,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            widths: [8, 16, 32, 64],
            conv_kernel: 3,
            spatial_attn_kernel: 7,
            reduction: 8,
            num_classes: 2,
            input_channels: 1,
            input_size: [32, 32, 32],
            spatial_merge: SpatialMerge::Concat,
            seed: 42,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.widths.contains(&0) {
            return Err(Error::Config(format!("widths must be positive, got {:?}", self.widths)));
        }
        for (name, k) in [
            ("conv_kernel", self.conv_kernel),
            ("spatial_attn_kernel", self.spatial_attn_kernel),
        ] {
            if k % 2 == 0 {
                return Err(Error::Config(format!("{name} must be odd, got {k}")));
            }
        }
        if self.num_classes < 2 {
            return Err(Error::Config(format!("num_classes must be ≥ 2, got {}", self.num_classes)));
        }
        if self.reduction == 0 || self.input_channels == 0 {
            return Err(Error::Config("reduction and input_channels must be positive".into()));
        }
        if self.input_size.iter().any(|&e| e < MIN_INPUT_EXTENT) {
            return Err(Error::Config(format!(
                "input_size {:?} below minimum extent {MIN_INPUT_EXTENT}",
                self.input_size
            )));
        }
        Ok(())
    }

    /// Spatial extents after the stem and each residual block.
    pub fn stage_extents(&self) -> [[usize; 3]; 4] {
        let down = |e: [usize; 3]| e.map(|x| x.div_ceil(2));
        let stem = self.input_size;
        let a = down(stem);
        let b = down(a);
        let c = down(b);
        [stem, a, b, c]
    }

    /// Spatial-attention kernels actually used by DAM-1 and DAM-2.
    pub fn attention_kernels(&self) -> [usize; 2] {
        let [_, _, b, c] = self.stage_extents();
        let min = |e: [usize; 3]| e.into_iter().min().unwrap_or(1);
        [
            effective_spatial_kernel(self.spatial_attn_kernel, min(b)),
            effective_spatial_kernel(self.spatial_attn_kernel, min(c)),
        ]
    }
}

#[derive(Clone, Debug)]
pub struct ResBlock<T = f32> {
    pub conv1: Conv3d<T>,
    pub bn1: BatchNorm3d<T>,
    pub conv2: Conv3d<T>,
    pub bn2: BatchNorm3d<T>,
    pub skip_conv: Conv3d<T>,
    pub skip_bn: BatchNorm3d<T>,
}

#[derive(Clone, Debug)]
pub struct ResCache<T> {
    input: Tensor<T>,
    bn1: BnCache<T>,
    bn1_out: Tensor<T>,
    hidden: Tensor<T>,
    bn2: BnCache<T>,
    skip_bn: BnCache<T>,
    sum: Tensor<T>,
}

impl<T: Float> ResBlock<T> {
    fn new(name: &str, cin: usize, cout: usize, k: usize, rng: &mut Rng) -> Self {
        let p = (k - 1) / 2;
        Self {
            conv1: Conv3d::new(&format!("{name}.conv1"), cin, cout, k, ConvGeometry::new(2, p), false, rng),
            bn1: BatchNorm3d::new(&format!("{name}.bn1"), cout),
            conv2: Conv3d::new(&format!("{name}.conv2"), cout, cout, k, ConvGeometry::new(1, p), false, rng),
            bn2: BatchNorm3d::new(&format!("{name}.bn2"), cout),
            skip_conv: Conv3d::new(&format!("{name}.skip.conv"), cin, cout, 1, ConvGeometry::new(2, 0), false, rng),
            skip_bn: BatchNorm3d::new(&format!("{name}.skip.bn"), cout),
        }
    }

    fn forward(&self, x: &Tensor<T>, mode: Mode) -> Result<(Tensor<T>, ResCache<T>)> {
        let (bn1_out, bn1) = self.bn1.forward(&self.conv1.forward(x)?, mode)?;
        let hidden = relu(&bn1_out);
        let (main, bn2) = self.bn2.forward(&self.conv2.forward(&hidden)?, mode)?;
        let (short, skip_bn) = self.skip_bn.forward(&self.skip_conv.forward(x)?, mode)?;
        let sum = add(&main, &short)?;
        let out = relu(&sum);
        Ok((
            out,
            ResCache {
                input: x.clone(),
                bn1,
                bn1_out,
                hidden,
                bn2,
                skip_bn,
                sum,
            },
        ))
    }

    fn backward(&mut self, c: &ResCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let d_sum = relu_backward(&c.sum, d_out)?;
        let d_short = self.skip_bn.backward(&c.skip_bn, &d_sum)?;
        let dx_short = self.skip_conv.backward(&c.input, &d_short)?;
        let d_main = self.bn2.backward(&c.bn2, &d_sum)?;
        let d_hidden = self.conv2.backward(&c.hidden, &d_main)?;
        let d_bn1 = relu_backward(&c.bn1_out, &d_hidden)?;
        let d_conv1 = self.bn1.backward(&c.bn1, &d_bn1)?;
        let dx = self.conv1.backward(&c.input, &d_conv1)?;
        add(&dx, &dx_short)
    }

    fn commit(&mut self, c: &ResCache<T>) {
        self.bn1.commit(&c.bn1);
        self.bn2.commit(&c.bn2);
        self.skip_bn.commit(&c.skip_bn);
    }

    fn bns(&self) -> [&BatchNorm3d<T>; 3] {
        [&self.bn1, &self.bn2, &self.skip_bn]
    }

    fn bns_mut(&mut self) -> [&mut BatchNorm3d<T>; 3] {
        [&mut self.bn1, &mut self.bn2, &mut self.skip_bn]
    }

    fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv1.visit(f);
        self.bn1.visit(f);
        self.conv2.visit(f);
        self.bn2.visit(f);
        self.skip_conv.visit(f);
        self.skip_bn.visit(f);
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv1.visit_mut(f);
        self.bn1.visit_mut(f);
        self.conv2.visit_mut(f);
        self.bn2.visit_mut(f);
        self.skip_conv.visit_mut(f);
        self.skip_bn.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct Backbone<T = f32> {
    config: ModelConfig,
    pub stem_conv: Conv3d<T>,
    pub stem_bn: BatchNorm3d<T>,
    pub rb_a: ResBlock<T>,
    pub rb_b: ResBlock<T>,
    pub dam1: DualAttention<T>,
    pub rb_c: ResBlock<T>,
    pub dam2: DualAttention<T>,
    pub fc: Linear<T>,
}

/// Everything a forward pass produced; consumed by [`Backbone::backward`].
#[derive(Clone, Debug)]
pub struct Trace<T> {
    pub mode: Mode,
    stem_in: Tensor<T>,
    stem_bn: BnCache<T>,
    stem_bn_out: Tensor<T>,
    pub stem_out: Tensor<T>,
    rb_a: ResCache<T>,
    pub rb_a_out: Tensor<T>,
    rb_b: ResCache<T>,
    pub rb_b_out: Tensor<T>,
    pub dam1: DamCache<T>,
    pub dam1_out: Tensor<T>,
    rb_c: ResCache<T>,
    pub rb_c_out: Tensor<T>,
    pub dam2: DamCache<T>,
    pub dam2_out: Tensor<T>,
    gap: Pooled<T>,
    gap_flat: Tensor<T>,
    pub logits: Tensor<T>,
}

/// Names of the spatial stage outputs, in network order.
pub const SPATIAL_TAPS: [&str; 8] = [
    "stem.out",
    "rb_a.out",
    "rb_b.out",
    "dam1.channel_out",
    "dam1.out",
    "rb_c.out",
    "dam2.channel_out",
    "dam2.out",
];

impl<T: Float> Trace<T> {
    /// Every tapped activation: stage outputs, attention gates and gated maps.
    pub fn taps(&self) -> BTreeMap<String, Tensor<T>> {
        let mut m = BTreeMap::new();
        let mut put = |k: &str, t: &Tensor<T>| {
            m.insert(k.to_string(), t.clone());
        };
        put("stem.out", &self.stem_out);
        put("rb_a.out", &self.rb_a_out);
        put("rb_b.out", &self.rb_b_out);
        put("dam1.channel_gate", &self.dam1.channel.gate);
        put("dam1.channel_out", &self.dam1.channel_out);
        put("dam1.spatial_gate", &self.dam1.spatial.gate);
        put("dam1.out", &self.dam1_out);
        put("rb_c.out", &self.rb_c_out);
        put("dam2.channel_gate", &self.dam2.channel.gate);
        put("dam2.channel_out", &self.dam2.channel_out);
        put("dam2.spatial_gate", &self.dam2.spatial.gate);
        put("dam2.out", &self.dam2_out);
        put("gap.out", &self.gap_flat);
        m
    }

    pub fn spatial_tap(&self, name: &str) -> Option<&Tensor<T>> {
        Some(match name {
            "stem.out" => &self.stem_out,
            "rb_a.out" => &self.rb_a_out,
            "rb_b.out" => &self.rb_b_out,
            "dam1.channel_out" => &self.dam1.channel_out,
            "dam1.out" => &self.dam1_out,
            "rb_c.out" => &self.rb_c_out,
            "dam2.channel_out" => &self.dam2.channel_out,
            "dam2.out" => &self.dam2_out,
            _ => return None,
        })
    }
}

impl<T: Float> Backbone<T> {
    /// Builds the network with He-initialized weights drawn from
    /// `config.seed`; identical configs give bit-identical parameters.
    pub fn build(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = Rng::new(config.seed);
        let [w0, w1, w2, w3] = config.widths;
        let k = config.conv_kernel;
        let [ks1, ks2] = config.attention_kernels();
        let r = config.reduction;
        let merge = config.spatial_merge;
        Ok(Self {
            config: config.clone(),
            stem_conv: Conv3d::new("stem.conv", config.input_channels, w0, k, ConvGeometry::same(k), false, &mut rng),
            stem_bn: BatchNorm3d::new("stem.bn", w0),
            rb_a: ResBlock::new("rb_a", w0, w1, k, &mut rng),
            rb_b: ResBlock::new("rb_b", w1, w2, k, &mut rng),
            dam1: DualAttention::new("dam1", w2, r, ks1, merge, &mut rng),
            rb_c: ResBlock::new("rb_c", w2, w3, k, &mut rng),
            dam2: DualAttention::new("dam2", w3, r, ks2, merge, &mut rng),
            fc: Linear::new("fc", w3, config.num_classes, &mut rng),
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let [_, c, d, h, w] = x.dims5()?;
        if c != self.config.input_channels {
            return Err(Error::ShapeMismatch {
                op: "backbone input channels",
                left: x.dims().to_vec(),
                right: vec![self.config.input_channels],
            });
        }
        let min = [MIN_INPUT_EXTENT; 3];
        if [d, h, w].iter().any(|&e| e < MIN_INPUT_EXTENT) {
            return Err(Error::InputTooSmall { got: [d, h, w], min });
        }
        // Kernel-fit check for unusual configs (e.g. large conv kernels).
        let k = self.config.conv_kernel;
        let mut e = [d, h, w];
        for _ in 0..3 {
            for x in e.iter_mut() {
                *x = conv_out_extent(*x, k, ConvGeometry::new(2, (k - 1) / 2))
                    .ok_or(Error::InputTooSmall { got: [d, h, w], min })?;
            }
        }
        Ok(())
    }

    /// Pure forward pass returning every intermediate needed for backward.
    /// Running BN statistics are not modified.
    pub fn run(&self, x: &Tensor<T>, mode: Mode) -> Result<Trace<T>> {
        self.check_input(x)?;
        let (stem_bn_out, stem_bn) = self.stem_bn.forward(&self.stem_conv.forward(x)?, mode)?;
        let stem_out = relu(&stem_bn_out);
        let (rb_a_out, rb_a) = self.rb_a.forward(&stem_out, mode)?;
        let (rb_b_out, rb_b) = self.rb_b.forward(&rb_a_out, mode)?;
        let (dam1_out, dam1) = self.dam1.forward(&rb_b_out)?;
        let (rb_c_out, rb_c) = self.rb_c.forward(&dam1_out, mode)?;
        let (dam2_out, dam2) = self.dam2.forward(&rb_c_out)?;
        let gap = global_pool3d(&dam2_out, PoolMode::Avg)?;
        let [n, c, ..] = dam2_out.dims5()?;
        let gap_flat = gap.out.clone().reshape(&[n, c])?;
        let logits = self.fc.forward(&gap_flat)?;
        Ok(Trace {
            mode,
            stem_in: x.clone(),
            stem_bn,
            stem_bn_out,
            stem_out,
            rb_a,
            rb_a_out,
            rb_b,
            rb_b_out,
            dam1,
            dam1_out,
            rb_c,
            rb_c_out,
            dam2,
            dam2_out,
            gap,
            gap_flat,
            logits,
        })
    }

    /// Logits for `x`. In train mode the BN running statistics are updated.
    pub fn forward(&mut self, x: &Tensor<T>, mode: Mode) -> Result<Tensor<T>> {
        let trace = self.run(x, mode)?;
        self.commit_running_stats(&trace);
        Ok(trace.logits)
    }

    /// Eval-mode logits without touching any state.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, Mode::Eval)?.logits)
    }

    pub fn forward_with_taps(
        &mut self,
        x: &Tensor<T>,
        mode: Mode,
    ) -> Result<(Tensor<T>, BTreeMap<String, Tensor<T>>)> {
        let trace = self.run(x, mode)?;
        self.commit_running_stats(&trace);
        let taps = trace.taps();
        Ok((trace.logits, taps))
    }

    pub fn commit_running_stats(&mut self, t: &Trace<T>) {
        if t.mode != Mode::Train {
            return;
        }
        self.stem_bn.commit(&t.stem_bn);
        self.rb_a.commit(&t.rb_a);
        self.rb_b.commit(&t.rb_b);
        self.rb_c.commit(&t.rb_c);
    }

    /// Back-propagates `d_logits`, accumulating parameter gradients, and
    /// returns the gradient at every spatial tap plus the input.
    pub fn backward(&mut self, t: &Trace<T>, d_logits: &Tensor<T>) -> Result<BTreeMap<String, Tensor<T>>> {
        let mut grads = BTreeMap::new();
        let d_gap = self.fc.backward(&t.gap_flat, d_logits)?;
        let d_gap = d_gap.reshape(t.gap.out.dims())?;
        let d_dam2 = global_pool3d_backward(t.dam2_out.dims(), &t.gap, &d_gap)?;
        let g2 = self.dam2.backward(&t.dam2, &d_dam2)?;
        let d_rb_c = self.rb_c.backward(&t.rb_c, &g2.input)?;
        let g1 = self.dam1.backward(&t.dam1, &d_rb_c)?;
        let d_rb_b = self.rb_b.backward(&t.rb_b, &g1.input)?;
        let d_rb_a = self.rb_a.backward(&t.rb_a, &d_rb_b)?;
        let d_stem_bn = relu_backward(&t.stem_bn_out, &d_rb_a)?;
        let d_stem_conv = self.stem_bn.backward(&t.stem_bn, &d_stem_bn)?;
        let d_input = self.stem_conv.backward(&t.stem_in, &d_stem_conv)?;

        grads.insert("dam2.out".to_string(), d_dam2);
        grads.insert("dam2.channel_out".to_string(), g2.channel_out);
        grads.insert("rb_c.out".to_string(), g2.input);
        grads.insert("dam1.out".to_string(), d_rb_c);
        grads.insert("dam1.channel_out".to_string(), g1.channel_out);
        grads.insert("rb_b.out".to_string(), g1.input);
        grads.insert("rb_a.out".to_string(), d_rb_b);
        grads.insert("stem.out".to_string(), d_rb_a);
        grads.insert("input".to_string(), d_input);
        Ok(grads)
    }

    fn batch_norms(&self) -> Vec<&BatchNorm3d<T>> {
        let mut v = vec![&self.stem_bn];
        for rb in [&self.rb_a, &self.rb_b, &self.rb_c] {
            v.extend(rb.bns());
        }
        v
    }

    fn batch_norms_mut(&mut self) -> Vec<&mut BatchNorm3d<T>> {
        let mut v = vec![&mut self.stem_bn];
        for rb in [&mut self.rb_a, &mut self.rb_b, &mut self.rb_c] {
            v.extend(rb.bns_mut());
        }
        v
    }

    /// Visits the non-learnable state (BN running statistics) by name.
    pub fn visit_buffers(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for bn in self.batch_norms() {
            f(&format!("{}.running_mean", bn.name()), &bn.running_mean);
            f(&format!("{}.running_var", bn.name()), &bn.running_var);
        }
    }

    pub fn visit_buffers_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for bn in self.batch_norms_mut() {
            let name = bn.name().to_string();
            f(&format!("{name}.running_mean"), &mut bn.running_mean);
            f(&format!("{name}.running_var"), &mut bn.running_var);
        }
    }

    /// Names of the spatial taps usable for attribution.
    pub fn tap_names(&self) -> Vec<&'static str> {
        SPATIAL_TAPS.to_vec()
    }
}

impl<T: Float> ParamSet<T> for Backbone<T> {
    fn visit_params(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.stem_conv.visit(f);
        self.stem_bn.visit(f);
        self.rb_a.visit(f);
        self.rb_b.visit(f);
        self.dam1.visit(f);
        self.rb_c.visit(f);
        self.dam2.visit(f);
        self.fc.visit(f);
    }

    fn visit_params_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.stem_conv.visit_mut(f);
        self.stem_bn.visit_mut(f);
        self.rb_a.visit_mut(f);
        self.rb_b.visit_mut(f);
        self.dam1.visit_mut(f);
        self.rb_c.visit_mut(f);
        self.dam2.visit_mut(f);
        self.fc.visit_mut(f);
    }
}
