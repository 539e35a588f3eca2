//! Dual attention: a channel gate computed from globally pooled descriptors
//! through a shared two-layer MLP, followed by a spatial gate computed by a
//! convolution over channel-pooled maps.
//!
//! ```text
//! channel:  g_c = σ(MLP(avgpool F) + MLP(maxpool F)),   F'  = F  ⊗ g_c
//! spatial:  g_s = σ(conv([mean_c F' ‖ max_c F'])),      F'' = F' ⊗ g_s
//! ```

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::float::Float;
use crate::nn::{
    channel_pool, channel_pool_backward, concat_channel, global_pool3d, global_pool3d_backward,
    relu, relu_backward, sigmoid, sigmoid_backward, split_channel, Conv3d, ConvGeometry, Linear,
    Parameter, PoolMode, Pooled,
};
use crate::rng::Rng;
use crate::tensor::{add, broadcast_mul_channel, broadcast_mul_spatial, Tensor};

/// How the two channel-pooled maps are fed to the spatial convolution.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialMerge {
    /// Stack mean and max as two input channels.
    #[default]
    Concat,
    /// Add mean and max into a single input channel.
    Sum,
}

/// Largest odd kernel no bigger than `configured` or `min_extent`.
pub fn effective_spatial_kernel(configured: usize, min_extent: usize) -> usize {
    let k = configured.min(min_extent).max(1);
    if k % 2 == 0 {
        k - 1
    } else {
        k
    }
}

/// MLP hidden width for `channels` under reduction ratio `r`.
pub fn hidden_width(channels: usize, reduction: usize) -> usize {
    (channels / reduction.max(1)).max(1)
}

#[derive(Clone, Debug)]
pub struct ChannelAttention<T = f32> {
    pub mlp0: Linear<T>,
    pub mlp1: Linear<T>,
    channels: usize,
}

#[derive(Clone, Debug)]
struct MlpTrace<T> {
    input: Tensor<T>,
    hidden_pre: Tensor<T>,
    hidden: Tensor<T>,
}

#[derive(Clone, Debug)]
pub struct ChannelCache<T> {
    input: Tensor<T>,
    avg: Pooled<T>,
    max: Pooled<T>,
    avg_mlp: MlpTrace<T>,
    max_mlp: MlpTrace<T>,
    /// `[N, C, 1, 1, 1]`
    pub gate: Tensor<T>,
}

impl<T: Float> ChannelAttention<T> {
    pub fn new(name: &str, channels: usize, reduction: usize, rng: &mut Rng) -> Self {
        let hidden = hidden_width(channels, reduction);
        Self {
            mlp0: Linear::new(&format!("{name}.mlp0"), channels, hidden, rng),
            mlp1: Linear::new(&format!("{name}.mlp1"), hidden, channels, rng),
            channels,
        }
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn hidden(&self) -> usize {
        self.mlp0.bias.value().len()
    }

    fn mlp(&self, v: Tensor<T>) -> Result<(Tensor<T>, MlpTrace<T>)> {
        let hidden_pre = self.mlp0.forward(&v)?;
        let hidden = relu(&hidden_pre);
        let out = self.mlp1.forward(&hidden)?;
        Ok((
            out,
            MlpTrace {
                input: v,
                hidden_pre,
                hidden,
            },
        ))
    }

    fn mlp_backward(&mut self, t: &MlpTrace<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let d_hidden = self.mlp1.backward(&t.hidden, d_out)?;
        let d_pre = relu_backward(&t.hidden_pre, &d_hidden)?;
        self.mlp0.backward(&t.input, &d_pre)
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, ChannelCache<T>)> {
        let [n, c, ..] = f.dims5()?;
        if c != self.channels {
            return Err(Error::ShapeMismatch {
                op: "channel_attention",
                left: f.dims().to_vec(),
                right: vec![self.channels],
            });
        }
        let avg = global_pool3d(f, PoolMode::Avg)?;
        let max = global_pool3d(f, PoolMode::Max)?;
        let (a, avg_mlp) = self.mlp(avg.out.clone().reshape(&[n, c])?)?;
        let (m, max_mlp) = self.mlp(max.out.clone().reshape(&[n, c])?)?;
        let gate = sigmoid(&add(&a, &m)?).reshape(&[n, c, 1, 1, 1])?;
        let out = broadcast_mul_channel(f, &gate)?;
        Ok((
            out,
            ChannelCache {
                input: f.clone(),
                avg,
                max,
                avg_mlp,
                max_mlp,
                gate,
            },
        ))
    }

    pub fn backward(&mut self, cache: &ChannelCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let [n, c, ..] = cache.input.dims5()?;
        let mut d_in = broadcast_mul_channel(d_out, &cache.gate)?;
        let d_gate = per_channel_dot(d_out, &cache.input)?;
        let d_pre = sigmoid_backward(&cache.gate, &d_gate)?.reshape(&[n, c])?;

        // The same MLP sits on both branches; its parameter gradients add up.
        let d_avg = self.mlp_backward(&cache.avg_mlp, &d_pre)?.reshape(&[n, c, 1, 1, 1])?;
        let d_max = self.mlp_backward(&cache.max_mlp, &d_pre)?.reshape(&[n, c, 1, 1, 1])?;
        let dims = cache.input.dims();
        let via_avg = global_pool3d_backward(dims, &cache.avg, &d_avg)?;
        let via_max = global_pool3d_backward(dims, &cache.max, &d_max)?;
        for ((d, &a), &m) in d_in.data_mut().iter_mut().zip(via_avg.data()).zip(via_max.data()) {
            *d += a + m;
        }
        Ok(d_in)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.mlp0.visit(f);
        self.mlp1.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.mlp0.visit_mut(f);
        self.mlp1.visit_mut(f);
    }
}

#[derive(Clone, Debug)]
pub struct SpatialAttention<T = f32> {
    pub conv: Conv3d<T>,
    merge: SpatialMerge,
}

#[derive(Clone, Debug)]
pub struct SpatialCache<T> {
    input: Tensor<T>,
    mean: Pooled<T>,
    max: Pooled<T>,
    merged: Tensor<T>,
    /// `[N, 1, D, H, W]`
    pub gate: Tensor<T>,
}

impl<T: Float> SpatialAttention<T> {
    pub fn new(name: &str, kernel: usize, merge: SpatialMerge, rng: &mut Rng) -> Self {
        let cin = match merge {
            SpatialMerge::Concat => 2,
            SpatialMerge::Sum => 1,
        };
        Self {
            conv: Conv3d::new(
                &format!("{name}.conv"),
                cin,
                1,
                kernel,
                ConvGeometry::same(kernel),
                true,
                rng,
            ),
            merge,
        }
    }

    pub fn kernel(&self) -> usize {
        self.conv.weight.value().dims()[2]
    }

    pub fn merge(&self) -> SpatialMerge {
        self.merge
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, SpatialCache<T>)> {
        f.dims5()?;
        let mean = channel_pool(f, PoolMode::Avg)?;
        let max = channel_pool(f, PoolMode::Max)?;
        let merged = match self.merge {
            SpatialMerge::Concat => concat_channel(&mean.out, &max.out)?,
            SpatialMerge::Sum => add(&mean.out, &max.out)?,
        };
        let gate = sigmoid(&self.conv.forward(&merged)?);
        let out = broadcast_mul_spatial(f, &gate)?;
        Ok((
            out,
            SpatialCache {
                input: f.clone(),
                mean,
                max,
                merged,
                gate,
            },
        ))
    }

    pub fn backward(&mut self, cache: &SpatialCache<T>, d_out: &Tensor<T>) -> Result<Tensor<T>> {
        let mut d_in = broadcast_mul_spatial(d_out, &cache.gate)?;
        let d_gate = per_voxel_dot(d_out, &cache.input)?;
        let d_conv = sigmoid_backward(&cache.gate, &d_gate)?;
        let d_merged = self.conv.backward(&cache.merged, &d_conv)?;
        let (d_mean, d_max) = match self.merge {
            SpatialMerge::Concat => split_channel(&d_merged, 1)?,
            SpatialMerge::Sum => (d_merged.clone(), d_merged),
        };
        let dims = cache.input.dims();
        let via_mean = channel_pool_backward(dims, &cache.mean, &d_mean)?;
        let via_max = channel_pool_backward(dims, &cache.max, &d_max)?;
        for ((d, &a), &m) in d_in.data_mut().iter_mut().zip(via_mean.data()).zip(via_max.data()) {
            *d += a + m;
        }
        Ok(d_in)
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.conv.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.conv.visit_mut(f);
    }
}

/// Channel attention followed by spatial attention.
#[derive(Clone, Debug)]
pub struct DualAttention<T = f32> {
    pub channel: ChannelAttention<T>,
    pub spatial: SpatialAttention<T>,
}

#[derive(Clone, Debug)]
pub struct DamCache<T> {
    pub channel: ChannelCache<T>,
    pub spatial: SpatialCache<T>,
    /// Output of the channel stage, input of the spatial stage.
    pub channel_out: Tensor<T>,
}

/// Gradients flowing out of [`DualAttention::backward`].
#[derive(Clone, Debug)]
pub struct DamGrads<T> {
    pub channel_out: Tensor<T>,
    pub input: Tensor<T>,
}

impl<T: Float> DualAttention<T> {
    pub fn new(
        name: &str,
        channels: usize,
        reduction: usize,
        spatial_kernel: usize,
        merge: SpatialMerge,
        rng: &mut Rng,
    ) -> Self {
        Self {
            channel: ChannelAttention::new(&format!("{name}.channel"), channels, reduction, rng),
            spatial: SpatialAttention::new(&format!("{name}.spatial"), spatial_kernel, merge, rng),
        }
    }

    pub fn forward(&self, f: &Tensor<T>) -> Result<(Tensor<T>, DamCache<T>)> {
        let (channel_out, channel) = self.channel.forward(f)?;
        let (out, spatial) = self.spatial.forward(&channel_out)?;
        Ok((
            out,
            DamCache {
                channel,
                spatial,
                channel_out,
            },
        ))
    }

    pub fn backward(&mut self, cache: &DamCache<T>, d_out: &Tensor<T>) -> Result<DamGrads<T>> {
        let channel_out = self.spatial.backward(&cache.spatial, d_out)?;
        let input = self.channel.backward(&cache.channel, &channel_out)?;
        Ok(DamGrads { channel_out, input })
    }

    pub fn visit(&self, f: &mut dyn FnMut(&Parameter<T>)) {
        self.channel.visit(f);
        self.spatial.visit(f);
    }

    pub fn visit_mut(&mut self, f: &mut dyn FnMut(&mut Parameter<T>)) {
        self.channel.visit_mut(f);
        self.spatial.visit_mut(f);
    }
}

/// Channel attention as a free function: returns `(F', gate)`.
pub fn channel_attention<T: Float>(
    f: &Tensor<T>,
    ca: &ChannelAttention<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, cache) = ca.forward(f)?;
    Ok((out, cache.gate))
}

/// Spatial attention as a free function: returns `(F'', gate)`.
pub fn spatial_attention<T: Float>(
    f: &Tensor<T>,
    sa: &SpatialAttention<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let (out, cache) = sa.forward(f)?;
    Ok((out, cache.gate))
}

pub fn dam<T: Float>(
    f: &Tensor<T>,
    ca: &ChannelAttention<T>,
    sa: &SpatialAttention<T>,
) -> Result<Tensor<T>> {
    let (fp, _) = channel_attention(f, ca)?;
    Ok(spatial_attention(&fp, sa)?.0)
}

/// `out[n,c] = Σ_voxels a[n,c,·] · b[n,c,·]`, shaped `[N, C, 1, 1, 1]`.
fn per_channel_dot<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = a.dims5()?;
    let vol = d * h * w;
    let out = a
        .data()
        .chunks(vol)
        .zip(b.data().chunks(vol))
        .map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| p * q).sum())
        .collect();
    Ok(Tensor::from_parts(vec![n, c, 1, 1, 1], out))
}

/// `out[n,v] = Σ_c a[n,c,v] · b[n,c,v]`, shaped `[N, 1, D, H, W]`.
fn per_voxel_dot<T: Float>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let [n, c, d, h, w] = a.dims5()?;
    let vol = d * h * w;
    let mut out = vec![T::zero(); n * vol];
    for (i, (x, y)) in a.data().chunks(vol).zip(b.data().chunks(vol)).enumerate() {
        let o = &mut out[(i / c) * vol..(i / c + 1) * vol];
        for ((acc, &p), &q) in o.iter_mut().zip(x).zip(y) {
            *acc += p * q;
        }
    }
    Ok(Tensor::from_parts(vec![n, 1, d, h, w], out))
}
