//! Gradient-weighted class activation maps over any spatial tap of the
//! backbone, plus helpers to score and export them.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, SPATIAL_TAPS};
use crate::nn::Mode;
use crate::tensor::Tensor;

pub const DEFAULT_LAYER: &str = "dam2.out";

#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    /// `[D, H, W]`, values in `[0, 1]`.
    pub values: Tensor<f32>,
    pub layer: String,
    pub target_class: usize,
    pub input_dims: [usize; 3],
}

/// Rectified channel-weighted sum for one sample: `relu(Σ_k α_k·A_k)` with
/// `α_k` the spatial mean of `∂y/∂A_k`. Both inputs are `[C, d, h, w]`.
pub fn weighted_activation(activation: &Tensor<f32>, gradient: &Tensor<f32>) -> Result<Tensor<f32>> {
    if activation.rank() != 4 || activation.dims() != gradient.dims() {
        return Err(Error::ShapeMismatch {
            op: "weighted_activation",
            left: activation.dims().to_vec(),
            right: gradient.dims().to_vec(),
        });
    }
    let c = activation.dims()[0];
    let vox = activation.len() / c;
    let mut acc = vec![0f64; vox];
    for (a, g) in activation.data().chunks(vox).zip(gradient.data().chunks(vox)) {
        let alpha = g.iter().map(|&v| v as f64).sum::<f64>() / vox as f64;
        for (o, &v) in acc.iter_mut().zip(a) {
            *o += alpha * v as f64;
        }
    }
    Tensor::new(
        activation.dims()[1..].to_vec(),
        acc.into_iter().map(|v| v.max(0.0) as f32).collect(),
    )
}

/// Align-corners trilinear resampling of `[d, h, w]` to `target`.
pub fn trilinear_upsample(m: &Tensor<f32>, target: [usize; 3]) -> Result<Tensor<f32>> {
    if m.rank() != 3 || target.contains(&0) {
        return Err(Error::InvalidShape {
            dims: m.dims().to_vec(),
            reason: format!("expected a rank-3 map and positive target extents, target {target:?}"),
        });
    }
    let src = [m.dims()[0], m.dims()[1], m.dims()[2]];
    // Per axis: (lower index, upper index, weight of upper) for each target index.
    let taps: Vec<Vec<(usize, usize, f64)>> = (0..3)
        .map(|a| {
            (0..target[a])
                .map(|i| {
                    if src[a] == 1 || target[a] == 1 {
                        return (0, 0, 0.0);
                    }
                    let x = i as f64 * (src[a] - 1) as f64 / (target[a] - 1) as f64;
                    let lo = (x.floor() as usize).min(src[a] - 2);
                    (lo, lo + 1, x - lo as f64)
                })
                .collect()
        })
        .collect();
    let at = |d: usize, h: usize, w: usize| m.data()[(d * src[1] + h) * src[2] + w] as f64;
    let mut out = Vec::with_capacity(target.iter().product());
    for &(d0, d1, fd) in &taps[0] {
        for &(h0, h1, fh) in &taps[1] {
            for &(w0, w1, fw) in &taps[2] {
                let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t;
                let plane = |d| {
                    lerp(
                        lerp(at(d, h0, w0), at(d, h0, w1), fw),
                        lerp(at(d, h1, w0), at(d, h1, w1), fw),
                        fh,
                    )
                };
                out.push(lerp(plane(d0), plane(d1), fd) as f32);
            }
        }
    }
    Tensor::new(target.to_vec(), out)
}

/// Rescales to `[0, 1]` by min and max. An all-zero map stays zero and a
/// constant positive map becomes all ones.
pub fn min_max_normalize(m: &Tensor<f32>) -> Tensor<f32> {
    let lo = m.data().iter().copied().fold(f32::INFINITY, f32::min);
    let hi = m.data().iter().copied().fold(f32::NEG_INFINITY, f32::max);
    if hi > lo {
        m.map(|v| ((v - lo) / (hi - lo)).clamp(0.0, 1.0))
    } else if hi > 0.0 {
        m.map(|_| 1.0)
    } else {
        Tensor::zeros_like(m)
    }
}

/// Attribution of `target_class` for a single volume `x` (`[1, C, D, H, W]`)
/// at the named tap, computed in eval mode. The model is not modified.
pub fn gradcam(model: &Backbone<f32>, x: &Tensor<f32>, target_class: usize, layer: &str) -> Result<AttributionMap> {
    let [n, _, d, h, w] = x.dims5()?;
    if n != 1 {
        return Err(Error::InvalidArgument(format!("gradcam takes one volume, got a batch of {n}")));
    }
    if !SPATIAL_TAPS.contains(&layer) {
        return Err(Error::UnknownLayer {
            name: layer.to_string(),
            available: SPATIAL_TAPS.join(", "),
        });
    }
    let classes = model.config().num_classes;
    if target_class >= classes {
        return Err(Error::InvalidArgument(format!(
            "target class {target_class} outside 0..{classes}"
        )));
    }
    let trace = model.run(x, Mode::Eval)?;
    let mut onehot = Tensor::zeros(&[1, classes]);
    onehot.data_mut()[target_class] = 1.0;
    let mut scratch = model.clone();
    let grads = scratch.backward(&trace, &onehot)?;
    let act = trace.spatial_tap(layer).expect("listed tap");
    let drop_batch = |t: &Tensor<f32>| t.clone().reshape(&t.dims()[1..]);
    let raw = weighted_activation(&drop_batch(act)?, &drop_batch(&grads[layer])?)?;
    let values = min_max_normalize(&trilinear_upsample(&raw, [d, h, w])?);
    Ok(AttributionMap {
        values,
        layer: layer.to_string(),
        target_class,
        input_dims: [d, h, w],
    })
}

/// Fraction of the `top_fraction` highest-valued voxels (ties broken by
/// row-major order) that fall inside `mask`.
pub fn localization_score(map: &Tensor<f32>, mask: &Tensor<f32>, top_fraction: f64) -> Result<f64> {
    if map.dims() != mask.dims() {
        return Err(Error::ShapeMismatch {
            op: "localization_score",
            left: map.dims().to_vec(),
            right: mask.dims().to_vec(),
        });
    }
    if !(top_fraction > 0.0 && top_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("top_fraction {top_fraction} outside (0, 1]")));
    }
    if !mask.data().iter().any(|&v| v > 0.5) {
        return Err(Error::InvalidArgument("empty region-of-interest mask".into()));
    }
    let k = ((top_fraction * map.len() as f64).round() as usize).clamp(1, map.len());
    let mut order: Vec<usize> = (0..map.len()).collect();
    // Stable sort keeps row-major order among equal values.
    order.sort_by(|&a, &b| map.data()[b].total_cmp(&map.data()[a]));
    let hits = order[..k].iter().filter(|&&i| mask.data()[i] > 0.5).count();
    Ok(hits as f64 / k as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub center_voxel: [usize; 3],
    pub mass: f64,
    pub voxels: usize,
}

/// Face-connected components of voxels at or above `threshold`, heaviest
/// first, with mass-weighted centroids.
pub fn top_regions(map: &Tensor<f32>, threshold: f32, limit: usize) -> Vec<Region> {
    let [d, h, w] = [map.dims()[0], map.dims()[1], map.dims()[2]];
    let v = map.data();
    let mut seen = vec![false; v.len()];
    let mut regions = Vec::new();
    let mut stack = Vec::new();
    for start in 0..v.len() {
        if seen[start] || v[start] < threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut mass, mut count, mut moment) = (0f64, 0usize, [0f64; 3]);
        while let Some(i) = stack.pop() {
            let idx = [i / (h * w), (i / w) % h, i % w];
            let m = v[i] as f64;
            mass += m;
            count += 1;
            for a in 0..3 {
                moment[a] += m * idx[a] as f64;
            }
            let ext = [d, h, w];
            let stride = [h * w, w, 1];
            for a in 0..3 {
                if idx[a] > 0 {
                    let j = i - stride[a];
                    if !seen[j] && v[j] >= threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
                if idx[a] + 1 < ext[a] {
                    let j = i + stride[a];
                    if !seen[j] && v[j] >= threshold {
                        seen[j] = true;
                        stack.push(j);
                    }
                }
            }
        }
        regions.push(Region {
            center_voxel: moment.map(|m| (m / mass).round() as usize),
            mass,
            voxels: count,
        });
    }
    regions.sort_by(|a, b| b.mass.total_cmp(&a.mass));
    regions.truncate(limit);
    regions
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttributionSidecar {
    pub layer: String,
    pub target_class: usize,
    pub input_path: String,
    pub input_dims: [usize; 3],
    pub top_regions: Vec<Region>,
}

impl AttributionMap {
    pub fn sidecar(&self, input_path: &str) -> AttributionSidecar {
        AttributionSidecar {
            layer: self.layer.clone(),
            target_class: self.target_class,
            input_path: input_path.to_string(),
            input_dims: self.input_dims,
            top_regions: top_regions(&self.values, 0.5, 5),
        }
    }
}

/// Plain (P2) PGM images of the middle slice along each axis, named
/// `axial`/`coronal`/`sagittal` for axes d/h/w.
pub fn mid_slices_pgm(map: &Tensor<f32>) -> Vec<(&'static str, String)> {
    let [d, h, w] = [map.dims()[0], map.dims()[1], map.dims()[2]];
    let at = |i: usize, j: usize, k: usize| map.data()[(i * h + j) * w + k];
    let render = |rows: usize, cols: usize, f: &dyn Fn(usize, usize) -> f32| {
        let mut s = format!("P2\n{cols} {rows}\n255\n");
        for r in 0..rows {
            let line: Vec<String> = (0..cols)
                .map(|c| ((f(r, c).clamp(0.0, 1.0) * 255.0).round() as u8).to_string())
                .collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    };
    vec![
        ("axial", render(h, w, &|r, c| at(d / 2, r, c))),
        ("coronal", render(d, w, &|r, c| at(r, h / 2, c))),
        ("sagittal", render(d, h, &|r, c| at(r, c, w / 2))),
    ]
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_and_identity_upsampling() {
        let c = Tensor::full(&[2, 3, 1], 0.7f32);
        let up = trilinear_upsample(&c, [5, 4, 3]).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-6));
        let m = Tensor::new(vec![2, 2, 2], (0..8).map(|v| v as f32).collect()).unwrap();
        assert_eq!(trilinear_upsample(&m, [2, 2, 2]).unwrap(), m);
    }

    #[test]
    fn normalization_laws() {
        let z = Tensor::<f32>::zeros(&[2, 2, 2]);
        assert_eq!(min_max_normalize(&z), z);
        let m = Tensor::new(vec![1, 1, 3], vec![0.5f32, 2.0, 1.0]).unwrap();
        assert_eq!(min_max_normalize(&m).data(), &[0.0, 1.0, 0.5 / 1.5]);
    }

    #[test]
    fn localization_exact_and_full() {
        let mask = Tensor::new(vec![1, 2, 4], vec![0., 1., 1., 0., 0., 0., 0., 0.]).unwrap();
        assert_eq!(localization_score(&mask, &mask, 0.25).unwrap(), 1.0);
        let flat = Tensor::<f32>::full(&[1, 2, 4], 0.3);
        assert_eq!(localization_score(&flat, &mask, 1.0).unwrap(), 0.25);
        // Ties resolve in row-major order: the first two voxels are chosen.
        assert_eq!(localization_score(&flat, &mask, 0.25).unwrap(), 0.5);
        assert!(localization_score(&flat, &Tensor::zeros(&[1, 2, 4]), 0.5).is_err());
    }

    #[test]
    fn regions_and_pgm() {
        let mut m = Tensor::<f32>::zeros(&[4, 4, 4]);
        for i in [0usize, 1, 4] {
            m.data_mut()[i] = 1.0;
        }
        m.data_mut()[63] = 0.6;
        let r = top_regions(&m, 0.5, 5);
        assert_eq!(r.len(), 2);
        assert_eq!((r[0].voxels, r[1].center_voxel), (3, [3, 3, 3]));
        let pgm = mid_slices_pgm(&m);
        assert!(pgm[0].1.starts_with("P2\n4 4\n255\n"));
        assert_eq!(pgm[0].1.lines().count(), 3 + 4);
    }
}
