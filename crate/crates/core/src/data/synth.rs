//! Atrophy phantoms: a unit-intensity background with Gaussian noise, where
//! label-1 subjects carry an attenuated sphere at a fixed off-center site.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::manifest::{write_manifest, Lesion, VolumeRecord};
use super::volume::write_volume;
use crate::error::{Error, Result};
use crate::parallel::map_range;
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_per_class: usize,
    pub size: usize,
    /// Lesion site as fractions of the extent along (d, h, w).
    pub lesion_center: [f64; 3],
    pub lesion_radius_vox: f64,
    pub lesion_contrast: f64,
    pub jitter_vox: f64,
    pub noise_sigma: f64,
    pub domain_shift: f64,
    pub seed: u64,
    pub dataset_tag: String,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_per_class: 50,
            size: 32,
            lesion_center: [0.35, 0.5, 0.45],
            lesion_radius_vox: 7.0,
            lesion_contrast: 0.4,
            jitter_vox: 1.5,
            noise_sigma: 0.2,
            domain_shift: 0.0,
            seed: 42,
            dataset_tag: "synth-adni".into(),
        }
    }
}

impl SynthConfig {
    /// Default phantom rescaled to a `size`³ grid: radius and jitter scale
    /// with the extent.
    pub fn for_size(size: usize) -> Self {
        let d = Self::default();
        let f = size as f64 / d.size as f64;
        Self {
            size,
            lesion_radius_vox: d.lesion_radius_vox * f,
            jitter_vox: d.jitter_vox * f,
            ..d
        }
    }

    /// Protocol-shifted variant with the given tag.
    pub fn shifted(&self, tag: &str, shift: f64) -> Self {
        Self {
            domain_shift: shift,
            dataset_tag: tag.into(),
            ..self.clone()
        }
    }

    pub fn nominal_center(&self) -> [f64; 3] {
        self.lesion_center.map(|c| c * self.size as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.n_per_class == 0 || self.size == 0 {
            return bad("n_per_class and size must be positive".into());
        }
        if !(self.noise_sigma >= 0.0) || !(self.domain_shift >= 0.0) {
            return bad("noise_sigma and domain_shift must be ≥ 0".into());
        }
        if !(0.0..=1.0).contains(&self.lesion_contrast) {
            return bad(format!("lesion_contrast {} outside [0, 1]", self.lesion_contrast));
        }
        if !(self.lesion_radius_vox > 0.0) || !(self.jitter_vox >= 0.0) {
            return bad("lesion_radius_vox must be > 0 and jitter_vox ≥ 0".into());
        }
        let reach = self.lesion_radius_vox + self.jitter_vox;
        let hi = (self.size - 1) as f64;
        for c in self.nominal_center() {
            if c - reach < 0.0 || c + reach > hi {
                return bad(format!(
                    "lesion (radius {} + jitter {}) does not fit a {}³ volume at the configured center",
                    self.lesion_radius_vox, self.jitter_vox, self.size
                ));
            }
        }
        Ok(())
    }
}

/// One generated subject.
#[derive(Clone, Debug)]
pub struct Phantom {
    pub volume: Tensor<f32>,
    pub label: u8,
    pub lesion: Lesion,
}

/// Label of subject `index`; classes alternate.
pub fn subject_label(index: usize) -> u8 {
    (index % 2) as u8
}

/// Builds subject `index` in memory. Label-0 subjects report the lesion
/// sphere they would have had, which is where a lesion would be sought.
pub fn synth_subject(config: &SynthConfig, index: usize) -> Phantom {
    let mut rng = Rng::new(mix(config.seed ^ index as u64));
    let label = subject_label(index);
    let mut center = config.nominal_center();
    for c in center.iter_mut() {
        *c += rng.uniform_range(-config.jitter_vox, config.jitter_vox);
    }
    let n = config.size;
    let r2 = config.lesion_radius_vox * config.lesion_radius_vox;
    let atten = 1.0 - config.lesion_contrast;
    let gain = 1.0 + config.domain_shift;
    let mut data = Vec::with_capacity(n * n * n);
    for d in 0..n {
        for h in 0..n {
            for w in 0..n {
                let mut v = 1.0 + config.noise_sigma * rng.normal();
                if label == 1 {
                    let dist2 = [d, h, w]
                        .iter()
                        .zip(&center)
                        .map(|(&i, c)| (i as f64 - c).powi(2))
                        .sum::<f64>();
                    if dist2 <= r2 {
                        v *= atten;
                    }
                }
                data.push(v);
            }
        }
    }
    if config.domain_shift > 0.0 {
        for v in data.iter_mut() {
            *v = gain * *v + config.domain_shift * rng.normal();
        }
    }
    let volume = Tensor::new(vec![n, n, n], data.into_iter().map(|v| v as f32).collect())
        .expect("finite phantom");
    Phantom {
        volume,
        label,
        lesion: Lesion {
            center,
            radius: config.lesion_radius_vox,
        },
    }
}

/// Binary mask of a lesion sphere on an `dims` grid.
pub fn lesion_mask(lesion: &Lesion, dims: [usize; 3]) -> Tensor<f32> {
    let r2 = lesion.radius * lesion.radius;
    let mut data = Vec::with_capacity(dims.iter().product());
    for d in 0..dims[0] {
        for h in 0..dims[1] {
            for w in 0..dims[2] {
                let dist2: f64 = [d, h, w]
                    .iter()
                    .zip(&lesion.center)
                    .map(|(&i, c)| (i as f64 - c).powi(2))
                    .sum();
                data.push(if dist2 <= r2 { 1.0 } else { 0.0 });
            }
        }
    }
    Tensor::new(dims.to_vec(), data).expect("finite mask")
}

/// Writes `2·n_per_class` volumes plus `manifest.jsonl` into `out_dir`.
pub fn generate_synthetic(config: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<VolumeRecord>> {
    config.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let results = map_range(2 * config.n_per_class, |i| -> Result<VolumeRecord> {
        let p = synth_subject(config, i);
        let subject_id = format!("{}-{i:04}", config.dataset_tag);
        let path = out_dir.join(format!("{subject_id}.rvol"));
        write_volume(&path, &p.volume)?;
        Ok(VolumeRecord {
            path,
            label: p.label,
            subject_id,
            dataset_tag: config.dataset_tag.clone(),
            lesion: (p.label == 1).then_some(p.lesion),
        })
    });
    let records = results.into_iter().collect::<Result<Vec<_>>>()?;
    write_manifest(out_dir.join("manifest.jsonl"), &records)?;
    Ok(records)
}

/// Per-volume z-score. Volumes with std below 1e-8 are returned unchanged.
pub fn normalize_volume(t: &Tensor<f32>) -> Tensor<f32> {
    let n = t.len() as f64;
    let mean = t.data().iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = t.data().iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let std = var.sqrt();
    if std < 1e-8 {
        return t.clone();
    }
    t.map(|v| ((v as f64 - mean) / std) as f32)
}
