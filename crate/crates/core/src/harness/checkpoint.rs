//! `DAMC` v1 checkpoints (little-endian):
//!
//! ```text
//! magic 44 41 4D 43 01
//! u32 tensor count
//! per tensor: u16 name length, UTF-8 name, u8 ndim, u32 dims…, f32 data
//! u64 trailer length, UTF-8 JSON trailer
//! ```
//!
//! Tensors are the model parameters, then BN running statistics, then any
//! optimizer moments (`optim.first.*`, `optim.second.*`).

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Backbone, ModelConfig};
use crate::nn::ParamSet;
use crate::optim::{OptimConfig, Optimizer};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: [u8; 5] = *b"DAMC\x01";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format_version: u32,
    pub model: ModelConfig,
    /// Number of completed epochs.
    pub epoch: usize,
    pub rng_state: u64,
    #[serde(default)]
    pub optim: Option<OptimConfig>,
    #[serde(default)]
    pub optim_step: u64,
    #[serde(default)]
    pub best_loss: Option<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub tensors: Vec<(String, Tensor<f32>)>,
    pub meta: CheckpointMeta,
}

impl Checkpoint {
    pub fn capture(model: &Backbone<f32>, optimizer: Option<&Optimizer<f32>>, epoch: usize, rng_state: u64) -> Self {
        let mut tensors = Vec::new();
        let mut names = Vec::new();
        model.visit_params(&mut |p| {
            tensors.push((p.name().to_string(), p.value().clone()));
            names.push(p.name().to_string());
        });
        model.visit_buffers(&mut |n, t| tensors.push((n.to_string(), t.clone())));
        let (mut optim, mut optim_step) = (None, 0);
        if let Some(o) = optimizer {
            let (step, first, second) = o.export_state();
            optim = Some(o.config().clone());
            optim_step = step;
            for (n, t) in names.iter().zip(first) {
                tensors.push((format!("optim.first.{n}"), t));
            }
            for (n, t) in names.iter().zip(second) {
                tensors.push((format!("optim.second.{n}"), t));
            }
        }
        Self {
            tensors,
            meta: CheckpointMeta {
                format_version: FORMAT_VERSION,
                model: model.config().clone(),
                epoch,
                rng_state,
                optim,
                optim_step,
                best_loss: None,
            },
        }
    }

    fn lookup(&self) -> BTreeMap<&str, &Tensor<f32>> {
        self.tensors.iter().map(|(n, t)| (n.as_str(), t)).collect()
    }

    /// Rebuilds the model from the embedded config, or from `config` when
    /// given, and loads every parameter and running statistic.
    pub fn restore_model(&self, config: Option<&ModelConfig>) -> Result<Backbone<f32>> {
        let mut model = Backbone::build(config.unwrap_or(&self.meta.model))?;
        let table = self.lookup();
        let mut failure = None;
        let mut load = |name: &str, dst_dims: &[usize]| -> Option<Tensor<f32>> {
            if failure.is_some() {
                return None;
            }
            match table.get(name) {
                None => failure = Some(Error::CheckpointMissing(name.to_string())),
                Some(t) if t.dims() != dst_dims => {
                    failure = Some(Error::CheckpointShape {
                        name: name.to_string(),
                        expected: dst_dims.to_vec(),
                        found: t.dims().to_vec(),
                    })
                }
                Some(t) => return Some((*t).clone()),
            }
            None
        };
        model.visit_params_mut(&mut |p| {
            if let Some(t) = load(p.name(), p.value().dims()) {
                p.set_value(t).expect("dims checked");
            }
        });
        model.visit_buffers_mut(&mut |n, dst| {
            if let Some(t) = load(n, dst.dims()) {
                *dst = t;
            }
        });
        match failure {
            Some(e) => Err(e),
            None => Ok(model),
        }
    }

    /// Optimizer with restored moments, if the checkpoint carries them.
    pub fn restore_optimizer(&self, model: &Backbone<f32>) -> Result<Option<Optimizer<f32>>> {
        let Some(cfg) = &self.meta.optim else {
            return Ok(None);
        };
        let table = self.lookup();
        let mut names = Vec::new();
        model.visit_params(&mut |p| names.push(p.name().to_string()));
        let fetch = |prefix: &str| -> Vec<Tensor<f32>> {
            names
                .iter()
                .map_while(|n| table.get(format!("{prefix}{n}").as_str()).map(|t| (*t).clone()))
                .collect()
        };
        let (first, second) = (fetch("optim.first."), fetch("optim.second."));
        let mut o = Optimizer::new(cfg.clone())?;
        if !first.is_empty() {
            let want_second = if second.is_empty() { 0 } else { names.len() };
            if first.len() != names.len() || second.len() != want_second {
                let (kind, n) = if first.len() != names.len() { ("first", first.len()) } else { ("second", second.len()) };
                return Err(Error::CheckpointMissing(format!("optim.{kind}.{}", names[n])));
            }
            o.import_state(self.meta.optim_step, first, second);
        }
        Ok(Some(o))
    }
}

pub fn encode_checkpoint(c: &Checkpoint) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&(c.tensors.len() as u32).to_le_bytes());
    for (name, t) in &c.tensors {
        let nb = name.as_bytes();
        let len = u16::try_from(nb.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {name}")))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(nb);
        out.push(u8::try_from(t.rank()).map_err(|_| Error::InvalidArgument(format!("rank of {name}")))?);
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let trailer = serde_json::to_vec(&c.meta)?;
    out.extend_from_slice(&(trailer.len() as u64).to_le_bytes());
    out.extend_from_slice(&trailer);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                offset: self.bytes.len() as u64,
                reason: format!("truncated {what}: need {n} bytes at offset {}", self.pos),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn err(&self, at: usize, reason: String) -> Error {
        Error::Parse { offset: at as u64, reason }
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { bytes, pos: 0 };
    if let Some(i) = CHECKPOINT_MAGIC.iter().zip(bytes).position(|(a, b)| a != b) {
        return Err(r.err(i, format!("bad magic byte {:#04x}", bytes[i])));
    }
    r.take(5, "magic")?;
    let count = r.u32("tensor count")?;
    let mut tensors = Vec::new();
    for _ in 0..count {
        let at = r.pos;
        let len = u16::from_le_bytes(r.take(2, "name length")?.try_into().expect("2 bytes")) as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err(at + 2, "tensor name is not UTF-8".into()))?
            .to_string();
        let ndim = r.take(1, "rank")?[0] as usize;
        let dims = (0..ndim).map(|_| r.u32("dims").map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.err(at, format!("extents of `{name}` overflow")))?;
        let data_at = r.pos;
        let data = r
            .take(n, "tensor data")?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| r.err(data_at, format!("tensor `{name}`: {e}")))?;
        tensors.push((name, t));
    }
    let len = u64::from_le_bytes(r.take(8, "trailer length")?.try_into().expect("8 bytes"));
    let at = r.pos;
    let len = usize::try_from(len).map_err(|_| r.err(at, "trailer too long".into()))?;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(len, "trailer")?)
        .map_err(|e| r.err(at, format!("trailer: {e}")))?;
    if r.pos != bytes.len() {
        return Err(r.err(r.pos, "trailing bytes after trailer".into()));
    }
    if meta.format_version != FORMAT_VERSION {
        return Err(r.err(at, format!("unsupported format version {}", meta.format_version)));
    }
    Ok(Checkpoint { tensors, meta })
}

/// Writes through a temporary file so readers never see a partial file.
pub fn save_checkpoint(path: impl AsRef<Path>, c: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let tmp = path.with_extension("damc.tmp");
    std::fs::write(&tmp, encode_checkpoint(c)?).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    decode_checkpoint(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
