use std::collections::HashMap;
use std::fmt::Write as _;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::time::Instant;

use super::checkpoint::{save_checkpoint, Checkpoint};
use super::config::RunConfig;
use crate::data::{normalize_volume, read_volume, VolumeRecord};
use crate::error::{Error, Result};
use crate::model::Backbone;
use crate::nn::{softmax_cross_entropy, Mode};
use crate::optim::{zero_grads, Optimizer};
use crate::parallel::map_range;
use crate::rng::{mix, Rng};
use crate::tensor::Tensor;

/// Normalized volumes held in memory, each `[1, 1, D, H, W]`.
#[derive(Clone, Debug)]
pub struct Dataset {
    pub records: Vec<VolumeRecord>,
    pub volumes: Vec<Tensor<f32>>,
    pub labels: Vec<u8>,
}

impl Dataset {
    pub fn load(records: &[VolumeRecord]) -> Result<Self> {
        let volumes = map_range(records.len(), |i| -> Result<Tensor<f32>> {
            let v = read_volume(&records[i].path)?;
            let d = v.dims().to_vec();
            normalize_volume(&v).reshape(&[1, 1, d[0], d[1], d[2]])
        })
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
        Self::from_volumes(records.to_vec(), volumes)
    }

    /// Wraps already-normalized `[1, 1, D, H, W]` volumes.
    pub fn from_volumes(records: Vec<VolumeRecord>, volumes: Vec<Tensor<f32>>) -> Result<Self> {
        if records.is_empty() {
            return Err(Error::Data("empty manifest".into()));
        }
        if let Some(r) = records.iter().find(|r| r.label > 1) {
            return Err(Error::Data(format!("{}: label {} outside {{0, 1}}", r.subject_id, r.label)));
        }
        let first = volumes[0].dims().to_vec();
        if let Some((r, v)) = records.iter().zip(&volumes).find(|(_, v)| v.dims() != first.as_slice()) {
            return Err(Error::Data(format!(
                "{} has extents {:?}, expected {:?} like the first volume",
                r.path.display(),
                &v.dims()[2..],
                &first[2..]
            )));
        }
        let labels = records.iter().map(|r| r.label).collect();
        Ok(Self {
            records,
            volumes,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.volumes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.volumes.is_empty()
    }

    pub fn spatial_dims(&self) -> [usize; 3] {
        let d = self.volumes[0].dims();
        [d[2], d[3], d[4]]
    }

    /// The records of `subset`, matched by path, in `subset` order.
    pub fn subset(&self, subset: &[VolumeRecord]) -> Result<Self> {
        let index: HashMap<&Path, usize> = self.records.iter().enumerate().map(|(i, r)| (r.path.as_path(), i)).collect();
        let mut volumes = Vec::with_capacity(subset.len());
        for r in subset {
            let i = index
                .get(r.path.as_path())
                .ok_or_else(|| Error::Data(format!("{} not in the loaded dataset", r.path.display())))?;
            volumes.push(self.volumes[*i].clone());
        }
        Self::from_volumes(subset.to_vec(), volumes)
    }

    pub fn batch(&self, indices: &[usize]) -> Result<(Tensor<f32>, Vec<usize>)> {
        let items: Vec<Tensor<f32>> = indices.iter().map(|&i| self.volumes[i].clone()).collect();
        let labels = indices.iter().map(|&i| self.labels[i] as usize).collect();
        Ok((Tensor::stack_batch(&items)?, labels))
    }
}

/// Eval-mode logits for every volume, `[N, classes]`.
pub fn predict_dataset(model: &Backbone<f32>, data: &Dataset, batch_size: usize) -> Result<Tensor<f32>> {
    let idx: Vec<usize> = (0..data.len()).collect();
    let mut rows = Vec::new();
    for chunk in idx.chunks(batch_size.max(1)) {
        let (x, _) = data.batch(chunk)?;
        rows.push(model.predict(&x)?);
    }
    Tensor::stack_batch(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochStats {
    /// 1-based.
    pub epoch: usize,
    pub loss: f64,
    pub accuracy: f64,
    pub seconds: f64,
}

pub const LOG_HEADER: &str = "epoch,loss,train_accuracy,wall_seconds";

impl EpochStats {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{:.3}", self.epoch, self.loss, self.accuracy, self.seconds)
    }
}

/// Model, optimizer and epoch counter of one training run.
pub struct Trainer {
    pub model: Backbone<f32>,
    pub optimizer: Optimizer<f32>,
    config: RunConfig,
    epoch: usize,
    rng_state: u64,
    best_loss: Option<f64>,
}

impl Trainer {
    /// Fresh model sized for `input_size` volumes.
    pub fn new(config: &RunConfig, input_size: [usize; 3]) -> Result<Self> {
        config.validate()?;
        let mut model_cfg = config.model.clone();
        model_cfg.input_size = input_size;
        Ok(Self {
            model: Backbone::build(&model_cfg)?,
            optimizer: Optimizer::new(config.optim.clone())?,
            config: config.clone(),
            epoch: 0,
            rng_state: 0,
            best_loss: None,
        })
    }

    /// Continues from a checkpoint that carries optimizer state.
    pub fn resume(config: &RunConfig, ckpt: &Checkpoint) -> Result<Self> {
        config.validate()?;
        let model = ckpt.restore_model(None)?;
        let optimizer = ckpt
            .restore_optimizer(&model)?
            .ok_or_else(|| Error::Data("checkpoint has no optimizer state to resume from".into()))?;
        Ok(Self {
            model,
            optimizer,
            config: config.clone(),
            epoch: ckpt.meta.epoch,
            rng_state: ckpt.meta.rng_state,
            best_loss: ckpt.meta.best_loss,
        })
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    pub fn best_loss(&self) -> Option<f64> {
        self.best_loss
    }

    /// Epoch `e` visits the data in a Fisher–Yates order seeded by
    /// `mix(seed ^ e)`.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> (Vec<usize>, u64) {
        let mut rng = Rng::new(mix(seed ^ epoch as u64));
        let mut order: Vec<usize> = (0..n).collect();
        rng.shuffle(&mut order);
        (order, rng.state())
    }

    pub fn run_epoch(&mut self, data: &Dataset) -> Result<EpochStats> {
        let start = Instant::now();
        let epoch = self.epoch + 1;
        let (order, state) = Self::epoch_order(self.config.seed, epoch, data.len());
        let (mut loss_sum, mut correct) = (0f64, 0usize);
        for chunk in order.chunks(self.config.batch_size) {
            let (x, labels) = data.batch(chunk)?;
            zero_grads(&mut self.model);
            let trace = self.model.run(&x, Mode::Train)?;
            let (loss, d_logits) = softmax_cross_entropy(&trace.logits, &labels)?;
            self.model.backward(&trace, &d_logits)?;
            self.model.commit_running_stats(&trace);
            self.optimizer.step(&mut self.model)?;
            loss_sum += loss as f64 * chunk.len() as f64;
            correct += trace
                .logits
                .data()
                .chunks(trace.logits.dims()[1])
                .zip(&labels)
                .filter(|(row, &l)| argmax(row) == l)
                .count();
        }
        self.epoch = epoch;
        self.rng_state = state;
        let loss = loss_sum / data.len() as f64;
        if !loss.is_finite() {
            return Err(Error::NonFinite("training loss"));
        }
        Ok(EpochStats {
            epoch,
            loss,
            accuracy: correct as f64 / data.len() as f64,
            seconds: start.elapsed().as_secs_f64(),
        })
    }

    /// Records `loss` and reports whether it is a new best.
    pub fn note_loss(&mut self, loss: f64) -> bool {
        let better = self.best_loss.is_none_or(|b| loss < b);
        if better {
            self.best_loss = Some(loss);
        }
        better
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut c = Checkpoint::capture(&self.model, Some(&self.optimizer), self.epoch, self.rng_state);
        c.meta.best_loss = self.best_loss;
        c
    }
}

pub fn argmax(row: &[f32]) -> usize {
    row.iter()
        .enumerate()
        .fold((0, f32::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}

/// Holds `<dir>/.lock` for the lifetime of the value.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self { path }),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(dir.to_path_buf())),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = std::fs::remove_file(&self.path);
    }
}

pub struct TrainOutcome {
    pub model: Backbone<f32>,
    pub log: Vec<EpochStats>,
    pub checkpoint_path: PathBuf,
}

/// Runs the epoch loop into `out_dir`: `train_log.csv`, `config.json`,
/// `model.damc` (final) and `model_best.damc` (lowest epoch loss).
pub fn train(config: &RunConfig, data: &Dataset, out_dir: &Path, resume: Option<&Checkpoint>) -> Result<TrainOutcome> {
    let _lock = OutputLock::acquire(out_dir)?;
    let mut trainer = match resume {
        Some(c) => Trainer::resume(config, c)?,
        None => Trainer::new(config, data.spatial_dims())?,
    };
    let effective = RunConfig {
        model: trainer.model.config().clone(),
        ..config.clone()
    };
    write_text(&out_dir.join("config.json"), &(serde_json::to_string_pretty(&effective)? + "\n"))?;
    let log_path = out_dir.join("train_log.csv");
    let mut log_text = format!("{LOG_HEADER}\n");
    if resume.is_some() {
        // Keep rows of epochs the checkpoint already covers.
        if let Ok(old) = std::fs::read_to_string(&log_path) {
            for line in old.lines().skip(1) {
                let e: Option<usize> = line.split(',').next().and_then(|s| s.parse().ok());
                if e.is_some_and(|e| e <= trainer.epochs_done()) {
                    let _ = writeln!(log_text, "{line}");
                }
            }
        }
    }
    write_text(&log_path, &log_text)?;
    let mut log = Vec::new();
    while trainer.epochs_done() < config.epochs {
        let stats = trainer.run_epoch(data)?;
        let _ = writeln!(log_text, "{}", stats.csv_row());
        write_text(&log_path, &log_text)?;
        if trainer.note_loss(stats.loss) {
            save_checkpoint(out_dir.join("model_best.damc"), &trainer.checkpoint())?;
        }
        log.push(stats);
    }
    let checkpoint_path = out_dir.join("model.damc");
    save_checkpoint(&checkpoint_path, &trainer.checkpoint())?;
    Ok(TrainOutcome {
        model: trainer.model,
        log,
        checkpoint_path,
    })
}

pub(crate) fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}
