//! The operations behind each CLI subcommand.

use std::path::{Path, PathBuf};

use super::checkpoint::load_checkpoint;
use super::config::RunConfig;
use super::train::{predict_dataset, train, write_text, Dataset, OutputLock, TrainOutcome};
use crate::data::{
    audit_leakage, generate_synthetic, kfold, normalize_volume, read_manifest, read_volume, write_manifest,
    write_volume, SynthConfig, VolumeRecord,
};
use crate::error::{Error, Result};
use crate::gradcam::{gradcam, mid_slices_pgm, AttributionMap};
use crate::metrics::{aggregate_cv, evaluate, render_report, roc_csv, MetricsReport, ReportStyle};
use crate::model::Backbone;

const EVAL_BATCH: usize = 8;

pub struct SynthSummary {
    pub manifest: PathBuf,
    pub records: Vec<VolumeRecord>,
    /// Subjects per label.
    pub counts: [usize; 2],
}

pub fn cmd_synth(config: &SynthConfig, out_dir: &Path) -> Result<SynthSummary> {
    let records = generate_synthetic(config, out_dir)?;
    let mut counts = [0; 2];
    for r in &records {
        counts[r.label as usize] += 1;
    }
    Ok(SynthSummary {
        manifest: out_dir.join("manifest.jsonl"),
        records,
        counts,
    })
}

fn manifest_or(path: &Option<PathBuf>, what: &str) -> Result<Vec<VolumeRecord>> {
    let p = path
        .as_ref()
        .ok_or_else(|| Error::Config(format!("no {what} manifest configured")))?;
    read_manifest(p)
}

/// Trains on `config.train_manifest` into `config.output_dir`.
pub fn cmd_train(config: &RunConfig, resume: Option<&Path>) -> Result<TrainOutcome> {
    config.validate()?;
    let data = Dataset::load(&manifest_or(&config.train_manifest, "train")?)?;
    let ckpt = resume.map(load_checkpoint).transpose()?;
    train(config, &data, &config.output_dir, ckpt.as_ref())
}

fn dataset_tag(records: &[VolumeRecord]) -> String {
    match records.first() {
        Some(r) if records.iter().all(|x| x.dataset_tag == r.dataset_tag) => r.dataset_tag.clone(),
        _ => "mixed".into(),
    }
}

/// Evaluates `model` and writes `metrics.json` and `roc.csv` into `out_dir`.
pub fn evaluate_into(model: &Backbone<f32>, data: &Dataset, out_dir: &Path) -> Result<MetricsReport> {
    let logits = predict_dataset(model, data, EVAL_BATCH)?;
    let (report, roc) = evaluate(&dataset_tag(&data.records), &logits, &data.labels)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    write_text(&out_dir.join("metrics.json"), &render_report(&report, ReportStyle::Json))?;
    write_text(&out_dir.join("roc.csv"), &roc_csv(&roc))?;
    Ok(report)
}

pub fn cmd_eval(checkpoint: &Path, manifest: &Path, out_dir: &Path) -> Result<MetricsReport> {
    let model = load_checkpoint(checkpoint)?.restore_model(None)?;
    let data = Dataset::load(&read_manifest(manifest)?)?;
    evaluate_into(&model, &data, out_dir)
}

/// Stratified k-fold training and evaluation. Each `fold_<i>/` holds the
/// fold manifests, training artifacts and validation metrics; the aggregate
/// goes to `metrics.json` and `report.txt`.
pub fn cmd_cv(config: &RunConfig, k: usize) -> Result<MetricsReport> {
    config.validate()?;
    let records = manifest_or(&config.train_manifest, "train")?;
    let folds = kfold(&records, k, config.seed)?;
    let all = Dataset::load(&records)?;
    let out = &config.output_dir;
    let _lock = OutputLock::acquire(out)?;
    let mut reports = Vec::with_capacity(k);
    for (i, (train_recs, val_recs)) in folds.iter().enumerate() {
        audit_leakage(train_recs, val_recs)?;
        let dir = out.join(format!("fold_{}", i + 1));
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        write_manifest(dir.join("train.jsonl"), train_recs)?;
        write_manifest(dir.join("val.jsonl"), val_recs)?;
        let outcome = train(config, &all.subset(train_recs)?, &dir, None)?;
        reports.push(evaluate_into(&outcome.model, &all.subset(val_recs)?, &dir)?);
    }
    let agg = aggregate_cv(&reports)?;
    write_text(&out.join("metrics.json"), &render_report(&agg, ReportStyle::Json))?;
    write_text(&out.join("report.txt"), &render_report(&agg, ReportStyle::Table))?;
    Ok(agg)
}

pub struct GradcamRequest<'a> {
    pub checkpoint: &'a Path,
    pub volume: &'a Path,
    pub target_class: usize,
    pub layer: &'a str,
    pub out_dir: &'a Path,
    pub slices: bool,
}

/// Writes `map.rvol`, `map.json` and optionally `map_<plane>.pgm`.
pub fn cmd_gradcam(req: &GradcamRequest) -> Result<AttributionMap> {
    let model = load_checkpoint(req.checkpoint)?.restore_model(None)?;
    let vol = read_volume(req.volume)?;
    let d = vol.dims().to_vec();
    let x = normalize_volume(&vol).reshape(&[1, 1, d[0], d[1], d[2]])?;
    let map = gradcam(&model, &x, req.target_class, req.layer)?;
    let out = req.out_dir;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    write_volume(out.join("map.rvol"), &map.values)?;
    let sidecar = map.sidecar(&req.volume.display().to_string());
    write_text(&out.join("map.json"), &(serde_json::to_string_pretty(&sidecar)? + "\n"))?;
    if req.slices {
        for (plane, pgm) in mid_slices_pgm(&map.values) {
            write_text(&out.join(format!("map_{plane}.pgm")), &pgm)?;
        }
    }
    Ok(map)
}
