//! End-to-end acceptance criteria. Each test prints one PASS/FAIL line to
//! stderr (uncaptured) and then asserts.

mod common;

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::{Mutex, MutexGuard, OnceLock};
use std::time::{Duration, Instant};

use common::*;
use dam3d::attention::{DualAttention, SpatialMerge};
use dam3d::data::{audit_leakage, lesion_mask, read_manifest, split_stratified, SynthConfig};
use dam3d::gradcam::{gradcam, localization_score, DEFAULT_LAYER};
use dam3d::harness::*;
use dam3d::metrics::{evaluate, roc_auc, MetricsReport};
use dam3d::model::{Backbone, ModelConfig, SPATIAL_TAPS};
use dam3d::nn::{conv3d, ConvGeometry};
use dam3d::rng::Rng;
use dam3d::tensor::Tensor;

// Pinned thresholds.
const OP_GRAD_TOL: f64 = 1e-6;
const E2E_GRAD_TOL: f64 = 1e-5;
const CONV_ORACLE_TOL: f64 = 1e-6;
const A1_BUDGET: Duration = Duration::from_secs(60);
const A2_BUDGET: Duration = Duration::from_secs(60);
const A3_BUDGET: Duration = Duration::from_secs(10 * 60);
const A3_MAX_EPOCHS: usize = 200;
const A4_BUDGET: Duration = Duration::from_secs(30 * 60);
const A4_MIN_ACC: f64 = 0.90;
const A4_MIN_AUC: f64 = 0.95;
const A5_MIN_ACC: f64 = 0.80;
const A5_SHIFT: f64 = 0.15;
// Subjects per class in each held-out domain set. At 50 per class the
// standard error of accuracy (~2.5 points) exceeds the domain gap.
const A5_PER_CLASS: usize = 200;
const A6_MIN_SCORE: f64 = 0.5;
const A6_TOP_FRACTION: f64 = 0.05;
const A6_MAPS: usize = 10;
const SEEDS: [u64; 3] = [1, 2, 3];

static GATE: Mutex<()> = Mutex::new(());

fn gate() -> MutexGuard<'static, ()> {
    GATE.lock().unwrap_or_else(|e| e.into_inner())
}

fn verdict(id: &str, title: &str, pass: bool, detail: &str) {
    let line = format!("[acceptance] {id} {title}: {} ({detail})\n", if pass { "PASS" } else { "FAIL" });
    let _ = std::io::stderr().write_all(line.as_bytes());
}

fn scratch(name: &str) -> PathBuf {
    let p = Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(name);
    let _ = std::fs::remove_dir_all(&p);
    std::fs::create_dir_all(&p).unwrap();
    p
}

fn accuracy(model: &Backbone<f32>, data: &Dataset) -> f64 {
    let logits = predict_dataset(model, data, 8).unwrap();
    let correct = logits
        .data()
        .chunks(2)
        .zip(&data.labels)
        .filter(|(row, &l)| argmax(row) == l as usize)
        .count();
    correct as f64 / data.len() as f64
}

#[test]
fn a1_gradient_suite() {
    let _g = gate();
    let start = Instant::now();
    let ops = op_gradient_suite();
    let (op_name, op_worst) = ops.iter().cloned().fold((String::new(), 0.0), |a, b| if b.1 > a.1 { b } else { a });
    let e2e = end_to_end_gradient_check();
    let e2e_worst = max_err(&e2e);
    let elapsed = start.elapsed();
    let pass = op_worst < OP_GRAD_TOL && e2e_worst < E2E_GRAD_TOL && elapsed < A1_BUDGET;
    verdict(
        "A1",
        "GRADIENT SUITE",
        pass,
        &format!(
            "{} op checks, worst {op_worst:.2e} ({op_name}) < {OP_GRAD_TOL:.0e}; {} model parameters, worst {e2e_worst:.2e} < {E2E_GRAD_TOL:.0e}; {:.1}s",
            ops.len(),
            e2e.len(),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a2_oracle_suite() {
    let _g = gate();
    let start = Instant::now();
    let mut rng = Rng::new(20);
    let mut conv_worst = 0f64;
    for case in 0..50u64 {
        let k = 1 + 2 * rng.below(2);
        let stride = 1 + rng.below(2);
        let pad = rng.below(k / 2 + 1);
        let dims = [1 + rng.below(2), 1 + rng.below(4), k + rng.below(5), k + rng.below(5), k + rng.below(5)];
        let cout = 1 + rng.below(4);
        let x = rand64(&dims, 5000 + case);
        let w = rand64(&[cout, dims[1], k, k, k], 6000 + case);
        let b = rand64(&[cout], 7000 + case);
        let got = conv3d(&x, &w, Some(&b), ConvGeometry::new(stride, pad)).unwrap();
        let want = naive_conv3d(&x, &w, Some(&b), stride, pad);
        assert_eq!(got.dims(), want.dims());
        for (a, b) in got.data().iter().zip(want.data()) {
            conv_worst = conv_worst.max((a - b).abs());
        }
    }
    let mut auc_mismatches = 0;
    for _ in 0..100 {
        let n = 2 + rng.below(40);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.below(2) as u8).collect();
        labels[0] = 0;
        labels[1] = 1;
        let scores: Vec<f64> = (0..n).map(|_| rng.below(8) as f64 * 0.125 + if rng.below(2) == 0 { rng.uniform() } else { 0.0 }).collect();
        if roc_auc(&scores, &labels).unwrap() != pair_count_auc(&scores, &labels) {
            auc_mismatches += 1;
        }
    }
    let mut dam = DualAttention::<f32>::new("dam", 16, 8, 3, SpatialMerge::Concat, &mut rng);
    dam.visit_mut(&mut |p| p.set_value(Tensor::zeros(p.value().dims())).unwrap());
    let f = rand32(&[2, 16, 5, 4, 6], 21);
    let dam_exact = dam.forward(&f).unwrap().0 == f.scale(0.25);
    let elapsed = start.elapsed();
    let pass = conv_worst < CONV_ORACLE_TOL && auc_mismatches == 0 && dam_exact && elapsed < A2_BUDGET;
    verdict(
        "A2",
        "ORACLE SUITE",
        pass,
        &format!(
            "conv3d 50 shapes max |Δ| {conv_worst:.2e} < {CONV_ORACLE_TOL:.0e}; AUC 100 instances, {auc_mismatches} mismatches; zero DAM == 0.25·F: {dam_exact}; {:.1}s",
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a3_overfit() {
    let _g = gate();
    let start = Instant::now();
    let dir = scratch("a3");
    let recs = phantom_dataset(&dir, 32, 8, 7, "synth-adni", 0.0);
    let data = Dataset::load(&recs).unwrap();
    let config = RunConfig::preset("overfit").unwrap().with_seed(7);
    let mut trainer = Trainer::new(&config, data.spatial_dims()).unwrap();
    let mut reached = None;
    let mut last_acc = 0.0;
    while trainer.epochs_done() < A3_MAX_EPOCHS.min(config.epochs) {
        trainer.run_epoch(&data).unwrap();
        last_acc = accuracy(&trainer.model, &data);
        if last_acc == 1.0 {
            reached = Some(trainer.epochs_done());
            break;
        }
    }
    let elapsed = start.elapsed();
    let pass = reached.is_some() && elapsed < A3_BUDGET;
    verdict(
        "A3",
        "OVERFIT",
        pass,
        &format!(
            "16 volumes 32³, adam: eval-mode train accuracy {:.3}, 100% at epoch {} (limit {A3_MAX_EPOCHS}); {:.1}s",
            last_acc,
            reached.map_or("-".to_string(), |e| e.to_string()),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

struct SeedRun {
    seed: u64,
    model: Backbone<f32>,
    test: Dataset,
    test_report: MetricsReport,
    in_domain_acc: f64,
    shifted_acc: [f64; 2],
    train_time: Duration,
}

/// Trains the default model for each seed on an 80/20 split of 100
/// phantoms and evaluates it in- and out-of-domain.
fn seed_runs() -> &'static [SeedRun] {
    static RUNS: OnceLock<Vec<SeedRun>> = OnceLock::new();
    RUNS.get_or_init(|| {
        let root = scratch("seeds");
        SEEDS
            .iter()
            .map(|&seed| {
                let start = Instant::now();
                let dir = root.join(format!("seed_{seed}"));
                let recs = phantom_dataset(&dir.join("adni"), 32, 50, seed, "synth-adni", 0.0);
                let (train_recs, test_recs) = split_stratified(&recs, 0.8, seed).unwrap();
                audit_leakage(&train_recs, &test_recs).unwrap();
                let all = Dataset::load(&recs).unwrap();
                let config = RunConfig::preset("desk").unwrap().with_seed(seed);
                let outcome = train(&config, &all.subset(&train_recs).unwrap(), &dir.join("run"), None).unwrap();
                let train_time = start.elapsed();
                let test = all.subset(&test_recs).unwrap();
                let logits = predict_dataset(&outcome.model, &test, 8).unwrap();
                let (test_report, _) = evaluate("synth-adni", &logits, &test.labels).unwrap();

                let held_out = |tag: &str, offset: u64, shift: f64| {
                    let r = phantom_dataset(&dir.join(tag), 32, A5_PER_CLASS, seed + offset, tag, shift);
                    let acc = accuracy(&outcome.model, &Dataset::load(&r).unwrap());
                    std::fs::remove_dir_all(dir.join(tag)).unwrap();
                    acc
                };
                let in_domain_acc = held_out("synth-adni-holdout", 1000, 0.0);
                let shifted_acc = [held_out("synth-aibl", 2000, A5_SHIFT), held_out("synth-oasis", 3000, A5_SHIFT)];
                SeedRun {
                    seed,
                    model: outcome.model,
                    test,
                    test_report,
                    in_domain_acc,
                    shifted_acc,
                    train_time,
                }
            })
            .collect()
    })
}

#[test]
fn a4_separability() {
    let _g = gate();
    let start = Instant::now();
    let runs = seed_runs();
    let elapsed = start.elapsed();
    let mut pass = elapsed < A4_BUDGET;
    let mut parts = Vec::new();
    for r in runs {
        let auc = r.test_report.auc.unwrap_or(0.0);
        pass &= r.test_report.accuracy >= A4_MIN_ACC && auc >= A4_MIN_AUC;
        parts.push(format!(
            "seed {}: acc {:.3} auc {:.3} ({:.0}s)",
            r.seed,
            r.test_report.accuracy,
            auc,
            r.train_time.as_secs_f64()
        ));
    }
    verdict(
        "A4",
        "SEPARABILITY",
        pass,
        &format!(
            "{}; need acc ≥ {A4_MIN_ACC}, auc ≥ {A4_MIN_AUC}; {:.1}s",
            parts.join("; "),
            elapsed.as_secs_f64()
        ),
    );
    assert!(pass);
}

#[test]
fn a5_generalizability() {
    let _g = gate();
    let runs = seed_runs();
    let mut pass = true;
    let mut parts = Vec::new();
    for r in runs {
        let [aibl, oasis] = r.shifted_acc;
        pass &= aibl >= A5_MIN_ACC && oasis >= A5_MIN_ACC && r.in_domain_acc >= aibl && r.in_domain_acc >= oasis;
        parts.push(format!(
            "seed {}: in-domain {:.3}, aibl {:.3}, oasis {:.3}",
            r.seed, r.in_domain_acc, aibl, oasis
        ));
    }
    verdict(
        "A5",
        "GENERALIZABILITY",
        pass,
        &format!("{}; n = {} per domain, shift {A5_SHIFT}, need shifted ≥ {A5_MIN_ACC} and ≤ in-domain", parts.join("; "), 2 * A5_PER_CLASS),
    );
    assert!(pass);
}

#[test]
fn a6_localization() {
    let _g = gate();
    let runs = seed_runs();
    let mut scores = Vec::new();
    let mut chance = Vec::new();
    let mut tap_scores = [0.0; SPATIAL_TAPS.len()];
    'outer: for r in runs {
        let logits = predict_dataset(&r.model, &r.test, 8).unwrap();
        for (i, rec) in r.test.records.iter().enumerate() {
            let row = &logits.data()[2 * i..2 * i + 2];
            if rec.label != 1 || argmax(row) != 1 {
                continue;
            }
            let lesion = rec.lesion.as_ref().expect("label-1 phantoms record their lesion");
            let mask = lesion_mask(lesion, r.test.spatial_dims());
            for (t, tap) in SPATIAL_TAPS.iter().enumerate() {
                let map = gradcam(&r.model, &r.test.volumes[i], 1, tap).unwrap();
                tap_scores[t] += localization_score(&map.values, &mask, A6_TOP_FRACTION).unwrap();
            }
            let map = gradcam(&r.model, &r.test.volumes[i], 1, DEFAULT_LAYER).unwrap();
            scores.push(localization_score(&map.values, &mask, A6_TOP_FRACTION).unwrap());
            chance.push(mask.sum() as f64 / mask.len() as f64);
            if scores.len() == A6_MAPS {
                break 'outer;
            }
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
    let (m, c) = (mean(&scores), mean(&chance));
    let pass = scores.len() == A6_MAPS && m >= A6_MIN_SCORE && c < 0.05;
    // Reported for reference only; the verdict uses the default layer.
    let per_tap: Vec<String> = SPATIAL_TAPS
        .iter()
        .zip(tap_scores)
        .map(|(t, s)| format!("{t} {:.3}", s / scores.len().max(1) as f64))
        .collect();
    verdict(
        "A6",
        "LOCALIZATION",
        pass,
        &format!(
            "{} maps at {DEFAULT_LAYER}, mean top-{:.0}% score {m:.3} (min {:.3}, max {:.3}) vs chance {c:.4}; need ≥ {A6_MIN_SCORE}; all taps: {}",
            scores.len(),
            A6_TOP_FRACTION * 100.0,
            scores.iter().copied().fold(f64::INFINITY, f64::min),
            scores.iter().copied().fold(0.0, f64::max),
            per_tap.join(", "),
        ),
    );
    assert!(pass);
}

#[test]
fn a7_protocol_structure() {
    let _g = gate();
    let root = scratch("a7");
    let recs = phantom_dataset(&root.join("data"), 16, 10, 11, "synth-adni", 0.0);
    let manifest = root.join("data/manifest.jsonl");
    let run = |out: &str, epochs: usize| RunConfig {
        model: ModelConfig { widths: [4, 8, 8, 16], ..ModelConfig::default() },
        epochs,
        batch_size: 4,
        train_manifest: Some(manifest.clone()),
        output_dir: root.join(out),
        ..RunConfig::default()
    }
    .with_seed(11);

    // Five leakage-audited folds and an aggregate with spread.
    let cv = run("cv", 2);
    let agg = cmd_cv(&cv, 5).unwrap();
    let mut folds_ok = agg.folds.len() == 5 && agg.std.is_some();
    let mut seen = std::collections::BTreeSet::new();
    for i in 1..=5 {
        let dir = cv.output_dir.join(format!("fold_{i}"));
        let tr = read_manifest(dir.join("train.jsonl")).unwrap();
        let val = read_manifest(dir.join("val.jsonl")).unwrap();
        folds_ok &= audit_leakage(&tr, &val).is_ok() && tr.len() + val.len() == recs.len();
        folds_ok &= val.iter().all(|r| seen.insert(r.subject_id.clone()));
    }
    folds_ok &= seen.len() == recs.len();

    // Checkpoint round trip.
    let first = run("rerun_a", 3);
    let outcome = cmd_train(&first, None).unwrap();
    let data = Dataset::load(&recs).unwrap();
    let restored = load_checkpoint(&outcome.checkpoint_path).unwrap().restore_model(None).unwrap();
    let round_trip = predict_dataset(&outcome.model, &data, 8).unwrap() == predict_dataset(&restored, &data, 8).unwrap();

    // Identical reruns.
    let second = run("rerun_b", 3);
    cmd_train(&second, None).unwrap();
    cmd_eval(&first.output_dir.join("model.damc"), &manifest, &first.output_dir).unwrap();
    cmd_eval(&second.output_dir.join("model.damc"), &manifest, &second.output_dir).unwrap();
    let read = |p: PathBuf| std::fs::read(p).unwrap();
    let same_metrics = read(first.output_dir.join("metrics.json")) == read(second.output_dir.join("metrics.json"));
    let same_ckpt = read(first.output_dir.join("model.damc")) == read(second.output_dir.join("model.damc"));

    let pass = folds_ok && round_trip && same_metrics && same_ckpt;
    verdict(
        "A7",
        "PROTOCOL STRUCTURE",
        pass,
        &format!(
            "5-fold cv audited: {folds_ok} (mean acc {:.3} ± {:.3}); checkpoint round trip bit-identical: {round_trip}; rerun metrics.json identical: {same_metrics}; model.damc identical: {same_ckpt}",
            agg.accuracy,
            agg.std.as_ref().map_or(f64::NAN, |s| s.accuracy)
        ),
    );
    assert!(pass);
}

#[test]
fn synthetic_defaults_keep_lesion_small() {
    let c = SynthConfig::default();
    let l = dam3d::data::synth_subject(&c, 1).lesion;
    let m = lesion_mask(&l, [c.size; 3]);
    assert!((m.sum() as f64 / m.len() as f64) < A6_TOP_FRACTION);
}
