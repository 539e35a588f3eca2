//! Binary classification metrics with class 1 as the positive class.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::softmax;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        ratio(self.tp + self.tn, self.total())
    }

    /// `tp / (tp + fn)`, or 0 without positives.
    pub fn sensitivity(&self) -> f64 {
        ratio(self.tp, self.tp + self.fn_)
    }

    /// `tn / (tn + fp)`, or 0 without negatives.
    pub fn specificity(&self) -> f64 {
        ratio(self.tn, self.tn + self.fp)
    }
}

impl std::ops::Add for ConfusionMatrix {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            tp: self.tp + o.tp,
            fp: self.fp + o.fp,
            tn: self.tn + o.tn,
            fn_: self.fn_ + o.fn_,
        }
    }
}

fn check_binary(labels: &[u8]) -> Result<()> {
    match labels.iter().find(|&&l| l > 1) {
        Some(l) => Err(Error::InvalidArgument(format!("class id {l} outside {{0, 1}}"))),
        None => Ok(()),
    }
}

pub fn confusion(predictions: &[u8], labels: &[u8]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() || labels.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "predictions ({}) and labels ({}) must have the same nonzero length",
            predictions.len(),
            labels.len()
        )));
    }
    check_binary(predictions)?;
    check_binary(labels)?;
    let mut m = ConfusionMatrix::default();
    for (&p, &l) in predictions.iter().zip(labels) {
        match (p, l) {
            (1, 1) => m.tp += 1,
            (1, _) => m.fp += 1,
            (_, 1) => m.fn_ += 1,
            _ => m.tn += 1,
        }
    }
    Ok(m)
}

fn check_scores(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidArgument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::InvalidArgument("non-finite score".into()));
    }
    check_binary(labels)?;
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidArgument("AUC is undefined unless both classes are present".into()));
    }
    Ok((pos, neg))
}

/// Mann–Whitney AUC: the fraction of (positive, negative) pairs ranked
/// correctly, ties counting one half. Computed from mid-ranks.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of 2·rank over positives, kept integral.
    let mut twice_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share the mid-rank (i + j + 2) / 2.
        let twice_mid = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        twice_rank_sum += twice_mid * pos_in_group;
        i = j + 1;
    }
    let pos128 = pos as u128;
    let twice_u = twice_rank_sum - pos128 * (pos128 + 1);
    Ok(twice_u as f64 / (2 * pos128 * neg as u128) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
    pub threshold: f64,
}

/// Operating points for "predict positive when score ≥ threshold", from
/// the empty selection `(0, 0, +inf)` down to `(1, 1, min score)`.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = check_scores(scores, labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint {
        fpr: 0.0,
        tpr: 0.0,
        threshold: f64::INFINITY,
    }];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (idx, &k) in order.iter().enumerate() {
        if labels[k] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(idx + 1).is_none_or(|&n| scores[n] != scores[k]);
        if last_of_group {
            points.push(RocPoint {
                fpr: fp as f64 / neg as f64,
                tpr: tp as f64 / pos as f64,
                threshold: scores[k],
            });
        }
    }
    Ok(points)
}

/// Trapezoidal area under a ROC point list.
pub fn trapezoid_area(points: &[RocPoint]) -> f64 {
    points
        .windows(2)
        .map(|w| (w[1].fpr - w[0].fpr) * (w[1].tpr + w[0].tpr) / 2.0)
        .sum()
}

pub fn roc_csv(points: &[RocPoint]) -> String {
    let mut s = String::from("fpr,tpr,threshold\n");
    for p in points {
        let _ = writeln!(s, "{},{},{}", p.fpr, p.tpr, p.threshold);
    }
    s
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricSpread {
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub dataset_tag: String,
    pub n: u64,
    pub accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
    /// `None` when only one class was evaluated.
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub folds: Vec<MetricsReport>,
    /// Sample standard deviation across folds, present on aggregates.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricSpread>,
}

impl MetricsReport {
    pub fn from_confusion(dataset_tag: &str, m: ConfusionMatrix, auc: Option<f64>) -> Self {
        Self {
            dataset_tag: dataset_tag.to_string(),
            n: m.total(),
            accuracy: m.accuracy(),
            sensitivity: m.sensitivity(),
            specificity: m.specificity(),
            auc,
            confusion: m,
            folds: Vec::new(),
            std: None,
        }
    }
}

/// Predicted classes (argmax, first index on ties) and class-1 probabilities.
pub fn decisions(logits: &Tensor<f32>) -> Result<(Vec<u8>, Vec<f64>)> {
    let [_, c] = logits.dims2()?;
    if c != 2 {
        return Err(Error::InvalidArgument(format!("binary metrics need 2 logits per row, got {c}")));
    }
    let probs = softmax(logits)?;
    let preds = logits
        .data()
        .chunks(2)
        .map(|r| u8::from(r[1] > r[0]))
        .collect();
    let scores = probs.data().chunks(2).map(|r| r[1] as f64).collect();
    Ok((preds, scores))
}

/// Report plus ROC points for one evaluated set.
pub fn evaluate(dataset_tag: &str, logits: &Tensor<f32>, labels: &[u8]) -> Result<(MetricsReport, Vec<RocPoint>)> {
    let (preds, scores) = decisions(logits)?;
    let m = confusion(&preds, labels)?;
    let both = labels.contains(&0) && labels.contains(&1);
    let (auc, roc) = if both {
        (Some(roc_auc(&scores, labels)?), roc_curve(&scores, labels)?)
    } else {
        (None, Vec::new())
    };
    Ok((MetricsReport::from_confusion(dataset_tag, m, auc), roc))
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Unweighted mean and sample standard deviation of each metric.
pub fn aggregate_cv(folds: &[MetricsReport]) -> Result<MetricsReport> {
    if folds.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "aggregation needs at least 2 folds, got {}",
            folds.len()
        )));
    }
    let col = |f: fn(&MetricsReport) -> f64| mean_std(&folds.iter().map(f).collect::<Vec<_>>());
    let (acc, acc_sd) = col(|r| r.accuracy);
    let (sen, sen_sd) = col(|r| r.sensitivity);
    let (spec, spec_sd) = col(|r| r.specificity);
    let aucs: Option<Vec<f64>> = folds.iter().map(|r| r.auc).collect();
    let auc = aucs.map(|a| mean_std(&a));
    let mut tag = folds[0].dataset_tag.clone();
    if folds.iter().any(|r| r.dataset_tag != tag) {
        tag = "mixed".into();
    }
    let confusion = folds.iter().fold(ConfusionMatrix::default(), |acc, r| acc + r.confusion);
    Ok(MetricsReport {
        dataset_tag: tag,
        n: folds.iter().map(|r| r.n).sum(),
        accuracy: acc,
        sensitivity: sen,
        specificity: spec,
        auc: auc.map(|a| a.0),
        confusion,
        folds: folds.to_vec(),
        std: Some(MetricSpread {
            accuracy: acc_sd,
            sensitivity: sen_sd,
            specificity: spec_sd,
            auc: auc.map(|a| a.1),
        }),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportStyle {
    Table,
    Json,
}

fn row(label: &str, n: Option<u64>, acc: f64, sen: f64, spec: f64, auc: Option<f64>) -> String {
    let n = n.map_or_else(String::new, |n| n.to_string());
    let auc = auc.map_or_else(|| "-".to_string(), |a| format!("{a:.4}"));
    format!(
        "{label:<12} {n:>5}  {:.2}  {:.2}  {:.2}  {auc}",
        100.0 * acc,
        100.0 * sen,
        100.0 * spec
    )
}

pub fn render_report(report: &MetricsReport, style: ReportStyle) -> String {
    match style {
        ReportStyle::Json => {
            let mut s = serde_json::to_string_pretty(report).expect("report serializes");
            s.push('\n');
            s
        }
        ReportStyle::Table => {
            let mut out = format!("{:<12} {:>5}  Acc (%)  Sen (%)  Spec (%)  AUC\n", "dataset", "n");
            for (i, f) in report.folds.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{}",
                    row(&format!("fold {}", i + 1), Some(f.n), f.accuracy, f.sensitivity, f.specificity, f.auc)
                );
            }
            let r = report;
            let _ = writeln!(
                out,
                "{}",
                row(&r.dataset_tag, Some(r.n), r.accuracy, r.sensitivity, r.specificity, r.auc)
            );
            if let Some(sd) = &r.std {
                let _ = writeln!(out, "{}", row("± std", None, sd.accuracy, sd.sensitivity, sd.specificity, sd.auc));
            }
            out
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(acc: f64, sen: f64, spec: f64) -> MetricsReport {
        MetricsReport {
            accuracy: acc,
            sensitivity: sen,
            specificity: spec,
            ..MetricsReport::from_confusion("synth-adni", ConfusionMatrix::default(), Some(0.5))
        }
    }

    #[test]
    fn perfect_classifier() {
        let m = confusion(&[1, 0, 1, 0], &[1, 0, 1, 0]).unwrap();
        assert_eq!(m, ConfusionMatrix { tp: 2, fp: 0, tn: 2, fn_: 0 });
        assert_eq!(m.accuracy(), 1.0);
    }

    #[test]
    fn always_positive() {
        let m = confusion(&[1, 1, 1, 1], &[1, 0, 1, 0]).unwrap();
        assert_eq!((m.sensitivity(), m.specificity()), (1.0, 0.0));
        assert!(confusion(&[1], &[1, 0]).is_err());
        assert!(confusion(&[2], &[1]).is_err());
    }

    #[test]
    fn auc_extremes_and_ties() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.2], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.3; 6], &[1, 0, 1, 0, 1, 0]).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn curve_matches_auc() {
        let s = [0.1, 0.4, 0.35, 0.8, 0.4, 0.7];
        let l = [0, 0, 1, 1, 1, 0];
        let pts = roc_curve(&s, &l).unwrap();
        assert_eq!(pts.first().unwrap().threshold, f64::INFINITY);
        assert_eq!((pts.last().unwrap().fpr, pts.last().unwrap().tpr), (1.0, 1.0));
        assert!((trapezoid_area(&pts) - roc_auc(&s, &l).unwrap()).abs() < 1e-12);
        assert!(roc_csv(&pts).starts_with("fpr,tpr,threshold\n0,0,inf\n"));
    }

    #[test]
    fn two_fold_aggregate() {
        let agg = aggregate_cv(&[report(0.8, 1.0, 0.6), report(1.0, 1.0, 1.0)]).unwrap();
        assert!((agg.accuracy - 0.9).abs() < 1e-12);
        assert!((agg.std.as_ref().unwrap().accuracy - 0.02f64.sqrt()).abs() < 1e-12);
        assert_eq!(agg.std.unwrap().sensitivity, 0.0);
        assert!(aggregate_cv(&[report(1.0, 1.0, 1.0)]).is_err());
    }

    #[test]
    fn table_row_percentages() {
        let t = render_report(&report(0.9630, 0.9376, 0.9795), ReportStyle::Table);
        assert!(t.contains("96.30  93.76  97.95"), "{t}");
        let t = render_report(&report(1.0, 1.0, 1.0), ReportStyle::Table);
        assert!(t.contains("100.00  100.00  100.00"), "{t}");
    }

    #[test]
    fn json_round_trip() {
        let r = report(0.9630, 0.9376, 0.9795);
        let v: serde_json::Value = serde_json::from_str(&render_report(&r, ReportStyle::Json)).unwrap();
        assert_eq!(v["accuracy"].as_f64().unwrap(), 0.9630);
        assert_eq!(v["specificity"].as_f64().unwrap(), 0.9795);
        assert_eq!(v["confusion"]["fn"], 0);
        let back: MetricsReport = serde_json::from_value(v).unwrap();
        assert_eq!(back, r);
    }

    #[test]
    fn decisions_from_logits() {
        let logits = Tensor::new(vec![3, 2], vec![0.0f32, 1.0, 2.0, -1.0, 0.5, 0.5]).unwrap();
        let (p, s) = decisions(&logits).unwrap();
        assert_eq!(p, vec![1, 0, 0]);
        assert!((s[2] - 0.5).abs() < 1e-7 && s[0] > 0.5);
    }
}
