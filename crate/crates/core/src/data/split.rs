//! Subject-level stratified splits and k-fold partitions.

use std::collections::{BTreeMap, BTreeSet};

use super::manifest::VolumeRecord;
use crate::error::{Error, Result};
use crate::rng::{mix, Rng};

/// Subjects grouped by label, each list in first-appearance order.
fn subjects_by_class(records: &[VolumeRecord]) -> Result<[Vec<String>; 2]> {
    let mut label_of: BTreeMap<&str, u8> = BTreeMap::new();
    let mut classes: [Vec<String>; 2] = Default::default();
    for r in records {
        match label_of.get(r.subject_id.as_str()) {
            Some(&l) if l != r.label => {
                return Err(Error::Data(format!("subject `{}` has conflicting labels", r.subject_id)))
            }
            Some(_) => {}
            None => {
                if r.label > 1 {
                    return Err(Error::Data(format!("label {} outside {{0, 1}}", r.label)));
                }
                label_of.insert(&r.subject_id, r.label);
                classes[r.label as usize].push(r.subject_id.clone());
            }
        }
    }
    Ok(classes)
}

fn select(records: &[VolumeRecord], subjects: &BTreeSet<String>, inside: bool) -> Vec<VolumeRecord> {
    records
        .iter()
        .filter(|r| subjects.contains(&r.subject_id) == inside)
        .cloned()
        .collect()
}

/// Fails if any subject id occurs on both sides.
pub fn audit_leakage(a: &[VolumeRecord], b: &[VolumeRecord]) -> Result<()> {
    let left: BTreeSet<&str> = a.iter().map(|r| r.subject_id.as_str()).collect();
    match b.iter().find(|r| left.contains(r.subject_id.as_str())) {
        Some(r) => Err(Error::Leakage(r.subject_id.clone())),
        None => Ok(()),
    }
}

/// Splits subjects per class into `round(train_frac · count)` training
/// subjects (at least one on each side). Returns `(train, test)`.
pub fn split_stratified(
    records: &[VolumeRecord],
    train_frac: f64,
    seed: u64,
) -> Result<(Vec<VolumeRecord>, Vec<VolumeRecord>)> {
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::InvalidArgument(format!("train_frac {train_frac} outside (0, 1)")));
    }
    let classes = subjects_by_class(records)?;
    let mut rng = Rng::new(mix(seed));
    let mut train = BTreeSet::new();
    for (label, mut subjects) in classes.into_iter().enumerate() {
        if subjects.len() < 2 {
            return Err(Error::Data(format!(
                "class {label} has {} subject(s); a split needs at least 2",
                subjects.len()
            )));
        }
        rng.shuffle(&mut subjects);
        let n = ((train_frac * subjects.len() as f64).round() as usize).clamp(1, subjects.len() - 1);
        train.extend(subjects.into_iter().take(n));
    }
    let (tr, te) = (select(records, &train, true), select(records, &train, false));
    audit_leakage(&tr, &te)?;
    Ok((tr, te))
}

/// `k` stratified `(train, validation)` pairs whose validation sides
/// partition the subjects; fold sizes differ by at most one.
pub fn kfold(records: &[VolumeRecord], k: usize, seed: u64) -> Result<Vec<(Vec<VolumeRecord>, Vec<VolumeRecord>)>> {
    if k < 2 {
        return Err(Error::InvalidArgument(format!("k = {k}; need at least 2 folds")));
    }
    let classes = subjects_by_class(records)?;
    let mut rng = Rng::new(mix(seed));
    let mut folds: Vec<BTreeSet<String>> = vec![BTreeSet::new(); k];
    let mut slot = 0;
    for (label, mut subjects) in classes.into_iter().enumerate() {
        if subjects.len() < k {
            return Err(Error::Data(format!(
                "class {label} has {} subject(s), fewer than k = {k}",
                subjects.len()
            )));
        }
        rng.shuffle(&mut subjects);
        for s in subjects {
            folds[slot % k].insert(s);
            slot += 1;
        }
    }
    folds
        .iter()
        .map(|val| {
            let pair = (select(records, val, false), select(records, val, true));
            audit_leakage(&pair.0, &pair.1)?;
            Ok(pair)
        })
        .collect()
}
