//! External clustering validation: mapped accuracy, pair-counting F-measure
//! and the adjusted Rand index.

use std::collections::BTreeMap;
use std::fmt;

use pathfinding::kuhn_munkres::kuhn_munkres;
use pathfinding::matrix::Matrix as CostMatrix;

use crate::error::{Error, Result};

/// Target of a predicted label after optimal matching.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum MappedLabel {
    Truth(usize),
    /// Predicted cluster with no true counterpart, numbered from 1.
    Unknown(usize),
}

impl fmt::Display for MappedLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            MappedLabel::Truth(l) => write!(f, "{l}"),
            MappedLabel::Unknown(i) => write!(f, "unknown{i}"),
        }
    }
}

impl serde::Serialize for MappedLabel {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LabelMap {
    pub map: BTreeMap<usize, MappedLabel>,
}

impl LabelMap {
    pub fn apply(&self, pred: &[usize]) -> Vec<MappedLabel> {
        pred.iter().map(|p| self.map[p]).collect()
    }
}

fn check_lengths(truth: &[usize], pred: &[usize]) -> Result<()> {
    if truth.len() != pred.len() {
        return Err(Error::Data(format!(
            "label vectors differ in length: {} vs {}",
            truth.len(),
            pred.len()
        )));
    }
    if truth.is_empty() {
        return Err(Error::Data("label vectors are empty".into()));
    }
    Ok(())
}

fn distinct(labels: &[usize]) -> Vec<usize> {
    let mut v = labels.to_vec();
    v.sort_unstable();
    v.dedup();
    v
}

/// Matching of predicted to true labels that maximizes agreements.
pub fn optimal_label_map(truth: &[usize], pred: &[usize]) -> Result<LabelMap> {
    check_lengths(truth, pred)?;
    let t = distinct(truth);
    let p = distinct(pred);
    let size = t.len().max(p.len());
    let mut weights = CostMatrix::new(size, size, 0i64);
    for (a, b) in truth.iter().zip(pred) {
        let i = p.binary_search(b).unwrap();
        let j = t.binary_search(a).unwrap();
        weights[(i, j)] += 1;
    }
    let (_, assignment) = kuhn_munkres(&weights);
    let mut map = BTreeMap::new();
    let mut unknown = 0;
    for (i, &label) in p.iter().enumerate() {
        let j = assignment[i];
        let target = if j < t.len() {
            MappedLabel::Truth(t[j])
        } else {
            unknown += 1;
            MappedLabel::Unknown(unknown)
        };
        map.insert(label, target);
    }
    Ok(LabelMap { map })
}

/// Pair classification counts over all n(n - 1)/2 pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize)]
pub struct PairCounts {
    pub tp: u64,
    pub fp: u64,
    pub fn_: u64,
    pub tn: u64,
}

fn choose2(n: u64) -> u64 {
    n * n.saturating_sub(1) / 2
}

pub fn pair_counts(truth: &[usize], pred: &[usize]) -> Result<PairCounts> {
    check_lengths(truth, pred)?;
    let mut joint: BTreeMap<(usize, usize), u64> = BTreeMap::new();
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&a, &b) in truth.iter().zip(pred) {
        *joint.entry((a, b)).or_default() += 1;
        *rows.entry(a).or_default() += 1;
        *cols.entry(b).or_default() += 1;
    }
    let tp: u64 = joint.values().map(|&n| choose2(n)).sum();
    let same_truth: u64 = rows.values().map(|&n| choose2(n)).sum();
    let same_pred: u64 = cols.values().map(|&n| choose2(n)).sum();
    let total = choose2(truth.len() as u64);
    Ok(PairCounts {
        tp,
        fp: same_pred - tp,
        fn_: same_truth - tp,
        tn: total + tp - same_pred - same_truth,
    })
}

impl PairCounts {
    pub fn f_measure(&self) -> f64 {
        let precision = ratio(self.tp, self.tp + self.fp);
        let recall = ratio(self.tp, self.tp + self.fn_);
        if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        }
    }

    /// Hubert–Arabie adjusted Rand index. Two single-cluster partitions
    /// score 1.
    pub fn ari(&self) -> f64 {
        let total = (self.tp + self.fp + self.fn_ + self.tn) as f64;
        let same_truth = (self.tp + self.fn_) as f64;
        let same_pred = (self.tp + self.fp) as f64;
        let expected = same_truth * same_pred / total;
        let max = 0.5 * (same_truth + same_pred);
        if (max - expected).abs() < f64::EPSILON * total.max(1.0) {
            return 1.0;
        }
        (self.tp as f64 - expected) / (max - expected)
    }
}

fn ratio(a: u64, b: u64) -> f64 {
    if b == 0 {
        1.0
    } else {
        a as f64 / b as f64
    }
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct MetricsReport {
    pub n: usize,
    pub accuracy: f64,
    pub ari: f64,
    pub f_measure: f64,
    pub pairs: PairCounts,
    pub label_map: BTreeMap<usize, MappedLabel>,
}

pub fn compute_metrics(truth: &[usize], pred: &[usize]) -> Result<MetricsReport> {
    let map = optimal_label_map(truth, pred)?;
    let hits = truth
        .iter()
        .zip(map.apply(pred))
        .filter(|(t, m)| *m == MappedLabel::Truth(**t))
        .count();
    let pairs = pair_counts(truth, pred)?;
    Ok(MetricsReport {
        n: truth.len(),
        accuracy: hits as f64 / truth.len() as f64,
        ari: pairs.ari(),
        f_measure: pairs.f_measure(),
        pairs,
        label_map: map.map,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_partitions_score_one() {
        let a = [1, 1, 2, 3, 3, 3];
        let r = compute_metrics(&a, &a).unwrap();
        assert_eq!((r.accuracy, r.ari, r.f_measure), (1.0, 1.0, 1.0));
    }

    #[test]
    fn swapped_labels_map_back() {
        let r = compute_metrics(&[1, 1, 2], &[2, 2, 1]).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.label_map[&2], MappedLabel::Truth(1));
        assert_eq!(r.label_map[&1], MappedLabel::Truth(2));
    }

    #[test]
    fn extra_predicted_cluster_is_unknown() {
        let map = optimal_label_map(&[1, 1, 2, 2], &[5, 5, 6, 7]).unwrap();
        let unknown: Vec<_> = map
            .map
            .values()
            .filter(|m| matches!(m, MappedLabel::Unknown(_)))
            .collect();
        assert_eq!(unknown.len(), 1);
        assert_eq!(unknown[0].to_string(), "unknown1");
    }

    #[test]
    fn crossed_partition_has_negative_ari() {
        // pairs: truth-same {01,23}, pred-same {02,13}, no overlap
        let p = pair_counts(&[1, 1, 2, 2], &[1, 2, 1, 2]).unwrap();
        assert_eq!(
            p,
            PairCounts {
                tp: 0,
                fp: 2,
                fn_: 2,
                tn: 2
            }
        );
        assert!((p.ari() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn length_mismatch() {
        assert!(compute_metrics(&[1, 2], &[1]).is_err());
    }
}
