//! Point estimation of the global clustering by minimizing an estimated
//! posterior expected loss over candidate partitions.
//!
//! Every supported loss is a function of contingency counts between each
//! refined sample and the candidate, so workers only ship sparse count maps.

use std::collections::BTreeMap;

use rand::Rng;

use crate::error::{Error, Result};

/// Sparse contingency table: (sample cluster, candidate cluster) → count.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct JointCounts {
    pub cells: BTreeMap<(usize, usize), u64>,
}

impl JointCounts {
    pub fn from_labels(sample: &[usize], candidate: &[usize]) -> Result<Self> {
        check_lengths(sample, candidate)?;
        let mut cells = BTreeMap::new();
        for (&a, &b) in sample.iter().zip(candidate) {
            *cells.entry((a, b)).or_default() += 1;
        }
        Ok(JointCounts { cells })
    }

    pub fn merge(&mut self, other: &JointCounts) {
        for (k, v) in &other.cells {
            *self.cells.entry(*k).or_default() += v;
        }
    }

    pub fn total(&self) -> u64 {
        self.cells.values().sum()
    }
}

/// Counts needed to score one candidate: its cluster sizes and one joint
/// table per refined sample.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct CandidateCounts {
    pub sizes: BTreeMap<usize, u64>,
    pub joints: Vec<JointCounts>,
}

impl CandidateCounts {
    /// Counts over one block of rows. Workers call this on their shard.
    pub fn from_labels(samples: &[&[usize]], candidate: &[usize]) -> Result<Self> {
        let mut sizes = BTreeMap::new();
        for &b in candidate {
            *sizes.entry(b).or_default() += 1;
        }
        let joints = samples
            .iter()
            .map(|s| JointCounts::from_labels(s, candidate))
            .collect::<Result<_>>()?;
        Ok(CandidateCounts { sizes, joints })
    }

    /// Adds another block's counts. Both must cover the same samples.
    pub fn merge(&mut self, other: &CandidateCounts) -> Result<()> {
        if self.joints.is_empty() && self.sizes.is_empty() {
            *self = other.clone();
            return Ok(());
        }
        if self.joints.len() != other.joints.len() {
            return Err(Error::Data(format!(
                "count blocks cover {} and {} samples",
                self.joints.len(),
                other.joints.len()
            )));
        }
        for (k, v) in &other.sizes {
            *self.sizes.entry(*k).or_default() += v;
        }
        for (a, b) in self.joints.iter_mut().zip(&other.joints) {
            a.merge(b);
        }
        Ok(())
    }

    /// Number of count entries, the unit of communication cost.
    pub fn entries(&self) -> usize {
        self.sizes.len() + self.joints.iter().map(|j| j.cells.len()).sum::<usize>()
    }

    fn check(&self, n: u64) -> Result<()> {
        if self.joints.is_empty() {
            return Err(Error::Data("no sample counts for candidate".into()));
        }
        let size_total: u64 = self.sizes.values().sum();
        if size_total != n || self.joints.iter().any(|j| j.total() != n) {
            return Err(Error::Data(format!(
                "counts for candidate do not sum to N = {n}"
            )));
        }
        Ok(())
    }
}

fn check_lengths(a: &[usize], b: &[usize]) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Data(format!(
            "partitions differ in length: {} vs {}",
            a.len(),
            b.len()
        )));
    }
    Ok(())
}

fn plogp(count: u64, n: f64) -> f64 {
    if count == 0 {
        0.0
    } else {
        let p = count as f64 / n;
        p * p.ln()
    }
}

/// Variation of information between two partitions, in nats.
pub fn vi_distance(a: &[usize], b: &[usize]) -> Result<f64> {
    let joint = JointCounts::from_labels(a, b)?;
    if a.is_empty() {
        return Ok(0.0);
    }
    let n = a.len() as f64;
    let mut rows: BTreeMap<usize, u64> = BTreeMap::new();
    let mut cols: BTreeMap<usize, u64> = BTreeMap::new();
    for (&(i, j), &c) in &joint.cells {
        *rows.entry(i).or_default() += c;
        *cols.entry(j).or_default() += c;
    }
    let h_joint: f64 = joint.cells.values().map(|&c| plogp(c, n)).sum();
    let h_a: f64 = rows.values().map(|&c| plogp(c, n)).sum();
    let h_b: f64 = cols.values().map(|&c| plogp(c, n)).sum();
    Ok((h_a + h_b - 2.0 * h_joint).max(0.0))
}

/// Expected VI to the sampled partitions, less the candidate-independent
/// mean sample entropy.
pub fn estimate_expected_vi(counts: &CandidateCounts, n: u64) -> Result<f64> {
    counts.check(n)?;
    let nf = n as f64;
    let own: f64 = counts.sizes.values().map(|&c| plogp(c, nf)).sum();
    let cross: f64 = counts
        .joints
        .iter()
        .map(|j| j.cells.values().map(|&c| plogp(c, nf)).sum::<f64>())
        .sum();
    Ok(own - 2.0 * cross / counts.joints.len() as f64)
}

/// Expected Binder loss (equal costs, per N²), less the same kind of offset.
pub fn estimate_expected_binder(counts: &CandidateCounts, n: u64) -> Result<f64> {
    counts.check(n)?;
    let nf = n as f64;
    let sq = |c: u64| (c as f64 / nf).powi(2);
    let own: f64 = counts.sizes.values().map(|&c| sq(c)).sum();
    let cross: f64 = counts
        .joints
        .iter()
        .map(|j| j.cells.values().map(|&c| sq(c)).sum::<f64>())
        .sum();
    Ok(own - 2.0 * cross / counts.joints.len() as f64)
}

/// Loss functions on partitions that reduce to contingency counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Loss {
    #[default]
    Vi,
    Binder,
}

impl Loss {
    pub fn score(self, counts: &CandidateCounts, n: u64) -> Result<f64> {
        match self {
            Loss::Vi => estimate_expected_vi(counts, n),
            Loss::Binder => estimate_expected_binder(counts, n),
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Loss::Vi => "VI score (offset)",
            Loss::Binder => "Binder score (offset)",
        }
    }
}

impl std::str::FromStr for Loss {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vi" => Ok(Loss::Vi),
            "binder" => Ok(Loss::Binder),
            other => Err(Error::Config(format!(
                "unknown loss {other:?} (expected vi or binder)"
            ))),
        }
    }
}

/// Positions within the refined samples to use as candidates, drawn without
/// replacement and returned in increasing order.
pub fn sample_candidates<R: Rng + ?Sized>(
    samples: usize,
    candidates: usize,
    rng: &mut R,
) -> Vec<usize> {
    let mut picked = rand::seq::index::sample(rng, samples, candidates.min(samples)).into_vec();
    picked.sort_unstable();
    picked
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CandidateScore {
    /// Position of the candidate among the refined samples.
    pub sample: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Selection {
    pub best: usize,
    pub best_score: f64,
    pub scores: Vec<CandidateScore>,
}

/// Minimum score, ties to the earlier sample.
pub fn select_best(scores: Vec<CandidateScore>) -> Result<Selection> {
    let mut best: Option<&CandidateScore> = None;
    for s in &scores {
        if !s.score.is_finite() {
            return Err(Error::Numerical(format!(
                "candidate {} scored {}",
                s.sample, s.score
            )));
        }
        best = match best {
            Some(b) if b.score < s.score || (b.score == s.score && b.sample < s.sample) => Some(b),
            _ => Some(s),
        };
    }
    let b = best.ok_or_else(|| Error::Data("no candidates to select from".into()))?;
    Ok(Selection {
        best: b.sample,
        best_score: b.score,
        scores: scores.clone(),
    })
}

/// Single-process selection over full-length refined partitions.
pub fn select_serial(
    samples: &[Vec<usize>],
    candidates: &[usize],
    loss: Loss,
) -> Result<Selection> {
    let refs: Vec<&[usize]> = samples.iter().map(Vec::as_slice).collect();
    let n = samples.first().map_or(0, Vec::len) as u64;
    let scores = candidates
        .iter()
        .map(|&t| {
            let c = samples
                .get(t)
                .ok_or_else(|| Error::Data(format!("candidate {t} is not a sample")))?;
            let counts = CandidateCounts::from_labels(&refs, c)?;
            Ok(CandidateScore {
                sample: t,
                score: loss.score(&counts, n)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    select_best(scores)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::stream_rng;

    #[test]
    fn vi_examples() {
        assert_eq!(vi_distance(&[1, 2, 2], &[5, 7, 7]).unwrap(), 0.0);
        let v = vi_distance(&[1, 1, 2, 2], &[1, 1, 1, 1]).unwrap();
        assert!((v - 2f64.ln()).abs() < 1e-15);
        let a = [0, 0, 1, 2, 2, 1];
        let b = [1, 0, 0, 1, 1, 2];
        assert_eq!(vi_distance(&a, &b).unwrap(), vi_distance(&b, &a).unwrap());
        assert!(vi_distance(&[1], &[1, 2]).is_err());
    }

    #[test]
    fn expected_vi_reductions() {
        let c = [0, 0, 1, 1];
        let counts = CandidateCounts::from_labels(&[&c], &c).unwrap();
        assert!((estimate_expected_vi(&counts, 4).unwrap() - 2f64.ln()).abs() < 1e-15);
        let one = [3, 3, 3];
        let counts = CandidateCounts::from_labels(&[&one], &one).unwrap();
        assert!(estimate_expected_vi(&counts, 3).unwrap().abs() < 1e-15);

        let mut doubled = CandidateCounts::from_labels(&[&c], &c).unwrap();
        let again = doubled.clone();
        doubled.merge(&again).unwrap();
        assert!((estimate_expected_vi(&doubled, 8).unwrap() - 2f64.ln()).abs() < 1e-15);
        assert!(estimate_expected_vi(&doubled, 4).is_err());
    }

    #[test]
    fn score_differences_match_mean_vi() {
        let samples = vec![
            vec![0, 0, 1, 1, 2, 2, 0, 1],
            vec![0, 0, 0, 1, 1, 1, 0, 1],
            vec![2, 2, 1, 1, 0, 0, 2, 2],
        ];
        let refs: Vec<&[usize]> = samples.iter().map(Vec::as_slice).collect();
        let mean_vi = |c: &[usize]| {
            samples
                .iter()
                .map(|s| vi_distance(s, c).unwrap())
                .sum::<f64>()
                / 3.0
        };
        let score = |c: &[usize]| {
            estimate_expected_vi(&CandidateCounts::from_labels(&refs, c).unwrap(), 8).unwrap()
        };
        for a in 0..3 {
            for b in 0..3 {
                let d1 = score(&samples[a]) - score(&samples[b]);
                let d2 = mean_vi(&samples[a]) - mean_vi(&samples[b]);
                assert!((d1 - d2).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn selection_ties_and_single_candidate() {
        let same = vec![vec![0, 1], vec![1, 0]];
        let sel = select_serial(&same, &[1, 0], Loss::Vi).unwrap();
        assert_eq!(sel.best, 0);
        let sel = select_serial(&same, &[1], Loss::Binder).unwrap();
        assert_eq!(sel.best, 1);
    }

    #[test]
    fn candidates_are_distinct_and_sorted() {
        let c = sample_candidates(100, 20, &mut stream_rng(3, 0));
        assert_eq!(c.len(), 20);
        assert!(c.windows(2).all(|w| w[0] < w[1]));
        assert_eq!(
            sample_candidates(5, 20, &mut stream_rng(3, 0)),
            vec![0, 1, 2, 3, 4]
        );
    }
}
