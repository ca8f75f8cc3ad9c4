//! Cross-worker alignment of local allocations through a collapsed Gibbs
//! sweep over a reference-anchored Gaussian mixture of items.
//!
//! An item is a nonempty (cluster, subcomponent) cell on one worker. Every
//! item is grouped with one item of the reference worker; its cluster label
//! becomes that reference item's cluster. The master only ever sees item
//! summaries. Likelihood terms needing raw rows are delegated to an
//! [`ItemLikelihood`] implementation living next to the data.

use std::collections::HashMap;

use rand::Rng;

use crate::conditionals::SubStats;
use crate::error::{Error, Result};
use crate::kernels::{ln_gamma, log_categorical_sample, symmetrize, Matrix, StudentT, Vector};
use crate::model::{AllocationState, Points};

/// Address of an item: owning worker and slot `L * k + l` (zero based).
#[derive(
    Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize,
)]
pub struct ItemKey {
    pub worker: usize,
    pub within_index: usize,
}

/// Size, mean and second moment `Σ y yᵀ / n` of one item.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ItemStats {
    pub key: ItemKey,
    pub size: u64,
    pub mean: Vector,
    pub second_moment: Matrix,
}

/// Item statistics plus the local rows they summarize. Stays on the worker.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalItem {
    pub stats: ItemStats,
    pub members: Vec<usize>,
}

/// One item per nonempty (cluster, subcomponent) of a shard, in slot order.
pub fn extract_items(
    worker: usize,
    points: &Points,
    alloc: &AllocationState,
    subcomponents: usize,
) -> Vec<LocalItem> {
    let mut cells: std::collections::BTreeMap<usize, (SubStats, Vec<usize>)> = Default::default();
    for (i, row) in points.rows().enumerate() {
        let slot = alloc.slot(i, subcomponents);
        let entry = cells
            .entry(slot)
            .or_insert_with(|| (SubStats::zeros(points.dim()), Vec::new()));
        entry.0.add(row);
        entry.1.push(i);
    }
    cells
        .into_iter()
        .map(|(slot, (s, members))| {
            let n = s.count as f64;
            LocalItem {
                stats: ItemStats {
                    key: ItemKey {
                        worker,
                        within_index: slot,
                    },
                    size: s.count,
                    mean: &s.sum / n,
                    second_moment: symmetrize(&(&s.outer / n)),
                },
                members,
            }
        })
        .collect()
}

/// Conjugate prior of the item-grouping mixture: group weights
/// `Dir(alpha)`, group means `N(0, C)`, group covariances `IW(nu, scale)`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RefinementPrior {
    pub alpha: f64,
    pub nu: f64,
    pub scale: Matrix,
}

impl RefinementPrior {
    /// `alpha = 1`, `nu = d + 2`, `scale` = data covariance.
    pub fn from_data_cov(cov: &Matrix) -> Self {
        RefinementPrior {
            alpha: 1.0,
            nu: cov.nrows() as f64 + 2.0,
            scale: cov.clone(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.scale.nrows() as f64;
        if !(self.alpha > 0.0) {
            return Err(Error::Parameter(format!(
                "refinement alpha must be positive, got {}",
                self.alpha
            )));
        }
        if !(self.nu > d - 1.0) {
            return Err(Error::Parameter(format!(
                "refinement nu must exceed d - 1, got {}",
                self.nu
            )));
        }
        crate::kernels::cholesky(&self.scale)
            .map_err(|e| Error::Parameter(format!("refinement scale is not SPD: {e}")))?;
        Ok(())
    }
}

/// Size, mean and second moment of a group with one item left out.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GroupSummary {
    pub size: u64,
    pub mean: Vector,
    pub second_moment: Matrix,
}

impl GroupSummary {
    fn from_sums(s: &SubStats) -> Self {
        if s.count == 0 {
            return GroupSummary {
                size: 0,
                mean: Vector::zeros(s.dim()),
                second_moment: Matrix::zeros(s.dim(), s.dim()),
            };
        }
        let n = s.count as f64;
        GroupSummary {
            size: s.count,
            mean: &s.sum / n,
            second_moment: &s.outer / n,
        }
    }
}

/// Running totals `(N, Σ n ȳ, Σ n S)` per group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupTotals {
    groups: Vec<SubStats>,
}

impl GroupTotals {
    pub fn new(groups: usize, dim: usize) -> Self {
        GroupTotals {
            groups: vec![SubStats::zeros(dim); groups],
        }
    }

    pub fn add(&mut self, h: usize, item: &ItemStats) {
        let g = &mut self.groups[h];
        let n = item.size as f64;
        g.count += item.size;
        g.sum += &item.mean * n;
        g.outer += &item.second_moment * n;
    }

    pub fn remove(&mut self, h: usize, item: &ItemStats) {
        let g = &mut self.groups[h];
        let n = item.size as f64;
        g.count -= item.size;
        if g.count == 0 {
            *g = SubStats::zeros(g.dim());
        } else {
            g.sum -= &item.mean * n;
            g.outer -= &item.second_moment * n;
        }
    }

    pub fn summary(&self, h: usize) -> GroupSummary {
        GroupSummary::from_sums(&self.groups[h])
    }

    pub fn summaries(&self) -> Vec<GroupSummary> {
        (0..self.groups.len()).map(|h| self.summary(h)).collect()
    }
}

/// log P(z_b = h | z_-b): the Dirichlet-multinomial prior ratio for moving
/// `item_size` rows into a group holding `group_size` other rows.
pub fn group_prior_logprob(
    item_size: u64,
    group_size: u64,
    total: u64,
    groups: usize,
    alpha: f64,
) -> f64 {
    let n = item_size as f64;
    let m = group_size as f64;
    let big = total as f64 + groups as f64 * alpha;
    ln_gamma(big - n) + ln_gamma(m + n + alpha) - ln_gamma(big) - ln_gamma(m + alpha)
}

/// Posterior predictive Student-t of one row given a group's statistics.
pub fn group_predictive(q: &GroupSummary, prior: &RefinementPrior) -> Result<StudentT> {
    let d = q.mean.len() as f64;
    let n = q.size as f64;
    let kappa = 1.0 + n;
    let nu = prior.nu + n;
    let m = &q.mean * (n / kappa);
    let s = symmetrize(&(&prior.scale + &q.second_moment * n - &m * m.transpose() * kappa));
    let df = nu - d + 1.0;
    let scale = s * ((kappa + 1.0) / (kappa * df));
    StudentT::new(&m, &scale, df)
        .map_err(|e| Error::Numerical(format!("group predictive with {} rows: {e}", q.size)))
}

/// Σ over the item's rows of the log predictive density under group `q`.
pub fn group_marginal_loglik<'a>(
    rows: impl IntoIterator<Item = &'a [f64]>,
    q: &GroupSummary,
    prior: &RefinementPrior,
) -> Result<f64> {
    let t = group_predictive(q, prior)?;
    let mut scratch = vec![0.0; q.mean.len()];
    Ok(rows
        .into_iter()
        .map(|y| t.log_pdf_with(y, &mut scratch))
        .sum())
}

/// Evaluates, next to the raw rows, an item's log likelihood under every group.
pub trait ItemLikelihood {
    fn item_loglik(&mut self, item: ItemKey, groups: &[GroupSummary]) -> Result<Vec<f64>>;
}

/// In-process evaluator over locally held shards.
pub struct LocalLikelihood<'a> {
    pub prior: &'a RefinementPrior,
    rows: HashMap<ItemKey, Vec<&'a [f64]>>,
}

impl<'a> LocalLikelihood<'a> {
    pub fn new(prior: &'a RefinementPrior, shards: &[(&'a Points, &'a [LocalItem])]) -> Self {
        let mut rows = HashMap::new();
        for (points, items) in shards {
            for it in items.iter() {
                rows.insert(
                    it.stats.key,
                    it.members.iter().map(|&i| points.row(i)).collect(),
                );
            }
        }
        LocalLikelihood { prior, rows }
    }
}

impl ItemLikelihood for LocalLikelihood<'_> {
    fn item_loglik(&mut self, item: ItemKey, groups: &[GroupSummary]) -> Result<Vec<f64>> {
        let rows = self
            .rows
            .get(&item)
            .ok_or_else(|| Error::Data(format!("unknown item {item:?}")))?;
        groups
            .iter()
            .map(|q| group_marginal_loglik(rows.iter().copied(), q, self.prior))
            .collect()
    }
}

/// Group allocation of every item for one refinement pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupState {
    pub reference: usize,
    /// Within-index of the reference item anchoring each group.
    pub anchors: Vec<usize>,
    /// Items in sweep order: reference items first, then by (worker, slot).
    pub order: Vec<ItemKey>,
    /// Group of each item in `order`.
    pub z: Vec<usize>,
}

impl GroupState {
    pub fn groups(&self) -> usize {
        self.anchors.len()
    }

    /// Refined slot label of each item: its group's anchor within-index.
    pub fn refined_labels(&self) -> HashMap<ItemKey, usize> {
        self.order
            .iter()
            .zip(&self.z)
            .map(|(k, &h)| (*k, self.anchors[h]))
            .collect()
    }
}

fn sweep_order(items: &[ItemStats], reference: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..items.len()).collect();
    idx.sort_by_key(|&i| (items[i].key.worker != reference, items[i].key));
    idx
}

/// Starts every item in the group of its nearest reference item (Euclidean
/// distance between means, ties to the smaller within-index).
pub fn init_groups(items: &[ItemStats], reference: usize) -> Result<GroupState> {
    let mut anchors: Vec<&ItemStats> = items
        .iter()
        .filter(|it| it.key.worker == reference)
        .collect();
    if anchors.is_empty() {
        return Err(Error::Data(format!(
            "reference worker {reference} has no items"
        )));
    }
    anchors.sort_by_key(|it| it.key.within_index);
    let order = sweep_order(items, reference);
    let z = order
        .iter()
        .map(|&i| {
            let mut best = (0, f64::INFINITY);
            for (h, a) in anchors.iter().enumerate() {
                let d = (&items[i].mean - &a.mean).norm_squared();
                if d < best.1 {
                    best = (h, d);
                }
            }
            best.0
        })
        .collect();
    Ok(GroupState {
        reference,
        anchors: anchors.iter().map(|a| a.key.within_index).collect(),
        order: order.iter().map(|&i| items[i].key).collect(),
        z,
    })
}

/// One collapsed Gibbs pass over all items in `state.order`. Each item's
/// conditional is computed from the current allocation of the others.
pub fn refine_sweep<R: Rng + ?Sized, E: ItemLikelihood + ?Sized>(
    items: &[ItemStats],
    state: &mut GroupState,
    prior: &RefinementPrior,
    likelihood: &mut E,
    rng: &mut R,
) -> Result<()> {
    let by_key: HashMap<ItemKey, &ItemStats> = items.iter().map(|it| (it.key, it)).collect();
    let dim = prior.scale.nrows();
    let groups = state.groups();
    let total: u64 = items.iter().map(|it| it.size).sum();
    let mut totals = GroupTotals::new(groups, dim);
    for (key, &h) in state.order.iter().zip(&state.z) {
        totals.add(h, by_key[key]);
    }
    let mut log_post = vec![0.0; groups];
    for pos in 0..state.order.len() {
        let key = state.order[pos];
        let item = by_key[&key];
        totals.remove(state.z[pos], item);
        let q = totals.summaries();
        let loglik = likelihood.item_loglik(key, &q)?;
        if loglik.len() != groups {
            return Err(Error::Data(format!(
                "item {key:?}: expected {groups} likelihood terms, got {}",
                loglik.len()
            )));
        }
        for h in 0..groups {
            log_post[h] =
                group_prior_logprob(item.size, q[h].size, total, groups, prior.alpha) + loglik[h];
        }
        let h = log_categorical_sample(&log_post, rng)
            .map_err(|e| Error::Numerical(format!("group of item {key:?}: {e}")))?;
        state.z[pos] = h;
        totals.add(h, item);
    }
    Ok(())
}

/// Rewrites a shard's labels from refined slot labels: cluster = slot / L,
/// subcomponent = slot mod L.
pub fn apply_labels(
    items: &[LocalItem],
    refined: &HashMap<ItemKey, usize>,
    rows: usize,
    subcomponents: usize,
) -> Result<AllocationState> {
    let mut cluster = vec![usize::MAX; rows];
    let mut sub = vec![usize::MAX; rows];
    for it in items {
        let slot = *refined
            .get(&it.stats.key)
            .ok_or_else(|| Error::Data(format!("no refined label for item {:?}", it.stats.key)))?;
        for &i in &it.members {
            cluster[i] = slot / subcomponents;
            sub[i] = slot % subcomponents;
        }
    }
    if cluster.contains(&usize::MAX) {
        return Err(Error::Data("refined labels do not cover every row".into()));
    }
    AllocationState::new(cluster, sub)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::stream_rng;

    fn item(worker: usize, j: usize, size: u64, mean: f64, second: f64) -> ItemStats {
        ItemStats {
            key: ItemKey {
                worker,
                within_index: j,
            },
            size,
            mean: Vector::from_vec(vec![mean]),
            second_moment: Matrix::from_element(1, 1, second),
        }
    }

    #[test]
    fn prior_term_values() {
        let v = group_prior_logprob(1, 1, 2, 2, 1.0);
        assert!((v - (2.0f64 / 3.0).ln()).abs() < 1e-14);
        assert!(group_prior_logprob(0, 5, 10, 3, 1.0).abs() < 1e-14);
        assert!(group_prior_logprob(3, 10, 40, 3, 1.0) > group_prior_logprob(3, 9, 40, 3, 1.0));
    }

    #[test]
    fn slot_index_and_moments() {
        let pts = Points::from_rows(&[vec![1.0], vec![3.0], vec![5.0]]).unwrap();
        let alloc = AllocationState::new(vec![1, 1, 0], vec![1, 1, 0]).unwrap();
        let items = extract_items(0, &pts, &alloc, 3);
        assert_eq!(items.len(), 2);
        assert_eq!(items[1].stats.key.within_index, 4);
        assert_eq!(items[1].stats.mean[0], 2.0);
        assert_eq!(items[1].stats.second_moment[(0, 0)], 5.0);
        let total: u64 = items.iter().map(|i| i.stats.size).sum();
        assert_eq!(total, 3);
    }

    #[test]
    fn nearest_reference_initialization_and_ties() {
        let items = vec![
            item(0, 0, 5, 0.0, 1.0),
            item(0, 2, 5, 10.0, 101.0),
            item(1, 1, 5, 5.0, 26.0),
            item(1, 3, 5, 9.0, 82.0),
        ];
        let st = init_groups(&items, 0).unwrap();
        assert_eq!(st.anchors, vec![0, 2]);
        assert_eq!(st.z, vec![0, 1, 0, 1]);
        assert!(init_groups(&items, 2).is_err());
    }

    #[test]
    fn remove_then_add_restores_totals() {
        let a = item(0, 0, 7, 1.5, 3.0);
        let b = item(1, 0, 3, -2.0, 5.0);
        let mut t = GroupTotals::new(1, 1);
        t.add(0, &a);
        t.add(0, &b);
        let before = t.summary(0);
        t.remove(0, &b);
        t.add(0, &b);
        let after = t.summary(0);
        assert_eq!(before.size, after.size);
        assert!((before.mean[0] - after.mean[0]).abs() <= 1e-10 * before.mean[0].abs());
        assert!(
            (before.second_moment[(0, 0)] - after.second_moment[(0, 0)]).abs()
                <= 1e-10 * before.second_moment[(0, 0)]
        );
    }

    #[test]
    fn relabeling_splits_slot_into_cluster_and_subcomponent() {
        let pts = Points::from_rows(&[vec![0.0], vec![1.0]]).unwrap();
        let alloc = AllocationState::new(vec![0, 3], vec![0, 2]).unwrap();
        let items = extract_items(2, &pts, &alloc, 3);
        let mut refined = HashMap::new();
        refined.insert(items[0].stats.key, 4);
        refined.insert(items[1].stats.key, 0);
        let out = apply_labels(&items, &refined, 2, 3).unwrap();
        assert_eq!(out.cluster, vec![1, 0]);
        assert_eq!(out.sub, vec![1, 0]);
    }

    #[test]
    fn single_worker_separated_items_keep_their_groups() {
        let rows: Vec<Vec<f64>> = (0..600)
            .map(|i| vec![(i / 200) as f64 * 50.0 + (i % 200) as f64 * 0.01])
            .collect();
        let pts = Points::from_rows(&rows).unwrap();
        let alloc =
            AllocationState::new((0..600).map(|i| i / 200).collect(), vec![0; 600]).unwrap();
        let local = extract_items(0, &pts, &alloc, 1);
        let stats: Vec<ItemStats> = local.iter().map(|l| l.stats.clone()).collect();
        let mut prior = RefinementPrior::from_data_cov(&pts.covariance());
        prior.alpha = 1e-6;
        let mut st = init_groups(&stats, 0).unwrap();
        let mut lik = LocalLikelihood::new(&prior, &[(&pts, &local)]);
        refine_sweep(&stats, &mut st, &prior, &mut lik, &mut stream_rng(1, 0)).unwrap();
        assert_eq!(st.z, vec![0, 1, 2]);
        let out = apply_labels(&local, &st.refined_labels(), 600, 1).unwrap();
        assert_eq!(out, alloc);
    }
}
