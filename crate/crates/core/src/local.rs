//! Per-worker blocked Gibbs sampler with data augmentation.
//!
//! One sweep updates, in order: cluster weights, cluster labels, subcomponent
//! labels, then per cluster the subcomponent weights, precisions and means
//! followed by the coordinate scalings, rate matrix and center.

use log::{error, warn};
use rand::Rng;

use crate::conditionals::{sample_weights, update_cluster, LambdaSource, StatsTable};
use crate::error::{Error, Result};
use crate::kernels::{
    log_categorical_sample, log_sum_exp, spd_inverse, stream_rng, ChainRng, Gaussian, Matrix,
    Simplex, Vector,
};
use crate::kmeans::{kmeans, nearest, KMeans};
use crate::model::{AllocationState, ClusterParams, Hyperparams, ModelParams, Points, Shard};

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LocalChainConfig {
    pub clusters: usize,
    pub subcomponents: usize,
    pub n_iters: usize,
    pub burn_in: usize,
    /// Number of post-burn-in allocation samples kept, evenly spaced.
    pub recorded: usize,
    pub seed: u64,
}

impl Default for LocalChainConfig {
    fn default() -> Self {
        LocalChainConfig {
            clusters: 10,
            subcomponents: 3,
            n_iters: 1000,
            burn_in: 500,
            recorded: 100,
            seed: 0,
        }
    }
}

impl LocalChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.clusters == 0 || self.subcomponents == 0 {
            return Err(Error::Config("K and L must be at least 1".into()));
        }
        if self.burn_in >= self.n_iters {
            return Err(Error::Config(format!(
                "burn-in ({}) must be below the iteration count ({})",
                self.burn_in, self.n_iters
            )));
        }
        if self.recorded == 0 || self.recorded > self.n_iters - self.burn_in {
            return Err(Error::Config(format!(
                "cannot record {} samples from {} post-burn-in iterations",
                self.recorded,
                self.n_iters - self.burn_in
            )));
        }
        Ok(())
    }

    /// One-based iteration numbers at which allocations are stored.
    pub fn recorded_iterations(&self) -> Vec<usize> {
        let span = self.n_iters - self.burn_in;
        (0..self.recorded)
            .map(|i| self.burn_in + (i + 1) * span / self.recorded)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationSample {
    pub iteration: usize,
    pub alloc: AllocationState,
}

#[derive(Debug, Clone)]
pub struct LocalTrace {
    pub samples: Vec<AllocationSample>,
    pub last_params: ModelParams,
    pub last_alloc: AllocationState,
}

/// Builds a starting state. Points are split into `K * L` k-means cells;
/// cells joined by a ridge of the cell-level Gaussian mixture density (no dip
/// below half the smaller endpoint density on the segment between centers)
/// start in the same cluster. Each point's subcomponent is its nearest of up
/// to `L` seeds of its cluster. One parameter update follows.
pub fn initialize<R: Rng + ?Sized>(
    points: &Points,
    hp: &Hyperparams,
    clusters: usize,
    subcomponents: usize,
    rng: &mut R,
) -> Result<(ModelParams, AllocationState)> {
    let n = points.len();
    if n < clusters {
        warn!("shard has {n} points for {clusters} clusters");
    }
    let fine = kmeans(points, clusters * subcomponents, 25, rng);
    let cell_cluster = group_cells(points, &fine, clusters)?;

    let mut seeds = Vec::with_capacity(clusters);
    for k in 0..clusters {
        let cells: Vec<usize> = (0..fine.centers.len())
            .filter(|&j| cell_cluster[j] == k)
            .collect();
        let centers = fine.centers.select(&cells);
        seeds.push(if centers.len() <= subcomponents {
            centers
        } else {
            kmeans(&centers, subcomponents, 50, rng).centers
        });
    }
    let mut cluster = Vec::with_capacity(n);
    let mut sub = Vec::with_capacity(n);
    for (row, &f) in points.rows().zip(&fine.labels) {
        let k = cell_cluster[f];
        cluster.push(k);
        sub.push(nearest(row, &seeds[k]));
    }
    let alloc = AllocationState::new(cluster, sub)?;
    let stats = allocation_stats(points, &alloc, clusters, subcomponents);
    let mut params = params_from_stats(&stats, hp)?;
    for k in 0..clusters {
        update_cluster(
            &mut params.clusters[k],
            stats.cluster(k),
            hp,
            LambdaSource::Current,
            rng,
        )
        .map_err(|e| Error::Numerical(format!("initializing cluster {k}: {e}")))?;
    }
    Ok((params, alloc))
}

/// Moment-based parameters consistent with a statistics table. Empty cells
/// fall back to prior means.
pub fn params_from_stats(stats: &StatsTable, hp: &Hyperparams) -> Result<ModelParams> {
    let d = hp.dim();
    let clusters = stats.clusters();
    let subcomponents = stats.subcomponents;
    let rate = spd_inverse(&hp.rate_prior)? * hp.rate_df;
    let prior_sigma = prior_mean_covariance(hp)?;
    let counts: Vec<u64> = (0..clusters).map(|k| stats.cluster_count(k)).collect();
    let total = counts.iter().sum::<u64>().max(1) as f64;
    let eta = Simplex::new(
        counts
            .iter()
            .map(|&c| (c as f64 + 1.0) / (total + clusters as f64))
            .collect(),
    )?;
    let mut out = Vec::with_capacity(clusters);
    for k in 0..clusters {
        let cells = stats.cluster(k);
        let center = cluster_mean(cells).unwrap_or_else(|| hp.center_mean.clone());
        let mut mu = Vec::with_capacity(subcomponents);
        let mut sigma = Vec::with_capacity(subcomponents);
        let mut precision = Vec::with_capacity(subcomponents);
        for s in cells {
            let m = s.mean().unwrap_or_else(|| center.clone());
            let cov = if s.count as usize > d + 1 {
                let n = s.count as f64;
                (s.scatter_about(&m) + &prior_sigma) / n
            } else {
                prior_sigma.clone()
            };
            precision.push(spd_inverse(&cov)?);
            sigma.push(cov);
            mu.push(m);
        }
        out.push(ClusterParams {
            omega: Simplex::uniform(subcomponents),
            mu,
            sigma,
            precision,
            center,
            rate: rate.clone(),
            lambda: vec![1.0; d],
        });
    }
    Ok(ModelParams { eta, clusters: out })
}

const RIDGE_RATIO: f64 = 0.5;
const RIDGE_STEPS: usize = 20;

/// Cluster index of every k-means cell, at most `clusters` distinct values.
fn group_cells(points: &Points, fine: &KMeans, clusters: usize) -> Result<Vec<usize>> {
    let m = fine.centers.len();
    let dim = points.dim();
    let ridge = {
        let cov = points.covariance();
        (0..dim).map(|i| cov[(i, i)]).sum::<f64>() / dim as f64 * 1e-6
    };
    let mut cells = vec![crate::conditionals::SubStats::zeros(dim); m];
    for (row, &f) in points.rows().zip(&fine.labels) {
        cells[f].add(row);
    }
    let pooled = points.covariance();
    let mut dens = Vec::with_capacity(m);
    let mut log_w = Vec::with_capacity(m);
    for (j, c) in cells.iter().enumerate() {
        let mean = Vector::from_row_slice(fine.centers.row(j));
        let cov = if c.count as usize > dim {
            c.scatter_about(&mean) / (c.count - 1) as f64
        } else {
            pooled.clone() / m as f64
        } + Matrix::identity(dim, dim) * ridge;
        dens.push(Gaussian::new(&mean, &cov)?);
        log_w.push((c.count.max(1) as f64).ln());
    }
    let mut scratch = vec![0.0; dim];
    let mut terms = vec![0.0; m];
    let mut log_density = |x: &[f64]| {
        for j in 0..m {
            terms[j] = log_w[j] + dens[j].log_pdf_with(x, &mut scratch);
        }
        log_sum_exp(&terms)
    };
    // ratio[a][b]: lowest density on the segment relative to the lower end
    let mut ratio = vec![vec![0.0; m]; m];
    let mut x = vec![0.0; dim];
    for a in 0..m {
        for b in a + 1..m {
            let (ca, cb) = (fine.centers.row(a), fine.centers.row(b));
            let mut lowest = f64::INFINITY;
            let mut ends = [0.0; 2];
            for step in 0..=RIDGE_STEPS {
                let t = step as f64 / RIDGE_STEPS as f64;
                for i in 0..dim {
                    x[i] = ca[i] + t * (cb[i] - ca[i]);
                }
                let ld = log_density(&x);
                lowest = lowest.min(ld);
                if step == 0 {
                    ends[0] = ld;
                } else if step == RIDGE_STEPS {
                    ends[1] = ld;
                }
            }
            let r = (lowest - ends[0].min(ends[1])).exp();
            ratio[a][b] = r;
            ratio[b][a] = r;
        }
    }

    let mut group: Vec<usize> = (0..m).collect();
    let find = |group: &Vec<usize>, mut i: usize| {
        while group[i] != i {
            i = group[i];
        }
        i
    };
    let mut pairs: Vec<(usize, usize)> = (0..m)
        .flat_map(|a| (a + 1..m).map(move |b| (a, b)))
        .collect();
    pairs.sort_by(|p, q| ratio[q.0][q.1].total_cmp(&ratio[p.0][p.1]));
    let mut groups = m;
    for (a, b) in pairs {
        let (ra, rb) = (find(&group, a), find(&group, b));
        if ra == rb {
            continue;
        }
        if ratio[a][b] < RIDGE_RATIO && groups <= clusters {
            break;
        }
        group[ra.max(rb)] = ra.min(rb);
        groups -= 1;
    }
    let mut roots: Vec<usize> = (0..m).map(|j| find(&group, j)).collect();
    let mut ids = roots.clone();
    ids.sort_unstable();
    ids.dedup();
    for r in roots.iter_mut() {
        *r = ids.binary_search(r).unwrap();
    }
    Ok(roots)
}

fn cluster_mean(cells: &[crate::conditionals::SubStats]) -> Option<Vector> {
    let n: u64 = cells.iter().map(|s| s.count).sum();
    (n > 0).then(|| {
        let mut total = Vector::zeros(cells[0].dim());
        for s in cells {
            total += &s.sum;
        }
        total / n as f64
    })
}

pub fn allocation_stats(
    points: &Points,
    alloc: &AllocationState,
    clusters: usize,
    subcomponents: usize,
) -> StatsTable {
    let mut table = StatsTable::zeros(clusters, subcomponents, points.dim());
    for (i, row) in points.rows().enumerate() {
        table.cell_mut(alloc.cluster[i], alloc.sub[i]).add(row);
    }
    table
}

/// One full sweep, updating `params` and `alloc` in place.
pub fn gibbs_sweep<R: Rng + ?Sized>(
    points: &Points,
    params: &mut ModelParams,
    alloc: &mut AllocationState,
    hp: &Hyperparams,
    rng: &mut R,
) -> Result<()> {
    let clusters = params.num_clusters();
    let subs = params.subcomponents();
    let dim = points.dim();

    let mut counts = vec![0u64; clusters];
    for &k in &alloc.cluster {
        counts[k] += 1;
    }
    params.eta = sample_weights(&counts, hp.cluster_concentration, rng)?;

    let dens = params.component_densities()?;
    let mut log_weight = Vec::with_capacity(clusters * subs);
    for (k, c) in params.clusters.iter().enumerate() {
        let le = params.eta.weights()[k].ln();
        for w in c.omega.weights() {
            log_weight.push((le, w.ln()));
        }
    }
    let mut scratch = vec![0.0; dim];
    let mut joint = vec![0.0; clusters * subs];
    let mut cluster_lp = vec![0.0; clusters];
    for (i, row) in points.rows().enumerate() {
        for k in 0..clusters {
            let cell = &mut joint[k * subs..(k + 1) * subs];
            for (l, v) in cell.iter_mut().enumerate() {
                *v = log_weight[k * subs + l].1 + dens[k][l].log_pdf_with(row, &mut scratch);
            }
            cluster_lp[k] = log_weight[k * subs].0 + log_sum_exp(cell);
        }
        let k = log_categorical_sample(&cluster_lp, rng)
            .map_err(|e| Error::Numerical(format!("cluster label of row {i}: {e}")))?;
        let l = log_categorical_sample(&joint[k * subs..(k + 1) * subs], rng)
            .map_err(|e| Error::Numerical(format!("subcomponent label of row {i}: {e}")))?;
        alloc.cluster[i] = k;
        alloc.sub[i] = l;
    }

    let stats = allocation_stats(points, alloc, clusters, subs);
    for k in 0..clusters {
        update_cluster(
            &mut params.clusters[k],
            stats.cluster(k),
            hp,
            LambdaSource::Current,
            rng,
        )
        .map_err(|e| Error::Numerical(format!("cluster {k}: {e}")))?;
    }
    Ok(())
}

pub fn run_local_chain(
    shard: &Shard,
    hp: &Hyperparams,
    cfg: &LocalChainConfig,
) -> Result<LocalTrace> {
    let mut rng = stream_rng(cfg.seed, shard.worker_id as u64 + 1);
    run_local_chain_with(&shard.points, hp, cfg, &mut rng)
}

pub fn run_local_chain_with(
    points: &Points,
    hp: &Hyperparams,
    cfg: &LocalChainConfig,
    rng: &mut ChainRng,
) -> Result<LocalTrace> {
    cfg.validate()?;
    let (mut params, mut alloc) = initialize(points, hp, cfg.clusters, cfg.subcomponents, rng)?;
    let tags = cfg.recorded_iterations();
    let mut next = 0;
    let mut samples = Vec::with_capacity(tags.len());
    for it in 1..=cfg.n_iters {
        if let Err(e) = gibbs_sweep(points, &mut params, &mut alloc, hp, rng) {
            let occupied = alloc_sizes(&alloc, cfg.clusters);
            error!("chain stopped at iteration {it}; last good cluster sizes {occupied:?}");
            return Err(Error::Numerical(format!("iteration {it}: {e}")));
        }
        if next < tags.len() && tags[next] == it {
            samples.push(AllocationSample {
                iteration: it,
                alloc: alloc.clone(),
            });
            next += 1;
        }
    }
    Ok(LocalTrace {
        samples,
        last_params: params,
        last_alloc: alloc,
    })
}

fn alloc_sizes(alloc: &AllocationState, clusters: usize) -> Vec<usize> {
    let mut sizes = vec![0; clusters];
    for &k in &alloc.cluster {
        sizes[k] += 1;
    }
    sizes
}

/// Covariance used for subcomponents that start empty.
pub fn prior_mean_covariance(hp: &Hyperparams) -> Result<Matrix> {
    let d = hp.dim() as f64;
    Ok(spd_inverse(&hp.rate_prior)? * hp.rate_df / (hp.precision_df - d - 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::elicit_from_points;

    #[test]
    fn recorded_iterations_are_even_and_post_burn_in() {
        let cfg = LocalChainConfig::default();
        let tags = cfg.recorded_iterations();
        assert_eq!(tags.len(), 100);
        assert_eq!(tags[0], 505);
        assert_eq!(*tags.last().unwrap(), 1000);
        assert!(tags.windows(2).all(|w| w[1] - w[0] == 5));

        let one = LocalChainConfig {
            n_iters: 11,
            burn_in: 10,
            recorded: 1,
            ..cfg.clone()
        };
        assert_eq!(one.recorded_iterations(), vec![11]);
        assert!(LocalChainConfig { recorded: 2, ..one }.validate().is_err());
        assert!(LocalChainConfig {
            burn_in: 1000,
            ..cfg
        }
        .validate()
        .is_err());
    }

    #[test]
    fn sweep_is_deterministic() {
        let rows: Vec<Vec<f64>> = (0..40)
            .map(|i| {
                vec![
                    (i % 2) as f64 * 8.0 + (i as f64 * 0.37).sin(),
                    (i as f64 * 0.91).cos(),
                ]
            })
            .collect();
        let pts = Points::from_rows(&rows).unwrap();
        let hp = elicit_from_points(&pts, 0.5, 0.1, 3, 2).unwrap();
        let run = || {
            let mut rng = stream_rng(5, 1);
            let (mut p, mut a) = initialize(&pts, &hp, 3, 2, &mut rng).unwrap();
            gibbs_sweep(&pts, &mut p, &mut a, &hp, &mut rng).unwrap();
            gibbs_sweep(&pts, &mut p, &mut a, &hp, &mut rng).unwrap();
            (p, a)
        };
        assert_eq!(run(), run());
    }
}
