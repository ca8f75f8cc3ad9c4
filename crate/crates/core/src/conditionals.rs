//! Full conditional distributions of the mixture-of-mixtures parameters given
//! subcomponent sufficient statistics. Shared by the per-worker sampler and
//! the master-side parameter chain.
//!
//! Each conditional is exposed twice: a `*_posterior` function returning the
//! distribution's parameters, and a sampler built on top of it.

use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    sample_dirichlet, sample_gig, sample_mvn, sample_mvn_canonical, sample_wishart_rate,
    spd_inverse, symmetrize, Matrix, Simplex, Vector,
};
use crate::model::{ClusterParams, Hyperparams};

/// Count, sum and sum of outer products of the rows in one subcomponent.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SubStats {
    pub count: u64,
    pub sum: Vector,
    pub outer: Matrix,
}

impl SubStats {
    pub fn zeros(dim: usize) -> Self {
        SubStats {
            count: 0,
            sum: Vector::zeros(dim),
            outer: Matrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.sum.len()
    }

    pub fn add(&mut self, y: &[f64]) {
        let d = self.dim();
        self.count += 1;
        for i in 0..d {
            self.sum[i] += y[i];
            for j in 0..d {
                self.outer[(i, j)] += y[i] * y[j];
            }
        }
    }

    pub fn merge(&mut self, other: &SubStats) {
        self.count += other.count;
        self.sum += &other.sum;
        self.outer += &other.outer;
    }

    pub fn mean(&self) -> Option<Vector> {
        (self.count > 0).then(|| &self.sum / self.count as f64)
    }

    /// Σ (y - μ)(y - μ)ᵀ expanded in terms of the stored moments.
    pub fn scatter_about(&self, mu: &Vector) -> Matrix {
        let cross = &self.sum * mu.transpose();
        symmetrize(
            &(&self.outer - &cross - cross.transpose() + mu * mu.transpose() * self.count as f64),
        )
    }
}

/// Sufficient statistics for every (cluster, subcomponent) pair.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct StatsTable {
    pub subcomponents: usize,
    pub cells: Vec<SubStats>,
}

impl StatsTable {
    pub fn zeros(clusters: usize, subcomponents: usize, dim: usize) -> Self {
        StatsTable {
            subcomponents,
            cells: vec![SubStats::zeros(dim); clusters * subcomponents],
        }
    }

    pub fn clusters(&self) -> usize {
        self.cells.len() / self.subcomponents.max(1)
    }

    pub fn cell(&self, k: usize, l: usize) -> &SubStats {
        &self.cells[k * self.subcomponents + l]
    }

    pub fn cell_mut(&mut self, k: usize, l: usize) -> &mut SubStats {
        &mut self.cells[k * self.subcomponents + l]
    }

    pub fn cluster(&self, k: usize) -> &[SubStats] {
        &self.cells[k * self.subcomponents..(k + 1) * self.subcomponents]
    }

    pub fn cluster_count(&self, k: usize) -> u64 {
        self.cluster(k).iter().map(|s| s.count).sum()
    }

    pub fn total(&self) -> u64 {
        self.cells.iter().map(|s| s.count).sum()
    }

    pub fn merge(&mut self, other: &StatsTable) -> Result<()> {
        if other.cells.len() != self.cells.len() || other.subcomponents != self.subcomponents {
            return Err(Error::Data("statistics tables differ in shape".into()));
        }
        for (a, b) in self.cells.iter_mut().zip(&other.cells) {
            a.merge(b);
        }
        Ok(())
    }
}

/// Dirichlet parameters `concentration + count` for a weight vector.
pub fn weights_posterior(counts: &[u64], concentration: f64) -> Vec<f64> {
    counts.iter().map(|&n| concentration + n as f64).collect()
}

pub fn sample_weights<R: Rng + ?Sized>(
    counts: &[u64],
    concentration: f64,
    rng: &mut R,
) -> Result<Simplex> {
    sample_dirichlet(&weights_posterior(counts, concentration), rng)
}

/// Wishart (df, rate) of a subcomponent precision given its mean.
pub fn precision_posterior(
    stats: &SubStats,
    mu: &Vector,
    rate: &Matrix,
    hp: &Hyperparams,
) -> (f64, Matrix) {
    (
        hp.precision_df + stats.count as f64,
        symmetrize(&(rate + stats.scatter_about(mu))),
    )
}

/// Canonical (precision, linear term) of a subcomponent mean given its precision.
pub fn mean_posterior_canonical(
    stats: &SubStats,
    precision: &Matrix,
    spread_inv: &Matrix,
    center: &Vector,
) -> (Matrix, Vector) {
    let post_precision = symmetrize(&(spread_inv + precision * stats.count as f64));
    let linear = spread_inv * center + precision * &stats.sum;
    (post_precision, linear)
}

/// Moment form (mean, covariance) of the same conditional.
pub fn mean_posterior(
    stats: &SubStats,
    precision: &Matrix,
    spread_inv: &Matrix,
    center: &Vector,
) -> Result<(Vector, Matrix)> {
    let (p, h) = mean_posterior_canonical(stats, precision, spread_inv, center);
    let cov = spd_inverse(&p)?;
    Ok((&cov * h, cov))
}

/// GIG (p, a, b) for each coordinate scaling of cluster `k`.
pub fn lambda_posterior(mu: &[Vector], center: &Vector, hp: &Hyperparams) -> Vec<(f64, f64, f64)> {
    let p = hp.lambda_shape - mu.len() as f64 / 2.0;
    let a = 2.0 * hp.lambda_shape;
    (0..center.len())
        .map(|j| {
            let ss: f64 = mu.iter().map(|m| (m[j] - center[j]).powi(2)).sum();
            (p, a, ss / hp.mean_spread[(j, j)])
        })
        .collect()
}

/// Wishart (df, rate) of a cluster rate matrix given its subcomponent precisions.
pub fn rate_posterior(precisions: &[Matrix], hp: &Hyperparams) -> (f64, Matrix) {
    let mut rate = hp.rate_prior.clone();
    for p in precisions {
        rate += p;
    }
    (
        hp.rate_df + precisions.len() as f64 * hp.precision_df,
        symmetrize(&rate),
    )
}

/// Moment form (mean, covariance) of a cluster center given its subcomponent means.
pub fn center_posterior(
    mu: &[Vector],
    spread_inv: &Matrix,
    hp: &Hyperparams,
) -> Result<(Vector, Matrix)> {
    let prior_inv = spd_inverse(&hp.center_cov)?;
    let cov = spd_inverse(&(&prior_inv + spread_inv * mu.len() as f64))?;
    let mut total = Vector::zeros(hp.dim());
    for m in mu {
        total += m;
    }
    let mean = &cov * (&prior_inv * &hp.center_mean + spread_inv * total);
    Ok((mean, cov))
}

/// Which subcomponent means drive the coordinate-scaling update.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LambdaSource {
    /// Means drawn earlier in the same sweep.
    Current,
    /// Means and center as they were when the sweep started.
    Previous,
}

/// Updates the subcomponent weights, precisions and means of one cluster,
/// then its random hyperparameters, in that order.
pub fn update_cluster<R: Rng + ?Sized>(
    cluster: &mut ClusterParams,
    stats: &[SubStats],
    hp: &Hyperparams,
    lambda_source: LambdaSource,
    rng: &mut R,
) -> Result<()> {
    let previous = match lambda_source {
        LambdaSource::Previous => Some((cluster.mu.clone(), cluster.center.clone())),
        LambdaSource::Current => None,
    };

    let counts: Vec<u64> = stats.iter().map(|s| s.count).collect();
    cluster.omega = sample_weights(&counts, hp.subcomponent_concentration, rng)?;

    let spread_inv = spd_inverse(&cluster.scaled_spread(&hp.mean_spread))?;
    for (l, s) in stats.iter().enumerate() {
        let (df, rate) = precision_posterior(s, &cluster.mu[l], &cluster.rate, hp);
        let precision = sample_wishart_rate(df, &rate, rng)
            .map_err(|e| Error::Numerical(format!("precision of subcomponent {l}: {e}")))?;
        let (post_p, linear) =
            mean_posterior_canonical(s, &precision, &spread_inv, &cluster.center);
        cluster.mu[l] = sample_mvn_canonical(&post_p, &linear, rng)
            .map_err(|e| Error::Numerical(format!("mean of subcomponent {l}: {e}")))?;
        cluster.sigma[l] = spd_inverse(&precision)
            .map_err(|e| Error::Numerical(format!("covariance of subcomponent {l}: {e}")))?;
        cluster.precision[l] = precision;
    }

    let gig = match &previous {
        Some((mu, center)) => lambda_posterior(mu, center, hp),
        None => lambda_posterior(&cluster.mu, &cluster.center, hp),
    };
    for (j, (p, a, b)) in gig.into_iter().enumerate() {
        cluster.lambda[j] = sample_gig(p, a, b, rng)?;
    }

    let (df, rate) = rate_posterior(&cluster.precision, hp);
    cluster.rate = sample_wishart_rate(df, &rate, rng)
        .map_err(|e| Error::Numerical(format!("cluster rate matrix: {e}")))?;

    let spread_inv = spd_inverse(&cluster.scaled_spread(&hp.mean_spread))?;
    let (mean, cov) = center_posterior(&cluster.mu, &spread_inv, hp)?;
    cluster.center = sample_mvn(&mean, &cov, rng)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn scatter_matches_direct_sum() {
        let rows = [[1.0, 2.0], [0.5, -1.0], [3.0, 0.0]];
        let mut s = SubStats::zeros(2);
        for r in &rows {
            s.add(r);
        }
        let mu = Vector::from_vec(vec![0.7, 0.2]);
        let mut direct = Matrix::zeros(2, 2);
        for r in &rows {
            let v = Vector::from_row_slice(r) - &mu;
            direct += &v * v.transpose();
        }
        assert!((s.scatter_about(&mu) - direct).abs().max() < 1e-12);
    }

    #[test]
    fn empty_stats_give_prior_parameters() {
        let s = SubStats::zeros(2);
        let spread_inv = Matrix::identity(2, 2) * 4.0;
        let center = Vector::from_vec(vec![1.0, -1.0]);
        let (mean, cov) =
            mean_posterior(&s, &Matrix::identity(2, 2), &spread_inv, &center).unwrap();
        assert!((mean - center).abs().max() < 1e-14);
        assert!((cov - Matrix::identity(2, 2) * 0.25).abs().max() < 1e-14);
    }

    #[test]
    fn table_merge_adds_counts() {
        let mut a = StatsTable::zeros(2, 2, 1);
        let mut b = StatsTable::zeros(2, 2, 1);
        a.cell_mut(1, 0).add(&[2.0]);
        b.cell_mut(1, 0).add(&[3.0]);
        b.cell_mut(0, 1).add(&[1.0]);
        a.merge(&b).unwrap();
        assert_eq!(a.cell(1, 0).count, 2);
        assert_eq!(a.cell(1, 0).sum[0], 5.0);
        assert_eq!(a.cluster_count(0), 1);
        assert_eq!(a.total(), 3);
        assert!(a.merge(&StatsTable::zeros(3, 2, 1)).is_err());
    }
}
