//! Mixture-of-Gaussian-mixtures model types, fixed hyperparameters and the
//! variance-decomposition prior elicitation.
//!
//! Wishart distributions on precision-like quantities are written with an
//! inverse scale ("rate") matrix: `W(df, R)` has mean `df * R⁻¹`. With that
//! reading the conjugate updates are simply `R + scatter`.

use log::warn;
use nalgebra::DMatrix;
use rand::Rng;

use crate::error::{Error, Result};
use crate::kernels::{
    cholesky, log_sum_exp, sample_dirichlet, sample_gamma, sample_mvn, sample_wishart_rate,
    spd_inverse, Gaussian, Matrix, Simplex, Vector,
};

/// Row-major table of points sharing one dimension.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Points {
    dim: usize,
    values: Vec<f64>,
}

impl Points {
    pub fn new(dim: usize, values: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Data("points need dimension >= 1".into()));
        }
        if values.len() % dim != 0 {
            return Err(Error::Data(format!(
                "{} values do not form rows of dimension {dim}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::Data(format!(
                "non-finite value in row {} column {}",
                i / dim,
                i % dim
            )));
        }
        Ok(Points { dim, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let dim = rows.first().map(Vec::len).unwrap_or(0);
        if let Some(bad) = rows.iter().position(|r| r.len() != dim) {
            return Err(Error::Data(format!(
                "row {bad} has {} columns, expected {dim}",
                rows[bad].len()
            )));
        }
        Points::new(dim.max(1), rows.concat())
    }

    pub fn empty(dim: usize) -> Self {
        Points {
            dim,
            values: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.dim..(i + 1) * self.dim]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f64]> + '_ {
        self.values.chunks_exact(self.dim)
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn push(&mut self, row: &[f64]) {
        debug_assert_eq!(row.len(), self.dim);
        self.values.extend_from_slice(row);
    }

    pub fn select(&self, indices: &[usize]) -> Points {
        let mut out = Points::empty(self.dim);
        out.values.reserve(indices.len() * self.dim);
        for &i in indices {
            out.push(self.row(i));
        }
        out
    }

    pub fn mean(&self) -> Vector {
        let mut m = Vector::zeros(self.dim);
        for row in self.rows() {
            for (a, b) in m.iter_mut().zip(row) {
                *a += b;
            }
        }
        m / self.len().max(1) as f64
    }

    /// Sample covariance with divisor n - 1.
    pub fn covariance(&self) -> Matrix {
        let m = self.mean();
        let mut c = Matrix::zeros(self.dim, self.dim);
        for row in self.rows() {
            let v = Vector::from_iterator(self.dim, row.iter().zip(m.iter()).map(|(a, b)| a - b));
            c += &v * v.transpose();
        }
        c / (self.len().max(2) - 1) as f64
    }
}

/// Fixed prior constants of the mixture of mixtures.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Hyperparams {
    /// Symmetric Dirichlet concentration on cluster weights.
    pub cluster_concentration: f64,
    /// Symmetric Dirichlet concentration on subcomponent weights.
    pub subcomponent_concentration: f64,
    /// Degrees of freedom of the Wishart prior on subcomponent precisions.
    pub precision_df: f64,
    /// Degrees of freedom of the Wishart prior on the cluster rate matrices.
    pub rate_df: f64,
    /// Rate matrix of the Wishart prior on the cluster rate matrices.
    pub rate_prior: Matrix,
    /// Spread of subcomponent means around their cluster center.
    pub mean_spread: Matrix,
    /// Prior mean of cluster centers.
    pub center_mean: Vector,
    /// Prior covariance of cluster centers.
    pub center_cov: Matrix,
    /// Shape and rate of the Gamma prior on the per-coordinate scalings.
    pub lambda_shape: f64,
}

impl Hyperparams {
    pub fn dim(&self) -> usize {
        self.center_mean.len()
    }

    /// Dimension of one cluster's parameter block for `L` subcomponents.
    pub fn cluster_param_dim(&self, subcomponents: usize) -> usize {
        let d = self.dim();
        subcomponents * (d + d * (d + 1) / 2) + subcomponents.saturating_sub(1)
    }

    /// Checks hard invariants. The overfitting condition on the cluster
    /// concentration only produces a warning.
    pub fn validate(&self, subcomponents: usize) -> Result<()> {
        let d = self.dim();
        for (name, v) in [
            ("cluster_concentration", self.cluster_concentration),
            (
                "subcomponent_concentration",
                self.subcomponent_concentration,
            ),
            ("lambda_shape", self.lambda_shape),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::Parameter(format!(
                    "{name} must be positive, got {v}"
                )));
            }
        }
        for (name, v) in [
            ("precision_df", self.precision_df),
            ("rate_df", self.rate_df),
        ] {
            if !(v > d as f64 - 1.0) {
                return Err(Error::Parameter(format!(
                    "{name} must exceed d - 1 = {}, got {v}",
                    d as f64 - 1.0
                )));
            }
        }
        for (name, m) in [
            ("rate_prior", &self.rate_prior),
            ("mean_spread", &self.mean_spread),
            ("center_cov", &self.center_cov),
        ] {
            if m.nrows() != d || m.ncols() != d {
                return Err(Error::Parameter(format!("{name} must be {d}x{d}")));
            }
            cholesky(m).map_err(|e| Error::Parameter(format!("{name} is not SPD: {e}")))?;
        }
        let threshold = self.cluster_param_dim(subcomponents) as f64 / 2.0;
        if self.cluster_concentration >= threshold {
            warn!(
                "cluster concentration {} is not below {threshold}; surplus clusters may not empty",
                self.cluster_concentration
            );
        }
        Ok(())
    }
}

pub const DEFAULT_PHI_B: f64 = 0.5;
pub const DEFAULT_PHI_W: f64 = 0.1;

/// Elicits the prior from the overall data center and covariance.
///
/// `phi_b` is the share of variance between cluster centers and `phi_w` the
/// share, within a cluster, between subcomponent means. Subcomponent
/// covariances get the remaining `(1 - phi_w)(1 - phi_b)` share in prior mean.
pub fn elicit_priors(
    data_mean: &Vector,
    data_cov: &Matrix,
    phi_b: f64,
    phi_w: f64,
    _clusters: usize,
    subcomponents: usize,
) -> Result<Hyperparams> {
    for (name, v) in [("phi_B", phi_b), ("phi_W", phi_w)] {
        if !(v > 0.0 && v < 1.0) {
            return Err(Error::Parameter(format!(
                "{name} must lie in (0, 1), got {v}"
            )));
        }
    }
    let d = data_mean.len();
    if data_cov.nrows() != d || data_cov.ncols() != d {
        return Err(Error::Parameter("data covariance shape mismatch".into()));
    }
    cholesky(data_cov).map_err(|e| Error::Parameter(format!("data covariance is not SPD: {e}")))?;

    let precision_df = d as f64 + 2.0;
    let rate_df = d as f64 + 2.0;
    // E[Σ | C] = C / (c0 - d - 1) and E[C] = g0 G0⁻¹
    let within = data_cov * ((1.0 - phi_w) * (1.0 - phi_b));
    let rate_prior = spd_inverse(&within)? * (rate_df / (precision_df - d as f64 - 1.0));
    let hp = Hyperparams {
        cluster_concentration: 0.01,
        subcomponent_concentration: 4.0,
        precision_df,
        rate_df,
        rate_prior,
        mean_spread: data_cov * (phi_w * (1.0 - phi_b)),
        center_mean: data_mean.clone(),
        center_cov: data_cov * 10.0,
        lambda_shape: 10.0,
    };
    hp.validate(subcomponents)?;
    Ok(hp)
}

pub fn elicit_from_points(
    points: &Points,
    phi_b: f64,
    phi_w: f64,
    clusters: usize,
    subcomponents: usize,
) -> Result<Hyperparams> {
    if points.len() < 2 {
        return Err(Error::Data(
            "need at least two points to elicit priors".into(),
        ));
    }
    elicit_priors(
        &points.mean(),
        &points.covariance(),
        phi_b,
        phi_w,
        clusters,
        subcomponents,
    )
}

/// Parameters of one cluster: its subcomponents and random hyperparameters.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ClusterParams {
    pub omega: Simplex,
    pub mu: Vec<Vector>,
    pub sigma: Vec<Matrix>,
    pub precision: Vec<Matrix>,
    /// Cluster center b₀ₖ.
    pub center: Vector,
    /// Rate matrix C₀ₖ of the subcomponent precision prior.
    pub rate: Matrix,
    /// Per-coordinate scalings of the subcomponent mean spread.
    pub lambda: Vec<f64>,
}

impl ClusterParams {
    pub fn subcomponents(&self) -> usize {
        self.mu.len()
    }

    /// `sqrt(Λ) B₀ sqrt(Λ)`.
    pub fn scaled_spread(&self, mean_spread: &Matrix) -> Matrix {
        let d = self.lambda.len();
        DMatrix::from_fn(d, d, |i, j| {
            self.lambda[i].sqrt() * mean_spread[(i, j)] * self.lambda[j].sqrt()
        })
    }
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ModelParams {
    pub eta: Simplex,
    pub clusters: Vec<ClusterParams>,
}

impl ModelParams {
    pub fn num_clusters(&self) -> usize {
        self.clusters.len()
    }

    pub fn subcomponents(&self) -> usize {
        self.clusters
            .first()
            .map_or(0, ClusterParams::subcomponents)
    }

    pub fn dim(&self) -> usize {
        self.clusters.first().map_or(0, |c| c.center.len())
    }

    pub fn validate(&self) -> Result<()> {
        if self.eta.len() != self.clusters.len() {
            return Err(Error::Parameter(
                "eta length differs from cluster count".into(),
            ));
        }
        for (k, c) in self.clusters.iter().enumerate() {
            if c.omega.len() != c.mu.len() || c.mu.len() != c.sigma.len() {
                return Err(Error::Parameter(format!(
                    "cluster {k} has ragged subcomponents"
                )));
            }
            if c.lambda.iter().any(|l| !(*l > 0.0)) {
                return Err(Error::Parameter(format!(
                    "cluster {k} has non-positive lambda"
                )));
            }
            for (l, s) in c.sigma.iter().enumerate() {
                cholesky(s).map_err(|e| {
                    Error::Numerical(format!("sigma of cluster {k} subcomponent {l}: {e}"))
                })?;
            }
        }
        Ok(())
    }

    /// Cached Gaussian for every (cluster, subcomponent).
    pub fn component_densities(&self) -> Result<Vec<Vec<Gaussian>>> {
        self.clusters
            .iter()
            .enumerate()
            .map(|(k, c)| {
                c.mu.iter()
                    .zip(&c.sigma)
                    .enumerate()
                    .map(|(l, (m, s))| {
                        Gaussian::new(m, s).map_err(|e| {
                            Error::Numerical(format!("cluster {k} subcomponent {l}: {e}"))
                        })
                    })
                    .collect()
            })
            .collect()
    }

    /// Draws every parameter from its prior.
    pub fn sample_prior<R: Rng + ?Sized>(
        hp: &Hyperparams,
        clusters: usize,
        subcomponents: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let d = hp.dim();
        let eta = sample_dirichlet(&vec![hp.cluster_concentration; clusters], rng)?;
        let mut out = Vec::with_capacity(clusters);
        for _ in 0..clusters {
            let rate = sample_wishart_rate(hp.rate_df, &hp.rate_prior, rng)?;
            let center = sample_mvn(&hp.center_mean, &hp.center_cov, rng)?;
            let lambda = (0..d)
                .map(|_| sample_gamma(hp.lambda_shape, hp.lambda_shape, rng))
                .collect::<Result<Vec<_>>>()?;
            let omega = sample_dirichlet(&vec![hp.subcomponent_concentration; subcomponents], rng)?;
            let mut cp = ClusterParams {
                omega,
                mu: Vec::new(),
                sigma: Vec::new(),
                precision: Vec::new(),
                center,
                rate,
                lambda,
            };
            let spread = cp.scaled_spread(&hp.mean_spread);
            for _ in 0..subcomponents {
                let precision = sample_wishart_rate(hp.precision_df, &cp.rate, rng)?;
                cp.sigma.push(spd_inverse(&precision)?);
                cp.precision.push(precision);
                cp.mu.push(sample_mvn(&cp.center, &spread, rng)?);
            }
            out.push(cp);
        }
        Ok(ModelParams { eta, clusters: out })
    }
}

/// Worker-resident data subset.
#[derive(Debug, Clone, PartialEq)]
pub struct Shard {
    pub worker_id: usize,
    pub points: Points,
    /// Ground truth, when known. Never read by any sampler.
    pub true_labels: Option<Vec<usize>>,
}

impl Shard {
    pub fn new(worker_id: usize, points: Points) -> Result<Self> {
        if points.is_empty() {
            return Err(Error::Data(format!("shard {worker_id} is empty")));
        }
        Ok(Shard {
            worker_id,
            points,
            true_labels: None,
        })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }
}

/// Cluster and subcomponent labels for the rows of a shard (zero based).
#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct AllocationState {
    pub cluster: Vec<usize>,
    pub sub: Vec<usize>,
}

impl AllocationState {
    pub fn new(cluster: Vec<usize>, sub: Vec<usize>) -> Result<Self> {
        if cluster.len() != sub.len() {
            return Err(Error::Parameter(format!(
                "cluster labels ({}) and subcomponent labels ({}) differ in length",
                cluster.len(),
                sub.len()
            )));
        }
        Ok(AllocationState { cluster, sub })
    }

    pub fn len(&self) -> usize {
        self.cluster.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cluster.is_empty()
    }

    /// Slot index `L * k + l` of row `i`.
    pub fn slot(&self, i: usize, subcomponents: usize) -> usize {
        self.cluster[i] * subcomponents + self.sub[i]
    }
}

/// log Σₖ Σₗ ηₖ ωₖₗ N(y | μₖₗ, Σₖₗ).
pub fn mixture_logdensity(y: &Vector, params: &ModelParams) -> Result<f64> {
    let dens = params.component_densities()?;
    Ok(mixture_logdensity_cached(y.as_slice(), params, &dens))
}

pub fn mixture_logdensity_cached(y: &[f64], params: &ModelParams, dens: &[Vec<Gaussian>]) -> f64 {
    let mut scratch = vec![0.0; y.len()];
    let mut terms = Vec::with_capacity(params.num_clusters() * params.subcomponents());
    for (k, c) in params.clusters.iter().enumerate() {
        let le = params.eta.weights()[k].ln();
        for (l, g) in dens[k].iter().enumerate() {
            terms.push(le + c.omega.weights()[l].ln() + g.log_pdf_with(y, &mut scratch));
        }
    }
    log_sum_exp(&terms)
}
