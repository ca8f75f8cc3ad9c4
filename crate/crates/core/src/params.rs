//! Model-parameter MCMC conditional on a fixed global allocation, and the
//! posterior summaries built from its draws.

use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;

use crate::conditionals::{sample_weights, update_cluster, LambdaSource, StatsTable};
use crate::error::{Error, Result};
use crate::kernels::{log_sum_exp, spd_inverse, stream_rng, Gaussian, Matrix, Simplex, Vector};
use crate::local::params_from_stats;
use crate::model::{ClusterParams, Hyperparams, ModelParams, Points};

/// Random stream of the parameter chain, disjoint from the master (0) and
/// worker (1..=R) streams.
pub const PARAM_CHAIN_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct ParamChainConfig {
    pub n_iters: usize,
    pub burn_in: usize,
    pub seed: u64,
}

impl Default for ParamChainConfig {
    fn default() -> Self {
        ParamChainConfig {
            n_iters: 2000,
            burn_in: 1000,
            seed: 0,
        }
    }
}

impl ParamChainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.burn_in >= self.n_iters {
            return Err(Error::Parameter(format!(
                "burn-in ({}) must be below the iteration count ({})",
                self.burn_in, self.n_iters
            )));
        }
        Ok(())
    }
}

/// Pooled statistics of the nonempty clusters of the final allocation.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FixedSuffStats {
    pub table: StatsTable,
    /// Original cluster id of each retained cluster.
    pub labels: Vec<usize>,
}

impl FixedSuffStats {
    /// Drops clusters with no rows.
    pub fn from_table(full: &StatsTable) -> Result<Self> {
        let labels: Vec<usize> = (0..full.clusters())
            .filter(|&k| full.cluster_count(k) > 0)
            .collect();
        if labels.is_empty() {
            return Err(Error::Data("allocation has no nonempty cluster".into()));
        }
        let cells = labels
            .iter()
            .flat_map(|&k| full.cluster(k).iter().cloned())
            .collect();
        Ok(FixedSuffStats {
            table: StatsTable {
                subcomponents: full.subcomponents,
                cells,
            },
            labels,
        })
    }
}

/// Sums per-worker tables.
pub fn aggregate_stats<'a>(tables: impl IntoIterator<Item = &'a StatsTable>) -> Result<StatsTable> {
    let mut it = tables.into_iter();
    let mut total = it
        .next()
        .ok_or_else(|| Error::Data("no statistics to aggregate".into()))?
        .clone();
    for t in it {
        total.merge(t)?;
    }
    Ok(total)
}

/// Stored draws from the parameter chain.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDraws {
    pub labels: Vec<usize>,
    pub draws: Vec<ModelParams>,
}

impl PosteriorDraws {
    pub fn dim(&self) -> usize {
        self.draws.first().map_or(0, ModelParams::dim)
    }

    pub fn clusters(&self) -> usize {
        self.labels.len()
    }

    pub fn subcomponents(&self) -> usize {
        self.draws.first().map_or(0, ModelParams::subcomponents)
    }
}

pub fn run_param_chain(
    stats: &FixedSuffStats,
    hp: &Hyperparams,
    cfg: &ParamChainConfig,
) -> Result<PosteriorDraws> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, PARAM_CHAIN_STREAM);
    let table = &stats.table;
    let clusters = table.clusters();
    let counts: Vec<u64> = (0..clusters).map(|k| table.cluster_count(k)).collect();
    let mut params = params_from_stats(table, hp)?;
    let mut draws = Vec::with_capacity(cfg.n_iters - cfg.burn_in);
    for it in 1..=cfg.n_iters {
        params.eta = sample_weights(&counts, hp.cluster_concentration, &mut rng)?;
        for k in 0..clusters {
            update_cluster(
                &mut params.clusters[k],
                table.cluster(k),
                hp,
                LambdaSource::Previous,
                &mut rng,
            )
            .map_err(|e| {
                Error::Numerical(format!("iteration {it}, cluster {}: {e}", stats.labels[k]))
            })?;
        }
        if it > cfg.burn_in {
            draws.push(params.clone());
        }
    }
    Ok(PosteriorDraws {
        labels: stats.labels.clone(),
        draws,
    })
}

/// Posterior cluster probabilities with per-draw densities cached.
pub struct Classifier<'a> {
    draws: &'a PosteriorDraws,
    dens: Vec<Vec<Vec<Gaussian>>>,
    log_w: Vec<Vec<Vec<f64>>>,
}

impl<'a> Classifier<'a> {
    pub fn new(draws: &'a PosteriorDraws) -> Result<Self> {
        if draws.draws.is_empty() {
            return Err(Error::Data("no posterior draws".into()));
        }
        let dens = draws
            .draws
            .iter()
            .map(ModelParams::component_densities)
            .collect::<Result<_>>()?;
        let log_w = draws
            .draws
            .iter()
            .map(|p| {
                p.clusters
                    .iter()
                    .zip(p.eta.weights())
                    .map(|(c, e)| c.omega.weights().iter().map(|w| (e * w).ln()).collect())
                    .collect()
            })
            .collect();
        Ok(Classifier { draws, dens, log_w })
    }

    /// Probabilities over retained clusters and the argmax position
    /// (ties to the first).
    pub fn probabilities(&self, y: &[f64]) -> Result<(usize, Vec<f64>)> {
        let dim = self.draws.dim();
        if y.len() != dim {
            return Err(Error::Data(format!(
                "point has {} coordinates, model has {dim}",
                y.len()
            )));
        }
        let k = self.draws.clusters();
        let mut scratch = vec![0.0; dim];
        let mut per_draw = vec![Vec::with_capacity(self.dens.len()); k];
        let mut terms = Vec::new();
        for (dens, log_w) in self.dens.iter().zip(&self.log_w) {
            for c in 0..k {
                terms.clear();
                terms.extend(
                    dens[c]
                        .iter()
                        .zip(&log_w[c])
                        .map(|(g, lw)| lw + g.log_pdf_with(y, &mut scratch)),
                );
                per_draw[c].push(log_sum_exp(&terms));
            }
        }
        let log_p: Vec<f64> = per_draw.iter().map(|v| log_sum_exp(v)).collect();
        let norm = log_sum_exp(&log_p);
        if !norm.is_finite() {
            return Err(Error::Numerical(
                "point has zero density under every draw".into(),
            ));
        }
        let probs: Vec<f64> = log_p.iter().map(|l| (l - norm).exp()).collect();
        let mut best = 0;
        for (c, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = c;
            }
        }
        Ok((best, probs))
    }

    /// Original cluster id of the most probable cluster, with probabilities.
    pub fn classify(&self, y: &[f64]) -> Result<(usize, Vec<f64>)> {
        let (best, probs) = self.probabilities(y)?;
        Ok((self.draws.labels[best], probs))
    }
}

/// Simulates `m` points from the posterior predictive, each tagged with its
/// original cluster id.
pub fn posterior_predictive_sample<R: Rng + ?Sized>(
    draws: &PosteriorDraws,
    m: usize,
    rng: &mut R,
) -> Result<(Points, Vec<usize>)> {
    let mut points = Points::empty(draws.dim());
    let mut tags = Vec::with_capacity(m);
    if m == 0 {
        return Ok((points, tags));
    }
    if draws.draws.is_empty() {
        return Err(Error::Data("no posterior draws".into()));
    }
    let dens = draws
        .draws
        .iter()
        .map(ModelParams::component_densities)
        .collect::<Result<Vec<_>>>()?;
    for _ in 0..m {
        let t = rng.random_range(0..draws.draws.len());
        let p = &draws.draws[t];
        let k = pick(p.eta.weights(), rng);
        let l = pick(p.clusters[k].omega.weights(), rng);
        points.push(&dens[t][k][l].sample(rng));
        tags.push(draws.labels[k]);
    }
    Ok((points, tags))
}

fn pick<R: Rng + ?Sized>(weights: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (i, w) in weights.iter().enumerate() {
        acc += w;
        if u < acc {
            return i;
        }
    }
    weights.len() - 1
}

const DRAWS_MAGIC: &[u8; 8] = b"DIBCDRAW";
pub const DRAWS_VERSION: u32 = 1;

/// Summary written next to the binary draws.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct DrawsManifest {
    pub format_version: u32,
    pub dim: usize,
    pub clusters: usize,
    pub subcomponents: usize,
    pub draws: usize,
    pub cluster_labels: Vec<usize>,
    pub seed: u64,
    pub n_iters: usize,
    pub burn_in: usize,
    pub cluster_sizes: Vec<u64>,
}

impl DrawsManifest {
    pub fn new(draws: &PosteriorDraws, stats: &FixedSuffStats, cfg: &ParamChainConfig) -> Self {
        DrawsManifest {
            format_version: DRAWS_VERSION,
            dim: draws.dim(),
            clusters: draws.clusters(),
            subcomponents: draws.subcomponents(),
            draws: draws.draws.len(),
            cluster_labels: draws.labels.clone(),
            seed: cfg.seed,
            n_iters: cfg.n_iters,
            burn_in: cfg.burn_in,
            cluster_sizes: (0..stats.table.clusters())
                .map(|k| stats.table.cluster_count(k))
                .collect(),
        }
    }
}

struct Encoder<W: Write>(W);

impl<W: Write> Encoder<W> {
    fn u32(&mut self, v: u32) -> std::io::Result<()> {
        self.0.write_all(&v.to_le_bytes())
    }
    fn f64s(&mut self, v: &[f64]) -> std::io::Result<()> {
        for x in v {
            self.0.write_all(&x.to_le_bytes())?;
        }
        Ok(())
    }
}

struct Decoder<R: Read>(R);

impl<R: Read> Decoder<R> {
    fn u32(&mut self) -> std::io::Result<u32> {
        let mut b = [0; 4];
        self.0.read_exact(&mut b)?;
        Ok(u32::from_le_bytes(b))
    }
    fn f64s(&mut self, n: usize) -> std::io::Result<Vec<f64>> {
        let mut b = [0; 8];
        (0..n)
            .map(|_| {
                self.0.read_exact(&mut b)?;
                Ok(f64::from_le_bytes(b))
            })
            .collect()
    }
}

impl PosteriorDraws {
    /// Little-endian binary: magic, version, dim, clusters, subcomponents,
    /// draw count, cluster labels, then per draw η and per cluster
    /// ω, μ, Σ, center, rate, λ.
    pub fn write_to(&self, w: impl Write) -> std::io::Result<()> {
        let mut e = Encoder(std::io::BufWriter::new(w));
        e.0.write_all(DRAWS_MAGIC)?;
        e.u32(DRAWS_VERSION)?;
        for v in [
            self.dim(),
            self.clusters(),
            self.subcomponents(),
            self.draws.len(),
        ] {
            e.u32(v as u32)?;
        }
        for &l in &self.labels {
            e.u32(l as u32)?;
        }
        for p in &self.draws {
            e.f64s(p.eta.weights())?;
            for c in &p.clusters {
                e.f64s(c.omega.weights())?;
                for (m, s) in c.mu.iter().zip(&c.sigma) {
                    e.f64s(m.as_slice())?;
                    e.f64s(s.as_slice())?;
                }
                e.f64s(c.center.as_slice())?;
                e.f64s(c.rate.as_slice())?;
                e.f64s(&c.lambda)?;
            }
        }
        e.0.flush()
    }

    pub fn read_from(r: impl Read) -> Result<Self> {
        let mut d = Decoder(std::io::BufReader::new(r));
        let bad =
            |e: std::io::Error| Error::Data(format!("truncated or unreadable draws file: {e}"));
        let mut magic = [0; 8];
        d.0.read_exact(&mut magic).map_err(bad)?;
        if &magic != DRAWS_MAGIC {
            return Err(Error::Data("not a draws file".into()));
        }
        let version = d.u32().map_err(bad)?;
        if version != DRAWS_VERSION {
            return Err(Error::Data(format!(
                "unsupported draws format version {version}"
            )));
        }
        let mut head = [0usize; 4];
        for h in &mut head {
            *h = d.u32().map_err(bad)? as usize;
        }
        let [dim, clusters, subs, count] = head;
        let labels = (0..clusters)
            .map(|_| d.u32().map(|v| v as usize))
            .collect::<std::io::Result<Vec<_>>>()
            .map_err(bad)?;
        let mut draws = Vec::with_capacity(count);
        for _ in 0..count {
            let eta = Simplex::new(d.f64s(clusters).map_err(bad)?)?;
            let mut cs = Vec::with_capacity(clusters);
            for _ in 0..clusters {
                let omega = Simplex::new(d.f64s(subs).map_err(bad)?)?;
                let mut mu = Vec::with_capacity(subs);
                let mut sigma = Vec::with_capacity(subs);
                let mut precision = Vec::with_capacity(subs);
                for _ in 0..subs {
                    mu.push(Vector::from_vec(d.f64s(dim).map_err(bad)?));
                    let s = Matrix::from_vec(dim, dim, d.f64s(dim * dim).map_err(bad)?);
                    precision.push(spd_inverse(&s)?);
                    sigma.push(s);
                }
                let center = Vector::from_vec(d.f64s(dim).map_err(bad)?);
                let rate = Matrix::from_vec(dim, dim, d.f64s(dim * dim).map_err(bad)?);
                let lambda = d.f64s(dim).map_err(bad)?;
                cs.push(ClusterParams {
                    omega,
                    mu,
                    sigma,
                    precision,
                    center,
                    rate,
                    lambda,
                });
            }
            let p = ModelParams { eta, clusters: cs };
            p.validate()?;
            draws.push(p);
        }
        Ok(PosteriorDraws { labels, draws })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let f =
            std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        self.write_to(f)
            .map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        Self::read_from(f).map_err(|e| match e {
            Error::Data(m) => Error::Data(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::local::allocation_stats;
    use crate::model::{elicit_from_points, AllocationState};

    fn toy() -> (Points, AllocationState) {
        let mut rng = stream_rng(5, 0);
        let mut pts = Points::empty(1);
        let mut cluster = Vec::new();
        for i in 0..200 {
            let k = i % 2;
            let g: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
            pts.push(&[k as f64 * 30.0 + g]);
            cluster.push(2 * k);
        }
        let alloc = AllocationState::new(cluster, vec![0; 200]).unwrap();
        (pts, alloc)
    }

    fn fit(seed: u64) -> (PosteriorDraws, FixedSuffStats) {
        let (pts, alloc) = toy();
        let hp = elicit_from_points(&pts, 0.5, 0.1, 3, 2).unwrap();
        let stats = FixedSuffStats::from_table(&allocation_stats(&pts, &alloc, 3, 2)).unwrap();
        let cfg = ParamChainConfig {
            n_iters: 300,
            burn_in: 100,
            seed,
        };
        (run_param_chain(&stats, &hp, &cfg).unwrap(), stats)
    }

    #[test]
    fn keeps_nonempty_clusters_and_is_reproducible() {
        let (a, stats) = fit(1);
        assert_eq!(stats.labels, vec![0, 2]);
        assert_eq!(a.draws.len(), 200);
        assert_eq!(a, fit(1).0);
        assert_ne!(a, fit(2).0);
    }

    #[test]
    fn classification_of_separated_clusters() {
        let (draws, _) = fit(3);
        let c = Classifier::new(&draws).unwrap();
        let (label, probs) = c.classify(&[30.0]).unwrap();
        assert_eq!(label, 2);
        // Empty subcomponents draw from the broad prior and leak a little mass.
        assert!(probs[1] > 1.0 - 1e-4, "{probs:?}");
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert!(c.classify(&[1.0, 2.0]).is_err());
    }

    #[test]
    fn predictive_moments() {
        let (draws, _) = fit(4);
        let (pts, tags) = posterior_predictive_sample(&draws, 4000, &mut stream_rng(9, 0)).unwrap();
        let m = pts.mean()[0];
        // the training mean is about 15 with sd about 15
        assert!((m - 15.0).abs() < 1.5, "{m}");
        assert!(tags.iter().all(|t| *t == 0 || *t == 2));
        assert!(
            posterior_predictive_sample(&draws, 0, &mut stream_rng(9, 0))
                .unwrap()
                .0
                .is_empty()
        );
    }

    #[test]
    fn binary_roundtrip() {
        let (draws, _) = fit(6);
        let mut buf = Vec::new();
        draws.write_to(&mut buf).unwrap();
        let back = PosteriorDraws::read_from(buf.as_slice()).unwrap();
        assert_eq!(back.labels, draws.labels);
        assert_eq!(back.draws.len(), draws.draws.len());
        for (a, b) in back.draws.iter().zip(&draws.draws) {
            assert_eq!(a.clusters[1].sigma, b.clusters[1].sigma);
            assert_eq!(a.eta, b.eta);
        }
        assert!(PosteriorDraws::read_from(&buf[..buf.len() - 3]).is_err());
        assert!(PosteriorDraws::read_from(&b"NOTDRAWS"[..]).is_err());
    }
}
