//! Master side: partitions the data, drives the five pipeline steps over the
//! worker endpoints, and samples the model parameters.

use std::collections::BTreeMap;
use std::net::TcpListener;
use std::thread::JoinHandle;
use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result, Step, StepExt};
use crate::estimate::{
    sample_candidates, select_best, CandidateCounts, CandidateScore, Loss, Selection,
};
use crate::kernels::{stream_rng, ChainRng};
use crate::local::LocalChainConfig;
use crate::model::{elicit_from_points, Hyperparams, Points, DEFAULT_PHI_B, DEFAULT_PHI_W};
use crate::params::{
    aggregate_stats, run_param_chain, FixedSuffStats, ParamChainConfig, PosteriorDraws,
};
use crate::refine::{
    init_groups, refine_sweep, GroupSummary, ItemKey, ItemLikelihood, ItemStats, RefinementPrior,
};

use super::transport::{InProcTransport, Meter, TcpTransport};
use super::wire::{correlation, Kind, Message};
use super::worker::serve;
use super::Endpoint;

#[derive(Debug, Clone, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportChoice {
    InProc,
    /// Worker addresses; empty means loopback workers started in-process.
    Tcp {
        addrs: Vec<String>,
    },
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct PipelineConfig {
    pub workers: usize,
    pub clusters: usize,
    pub subcomponents: usize,
    pub n_iters: usize,
    pub burn_in: usize,
    /// Refined samples per worker chain.
    pub refine_samples: usize,
    /// Candidates scored in estimation.
    pub candidates: usize,
    pub param_iters: usize,
    pub param_burn_in: usize,
    pub seed: u64,
    pub loss: Loss,
    pub phi_b: f64,
    pub phi_w: f64,
    pub refine_alpha: f64,
    pub transport: TransportChoice,
    /// Also return the cluster labels of every refined sample.
    pub collect_refined: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            workers: 4,
            clusters: 10,
            subcomponents: 3,
            n_iters: 1000,
            burn_in: 500,
            refine_samples: 100,
            candidates: 20,
            param_iters: 2000,
            param_burn_in: 1000,
            seed: 0,
            loss: Loss::Vi,
            phi_b: DEFAULT_PHI_B,
            phi_w: DEFAULT_PHI_W,
            refine_alpha: 1.0,
            transport: TransportChoice::InProc,
            collect_refined: false,
        }
    }
}

impl PipelineConfig {
    pub fn chain(&self) -> LocalChainConfig {
        LocalChainConfig {
            clusters: self.clusters,
            subcomponents: self.subcomponents,
            n_iters: self.n_iters,
            burn_in: self.burn_in,
            recorded: self.refine_samples,
            seed: self.seed,
        }
    }

    pub fn param_chain(&self) -> ParamChainConfig {
        ParamChainConfig {
            n_iters: self.param_iters,
            burn_in: self.param_burn_in,
            seed: self.seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.workers == 0 {
            return Err(Error::Config("at least one worker is required".into()));
        }
        if self.candidates == 0 || self.candidates > self.refine_samples {
            return Err(Error::Config(format!(
                "candidate count {} must be between 1 and the refined sample count {}",
                self.candidates, self.refine_samples
            )));
        }
        if let TransportChoice::Tcp { addrs } = &self.transport {
            if !addrs.is_empty() && addrs.len() != self.workers {
                return Err(Error::Config(format!(
                    "{} worker addresses given for {} workers",
                    addrs.len(),
                    self.workers
                )));
            }
        }
        if !(self.refine_alpha > 0.0) {
            return Err(Error::Config("refinement alpha must be positive".into()));
        }
        self.chain().validate()?;
        self.param_chain()
            .validate()
            .map_err(|e| Error::Config(e.to_string()))
    }
}

/// Uniformly random row-to-worker assignment with sizes differing by at
/// most one. Each shard lists its rows in increasing order.
pub fn partition_data<R: Rng + ?Sized>(
    n: usize,
    workers: usize,
    rng: &mut R,
) -> Result<Vec<Vec<usize>>> {
    if workers == 0 || n < workers {
        return Err(Error::Config(format!(
            "cannot split {n} rows across {workers} workers"
        )));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    let mut shards = vec![Vec::with_capacity(n / workers + 1); workers];
    for (pos, row) in order.into_iter().enumerate() {
        shards[pos % workers].push(row);
    }
    for s in &mut shards {
        s.sort_unstable();
    }
    Ok(shards)
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct StepTiming {
    pub step: Step,
    pub seconds: f64,
    pub skipped: bool,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct Diagnostics {
    pub config: PipelineConfig,
    pub n: usize,
    pub dim: usize,
    pub shard_sizes: Vec<usize>,
    pub timings: Vec<StepTiming>,
    pub worker_chain_seconds: Vec<f64>,
    pub refined_samples: Vec<usize>,
    pub dropped_samples: Vec<usize>,
    /// (sample, reference worker, item count) per refinement pass.
    pub references: Vec<(usize, usize, usize)>,
    pub score_label: String,
    pub selection: Selection,
    pub cluster_sizes: BTreeMap<usize, u64>,
    pub traffic: Meter,
    /// Worker-to-master bytes of item statistics, likelihood replies and
    /// count tables.
    pub refinement_estimation_upload_bytes: u64,
}

pub struct PipelineResult {
    /// Cluster of every input row (zero based).
    pub clusters: Vec<usize>,
    pub subcomponents: Vec<usize>,
    pub hyperparams: Hyperparams,
    pub stats: FixedSuffStats,
    pub draws: PosteriorDraws,
    /// Cluster labels of each refined sample, when requested.
    pub refined: Option<BTreeMap<usize, Vec<usize>>>,
    /// Merged count tables of each scored candidate, alongside `refined`.
    pub candidate_counts: Option<BTreeMap<usize, CandidateCounts>>,
    pub diagnostics: Diagnostics,
}

struct Workers {
    eps: Vec<Endpoint>,
    handles: Vec<JoinHandle<Result<()>>>,
}

impl Workers {
    fn start(cfg: &PipelineConfig) -> Result<Self> {
        let mut eps = Vec::with_capacity(cfg.workers);
        let mut handles = Vec::new();
        match &cfg.transport {
            TransportChoice::InProc => {
                for _ in 0..cfg.workers {
                    let (m, w) = InProcTransport::pair();
                    handles.push(std::thread::spawn(move || serve(&mut Endpoint::new(w))));
                    eps.push(Endpoint::new(m));
                }
            }
            TransportChoice::Tcp { addrs } if addrs.is_empty() => {
                for _ in 0..cfg.workers {
                    let listener = TcpListener::bind("127.0.0.1:0")
                        .map_err(|e| Error::Transport(format!("binding loopback worker: {e}")))?;
                    let addr = listener
                        .local_addr()
                        .map_err(|e| Error::Transport(format!("loopback address: {e}")))?;
                    handles.push(std::thread::spawn(move || {
                        serve(&mut Endpoint::new(TcpTransport::accept(&listener)?))
                    }));
                    eps.push(Endpoint::new(TcpTransport::connect(addr)?));
                }
            }
            TransportChoice::Tcp { addrs } => {
                for a in addrs {
                    eps.push(Endpoint::new(TcpTransport::connect(a.as_str())?));
                }
            }
        }
        Ok(Workers { eps, handles })
    }

    fn shutdown(mut self) {
        for ep in &mut self.eps {
            let _ = ep.send(0, &Message::Shutdown);
        }
        drop(self.eps);
        for h in self.handles.drain(..) {
            match h.join() {
                Ok(Err(e)) => warn!("worker ended with error: {e}"),
                Err(_) => warn!("worker thread panicked"),
                Ok(Ok(())) => {}
            }
        }
    }
}

/// Outer error: transport failure. Inner error: failure reported by the
/// worker.
fn reply(ep: &mut Endpoint, expect: Kind) -> Result<Result<Message>> {
    let (_, msg) = ep.recv()?;
    Ok(match msg {
        Message::Error { code, message } => Err(Error::from_code(code, message)),
        m if m.kind() == expect => Ok(m),
        m => {
            return Err(Error::Transport(format!(
                "expected {expect:?}, got {:?}",
                m.kind()
            )));
        }
    })
}

/// Sends one message per worker, then collects the replies in worker order.
fn round(
    eps: &mut [Endpoint],
    corr: u64,
    msg: impl Fn(usize) -> Message,
    expect: Kind,
) -> Result<Vec<Result<Message>>> {
    for (r, ep) in eps.iter_mut().enumerate() {
        ep.send(corr, &msg(r))?;
    }
    eps.iter_mut().map(|ep| reply(ep, expect)).collect()
}

fn all_ok(replies: Vec<Result<Message>>) -> Result<Vec<Message>> {
    replies
        .into_iter()
        .enumerate()
        .map(|(r, m)| m.map_err(|e| prefix(e, &format!("worker {r}"))))
        .collect()
}

fn prefix(e: Error, what: &str) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("{what}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("{what}: {m}")),
        Error::Transport(m) => Error::Transport(format!("{what}: {m}")),
        Error::Config(m) => Error::Config(format!("{what}: {m}")),
        Error::Parameter(m) => Error::Parameter(format!("{what}: {m}")),
        other => other,
    }
}

struct RemoteLikelihood<'a> {
    eps: &'a mut [Endpoint],
    sample: usize,
    reported: bool,
}

impl ItemLikelihood for RemoteLikelihood<'_> {
    fn item_loglik(&mut self, item: ItemKey, groups: &[GroupSummary]) -> Result<Vec<f64>> {
        let ep = self
            .eps
            .get_mut(item.worker)
            .ok_or_else(|| Error::Data(format!("item from unknown worker {}", item.worker)))?;
        ep.send(
            correlation(self.sample, item.within_index),
            &Message::GroupStatsBroadcast {
                within_index: item.within_index,
                groups: groups.to_vec(),
            },
        )?;
        match reply(ep, Kind::LoglikReply)? {
            Ok(Message::LoglikReply { values }) => Ok(values),
            Ok(_) => unreachable!("reply() checks the kind"),
            Err(e) => {
                self.reported = true;
                Err(e)
            }
        }
    }
}

enum Refined {
    Kept { reference: usize, items: usize },
    Dropped(Error),
}

fn refine_sample(
    eps: &mut [Endpoint],
    t: usize,
    prior: &RefinementPrior,
    rng: &mut ChainRng,
) -> Result<Refined> {
    let reference = rng.random_range(0..eps.len());
    let replies = round(
        eps,
        correlation(t, 0),
        |_| Message::ItemStatsRequest {
            sample: t,
            prior: prior.clone(),
        },
        Kind::ItemStatsUpload,
    )?;
    let mut items: Vec<ItemStats> = Vec::new();
    for (r, rep) in replies.into_iter().enumerate() {
        match rep {
            Ok(Message::ItemStatsUpload { items: mut it }) => items.append(&mut it),
            Ok(_) => unreachable!(),
            Err(e) => return Ok(Refined::Dropped(prefix(e, &format!("worker {r}")))),
        }
    }
    let mut state = init_groups(&items, reference)?;
    let mut lik = RemoteLikelihood {
        eps,
        sample: t,
        reported: false,
    };
    if let Err(e) = refine_sweep(&items, &mut state, prior, &mut lik, rng) {
        if lik.reported || matches!(e, Error::Numerical(_)) {
            return Ok(Refined::Dropped(e));
        }
        return Err(e);
    }
    let labels = state.refined_labels();
    let mut per_worker: Vec<Vec<(usize, usize)>> = vec![Vec::new(); eps.len()];
    for (key, slot) in labels {
        per_worker[key.worker].push((key.within_index, slot));
    }
    for v in &mut per_worker {
        v.sort_unstable();
    }
    let acks = round(
        eps,
        correlation(t, 0),
        |r| Message::LabelAssign {
            sample: t,
            labels: Some(per_worker[r].clone()),
        },
        Kind::Ack,
    )?;
    all_ok(acks)?;
    Ok(Refined::Kept {
        reference,
        items: items.len(),
    })
}

fn timed<T>(timings: &mut Vec<StepTiming>, step: Step, f: impl FnOnce() -> Result<T>) -> Result<T> {
    let start = Instant::now();
    let out = f().at(step)?;
    let seconds = start.elapsed().as_secs_f64();
    info!("{step} finished in {seconds:.2}s");
    timings.push(StepTiming {
        step,
        seconds,
        skipped: false,
    });
    Ok(out)
}

pub fn run_pipeline(cfg: &PipelineConfig, data: &Points) -> Result<PipelineResult> {
    cfg.validate()?;
    let mut workers = Workers::start(cfg)?;
    let out = drive(cfg, data, &mut workers);
    workers.shutdown();
    out
}

fn drive(cfg: &PipelineConfig, data: &Points, workers: &mut Workers) -> Result<PipelineResult> {
    let n = data.len();
    let mut rng = stream_rng(cfg.seed, 0);
    let mut timings = Vec::new();
    let eps = &mut workers.eps;

    let (hp, prior, shards) = timed(&mut timings, Step::Partition, || {
        let hp = elicit_from_points(data, cfg.phi_b, cfg.phi_w, cfg.clusters, cfg.subcomponents)?;
        let mut prior = RefinementPrior::from_data_cov(&data.covariance());
        prior.alpha = cfg.refine_alpha;
        let shards = partition_data(n, cfg.workers, &mut rng)?;
        for (r, rows) in shards.iter().enumerate() {
            eps[r].send(
                0,
                &Message::ShardAssign {
                    worker_id: r,
                    points: data.select(rows),
                },
            )?;
        }
        for ep in eps.iter_mut() {
            reply(ep, Kind::Ack)??;
        }
        Ok((hp, prior, shards))
    })?;

    let (tags, chain_seconds) = timed(&mut timings, Step::LocalSampling, || {
        let reports = all_ok(round(
            eps,
            0,
            |_| Message::RunLocalChain {
                hp: hp.clone(),
                chain: cfg.chain(),
            },
            Kind::ChainReport,
        )?)?;
        let mut tags = None;
        let mut secs = Vec::new();
        for m in reports {
            if let Message::ChainReport { recorded, seconds } = m {
                if tags.get_or_insert_with(|| recorded.clone()) != &recorded {
                    return Err(Error::Data("workers recorded different iterations".into()));
                }
                secs.push(seconds);
            }
        }
        Ok((tags.unwrap_or_default(), secs))
    })?;

    let mut kept = Vec::new();
    let mut dropped = Vec::new();
    let mut references = Vec::new();
    if cfg.workers == 1 {
        let start = Instant::now();
        for &t in &tags {
            all_ok(round(
                eps,
                correlation(t, 0),
                |_| Message::LabelAssign {
                    sample: t,
                    labels: None,
                },
                Kind::Ack,
            )?)
            .at(Step::Refinement)?;
            kept.push(t);
        }
        timings.push(StepTiming {
            step: Step::Refinement,
            seconds: start.elapsed().as_secs_f64(),
            skipped: true,
        });
    } else {
        timed(&mut timings, Step::Refinement, || {
            for &t in &tags {
                match refine_sample(eps, t, &prior, &mut rng)? {
                    Refined::Kept { reference, items } => {
                        kept.push(t);
                        references.push((t, reference, items));
                    }
                    Refined::Dropped(e) => {
                        warn!("dropping refined sample {t}: {e}");
                        dropped.push(t);
                    }
                }
            }
            if kept.is_empty() {
                return Err(Error::Numerical("every refinement pass failed".into()));
            }
            Ok(())
        })?;
    }

    let mut candidate_counts = BTreeMap::new();
    let selection = timed(&mut timings, Step::Estimation, || {
        let picks = sample_candidates(kept.len(), cfg.candidates, &mut rng);
        let mut scores = Vec::with_capacity(picks.len());
        for i in picks {
            let cand = kept[i];
            let replies = round(
                eps,
                correlation(cand, 0),
                |_| Message::CandidateAnnounce {
                    candidate: cand,
                    samples: kept.clone(),
                },
                Kind::CountsUpload,
            );
            let counts = replies.and_then(all_ok).and_then(|ms| {
                let mut total = CandidateCounts::default();
                for m in ms {
                    if let Message::CountsUpload { counts } = m {
                        total.merge(&counts)?;
                    }
                }
                Ok(total)
            });
            let counts = counts.map_err(|e| {
                let partial: Vec<String> = scores
                    .iter()
                    .map(|s: &CandidateScore| format!("{}: {:.6}", s.sample, s.score))
                    .collect();
                prefix(
                    e,
                    &format!(
                        "scoring candidate {cand} (scores so far [{}])",
                        partial.join(", ")
                    ),
                )
            })?;
            scores.push(CandidateScore {
                sample: cand,
                score: cfg.loss.score(&counts, n as u64)?,
            });
            if cfg.collect_refined {
                candidate_counts.insert(cand, counts);
            }
        }
        select_best(scores)
    })?;
    info!(
        "selected sample {} with {} {:.6}",
        selection.best,
        cfg.loss.label(),
        selection.best_score
    );

    let (stats, draws) = timed(&mut timings, Step::ParamSampling, || {
        let tables = all_ok(round(
            eps,
            correlation(selection.best, 0),
            |_| Message::GlobalEstimateBroadcast {
                sample: selection.best,
            },
            Kind::SuffStatsUpload,
        )?)?;
        let tables: Vec<_> = tables
            .into_iter()
            .filter_map(|m| match m {
                Message::SuffStatsUpload { stats } => Some(stats),
                _ => None,
            })
            .collect();
        let stats = FixedSuffStats::from_table(&aggregate_stats(&tables)?)?;
        let draws = run_param_chain(&stats, &hp, &cfg.param_chain())?;
        Ok((stats, draws))
    })?;

    let traffic = workers_meter(eps);
    let eps = &mut workers.eps;
    let (clusters, subcomponents, refined) = timed(&mut timings, Step::Collect, || {
        let mut clusters = vec![0; n];
        let mut subs = vec![0; n];
        let labels = all_ok(round(
            eps,
            0,
            |_| Message::LabelsRequest { sample: None },
            Kind::LabelsUpload,
        )?)?;
        for (rows, m) in shards.iter().zip(labels) {
            if let Message::LabelsUpload { cluster, sub } = m {
                if cluster.len() != rows.len() {
                    return Err(Error::Data(
                        "worker returned the wrong number of labels".into(),
                    ));
                }
                for ((&i, c), s) in rows.iter().zip(cluster).zip(sub) {
                    clusters[i] = c;
                    subs[i] = s;
                }
            }
        }
        let refined = if cfg.collect_refined {
            let mut out = BTreeMap::new();
            for &t in &kept {
                let labels = all_ok(round(
                    eps,
                    correlation(t, 0),
                    |_| Message::LabelsRequest { sample: Some(t) },
                    Kind::LabelsUpload,
                )?)?;
                let mut full = vec![0; n];
                for (rows, m) in shards.iter().zip(labels) {
                    if let Message::LabelsUpload { cluster, .. } = m {
                        for (&i, c) in rows.iter().zip(cluster) {
                            full[i] = c;
                        }
                    }
                }
                out.insert(t, full);
            }
            Some(out)
        } else {
            None
        };
        Ok((clusters, subs, refined))
    })?;

    let mut cluster_sizes = BTreeMap::new();
    for &c in &clusters {
        *cluster_sizes.entry(c).or_insert(0u64) += 1;
    }
    let upload = traffic.received_bytes(Kind::is_refinement_or_estimation_upload);
    Ok(PipelineResult {
        clusters,
        subcomponents,
        hyperparams: hp,
        stats,
        draws,
        refined,
        candidate_counts: cfg.collect_refined.then_some(candidate_counts),
        diagnostics: Diagnostics {
            config: cfg.clone(),
            n,
            dim: data.dim(),
            shard_sizes: shards.iter().map(Vec::len).collect(),
            timings,
            worker_chain_seconds: chain_seconds,
            refined_samples: kept,
            dropped_samples: dropped,
            references,
            score_label: cfg.loss.label().to_string(),
            selection,
            cluster_sizes,
            traffic,
            refinement_estimation_upload_bytes: upload,
        },
    })
}

fn workers_meter(eps: &[Endpoint]) -> Meter {
    let mut m = Meter::default();
    for ep in eps {
        m.merge(ep.meter());
    }
    m
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partition_sizes_and_determinism() {
        let p = partition_data(10, 3, &mut stream_rng(1, 0)).unwrap();
        let mut sizes: Vec<usize> = p.iter().map(Vec::len).collect();
        sizes.sort_unstable();
        assert_eq!(sizes, vec![3, 3, 4]);
        let mut all: Vec<usize> = p.concat();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        assert_eq!(p, partition_data(10, 3, &mut stream_rng(1, 0)).unwrap());
        assert_eq!(
            partition_data(5, 1, &mut stream_rng(1, 0)).unwrap(),
            vec![vec![0, 1, 2, 3, 4]]
        );
        assert!(partition_data(2, 3, &mut stream_rng(1, 0)).is_err());
    }

    #[test]
    fn config_rejects_more_candidates_than_samples() {
        let cfg = PipelineConfig {
            candidates: 30,
            refine_samples: 20,
            ..Default::default()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
    }
}
