//! Worker side of the protocol: owns one shard and every computation that
//! touches its rows.

use std::collections::{BTreeMap, HashMap};
use std::time::Instant;

use log::{debug, warn};

use crate::error::{Error, Result};
use crate::estimate::CandidateCounts;
use crate::local::{allocation_stats, run_local_chain, LocalChainConfig};
use crate::model::{AllocationState, Shard};
use crate::refine::{
    apply_labels, extract_items, group_marginal_loglik, ItemKey, LocalItem, RefinementPrior,
};

use super::wire::Message;
use super::Endpoint;

#[derive(Default)]
struct State {
    shard: Option<Shard>,
    chain: Option<LocalChainConfig>,
    local: BTreeMap<usize, AllocationState>,
    refined: BTreeMap<usize, AllocationState>,
    prior: Option<RefinementPrior>,
    items: Vec<LocalItem>,
    item_sample: Option<usize>,
    chosen: Option<usize>,
}

impl State {
    fn shard(&self) -> Result<&Shard> {
        self.shard
            .as_ref()
            .ok_or_else(|| Error::Data("no shard assigned".into()))
    }

    fn chain(&self) -> Result<&LocalChainConfig> {
        self.chain
            .as_ref()
            .ok_or_else(|| Error::Data("local chain has not run".into()))
    }

    fn refined(&self, t: usize) -> Result<&AllocationState> {
        self.refined
            .get(&t)
            .ok_or_else(|| Error::Data(format!("no refined sample {t}")))
    }

    /// Reply to one request, or `None` on shutdown.
    fn handle(&mut self, msg: Message) -> Result<Option<Message>> {
        Ok(Some(match msg {
            Message::ShardAssign { worker_id, points } => {
                self.shard = Some(Shard::new(worker_id, points)?);
                Message::Ack
            }
            Message::RunLocalChain { hp, chain } => {
                let start = Instant::now();
                let shard = self.shard()?;
                let trace = run_local_chain(shard, &hp, &chain)?;
                debug!("worker {} finished its local chain", shard.worker_id);
                self.local = trace
                    .samples
                    .into_iter()
                    .map(|s| (s.iteration, s.alloc))
                    .collect();
                self.refined.clear();
                self.chain = Some(chain);
                Message::ChainReport {
                    recorded: self.local.keys().copied().collect(),
                    seconds: start.elapsed().as_secs_f64(),
                }
            }
            Message::ItemStatsRequest { sample, prior } => {
                let shard = self.shard()?;
                let alloc = self
                    .local
                    .get(&sample)
                    .ok_or_else(|| Error::Data(format!("no local sample {sample}")))?;
                self.items = extract_items(
                    shard.worker_id,
                    &shard.points,
                    alloc,
                    self.chain()?.subcomponents,
                );
                self.item_sample = Some(sample);
                self.prior = Some(prior);
                Message::ItemStatsUpload {
                    items: self.items.iter().map(|i| i.stats.clone()).collect(),
                }
            }
            Message::GroupStatsBroadcast {
                within_index,
                groups,
            } => {
                let shard = self.shard()?;
                let prior = self
                    .prior
                    .as_ref()
                    .ok_or_else(|| Error::Data("no refinement prior".into()))?;
                let item = self
                    .items
                    .iter()
                    .find(|i| i.stats.key.within_index == within_index)
                    .ok_or_else(|| Error::Data(format!("no item {within_index}")))?;
                let values = groups
                    .iter()
                    .map(|q| {
                        group_marginal_loglik(
                            item.members.iter().map(|&i| shard.points.row(i)),
                            q,
                            prior,
                        )
                    })
                    .collect::<Result<_>>()?;
                Message::LoglikReply { values }
            }
            Message::LabelAssign { sample, labels } => {
                let alloc = match labels {
                    None => self
                        .local
                        .get(&sample)
                        .cloned()
                        .ok_or_else(|| Error::Data(format!("no local sample {sample}")))?,
                    Some(pairs) => {
                        if self.item_sample != Some(sample) {
                            return Err(Error::Data(format!(
                                "labels for sample {sample} arrived out of turn"
                            )));
                        }
                        let worker = self.shard()?.worker_id;
                        let map: HashMap<ItemKey, usize> = pairs
                            .into_iter()
                            .map(|(within_index, slot)| {
                                (
                                    ItemKey {
                                        worker,
                                        within_index,
                                    },
                                    slot,
                                )
                            })
                            .collect();
                        apply_labels(
                            &self.items,
                            &map,
                            self.shard()?.len(),
                            self.chain()?.subcomponents,
                        )?
                    }
                };
                self.refined.insert(sample, alloc);
                Message::Ack
            }
            Message::CandidateAnnounce { candidate, samples } => {
                let cand = &self.refined(candidate)?.cluster;
                let sample_labels = samples
                    .iter()
                    .map(|t| self.refined(*t).map(|a| a.cluster.as_slice()))
                    .collect::<Result<Vec<_>>>()?;
                Message::CountsUpload {
                    counts: CandidateCounts::from_labels(&sample_labels, cand)?,
                }
            }
            Message::GlobalEstimateBroadcast { sample } => {
                let chain = self.chain()?;
                let alloc = self.refined(sample)?;
                let stats = allocation_stats(
                    &self.shard()?.points,
                    alloc,
                    chain.clusters,
                    chain.subcomponents,
                );
                self.chosen = Some(sample);
                Message::SuffStatsUpload { stats }
            }
            Message::LabelsRequest { sample } => {
                let t = sample
                    .or(self.chosen)
                    .ok_or_else(|| Error::Data("no global estimate chosen".into()))?;
                let alloc = self.refined(t)?;
                Message::LabelsUpload {
                    cluster: alloc.cluster.clone(),
                    sub: alloc.sub.clone(),
                }
            }
            Message::Shutdown => return Ok(None),
            other => {
                return Err(Error::Data(format!(
                    "worker cannot handle {:?}",
                    other.kind()
                )))
            }
        }))
    }
}

/// Serves requests until shutdown or a transport failure. Computation
/// errors are reported to the master and do not end the loop.
pub fn serve(endpoint: &mut Endpoint) -> Result<()> {
    let mut state = State::default();
    loop {
        let (corr, msg) = endpoint.recv()?;
        match state.handle(msg) {
            Ok(Some(reply)) => endpoint.send(corr, &reply)?,
            Ok(None) => return Ok(()),
            Err(e) => {
                warn!("request {corr:#x} failed: {e}");
                endpoint.send(
                    corr,
                    &Message::Error {
                        code: e.exit_code(),
                        message: e.to_string(),
                    },
                )?;
            }
        }
    }
}
