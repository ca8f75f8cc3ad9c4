//! Wire protocol shared by every transport.
//!
//! A frame is `[u32 length][u8 kind][u64 correlation][payload]`, all
//! little-endian, where `length` counts the bytes after itself. The payload
//! is the bincode 1.x encoding (little-endian, fixed-width integers) of the
//! kind's fields in declaration order. Socket connections open with the
//! four bytes `DIBC` and a `u16` protocol version from each side.

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::conditionals::StatsTable;
use crate::error::{Error, Result};
use crate::estimate::CandidateCounts;
use crate::local::LocalChainConfig;
use crate::model::{Hyperparams, Points};
use crate::refine::{GroupSummary, ItemStats, RefinementPrior};

pub const MAGIC: &[u8; 4] = b"DIBC";
pub const PROTOCOL_VERSION: u16 = 1;
/// Bytes in a frame before the payload.
pub const HEADER_LEN: usize = 4 + 1 + 8;
/// Upper bound on a frame body, guarding against corrupt length prefixes.
pub const MAX_FRAME: usize = 1 << 31;

#[repr(u8)]
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    ShardAssign = 1,
    RunLocalChain = 2,
    ChainReport = 3,
    ItemStatsRequest = 4,
    ItemStatsUpload = 5,
    GroupStatsBroadcast = 6,
    LoglikReply = 7,
    LabelAssign = 8,
    Ack = 9,
    CandidateAnnounce = 10,
    CountsUpload = 11,
    GlobalEstimateBroadcast = 12,
    SuffStatsUpload = 13,
    LabelsRequest = 14,
    LabelsUpload = 15,
    Shutdown = 16,
    Error = 17,
}

impl Kind {
    const ALL: [Kind; 17] = [
        Kind::ShardAssign,
        Kind::RunLocalChain,
        Kind::ChainReport,
        Kind::ItemStatsRequest,
        Kind::ItemStatsUpload,
        Kind::GroupStatsBroadcast,
        Kind::LoglikReply,
        Kind::LabelAssign,
        Kind::Ack,
        Kind::CandidateAnnounce,
        Kind::CountsUpload,
        Kind::GlobalEstimateBroadcast,
        Kind::SuffStatsUpload,
        Kind::LabelsRequest,
        Kind::LabelsUpload,
        Kind::Shutdown,
        Kind::Error,
    ];

    pub fn from_byte(b: u8) -> Result<Kind> {
        Kind::ALL
            .iter()
            .copied()
            .find(|k| *k as u8 == b)
            .ok_or_else(|| Error::Transport(format!("unknown message kind {b}")))
    }

    /// Kinds a worker sends during refinement and estimation.
    pub fn is_refinement_or_estimation_upload(self) -> bool {
        matches!(
            self,
            Kind::ItemStatsUpload | Kind::LoglikReply | Kind::CountsUpload
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    ShardAssign {
        worker_id: usize,
        points: Points,
    },
    RunLocalChain {
        hp: Hyperparams,
        chain: LocalChainConfig,
    },
    ChainReport {
        recorded: Vec<usize>,
        seconds: f64,
    },
    ItemStatsRequest {
        sample: usize,
        prior: RefinementPrior,
    },
    ItemStatsUpload {
        items: Vec<ItemStats>,
    },
    GroupStatsBroadcast {
        within_index: usize,
        groups: Vec<GroupSummary>,
    },
    LoglikReply {
        values: Vec<f64>,
    },
    /// `(within_index, refined slot)` per item, or `None` to keep the local
    /// allocation as is.
    LabelAssign {
        sample: usize,
        labels: Option<Vec<(usize, usize)>>,
    },
    Ack,
    CandidateAnnounce {
        candidate: usize,
        samples: Vec<usize>,
    },
    CountsUpload {
        counts: CandidateCounts,
    },
    GlobalEstimateBroadcast {
        sample: usize,
    },
    SuffStatsUpload {
        stats: StatsTable,
    },
    /// Cluster labels of a refined sample, or of the chosen one.
    LabelsRequest {
        sample: Option<usize>,
    },
    LabelsUpload {
        cluster: Vec<usize>,
        sub: Vec<usize>,
    },
    Shutdown,
    Error {
        code: i32,
        message: String,
    },
}

fn ser<T: Serialize + ?Sized>(v: &T) -> Result<Vec<u8>> {
    bincode::serialize(v).map_err(|e| Error::Transport(format!("encoding payload: {e}")))
}

fn de<T: DeserializeOwned>(kind: Kind, bytes: &[u8]) -> Result<T> {
    bincode::deserialize(bytes)
        .map_err(|e| Error::Transport(format!("decoding {kind:?} payload: {e}")))
}

impl Message {
    pub fn kind(&self) -> Kind {
        match self {
            Message::ShardAssign { .. } => Kind::ShardAssign,
            Message::RunLocalChain { .. } => Kind::RunLocalChain,
            Message::ChainReport { .. } => Kind::ChainReport,
            Message::ItemStatsRequest { .. } => Kind::ItemStatsRequest,
            Message::ItemStatsUpload { .. } => Kind::ItemStatsUpload,
            Message::GroupStatsBroadcast { .. } => Kind::GroupStatsBroadcast,
            Message::LoglikReply { .. } => Kind::LoglikReply,
            Message::LabelAssign { .. } => Kind::LabelAssign,
            Message::Ack => Kind::Ack,
            Message::CandidateAnnounce { .. } => Kind::CandidateAnnounce,
            Message::CountsUpload { .. } => Kind::CountsUpload,
            Message::GlobalEstimateBroadcast { .. } => Kind::GlobalEstimateBroadcast,
            Message::SuffStatsUpload { .. } => Kind::SuffStatsUpload,
            Message::LabelsRequest { .. } => Kind::LabelsRequest,
            Message::LabelsUpload { .. } => Kind::LabelsUpload,
            Message::Shutdown => Kind::Shutdown,
            Message::Error { .. } => Kind::Error,
        }
    }

    fn payload(&self) -> Result<Vec<u8>> {
        match self {
            Message::ShardAssign { worker_id, points } => ser(&(worker_id, points)),
            Message::RunLocalChain { hp, chain } => ser(&(hp, chain)),
            Message::ChainReport { recorded, seconds } => ser(&(recorded, seconds)),
            Message::ItemStatsRequest { sample, prior } => ser(&(sample, prior)),
            Message::ItemStatsUpload { items } => ser(items),
            Message::GroupStatsBroadcast {
                within_index,
                groups,
            } => ser(&(within_index, groups)),
            Message::LoglikReply { values } => ser(values),
            Message::LabelAssign { sample, labels } => ser(&(sample, labels)),
            Message::CandidateAnnounce { candidate, samples } => ser(&(candidate, samples)),
            Message::CountsUpload { counts } => ser(counts),
            Message::GlobalEstimateBroadcast { sample } => ser(sample),
            Message::SuffStatsUpload { stats } => ser(stats),
            Message::LabelsUpload { cluster, sub } => ser(&(cluster, sub)),
            Message::Error { code, message } => ser(&(code, message)),
            Message::LabelsRequest { sample } => ser(sample),
            Message::Ack | Message::Shutdown => Ok(Vec::new()),
        }
    }

    pub fn encode(&self, correlation: u64) -> Result<Vec<u8>> {
        let payload = self.payload()?;
        let body = 1 + 8 + payload.len();
        if body > MAX_FRAME {
            return Err(Error::Transport(format!(
                "{:?} frame of {body} bytes is too large",
                self.kind()
            )));
        }
        let mut out = Vec::with_capacity(4 + body);
        out.extend_from_slice(&(body as u32).to_le_bytes());
        out.push(self.kind() as u8);
        out.extend_from_slice(&correlation.to_le_bytes());
        out.extend_from_slice(&payload);
        Ok(out)
    }

    /// Decodes a whole frame, length prefix included.
    pub fn decode(frame: &[u8]) -> Result<(u64, Message)> {
        if frame.len() < HEADER_LEN {
            return Err(Error::Transport(format!(
                "frame of {} bytes is shorter than its header",
                frame.len()
            )));
        }
        let body = u32::from_le_bytes(frame[0..4].try_into().unwrap()) as usize;
        if body + 4 != frame.len() {
            return Err(Error::Transport(format!(
                "frame length prefix {body} does not match {} received bytes",
                frame.len() - 4
            )));
        }
        let kind = Kind::from_byte(frame[4])?;
        let corr = u64::from_le_bytes(frame[5..13].try_into().unwrap());
        let p = &frame[HEADER_LEN..];
        let msg = match kind {
            Kind::ShardAssign => {
                let (worker_id, points) = de(kind, p)?;
                Message::ShardAssign { worker_id, points }
            }
            Kind::RunLocalChain => {
                let (hp, chain) = de(kind, p)?;
                Message::RunLocalChain { hp, chain }
            }
            Kind::ChainReport => {
                let (recorded, seconds) = de(kind, p)?;
                Message::ChainReport { recorded, seconds }
            }
            Kind::ItemStatsRequest => {
                let (sample, prior) = de(kind, p)?;
                Message::ItemStatsRequest { sample, prior }
            }
            Kind::ItemStatsUpload => Message::ItemStatsUpload {
                items: de(kind, p)?,
            },
            Kind::GroupStatsBroadcast => {
                let (within_index, groups) = de(kind, p)?;
                Message::GroupStatsBroadcast {
                    within_index,
                    groups,
                }
            }
            Kind::LoglikReply => Message::LoglikReply {
                values: de(kind, p)?,
            },
            Kind::LabelAssign => {
                let (sample, labels) = de(kind, p)?;
                Message::LabelAssign { sample, labels }
            }
            Kind::CandidateAnnounce => {
                let (candidate, samples) = de(kind, p)?;
                Message::CandidateAnnounce { candidate, samples }
            }
            Kind::CountsUpload => Message::CountsUpload {
                counts: de(kind, p)?,
            },
            Kind::GlobalEstimateBroadcast => Message::GlobalEstimateBroadcast {
                sample: de(kind, p)?,
            },
            Kind::SuffStatsUpload => Message::SuffStatsUpload {
                stats: de(kind, p)?,
            },
            Kind::LabelsUpload => {
                let (cluster, sub) = de(kind, p)?;
                Message::LabelsUpload { cluster, sub }
            }
            Kind::Error => {
                let (code, message) = de(kind, p)?;
                Message::Error { code, message }
            }
            Kind::Ack => Message::Ack,
            Kind::LabelsRequest => Message::LabelsRequest {
                sample: de(kind, p)?,
            },
            Kind::Shutdown => Message::Shutdown,
        };
        Ok((corr, msg))
    }
}

/// Correlation id for item `within_index` of refined sample `sample`.
pub fn correlation(sample: usize, within_index: usize) -> u64 {
    ((sample as u64) << 32) | within_index as u64
}

pub fn handshake_bytes() -> [u8; 6] {
    let mut b = [0; 6];
    b[..4].copy_from_slice(MAGIC);
    b[4..].copy_from_slice(&PROTOCOL_VERSION.to_le_bytes());
    b
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::{Matrix, Vector};
    use crate::refine::ItemKey;

    #[test]
    fn header_layout() {
        let f = Message::GlobalEstimateBroadcast { sample: 7 }
            .encode(0x0102)
            .unwrap();
        assert_eq!(f.len(), HEADER_LEN + 8);
        assert_eq!(&f[0..4], &17u32.to_le_bytes());
        assert_eq!(f[4], Kind::GlobalEstimateBroadcast as u8);
        assert_eq!(&f[5..13], &0x0102u64.to_le_bytes());
        assert_eq!(&f[13..], &7u64.to_le_bytes());
    }

    #[test]
    fn roundtrip_kinds() {
        let msgs = vec![
            Message::ShardAssign {
                worker_id: 2,
                points: Points::from_rows(&[vec![1.0, 2.0]]).unwrap(),
            },
            Message::ItemStatsUpload {
                items: vec![ItemStats {
                    key: ItemKey {
                        worker: 1,
                        within_index: 4,
                    },
                    size: 9,
                    mean: Vector::from_vec(vec![0.5, 1.5]),
                    second_moment: Matrix::identity(2, 2),
                }],
            },
            Message::LabelAssign {
                sample: 3,
                labels: Some(vec![(0, 5), (4, 1)]),
            },
            Message::LabelAssign {
                sample: 3,
                labels: None,
            },
            Message::Ack,
            Message::Error {
                code: 4,
                message: "boom".into(),
            },
        ];
        for m in msgs {
            let f = m.encode(correlation(5, 2)).unwrap();
            let (c, back) = Message::decode(&f).unwrap();
            assert_eq!(c, (5 << 32) | 2);
            assert_eq!(back, m);
        }
    }

    #[test]
    fn rejects_corrupt_frames() {
        let mut f = Message::Ack.encode(0).unwrap();
        f[4] = 200;
        assert!(Message::decode(&f).is_err());
        assert!(Message::decode(&f[..5]).is_err());
        let f = Message::LoglikReply { values: vec![1.0] }
            .encode(0)
            .unwrap();
        assert!(Message::decode(&f[..f.len() - 1]).is_err());
    }
}
