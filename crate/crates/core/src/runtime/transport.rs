//! Frame transports and the metered endpoint wrapping them.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::error::{Error, Result};

use super::wire::{handshake_bytes, Kind, Message, HEADER_LEN, MAX_FRAME};

/// Moves whole frames between two peers, in order.
pub trait Transport: Send {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()>;
    fn recv_frame(&mut self) -> Result<Vec<u8>>;
}

/// In-process duplex channel.
pub struct InProcTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
}

impl InProcTransport {
    pub fn pair() -> (InProcTransport, InProcTransport) {
        let (a_tx, b_rx) = channel();
        let (b_tx, a_rx) = channel();
        (
            InProcTransport { tx: a_tx, rx: a_rx },
            InProcTransport { tx: b_tx, rx: b_rx },
        )
    }
}

impl Transport for InProcTransport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.tx
            .send(frame)
            .map_err(|_| Error::Transport("peer hung up".into()))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        self.rx
            .recv()
            .map_err(|_| Error::Transport("peer hung up".into()))
    }
}

/// Length-prefixed frames over a TCP stream.
pub struct TcpTransport {
    stream: TcpStream,
}

fn io_err(what: &str, e: std::io::Error) -> Error {
    Error::Transport(format!("{what}: {e}"))
}

impl TcpTransport {
    /// Connects to a listening worker and exchanges the protocol header.
    pub fn connect(addr: impl ToSocketAddrs + std::fmt::Debug) -> Result<Self> {
        let stream =
            TcpStream::connect(&addr).map_err(|e| io_err(&format!("connecting to {addr:?}"), e))?;
        Self::handshake(stream)
    }

    /// Accepts one master connection.
    pub fn accept(listener: &TcpListener) -> Result<Self> {
        let (stream, _) = listener
            .accept()
            .map_err(|e| io_err("accepting connection", e))?;
        Self::handshake(stream)
    }

    fn handshake(mut stream: TcpStream) -> Result<Self> {
        stream
            .set_nodelay(true)
            .map_err(|e| io_err("configuring socket", e))?;
        let ours = handshake_bytes();
        stream
            .write_all(&ours)
            .map_err(|e| io_err("sending handshake", e))?;
        let mut theirs = [0; 6];
        stream
            .read_exact(&mut theirs)
            .map_err(|e| io_err("reading handshake", e))?;
        if theirs != ours {
            return Err(Error::Transport(format!(
                "peer speaks {:?}, expected {:?}",
                theirs, ours
            )));
        }
        Ok(TcpTransport { stream })
    }
}

impl Transport for TcpTransport {
    fn send_frame(&mut self, frame: Vec<u8>) -> Result<()> {
        self.stream
            .write_all(&frame)
            .map_err(|e| io_err("sending frame", e))
    }

    fn recv_frame(&mut self) -> Result<Vec<u8>> {
        let mut len = [0; 4];
        self.stream
            .read_exact(&mut len)
            .map_err(|e| io_err("reading frame length", e))?;
        let body = u32::from_le_bytes(len) as usize;
        if !(HEADER_LEN - 4..=MAX_FRAME).contains(&body) {
            return Err(Error::Transport(format!("invalid frame length {body}")));
        }
        let mut frame = vec![0; 4 + body];
        frame[..4].copy_from_slice(&len);
        self.stream
            .read_exact(&mut frame[4..])
            .map_err(|e| io_err("reading frame body", e))?;
        Ok(frame)
    }
}

/// Message and byte totals for one kind.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, serde::Serialize)]
pub struct Traffic {
    pub messages: u64,
    pub bytes: u64,
}

/// Per-kind traffic seen by one endpoint.
#[derive(Debug, Clone, Default, PartialEq, Eq, serde::Serialize)]
pub struct Meter {
    pub sent: BTreeMap<Kind, Traffic>,
    pub received: BTreeMap<Kind, Traffic>,
}

impl Meter {
    fn record(map: &mut BTreeMap<Kind, Traffic>, kind: Kind, bytes: usize) {
        let t = map.entry(kind).or_default();
        t.messages += 1;
        t.bytes += bytes as u64;
    }

    pub fn merge(&mut self, other: &Meter) {
        for (mine, theirs) in [
            (&mut self.sent, &other.sent),
            (&mut self.received, &other.received),
        ] {
            for (k, t) in theirs {
                let e = mine.entry(*k).or_default();
                e.messages += t.messages;
                e.bytes += t.bytes;
            }
        }
    }

    /// Bytes received for the kinds selected by `pick`.
    pub fn received_bytes(&self, pick: impl Fn(Kind) -> bool) -> u64 {
        self.received
            .iter()
            .filter(|(k, _)| pick(**k))
            .map(|(_, t)| t.bytes)
            .sum()
    }
}

/// Typed, metered message endpoint over any transport.
pub struct Endpoint {
    transport: Box<dyn Transport>,
    meter: Meter,
    shard_sealed: bool,
}

impl Endpoint {
    pub fn new(transport: impl Transport + 'static) -> Self {
        Endpoint {
            transport: Box::new(transport),
            meter: Meter::default(),
            shard_sealed: false,
        }
    }

    /// Sends a message. Raw rows may only travel before anything else.
    pub fn send(&mut self, correlation: u64, msg: &Message) -> Result<()> {
        let kind = msg.kind();
        if kind == Kind::ShardAssign && self.shard_sealed {
            return Err(Error::Transport(
                "raw rows may only be sent before any other message".into(),
            ));
        }
        if kind != Kind::ShardAssign {
            self.shard_sealed = true;
        }
        let frame = msg.encode(correlation)?;
        Meter::record(&mut self.meter.sent, kind, frame.len());
        self.transport.send_frame(frame)
    }

    pub fn recv(&mut self) -> Result<(u64, Message)> {
        let frame = self.transport.recv_frame()?;
        let (corr, msg) = Message::decode(&frame)?;
        Meter::record(&mut self.meter.received, msg.kind(), frame.len());
        Ok((corr, msg))
    }

    pub fn meter(&self) -> &Meter {
        &self.meter
    }
}
