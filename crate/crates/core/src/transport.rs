//! Simulated message passing between clients and the three servers.
//!
//! The network is round-synchronous: protocol code sends all messages of a
//! round, then calls [`Network::advance_round`]. Channels are reliable and
//! FIFO per ordered pair. A party reads its inbox only through the
//! [`EndpointKey`] handed out at registration.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::fmt;
use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::abb::CostLedger;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum PartyId {
    Server(u8),
    Client(u16),
}

impl fmt::Display for PartyId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            PartyId::Server(i) => write!(f, "S{i}"),
            PartyId::Client(i) => write!(f, "C{i}"),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum TransportError {
    #[error("unknown endpoint {0}")]
    UnknownEndpoint(PartyId),
    #[error("endpoint {0} registered twice")]
    DuplicateEndpoint(PartyId),
    #[error("no message for {to} from {from}")]
    Empty { from: PartyId, to: PartyId },
}

/// Capability to read one endpoint's inbox. Not `Clone`.
#[derive(Debug)]
pub struct EndpointKey {
    id: PartyId,
}

impl EndpointKey {
    pub fn id(&self) -> PartyId {
        self.id
    }
}

#[derive(Debug, Default)]
struct Endpoint {
    inbox: HashMap<PartyId, VecDeque<Vec<u8>>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TranscriptRecord {
    pub round: u64,
    pub from: PartyId,
    pub to: PartyId,
    pub byte_len: usize,
    pub step_label: String,
}

#[derive(Debug, Default)]
pub struct Network {
    endpoints: BTreeMap<PartyId, Endpoint>,
    round: u64,
    bytes_sent: BTreeMap<PartyId, u64>,
    transcript: Vec<TranscriptRecord>,
    record_transcript: bool,
    tap: Option<PartyId>,
    tapped: Vec<(PartyId, Vec<u8>)>,
}

impl Network {
    pub fn new() -> Self {
        Self {
            record_transcript: true,
            ..Self::default()
        }
    }

    /// Keep only byte counters; long simulations would otherwise hold millions of records.
    pub fn without_transcript() -> Self {
        Self::default()
    }

    pub fn register(&mut self, id: PartyId) -> Result<EndpointKey, TransportError> {
        if self.endpoints.contains_key(&id) {
            return Err(TransportError::DuplicateEndpoint(id));
        }
        self.endpoints.insert(id, Endpoint::default());
        Ok(EndpointKey { id })
    }

    pub fn send(
        &mut self,
        from: &EndpointKey,
        to: PartyId,
        payload: Vec<u8>,
        step_label: &str,
    ) -> Result<(), TransportError> {
        let len = payload.len();
        let dest = self
            .endpoints
            .get_mut(&to)
            .ok_or(TransportError::UnknownEndpoint(to))?;
        if self.tap == Some(to) {
            self.tapped.push((from.id, payload.clone()));
        }
        dest.inbox.entry(from.id).or_default().push_back(payload);
        *self.bytes_sent.entry(from.id).or_default() += len as u64;
        if self.record_transcript {
            self.transcript.push(TranscriptRecord {
                round: self.round,
                from: from.id,
                to,
                byte_len: len,
                step_label: step_label.to_string(),
            });
        }
        Ok(())
    }

    pub fn recv(&mut self, me: &EndpointKey, from: PartyId) -> Result<Vec<u8>, TransportError> {
        let ep = self
            .endpoints
            .get_mut(&me.id)
            .ok_or(TransportError::UnknownEndpoint(me.id))?;
        ep.inbox
            .get_mut(&from)
            .and_then(VecDeque::pop_front)
            .ok_or(TransportError::Empty { from, to: me.id })
    }

    pub fn pending(&self, me: &EndpointKey) -> usize {
        self.endpoints
            .get(&me.id)
            .map(|ep| ep.inbox.values().map(VecDeque::len).sum())
            .unwrap_or(0)
    }

    /// Keep a copy of every payload delivered to `id` (a view of that party's incoming traffic).
    pub fn tap(&mut self, id: PartyId) {
        self.tap = Some(id);
        self.tapped.clear();
    }

    pub fn tapped(&self) -> &[(PartyId, Vec<u8>)] {
        &self.tapped
    }

    pub fn advance_round(&mut self) {
        self.round += 1;
    }

    pub fn round(&self) -> u64 {
        self.round
    }

    pub fn bytes_sent(&self, id: PartyId) -> u64 {
        self.bytes_sent.get(&id).copied().unwrap_or(0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.bytes_sent.values().sum()
    }

    pub fn transcript(&self) -> &[TranscriptRecord] {
        &self.transcript
    }

    /// One JSON record per line.
    pub fn write_transcript<W: Write>(&self, mut out: W) -> std::io::Result<()> {
        for rec in &self.transcript {
            serde_json::to_writer(&mut out, rec)?;
            out.write_all(b"\n")?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    /// bits per second
    pub bandwidth: f64,
    /// one-way delay in seconds
    pub delay: f64,
}

impl LatencyModel {
    pub fn new(bandwidth: f64, delay: f64) -> Option<Self> {
        (bandwidth > 0.0 && delay >= 0.0).then_some(Self { bandwidth, delay })
    }

    /// 1 Gbps, 1 ms.
    pub fn lan() -> Self {
        Self {
            bandwidth: 1.0e9,
            delay: 1.0e-3,
        }
    }

    /// 200 Mbps, 20 ms.
    pub fn wan() -> Self {
        Self {
            bandwidth: 200.0e6,
            delay: 20.0e-3,
        }
    }
}

/// `rounds · 2 · delay + max_party_bytes · 8 / bandwidth`, in seconds.
pub fn estimate_walltime(ledger: &CostLedger, model: &LatencyModel) -> f64 {
    let max_bytes = ledger.max_party_bytes() as f64;
    ledger.rounds as f64 * 2.0 * model.delay + max_bytes * 8.0 / model.bandwidth
}
