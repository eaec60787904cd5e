//! Message envelopes, their line-oriented JSON encoding, sequencing and
//! de-duplication, retransmission, and the channels that carry them.
//!
//! Delivery is at-least-once; receivers apply each `(sender, seq)` once.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{TcpStream, ToSocketAddrs};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::door::finite_or_null;
use crate::geo::GeoPoint;
use crate::ridership::{PunchRecord, Timestamp};
use crate::seed;

pub const DEFAULT_RETRANSMIT_INTERVAL_MS: u64 = 500;
pub const DEFAULT_MAX_RETRIES: u32 = 20;
/// Suggested pause before reconnecting a dropped socket.
pub const RECONNECT_HINT_MS: u64 = 1_000;

#[derive(Debug, Error)]
pub enum DecodeError {
    #[error("empty input")]
    Empty,
    #[error("not UTF-8: {0}")]
    Utf8(#[from] std::str::Utf8Error),
    #[error("malformed envelope: {0}")]
    Syntax(serde_json::Error),
    #[error("field `payload` does not match kind `{kind}`: {source}")]
    Payload { kind: Kind, source: serde_json::Error },
    #[error("field `{field}`: {reason}")]
    Invalid { field: &'static str, reason: String },
}

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("connection lost: {reason}; retry after {retry_after_ms} ms")]
    Disconnected { reason: String, retry_after_ms: u64 },
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("undecodable line from peer: {0}")]
    Decode(#[from] DecodeError),
    #[error("invalid channel configuration: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Kind {
    Telemetry,
    Punch,
    SeatBroadcast,
    Alert,
    Ack,
}

impl std::fmt::Display for Kind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Kind::Telemetry => "telemetry",
            Kind::Punch => "punch",
            Kind::SeatBroadcast => "seat_broadcast",
            Kind::Alert => "alert",
            Kind::Ack => "ack",
        })
    }
}

/// Periodic position and load report from a bus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TelemetryRecord {
    pub bus_id: String,
    pub position: GeoPoint,
    pub speed_mps: f64,
    pub occupancy: u32,
    pub seats_available: u32,
    pub ts: Timestamp,
}

impl TelemetryRecord {
    pub fn validate(&self) -> Result<(), DecodeError> {
        if !self.position.is_valid() {
            return Err(DecodeError::Invalid {
                field: "position",
                reason: format!("{:?} outside lat/lon bounds", self.position),
            });
        }
        if !(self.speed_mps.is_finite() && self.speed_mps >= 0.0) {
            return Err(DecodeError::Invalid {
                field: "speed_mps",
                reason: format!("{} is not a finite non-negative speed", self.speed_mps),
            });
        }
        Ok(())
    }
}

/// Seat count and arrival estimate pushed to a stop display.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeatBroadcast {
    pub stop_id: String,
    pub bus_id: String,
    pub seats_available: u32,
    pub eta_s: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alert {
    /// Event id of the door outcome this alert reports.
    pub alert_id: u64,
    pub bus_id: String,
    pub position: GeoPoint,
    #[serde(with = "finite_or_null")]
    pub distance_to_stop_m: f64,
}

/// Acknowledges envelope `(sender, seq)`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Ack {
    pub sender: String,
    pub seq: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    Telemetry(TelemetryRecord),
    Punch(PunchRecord),
    SeatBroadcast(SeatBroadcast),
    Alert(Alert),
    Ack(Ack),
}

impl Body {
    pub fn kind(&self) -> Kind {
        match self {
            Body::Telemetry(_) => Kind::Telemetry,
            Body::Punch(_) => Kind::Punch,
            Body::SeatBroadcast(_) => Kind::SeatBroadcast,
            Body::Alert(_) => Kind::Alert,
            Body::Ack(_) => Kind::Ack,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Envelope {
    pub seq: u64,
    pub sender: String,
    pub ts: Timestamp,
    pub body: Body,
}

impl Envelope {
    pub fn kind(&self) -> Kind {
        self.body.kind()
    }

    pub fn ack(&self, from: &str, ts: Timestamp, seq: u64) -> Envelope {
        Envelope {
            seq,
            sender: from.to_owned(),
            ts,
            body: Body::Ack(Ack {
                sender: self.sender.clone(),
                seq: self.seq,
            }),
        }
    }
}

#[derive(Serialize)]
#[serde(untagged)]
enum PayloadRef<'a> {
    Telemetry(&'a TelemetryRecord),
    Punch(&'a PunchRecord),
    SeatBroadcast(&'a SeatBroadcast),
    Alert(&'a Alert),
    Ack(&'a Ack),
}

#[derive(Serialize)]
struct WireOut<'a> {
    seq: u64,
    sender: &'a str,
    ts: Timestamp,
    kind: Kind,
    payload: PayloadRef<'a>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    seq: u64,
    sender: String,
    ts: Timestamp,
    kind: Kind,
    payload: serde_json::Value,
}

impl Serialize for Envelope {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let payload = match &self.body {
            Body::Telemetry(p) => PayloadRef::Telemetry(p),
            Body::Punch(p) => PayloadRef::Punch(p),
            Body::SeatBroadcast(p) => PayloadRef::SeatBroadcast(p),
            Body::Alert(p) => PayloadRef::Alert(p),
            Body::Ack(p) => PayloadRef::Ack(p),
        };
        WireOut {
            seq: self.seq,
            sender: &self.sender,
            ts: self.ts,
            kind: self.kind(),
            payload,
        }
        .serialize(s)
    }
}

impl TryFrom<WireIn> for Envelope {
    type Error = DecodeError;

    fn try_from(w: WireIn) -> Result<Self, DecodeError> {
        fn payload<T: serde::de::DeserializeOwned>(kind: Kind, v: serde_json::Value) -> Result<T, DecodeError> {
            serde_json::from_value(v).map_err(|source| DecodeError::Payload { kind, source })
        }
        let body = match w.kind {
            Kind::Telemetry => Body::Telemetry(payload(w.kind, w.payload)?),
            Kind::Punch => Body::Punch(payload(w.kind, w.payload)?),
            Kind::SeatBroadcast => Body::SeatBroadcast(payload(w.kind, w.payload)?),
            Kind::Alert => Body::Alert(payload(w.kind, w.payload)?),
            Kind::Ack => Body::Ack(payload(w.kind, w.payload)?),
        };
        if w.sender.is_empty() {
            return Err(DecodeError::Invalid {
                field: "sender",
                reason: "must not be empty".into(),
            });
        }
        Ok(Envelope {
            seq: w.seq,
            sender: w.sender,
            ts: w.ts,
            body,
        })
    }
}

impl<'de> Deserialize<'de> for Envelope {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let wire = WireIn::deserialize(d)?;
        Envelope::try_from(wire).map_err(serde::de::Error::custom)
    }
}

/// One line of UTF-8 JSON, fields `seq, sender, ts, kind, payload`, newline-terminated.
pub fn encode(envelope: &Envelope) -> Vec<u8> {
    let mut out = serde_json::to_vec(envelope).expect("envelopes always serialize");
    out.push(b'\n');
    out
}

/// Decodes one envelope line. A single trailing newline is accepted.
pub fn decode(bytes: &[u8]) -> Result<Envelope, DecodeError> {
    let text = std::str::from_utf8(bytes)?;
    let line = text.strip_suffix('\n').unwrap_or(text);
    let line = line.strip_suffix('\r').unwrap_or(line);
    if line.trim().is_empty() {
        return Err(DecodeError::Empty);
    }
    if line.contains('\n') {
        return Err(DecodeError::Invalid {
            field: "line",
            reason: "more than one line".into(),
        });
    }
    let wire: WireIn = serde_json::from_str(line).map_err(DecodeError::Syntax)?;
    Envelope::try_from(wire)
}

/// Decodes a concatenated newline-delimited stream.
pub fn decode_stream(bytes: &[u8]) -> Result<Vec<Envelope>, DecodeError> {
    bytes
        .split(|&b| b == b'\n')
        .filter(|l| !l.iter().all(u8::is_ascii_whitespace))
        .map(decode)
        .collect()
}

/// Allocates monotone sequence numbers for one sender.
#[derive(Debug, Clone)]
pub struct Sequencer {
    sender: String,
    next: u64,
}

impl Sequencer {
    pub fn new(sender: impl Into<String>) -> Self {
        Self {
            sender: sender.into(),
            next: 1,
        }
    }

    /// Resumes numbering at `first`, e.g. above anything issued before a restart.
    pub fn starting_at(sender: impl Into<String>, first: u64) -> Self {
        Self {
            sender: sender.into(),
            next: first.max(1),
        }
    }

    pub fn sender(&self) -> &str {
        &self.sender
    }

    pub fn next_seq(&mut self) -> u64 {
        let s = self.next;
        self.next += 1;
        s
    }

    pub fn envelope(&mut self, ts: Timestamp, body: Body) -> Envelope {
        Envelope {
            seq: self.next_seq(),
            sender: self.sender.clone(),
            ts,
            body,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
struct SenderWindow {
    /// Every seq at or below this has been applied.
    contiguous: u64,
    above: BTreeSet<u64>,
}

/// Receiver-side record of applied `(sender, seq)` pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct DedupState {
    senders: HashMap<String, SenderWindow>,
}

impl DedupState {
    /// True the first time `(sender, seq)` is seen, false for repeats.
    pub fn apply_once(&mut self, envelope: &Envelope) -> bool {
        self.apply_seq(&envelope.sender, envelope.seq)
    }

    pub fn apply_seq(&mut self, sender: &str, seq: u64) -> bool {
        let w = self.senders.entry(sender.to_owned()).or_default();
        if seq <= w.contiguous || !w.above.insert(seq) {
            return false;
        }
        while w.above.remove(&(w.contiguous + 1)) {
            w.contiguous += 1;
        }
        true
    }

    pub fn seen(&self, sender: &str, seq: u64) -> bool {
        self.senders
            .get(sender)
            .is_some_and(|w| seq <= w.contiguous || w.above.contains(&seq))
    }

    pub fn highest_applied(&self, sender: &str) -> Option<u64> {
        let w = self.senders.get(sender)?;
        w.above.last().copied().or((w.contiguous > 0).then_some(w.contiguous))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetransmitPolicy {
    pub interval_ms: u64,
    pub max_retries: u32,
}

impl Default for RetransmitPolicy {
    fn default() -> Self {
        Self {
            interval_ms: DEFAULT_RETRANSMIT_INTERVAL_MS,
            max_retries: DEFAULT_MAX_RETRIES,
        }
    }
}

#[derive(Debug, Clone)]
struct Pending {
    dest: String,
    envelope: Envelope,
    last_sent_ms: u64,
    retries: u32,
}

/// What a retransmission check decided.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RetransmitBatch {
    /// (destination, envelope) pairs to send again.
    pub resend: Vec<(String, Envelope)>,
    /// Envelopes that exhausted their retries.
    pub failed: Vec<(String, Envelope)>,
}

/// Unacknowledged envelopes of one sender with fixed-interval retransmission.
#[derive(Debug, Clone, Default)]
pub struct Outbox {
    policy: RetransmitPolicy,
    pending: BTreeMap<u64, Pending>,
}

impl Outbox {
    pub fn new(policy: RetransmitPolicy) -> Self {
        Self {
            policy,
            pending: BTreeMap::new(),
        }
    }

    pub fn track(&mut self, dest: &str, envelope: Envelope, now_ms: u64) {
        self.pending.insert(
            envelope.seq,
            Pending {
                dest: dest.to_owned(),
                envelope,
                last_sent_ms: now_ms,
                retries: 0,
            },
        );
    }

    /// Clears `seq`. Returns whether it was outstanding.
    pub fn ack(&mut self, seq: u64) -> bool {
        self.pending.remove(&seq).is_some()
    }

    pub fn len(&self) -> usize {
        self.pending.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pending.is_empty()
    }

    pub fn next_due_ms(&self) -> Option<u64> {
        self.pending
            .values()
            .map(|p| p.last_sent_ms + self.policy.interval_ms)
            .min()
    }

    /// Envelopes whose interval elapsed without an ack, in seq order.
    pub fn due(&mut self, now_ms: u64) -> RetransmitBatch {
        let mut batch = RetransmitBatch::default();
        let interval = self.policy.interval_ms;
        let max = self.policy.max_retries;
        self.pending.retain(|_, p| {
            if now_ms < p.last_sent_ms + interval {
                return true;
            }
            if p.retries >= max {
                batch.failed.push((p.dest.clone(), p.envelope.clone()));
                return false;
            }
            p.retries += 1;
            p.last_sent_ms = now_ms;
            batch.resend.push((p.dest.clone(), p.envelope.clone()));
            true
        });
        batch
    }
}

/// Send and receive envelopes.
pub trait Channel {
    fn send(&mut self, now_ms: u64, envelope: &Envelope) -> Result<(), TransportError>;
    /// Envelopes that have arrived by `now_ms`, in arrival order.
    fn poll(&mut self, now_ms: u64) -> Result<Vec<Envelope>, TransportError>;
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ChannelConfig {
    pub loss_probability: f64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
    pub seed: u64,
}

impl Default for ChannelConfig {
    fn default() -> Self {
        Self {
            loss_probability: 0.0,
            latency_min_ms: 20,
            latency_max_ms: 80,
            seed: 0,
        }
    }
}

impl ChannelConfig {
    pub fn validate(&self) -> Result<(), TransportError> {
        if !(0.0..=1.0).contains(&self.loss_probability) {
            return Err(TransportError::Config(format!(
                "loss_probability {} outside [0, 1]",
                self.loss_probability
            )));
        }
        if self.latency_min_ms > self.latency_max_ms {
            return Err(TransportError::Config(format!(
                "latency_min_ms {} exceeds latency_max_ms {}",
                self.latency_min_ms, self.latency_max_ms
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SendOutcome {
    Dropped,
    Scheduled { deliver_at_ms: u64 },
}

/// Lossy, delayed, seeded in-memory channel.
#[derive(Debug, Clone)]
pub struct SimChannel {
    config: ChannelConfig,
    rng: ChaCha8Rng,
    /// Min-heap on (deliver time, send order).
    in_flight: BinaryHeap<Reverse<(u64, u64)>>,
    envelopes: BTreeMap<u64, Envelope>,
    sent: u64,
}

impl SimChannel {
    pub fn new(config: ChannelConfig) -> Result<Self, TransportError> {
        config.validate()?;
        Ok(Self {
            rng: seed::rng(config.seed),
            config,
            in_flight: BinaryHeap::new(),
            envelopes: BTreeMap::new(),
            sent: 0,
        })
    }

    pub fn config(&self) -> &ChannelConfig {
        &self.config
    }

    pub fn send_traced(&mut self, now_ms: u64, envelope: &Envelope) -> SendOutcome {
        // Both draws happen for every send so loss never shifts latencies.
        let lost = self.rng.random::<f64>() < self.config.loss_probability;
        let latency = self
            .rng
            .random_range(self.config.latency_min_ms..=self.config.latency_max_ms);
        if lost {
            return SendOutcome::Dropped;
        }
        let order = self.sent;
        self.sent += 1;
        let deliver_at_ms = now_ms + latency;
        self.in_flight.push(Reverse((deliver_at_ms, order)));
        self.envelopes.insert(order, envelope.clone());
        SendOutcome::Scheduled { deliver_at_ms }
    }

    pub fn next_delivery_ms(&self) -> Option<u64> {
        self.in_flight.peek().map(|Reverse((t, _))| *t)
    }

    pub fn in_flight(&self) -> usize {
        self.in_flight.len()
    }

    pub fn deliver_due(&mut self, now_ms: u64) -> Vec<Envelope> {
        let mut out = Vec::new();
        while let Some(Reverse((t, order))) = self.in_flight.peek().copied() {
            if t > now_ms {
                break;
            }
            self.in_flight.pop();
            out.push(self.envelopes.remove(&order).expect("scheduled envelope present"));
        }
        out
    }
}

impl Channel for SimChannel {
    fn send(&mut self, now_ms: u64, envelope: &Envelope) -> Result<(), TransportError> {
        self.send_traced(now_ms, envelope);
        Ok(())
    }

    fn poll(&mut self, now_ms: u64) -> Result<Vec<Envelope>, TransportError> {
        Ok(self.deliver_due(now_ms))
    }
}

/// Newline-delimited JSON over a TCP stream. Ordered; no loss short of a
/// disconnect.
#[derive(Debug)]
pub struct SocketChannel {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    partial: Vec<u8>,
}

fn disconnected(reason: impl Into<String>) -> TransportError {
    TransportError::Disconnected {
        reason: reason.into(),
        retry_after_ms: RECONNECT_HINT_MS,
    }
}

impl SocketChannel {
    pub fn connect(addr: impl ToSocketAddrs) -> Result<Self, TransportError> {
        let stream = TcpStream::connect(addr).map_err(|e| disconnected(e.to_string()))?;
        Self::from_stream(stream)
    }

    pub fn from_stream(stream: TcpStream) -> Result<Self, TransportError> {
        stream.set_nodelay(true)?;
        let reader = BufReader::new(stream.try_clone()?);
        Ok(Self {
            writer: stream,
            reader,
            partial: Vec::new(),
        })
    }

    /// Blocks until one envelope arrives.
    pub fn recv_blocking(&mut self) -> Result<Envelope, TransportError> {
        self.reader.get_ref().set_nonblocking(false)?;
        loop {
            let n = self.reader.read_until(b'\n', &mut self.partial)?;
            if n == 0 {
                return Err(disconnected("peer closed the connection"));
            }
            if self.partial.ends_with(b"\n") {
                let line = std::mem::take(&mut self.partial);
                if line.iter().all(u8::is_ascii_whitespace) {
                    continue;
                }
                return Ok(decode(&line)?);
            }
        }
    }
}

impl Channel for SocketChannel {
    fn send(&mut self, _now_ms: u64, envelope: &Envelope) -> Result<(), TransportError> {
        self.writer
            .write_all(&encode(envelope))
            .and_then(|()| self.writer.flush())
            .map_err(|e| disconnected(e.to_string()))
    }

    fn poll(&mut self, _now_ms: u64) -> Result<Vec<Envelope>, TransportError> {
        self.reader.get_ref().set_nonblocking(true)?;
        let mut buf = [0u8; 4096];
        let mut out = Vec::new();
        loop {
            match self.reader.read(&mut buf) {
                Ok(0) => {
                    if out.is_empty() {
                        return Err(disconnected("peer closed the connection"));
                    }
                    break;
                }
                Ok(n) => self.partial.extend_from_slice(&buf[..n]),
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => break,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => continue,
                Err(e) => return Err(disconnected(e.to_string())),
            }
            while let Some(pos) = self.partial.iter().position(|&b| b == b'\n') {
                let line: Vec<u8> = self.partial.drain(..=pos).collect();
                if !line.iter().all(u8::is_ascii_whitespace) {
                    out.push(decode(&line)?);
                }
            }
        }
        Ok(out)
    }
}
