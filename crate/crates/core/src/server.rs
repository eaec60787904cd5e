//! Telemetry store behind the data server.
//!
//! Every applied envelope is appended to a newline-delimited JSON log; all
//! indices are derived from that log and rebuilt from it on boot.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Seek, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{Polyline, StopRegistry};
use crate::netproto::{self, Alert, Body, DecodeError, DedupState, Envelope, Kind, SeatBroadcast, TelemetryRecord};
use crate::ridership::{self, Direction, Granularity, PunchRecord, RidershipBucket, RidershipError, Timestamp};

/// Telemetry points in the rolling speed mean.
pub const SPEED_WINDOW: usize = 5;
/// Mean speeds below this (a dwelling bus) fall back to the default speed.
pub const MIN_ETA_SPEED_MPS: f64 = 0.5;
pub const DEFAULT_BUS_SPEED_MPS: f64 = 8.0;
pub const SERVER_SENDER: &str = "server";

#[derive(Debug, Error)]
pub enum IngestError {
    #[error("kind `{0}` is not accepted for ingestion")]
    UnsupportedKind(Kind),
    #[error(transparent)]
    Invalid(#[from] DecodeError),
    #[error("log write failed: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("log i/o: {0}")]
    Io(#[from] io::Error),
    #[error("log line {line}: {source}")]
    Corrupt { line: usize, source: DecodeError },
    #[error("log line {line}: {source}")]
    Rejected { line: usize, source: IngestError },
}

#[derive(Debug, Error, PartialEq)]
pub enum QueryError {
    #[error("unknown bus {0}")]
    UnknownBus(String),
    #[error("unknown stop {0}")]
    UnknownStop(String),
    #[error("no route is configured for bus {0}")]
    NoRoute(String),
    #[error("stop {stop} is {offset_m:.1} m off the route of bus {bus}")]
    OffRoute { bus: String, stop: String, offset_m: f64 },
    #[error("stop {stop} is behind bus {bus}")]
    StopBehind { bus: String, stop: String },
}

#[derive(Debug, Error, PartialEq)]
pub enum ReportError {
    #[error("admin credential required")]
    Unauthorized,
    #[error(transparent)]
    Ridership(#[from] RidershipError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Admin,
    User,
}

/// `role:secret` pairs, one per line.
#[derive(Debug, Clone, Default)]
pub struct Credentials {
    entries: Vec<(Role, String)>,
}

impl Credentials {
    pub fn parse(text: &str) -> Result<Self, String> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (role, secret) = line
                .split_once(':')
                .ok_or_else(|| format!("line {}: expected role:secret", i + 1))?;
            let role = match role.trim() {
                "admin" => Role::Admin,
                "user" => Role::User,
                other => return Err(format!("line {}: unknown role {other:?}", i + 1)),
            };
            let secret = secret.trim();
            if secret.is_empty() {
                return Err(format!("line {}: empty secret", i + 1));
            }
            entries.push((role, secret.to_owned()));
        }
        Ok(Self { entries })
    }

    pub fn role_of(&self, secret: &str) -> Option<Role> {
        self.entries.iter().find(|(_, s)| s == secret).map(|(r, _)| *r)
    }
}

#[derive(Debug, Clone)]
pub struct RouteInfo {
    pub polyline: Polyline,
    pub circular: bool,
}

#[derive(Debug, Clone)]
pub struct BusInfo {
    pub route: String,
    pub capacity: u32,
}

/// Static topology the server answers route questions against.
#[derive(Debug, Clone)]
pub struct Network {
    pub routes: BTreeMap<String, RouteInfo>,
    pub stops: StopRegistry,
    pub buses: BTreeMap<String, BusInfo>,
    pub default_speed_mps: f64,
}

impl Default for Network {
    fn default() -> Self {
        Self {
            routes: BTreeMap::new(),
            stops: StopRegistry::default(),
            buses: BTreeMap::new(),
            default_speed_mps: DEFAULT_BUS_SPEED_MPS,
        }
    }
}

impl Network {
    /// Stops within their proximity radius of the bus's route, in route order.
    pub fn stops_on_route(&self, bus_id: &str) -> Vec<&str> {
        let Some(route) = self.buses.get(bus_id).and_then(|b| self.routes.get(&b.route)) else {
            return Vec::new();
        };
        let mut on: Vec<(f64, &str)> = self
            .stops
            .stops()
            .iter()
            .filter_map(|s| {
                let p = route.polyline.project(&s.position);
                (p.offset_m <= s.proximity_radius_m).then_some((p.along_m, s.id.as_str()))
            })
            .collect();
        on.sort_by(|a, b| a.0.total_cmp(&b.0));
        on.into_iter().map(|(_, id)| id).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct IngestOutcome {
    /// False when the envelope was a duplicate and nothing changed.
    pub applied: bool,
    pub ack: Envelope,
}

#[derive(Debug, Default)]
pub struct Store {
    network: Network,
    log: Vec<Envelope>,
    sink: Option<File>,
    dedup: DedupState,
    /// Telemetry per bus sorted by ts; equal ts keep arrival order.
    telemetry: BTreeMap<String, Vec<TelemetryRecord>>,
    punches: Vec<PunchRecord>,
    /// Boards minus exits per bus. Counting commutes, so arrival order is irrelevant.
    onboard: BTreeMap<String, i64>,
    alerts: Vec<Alert>,
}

impl Store {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            ..Self::default()
        }
    }

    /// Opens (or creates) a log file, replays it, and appends to it afterwards.
    /// A torn final line left by a crash is cut off.
    pub fn open(path: &Path, network: Network) -> Result<Self, StoreError> {
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(path)?;
        let mut store = Self::new(network);
        let good_len = store.replay(&mut file)?;
        if file.metadata()?.len() != good_len {
            file.set_len(good_len)?;
        }
        if good_len > 0 {
            let mut last = [0u8];
            file.seek(io::SeekFrom::Start(good_len - 1))?;
            file.read_exact(&mut last)?;
            if last[0] != b'\n' {
                file.write_all(b"\n")?;
            }
        }
        file.seek(io::SeekFrom::End(0))?;
        store.sink = Some(file);
        Ok(store)
    }

    /// Rebuilds indices from log lines. Returns the byte length of the intact prefix.
    pub fn replay(&mut self, mut reader: impl Read) -> Result<u64, StoreError> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        let mut good = 0usize;
        for (i, line) in bytes.split_inclusive(|&b| b == b'\n').enumerate() {
            let complete = line.ends_with(b"\n");
            if line.iter().all(u8::is_ascii_whitespace) {
                good += line.len();
                continue;
            }
            match netproto::decode(line) {
                Ok(env) => {
                    self.apply(env, false)
                        .map_err(|source| StoreError::Rejected { line: i + 1, source })?;
                    good += line.len();
                }
                // Torn tail from a crash mid-append.
                Err(_) if !complete => break,
                Err(source) => return Err(StoreError::Corrupt { line: i + 1, source }),
            }
        }
        Ok(good as u64)
    }

    pub fn network(&self) -> &Network {
        &self.network
    }

    pub fn log(&self) -> &[Envelope] {
        &self.log
    }

    pub fn alerts(&self) -> &[Alert] {
        &self.alerts
    }

    pub fn punches(&self) -> &[PunchRecord] {
        &self.punches
    }

    pub fn ingest(&mut self, envelope: Envelope, now: Timestamp) -> Result<IngestOutcome, IngestError> {
        let ack = envelope.ack(SERVER_SENDER, now, 0);
        let applied = self.apply(envelope, true)?;
        Ok(IngestOutcome { applied, ack })
    }

    fn apply(&mut self, envelope: Envelope, persist: bool) -> Result<bool, IngestError> {
        match &envelope.body {
            Body::Telemetry(t) => t.validate()?,
            Body::Punch(_) | Body::Alert(_) => {}
            Body::SeatBroadcast(_) | Body::Ack(_) => return Err(IngestError::UnsupportedKind(envelope.kind())),
        }
        if self.dedup.seen(&envelope.sender, envelope.seq) {
            return Ok(false);
        }
        if persist {
            if let Some(sink) = self.sink.as_mut() {
                sink.write_all(&netproto::encode(&envelope))?;
                sink.flush()?;
            }
        }
        self.dedup.apply_once(&envelope);
        match &envelope.body {
            Body::Telemetry(t) => {
                let series = self.telemetry.entry(t.bus_id.clone()).or_default();
                let at = series.partition_point(|r| r.ts <= t.ts);
                series.insert(at, t.clone());
            }
            Body::Punch(p) => {
                *self.onboard.entry(p.bus_id.clone()).or_default() += match p.direction {
                    Direction::Board => 1,
                    Direction::Exit => -1,
                };
                self.punches.push(p.clone());
            }
            Body::Alert(a) => self.alerts.push(a.clone()),
            Body::SeatBroadcast(_) | Body::Ack(_) => unreachable!("rejected above"),
        }
        self.log.push(envelope);
        Ok(true)
    }

    pub fn buses(&self) -> impl Iterator<Item = &str> {
        self.telemetry.keys().map(String::as_str)
    }

    /// Telemetry with the highest ts for the bus.
    pub fn latest_location(&self, bus_id: &str) -> Result<&TelemetryRecord, QueryError> {
        self.telemetry
            .get(bus_id)
            .and_then(|s| s.last())
            .ok_or_else(|| QueryError::UnknownBus(bus_id.to_owned()))
    }

    /// Boards minus exits received for the bus. Negative while an exit has
    /// overtaken its board on the wire.
    pub fn net_boardings(&self, bus_id: &str) -> i64 {
        self.onboard.get(bus_id).copied().unwrap_or(0)
    }

    pub fn occupancy(&self, bus_id: &str) -> u32 {
        self.net_boardings(bus_id).clamp(0, i64::from(u32::MAX)) as u32
    }

    /// Seats from configured capacity and received punches, else the last telemetry figure.
    pub fn seats_available(&self, bus_id: &str) -> Option<u32> {
        match self.network.buses.get(bus_id) {
            Some(info) => Some(info.capacity.saturating_sub(self.occupancy(bus_id))),
            None => self.latest_location(bus_id).ok().map(|t| t.seats_available),
        }
    }

    /// Mean reported speed over the last few points, or the default speed.
    pub fn rolling_speed_mps(&self, bus_id: &str) -> f64 {
        let series = self.telemetry.get(bus_id).map(Vec::as_slice).unwrap_or_default();
        let window = &series[series.len().saturating_sub(SPEED_WINDOW)..];
        if window.len() < 2 {
            return self.network.default_speed_mps;
        }
        let mean = window.iter().map(|r| r.speed_mps).sum::<f64>() / window.len() as f64;
        if mean < MIN_ETA_SPEED_MPS {
            self.network.default_speed_mps
        } else {
            mean
        }
    }

    /// Along-route distance from the bus's latest position to the stop.
    pub fn remaining_distance_m(&self, bus_id: &str, stop_id: &str) -> Result<f64, QueryError> {
        let latest = self.latest_location(bus_id)?;
        let stop = self
            .network
            .stops
            .get(stop_id)
            .ok_or_else(|| QueryError::UnknownStop(stop_id.to_owned()))?;
        let route = self
            .network
            .buses
            .get(bus_id)
            .and_then(|b| self.network.routes.get(&b.route))
            .ok_or_else(|| QueryError::NoRoute(bus_id.to_owned()))?;
        let stop_proj = route.polyline.project(&stop.position);
        if stop_proj.offset_m > stop.proximity_radius_m {
            return Err(QueryError::OffRoute {
                bus: bus_id.to_owned(),
                stop: stop_id.to_owned(),
                offset_m: stop_proj.offset_m,
            });
        }
        let bus_along = route.polyline.project(&latest.position).along_m;
        let remaining = stop_proj.along_m - bus_along;
        if route.circular {
            return Ok(remaining.rem_euclid(route.polyline.length_m()));
        }
        if remaining < -stop.proximity_radius_m {
            return Err(QueryError::StopBehind {
                bus: bus_id.to_owned(),
                stop: stop_id.to_owned(),
            });
        }
        Ok(remaining.max(0.0))
    }

    pub fn eta_seconds(&self, bus_id: &str, stop_id: &str) -> Result<f64, QueryError> {
        let remaining = self.remaining_distance_m(bus_id, stop_id)?;
        if remaining == 0.0 {
            return Ok(0.0);
        }
        Ok(remaining / self.rolling_speed_mps(bus_id))
    }

    /// Seat broadcasts for every stop on the bus's route.
    pub fn seat_broadcasts(&self, bus_id: &str) -> Vec<SeatBroadcast> {
        let Some(seats) = self.seats_available(bus_id) else {
            return Vec::new();
        };
        self.network
            .stops_on_route(bus_id)
            .into_iter()
            .map(|stop_id| SeatBroadcast {
                stop_id: stop_id.to_owned(),
                bus_id: bus_id.to_owned(),
                seats_available: seats,
                eta_s: self.eta_seconds(bus_id, stop_id).ok(),
            })
            .collect()
    }

    pub fn passenger_report(
        &self,
        credential: Option<Role>,
        start: Timestamp,
        end: Timestamp,
        granularity: Granularity,
    ) -> Result<Vec<RidershipBucket>, ReportError> {
        if credential != Some(Role::Admin) {
            return Err(ReportError::Unauthorized);
        }
        Ok(ridership::aggregate(&self.punches, start, end, granularity)?)
    }

    /// Answers to every query the store supports, for replay comparison.
    pub fn snapshot(&self) -> QuerySnapshot {
        let mut buses: BTreeSet<&str> = self.telemetry.keys().map(String::as_str).collect();
        buses.extend(self.onboard.keys().map(String::as_str));
        buses.extend(self.network.buses.keys().map(String::as_str));
        let mut out = QuerySnapshot {
            log_len: self.log.len(),
            alerts: self.alerts.len(),
            ..QuerySnapshot::default()
        };
        for bus in buses {
            out.latest
                .insert(bus.to_owned(), self.latest_location(bus).ok().cloned());
            out.occupancy.insert(bus.to_owned(), self.occupancy(bus));
            for stop in self.network.stops.stops() {
                let eta = self.eta_seconds(bus, &stop.id).map_err(|e| e.to_string());
                out.eta.insert(format!("{bus}->{}", stop.id), eta);
            }
        }
        if let (Some(first), Some(last)) = (
            self.punches.iter().map(|p| p.timestamp).min(),
            self.punches.iter().map(|p| p.timestamp).max(),
        ) {
            out.hourly = self
                .passenger_report(Some(Role::Admin), first, last + 1, Granularity::Hourly)
                .unwrap_or_default();
        }
        out
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct QuerySnapshot {
    pub log_len: usize,
    pub alerts: usize,
    pub latest: BTreeMap<String, Option<TelemetryRecord>>,
    pub occupancy: BTreeMap<String, u32>,
    pub eta: BTreeMap<String, Result<f64, String>>,
    pub hourly: Vec<RidershipBucket>,
}
