//! Deterministic discrete-event simulation of buses, the server and stop
//! displays over seeded lossy channels.
//!
//! Time is integer milliseconds from scenario start. All randomness is drawn
//! from seeds derived from the scenario's root seed, so a scenario always
//! produces the same event log.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::io;
use std::path::PathBuf;

use rand::Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use thiserror::Error;

use crate::door::{DoorOpenKind, DoorState};
use crate::geo::{default_proximity_radius, GeoPoint, Polyline, Stop, StopRegistry};
use crate::metrics::ConfusionMatrix;
use crate::netproto::{
    Alert, Body, ChannelConfig, Envelope, Outbox, RetransmitPolicy, SendOutcome, Sequencer, SimChannel,
};
use crate::perception::{ObjectClass, PipelineConfig, TallyLine, TruthObject};
use crate::ridership::{BusLedger, RidershipError, Timestamp};
use crate::seed;
use crate::server::{BusInfo, Network, RouteInfo, Store, StoreError, DEFAULT_BUS_SPEED_MPS};
use crate::stopnode::{ApplyOutcome, DisplayState};

pub const SCENARIO_VERSION: u32 = 1;
/// 2024-01-01T08:00:00Z.
pub const DEFAULT_START_EPOCH_MS: Timestamp = 1_704_096_000_000;
/// A bus at a stop that never recognises the sign gives up after this long.
pub const STOP_SIGN_TIMEOUT_MS: u64 = 5_000;
const HOUR_MS: u64 = 3_600_000;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario is not valid JSON: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("{}", .0.join("\n"))]
    Invalid(Vec<String>),
}

#[derive(Debug, Error)]
pub enum SimError {
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
    #[error("server log: {0}")]
    Store(#[from] StoreError),
    #[error("i/o: {0}")]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RouteSpec {
    pub id: String,
    pub points: Vec<GeoPoint>,
    /// Circular routes wrap from the last point back to the first.
    #[serde(default)]
    pub circular: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SpeedChange {
    pub at_s: f64,
    pub speed_mps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BusSpec {
    pub id: String,
    pub route: String,
    pub capacity: u32,
    #[serde(default)]
    pub standing_allowed: bool,
    #[serde(default = "default_speed")]
    pub speed_mps: f64,
    /// Cruise speed changes over time, sorted by `at_s`.
    #[serde(default)]
    pub speed_schedule: Vec<SpeedChange>,
    #[serde(default)]
    pub depart_s: f64,
    #[serde(default = "default_dwell")]
    pub dwell_s: f64,
    #[serde(default = "default_proximity_radius")]
    pub proximity_radius_m: f64,
    #[serde(default)]
    pub perception: PipelineConfig,
}

fn default_speed() -> f64 {
    DEFAULT_BUS_SPEED_MPS
}

fn default_dwell() -> f64 {
    15.0
}

/// A trip: the card waits at `stop` from `time_s` and rides to `destination`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PassengerSpec {
    pub card: String,
    pub stop: String,
    pub destination: String,
    pub time_s: f64,
}

/// An object visible to one bus's camera over `[start_s, end_s)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HazardSpec {
    pub bus: String,
    pub start_s: f64,
    pub end_s: f64,
    pub object: TruthObject,
}

/// Poisson hazard stream applied to every bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RandomHazards {
    pub rate_per_min: f64,
    pub min_duration_s: f64,
    pub max_duration_s: f64,
    pub blind_zone_probability: f64,
    pub max_distance_m: f64,
}

impl Default for RandomHazards {
    fn default() -> Self {
        Self {
            rate_per_min: 2.0,
            min_duration_s: 1.0,
            max_duration_s: 6.0,
            blind_zone_probability: 0.8,
            max_distance_m: 4.0,
        }
    }
}

/// A forced door-open request, classified by the door logic.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DoorRequestSpec {
    pub bus: String,
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DisplaySpec {
    pub stop: String,
    #[serde(default)]
    pub clock_skew_s: i64,
    /// Hourly state of charge; the last sample holds afterwards.
    #[serde(default)]
    pub soc_trace: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LinkSpec {
    pub loss_probability: f64,
    pub latency_min_ms: u64,
    pub latency_max_ms: u64,
}

impl Default for LinkSpec {
    fn default() -> Self {
        let c = ChannelConfig::default();
        Self {
            loss_probability: c.loss_probability,
            latency_min_ms: c.latency_min_ms,
            latency_max_ms: c.latency_max_ms,
        }
    }
}

impl LinkSpec {
    fn channel(&self, seed: u64) -> ChannelConfig {
        ChannelConfig {
            loss_probability: self.loss_probability,
            latency_min_ms: self.latency_min_ms,
            latency_max_ms: self.latency_max_ms,
            seed,
        }
    }
}

/// Links between buses and the server, and between the server and stops.
/// Each applies in both directions.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ChannelsSpec {
    pub bus: LinkSpec,
    pub stop: LinkSpec,
}

impl ChannelsSpec {
    pub fn uniform(link: LinkSpec) -> Self {
        Self { bus: link, stop: link }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ServerSpec {
    pub default_speed_mps: f64,
    /// Period of ETA refresh broadcasts. Seat changes broadcast at once.
    pub broadcast_interval_s: f64,
}

impl Default for ServerSpec {
    fn default() -> Self {
        Self {
            default_speed_mps: DEFAULT_BUS_SPEED_MPS,
            broadcast_interval_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TimingSpec {
    pub perception_hz: f64,
    pub telemetry_hz: f64,
    /// How long a forced-open door stays open.
    pub door_hold_s: f64,
    pub punch_interval_ms: u64,
}

impl Default for TimingSpec {
    fn default() -> Self {
        Self {
            perception_hz: 10.0,
            telemetry_hz: 1.0,
            door_hold_s: 5.0,
            punch_interval_ms: 1_000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub version: u32,
    #[serde(default)]
    pub name: String,
    pub seed: u64,
    pub duration_s: f64,
    #[serde(default = "default_start_epoch")]
    pub start_epoch_ms: Timestamp,
    #[serde(default)]
    pub routes: Vec<RouteSpec>,
    #[serde(default)]
    pub stops: Vec<Stop>,
    #[serde(default)]
    pub buses: Vec<BusSpec>,
    #[serde(default)]
    pub passengers: Vec<PassengerSpec>,
    #[serde(default)]
    pub hazards: Vec<HazardSpec>,
    #[serde(default)]
    pub random_hazards: Option<RandomHazards>,
    #[serde(default)]
    pub door_requests: Vec<DoorRequestSpec>,
    #[serde(default)]
    pub displays: Vec<DisplaySpec>,
    #[serde(default)]
    pub channels: ChannelsSpec,
    #[serde(default)]
    pub retransmit: RetransmitPolicy,
    #[serde(default)]
    pub server: ServerSpec,
    #[serde(default)]
    pub timing: TimingSpec,
}

fn default_start_epoch() -> Timestamp {
    DEFAULT_START_EPOCH_MS
}

/// Parses and validates a scenario document, reporting every problem found.
pub fn load_scenario(text: &str) -> Result<ScenarioConfig, ScenarioError> {
    let config: ScenarioConfig = serde_json::from_str(text)?;
    config.validate()?;
    Ok(config)
}

fn is_sorted_by_key<T>(items: &[T], key: impl Fn(&T) -> f64) -> bool {
    items.windows(2).all(|w| key(&w[0]) <= key(&w[1]))
}

fn duplicates<'a>(ids: impl Iterator<Item = &'a str>) -> Vec<&'a str> {
    let mut seen = BTreeSet::new();
    let mut dup = BTreeSet::new();
    for id in ids {
        if !seen.insert(id) {
            dup.insert(id);
        }
    }
    dup.into_iter().collect()
}

fn build_polyline(route: &RouteSpec) -> Option<Polyline> {
    let mut points = route.points.clone();
    if route.circular && points.len() >= 2 && points.first() != points.last() {
        points.push(points[0]);
    }
    Polyline::new(points).filter(|p| p.length_m() > 0.0)
}

/// Stops served on a route with their along-route positions, in route order.
fn route_stops(line: &Polyline, stops: &[Stop]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64)> = stops
        .iter()
        .enumerate()
        .filter_map(|(i, s)| {
            let p = line.project(&s.position);
            (p.offset_m <= s.proximity_radius_m).then_some((i, p.along_m))
        })
        .collect();
    out.sort_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)));
    out
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut errors = Vec::new();
        let mut err = |msg: String| errors.push(msg);
        let finite_nonneg = |v: f64| v.is_finite() && v >= 0.0;

        if self.version != SCENARIO_VERSION {
            err(format!("version: expected {SCENARIO_VERSION}, got {}", self.version));
        }
        if !(self.duration_s.is_finite() && self.duration_s > 0.0) {
            err(format!("duration_s: must be positive, got {}", self.duration_s));
        }

        for id in duplicates(self.routes.iter().map(|r| r.id.as_str())) {
            err(format!("routes: duplicate id {id:?}"));
        }
        let mut lines = BTreeMap::new();
        for r in &self.routes {
            if let Some(p) = r.points.iter().find(|p| !p.is_valid()) {
                err(format!("route {:?}: point {p:?} outside lat/lon bounds", r.id));
            } else if let Some(line) = build_polyline(r) {
                lines.insert(r.id.as_str(), line);
            } else {
                err(format!("route {:?}: needs at least two distinct points", r.id));
            }
        }

        for id in duplicates(self.stops.iter().map(|s| s.id.as_str())) {
            err(format!("stops: duplicate id {id:?}"));
        }
        for s in &self.stops {
            if !s.position.is_valid() {
                err(format!("stop {:?}: position outside lat/lon bounds", s.id));
            }
            if !(s.proximity_radius_m.is_finite() && s.proximity_radius_m > 0.0) {
                err(format!("stop {:?}: proximity_radius_m must be positive", s.id));
            }
        }
        let stop_ids: BTreeSet<&str> = self.stops.iter().map(|s| s.id.as_str()).collect();

        for id in duplicates(self.buses.iter().map(|b| b.id.as_str())) {
            err(format!("buses: duplicate id {id:?}"));
        }
        for b in &self.buses {
            if !self.routes.iter().any(|r| r.id == b.route) {
                err(format!("bus {:?}: unknown route {:?}", b.id, b.route));
            }
            if b.capacity == 0 {
                err(format!("bus {:?}: capacity must be positive", b.id));
            }
            if !(b.speed_mps.is_finite() && b.speed_mps > 0.0) {
                err(format!("bus {:?}: speed_mps must be positive", b.id));
            }
            if !is_sorted_by_key(&b.speed_schedule, |c| c.at_s) {
                err(format!("bus {:?}: speed_schedule is not sorted by at_s", b.id));
            }
            if b.speed_schedule
                .iter()
                .any(|c| !finite_nonneg(c.at_s) || !finite_nonneg(c.speed_mps))
            {
                err(format!("bus {:?}: speed_schedule entries must be non-negative", b.id));
            }
            if !finite_nonneg(b.depart_s) {
                err(format!("bus {:?}: depart_s must be non-negative", b.id));
            }
            if !finite_nonneg(b.dwell_s) {
                err(format!("bus {:?}: dwell_s must be non-negative", b.id));
            }
            if !(b.proximity_radius_m.is_finite() && b.proximity_radius_m > 0.0) {
                err(format!("bus {:?}: proximity_radius_m must be positive", b.id));
            }
            if let Err(e) = b.perception.detector.validate() {
                err(format!("bus {:?}: detector: {e}", b.id));
            }
            if !finite_nonneg(b.perception.sonar_sigma_m) {
                err(format!("bus {:?}: sonar_sigma_m must be non-negative", b.id));
            }
            if !(0.0..=1.0).contains(&b.perception.confidence_threshold) {
                err(format!("bus {:?}: confidence_threshold outside [0, 1]", b.id));
            }
        }
        let bus_ids: BTreeSet<&str> = self.buses.iter().map(|b| b.id.as_str()).collect();

        if !is_sorted_by_key(&self.passengers, |p| p.time_s) {
            err("passengers: schedule is not sorted by time_s".into());
        }
        for (i, p) in self.passengers.iter().enumerate() {
            let mut known = true;
            for (field, id) in [("stop", &p.stop), ("destination", &p.destination)] {
                if !stop_ids.contains(id.as_str()) {
                    err(format!("passengers[{i}]: unknown {field} {id:?}"));
                    known = false;
                }
            }
            if p.stop == p.destination {
                err(format!("passengers[{i}]: stop and destination are both {:?}", p.stop));
            } else if known && !self.trip_served(&lines, &p.stop, &p.destination) {
                err(format!(
                    "passengers[{i}]: no bus serves {:?} then {:?}",
                    p.stop, p.destination
                ));
            }
            if !finite_nonneg(p.time_s) {
                err(format!("passengers[{i}]: time_s must be non-negative"));
            }
        }

        if !is_sorted_by_key(&self.hazards, |h| h.start_s) {
            err("hazards: schedule is not sorted by start_s".into());
        }
        for (i, h) in self.hazards.iter().enumerate() {
            if !bus_ids.contains(h.bus.as_str()) {
                err(format!("hazards[{i}]: unknown bus {:?}", h.bus));
            }
            if !(finite_nonneg(h.start_s) && h.end_s.is_finite() && h.start_s < h.end_s) {
                err(format!("hazards[{i}]: need 0 <= start_s < end_s"));
            }
            if !finite_nonneg(h.object.distance_m) {
                err(format!("hazards[{i}]: distance_m must be non-negative"));
            }
        }
        if let Some(r) = &self.random_hazards {
            if !finite_nonneg(r.rate_per_min) {
                err("random_hazards: rate_per_min must be non-negative".into());
            }
            if !(r.min_duration_s > 0.0 && r.min_duration_s <= r.max_duration_s && r.max_duration_s.is_finite()) {
                err("random_hazards: need 0 < min_duration_s <= max_duration_s".into());
            }
            if !(0.0..=1.0).contains(&r.blind_zone_probability) {
                err("random_hazards: blind_zone_probability outside [0, 1]".into());
            }
            if !(r.max_distance_m.is_finite() && r.max_distance_m > 0.0) {
                err("random_hazards: max_distance_m must be positive".into());
            }
        }

        if !is_sorted_by_key(&self.door_requests, |d| d.time_s) {
            err("door_requests: schedule is not sorted by time_s".into());
        }
        for (i, d) in self.door_requests.iter().enumerate() {
            if !bus_ids.contains(d.bus.as_str()) {
                err(format!("door_requests[{i}]: unknown bus {:?}", d.bus));
            }
            if !finite_nonneg(d.time_s) {
                err(format!("door_requests[{i}]: time_s must be non-negative"));
            }
        }

        for id in duplicates(self.displays.iter().map(|d| d.stop.as_str())) {
            err(format!("displays: more than one entry for stop {id:?}"));
        }
        for d in &self.displays {
            if !stop_ids.contains(d.stop.as_str()) {
                err(format!("display: unknown stop {:?}", d.stop));
            }
            if d.soc_trace.iter().any(|s| !(0.0..=1.0).contains(s)) {
                err(format!("display {:?}: soc_trace samples must lie in [0, 1]", d.stop));
            }
        }

        for (name, link) in [("bus", &self.channels.bus), ("stop", &self.channels.stop)] {
            if let Err(e) = link.channel(0).validate() {
                err(format!("channels.{name}: {e}"));
            }
        }
        if self.retransmit.interval_ms == 0 {
            err("retransmit: interval_ms must be positive".into());
        }
        if !(self.server.default_speed_mps.is_finite() && self.server.default_speed_mps > 0.0) {
            err("server: default_speed_mps must be positive".into());
        }
        if !(self.server.broadcast_interval_s.is_finite() && self.server.broadcast_interval_s > 0.0) {
            err("server: broadcast_interval_s must be positive".into());
        }
        let t = &self.timing;
        if !(t.perception_hz.is_finite() && t.perception_hz > 0.0 && t.perception_hz <= 1000.0) {
            err("timing: perception_hz must lie in (0, 1000]".into());
        }
        if !(t.telemetry_hz.is_finite() && t.telemetry_hz > 0.0 && t.telemetry_hz <= 1000.0) {
            err("timing: telemetry_hz must lie in (0, 1000]".into());
        }
        if !finite_nonneg(t.door_hold_s) {
            err("timing: door_hold_s must be non-negative".into());
        }

        if errors.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(errors))
        }
    }

    /// Whether some bus reaches `dest` after `from` on its route.
    fn trip_served(&self, lines: &BTreeMap<&str, Polyline>, from: &str, dest: &str) -> bool {
        self.buses.iter().any(|b| {
            let (Some(line), Some(route)) = (
                lines.get(b.route.as_str()),
                self.routes.iter().find(|r| r.id == b.route),
            ) else {
                return false;
            };
            let served = route_stops(line, &self.stops);
            let along = |id: &str| served.iter().find(|(i, _)| self.stops[*i].id == id).map(|(_, a)| *a);
            match (along(from), along(dest)) {
                (Some(a), Some(b)) => route.circular || b > a,
                _ => false,
            }
        })
    }

    /// Topology the data server needs for route queries.
    pub fn network(&self) -> Network {
        let routes = self
            .routes
            .iter()
            .filter_map(|r| {
                build_polyline(r).map(|polyline| {
                    (
                        r.id.clone(),
                        RouteInfo {
                            polyline,
                            circular: r.circular,
                        },
                    )
                })
            })
            .collect();
        let buses = self
            .buses
            .iter()
            .map(|b| {
                (
                    b.id.clone(),
                    BusInfo {
                        route: b.route.clone(),
                        capacity: b.capacity,
                    },
                )
            })
            .collect();
        Network {
            routes,
            stops: StopRegistry::new(self.stops.clone()),
            buses,
            default_speed_mps: self.server.default_speed_mps,
        }
    }

    fn perception_period_ms(&self) -> u64 {
        ((1000.0 / self.timing.perception_hz).round() as u64).max(1)
    }

    fn telemetry_period_ms(&self) -> u64 {
        ((1000.0 / self.timing.telemetry_hz).round() as u64).max(1)
    }

    fn duration_ms(&self) -> u64 {
        s_to_ms(self.duration_s)
    }
}

fn s_to_ms(s: f64) -> u64 {
    (s * 1000.0).round() as u64
}

/// Position of a bus along its route.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BusKinematics {
    pub along_m: f64,
    pub speed_mps: f64,
}

/// Moves the bus `dt_s` along the route at its current speed. Open routes
/// hold at their end; circular routes wrap.
pub fn advance_bus(state: BusKinematics, route: &Polyline, circular: bool, dt_s: f64) -> BusKinematics {
    let len = route.length_m();
    let along = state.along_m + state.speed_mps * dt_s.max(0.0);
    BusKinematics {
        along_m: if circular {
            along.rem_euclid(len)
        } else {
            along.min(len)
        },
        ..state
    }
}

/// One simulator record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub t: u64,
    pub node: String,
    pub kind: String,
    pub detail: Value,
}

/// Totally ordered record of a run: by time, then node, then kind.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct EventLog {
    pub events: Vec<Event>,
}

impl EventLog {
    pub fn to_ndjson(&self) -> String {
        let mut out = String::new();
        for e in &self.events {
            out.push_str(&serde_json::to_string(e).expect("events serialize"));
            out.push('\n');
        }
        out
    }

    pub fn parse_ndjson(text: &str) -> Result<Self, serde_json::Error> {
        let events = text
            .lines()
            .filter(|l| !l.trim().is_empty())
            .map(serde_json::from_str)
            .collect::<Result<_, _>>()?;
        Ok(Self { events })
    }

    pub fn of_kind<'a>(&'a self, kind: &'a str) -> impl Iterator<Item = &'a Event> + 'a {
        self.events.iter().filter(move |e| e.kind == kind)
    }
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Skip event recording when only the end state matters.
    pub record_events: bool,
    /// Mirror the server's envelope log to this file.
    pub server_log: Option<PathBuf>,
}

impl RunOptions {
    pub fn recorded() -> Self {
        Self {
            record_events: true,
            server_log: None,
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct RunStats {
    pub frames: u64,
    pub sonar_reads: u64,
    pub buzzer_frames: u64,
    pub matrix: ConfusionMatrix,
    pub sent: u64,
    pub dropped: u64,
    pub delivered: u64,
    pub retransmits: u64,
    pub failed: u64,
    pub normal_opens: u64,
    pub emergency_opens: u64,
    pub punches: u64,
    pub end_ms: u64,
    /// Every channel and outbox drained before the cap.
    pub quiescent: bool,
}

#[derive(Debug)]
pub struct RunResult {
    pub events: EventLog,
    pub store: Store,
    pub displays: BTreeMap<String, DisplayState>,
    pub ledgers: BTreeMap<String, BusLedger>,
    /// First transmission of every envelope each bus originated, with its send time.
    pub outbound: BTreeMap<String, Vec<(u64, Envelope)>>,
    /// Per-frame perception tallies of each bus; empty unless recording.
    pub tallies: BTreeMap<String, Vec<TallyLine>>,
    pub stats: RunStats,
}

/// A display whose seat count disagrees with the bus it names.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SeatMismatch {
    pub stop: String,
    pub bus: Option<String>,
    pub shown: Option<u32>,
    pub expected: Option<u32>,
}

impl RunResult {
    /// Every bus's tally lines, each block headed by a `# bus <id>` comment.
    pub fn tally_log(&self) -> String {
        let mut out = String::new();
        for (bus, lines) in &self.tallies {
            out.push_str(&format!("# bus {bus}\n"));
            for l in lines {
                out.push_str(&format!("{l}\n"));
            }
        }
        out
    }

    /// Displays whose seat count is not capacity minus the true load of the
    /// bus they show. Stops served by some bus must show something.
    pub fn seat_mismatches(&self, config: &ScenarioConfig) -> Vec<SeatMismatch> {
        let served: BTreeSet<&str> = config
            .buses
            .iter()
            .flat_map(|b| self.store.network().stops_on_route(&b.id))
            .collect();
        let mut out = Vec::new();
        for (stop, display) in &self.displays {
            match &display.last_broadcast {
                Some(b) => {
                    let expected = self.ledgers.get(&b.bus_id).map(|l| {
                        let occ = l.occupancy();
                        occ.capacity.saturating_sub(occ.count())
                    });
                    if expected != Some(b.seats_available) {
                        out.push(SeatMismatch {
                            stop: stop.clone(),
                            bus: Some(b.bus_id.clone()),
                            shown: Some(b.seats_available),
                            expected,
                        });
                    }
                }
                None if served.contains(stop.as_str()) => out.push(SeatMismatch {
                    stop: stop.clone(),
                    bus: None,
                    shown: None,
                    expected: None,
                }),
                None => {}
            }
        }
        out
    }
}

pub fn run(config: &ScenarioConfig) -> Result<RunResult, SimError> {
    run_with(config, &RunOptions::recorded())
}

pub fn run_with(config: &ScenarioConfig, options: &RunOptions) -> Result<RunResult, SimError> {
    config.validate()?;
    let mut world = World::new(config, options)?;
    world.run();
    Ok(world.finish())
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Phase {
    Moving,
    /// Stopped at a route stop waiting for the sign to be recognised.
    Arrived {
        slot: usize,
        since_ms: u64,
    },
    Dwelling {
        slot: usize,
        opened_ms: u64,
    },
    /// Door forced open; resumes `Moving` or `Arrived` afterwards.
    Held {
        until_ms: u64,
        resume: Resume,
    },
    Terminal,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Resume {
    Moving,
    Arrived { slot: usize, since_ms: u64 },
    Terminal,
}

impl Resume {
    fn phase(self, now: u64) -> Phase {
        match self {
            Resume::Moving => Phase::Moving,
            // The sign wait restarts after the interruption.
            Resume::Arrived { slot, .. } => Phase::Arrived { slot, since_ms: now },
            Resume::Terminal => Phase::Terminal,
        }
    }
}

struct BusNode {
    id: String,
    node: String,
    spec_idx: usize,
    route: usize,
    kin: BusKinematics,
    phase: Phase,
    /// Index into the route's stop slots of the next stop to serve.
    next_slot: usize,
    door: DoorState,
    ledger: BusLedger,
    sent: Vec<(u64, Envelope)>,
    seq: Sequencer,
    outbox: Outbox,
    hazards: Vec<(u64, u64, TruthObject)>,
    door_requests: Vec<u64>,
    next_request: usize,
    frame: u64,
    tallies: Vec<TallyLine>,
    frame_seed: u64,
    last_punch_ms: Option<u64>,
    /// Just left a stop; a lone stop on a loop is a full lap away, not zero.
    leaving: bool,
    refused: BTreeSet<usize>,
    up: SimChannel,
    down: SimChannel,
}

struct RouteRt {
    line: Polyline,
    circular: bool,
    /// (stop index, along-route position), in route order.
    slots: Vec<(usize, f64)>,
}

struct StopNode {
    id: String,
    node: String,
    display: DisplayState,
    soc_trace: Vec<f64>,
    down: SimChannel,
    up: SimChannel,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Trip {
    Waiting,
    Riding(usize),
    Done,
}

struct World<'a> {
    cfg: &'a ScenarioConfig,
    record: bool,
    events: Vec<Event>,
    stats: RunStats,
    routes: Vec<RouteRt>,
    registry: StopRegistry,
    buses: Vec<BusNode>,
    stops: Vec<StopNode>,
    stop_index: BTreeMap<String, usize>,
    trips: Vec<Trip>,
    riding: BTreeMap<String, usize>,
    store: Store,
    server_seq: Sequencer,
    server_outbox: Outbox,
    dirty: BTreeSet<usize>,
    next_alert_id: u64,
    now: u64,
}

#[derive(Debug, Clone, Copy)]
enum Link {
    BusUp(usize),
    BusDown(usize),
    StopDown(usize),
    StopUp(usize),
}

impl<'a> World<'a> {
    fn new(cfg: &'a ScenarioConfig, options: &RunOptions) -> Result<Self, SimError> {
        let root = cfg.seed;
        let routes: Vec<RouteRt> = cfg
            .routes
            .iter()
            .map(|r| {
                let line = build_polyline(r).expect("validated");
                let slots = route_stops(&line, &cfg.stops);
                RouteRt {
                    line,
                    circular: r.circular,
                    slots,
                }
            })
            .collect();
        let duration_ms = cfg.duration_ms();
        let channel = |link: &LinkSpec, label: String| {
            SimChannel::new(link.channel(seed::derive(root, &label, 0))).expect("validated")
        };

        let mut buses = Vec::new();
        for (i, b) in cfg.buses.iter().enumerate() {
            let mut hazards: Vec<(u64, u64, TruthObject)> = cfg
                .hazards
                .iter()
                .filter(|h| h.bus == b.id)
                .map(|h| (s_to_ms(h.start_s), s_to_ms(h.end_s), h.object.clone()))
                .collect();
            if let Some(rh) = &cfg.random_hazards {
                hazards.extend(random_hazard_stream(
                    rh,
                    seed::derive(root, &format!("hazards:{}", b.id), 0),
                    duration_ms,
                ));
            }
            buses.push(BusNode {
                id: b.id.clone(),
                node: format!("bus:{}", b.id),
                spec_idx: i,
                route: cfg.routes.iter().position(|r| r.id == b.route).expect("validated"),
                kin: BusKinematics {
                    along_m: 0.0,
                    speed_mps: 0.0,
                },
                phase: Phase::Moving,
                next_slot: 0,
                door: DoorState::closed(0),
                ledger: BusLedger::new(&b.id, b.capacity, b.standing_allowed),
                sent: Vec::new(),
                seq: Sequencer::new(format!("bus:{}", b.id)),
                outbox: Outbox::new(cfg.retransmit),
                hazards,
                door_requests: cfg
                    .door_requests
                    .iter()
                    .filter(|d| d.bus == b.id)
                    .map(|d| s_to_ms(d.time_s))
                    .collect(),
                next_request: 0,
                frame: 0,
                tallies: Vec::new(),
                frame_seed: seed::derive(root, &format!("perception:{}", b.id), 0),
                last_punch_ms: None,
                leaving: false,
                refused: BTreeSet::new(),
                up: channel(&cfg.channels.bus, format!("link:{}>server", b.id)),
                down: channel(&cfg.channels.bus, format!("link:server>{}", b.id)),
            });
        }

        let stops: Vec<StopNode> = cfg
            .stops
            .iter()
            .map(|s| {
                let spec = cfg.displays.iter().find(|d| d.stop == s.id);
                StopNode {
                    id: s.id.clone(),
                    node: format!("stop:{}", s.id),
                    display: DisplayState::new(spec.map_or(0, |d| d.clock_skew_s)),
                    soc_trace: spec.map(|d| d.soc_trace.clone()).unwrap_or_default(),
                    down: channel(&cfg.channels.stop, format!("link:server>{}", s.id)),
                    up: channel(&cfg.channels.stop, format!("link:{}>server", s.id)),
                }
            })
            .collect();

        let network = cfg.network();
        let store = match &options.server_log {
            Some(path) => Store::open(path, network)?,
            None => Store::new(network),
        };

        Ok(Self {
            cfg,
            record: options.record_events,
            events: Vec::new(),
            stats: RunStats::default(),
            routes,
            registry: StopRegistry::new(cfg.stops.clone()),
            buses,
            stop_index: stops.iter().enumerate().map(|(i, s)| (s.id.clone(), i)).collect(),
            stops,
            trips: vec![Trip::Waiting; cfg.passengers.len()],
            riding: BTreeMap::new(),
            store,
            server_seq: Sequencer::new("server"),
            server_outbox: Outbox::new(cfg.retransmit),
            dirty: BTreeSet::new(),
            next_alert_id: 1,
            now: 0,
        })
    }

    fn log(&mut self, node: &str, kind: &str, detail: impl FnOnce() -> Value) {
        if self.record {
            self.events.push(Event {
                t: self.now,
                node: node.to_owned(),
                kind: kind.to_owned(),
                detail: detail(),
            });
        }
    }

    fn epoch(&self) -> Timestamp {
        self.cfg.start_epoch_ms + self.now as Timestamp
    }

    fn run(&mut self) {
        let end = self.cfg.duration_ms();
        let perception = self.cfg.perception_period_ms();
        let telemetry = self.cfg.telemetry_period_ms();
        let refresh = s_to_ms(self.cfg.server.broadcast_interval_s).max(1);
        let policy = self.cfg.retransmit;
        let latency = self
            .cfg
            .channels
            .bus
            .latency_max_ms
            .max(self.cfg.channels.stop.latency_max_ms);
        // Long enough for a punch and the broadcast it causes to exhaust retries.
        let round = (u64::from(policy.max_retries) + 1) * policy.interval_ms + 2 * latency;
        let cap = end + (2 * round + 5_000).max(60_000);

        let mut next_perception = 0;
        let mut next_telemetry = 0;
        let mut next_refresh = 0;
        let mut next_power = if self.stops.iter().any(|s| !s.soc_trace.is_empty()) {
            Some(0)
        } else {
            None
        };

        let cfg = self.cfg;
        self.log("sim", "start", || json!({ "name": cfg.name, "seed": cfg.seed }));
        loop {
            self.deliver_all();
            self.retransmit_due();
            if next_power == Some(self.now) {
                self.tick_power();
                let n = self.now + HOUR_MS;
                next_power = (n < end).then_some(n);
            }
            if next_perception == self.now && self.now < end {
                for i in 0..self.buses.len() {
                    self.tick_bus(i, perception);
                }
                next_perception += perception;
            }
            if next_telemetry == self.now && self.now < end {
                for i in 0..self.buses.len() {
                    self.send_telemetry(i);
                }
                next_telemetry += telemetry;
            }
            if next_refresh == self.now && self.now < end {
                self.dirty.extend(0..self.buses.len());
                next_refresh += refresh;
            }
            self.flush_broadcasts();

            let mut next: Option<u64> = None;
            let mut consider = |t: Option<u64>| {
                if let Some(t) = t {
                    next = Some(next.map_or(t, |n: u64| n.min(t)));
                }
            };
            for t in [next_perception, next_telemetry, next_refresh] {
                consider((t < end).then_some(t));
            }
            consider(next_power);
            for b in &self.buses {
                consider(b.up.next_delivery_ms());
                consider(b.down.next_delivery_ms());
                consider(b.outbox.next_due_ms());
            }
            for s in &self.stops {
                consider(s.down.next_delivery_ms());
                consider(s.up.next_delivery_ms());
            }
            consider(self.server_outbox.next_due_ms());

            match next {
                None => {
                    self.stats.quiescent = true;
                    break;
                }
                Some(t) if t > cap => {
                    self.log("sim", "drain_timeout", || json!({ "cap_ms": cap }));
                    break;
                }
                Some(t) => self.now = t.max(self.now),
            }
        }
        self.now = self.now.max(end);
        self.stats.end_ms = self.now;
    }

    fn finish(mut self) -> RunResult {
        let stats = self.stats;
        self.log("sim", "end", || json!({ "stats": stats }));
        let end = self.events.pop();
        // Stable sort keeps causal order inside each (t, node, kind) group.
        self.events
            .sort_by(|a, b| (a.t, &a.node, &a.kind).cmp(&(b.t, &b.node, &b.kind)));
        self.events.extend(end);
        RunResult {
            events: EventLog { events: self.events },
            store: self.store,
            displays: self.stops.into_iter().map(|s| (s.id, s.display)).collect(),
            outbound: self
                .buses
                .iter_mut()
                .map(|b| (b.id.clone(), std::mem::take(&mut b.sent)))
                .collect(),
            tallies: self
                .buses
                .iter_mut()
                .map(|b| (b.id.clone(), std::mem::take(&mut b.tallies)))
                .collect(),
            ledgers: self.buses.into_iter().map(|b| (b.id, b.ledger)).collect(),
            stats: self.stats,
        }
    }

    fn link_sender(&self, link: Link) -> String {
        match link {
            Link::BusUp(i) => self.buses[i].node.clone(),
            Link::StopUp(i) => self.stops[i].node.clone(),
            Link::BusDown(_) | Link::StopDown(_) => "server".into(),
        }
    }

    fn link_receiver(&self, link: Link) -> String {
        match link {
            Link::BusDown(i) => self.buses[i].node.clone(),
            Link::StopDown(i) => self.stops[i].node.clone(),
            Link::BusUp(_) | Link::StopUp(_) => "server".into(),
        }
    }

    fn channel(&mut self, link: Link) -> &mut SimChannel {
        match link {
            Link::BusUp(i) => &mut self.buses[i].up,
            Link::BusDown(i) => &mut self.buses[i].down,
            Link::StopDown(i) => &mut self.stops[i].down,
            Link::StopUp(i) => &mut self.stops[i].up,
        }
    }

    fn transmit(&mut self, link: Link, env: &Envelope, retry: bool) {
        let now = self.now;
        let outcome = self.channel(link).send_traced(now, env);
        self.stats.sent += 1;
        if retry {
            self.stats.retransmits += 1;
        }
        if self.record {
            let from = self.link_sender(link);
            let to = self.link_receiver(link);
            let (kind, at) = match outcome {
                SendOutcome::Dropped => {
                    self.stats.dropped += 1;
                    ("drop", None)
                }
                SendOutcome::Scheduled { deliver_at_ms } => ("send", Some(deliver_at_ms)),
            };
            self.log(
                &from,
                kind,
                || json!({ "to": to, "seq": env.seq, "msg": env.kind(), "retry": retry, "deliver_at": at }),
            );
        } else if outcome == SendOutcome::Dropped {
            self.stats.dropped += 1;
        }
    }

    fn deliver_all(&mut self) {
        let now = self.now;
        for i in 0..self.buses.len() {
            for env in self.buses[i].up.deliver_due(now) {
                self.note_delivery(Link::BusUp(i), &env);
                self.server_ingest(i, env);
            }
        }
        for i in 0..self.buses.len() {
            for env in self.buses[i].down.deliver_due(now) {
                self.note_delivery(Link::BusDown(i), &env);
                if let Body::Ack(a) = &env.body {
                    let cleared = self.buses[i].outbox.ack(a.seq);
                    let node = self.buses[i].node.clone();
                    self.log(&node, "ack", || json!({ "seq": a.seq, "cleared": cleared }));
                }
            }
        }
        for j in 0..self.stops.len() {
            for env in self.stops[j].down.deliver_due(now) {
                self.note_delivery(Link::StopDown(j), &env);
                self.stop_receive(j, env);
            }
        }
        for j in 0..self.stops.len() {
            for env in self.stops[j].up.deliver_due(now) {
                self.note_delivery(Link::StopUp(j), &env);
                if let Body::Ack(a) = &env.body {
                    let cleared = self.server_outbox.ack(a.seq);
                    let from = env.sender.clone();
                    self.log(
                        "server",
                        "ack",
                        || json!({ "from": from, "seq": a.seq, "cleared": cleared }),
                    );
                }
            }
        }
    }

    fn note_delivery(&mut self, link: Link, env: &Envelope) {
        self.stats.delivered += 1;
        if self.record {
            let to = self.link_receiver(link);
            self.log(
                &to,
                "recv",
                || json!({ "from": env.sender, "seq": env.seq, "msg": env.kind() }),
            );
        }
    }

    fn server_ingest(&mut self, bus: usize, env: Envelope) {
        let sender = env.sender.clone();
        let seq = env.seq;
        let msg = env.kind();
        let punch_bus = match &env.body {
            Body::Punch(p) => self.buses.iter().position(|b| b.id == p.bus_id),
            _ => None,
        };
        let epoch = self.epoch();
        match self.store.ingest(env, epoch) {
            Ok(outcome) => {
                let kind = if outcome.applied { "apply" } else { "duplicate" };
                self.log("server", kind, || json!({ "from": sender, "seq": seq, "msg": msg }));
                if outcome.applied {
                    if let Some(b) = punch_bus {
                        self.dirty.insert(b);
                    }
                }
                self.transmit(Link::BusDown(bus), &outcome.ack, false);
            }
            Err(e) => {
                let reason = e.to_string();
                self.log(
                    "server",
                    "reject",
                    || json!({ "from": sender, "seq": seq, "reason": reason }),
                );
            }
        }
    }

    fn stop_receive(&mut self, j: usize, env: Envelope) {
        let node = self.stops[j].node.clone();
        match self.stops[j].display.apply_broadcast(&env) {
            Ok(outcome) => {
                let seats = match &env.body {
                    Body::SeatBroadcast(b) => Some((b.bus_id.clone(), b.seats_available)),
                    _ => None,
                };
                self.log(
                    &node,
                    "display",
                    || json!({ "seq": env.seq, "outcome": outcome, "shown": seats }),
                );
                // A dark display cannot answer.
                if outcome != ApplyOutcome::Unpowered {
                    let ack = env.ack(&node, self.epoch(), 0);
                    self.transmit(Link::StopUp(j), &ack, false);
                }
            }
            Err(e) => {
                let reason = e.to_string();
                self.log(&node, "reject", || json!({ "seq": env.seq, "reason": reason }));
            }
        }
    }

    fn retransmit_due(&mut self) {
        let now = self.now;
        for i in 0..self.buses.len() {
            let batch = self.buses[i].outbox.due(now);
            for (_, env) in &batch.resend {
                self.transmit(Link::BusUp(i), env, true);
            }
            for (dest, env) in batch.failed {
                self.stats.failed += 1;
                let node = self.buses[i].node.clone();
                self.log(
                    &node,
                    "delivery_failed",
                    || json!({ "to": dest, "seq": env.seq, "msg": env.kind() }),
                );
            }
        }
        let batch = self.server_outbox.due(now);
        for (dest, env) in &batch.resend {
            let j = self.stop_index[dest];
            self.transmit(Link::StopDown(j), env, true);
        }
        for (dest, env) in batch.failed {
            self.stats.failed += 1;
            self.log(
                "server",
                "delivery_failed",
                || json!({ "to": dest, "seq": env.seq, "msg": env.kind() }),
            );
        }
    }

    fn tick_power(&mut self) {
        let hour = (self.now / HOUR_MS) as usize;
        for j in 0..self.stops.len() {
            let Some(&soc) = self.stops[j].soc_trace.get(hour).or(self.stops[j].soc_trace.last()) else {
                continue;
            };
            if self.stops[j].display.tick_power(soc).unwrap_or(false) {
                let node = self.stops[j].node.clone();
                let kind = if self.stops[j].display.powered {
                    "power_on"
                } else {
                    "power_off"
                };
                self.log(&node, kind, || json!({ "soc": soc }));
            }
        }
    }

    fn flush_broadcasts(&mut self) {
        let dirty = std::mem::take(&mut self.dirty);
        let ts = self.epoch();
        for i in dirty {
            let bus_id = self.buses[i].id.clone();
            for b in self.store.seat_broadcasts(&bus_id) {
                let Some(&j) = self.stop_index.get(&b.stop_id) else {
                    continue;
                };
                let env = self.server_seq.envelope(ts, Body::SeatBroadcast(b));
                self.server_outbox.track(&self.stops[j].id, env.clone(), self.now);
                self.transmit(Link::StopDown(j), &env, false);
            }
        }
    }

    fn send_from_bus(&mut self, i: usize, body: Body) -> Envelope {
        let ts = self.epoch();
        let env = self.buses[i].seq.envelope(ts, body);
        let now = self.now;
        self.buses[i].outbox.track("server", env.clone(), now);
        self.buses[i].sent.push((now, env.clone()));
        self.transmit(Link::BusUp(i), &env, false);
        env
    }

    fn send_telemetry(&mut self, i: usize) {
        let b = &self.buses[i];
        let moving = matches!(b.phase, Phase::Moving);
        let occ = b.ledger.occupancy();
        let record = crate::netproto::TelemetryRecord {
            bus_id: b.id.clone(),
            position: self.routes[b.route].line.point_at(b.kin.along_m),
            speed_mps: if moving { b.kin.speed_mps } else { 0.0 },
            occupancy: occ.count(),
            seats_available: occ.capacity.saturating_sub(occ.count()),
            ts: self.epoch(),
        };
        self.send_from_bus(i, Body::Telemetry(record));
    }

    fn cruise_speed(&self, i: usize) -> f64 {
        let spec = &self.cfg.buses[self.buses[i].spec_idx];
        let t = self.now;
        if t < s_to_ms(spec.depart_s) {
            return 0.0;
        }
        spec.speed_schedule
            .iter()
            .rev()
            .find(|c| s_to_ms(c.at_s) <= t)
            .map_or(spec.speed_mps, |c| c.speed_mps)
    }

    fn truth(&self, i: usize, position: &GeoPoint) -> Vec<TruthObject> {
        let now = self.now;
        let mut truth: Vec<TruthObject> = self.buses[i]
            .hazards
            .iter()
            .filter(|(s, e, _)| *s <= now && now < *e)
            .map(|(_, _, o)| o.clone())
            .collect();
        if let Some((stop, d)) = self.registry.nearest(position) {
            if d <= stop.proximity_radius_m {
                truth.push(TruthObject {
                    object_id: format!("sign:{}", stop.id),
                    class_label: ObjectClass::StopSign,
                    distance_m: d,
                    in_blind_zone: false,
                });
            }
        }
        truth
    }

    fn tick_bus(&mut self, i: usize, period_ms: u64) {
        let now = self.now;
        let route = self.buses[i].route;
        let position = self.routes[route].line.point_at(self.buses[i].kin.along_m);
        let truth = self.truth(i, &position);
        let spec_idx = self.buses[i].spec_idx;
        let pipeline = self.cfg.buses[spec_idx].perception;
        let frame_id = self.buses[i].frame;
        let frame_seed = seed::derive(self.buses[i].frame_seed, "frame", frame_id);
        self.buses[i].frame += 1;
        let frame = pipeline.process(&truth, frame_seed).expect("validated detector");
        if self.record {
            self.buses[i].tallies.push(TallyLine {
                frame_id,
                tally: frame.tally,
                buzzer: frame.decision.buzzer_on,
                led: frame.decision.led_on,
            });
        }
        self.stats.frames += 1;
        self.stats.matrix += frame.tally;
        let node = self.buses[i].node.clone();
        if let Some(sonar) = frame.sonar {
            self.stats.sonar_reads += 1;
            if frame.decision.buzzer_on {
                self.stats.buzzer_frames += 1;
                self.log(&node, "buzzer", || {
                    json!({ "frame": frame_seed, "sonar_m": sonar.distance_m, "detections": frame.detections.len() })
                });
            }
        }
        let sign_seen = frame.decision.led_on;

        // Forced door requests.
        while let Some(&at) = self.buses[i].door_requests.get(self.buses[i].next_request) {
            if at > now {
                break;
            }
            self.buses[i].next_request += 1;
            self.forced_open(i, &position, sign_seen);
        }

        match self.buses[i].phase {
            Phase::Held { until_ms, resume } => {
                if now >= until_ms {
                    self.close_door(i);
                    self.buses[i].phase = resume.phase(now);
                }
            }
            Phase::Arrived { slot, since_ms } => {
                if sign_seen {
                    let radius = self.cfg.buses[spec_idx].proximity_radius_m;
                    let (door, outcome) = self.buses[i]
                        .door
                        .request_open(now, &position, &self.registry, true, radius)
                        .expect("door closed while arrived");
                    self.buses[i].door = door;
                    if outcome.kind == DoorOpenKind::NormalOpen {
                        self.stats.normal_opens += 1;
                        self.log(&node, "door_normal_open", || {
                            json!({ "stop": outcome.stop_id, "distance_m": outcome.distance_to_stop_m,
                                    "radius_m": radius, "position": position })
                        });
                        self.buses[i].last_punch_ms = None;
                        self.buses[i].refused.clear();
                        self.buses[i].phase = Phase::Dwelling { slot, opened_ms: now };
                    } else {
                        let resume = Resume::Arrived { slot, since_ms };
                        self.emergency(i, &position, outcome.distance_to_stop_m, radius, resume);
                    }
                } else if now - since_ms >= STOP_SIGN_TIMEOUT_MS {
                    let stop = self.cfg.stops[self.routes[route].slots[slot].0].id.clone();
                    self.log(&node, "stop_skipped", || json!({ "stop": stop }));
                    self.depart(i, slot);
                }
            }
            Phase::Dwelling { slot, opened_ms } => self.dwell(i, slot, opened_ms),
            Phase::Moving => self.drive(i, period_ms),
            Phase::Terminal => {}
        }
    }

    fn close_door(&mut self, i: usize) {
        let now = self.now;
        if let Ok(door) = self.buses[i].door.close(now) {
            self.buses[i].door = door;
            let node = self.buses[i].node.clone();
            self.log(&node, "door_close", || json!({}));
        }
    }

    fn forced_open(&mut self, i: usize, position: &GeoPoint, sign_seen: bool) {
        let now = self.now;
        let node = self.buses[i].node.clone();
        let resume = match self.buses[i].phase {
            Phase::Moving => Resume::Moving,
            Phase::Arrived { slot, since_ms } => Resume::Arrived { slot, since_ms },
            Phase::Terminal => Resume::Terminal,
            Phase::Dwelling { .. } | Phase::Held { .. } => {
                self.log(
                    &node,
                    "door_request_ignored",
                    || json!({ "reason": "door already open" }),
                );
                return;
            }
        };
        let radius = self.cfg.buses[self.buses[i].spec_idx].proximity_radius_m;
        let (door, outcome) = self.buses[i]
            .door
            .request_open(now, position, &self.registry, sign_seen, radius)
            .expect("door closed outside dwell and hold");
        self.buses[i].door = door;
        if outcome.kind == DoorOpenKind::NormalOpen {
            self.stats.normal_opens += 1;
            let position = *position;
            self.log(&node, "door_normal_open", || {
                json!({ "stop": outcome.stop_id, "distance_m": outcome.distance_to_stop_m,
                        "radius_m": radius, "position": position, "forced": true })
            });
            let hold = s_to_ms(self.cfg.timing.door_hold_s);
            self.buses[i].phase = Phase::Held {
                until_ms: now + hold,
                resume,
            };
        } else {
            self.emergency(i, position, outcome.distance_to_stop_m, radius, resume);
        }
    }

    fn emergency(&mut self, i: usize, position: &GeoPoint, distance: f64, radius: f64, resume: Resume) {
        let alert_id = self.next_alert_id;
        self.next_alert_id += 1;
        self.stats.emergency_opens += 1;
        let node = self.buses[i].node.clone();
        let position = *position;
        let env = self.send_from_bus(
            i,
            Body::Alert(Alert {
                alert_id,
                bus_id: self.buses[i].id.clone(),
                position,
                distance_to_stop_m: distance,
            }),
        );
        self.log(&node, "door_emergency_open", || {
            json!({ "alert_id": alert_id, "seq": env.seq, "distance_m": distance.is_finite().then_some(distance),
                    "radius_m": radius, "position": position })
        });
        let hold = s_to_ms(self.cfg.timing.door_hold_s);
        self.buses[i].phase = Phase::Held {
            until_ms: self.now + hold,
            resume,
        };
    }

    fn depart(&mut self, i: usize, slot: usize) {
        let route = &self.routes[self.buses[i].route];
        let n = route.slots.len();
        self.buses[i].next_slot = if route.circular { (slot + 1) % n } else { slot + 1 };
        self.buses[i].phase = Phase::Moving;
        self.buses[i].leaving = true;
        let node = self.buses[i].node.clone();
        let stop = self.cfg.stops[route.slots[slot].0].id.clone();
        self.log(&node, "depart", || json!({ "stop": stop }));
    }

    fn drive(&mut self, i: usize, period_ms: u64) {
        let speed = self.cruise_speed(i);
        self.buses[i].kin.speed_mps = speed;
        if speed == 0.0 {
            return;
        }
        let route = &self.routes[self.buses[i].route];
        let len = route.line.length_m();
        let dt = period_ms as f64 / 1000.0;
        let step = speed * dt;
        let along = self.buses[i].kin.along_m;
        let slot = self.buses[i].next_slot;
        let target = route.slots.get(slot).map(|&(_, a)| a);
        let remaining = target.map(|a| {
            if route.circular {
                let r = (a - along).rem_euclid(len);
                if r == 0.0 && self.buses[i].leaving {
                    len
                } else {
                    r
                }
            } else {
                a - along
            }
        });
        self.buses[i].leaving = false;
        let node = self.buses[i].node.clone();
        match (target, remaining) {
            (Some(a), Some(r)) if r <= step => {
                self.buses[i].kin.along_m = a;
                let stop = self.cfg.stops[route.slots[slot].0].id.clone();
                self.buses[i].phase = Phase::Arrived {
                    slot,
                    since_ms: self.now,
                };
                self.log(&node, "arrive", || json!({ "stop": stop, "along_m": a }));
            }
            _ => {
                let circular = route.circular;
                let next = advance_bus(self.buses[i].kin, &route.line, circular, dt);
                self.buses[i].kin = next;
                if !circular && target.is_none() && next.along_m >= len {
                    self.buses[i].phase = Phase::Terminal;
                    self.buses[i].kin.speed_mps = 0.0;
                    self.log(&node, "terminal", || json!({ "along_m": len }));
                }
            }
        }
    }

    /// Serves one stop visit: exits first, then boardings, one punch per interval.
    fn dwell(&mut self, i: usize, slot: usize, opened_ms: u64) {
        let now = self.now;
        let route_idx = self.buses[i].route;
        let (stop_idx, stop_along) = self.routes[route_idx].slots[slot];
        let stop_id = self.cfg.stops[stop_idx].id.clone();
        let interval = self.cfg.timing.punch_interval_ms;
        if let Some(last) = self.buses[i].last_punch_ms {
            if now < last + interval {
                return;
            }
        }
        let exit = self
            .trips
            .iter()
            .enumerate()
            .position(|(k, t)| *t == Trip::Riding(i) && self.cfg.passengers[k].destination == stop_id);
        let board = || {
            self.cfg.passengers.iter().enumerate().position(|(k, p)| {
                self.trips[k] == Trip::Waiting
                    && p.stop == stop_id
                    && s_to_ms(p.time_s) <= now
                    && !self.buses[i].refused.contains(&k)
                    && !self.riding.contains_key(&p.card)
                    && self.reaches(route_idx, stop_along, &p.destination)
            })
        };
        let Some(k) = exit.or_else(board) else {
            let dwell = s_to_ms(self.cfg.buses[self.buses[i].spec_idx].dwell_s);
            if now >= opened_ms + dwell {
                self.close_door(i);
                self.depart(i, slot);
            }
            return;
        };
        let card = self.cfg.passengers[k].card.clone();
        let node = self.buses[i].node.clone();
        let ts = self.epoch();
        match self.buses[i].ledger.punch(&card, ts, Some(&stop_id)) {
            Ok(record) => {
                self.stats.punches += 1;
                self.buses[i].last_punch_ms = Some(now);
                match self.trips[k] {
                    Trip::Riding(_) => {
                        self.trips[k] = Trip::Done;
                        self.riding.remove(&card);
                    }
                    _ => {
                        self.trips[k] = Trip::Riding(i);
                        self.riding.insert(card.clone(), i);
                    }
                }
                let onboard = self.buses[i].ledger.occupancy().count();
                self.log(
                    &node,
                    "punch",
                    || json!({ "card": card, "direction": record.direction, "stop": stop_id, "onboard": onboard }),
                );
                self.send_from_bus(i, Body::Punch(record));
            }
            Err(e @ RidershipError::Capacity { .. }) => {
                self.buses[i].refused.insert(k);
                let reason = e.to_string();
                self.log(
                    &node,
                    "punch_rejected",
                    || json!({ "card": card, "stop": stop_id, "reason": reason }),
                );
            }
            Err(e) => unreachable!("simulated punches are ordered: {e}"),
        }
    }

    fn reaches(&self, route: usize, from_along: f64, dest: &str) -> bool {
        let r = &self.routes[route];
        r.slots
            .iter()
            .any(|&(s, a)| self.cfg.stops[s].id == dest && (r.circular || a > from_along))
    }
}

/// Poisson stream of synthetic hazards over `[0, duration_ms)`.
fn random_hazard_stream(spec: &RandomHazards, seed: u64, duration_ms: u64) -> Vec<(u64, u64, TruthObject)> {
    let mut out = Vec::new();
    if spec.rate_per_min <= 0.0 {
        return out;
    }
    let mut rng = seed::rng(seed);
    let gap = Exp::new(spec.rate_per_min / 60_000.0).expect("positive rate");
    let mut t = 0.0;
    let mut n = 0;
    loop {
        t += gap.sample(&mut rng);
        if t >= duration_ms as f64 {
            break;
        }
        let start = t as u64;
        let len = rng.random_range(spec.min_duration_s..=spec.max_duration_s);
        let class = ObjectClass::HAZARDS[rng.random_range(0..ObjectClass::HAZARDS.len())];
        let object = TruthObject {
            object_id: format!("hz{n}"),
            class_label: class,
            distance_m: rng.random_range(0.2..=spec.max_distance_m),
            in_blind_zone: rng.random_bool(spec.blind_zone_probability),
        };
        out.push((start, start + s_to_ms(len), object));
        n += 1;
    }
    out
}

/// Knobs for [`random_scenario`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeneratorOptions {
    pub duration_s: f64,
    pub max_buses: usize,
    pub passengers: usize,
    pub door_requests: usize,
    pub loss_probability: f64,
    pub circular: Option<bool>,
}

impl Default for GeneratorOptions {
    fn default() -> Self {
        Self {
            duration_s: 600.0,
            max_buses: 3,
            passengers: 20,
            door_requests: 4,
            loss_probability: 0.0,
            circular: None,
        }
    }
}

/// A valid random scenario: one route, stops on it, buses, trips, hazards
/// and forced door requests.
pub fn random_scenario(seed: u64, opts: &GeneratorOptions) -> ScenarioConfig {
    let mut rng = seed::rng(seed::derive(seed, "generator", 0));
    let circular = opts.circular.unwrap_or_else(|| rng.random_bool(0.3));

    let mut points = vec![GeoPoint::new(23.78, 90.40)];
    let mut heading: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    for _ in 0..rng.random_range(3..7) {
        heading += rng.random_range(-1.2..1.2);
        let d = rng.random_range(250.0..700.0);
        let last = *points.last().unwrap();
        let dlat = d * heading.cos() / 111_195.0;
        let dlon = d * heading.sin() / (111_195.0 * last.lat.to_radians().cos());
        points.push(GeoPoint::new(last.lat + dlat, last.lon + dlon));
    }
    let route = RouteSpec {
        id: "R1".into(),
        points,
        circular,
    };
    let line = build_polyline(&route).expect("generated route is non-degenerate");
    let len = line.length_m();

    let n_stops = rng.random_range(3..=6);
    let spacing = len / n_stops as f64;
    let stops: Vec<Stop> = (0..n_stops)
        .map(|k| {
            let along = (k as f64 + rng.random_range(0.1..0.9)) * spacing;
            Stop {
                id: format!("S{}", k + 1),
                position: line.point_at(along),
                proximity_radius_m: 30.0,
            }
        })
        .collect();

    let n_buses = rng.random_range(1..=opts.max_buses.max(1));
    let buses: Vec<BusSpec> = (0..n_buses)
        .map(|k| BusSpec {
            id: format!("B{}", k + 1),
            route: "R1".into(),
            capacity: rng.random_range(3..=30),
            standing_allowed: false,
            speed_mps: rng.random_range(6.0..12.0),
            speed_schedule: Vec::new(),
            depart_s: k as f64 * rng.random_range(30.0..120.0),
            dwell_s: rng.random_range(5.0..20.0),
            proximity_radius_m: 30.0,
            perception: PipelineConfig::default(),
        })
        .collect();

    // Every fourth trip reuses a card from a small pool.
    let mut passengers: Vec<PassengerSpec> = (0..opts.passengers)
        .map(|k| {
            let a = rng.random_range(0..n_stops);
            let mut b = rng.random_range(0..n_stops - 1);
            if b >= a {
                b += 1;
            }
            let (a, b) = if circular { (a, b) } else { (a.min(b), a.max(b)) };
            let card = if k % 4 == 0 {
                format!("C{:02}", rng.random_range(0..5))
            } else {
                format!("P{k:03}")
            };
            PassengerSpec {
                card,
                stop: stops[a].id.clone(),
                destination: stops[b].id.clone(),
                time_s: (rng.random_range(0.0..opts.duration_s * 0.6) * 10.0).round() / 10.0,
            }
        })
        .collect();
    passengers.sort_by(|x, y| x.time_s.total_cmp(&y.time_s));

    let mut door_requests: Vec<DoorRequestSpec> = (0..opts.door_requests)
        .map(|_| DoorRequestSpec {
            bus: buses[rng.random_range(0..n_buses)].id.clone(),
            time_s: (rng.random_range(0.0..opts.duration_s) * 10.0).round() / 10.0,
        })
        .collect();
    door_requests.sort_by(|x, y| x.time_s.total_cmp(&y.time_s));

    let link = LinkSpec {
        loss_probability: opts.loss_probability,
        ..LinkSpec::default()
    };
    ScenarioConfig {
        version: SCENARIO_VERSION,
        name: format!("random-{seed}"),
        seed,
        duration_s: opts.duration_s,
        start_epoch_ms: DEFAULT_START_EPOCH_MS,
        routes: vec![route],
        stops,
        buses,
        passengers,
        hazards: Vec::new(),
        random_hazards: Some(RandomHazards::default()),
        door_requests,
        displays: Vec::new(),
        channels: ChannelsSpec::uniform(link),
        retransmit: RetransmitPolicy::default(),
        server: ServerSpec::default(),
        timing: TimingSpec::default(),
    }
}

impl fmt::Display for RunStats {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(
            f,
            "frames: {} (sonar reads {}, buzzer {})",
            self.frames, self.sonar_reads, self.buzzer_frames
        )?;
        writeln!(
            f,
            "detections: tp {} fp {} fn {} tn {}",
            self.matrix.tp, self.matrix.fp, self.matrix.fn_, self.matrix.tn
        )?;
        writeln!(
            f,
            "doors: {} normal, {} emergency; punches {}",
            self.normal_opens, self.emergency_opens, self.punches
        )?;
        writeln!(
            f,
            "envelopes: {} sent, {} dropped, {} delivered, {} retransmits, {} failed",
            self.sent, self.dropped, self.delivered, self.retransmits, self.failed
        )?;
        write!(f, "ended at {} ms, quiescent: {}", self.end_ms, self.quiescent)
    }
}
