//! The solar-powered stop display.

use chrono::DateTime;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::netproto::{Body, Envelope, Kind};
use crate::ridership::Timestamp;

#[derive(Debug, Error, PartialEq)]
pub enum StopError {
    #[error("stop displays only accept seat broadcasts, got `{0}`")]
    WrongKind(Kind),
    #[error("soc sample {0} outside [0, 1]")]
    BadSoc(f64),
}

/// The broadcast currently on screen.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShownBroadcast {
    pub bus_id: String,
    pub seats_available: u32,
    pub eta_s: Option<f64>,
    pub applied_seq: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ApplyOutcome {
    Applied,
    Stale,
    Unpowered,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DisplayState {
    pub last_broadcast: Option<ShownBroadcast>,
    /// Receiver clock skew against scenario time.
    pub clock_offset_s: i64,
    pub powered: bool,
}

impl Default for DisplayState {
    fn default() -> Self {
        Self::new(0)
    }
}

impl DisplayState {
    pub fn new(clock_offset_s: i64) -> Self {
        Self {
            last_broadcast: None,
            clock_offset_s,
            powered: true,
        }
    }

    pub fn applied_seq(&self) -> u64 {
        self.last_broadcast.as_ref().map_or(0, |b| b.applied_seq)
    }

    /// Shows the broadcast if it is newer than what is on screen.
    pub fn apply_broadcast(&mut self, envelope: &Envelope) -> Result<ApplyOutcome, StopError> {
        let Body::SeatBroadcast(b) = &envelope.body else {
            return Err(StopError::WrongKind(envelope.kind()));
        };
        if !self.powered {
            return Ok(ApplyOutcome::Unpowered);
        }
        if envelope.seq <= self.applied_seq() {
            return Ok(ApplyOutcome::Stale);
        }
        self.last_broadcast = Some(ShownBroadcast {
            bus_id: b.bus_id.clone(),
            seats_available: b.seats_available,
            eta_s: b.eta_s,
            applied_seq: envelope.seq,
        });
        Ok(ApplyOutcome::Applied)
    }

    /// Updates power from a state-of-charge sample. Returns true on a transition.
    pub fn tick_power(&mut self, soc: f64) -> Result<bool, StopError> {
        if !(0.0..=1.0).contains(&soc) {
            return Err(StopError::BadSoc(soc));
        }
        let was = self.powered;
        self.powered = soc > 0.0;
        Ok(was != self.powered)
    }

    /// Four text lines for the OLED. `scenario_time` is ms since the epoch
    /// before skew is applied.
    pub fn render(&self, scenario_time: Timestamp) -> [String; 4] {
        if !self.powered {
            return Default::default();
        }
        let local = scenario_time + self.clock_offset_s * 1000;
        let clock = DateTime::from_timestamp_millis(local)
            .map_or_else(|| "--:--".to_owned(), |t| t.format("%H:%M").to_string());
        match &self.last_broadcast {
            None => [clock, "BUS -".into(), "NO DATA".into(), "NO DATA".into()],
            Some(b) => [
                clock,
                format!("BUS {}", b.bus_id),
                format!("SEATS {}", b.seats_available),
                match b.eta_s {
                    Some(eta) => format!("ETA {}s", eta.round() as i64),
                    None => "ETA --".into(),
                },
            ],
        }
    }
}
