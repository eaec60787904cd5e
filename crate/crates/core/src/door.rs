//! Smart bus-door state machine.
//!
//! A normal open needs both a detected stop sign and a registered stop
//! within the proximity radius. Anything else is recorded as an emergency
//! open and must be reported with an alert.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geo::{GeoPoint, StopRegistry};

pub const DEFAULT_PROXIMITY_RADIUS_M: f64 = 30.0;

#[derive(Debug, Error, PartialEq)]
pub enum DoorError {
    #[error("door is already open ({0:?})")]
    AlreadyOpen(DoorStatus),
    #[error("door is already closed")]
    AlreadyClosed,
    #[error("proximity radius must be positive, got {0}")]
    BadRadius(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoorStatus {
    Closed,
    OpenNormal,
    OpenEmergency,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct DoorState {
    pub status: DoorStatus,
    pub last_transition_ms: u64,
}

impl Default for DoorState {
    fn default() -> Self {
        Self::closed(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DoorOpenKind {
    NormalOpen,
    EmergencyOpen,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DoorOutcome {
    pub kind: DoorOpenKind,
    pub stop_id: Option<String>,
    /// Distance to the nearest registered stop; infinite when there is none.
    #[serde(with = "finite_or_null")]
    pub distance_to_stop_m: f64,
}

impl DoorOutcome {
    pub fn is_emergency(&self) -> bool {
        self.kind == DoorOpenKind::EmergencyOpen
    }
}

impl DoorState {
    pub const fn closed(at_ms: u64) -> Self {
        Self {
            status: DoorStatus::Closed,
            last_transition_ms: at_ms,
        }
    }

    pub fn is_open(&self) -> bool {
        self.status != DoorStatus::Closed
    }

    /// Opens the door and classifies the opening.
    pub fn request_open(
        &self,
        now_ms: u64,
        bus_position: &GeoPoint,
        stops: &StopRegistry,
        stop_detected: bool,
        proximity_radius_m: f64,
    ) -> Result<(DoorState, DoorOutcome), DoorError> {
        if self.is_open() {
            return Err(DoorError::AlreadyOpen(self.status));
        }
        if !(proximity_radius_m > 0.0) {
            return Err(DoorError::BadRadius(proximity_radius_m));
        }
        let nearest = stops.nearest(bus_position);
        let outcome = match nearest {
            Some((stop, d)) if stop_detected && d <= proximity_radius_m => DoorOutcome {
                kind: DoorOpenKind::NormalOpen,
                stop_id: Some(stop.id.clone()),
                distance_to_stop_m: d,
            },
            Some((_, d)) => DoorOutcome {
                kind: DoorOpenKind::EmergencyOpen,
                stop_id: None,
                distance_to_stop_m: d,
            },
            None => DoorOutcome {
                kind: DoorOpenKind::EmergencyOpen,
                stop_id: None,
                distance_to_stop_m: f64::INFINITY,
            },
        };
        let status = match outcome.kind {
            DoorOpenKind::NormalOpen => DoorStatus::OpenNormal,
            DoorOpenKind::EmergencyOpen => DoorStatus::OpenEmergency,
        };
        Ok((
            DoorState {
                status,
                last_transition_ms: now_ms,
            },
            outcome,
        ))
    }

    pub fn close(&self, now_ms: u64) -> Result<DoorState, DoorError> {
        if !self.is_open() {
            return Err(DoorError::AlreadyClosed);
        }
        Ok(DoorState::closed(now_ms))
    }
}

/// JSON has no infinity; the unbounded distance travels as `null`.
pub(crate) mod finite_or_null {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else {
            s.serialize_none()
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
    }
}
