//! Blind-spot perception: synthetic detector, power-gated sonar, buzzer and
//! stop-sign LED decisions, and per-frame scoring against ground truth.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;

/// Sonar readings at or above this distance raise no alarm.
pub const COLLISION_DISTANCE_M: f64 = 1.0;
/// Range reported when the sonar fires but nothing real is in the zone.
pub const SONAR_MAX_RANGE_M: f64 = 4.0;
pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.5;
pub const DEFAULT_SONAR_SIGMA_M: f64 = 0.02;

#[derive(Debug, Error, PartialEq)]
pub enum PerceptionError {
    #[error("detector {field} must be in [0, 1], got {value}")]
    RateOutOfRange { field: &'static str, value: f64 },
    #[error("detector confidence range [{min}, {max}] is invalid")]
    ConfidenceRange { min: f64, max: f64 },
    #[error("tally line {line}: {reason}")]
    TallyLine { line: usize, reason: String },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ObjectClass {
    Person,
    Car,
    Truck,
    Bus,
    Motorbike,
    StopSign,
    Background,
}

impl ObjectClass {
    pub const HAZARDS: [ObjectClass; 5] = [
        ObjectClass::Person,
        ObjectClass::Car,
        ObjectClass::Truck,
        ObjectClass::Bus,
        ObjectClass::Motorbike,
    ];

    /// Classes that feed the collision path.
    pub fn is_hazard(self) -> bool {
        !matches!(self, ObjectClass::StopSign | ObjectClass::Background)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthObject {
    pub object_id: String,
    pub class_label: ObjectClass,
    pub distance_m: f64,
    pub in_blind_zone: bool,
}

impl TruthObject {
    /// An object the blind-spot pipeline is expected to report.
    pub fn is_zone_hazard(&self) -> bool {
        self.in_blind_zone && self.class_label.is_hazard()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectedObject {
    /// `None` marks a spurious detection.
    pub matched_truth: Option<String>,
    pub class_label: ObjectClass,
    pub confidence: f64,
}

/// One perception tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameObservation {
    pub frame_id: u64,
    pub timestamp_ms: u64,
    pub truth_objects: Vec<TruthObject>,
    pub detections: Vec<DetectedObject>,
}

/// Error model of the synthetic detector.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorModel {
    /// Probability an in-zone object (or visible stop sign) goes undetected.
    pub miss_rate: f64,
    /// Per-frame probability of one spurious hazard detection.
    pub spurious_rate: f64,
    pub confidence_min: f64,
    pub confidence_max: f64,
}

impl Default for DetectorModel {
    fn default() -> Self {
        Self {
            miss_rate: 0.05,
            spurious_rate: 0.01,
            confidence_min: 0.6,
            confidence_max: 0.99,
        }
    }
}

impl DetectorModel {
    pub fn perfect() -> Self {
        Self {
            miss_rate: 0.0,
            spurious_rate: 0.0,
            confidence_min: 0.9,
            confidence_max: 0.9,
        }
    }

    pub fn validate(&self) -> Result<(), PerceptionError> {
        for (field, value) in [("miss_rate", self.miss_rate), ("spurious_rate", self.spurious_rate)] {
            if !(0.0..=1.0).contains(&value) {
                return Err(PerceptionError::RateOutOfRange { field, value });
            }
        }
        let (min, max) = (self.confidence_min, self.confidence_max);
        if !(0.0..=1.0).contains(&min) || !(0.0..=1.0).contains(&max) || min > max {
            return Err(PerceptionError::ConfidenceRange { min, max });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SonarReading {
    pub distance_m: f64,
    pub valid: bool,
}

impl SonarReading {
    pub const INVALID: SonarReading = SonarReading {
        distance_m: 0.0,
        valid: false,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlertDecision {
    pub sonar_active: bool,
    pub buzzer_on: bool,
    pub led_on: bool,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct FrameTally {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub tn: u64,
}

impl FrameTally {
    pub const fn new(tp: u64, fp: u64, fn_: u64, tn: u64) -> Self {
        Self { tp, fp, fn_, tn }
    }
}

/// Runs the synthetic detector over one frame's ground truth.
///
/// Out-of-zone objects are never reported. Stop signs are reported wherever
/// they appear since the forward camera sees them regardless of the zone.
pub fn run_detector(
    frame_truth: &[TruthObject],
    model: &DetectorModel,
    rng_seed: u64,
) -> Result<Vec<DetectedObject>, PerceptionError> {
    model.validate()?;
    let mut rng = seed::rng(rng_seed);
    let mut out = Vec::new();
    for obj in frame_truth {
        let visible = obj.is_zone_hazard() || obj.class_label == ObjectClass::StopSign;
        if !visible {
            continue;
        }
        // Always draw both numbers so one object's outcome never shifts the stream.
        let hit = rng.random::<f64>() >= model.miss_rate;
        let confidence = sample_confidence(&mut rng, model);
        if hit {
            out.push(DetectedObject {
                matched_truth: Some(obj.object_id.clone()),
                class_label: obj.class_label,
                confidence,
            });
        }
    }
    if rng.random::<f64>() < model.spurious_rate {
        let class_label = ObjectClass::HAZARDS[rng.random_range(0..ObjectClass::HAZARDS.len())];
        out.push(DetectedObject {
            matched_truth: None,
            class_label,
            confidence: sample_confidence(&mut rng, model),
        });
    }
    Ok(out)
}

fn sample_confidence(rng: &mut impl Rng, model: &DetectorModel) -> f64 {
    model.confidence_min + (model.confidence_max - model.confidence_min) * rng.random::<f64>()
}

/// Whether the sonar should be powered this frame.
pub fn sonar_gate(detections: &[DetectedObject]) -> bool {
    detections.iter().any(|d| d.class_label != ObjectClass::StopSign)
}

pub fn read_sonar(nearest_truth_distance_m: f64, noise_sigma_m: f64, rng_seed: u64) -> SonarReading {
    let noise = if noise_sigma_m > 0.0 {
        let normal = Normal::new(0.0, noise_sigma_m).expect("sigma is finite and positive");
        normal.sample(&mut seed::rng(rng_seed))
    } else {
        0.0
    };
    SonarReading {
        distance_m: (nearest_truth_distance_m + noise).max(0.0),
        valid: true,
    }
}

pub fn evaluate_collision(sonar_active: bool, reading: &SonarReading) -> bool {
    sonar_active && reading.valid && reading.distance_m < COLLISION_DISTANCE_M
}

pub fn evaluate_stop_sign(detections: &[DetectedObject], confidence_threshold: f64) -> bool {
    detections
        .iter()
        .any(|d| d.class_label == ObjectClass::StopSign && d.confidence >= confidence_threshold)
}

/// Scores one frame of the blind-spot path against ground truth.
///
/// Stop signs belong to the LED path and are left out of the tally. A hazard
/// counts as found once; repeat detections of it, detections with no truth,
/// and detections of objects that should be ignored are false positives.
pub fn score_frame(truth: &[TruthObject], detections: &[DetectedObject]) -> FrameTally {
    let mut tally = FrameTally::default();
    let mut found: BTreeSet<&str> = BTreeSet::new();
    let mut referenced: BTreeSet<&str> = BTreeSet::new();
    for det in detections.iter().filter(|d| d.class_label != ObjectClass::StopSign) {
        let Some(id) = det.matched_truth.as_deref() else {
            tally.fp += 1;
            continue;
        };
        referenced.insert(id);
        match truth.iter().find(|t| t.object_id == id) {
            Some(t) if t.is_zone_hazard() && found.insert(id) => tally.tp += 1,
            _ => tally.fp += 1,
        }
    }
    for t in truth.iter().filter(|t| t.class_label != ObjectClass::StopSign) {
        if t.is_zone_hazard() {
            if !found.contains(t.object_id.as_str()) {
                tally.fn_ += 1;
            }
        } else if !t.in_blind_zone && !referenced.contains(t.object_id.as_str()) {
            tally.tn += 1;
        }
    }
    tally
}

/// Nearest in-zone object the sonar would echo off, if any.
pub fn nearest_zone_distance(truth: &[TruthObject]) -> Option<f64> {
    truth
        .iter()
        .filter(|t| t.in_blind_zone && t.class_label != ObjectClass::StopSign)
        .map(|t| t.distance_m)
        .min_by(f64::total_cmp)
}

/// Parameters of the per-frame blind-spot pipeline on one bus.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub detector: DetectorModel,
    pub sonar_sigma_m: f64,
    pub confidence_threshold: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            detector: DetectorModel::default(),
            sonar_sigma_m: DEFAULT_SONAR_SIGMA_M,
            confidence_threshold: DEFAULT_CONFIDENCE_THRESHOLD,
        }
    }
}

/// Everything one frame produced.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameOutcome {
    pub detections: Vec<DetectedObject>,
    pub sonar: Option<SonarReading>,
    pub decision: AlertDecision,
    pub tally: FrameTally,
}

impl PipelineConfig {
    /// Detector, gated sonar, buzzer, LED and scoring for one frame.
    pub fn process(&self, truth: &[TruthObject], frame_seed: u64) -> Result<FrameOutcome, PerceptionError> {
        let detections = run_detector(truth, &self.detector, seed::derive(frame_seed, "detector", 0))?;
        let sonar_active = sonar_gate(&detections);
        let sonar = sonar_active.then(|| {
            let nearest = nearest_zone_distance(truth).unwrap_or(SONAR_MAX_RANGE_M);
            read_sonar(nearest, self.sonar_sigma_m, seed::derive(frame_seed, "sonar", 0))
        });
        let buzzer_on = evaluate_collision(sonar_active, &sonar.unwrap_or(SonarReading::INVALID));
        let led_on = evaluate_stop_sign(&detections, self.confidence_threshold);
        let tally = score_frame(truth, &detections);
        Ok(FrameOutcome {
            detections,
            sonar,
            decision: AlertDecision {
                sonar_active,
                buzzer_on,
                led_on,
            },
            tally,
        })
    }
}

/// One line of the per-frame tally log: `frame_id,tp,fp,fn,tn,buzzer,led`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TallyLine {
    pub frame_id: u64,
    pub tally: FrameTally,
    pub buzzer: bool,
    pub led: bool,
}

impl fmt::Display for TallyLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let t = &self.tally;
        write!(
            f,
            "{},{},{},{},{},{},{}",
            self.frame_id,
            t.tp,
            t.fp,
            t.fn_,
            t.tn,
            u8::from(self.buzzer),
            u8::from(self.led)
        )
    }
}

impl FromStr for TallyLine {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        const FIELDS: [&str; 7] = ["frame_id", "tp", "fp", "fn", "tn", "buzzer", "led"];
        let parts: Vec<&str> = s.trim().split(',').map(str::trim).collect();
        if parts.len() != FIELDS.len() {
            return Err(format!("expected {} fields, found {}", FIELDS.len(), parts.len()));
        }
        let mut nums = [0u64; 7];
        for (i, (raw, name)) in parts.iter().zip(FIELDS).enumerate() {
            nums[i] = raw
                .parse()
                .map_err(|_| format!("field `{name}`: not a count: {raw:?}"))?;
        }
        let flag = |v: u64, name: &str| match v {
            0 => Ok(false),
            1 => Ok(true),
            _ => Err(format!("field `{name}`: expected 0 or 1, found {v}")),
        };
        Ok(TallyLine {
            frame_id: nums[0],
            tally: FrameTally::new(nums[1], nums[2], nums[3], nums[4]),
            buzzer: flag(nums[5], "buzzer")?,
            led: flag(nums[6], "led")?,
        })
    }
}

/// Parses a whole tally log. Blank lines and `#` comments are skipped.
pub fn parse_tally_log(text: &str) -> Result<Vec<TallyLine>, PerceptionError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
        .map(|(i, l)| {
            l.parse()
                .map_err(|reason| PerceptionError::TallyLine { line: i + 1, reason })
        })
        .collect()
}
