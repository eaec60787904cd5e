//! RFID punch ledger, onboard occupancy, seat availability, and
//! calendar-bucketed boarding reports.
//!
//! A single reader serves both doors, so direction is inferred by toggling
//! per (card, bus): the first punch boards, the next exits.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, Datelike, Duration, NaiveDate, TimeZone, Utc};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Milliseconds since the Unix epoch, UTC.
pub type Timestamp = i64;

#[derive(Debug, Error, PartialEq)]
pub enum RidershipError {
    #[error("bus {bus_id} is full ({capacity} seats, standing not allowed)")]
    Capacity { bus_id: String, capacity: u32 },
    #[error("punch at {ts} precedes last record at {last} on bus {bus_id}")]
    OutOfOrder {
        bus_id: String,
        ts: Timestamp,
        last: Timestamp,
    },
    #[error("invalid report window [{start}, {end})")]
    InvalidWindow { start: Timestamp, end: Timestamp },
    #[error("timestamp {0} is outside the representable calendar range")]
    BadTimestamp(Timestamp),
    #[error("unknown granularity {0:?}")]
    UnknownGranularity(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Board,
    Exit,
}

/// One card tap. Field order is the persisted line order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PunchRecord {
    pub timestamp: Timestamp,
    pub bus_id: String,
    pub card_id: String,
    pub direction: Direction,
    pub stop_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OccupancyState {
    pub onboard: BTreeSet<String>,
    pub capacity: u32,
    pub standing_allowed: bool,
}

impl OccupancyState {
    pub fn new(capacity: u32, standing_allowed: bool) -> Self {
        Self {
            onboard: BTreeSet::new(),
            capacity,
            standing_allowed,
        }
    }

    pub fn count(&self) -> u32 {
        self.onboard.len() as u32
    }
}

pub fn seats_available(state: &OccupancyState) -> u32 {
    state.capacity.saturating_sub(state.count())
}

/// Punch history and occupancy for one bus. Single writer.
#[derive(Debug, Clone, PartialEq)]
pub struct BusLedger {
    bus_id: String,
    occupancy: OccupancyState,
    records: Vec<PunchRecord>,
}

impl BusLedger {
    pub fn new(bus_id: impl Into<String>, capacity: u32, standing_allowed: bool) -> Self {
        Self {
            bus_id: bus_id.into(),
            occupancy: OccupancyState::new(capacity, standing_allowed),
            records: Vec::new(),
        }
    }

    pub fn bus_id(&self) -> &str {
        &self.bus_id
    }

    pub fn occupancy(&self) -> &OccupancyState {
        &self.occupancy
    }

    pub fn records(&self) -> &[PunchRecord] {
        &self.records
    }

    pub fn is_onboard(&self, card_id: &str) -> bool {
        self.occupancy.onboard.contains(card_id)
    }

    pub fn punch(
        &mut self,
        card_id: &str,
        timestamp: Timestamp,
        stop_id: Option<&str>,
    ) -> Result<PunchRecord, RidershipError> {
        if let Some(last) = self.records.last() {
            if timestamp < last.timestamp {
                return Err(RidershipError::OutOfOrder {
                    bus_id: self.bus_id.clone(),
                    ts: timestamp,
                    last: last.timestamp,
                });
            }
        }
        let direction = if self.occupancy.onboard.contains(card_id) {
            Direction::Exit
        } else {
            let occ = &self.occupancy;
            if !occ.standing_allowed && occ.count() >= occ.capacity {
                return Err(RidershipError::Capacity {
                    bus_id: self.bus_id.clone(),
                    capacity: occ.capacity,
                });
            }
            Direction::Board
        };
        match direction {
            Direction::Board => self.occupancy.onboard.insert(card_id.to_owned()),
            Direction::Exit => self.occupancy.onboard.remove(card_id),
        };
        let record = PunchRecord {
            timestamp,
            bus_id: self.bus_id.clone(),
            card_id: card_id.to_owned(),
            direction,
            stop_id: stop_id.map(str::to_owned),
        };
        self.records.push(record.clone());
        Ok(record)
    }
}

/// A card boarding one bus while still counted aboard another.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CrossBusAnomaly {
    pub card_id: String,
    pub boarded_bus: String,
    pub still_on: String,
    pub timestamp: Timestamp,
}

/// Ledgers for a fleet. Cross-bus anomalies are logged, not interpreted.
#[derive(Debug, Clone, Default)]
pub struct FleetLedger {
    buses: BTreeMap<String, BusLedger>,
    anomalies: Vec<CrossBusAnomaly>,
}

impl FleetLedger {
    pub fn add_bus(&mut self, bus_id: &str, capacity: u32, standing_allowed: bool) {
        self.buses
            .entry(bus_id.to_owned())
            .or_insert_with(|| BusLedger::new(bus_id, capacity, standing_allowed));
    }

    pub fn bus(&self, bus_id: &str) -> Option<&BusLedger> {
        self.buses.get(bus_id)
    }

    pub fn anomalies(&self) -> &[CrossBusAnomaly] {
        &self.anomalies
    }

    /// Punches on `bus_id`. Unknown buses get an unbounded soft-capacity ledger.
    pub fn punch(
        &mut self,
        bus_id: &str,
        card_id: &str,
        timestamp: Timestamp,
        stop_id: Option<&str>,
    ) -> Result<PunchRecord, RidershipError> {
        self.add_bus(bus_id, u32::MAX, true);
        let record = self.buses.get_mut(bus_id).unwrap().punch(card_id, timestamp, stop_id)?;
        if record.direction == Direction::Board {
            for (other, ledger) in &self.buses {
                if other != bus_id && ledger.is_onboard(card_id) {
                    self.anomalies.push(CrossBusAnomaly {
                        card_id: card_id.to_owned(),
                        boarded_bus: bus_id.to_owned(),
                        still_on: other.clone(),
                        timestamp,
                    });
                }
            }
        }
        Ok(record)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    Hourly,
    Daily,
    Weekly,
    Monthly,
}

impl fmt::Display for Granularity {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Granularity::Hourly => "hourly",
            Granularity::Daily => "daily",
            Granularity::Weekly => "weekly",
            Granularity::Monthly => "monthly",
        })
    }
}

impl FromStr for Granularity {
    type Err = RidershipError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "hourly" => Ok(Granularity::Hourly),
            "daily" => Ok(Granularity::Daily),
            "weekly" => Ok(Granularity::Weekly),
            "monthly" => Ok(Granularity::Monthly),
            other => Err(RidershipError::UnknownGranularity(other.to_owned())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RidershipBucket {
    pub bucket_start: Timestamp,
    pub granularity: Granularity,
    pub boardings: u64,
}

fn to_datetime(ts: Timestamp) -> Result<DateTime<Utc>, RidershipError> {
    Utc.timestamp_millis_opt(ts)
        .single()
        .ok_or(RidershipError::BadTimestamp(ts))
}

/// Start of the UTC calendar bucket containing `ts`. Weeks start Monday.
pub fn bucket_floor(ts: Timestamp, granularity: Granularity) -> Result<Timestamp, RidershipError> {
    const HOUR: i64 = 3_600_000;
    const DAY: i64 = 24 * HOUR;
    let floored = match granularity {
        Granularity::Hourly => ts.div_euclid(HOUR) * HOUR,
        Granularity::Daily => ts.div_euclid(DAY) * DAY,
        Granularity::Weekly => {
            let day = ts.div_euclid(DAY) * DAY;
            let weekday = to_datetime(day)?.weekday().num_days_from_monday();
            day - i64::from(weekday) * DAY
        }
        Granularity::Monthly => {
            let dt = to_datetime(ts)?;
            let first = NaiveDate::from_ymd_opt(dt.year(), dt.month(), 1)
                .and_then(|d| d.and_hms_opt(0, 0, 0))
                .ok_or(RidershipError::BadTimestamp(ts))?;
            first.and_utc().timestamp_millis()
        }
    };
    Ok(floored)
}

fn next_bucket(start: Timestamp, granularity: Granularity) -> Result<Timestamp, RidershipError> {
    let dt = to_datetime(start)?;
    let next = match granularity {
        Granularity::Hourly => dt + Duration::hours(1),
        Granularity::Daily => dt + Duration::days(1),
        Granularity::Weekly => dt + Duration::weeks(1),
        Granularity::Monthly => {
            let (y, m) = if dt.month() == 12 {
                (dt.year() + 1, 1)
            } else {
                (dt.year(), dt.month() + 1)
            };
            Utc.with_ymd_and_hms(y, m, 1, 0, 0, 0)
                .single()
                .ok_or(RidershipError::BadTimestamp(start))?
        }
    };
    Ok(next.timestamp_millis())
}

/// Counts boardings in `[start, end)` into calendar-aligned buckets.
///
/// Buckets cover every calendar period overlapping the window, including
/// empty ones; only records inside the window are counted.
pub fn aggregate(
    records: &[PunchRecord],
    start: Timestamp,
    end: Timestamp,
    granularity: Granularity,
) -> Result<Vec<RidershipBucket>, RidershipError> {
    if start >= end {
        return Err(RidershipError::InvalidWindow { start, end });
    }
    let mut starts = Vec::new();
    let mut cursor = bucket_floor(start, granularity)?;
    while cursor < end {
        starts.push(cursor);
        cursor = next_bucket(cursor, granularity)?;
    }
    let mut counts = vec![0u64; starts.len()];
    for r in records {
        if r.direction != Direction::Board || r.timestamp < start || r.timestamp >= end {
            continue;
        }
        let idx = starts.partition_point(|&s| s <= r.timestamp) - 1;
        counts[idx] += 1;
    }
    Ok(starts
        .into_iter()
        .zip(counts)
        .map(|(bucket_start, boardings)| RidershipBucket {
            bucket_start,
            granularity,
            boardings,
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // 2024-01-01 is a Monday.
    const MONDAY: Timestamp = 1_704_067_200_000;
    const MIN: i64 = 60_000;
    const HOUR: i64 = 60 * MIN;

    fn board(ts: Timestamp) -> PunchRecord {
        PunchRecord {
            timestamp: ts,
            bus_id: "B1".into(),
            card_id: format!("c{ts}"),
            direction: Direction::Board,
            stop_id: None,
        }
    }

    #[test]
    fn toggling_punches() {
        let mut l = BusLedger::new("B1", 40, true);
        let r = l.punch("A", 1, Some("S1")).unwrap();
        assert_eq!(r.direction, Direction::Board);
        assert_eq!(l.occupancy().count(), 1);
        let r = l.punch("A", 2, Some("S2")).unwrap();
        assert_eq!(r.direction, Direction::Exit);
        assert!(l.occupancy().onboard.is_empty());
    }

    #[test]
    fn full_bus_without_standing_rejects_boarding() {
        let mut l = BusLedger::new("B1", 1, false);
        l.punch("A", 1, None).unwrap();
        assert_eq!(
            l.punch("B", 2, None),
            Err(RidershipError::Capacity {
                bus_id: "B1".into(),
                capacity: 1
            })
        );
        // Exits are still allowed when full.
        assert_eq!(l.punch("A", 3, None).unwrap().direction, Direction::Exit);
    }

    #[test]
    fn out_of_order_punch_rejected() {
        let mut l = BusLedger::new("B1", 10, true);
        l.punch("A", 10, None).unwrap();
        assert!(matches!(l.punch("B", 9, None), Err(RidershipError::OutOfOrder { .. })));
        assert_eq!(l.records().len(), 1);
    }

    #[test]
    fn seat_availability() {
        let mut occ = OccupancyState::new(40, true);
        assert_eq!(seats_available(&occ), 40);
        occ.onboard.extend((0..12).map(|i| i.to_string()));
        assert_eq!(seats_available(&occ), 28);
        occ.onboard.extend((12..45).map(|i| i.to_string()));
        assert_eq!(seats_available(&occ), 0);
    }

    #[test]
    fn cross_bus_boarding_is_logged() {
        let mut fleet = FleetLedger::default();
        fleet.add_bus("B1", 40, true);
        fleet.add_bus("B2", 40, true);
        fleet.punch("B1", "A", 1, None).unwrap();
        fleet.punch("B2", "A", 2, None).unwrap();
        assert_eq!(fleet.anomalies().len(), 1);
        assert_eq!(fleet.anomalies()[0].still_on, "B1");
    }

    #[test]
    fn hourly_example() {
        let nine = MONDAY + 9 * HOUR;
        let recs = vec![board(nine + 5 * MIN), board(nine + 40 * MIN), board(nine + 70 * MIN)];
        let buckets = aggregate(&recs, nine, nine + 2 * HOUR, Granularity::Hourly).unwrap();
        let got: Vec<_> = buckets.iter().map(|b| (b.bucket_start, b.boardings)).collect();
        assert_eq!(got, vec![(nine, 2), (nine + HOUR, 1)]);
    }

    #[test]
    fn exits_are_not_counted() {
        let mut exit = board(MONDAY + 30 * MIN);
        exit.direction = Direction::Exit;
        let recs = vec![board(MONDAY + 10 * MIN), exit];
        let b = aggregate(&recs, MONDAY, MONDAY + HOUR, Granularity::Hourly).unwrap();
        assert_eq!(b.len(), 1);
        assert_eq!(b[0].boardings, 1);
    }

    #[test]
    fn empty_ledger_gives_zero_buckets() {
        let b = aggregate(&[], MONDAY, MONDAY + 3 * HOUR, Granularity::Hourly).unwrap();
        assert_eq!(b.len(), 3);
        assert!(b.iter().all(|b| b.boardings == 0));
    }

    #[test]
    fn invalid_window() {
        assert!(matches!(
            aggregate(&[], 5, 5, Granularity::Daily),
            Err(RidershipError::InvalidWindow { .. })
        ));
    }

    #[test]
    fn weekly_buckets_start_monday() {
        let wednesday = MONDAY + 2 * 24 * HOUR + 5 * HOUR;
        assert_eq!(bucket_floor(wednesday, Granularity::Weekly).unwrap(), MONDAY);
        let sunday_night = MONDAY - MIN;
        assert_eq!(
            bucket_floor(sunday_night, Granularity::Weekly).unwrap(),
            MONDAY - 7 * 24 * HOUR
        );
    }

    #[test]
    fn monthly_buckets_follow_the_calendar() {
        // 2024 is a leap year: Feb has 29 days.
        let feb1 = MONDAY + 31 * 24 * HOUR;
        let mar1 = feb1 + 29 * 24 * HOUR;
        let b = aggregate(&[board(feb1 + 1), board(mar1)], MONDAY, mar1 + 1, Granularity::Monthly).unwrap();
        let got: Vec<_> = b.iter().map(|b| (b.bucket_start, b.boardings)).collect();
        assert_eq!(got, vec![(MONDAY, 0), (feb1, 1), (mar1, 1)]);
    }

    #[test]
    fn persisted_field_order() {
        let r = PunchRecord {
            timestamp: 7,
            bus_id: "B1".into(),
            card_id: "A".into(),
            direction: Direction::Board,
            stop_id: Some("S1".into()),
        };
        assert_eq!(
            serde_json::to_string(&r).unwrap(),
            r#"{"timestamp":7,"bus_id":"B1","card_id":"A","direction":"board","stop_id":"S1"}"#
        );
    }

    proptest! {
        #[test]
        fn prefix_occupancy_is_boards_minus_exits(cards in prop::collection::vec(0u8..6, 0..120)) {
            let mut l = BusLedger::new("B1", 3, true);
            let (mut boards, mut exits) = (0i64, 0i64);
            for (i, c) in cards.iter().enumerate() {
                let r = l.punch(&c.to_string(), i as i64, None).unwrap();
                match r.direction {
                    Direction::Board => boards += 1,
                    Direction::Exit => exits += 1,
                }
                prop_assert!(boards - exits >= 0);
                prop_assert_eq!(l.occupancy().count() as i64, boards - exits);
            }
        }

        #[test]
        fn bounded_capacity_never_exceeded(cards in prop::collection::vec(0u8..5, 0..120)) {
            let mut l = BusLedger::new("B1", 1, false);
            for (i, c) in cards.iter().enumerate() {
                let _ = l.punch(&c.to_string(), i as i64, None);
                prop_assert!(l.occupancy().count() <= 1);
            }
            // Independent replay of the accepted records.
            let mut onboard = BTreeSet::new();
            for r in l.records() {
                match r.direction {
                    Direction::Board => prop_assert!(onboard.insert(r.card_id.clone())),
                    Direction::Exit => prop_assert!(onboard.remove(&r.card_id)),
                }
                prop_assert!(onboard.len() <= 1);
            }
        }

        #[test]
        fn hourly_buckets_conserve_boardings(offsets in prop::collection::vec(0i64..(72 * HOUR), 0..80),
                                              lo in 0i64..(24 * HOUR), span in 1i64..(48 * HOUR)) {
            let recs: Vec<_> = offsets.iter().map(|o| board(MONDAY + o)).collect();
            let (start, end) = (MONDAY + lo, MONDAY + lo + span);
            let total: u64 = aggregate(&recs, start, end, Granularity::Hourly).unwrap()
                .iter().map(|b| b.boardings).sum();
            let brute = recs.iter().filter(|r| r.timestamp >= start && r.timestamp < end).count() as u64;
            prop_assert_eq!(total, brute);
        }
    }
}
