//! Acceptance suite: one pass/fail line per criterion.
//!
//! Runs without the libtest harness so the lines show up in plain
//! `cargo test` output. Exits nonzero when any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::seq::IndexedRandom;
use rand::Rng;

use smartbus_core::door::{DoorOpenKind, DoorState};
use smartbus_core::energy::{self, Bound};
use smartbus_core::geo::{GeoPoint, Polyline, Stop, StopRegistry};
use smartbus_core::metrics::{self, format_percent, MetricsReport, PerformanceSummary, FIELD_MATRIX, FIELD_REFERENCE};
use smartbus_core::netproto::{Body, Envelope, Sequencer};
use smartbus_core::perception::{self, DetectorModel, ObjectClass, PipelineConfig, TruthObject};
use smartbus_core::ridership::{bucket_floor, Direction, Granularity, PunchRecord};
use smartbus_core::seed;
use smartbus_core::server::{Role, Store};
use smartbus_core::simkernel::{self, load_scenario, random_scenario, GeneratorOptions, RunOptions};

const PAPER_DEMO: &str = include_str!("../../../fixtures/paper-demo.json");
const SCORED_FRAMES: &str = include_str!("../../../fixtures/scored-frames.tally");

// Pinned tolerances.
const ENERGY_TOL: f64 = 0.005;
const MAX_PANEL_TOL: f64 = 0.001;
const MAX_ANNUAL_TOL: f64 = 0.01;
const BATTERY_MIN_TOL: f64 = 0.005;
const BATTERY_MAX_TOL: f64 = 0.01;
const E2E_MIN_SUCCESS: f64 = 0.999;

const ROOT_SEED: u64 = 20_240_101;
const DAY_MS: i64 = 86_400_000;

/// Collects named checks for one criterion.
#[derive(Default)]
struct Checks {
    failed: Vec<String>,
    passed: usize,
}

impl Checks {
    fn check(&mut self, ok: bool, what: impl Into<String>) {
        if ok {
            self.passed += 1;
        } else {
            self.failed.push(what.into());
        }
    }

    fn near(&mut self, name: &str, got: f64, want: f64, tol: f64) {
        self.check(
            (got - want).abs() <= tol,
            format!("{name}: got {got:.6}, want {want} ± {tol}"),
        );
    }
}

struct Criterion {
    id: u32,
    name: &'static str,
    limit: Duration,
    run: fn(&mut Checks) -> String,
}

fn energy_criterion(c: &mut Checks) -> String {
    let profile = energy::display_profile();
    let min = energy::EnergyReport::compute(&profile, Bound::Min, 5.0, 12.0).unwrap();
    c.near("min daily Wh", min.daily_wh, 3.46, ENERGY_TOL);
    c.near("min panel W", min.panel_w, 0.69, ENERGY_TOL);
    c.near("min annual kWh", min.annual_kwh, 1.26, ENERGY_TOL);
    c.near("min battery Ah at 12 V", min.battery_ah, 0.29, BATTERY_MIN_TOL);

    let max = energy::EnergyReport::compute(&energy::with_led_hours(&profile, 24.0), Bound::Max, 5.0, 12.0).unwrap();
    let printed = format!("{:.3}", max.daily_wh);
    c.check(
        printed == "34.824",
        format!("max daily Wh prints {printed}, want 34.824"),
    );
    c.near("max panel W", max.panel_w, 6.964, MAX_PANEL_TOL);
    c.near("max annual kWh", max.annual_kwh, 12.71, MAX_ANNUAL_TOL);

    let literal = energy::daily_energy_wh(&energy::with_led_hours(&profile, 10.0), Bound::Max);
    c.near("max daily Wh at led-hours 10", literal, 33.424, 1e-9);
    let ah12 = energy::battery_ah(literal, 12.0).unwrap();
    let ah24 = energy::battery_ah(literal, 24.0).unwrap();
    c.near("battery Ah at 12 V", ah12, 2.78, BATTERY_MAX_TOL);
    c.near("battery Ah at 24 V", ah24, 1.39, BATTERY_MAX_TOL);
    format!(
        "min {:.3} Wh {:.4} W {:.3} kWh; max {printed} Wh {:.4} W {:.2} kWh; {ah12:.3}/{ah24:.3} Ah",
        min.daily_wh, min.panel_w, min.annual_kwh, max.panel_w, max.annual_kwh
    )
}

fn metrics_criterion(c: &mut Checks) -> String {
    let s = PerformanceSummary::from_rates(Some(0.988), Some(0.936), None);
    let (f1, fdr) = (format_percent(s.f1), format_percent(s.fdr));
    c.check(f1 == "96.1%", format!("f1 {f1}, want 96.1%"));
    c.check(fdr == "1.2%", format!("fdr {fdr}, want 1.2%"));

    let rows = perception::parse_tally_log(SCORED_FRAMES).unwrap();
    let m = metrics::aggregate(rows.iter().map(|r| &r.tally));
    c.check(
        (m.tp, m.fp, m.fn_, m.tn) == (31, 1, 2, 2),
        format!(
            "scored frames aggregate ({}, {}, {}, {}), want (31, 1, 2, 2)",
            m.tp, m.fp, m.fn_, m.tn
        ),
    );

    let field = MetricsReport::new(FIELD_MATRIX, Some(&FIELD_REFERENCE));
    let (p, r) = (
        format_percent(field.summary.precision),
        format_percent(field.summary.recall),
    );
    c.check(p == "95.0%", format!("field precision {p}, want 95.0%"));
    c.check(r == "97.4%", format!("field recall {r}, want 97.4%"));
    c.check(
        !field.discrepancies.is_empty(),
        "field report does not flag the discrepancy",
    );
    c.check(
        field.to_string().contains("differs from reference"),
        "discrepancy missing from the printed report",
    );
    format!(
        "f1 {f1} fdr {fdr}; scored frames ({}, {}, {}, {}); field {p}/{r}, {} discrepancies flagged",
        m.tp,
        m.fp,
        m.fn_,
        m.tn,
        field.discrepancies.len()
    )
}

fn random_truth(rng: &mut impl Rng, frame: u64) -> Vec<TruthObject> {
    let mut truth = Vec::new();
    for k in 0..rng.random_range(0..=3) {
        truth.push(TruthObject {
            object_id: format!("f{frame}o{k}"),
            class_label: *ObjectClass::HAZARDS.choose(rng).unwrap(),
            distance_m: rng.random_range(0.2..4.0),
            in_blind_zone: rng.random_bool(0.8),
        });
    }
    if rng.random_bool(0.3) {
        truth.push(TruthObject {
            object_id: format!("f{frame}bg"),
            class_label: ObjectClass::Background,
            distance_m: rng.random_range(0.5..8.0),
            in_blind_zone: rng.random_bool(0.5),
        });
    }
    if rng.random_bool(0.1) {
        truth.push(TruthObject {
            object_id: format!("f{frame}sign"),
            class_label: ObjectClass::StopSign,
            distance_m: rng.random_range(1.0..30.0),
            in_blind_zone: false,
        });
    }
    truth
}

fn blind_spot_criterion(c: &mut Checks) -> String {
    const FRAMES: u64 = 10_000;
    let noisy = PipelineConfig::default();
    let perfect = PipelineConfig {
        detector: DetectorModel::perfect(),
        sonar_sigma_m: 0.0,
        ..PipelineConfig::default()
    };
    let mut rng = seed::rng(seed::derive(ROOT_SEED, "blind-spot", 0));
    let (mut violations, mut sonar_reads, mut hazard_frames, mut buzzers) = (0u64, 0u64, 0u64, 0u64);
    let (mut perfect_fp, mut perfect_fn) = (0u64, 0u64);
    for frame in 0..FRAMES {
        let truth = random_truth(&mut rng, frame);
        let frame_seed = seed::derive(ROOT_SEED, "frame", frame);
        let out = noisy.process(&truth, frame_seed).unwrap();
        let detected = out.detections.iter().any(|d| d.class_label.is_hazard());
        let close = out.sonar.is_some_and(|s| s.valid && s.distance_m < 1.0);
        if out.decision.buzzer_on {
            buzzers += 1;
            if !(detected && close) {
                violations += 1;
            }
        }
        sonar_reads += u64::from(out.sonar.is_some());
        hazard_frames += u64::from(detected);

        let ideal = perfect.process(&truth, frame_seed).unwrap();
        perfect_fp += ideal.tally.fp;
        perfect_fn += ideal.tally.fn_;
    }
    c.check(
        violations == 0,
        format!("{violations} frames buzz without a close detected hazard"),
    );
    c.check(
        sonar_reads == hazard_frames,
        format!("{sonar_reads} sonar reads vs {hazard_frames} hazard-detection frames"),
    );
    c.check(
        perfect_fp == 0 && perfect_fn == 0,
        format!("perfect detector fp {perfect_fp} fn {perfect_fn}"),
    );

    // The same rule holds in the simulator's event log.
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let run = simkernel::run(&cfg).unwrap();
    let bad_events = run
        .events
        .of_kind("buzzer")
        .filter(|e| {
            !(e.detail["sonar_m"].as_f64().is_some_and(|d| d < 1.0) && e.detail["detections"].as_u64() > Some(0))
        })
        .count();
    c.check(
        bad_events == 0,
        format!("{bad_events} simulated buzzer events violate the rule"),
    );
    format!(
        "{FRAMES} frames, {buzzers} buzzing, {violations} violations; {sonar_reads} sonar reads = {hazard_frames} \
         detection frames; perfect fp {perfect_fp} fn {perfect_fn}"
    )
}

fn door_criterion(c: &mut Checks) -> String {
    const SCENARIOS: u64 = 60;
    let (mut emergencies, mut normals, mut opens_checked) = (0usize, 0usize, 0usize);
    for i in 0..SCENARIOS {
        let cfg = random_scenario(
            seed::derive(ROOT_SEED, "door", i),
            &GeneratorOptions {
                door_requests: 8,
                loss_probability: if i % 2 == 0 { 0.0 } else { 0.3 },
                ..GeneratorOptions::default()
            },
        );
        let run = simkernel::run(&cfg).unwrap();
        let opened: Vec<u64> = run
            .events
            .of_kind("door_emergency_open")
            .map(|e| e.detail["alert_id"].as_u64().unwrap())
            .collect();
        emergencies += opened.len();
        let mut sent: BTreeMap<u64, usize> = BTreeMap::new();
        for (_, env) in run.outbound.values().flatten() {
            if let Body::Alert(a) = &env.body {
                *sent.entry(a.alert_id).or_default() += 1;
            }
        }
        let mut stored: BTreeMap<u64, usize> = BTreeMap::new();
        for a in run.store.alerts() {
            *stored.entry(a.alert_id).or_default() += 1;
        }
        let opened_set: BTreeSet<u64> = opened.iter().copied().collect();
        c.check(
            opened_set.len() == opened.len(),
            format!("scenario {i}: an alert id was reused"),
        );
        c.check(
            opened.iter().all(|id| sent.get(id) == Some(&1)) && sent.len() == opened.len(),
            format!("scenario {i}: alert envelopes {sent:?} vs emergency opens {opened:?}"),
        );
        c.check(
            stored.values().all(|&n| n == 1) && stored.keys().copied().collect::<BTreeSet<_>>() == opened_set,
            format!("scenario {i}: server holds alerts {stored:?} for opens {opened:?}"),
        );
        for e in run.events.of_kind("door_normal_open") {
            normals += 1;
            let (d, r) = (
                e.detail["distance_m"].as_f64().unwrap(),
                e.detail["radius_m"].as_f64().unwrap(),
            );
            c.check(
                d <= r,
                format!("scenario {i}: normal open {d:.1} m from a stop with radius {r}"),
            );
        }
    }

    // The classifier itself, over random positions and registries.
    let mut rng = seed::rng(seed::derive(ROOT_SEED, "door-unit", 0));
    let line = Polyline::new(vec![GeoPoint::new(23.78, 90.40), GeoPoint::new(23.78, 90.43)]).unwrap();
    for _ in 0..20_000 {
        let stops: Vec<Stop> = (0..rng.random_range(0..4))
            .map(|k| Stop {
                id: format!("S{k}"),
                position: line.point_at(rng.random_range(0.0..line.length_m())),
                proximity_radius_m: 30.0,
            })
            .collect();
        let registry = StopRegistry::new(stops);
        let position = line.point_at(rng.random_range(0.0..line.length_m()));
        let radius = rng.random_range(5.0..60.0);
        let (_, outcome) = DoorState::default()
            .request_open(0, &position, &registry, rng.random_bool(0.5), radius)
            .unwrap();
        opens_checked += 1;
        if outcome.kind == DoorOpenKind::NormalOpen {
            c.check(
                outcome.distance_to_stop_m <= radius,
                format!(
                    "normal open at {:.1} m beyond radius {radius:.1}",
                    outcome.distance_to_stop_m
                ),
            );
        }
    }
    format!(
        "{SCENARIOS} scenarios: {emergencies} emergency opens, one alert each; {normals} normal opens inside the \
         radius; {opens_checked} classifier draws"
    )
}

fn e2e_criterion(c: &mut Checks) -> String {
    const TRIALS: u64 = 1000;
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let clean = simkernel::run_with(&cfg, &RunOptions::default()).unwrap();
    let mismatches = clean.seat_mismatches(&cfg);
    c.check(mismatches.is_empty(), format!("loss 0: {mismatches:?}"));

    let mut ok = 0u64;
    let mut first_failure = None;
    for trial in 0..TRIALS {
        let mut lossy = cfg.clone();
        lossy.seed = seed::derive(ROOT_SEED, "e2e", trial);
        lossy.channels.bus.loss_probability = 0.3;
        lossy.channels.stop.loss_probability = 0.3;
        let run = simkernel::run_with(&lossy, &RunOptions::default()).unwrap();
        let m = run.seat_mismatches(&lossy);
        if m.is_empty() {
            ok += 1;
        } else if first_failure.is_none() {
            first_failure = Some((trial, m));
        }
    }
    let rate = ok as f64 / TRIALS as f64;
    c.check(
        rate >= E2E_MIN_SUCCESS,
        format!("loss 0.3: {ok}/{TRIALS} consistent; first failure {first_failure:?}"),
    );
    format!(
        "loss 0: {} displays consistent; loss 0.3: {ok}/{TRIALS} trials consistent ({:.1}%)",
        clean.displays.len(),
        rate * 100.0
    )
}

fn determinism_criterion(c: &mut Checks) -> String {
    const SCENARIOS: u64 = 100;
    let demo = load_scenario(PAPER_DEMO).unwrap();
    let a = simkernel::run(&demo).unwrap().events.to_ndjson();
    let b = simkernel::run(&demo).unwrap().events.to_ndjson();
    c.check(a == b, "demo scenario event logs differ between runs");

    let dir = tempfile::tempdir().unwrap();
    let mut compared = 0;
    for i in 0..SCENARIOS {
        let cfg = random_scenario(
            seed::derive(ROOT_SEED, "restart", i),
            &GeneratorOptions {
                loss_probability: 0.2,
                ..GeneratorOptions::default()
            },
        );
        let log = dir.path().join(format!("server-{i}.log"));
        let run = simkernel::run_with(
            &cfg,
            &RunOptions {
                record_events: i % 10 == 0,
                server_log: Some(log.clone()),
            },
        )
        .unwrap();
        if i % 10 == 0 {
            let again = simkernel::run(&cfg).unwrap();
            c.check(
                run.events.to_ndjson() == again.events.to_ndjson(),
                format!("scenario {i}: event logs differ between runs"),
            );
        }
        let restarted = Store::open(&log, cfg.network()).unwrap();
        let (before, after) = (run.store.snapshot(), restarted.snapshot());
        c.check(
            before == after,
            format!("scenario {i}: restarted server answers differently"),
        );
        compared += 1;
    }
    format!(
        "demo scenario {} bytes identical twice; {compared} restarts answer identically",
        a.len()
    )
}

fn ledger_criterion(c: &mut Checks) -> String {
    const SCHEDULES: u64 = 100;
    // 2024-01-03 is a Wednesday, so schedules straddle week boundaries.
    const START: i64 = 1_704_240_000_000;
    let mut points = 0usize;
    let mut total_boards = 0u64;
    for s in 0..SCHEDULES {
        let mut rng = seed::rng(seed::derive(ROOT_SEED, "ledger", s));
        let buses: Vec<String> = (0..rng.random_range(1..=3)).map(|b| format!("B{b}")).collect();
        let cards: Vec<String> = (0..rng.random_range(2..=30)).map(|k| format!("C{k:02}")).collect();
        let mut riding: BTreeMap<String, String> = BTreeMap::new();
        let mut seqs: BTreeMap<String, Sequencer> = buses
            .iter()
            .map(|b| (b.clone(), Sequencer::new(format!("bus:{b}"))))
            .collect();
        let mut store = Store::default();
        let mut sent: Vec<Envelope> = Vec::new();
        let mut expected: BTreeMap<String, i64> = BTreeMap::new();
        let mut ts = START + rng.random_range(0..DAY_MS);
        let mut records = Vec::new();
        for _ in 0..rng.random_range(20..300) {
            ts += rng.random_range(1_000..4 * 3_600_000);
            let card = cards.choose(&mut rng).unwrap().clone();
            let (bus, direction) = match riding.remove(&card) {
                Some(bus) => (bus, Direction::Exit),
                None => {
                    let bus = buses.choose(&mut rng).unwrap().clone();
                    riding.insert(card.clone(), bus.clone());
                    (bus, Direction::Board)
                }
            };
            let punch = PunchRecord {
                timestamp: ts,
                bus_id: bus.clone(),
                card_id: card,
                direction,
                stop_id: None,
            };
            records.push(punch.clone());
            let env = seqs.get_mut(&bus).unwrap().envelope(ts, Body::Punch(punch));
            sent.push(env.clone());
            store.ingest(env, ts).unwrap();
            // At-least-once delivery: replay an earlier envelope now and then.
            if rng.random_bool(0.2) {
                let dup = sent.choose(&mut rng).unwrap().clone();
                store.ingest(dup, ts).unwrap();
            }
            *expected.entry(bus).or_default() += match direction {
                Direction::Board => 1,
                Direction::Exit => -1,
            };
            for b in &buses {
                let want = expected.get(b).copied().unwrap_or(0);
                c.check(
                    store.net_boardings(b) == want,
                    format!(
                        "schedule {s} at {ts}: {b} occupancy {} vs boards - exits {want}",
                        store.net_boardings(b)
                    ),
                );
                points += 1;
            }
        }

        let from = bucket_floor(START, Granularity::Weekly).unwrap();
        let to = bucket_floor(ts, Granularity::Weekly).unwrap() + 7 * DAY_MS;
        let daily = store
            .passenger_report(Some(Role::Admin), from, to, Granularity::Daily)
            .unwrap();
        let weekly = store
            .passenger_report(Some(Role::Admin), from, to, Granularity::Weekly)
            .unwrap();
        for w in &weekly {
            let sum: u64 = daily
                .iter()
                .filter(|d| w.bucket_start <= d.bucket_start && d.bucket_start < w.bucket_start + 7 * DAY_MS)
                .map(|d| d.boardings)
                .sum();
            c.check(
                sum == w.boardings,
                format!(
                    "schedule {s}: week {} has {} vs daily sum {sum}",
                    w.bucket_start, w.boardings
                ),
            );
        }
        // Brute-force daily oracle straight from the records.
        let mut per_day: BTreeMap<i64, u64> = BTreeMap::new();
        for r in records.iter().filter(|r| r.direction == Direction::Board) {
            *per_day.entry(r.timestamp.div_euclid(DAY_MS) * DAY_MS).or_default() += 1;
        }
        for d in &daily {
            let want = per_day.get(&d.bucket_start).copied().unwrap_or(0);
            c.check(
                d.boardings == want,
                format!("schedule {s}: day {} has {} vs {want}", d.bucket_start, d.boardings),
            );
        }
        total_boards += per_day.values().sum::<u64>();
    }
    format!("{SCHEDULES} schedules, {points} occupancy checkpoints, {total_boards} boardings bucketed")
}

fn main() -> ExitCode {
    let criteria = [
        Criterion {
            id: 1,
            name: "energy sizing",
            limit: Duration::from_secs(1),
            run: energy_criterion,
        },
        Criterion {
            id: 2,
            name: "detection metrics",
            limit: Duration::from_secs(1),
            run: metrics_criterion,
        },
        Criterion {
            id: 3,
            name: "blind-spot pipeline",
            limit: Duration::from_secs(30),
            run: blind_spot_criterion,
        },
        Criterion {
            id: 4,
            name: "door classification",
            limit: Duration::from_secs(10),
            run: door_criterion,
        },
        Criterion {
            id: 5,
            name: "end-to-end seat display",
            limit: Duration::from_secs(120),
            run: e2e_criterion,
        },
        Criterion {
            id: 6,
            name: "determinism and restart",
            limit: Duration::from_secs(120),
            run: determinism_criterion,
        },
        Criterion {
            id: 7,
            name: "ledger conservation",
            limit: Duration::from_secs(30),
            run: ledger_criterion,
        },
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failures = 0;
    for cr in criteria {
        if !filter.is_empty()
            && !filter
                .iter()
                .any(|f| cr.name.contains(f.as_str()) || f == &cr.id.to_string())
        {
            continue;
        }
        let started = Instant::now();
        let mut checks = Checks::default();
        let summary = (cr.run)(&mut checks);
        let elapsed = started.elapsed();
        checks.check(elapsed <= cr.limit, format!("took {elapsed:.2?}, limit {:?}", cr.limit));
        let verdict = if checks.failed.is_empty() { "PASS" } else { "FAIL" };
        println!(
            "criterion {} {}: {verdict} ({} checks, {:.2?}) {summary}",
            cr.id,
            cr.name,
            checks.passed + checks.failed.len(),
            elapsed
        );
        for f in checks.failed.iter().take(10) {
            println!("    {f}");
        }
        if !checks.failed.is_empty() {
            failures += 1;
        }
    }
    if failures > 0 {
        println!("{failures} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
