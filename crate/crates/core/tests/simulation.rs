use std::collections::{BTreeMap, BTreeSet};

use smartbus_core::geo::{GeoPoint, Polyline, Stop};
use smartbus_core::perception::{DetectorModel, PipelineConfig};
use smartbus_core::ridership::Direction;
use smartbus_core::server::Store;
use smartbus_core::simkernel::*;

const PAPER_DEMO: &str = include_str!("../../../fixtures/paper-demo.json");

fn line() -> Vec<GeoPoint> {
    // Roughly 1 km due east.
    vec![GeoPoint::new(23.78, 90.40), GeoPoint::new(23.78, 90.40982)]
}

fn two_stop_scenario(duration_s: f64) -> ScenarioConfig {
    let pts = line();
    let mut cfg = random_scenario(1, &GeneratorOptions::default());
    cfg.name = "two-stop".into();
    cfg.duration_s = duration_s;
    cfg.routes = vec![RouteSpec {
        id: "R".into(),
        points: pts.clone(),
        circular: false,
    }];
    cfg.stops = vec![
        Stop {
            id: "A".into(),
            position: pts[0],
            proximity_radius_m: 30.0,
        },
        Stop {
            id: "B".into(),
            position: pts[1],
            proximity_radius_m: 30.0,
        },
    ];
    cfg.buses = vec![BusSpec {
        id: "B1".into(),
        route: "R".into(),
        capacity: 40,
        standing_allowed: false,
        speed_mps: 10.0,
        speed_schedule: vec![],
        depart_s: 0.0,
        dwell_s: 10.0,
        proximity_radius_m: 30.0,
        perception: PipelineConfig::default(),
    }];
    cfg.passengers = ["X", "Y"]
        .iter()
        .map(|c| PassengerSpec {
            card: (*c).into(),
            stop: "A".into(),
            destination: "B".into(),
            time_s: 0.0,
        })
        .collect();
    cfg.door_requests.clear();
    cfg.random_hazards = None;
    cfg
}

#[test]
fn paper_demo_loads_runs_and_is_consistent() {
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let r = run(&cfg).unwrap();
    assert!(r.stats.quiescent);
    assert_eq!(r.stats.failed, 0);
    assert!(r.stats.punches > 0 && r.stats.emergency_opens == 1);
    assert_eq!(r.seat_mismatches(&cfg), vec![]);
}

#[test]
fn same_seed_same_bytes() {
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let a = run(&cfg).unwrap().events.to_ndjson();
    let b = run(&cfg).unwrap().events.to_ndjson();
    assert_eq!(a, b);
    let mut other = cfg.clone();
    other.seed += 1;
    assert_ne!(a, run(&other).unwrap().events.to_ndjson());
}

#[test]
fn log_round_trips_and_is_ordered() {
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let log = run(&cfg).unwrap().events;
    let text = log.to_ndjson();
    assert_eq!(EventLog::parse_ndjson(&text).unwrap(), log);
    for w in log.events.windows(2) {
        let (a, b) = (&w[0], &w[1]);
        assert!(a.t <= b.t);
        if a.t == b.t && b.node != "sim" {
            assert!((&a.node, &a.kind) <= (&b.node, &b.kind), "{a:?} then {b:?}");
        }
    }
}

#[test]
fn empty_scenario_has_only_markers() {
    let cfg = load_scenario(r#"{"version":1,"seed":3,"duration_s":10}"#).unwrap();
    let r = run(&cfg).unwrap();
    let kinds: Vec<_> = r.events.events.iter().map(|e| e.kind.as_str()).collect();
    assert_eq!(kinds, ["start", "end"]);
}

#[test]
fn two_passengers_stay_counted_until_they_exit() {
    // 100 s to cover 1 km; at 60 s both riders are aboard.
    let mid = run(&two_stop_scenario(60.0)).unwrap();
    assert_eq!(mid.store.occupancy("B1"), 2);
    assert_eq!(mid.ledgers["B1"].occupancy().count(), 2);
    let done = run(&two_stop_scenario(200.0)).unwrap();
    assert_eq!(done.store.occupancy("B1"), 0);
    let dirs: Vec<_> = done.ledgers["B1"].records().iter().map(|p| p.direction).collect();
    assert_eq!(
        dirs,
        [Direction::Board, Direction::Board, Direction::Exit, Direction::Exit]
    );
}

#[test]
fn validation_reports_every_error() {
    let mut cfg = two_stop_scenario(0.0);
    cfg.buses[0].route = "nowhere".into();
    cfg.passengers[0].time_s = 9.0;
    cfg.displays.push(DisplaySpec {
        stop: "Z".into(),
        clock_skew_s: 0,
        soc_trace: vec![],
    });
    let text = serde_json::to_string(&cfg).unwrap();
    let Err(ScenarioError::Invalid(errors)) = load_scenario(&text) else {
        panic!("expected validation errors");
    };
    let joined = errors.join("\n");
    for needle in [
        "duration_s",
        "unknown route \"nowhere\"",
        "not sorted",
        "unknown stop \"Z\"",
        "no bus serves",
    ] {
        assert!(joined.contains(needle), "missing {needle:?} in:\n{joined}");
    }
}

#[test]
fn unknown_fields_and_versions_rejected() {
    assert!(matches!(
        load_scenario(r#"{"version":1,"seed":3,"duration_s":10,"speed":4}"#),
        Err(ScenarioError::Parse(_))
    ));
    assert!(matches!(
        load_scenario(r#"{"version":2,"seed":3,"duration_s":10}"#),
        Err(ScenarioError::Invalid(_))
    ));
}

#[test]
fn advance_bus_kinematics() {
    let route = Polyline::new(vec![
        GeoPoint::new(0.0, 0.0),
        GeoPoint::new(0.0, 0.001),
        GeoPoint::new(0.001, 0.001),
    ])
    .unwrap();
    let seg = route.points()[0].distance_m(&route.points()[1]);
    let s = BusKinematics {
        along_m: 0.0,
        speed_mps: 10.0,
    };
    assert!((advance_bus(s, &route, false, 1.0).along_m - 10.0).abs() < 1e-9);

    // Crossing the vertex carries the remainder onto the next segment.
    let near = BusKinematics {
        along_m: seg - 4.0,
        ..s
    };
    let past = advance_bus(near, &route, false, 1.0);
    let p = route.point_at(past.along_m);
    assert!((p.distance_m(&route.points()[1]) - 6.0).abs() < 0.01);

    // Constant speed covers the route in length / speed.
    let mut k = s;
    let mut steps = 0;
    while k.along_m < route.length_m() {
        k = advance_bus(k, &route, false, 0.1);
        steps += 1;
    }
    assert_eq!(steps, (route.length_m() / 10.0 / 0.1).ceil() as usize);
    assert_eq!(advance_bus(k, &route, false, 5.0).along_m, route.length_m());
    let wrapped = advance_bus(k, &route, true, 1.0);
    assert!((wrapped.along_m - 10.0).abs() < 1e-6);
}

#[test]
fn deliveries_follow_sends_and_punches_need_an_open_door() {
    for seed in 0..10 {
        let cfg = random_scenario(
            seed,
            &GeneratorOptions {
                loss_probability: 0.2,
                ..GeneratorOptions::default()
            },
        );
        let r = run(&cfg).unwrap();
        let mut sent: BTreeMap<(String, String, u64), u64> = BTreeMap::new();
        let mut open: BTreeMap<String, bool> = BTreeMap::new();
        for e in &r.events.events {
            match e.kind.as_str() {
                "send" => {
                    let key = (
                        e.node.clone(),
                        e.detail["to"].as_str().unwrap().to_owned(),
                        e.detail["seq"].as_u64().unwrap(),
                    );
                    sent.entry(key).or_insert(e.t);
                }
                "recv" => {
                    let key = (
                        e.detail["from"].as_str().unwrap().to_owned(),
                        e.node.clone(),
                        e.detail["seq"].as_u64().unwrap(),
                    );
                    // Acks all carry seq 0; only check sequenced traffic.
                    if key.2 > 0 {
                        let at = sent.get(&key).unwrap_or_else(|| panic!("recv without send: {e:?}"));
                        assert!(*at <= e.t);
                    }
                }
                "door_normal_open" if e.detail.get("forced").is_none() => {
                    open.insert(e.node.clone(), true);
                }
                "door_close" => {
                    open.insert(e.node.clone(), false);
                }
                "punch" => assert_eq!(open.get(&e.node), Some(&true), "punch with closed door: {e:?}"),
                _ => {}
            }
        }
    }
}

#[test]
fn buzzer_events_match_close_detected_frames() {
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let r = run(&cfg).unwrap();
    let buzzers: Vec<_> = r.events.of_kind("buzzer").collect();
    assert_eq!(buzzers.len() as u64, r.stats.buzzer_frames);
    assert!(!buzzers.is_empty());
    for b in buzzers {
        assert!(b.detail["sonar_m"].as_f64().unwrap() < 1.0);
        assert!(b.detail["detections"].as_u64().unwrap() >= 1);
    }
}

#[test]
fn occupancy_is_conserved_across_log_server_and_ledger() {
    for seed in 0..10 {
        let cfg = random_scenario(
            seed,
            &GeneratorOptions {
                loss_probability: 0.3,
                ..GeneratorOptions::default()
            },
        );
        let r = run(&cfg).unwrap();
        let mut net: BTreeMap<String, i64> = BTreeMap::new();
        for e in r.events.of_kind("punch") {
            let bus = e.node.trim_start_matches("bus:").to_owned();
            *net.entry(bus).or_default() += if e.detail["direction"] == "board" { 1 } else { -1 };
        }
        for (bus, ledger) in &r.ledgers {
            let from_log = net.get(bus).copied().unwrap_or(0);
            assert_eq!(from_log, i64::from(ledger.occupancy().count()));
            assert_eq!(r.store.net_boardings(bus), from_log);
        }
    }
}

#[test]
fn dark_display_drops_broadcasts_and_recovers() {
    let mut cfg = two_stop_scenario(3_700.0);
    cfg.displays = vec![DisplaySpec {
        stop: "B".into(),
        clock_skew_s: 0,
        soc_trace: vec![0.0, 0.8],
    }];
    let r = run(&cfg).unwrap();
    let node_events: Vec<_> = r.events.events.iter().filter(|e| e.node == "stop:B").collect();
    assert!(node_events.iter().any(|e| e.kind == "power_off" && e.t == 0));
    assert!(node_events.iter().any(|e| e.kind == "power_on" && e.t == 3_600_000));
    let dropped = node_events
        .iter()
        .filter(|e| e.kind == "display" && e.detail["outcome"] == "unpowered")
        .count();
    assert!(dropped > 0);
    let applied_after = node_events
        .iter()
        .any(|e| e.kind == "display" && e.detail["outcome"] == "applied" && e.t > 3_600_000);
    assert!(applied_after);
    assert!(r.displays["B"].powered);
    assert_eq!(r.seat_mismatches(&cfg), vec![]);
}

#[test]
fn unseen_stop_signs_skip_the_stop() {
    let mut cfg = two_stop_scenario(200.0);
    cfg.buses[0].perception.detector = DetectorModel {
        miss_rate: 1.0,
        spurious_rate: 0.0,
        ..DetectorModel::default()
    };
    let r = run(&cfg).unwrap();
    assert_eq!(r.events.of_kind("stop_skipped").count(), 2);
    assert_eq!(r.events.of_kind("door_normal_open").count(), 0);
    assert_eq!(r.stats.punches, 0);
}

#[test]
fn circular_route_keeps_serving_its_stops() {
    let mut cfg = two_stop_scenario(600.0);
    cfg.routes[0].circular = true;
    cfg.stops.truncate(1);
    cfg.passengers.clear();
    let r = run(&cfg).unwrap();
    // A 2 km loop at 10 m/s with a 10 s dwell.
    let arrivals = r.events.of_kind("arrive").count();
    assert!(arrivals >= 3, "{arrivals} arrivals");
    assert_eq!(r.events.of_kind("terminal").count(), 0);
}

#[test]
fn server_restart_from_sim_log_matches() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("server.ndjson");
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let r = run_with(
        &cfg,
        &RunOptions {
            record_events: false,
            server_log: Some(path.clone()),
        },
    )
    .unwrap();
    let restarted = Store::open(&path, r.store.network().clone()).unwrap();
    assert_eq!(restarted.snapshot(), r.store.snapshot());
    assert_eq!(restarted.log().len(), r.store.log().len());
}

#[test]
fn emergency_opens_raise_exactly_one_alert() {
    let cfg = load_scenario(PAPER_DEMO).unwrap();
    let r = run(&cfg).unwrap();
    let ids: BTreeSet<u64> = r
        .events
        .of_kind("door_emergency_open")
        .map(|e| e.detail["alert_id"].as_u64().unwrap())
        .collect();
    let mut alerts: Vec<u64> = r.store.alerts().iter().map(|a| a.alert_id).collect();
    alerts.sort();
    assert_eq!(alerts, ids.into_iter().collect::<Vec<_>>());
}
