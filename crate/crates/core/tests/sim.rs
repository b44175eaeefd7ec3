mod common;

use abv_core::sim::sweep::sweep;
use abv_core::sim::trace::{parse_trace, TRACE_COLUMNS, TRACE_SCHEMA_VERSION};
use abv_core::sim::parse_scenario;
use abv_core::{load_scenario, run, Mode, RunOptions, Scenario};

fn small_ring(penetration: f64) -> Scenario {
    let doc = serde_json::json!({
        "name": "small ring",
        "map": {
            "segments": [
                { "length": 300.0, "lane_count": 2, "speed_limit": 13.89, "secured": true, "instrumented": true },
                { "length": 300.0, "lane_count": 2, "speed_limit": 11.11, "secured": true }
            ],
            "closed": true
        },
        "duration": 30.0,
        "seed": 21,
        "traffic": { "density": 20.0, "penetration": penetration }
    });
    parse_scenario(&doc.to_string()).unwrap()
}

#[test]
fn bundled_scenarios_round_trip() {
    let dir = common::scenario_path("");
    let mut seen = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let sc = load_scenario(&path).unwrap();
        sc.validate().unwrap();
        let again = parse_scenario(&sc.to_json()).unwrap();
        assert_eq!(sc, again, "{}", path.display());
        seen += 1;
    }
    assert!(seen >= 6);
}

#[test]
fn trace_has_one_row_per_step_and_stable_columns() {
    let mut sc = common::scenario("override_pulse.json");
    sc.duration = 10.0;
    let out = run(&sc, RunOptions { trace: true }).unwrap();
    let text = out.trace.unwrap();
    let header: Vec<&str> = text.lines().next().unwrap().split(',').collect();
    assert_eq!(header, TRACE_COLUMNS);
    let rows = parse_trace(&text);
    assert_eq!(rows.len(), 500);
    for (k, row) in rows.iter().enumerate() {
        assert_eq!(row["schema_version"], TRACE_SCHEMA_VERSION.to_string());
        assert_eq!(row["step"], (k + 1).to_string());
        assert_eq!(row.len(), TRACE_COLUMNS.len());
    }
}

#[test]
fn metrics_are_deterministic_per_seed() {
    let sc = common::random_mixed_scenario(7);
    let a = run(&sc, RunOptions::default()).unwrap();
    let b = run(&sc, RunOptions::default()).unwrap();
    assert_eq!(a.metrics, b.metrics);
    assert_eq!(a.log, b.log);
    let mut other = sc.clone();
    other.seed += 1;
    let c = run(&other, RunOptions::default()).unwrap();
    assert_ne!(a.metrics, c.metrics);
}

#[test]
fn sweep_rows_and_single_run_cross_check() {
    let sc = small_ring(0.0);
    let report = sweep(&sc, &[0.0, 1.0], 2).unwrap();
    assert_eq!(report.points.len(), 2);
    assert_eq!(report.runs.len(), 4);
    assert_eq!(report.to_csv().lines().count(), 3);
    let (p0, p1) = (&report.points[0], &report.points[1]);
    assert!(!p0.tainted && !p1.tainted);
    assert_eq!(p0.full_system_s.mean, 0.0);
    assert!(p1.full_system_s.mean > 0.0);

    let single = run(&sc, RunOptions::default()).unwrap();
    let first = report.runs.iter().find(|r| r.penetration == 0.0 && r.seed == sc.seed).unwrap();
    assert_eq!(first.metrics.total_fuel_g, single.metrics.total_fuel_g);
    let one_seed = sweep(&sc, &[0.0], 1).unwrap();
    assert_eq!(one_seed.points[0].total_fuel_g.mean, single.metrics.total_fuel_g);
}

#[test]
fn full_fleet_stays_automated_and_collision_free() {
    let out = run(&small_ring(1.0), RunOptions::default()).unwrap();
    assert_eq!(out.metrics.collisions, 0);
    assert_eq!(out.metrics.vehicles, out.metrics.abv_vehicles);
    let full = out.metrics.mode_occupancy.get(&Mode::FullSystem).copied().unwrap_or(0.0);
    assert!(full > 0.5 * out.metrics.vehicles as f64 * out.metrics.duration, "{full}");
    assert!(out.audit.min_front_gap >= 2.0);
}

#[test]
fn jerk_stays_comfortable_outside_emergency() {
    let mut jerks = Vec::new();
    for name in ["s1_obstacle.json", "s2_secured_end.json", "override_pulse.json"] {
        let sc = common::scenario(name);
        let dt = sc.config().unwrap().sim.dt;
        let out = run(&sc, RunOptions { trace: true }).unwrap();
        let rows = parse_trace(out.trace.as_deref().unwrap());
        for w in rows.windows(2) {
            let calm = w.iter().all(|r| r["ego_mode"] != "Emergency" && r["plan_kind"] != "emergency_stop");
            if calm {
                let a0: f64 = w[0]["ego_a"].parse().unwrap();
                let a1: f64 = w[1]["ego_a"].parse().unwrap();
                jerks.push(((a1 - a0) / dt).abs());
            }
        }
    }
    jerks.sort_by(f64::total_cmp);
    let p95 = jerks[(jerks.len() as f64 * 0.95) as usize];
    assert!(p95 <= 4.0 + 1e-6, "{p95}");
}

#[test]
fn unknown_scenario_keys_are_reported() {
    let err = parse_scenario(r#"{"map":{"segments":[{"length":100,"speed_limit":10}]},"duration":5,"bogus":1}"#).unwrap_err();
    assert!(err.to_string().contains("bogus"), "{err}");
    let err = parse_scenario(r#"{"map":{"segments":[{"length":-1,"speed_limit":0}]},"duration":5}"#).unwrap_err();
    let text = err.to_string();
    assert!(text.contains("length") && text.contains("speed_limit"), "{text}");
    let err = parse_scenario(r#"{"map":{"segments":[{"length":100,"speed_limit":10}]},"duration":0}"#).unwrap_err();
    assert!(err.to_string().contains("duration"), "{err}");
}
