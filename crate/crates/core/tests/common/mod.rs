//! Oracles and fixtures shared by the integration tests.
#![allow(dead_code)]

use std::path::PathBuf;

use abv_core::modes::{DriverAction, RefusalReason};
use abv_core::sim::parse_scenario;
use abv_core::{load_scenario, Mode, Scenario};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

pub fn scenario_path(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios").join(name)
}

pub fn scenario(name: &str) -> Scenario {
    load_scenario(scenario_path(name)).expect("bundled scenario loads")
}

/// Dense Gaussian elimination with partial pivoting.
pub fn solve_linear(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for col in 0..n {
        let pivot = (col..n)
            .max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs()))
            .unwrap();
        a.swap(col, pivot);
        b.swap(col, pivot);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            for k in col..n {
                a[row][k] -= f * a[col][k];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = vec![0.0; n];
    for row in (0..n).rev() {
        let tail: f64 = (row + 1..n).map(|k| a[row][k] * x[k]).sum();
        x[row] = (b[row] - tail) / a[row][row];
    }
    x
}

/// Quintic coefficients from the 6x6 boundary-condition system.
pub fn quintic_by_elimination(start: (f64, f64, f64), end: (f64, f64, f64), t: f64) -> Vec<f64> {
    let pos = |t: f64| (0..6).map(|i| t.powi(i)).collect::<Vec<_>>();
    let vel = |t: f64| {
        (0..6)
            .map(|i| if i == 0 { 0.0 } else { i as f64 * t.powi(i - 1) })
            .collect::<Vec<_>>()
    };
    let acc = |t: f64| {
        (0..6)
            .map(|i| if i < 2 { 0.0 } else { (i * (i - 1)) as f64 * t.powi(i - 2) })
            .collect::<Vec<_>>()
    };
    let a = vec![pos(0.0), vel(0.0), acc(0.0), pos(t), vel(t), acc(t)];
    let b = vec![start.0, start.1, start.2, end.0, end.1, end.2];
    solve_linear(a, b)
}

/// Rule-list statement of the arbiter for a cell with no pending take-over request.
pub fn expected_transition(
    mode: Mode,
    v: f64,
    secured: bool,
    healthy: bool,
    action: DriverAction,
    ready: bool,
) -> (Mode, Option<RefusalReason>) {
    const FULL_MAX: f64 = 13.89;
    const FULL_HARD_MAX: f64 = 13.89 + 0.55;
    let full_allowed = healthy && secured && v <= FULL_MAX;
    let allowed = |m: Mode| match m {
        Mode::Driver => true,
        Mode::LongiAdas => healthy,
        Mode::FullSystem => full_allowed,
        Mode::Emergency => false,
    };
    let requested = match action {
        DriverAction::EngageLongi => Some(Mode::LongiAdas),
        DriverAction::EngageFull => Some(Mode::FullSystem),
        _ => None,
    };

    if mode == Mode::Emergency {
        if action == DriverAction::ResetEmergency && v == 0.0 {
            return (Mode::Driver, None);
        }
        return (Mode::Emergency, requested.map(|_| RefusalReason::EmergencyActive));
    }
    let automated = matches!(mode, Mode::LongiAdas | Mode::FullSystem);
    if automated && !healthy {
        return (Mode::Emergency, None);
    }
    if matches!(action, DriverAction::Disengage | DriverAction::Override) {
        return (Mode::Driver, None);
    }
    if mode == Mode::FullSystem && (!secured || v > FULL_HARD_MAX) {
        return (if ready { Mode::Driver } else { Mode::Emergency }, None);
    }
    match requested {
        Some(m) if m == mode => (mode, None),
        Some(m) if allowed(m) => (m, None),
        Some(_) => {
            let reason = if !healthy {
                RefusalReason::SystemFault
            } else if !secured {
                RefusalReason::RoadNotSecured
            } else {
                RefusalReason::SpeedAboveThreshold
            };
            (mode, Some(reason))
        }
        None => (mode, None),
    }
}

/// Open road with random geometry, limits and mixed traffic around an engaged ego.
pub fn random_mixed_scenario(index: u64) -> Scenario {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 + index);
    let limits = [8.33, 11.11, 13.89];
    let curvatures = [0.0, 0.0, 0.002, -0.002, 0.005, -0.005];
    let lanes = rng.random_range(1..=3usize);
    let count = rng.random_range(1..=3usize);
    let segments: Vec<_> = (0..count)
        .map(|i| {
            json!({
                "length": rng.random_range(300.0..600.0),
                "lane_count": lanes,
                "speed_limit": limits[rng.random_range(0..limits.len())],
                "curvature": curvatures[rng.random_range(0..curvatures.len())],
                "secured": i == 0 || rng.random_bool(0.6),
                "has_emergency_lane": rng.random_bool(0.5),
            })
        })
        .collect();
    let first_limit = segments[0]["speed_limit"].as_f64().unwrap();
    let persona = ["attentive", "distracted", "absent"][rng.random_range(0..3)];
    let engage = if rng.random_bool(0.8) { "FullSystem" } else { "LongiAdas" };
    let penetration = [0.0, 0.25, 0.5, 1.0][rng.random_range(0..4)];
    let doc = json!({
        "name": format!("mixed-{index}"),
        "map": { "segments": segments },
        "duration": 60.0,
        "seed": index,
        "ego": {
            "s": 20.0,
            "lane": rng.random_range(0..lanes),
            "v": first_limit * rng.random_range(0.5..1.0),
            "engage": engage,
            "persona": persona,
        },
        "traffic": {
            "density": rng.random_range(8.0..25.0),
            "penetration": penetration,
        },
    });
    parse_scenario(&doc.to_string()).expect("generated scenario is valid")
}
