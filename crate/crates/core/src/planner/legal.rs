use std::collections::BTreeSet;

use super::{ManeuverKind, Prediction, TrajPoint, Trajectory, Violation};
use crate::config::{PlannerConfig, VehicleParams};
use crate::geometry::{RoadMap, VehicleState};

const EPS: f64 = 1e-9;

fn same_lane(d_a: f64, d_b: f64, cfg: &PlannerConfig) -> bool {
    (d_a - d_b).abs() < cfg.same_lane_threshold
}

/// Tick index of `t` on the prediction grid.
fn tick(t: f64, dt: f64) -> usize {
    (t / dt).round() as usize
}

/// Checks every sample of `traj` against the traffic rules and vehicle limits.
///
/// Vehicles already behind the ego in its starting lane are not checked
/// for rear clearance: the ego cannot open that gap by itself.
pub fn check_legal(
    traj: &Trajectory,
    ego: &VehicleState,
    preds: &[Prediction],
    map: &RoadMap,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> (bool, BTreeSet<Violation>) {
    check_legal_sampled(traj, &traj.samples(cfg.sample_dt), ego, preds, map, cfg, vehicle)
}

/// [`check_legal`] on samples already taken at the planner sample step.
pub(crate) fn check_legal_sampled(
    traj: &Trajectory,
    samples: &[(f64, TrajPoint)],
    ego: &VehicleState,
    preds: &[Prediction],
    map: &RoadMap,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> (bool, BTreeSet<Violation>) {
    let mut reasons = BTreeSet::new();
    let dt = cfg.sample_dt;
    let allow_emergency_lane = matches!(traj.maneuver.kind, ManeuverKind::Mrs | ManeuverKind::EmergencyStop);
    let rear_exempt: Vec<bool> = preds
        .iter()
        .map(|p| p.rel_s[0] < 0.0 && same_lane(p.d, ego.d, cfg))
        .collect();

    for &(t, p) in samples {
        if p.v < -EPS {
            reasons.insert(Violation::NegativeSpeed);
        }
        let s_abs = map.wrap_s(traj.s0 + p.ds);
        let seg = map.segment_at(s_abs);
        if p.v > seg.speed_limit + EPS {
            reasons.insert(Violation::SpeedLimit);
        }
        let (mut lo, hi) = seg.lateral_bounds();
        if allow_emergency_lane && seg.has_emergency_lane {
            lo -= seg.lane_width;
        }
        if p.d < lo - EPS || p.d > hi + EPS {
            reasons.insert(Violation::RoadBounds);
        }
        let lat = p.v * p.v * seg.curvature + p.d_ddot;
        if lat.abs() > cfg.lat_accel_max + EPS {
            reasons.insert(Violation::LateralAccel);
        }
        let k = tick(t, dt);
        let need = cfg.min_clearance.max(cfg.clearance_time * p.v.max(0.0));
        for (pred, exempt) in preds.iter().zip(&rear_exempt) {
            if !same_lane(p.d, pred.d, cfg) {
                continue;
            }
            let (other, _) = pred.at(k);
            let rel = other - p.ds;
            if rel < 0.0 && *exempt {
                continue;
            }
            if rel.abs() - vehicle.length < need - EPS {
                reasons.insert(Violation::Clearance);
            }
        }
    }

    let end = traj.end_point();
    let k_end = tick(traj.horizon, dt);
    for pred in preds {
        if !same_lane(end.d, pred.d, cfg) {
            continue;
        }
        let (other, v_other) = pred.at(k_end);
        let gap = other - end.ds - vehicle.length;
        if other - end.ds < 0.0 {
            continue;
        }
        let closing = (end.v - v_other).max(0.0);
        if gap - cfg.min_clearance < closing * closing / (2.0 * cfg.comfort_decel) - EPS {
            reasons.insert(Violation::TerminalGap);
        }
    }

    let accels = traj.profile.accels();
    let nodes = &traj.profile.nodes;
    let mut prev = traj.profile.a0;
    for (i, &a) in accels.iter().enumerate() {
        if a < vehicle.accel_min - EPS || a > vehicle.accel_max + EPS {
            reasons.insert(Violation::Accel);
        }
        let step = nodes[i + 1].t - nodes[i].t;
        let at_rest = nodes[i].v <= EPS || nodes[i + 1].v <= EPS;
        let jerk_max = if traj.emergency { vehicle.jerk_max_emergency } else { vehicle.jerk_max };
        if !at_rest && ((a - prev) / step).abs() > jerk_max + 1e-6 {
            reasons.insert(Violation::Jerk);
        }
        prev = a;
    }
    (reasons.is_empty(), reasons)
}

/// Smallest time-to-collision against same-lane vehicles ahead over the horizon.
pub fn min_ttc(
    traj: &Trajectory,
    preds: &[Prediction],
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> f64 {
    min_ttc_sampled(&traj.samples(cfg.sample_dt), preds, cfg, vehicle)
}

pub(crate) fn min_ttc_sampled(
    samples: &[(f64, TrajPoint)],
    preds: &[Prediction],
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> f64 {
    let dt = cfg.sample_dt;
    let mut best = f64::INFINITY;
    for &(t, p) in samples {
        let k = tick(t, dt);
        for pred in preds {
            if !same_lane(p.d, pred.d, cfg) {
                continue;
            }
            let (other, v_other) = pred.at(k);
            let rel = other - p.ds;
            if rel < 0.0 {
                continue;
            }
            let closing = p.v - v_other;
            if closing > 1e-6 {
                best = best.min((rel - vehicle.length).max(0.0) / closing);
            }
        }
    }
    best
}
