use std::collections::BTreeSet;

use super::legal::check_legal;
use super::{
    constant_decel_profile, lateral_origin, lead_in_lane, solve_quintic, Maneuver, ManeuverKind,
    PlanContext, Prediction, Quintic, SpeedProfile, Trajectory, Violation,
};
use crate::config::{PlannerConfig, VehicleParams};
use crate::geometry::{RoadMap, VehicleState};

/// Distance covered stopping from `v` when the deceleration ramps from `a0`
/// to `-decel` at the given jerk and then holds.
fn ramped_stop_distance(v: f64, a0: f64, decel: f64, jerk: f64) -> f64 {
    let dt = 0.005;
    let (mut v, mut a, mut s) = (v, a0.min(0.0), 0.0);
    while v > 0.0 {
        a = (a - jerk * dt).max(-decel);
        let next = (v + a * dt).max(0.0);
        s += 0.5 * (v + next) * dt;
        v = next;
    }
    s
}

/// Minimum-risk trajectory: a stop on the emergency lane when the secured
/// road offers one, otherwise in the current lane. Escalates toward the
/// maximum deceleration when a vehicle ahead leaves too little room.
pub fn mrs_trajectory(
    ego: &VehicleState,
    preds: &[Prediction],
    map: &RoadMap,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> Trajectory {
    let seg = map.segment_at(ego.s);
    let v = ego.v.max(0.0);
    let shoulder = seg.emergency_lane_center();
    let on_shoulder = shoulder.is_some() && ego.d < seg.lateral_bounds().0;
    let (lane_d, lane) = match shoulder {
        Some(d) if on_shoulder => (d, -1),
        _ => (seg.lane_center(seg.lane_of(ego.d)), seg.lane_of(ego.d) as i64),
    };
    let base = |kind, target_lane, lateral, profile: SpeedProfile, emergency| {
        let horizon = profile.duration();
        Trajectory {
            maneuver: Maneuver {
                kind,
                target_lane,
                target_speed: 0.0,
                horizon,
            },
            lateral,
            profile,
            s0: ego.s,
            t0: ctx.t,
            horizon,
            cost: 0.0,
            feasible: true,
            reasons: BTreeSet::new(),
            emergency,
        }
    };
    if v <= 0.05 {
        return base(
            ManeuverKind::Mrs,
            lane,
            Quintic::constant(ego.d),
            SpeedProfile::standstill(),
            false,
        );
    }

    let stop_toward = |target_d: f64, target_lane: i64, decel: f64| {
        let room = [lane_d, target_d]
            .iter()
            .filter_map(|&d| lead_in_lane(preds, d, cfg))
            .map(|p| p.rel_s[0] - vehicle.length - cfg.stop_margin)
            .fold(f64::INFINITY, f64::min);
        let (mut target_d, mut target_lane, mut decel) = (target_d, target_lane, decel);
        let mut emergency = false;
        if ramped_stop_distance(v, ego.a, decel, vehicle.jerk_max) > room {
            emergency = true;
            target_d = lane_d;
            target_lane = lane;
            let (mut lo, mut hi) = (cfg.mrs_decel_in_lane.min(cfg.emergency_decel), cfg.emergency_decel);
            for _ in 0..40 {
                let mid = 0.5 * (lo + hi);
                if ramped_stop_distance(v, ego.a, mid, vehicle.jerk_max_emergency) > room {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            decel = hi;
        }
        let profile = constant_decel_profile(v, ego.a, decel, cfg.sample_dt);
        let t_stop = v / decel;
        let t_lat = if target_lane < 0 {
            (t_stop - 1.0).max(2.0)
        } else {
            t_stop.clamp(2.0, 5.0)
        };
        let lateral = solve_quintic(lateral_origin(ego, ctx), (target_d, 0.0, 0.0), t_lat)
            .unwrap_or(Quintic::constant(target_d));
        let kind = if emergency {
            ManeuverKind::EmergencyStop
        } else {
            ManeuverKind::Mrs
        };
        base(kind, target_lane, lateral, profile, emergency)
    };

    if on_shoulder {
        return stop_toward(lane_d, lane, cfg.mrs_decel_emergency_lane);
    }
    if let Some(shoulder) = shoulder.filter(|_| ctx.secured_here && lane == 0) {
        let traj = stop_toward(shoulder, -1, cfg.mrs_decel_emergency_lane);
        if !traj.emergency {
            let (_, reasons) = check_legal(&traj, ego, preds, map, cfg, vehicle);
            if !reasons.contains(&Violation::Clearance) && !reasons.contains(&Violation::TerminalGap) {
                return traj;
            }
        }
    }
    stop_toward(lane_d, lane, cfg.mrs_decel_in_lane)
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::geometry::RoadSegment;

    fn ctx(secured: bool) -> PlanContext {
        PlanContext {
            secured_here: secured,
            full_speed_threshold: 13.89,
            ..Default::default()
        }
    }

    #[test]
    fn in_lane_stop_distance() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89)], false).unwrap();
        let ego = VehicleState { s: 10.0, v: 10.0, ..Default::default() };
        let t = mrs_trajectory(&ego, &[], &map, &ctx(false), &PlannerConfig::default(), &VehicleParams::default());
        let oracle = 10.0f64 * 10.0 / (2.0 * 3.0);
        assert!((t.profile.length() - oracle).abs() < 0.2);
        assert_eq!(t.maneuver.kind, ManeuverKind::Mrs);
        assert!(t.end_point().d.abs() < 1e-9);
    }

    #[test]
    fn standstill_is_zero_length() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89)], false).unwrap();
        let ego = VehicleState { s: 10.0, v: 0.0, ..Default::default() };
        let t = mrs_trajectory(&ego, &[], &map, &ctx(false), &PlannerConfig::default(), &VehicleParams::default());
        assert_eq!(t.horizon, 0.0);
        assert_eq!(t.profile.length(), 0.0);
    }

    #[test]
    fn emergency_lane_only_from_the_adjacent_lane() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89).secured(true)], false).unwrap();
        let ego = VehicleState { s: 10.0, d: 3.5, lane: 1, v: 10.0, ..Default::default() };
        let t = mrs_trajectory(&ego, &[], &map, &ctx(true), &PlannerConfig::default(), &VehicleParams::default());
        assert!((t.end_point().d - 3.5).abs() < 1e-9);
        assert_eq!(t.maneuver.target_lane, 1);
    }

    #[test]
    fn blocked_shoulder_stops_in_lane() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89).secured(true)], false).unwrap();
        let ego = VehicleState { s: 10.0, v: 10.0, ..Default::default() };
        let cfg = PlannerConfig::default();
        let parked = TrackedObject { id: 1, s: 30.0, d: -3.5, v: 0.0 };
        let preds = predict_others(ego.s, &[parked], &map, cfg.max_stop_horizon, cfg.sample_dt);
        let t = mrs_trajectory(&ego, &preds, &map, &ctx(true), &cfg, &VehicleParams::default());
        assert!(t.end_point().d.abs() < 1e-9);
        assert_eq!(t.maneuver.kind, ManeuverKind::Mrs);
    }

    #[test]
    fn secured_stop_on_emergency_lane() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89).secured(true)], false).unwrap();
        let ego = VehicleState { s: 10.0, v: 13.89, ..Default::default() };
        let t = mrs_trajectory(&ego, &[], &map, &ctx(true), &PlannerConfig::default(), &VehicleParams::default());
        let end = t.end_point();
        assert!((end.d + 3.5).abs() < 1e-9);
        assert_eq!(end.v, 0.0);
        assert!((t.profile.length() - 13.89f64.powi(2) / 5.0).abs() < 1e-6);
    }

    #[test]
    fn obstacle_escalates_to_emergency_stop() {
        let map = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89)], false).unwrap();
        let ego = VehicleState { s: 0.0, v: 13.89, ..Default::default() };
        let wall = [TrackedObject { id: 1, s: 30.0, d: 0.0, v: 0.0 }];
        let preds = predict_others(0.0, &wall, &map, 12.0, 0.1);
        let t = mrs_trajectory(&ego, &preds, &map, &ctx(false), &PlannerConfig::default(), &VehicleParams::default());
        assert_eq!(t.maneuver.kind, ManeuverKind::EmergencyStop);
        assert!(t.emergency);
        assert!(t.profile.length() < 30.0 - 4.5 - 1.0);
    }
}
