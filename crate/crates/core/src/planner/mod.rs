//! Trajectory generation, prediction, legality filtering and selection.
//!
//! Trajectories are planned in road coordinates relative to the ego's
//! arc-length position at plan time: a quintic lateral offset `d(t)` paired
//! with a speed profile `v(t)`.

mod legal;
mod mrs;
mod profile;
mod quintic;

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{PlannerConfig, VehicleParams};
use crate::control::eco_speed_advice;
use crate::geometry::{RoadMap, VehicleState};
use crate::modes::Mode;

pub use legal::{check_legal, min_ttc};
use legal::{check_legal_sampled, min_ttc_sampled};
pub use mrs::mrs_trajectory;
pub use profile::{
    constant_decel_profile, stop_profile, track_speed_target, ProfileNode, SpeedProfile,
};
pub use quintic::{solve_quintic, Quintic};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PlanError {
    #[error("horizon must be positive, got {0}")]
    NonPositiveHorizon(f64),
    #[error("ego is off the road (d = {0:.2} m)")]
    OffRoad(f64),
    #[error("non-finite ego state")]
    NonFinite,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ManeuverKind {
    KeepLane,
    Follow,
    Stop,
    ChangeLeft,
    ChangeRight,
    Mrs,
    EmergencyStop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Maneuver {
    pub kind: ManeuverKind,
    pub target_lane: i64,
    pub target_speed: f64,
    pub horizon: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Violation {
    SpeedLimit,
    RoadBounds,
    Clearance,
    TerminalGap,
    Accel,
    Jerk,
    LateralAccel,
    NegativeSpeed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub maneuver: Maneuver,
    /// Absolute lateral offset over time.
    pub lateral: Quintic,
    pub profile: SpeedProfile,
    /// Arc length of the ego when the trajectory was planned (not wrapped).
    pub s0: f64,
    /// Simulation time the trajectory starts at.
    pub t0: f64,
    pub horizon: f64,
    pub cost: f64,
    pub feasible: bool,
    pub reasons: BTreeSet<Violation>,
    /// Executed with the emergency jerk bound.
    pub emergency: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajPoint {
    /// Distance along the road from `s0`.
    pub ds: f64,
    pub d: f64,
    pub d_dot: f64,
    pub d_ddot: f64,
    pub v: f64,
    pub a: f64,
}

impl Trajectory {
    pub fn point(&self, t: f64) -> TrajPoint {
        let (ds, v, a) = self.profile.eval(t);
        let [d, d_dot, d_ddot, _] = self.lateral.eval(t);
        TrajPoint {
            ds,
            d,
            d_dot,
            d_ddot,
            v,
            a,
        }
    }

    pub fn end_point(&self) -> TrajPoint {
        self.point(self.horizon)
    }

    /// Points every `dt` from `dt` to the horizon inclusive.
    pub fn samples(&self, dt: f64) -> Vec<(f64, TrajPoint)> {
        let n = (self.horizon / dt).round() as usize;
        (1..=n).map(|k| (k as f64 * dt, self.point(k as f64 * dt))).collect()
    }
}

/// Object handed to the planner in absolute road coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrackedObject {
    pub id: u64,
    pub s: f64,
    pub d: f64,
    pub v: f64,
}

/// Constant-speed, lane-keeping forecast of one object.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub track_id: u64,
    pub d: f64,
    /// Arc length ahead of the ego at plan time, one entry per planner tick from t = 0.
    pub rel_s: Vec<f64>,
    pub v: Vec<f64>,
}

impl Prediction {
    pub fn at(&self, k: usize) -> (f64, f64) {
        let k = k.min(self.rel_s.len() - 1);
        (self.rel_s[k], self.v[k])
    }
}

/// Forecasts every object at constant speed along its current lane. Speeds
/// drop to the limit of any slower segment on entering it.
pub fn predict_others(
    ego_s: f64,
    objects: &[TrackedObject],
    map: &RoadMap,
    horizon: f64,
    dt: f64,
) -> Vec<Prediction> {
    let n = (horizon / dt).round() as usize;
    objects
        .iter()
        .map(|o| {
            let rel0 = map.delta_s(ego_s, o.s);
            let v0 = o.v.max(0.0);
            // Breakpoints (time, distance, speed after) of the piecewise-constant speed.
            let mut pieces = vec![(0.0, 0.0, v0)];
            let mut v = v0;
            if v0 > 0.0 {
                for (dist, idx) in map.boundaries_ahead(o.s, v0 * horizon) {
                    let (t_prev, x_prev, v_prev) = *pieces.last().unwrap();
                    let t_b = t_prev + (dist - x_prev) / v_prev;
                    if t_b > horizon {
                        break;
                    }
                    let limit = map.segments()[idx].speed_limit;
                    if limit < v {
                        v = limit;
                        pieces.push((t_b, dist, v));
                    }
                }
            }
            let mut rel_s = Vec::with_capacity(n + 1);
            let mut speeds = Vec::with_capacity(n + 1);
            for k in 0..=n {
                let t = k as f64 * dt;
                let (tp, xp, vp) = *pieces.iter().rev().find(|p| p.0 <= t).unwrap();
                rel_s.push(rel0 + xp + vp * (t - tp));
                speeds.push(vp);
            }
            Prediction {
                track_id: o.id,
                d: o.d,
                rel_s,
                v: speeds,
            }
        })
        .collect()
}

/// Situation the planner works in for one tick.
#[derive(Debug, Clone, Default)]
pub struct PlanContext {
    pub t: f64,
    pub mode: Option<Mode>,
    /// Advised limit per segment id from the infrastructure.
    pub advised: BTreeMap<u32, f64>,
    /// Upper bound on the desired speed from the driver or fleet policy.
    pub speed_cap: Option<f64>,
    /// The segment under the ego counts as secured (accounts for supervisor overrides).
    pub secured_here: bool,
    pub full_speed_threshold: f64,
    /// Degraded setpoint while a take-over request is pending.
    pub tor_cap: Option<f64>,
    /// Lateral `(d, d_dot, d_ddot)` to start from instead of the measured state,
    /// so that successive plans join without a kink.
    pub lateral_start: Option<[f64; 3]>,
}

/// Initial lateral state of a new plan.
pub fn lateral_origin(ego: &VehicleState, ctx: &PlanContext) -> (f64, f64, f64) {
    match ctx.lateral_start {
        Some([d, d_dot, d_ddot]) => (d, d_dot, d_ddot),
        None => (ego.d, ego.v.max(0.0) * ego.heading_err.sin(), 0.0),
    }
}

/// Speed the planner aims for at `s`, before coasting anticipation.
pub fn desired_speed_at(s: f64, map: &RoadMap, ctx: &PlanContext, cfg: &PlannerConfig) -> f64 {
    let seg = map.segment_at(s);
    let mut v = seg.speed_limit - cfg.speed_margin;
    if let Some(adv) = ctx.advised.get(&seg.id) {
        v = v.min(*adv);
    }
    if seg.curvature.abs() > 1e-9 {
        v = v.min((0.8 * cfg.lat_accel_max / seg.curvature.abs()).sqrt());
    }
    if ctx.mode == Some(Mode::FullSystem) {
        v = v.min(ctx.full_speed_threshold - cfg.speed_margin);
    }
    if let Some(cap) = ctx.speed_cap {
        v = v.min(cap);
    }
    if let Some(cap) = ctx.tor_cap {
        v = v.min(cap);
    }
    v.max(0.0)
}

/// Desired speed `at` metres ahead of `ego_s`, anticipating slower zones by coasting.
pub struct SpeedTarget {
    zones: Vec<(f64, f64)>,
    limits: Vec<(f64, f64)>,
    coast: f64,
}

impl SpeedTarget {
    pub fn new(
        ego_s: f64,
        map: &RoadMap,
        ctx: &PlanContext,
        cfg: &PlannerConfig,
        coast_decel: f64,
        lookahead: f64,
    ) -> Self {
        let mut zones = vec![(0.0, desired_speed_at(ego_s, map, ctx, cfg))];
        let mut limits = vec![(0.0, map.speed_limit_at(ego_s))];
        for (dist, idx) in map.boundaries_ahead(ego_s, lookahead) {
            let probe = map.wrap_s(map.segment_start(idx) + 1e-6);
            zones.push((dist, desired_speed_at(probe, map, ctx, cfg)));
            limits.push((dist, map.segments()[idx].speed_limit));
        }
        Self {
            zones,
            limits,
            coast: coast_decel,
        }
    }

    pub fn desired(&self, at: f64) -> f64 {
        eco_speed_advice(&self.zones, at, self.coast)
    }

    pub fn limit(&self, at: f64) -> f64 {
        self.limits
            .iter()
            .take_while(|(start, _)| *start <= at)
            .last()
            .map_or(f64::INFINITY, |z| z.1)
    }
}

/// Nearest prediction ahead within the lane centred at `lane_d`.
pub fn lead_in_lane<'a>(
    preds: &'a [Prediction],
    lane_d: f64,
    cfg: &PlannerConfig,
) -> Option<&'a Prediction> {
    preds
        .iter()
        .filter(|p| (p.d - lane_d).abs() < cfg.same_lane_threshold && p.rel_s[0] > 0.0)
        .min_by(|a, b| a.rel_s[0].total_cmp(&b.rel_s[0]).then(a.track_id.cmp(&b.track_id)))
}

/// All candidate trajectories for this tick, not yet checked or costed.
#[allow(clippy::too_many_arguments)]
pub fn generate_candidates(
    ego: &VehicleState,
    preds: &[Prediction],
    map: &RoadMap,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
    coast_decel: f64,
    lookahead: f64,
) -> Result<Vec<Trajectory>, PlanError> {
    if ![ego.s, ego.d, ego.v, ego.a, ego.heading_err].iter().all(|x| x.is_finite()) {
        return Err(PlanError::NonFinite);
    }
    let seg = map.segment_at(ego.s);
    let (lo, hi) = seg.lateral_bounds();
    let lo = if seg.has_emergency_lane { lo - seg.lane_width } else { lo };
    if ego.d < lo - 1.0 || ego.d > hi + 1.0 {
        return Err(PlanError::OffRoad(ego.d));
    }
    let lane = seg.lane_of(ego.d);
    let mut lanes = vec![(ManeuverKind::KeepLane, lane as i64)];
    if cfg.lane_change_enabled {
        if lane + 1 < seg.lane_count {
            lanes.push((ManeuverKind::ChangeLeft, lane as i64 + 1));
        }
        if lane > 0 {
            lanes.push((ManeuverKind::ChangeRight, lane as i64 - 1));
        }
    }
    let target = SpeedTarget::new(ego.s, map, ctx, cfg, coast_decel, lookahead);
    let v0 = ego.v.max(0.0);
    let lat0 = lateral_origin(ego, ctx);
    let dt = cfg.sample_dt;
    let mut out = Vec::new();

    for &(lat_kind, lane_idx) in &lanes {
        let lane_d = lane_idx as f64 * seg.lane_width;
        let lead = lead_in_lane(preds, lane_d, cfg);
        for &h in &cfg.horizons {
            let lateral = solve_quintic(lat0, (lane_d, 0.0, 0.0), h)?;
            let make = |kind, target_speed, profile: SpeedProfile| {
                let horizon = profile.duration().max(h);
                Trajectory {
                    maneuver: Maneuver {
                        kind,
                        target_lane: lane_idx,
                        target_speed,
                        horizon,
                    },
                    lateral,
                    profile,
                    s0: ego.s,
                    t0: ctx.t,
                    horizon,
                    cost: 0.0,
                    feasible: false,
                    reasons: BTreeSet::new(),
                    emergency: false,
                }
            };
            for &o in &cfg.speed_offsets {
                let speed = (target.desired(0.0) + o).clamp(0.0, target.limit(0.0));
                let profile = track_speed_target(
                    v0,
                    ego.a,
                    h,
                    dt,
                    cfg.profile_tau,
                    cfg.comfort_decel,
                    vehicle.accel_max,
                    vehicle.jerk_max,
                    |at| (target.desired(at) + o).clamp(0.0, target.limit(at)),
                );
                out.push(make(lat_kind, speed, profile));
            }
            let Some(lead) = lead else { continue };
            let (rel0, v_lead0) = lead.at(0);
            let long_kind = if lat_kind == ManeuverKind::KeepLane {
                None
            } else {
                Some(lat_kind)
            };
            if v_lead0 > 0.5 {
                let k_end = (h / dt).round() as usize;
                let (rel_end, v_lead_end) = lead.at(k_end);
                for &o in &cfg.speed_offsets {
                    let v_end = (v_lead_end + o).clamp(0.0, target.limit(rel_end));
                    let gap = cfg.standstill_gap.max(cfg.time_gap * v_end);
                    let s_end = rel_end - vehicle.length - gap;
                    let q = solve_quintic((0.0, v0, ego.a), (s_end, v_end, 0.0), h)?;
                    let profile = SpeedProfile::from_quintic(&q, h, dt, ego.a);
                    out.push(make(long_kind.unwrap_or(ManeuverKind::Follow), v_end, profile));
                }
            } else {
                for &o in &cfg.speed_offsets {
                    let gap = (cfg.standstill_gap - o).max(cfg.min_clearance);
                    let stop_at = rel0 - vehicle.length - gap;
                    let profile = stop_profile(
                        v0,
                        ego.a,
                        stop_at,
                        dt,
                        -vehicle.accel_min,
                        vehicle.jerk_max,
                        h,
                        cfg.max_stop_horizon,
                    );
                    out.push(make(long_kind.unwrap_or(ManeuverKind::Stop), 0.0, profile));
                }
            }
        }
    }
    Ok(out)
}

/// Cost of a checked candidate given the desired-speed target.
pub fn trajectory_cost(
    traj: &Trajectory,
    preds: &[Prediction],
    target: &SpeedTarget,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> f64 {
    trajectory_cost_sampled(traj, &traj.samples(cfg.sample_dt), preds, target, cfg, vehicle)
}

fn trajectory_cost_sampled(
    traj: &Trajectory,
    samples: &[(f64, TrajPoint)],
    preds: &[Prediction],
    target: &SpeedTarget,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
) -> f64 {
    if samples.is_empty() {
        return 0.0;
    }
    let speed_err = samples
        .iter()
        .map(|(_, p)| (p.v - target.desired(p.ds)).powi(2))
        .sum::<f64>()
        / samples.len() as f64;
    let accels = traj.profile.accels();
    let mut jerk = 0.0;
    let mut prev = traj.profile.a0;
    for (i, a) in accels.iter().enumerate() {
        let step = traj.profile.nodes[i + 1].t - traj.profile.nodes[i].t;
        let j_lon = (a - prev) / step;
        let j_lat = traj.lateral.eval(traj.profile.nodes[i].t)[3];
        jerk += (j_lon * j_lon + j_lat * j_lat) * step;
        prev = *a;
    }
    let lane_change = matches!(
        traj.maneuver.kind,
        ManeuverKind::ChangeLeft | ManeuverKind::ChangeRight
    );
    let ttc = min_ttc_sampled(samples, preds, cfg, vehicle);
    let ttc_term = if ttc < cfg.ttc_threshold { cfg.w_ttc / ttc.max(1e-3) } else { 0.0 };
    cfg.w_speed * speed_err
        + cfg.w_jerk * jerk
        + if lane_change { cfg.w_lane_change } else { 0.0 }
        + ttc_term
}

fn kind_rank(kind: ManeuverKind) -> u8 {
    match kind {
        ManeuverKind::KeepLane => 0,
        ManeuverKind::Follow => 1,
        ManeuverKind::Stop => 2,
        ManeuverKind::ChangeLeft => 3,
        ManeuverKind::ChangeRight => 4,
        ManeuverKind::Mrs => 5,
        ManeuverKind::EmergencyStop => 6,
    }
}

/// Index of the cheapest feasible candidate; ties go to lane keeping, then
/// the shorter horizon. `None` asks the caller to fall back to the MRS.
pub fn select(candidates: &[Trajectory]) -> Option<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, c)| c.feasible)
        .min_by(|(i, a), (j, b)| {
            a.cost
                .total_cmp(&b.cost)
                .then(kind_rank(a.maneuver.kind).cmp(&kind_rank(b.maneuver.kind)))
                .then(a.horizon.total_cmp(&b.horizon))
                .then(i.cmp(j))
        })
        .map(|(i, _)| i)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CandidateSummary {
    pub kind: ManeuverKind,
    pub horizon: f64,
    pub target_speed: f64,
    pub cost: f64,
    pub feasible: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlanOutput {
    pub nominal: Trajectory,
    pub mrs: Trajectory,
    pub candidates: Vec<CandidateSummary>,
    /// No feasible candidate: nominal is the MRS.
    pub fallback: bool,
    pub planner_ok: bool,
}

/// One planner tick: both the nominal and the minimum-risk trajectory.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    ego: &VehicleState,
    objects: &[TrackedObject],
    map: &RoadMap,
    ctx: &PlanContext,
    cfg: &PlannerConfig,
    vehicle: &VehicleParams,
    coast_decel: f64,
    lookahead: f64,
) -> PlanOutput {
    let preds = predict_others(ego.s, objects, map, cfg.max_stop_horizon, cfg.sample_dt);
    let mrs = mrs_trajectory(ego, &preds, map, ctx, cfg, vehicle);
    let mut candidates =
        match generate_candidates(ego, &preds, map, ctx, cfg, vehicle, coast_decel, lookahead) {
            Ok(c) => c,
            Err(_) => {
                return PlanOutput {
                    nominal: mrs.clone(),
                    mrs,
                    candidates: Vec::new(),
                    fallback: true,
                    planner_ok: false,
                }
            }
        };
    let target = SpeedTarget::new(ego.s, map, ctx, cfg, coast_decel, lookahead);
    for c in &mut candidates {
        let samples = c.samples(cfg.sample_dt);
        let (ok, reasons) = check_legal_sampled(c, &samples, ego, &preds, map, cfg, vehicle);
        c.feasible = ok;
        c.reasons = reasons;
        c.cost = trajectory_cost_sampled(c, &samples, &preds, &target, cfg, vehicle);
    }
    let summaries = candidates
        .iter()
        .map(|c| CandidateSummary {
            kind: c.maneuver.kind,
            horizon: c.horizon,
            target_speed: c.maneuver.target_speed,
            cost: c.cost,
            feasible: c.feasible,
        })
        .collect();
    match select(&candidates) {
        Some(i) => PlanOutput {
            nominal: candidates.swap_remove(i),
            mrs,
            candidates: summaries,
            fallback: false,
            planner_ok: true,
        },
        None => PlanOutput {
            nominal: mrs.clone(),
            mrs,
            candidates: summaries,
            fallback: true,
            planner_ok: true,
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RoadSegment;

    fn straight(limit: f64) -> RoadMap {
        RoadMap::new(vec![RoadSegment::straight(2000.0, 2, limit)], false).unwrap()
    }

    fn ctx() -> PlanContext {
        PlanContext {
            full_speed_threshold: 13.89,
            ..Default::default()
        }
    }

    fn run(ego: &VehicleState, objects: &[TrackedObject], map: &RoadMap) -> PlanOutput {
        plan(ego, objects, map, &ctx(), &PlannerConfig::default(), &VehicleParams::default(), 0.4, 200.0)
    }

    #[test]
    fn predictions_constant_and_capped() {
        let map = RoadMap::new(
            vec![RoadSegment::straight(100.0, 1, 13.89), RoadSegment::straight(500.0, 1, 8.33)],
            false,
        )
        .unwrap();
        let objs = [
            TrackedObject { id: 1, s: 50.0, d: 0.0, v: 0.0 },
            TrackedObject { id: 2, s: 50.0, d: 0.0, v: 10.0 },
        ];
        let p = predict_others(0.0, &objs, &map, 10.0, 0.1);
        assert!(p[0].rel_s.iter().all(|s| *s == 50.0));
        for (k, s) in p[1].rel_s.iter().enumerate() {
            let t = k as f64 * 0.1;
            // Oracle: 10 m/s until the boundary 50 m ahead (t = 5 s), then the new limit.
            let expect = if t <= 5.0 { 50.0 + 10.0 * t } else { 100.0 + 8.33 * (t - 5.0) };
            assert!((s - expect).abs() < 1e-9, "t={t}: {s} vs {expect}");
        }
        assert_eq!(*p[1].v.last().unwrap(), 8.33);
    }

    #[test]
    fn free_road_keeps_lane_at_desired_speed() {
        let map = straight(13.89);
        let ego = VehicleState { s: 10.0, v: 13.59, ..Default::default() };
        let out = run(&ego, &[], &map);
        assert!(!out.fallback);
        assert_eq!(out.nominal.maneuver.kind, ManeuverKind::KeepLane);
        assert!(out.nominal.lateral.is_zero());
        assert_eq!(out.nominal.horizon, 3.0);
        assert!((out.nominal.maneuver.target_speed - 13.59).abs() < 1e-9);
        assert_ne!(out.nominal, out.mrs);
        assert!(out.nominal.feasible);
    }

    #[test]
    fn follow_targets_time_gap() {
        let map = straight(13.89);
        let ego = VehicleState { s: 0.0, v: 8.0, ..Default::default() };
        let lead = [TrackedObject { id: 1, s: 40.0, d: 0.0, v: 8.0 }];
        let preds = predict_others(0.0, &lead, &map, 12.0, 0.1);
        let cands = generate_candidates(
            &ego, &preds, &map, &ctx(), &PlannerConfig::default(), &VehicleParams::default(), 0.4, 200.0,
        )
        .unwrap();
        let follow = cands
            .iter()
            .find(|c| c.maneuver.kind == ManeuverKind::Follow && c.horizon == 4.0 && c.maneuver.target_speed == 8.0)
            .unwrap();
        let end = follow.end_point();
        let lead_end = 40.0 + 8.0 * 4.0;
        assert!((end.v - 8.0).abs() < 1e-9);
        assert!((lead_end - 4.5 - end.ds - 14.4).abs() < 1e-9);
        assert!(cands.len() >= 12 && cands.len() <= 84);
    }

    #[test]
    fn blocked_road_falls_back_to_mrs() {
        let map = straight(13.89);
        let ego = VehicleState { s: 0.0, v: 13.89, ..Default::default() };
        let wall = [TrackedObject { id: 1, s: 8.0, d: 0.0, v: 0.0 }];
        let out = run(&ego, &wall, &map);
        assert!(out.fallback);
        assert_eq!(out.nominal, out.mrs);
    }

    #[test]
    fn select_prefers_keep_lane_on_ties() {
        let map = straight(13.89);
        let ego = VehicleState { s: 0.0, v: 10.0, ..Default::default() };
        let out = run(&ego, &[], &map);
        let mut a = out.nominal.clone();
        let mut b = out.nominal.clone();
        a.maneuver.kind = ManeuverKind::ChangeLeft;
        b.maneuver.kind = ManeuverKind::KeepLane;
        a.cost = 1.0;
        b.cost = 1.0;
        assert_eq!(select(&[a.clone(), b]), Some(1));
        assert_eq!(select(&[a]), Some(0));
    }
}
