//! Motion control: trajectory tracking, shared steering torque, pedal
//! feedback and the fuel estimate.

use serde::{Deserialize, Serialize};

use crate::config::{ControlConfig, FuelParams, PlannerConfig, VehicleParams};
use crate::geometry::{RoadMap, VehicleState};
use crate::planner::Trajectory;

/// Split of a steering command into its feedforward and feedback parts.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SteerCommand {
    pub feedforward: f64,
    pub feedback: f64,
}

impl SteerCommand {
    pub fn total(&self) -> f64 {
        self.feedforward + self.feedback
    }
}

/// Path-following steering for the trajectory sampled `t_on_traj` seconds after its start.
pub fn lateral_control(
    ego: &VehicleState,
    traj: &Trajectory,
    t_on_traj: f64,
    map: &RoadMap,
    cfg: &ControlConfig,
    vehicle: &VehicleParams,
) -> SteerCommand {
    let p = traj.point(t_on_traj);
    track_lateral(ego, p.d, p.d_dot, p.d_ddot, map, cfg, vehicle)
}

/// Steering that holds the lateral offset `d_ref`, used for lane keeping without a plan.
pub fn lane_keeping(
    ego: &VehicleState,
    d_ref: f64,
    map: &RoadMap,
    cfg: &ControlConfig,
    vehicle: &VehicleParams,
) -> SteerCommand {
    track_lateral(ego, d_ref, 0.0, 0.0, map, cfg, vehicle)
}

fn track_lateral(
    ego: &VehicleState,
    d_ref: f64,
    d_dot: f64,
    d_ddot: f64,
    map: &RoadMap,
    cfg: &ControlConfig,
    vehicle: &VehicleParams,
) -> SteerCommand {
    let k_road = map.segment_at(ego.s).curvature;
    let v_eff = ego.v.max(1.0);
    let k_path = k_road / (1.0 - k_road * ego.d).max(1e-3) + d_ddot / (v_eff * v_eff);
    let feedforward = (vehicle.wheelbase * k_path).atan();
    let heading_ref = d_dot.atan2(ego.v.max(0.5));
    let e_d = ego.d - d_ref;
    let e_psi = ego.heading_err - heading_ref;
    let feedback = -cfg.k_d * e_d - cfg.k_heading * e_psi;
    let total = (feedforward + feedback).clamp(-vehicle.steer_max, vehicle.steer_max);
    SteerCommand {
        feedforward,
        feedback: total - feedforward,
    }
}

/// Vehicle ahead in the ego lane, as seen by the controller.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lead {
    /// Bumper-to-bumper distance.
    pub gap: f64,
    pub v: f64,
}

/// Speed reference taken from the trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct SpeedReference {
    pub v: f64,
    pub a: f64,
    pub emergency: bool,
}

/// Acceleration demand: speed tracking with feedforward, limited by the
/// constant-time-gap law and a kinematic stopping bound behind a lead.
///
/// The result moves at most one jerk step from `a_prev`.
#[allow(clippy::too_many_arguments)]
pub fn longitudinal_control(
    v: f64,
    a_prev: f64,
    reference: SpeedReference,
    lead: Option<Lead>,
    dt: f64,
    cfg: &ControlConfig,
    planner: &PlannerConfig,
    vehicle: &VehicleParams,
) -> f64 {
    let mut a = reference.a + cfg.k_v * (reference.v - v);
    if let Some(lead) = lead {
        let desired = planner.standstill_gap.max(planner.time_gap * v);
        a = a.min(cfg.gap_k_s * (lead.gap - desired) + cfg.gap_k_v * (lead.v - v));
        if v > lead.v {
            let dv = v - lead.v;
            let room = (lead.gap - planner.min_clearance - dv * dt).max(0.1);
            let plain = -dv * dv / (2.0 * room);
            let ramp = ((a_prev - plain) / vehicle.jerk_max).max(0.0);
            let shortened = (room - 0.5 * dv * ramp).max(0.1);
            a = a.min(-dv * dv / (2.0 * shortened));
        }
    }
    if reference.v <= 0.05 && v < 0.5 {
        a = a.min(-1.0);
    }
    let a = a.clamp(vehicle.accel_min, vehicle.accel_max);
    let jerk = if reference.emergency {
        vehicle.jerk_max_emergency
    } else {
        vehicle.jerk_max
    };
    a_prev + (a - a_prev).clamp(-jerk * dt, jerk * dt)
}

/// Steering-wheel torque sharing between the automation and the driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SharedControlState {
    /// Assist component after attenuation.
    pub assist_torque: f64,
    pub driver_torque: f64,
    pub applied_torque: f64,
    pub override_active: bool,
    pub override_timer: f64,
    /// Advisory resistance on the accelerator pedal.
    pub pedal_feedback: f64,
    /// Attenuation applied to the assist.
    pub lambda: f64,
    /// Time the driver torque has stayed below the release threshold.
    pub release_timer: f64,
}

impl Default for SharedControlState {
    fn default() -> Self {
        Self {
            assist_torque: 0.0,
            driver_torque: 0.0,
            applied_torque: 0.0,
            override_active: false,
            override_timer: 0.0,
            pedal_feedback: 0.0,
            lambda: 1.0,
            release_timer: 0.0,
        }
    }
}

/// Maps a steering feedback angle to assist torque, saturated.
pub fn assist_command(feedback_steer: f64, cfg: &ControlConfig) -> f64 {
    (cfg.torque_per_rad * feedback_steer).clamp(-cfg.assist_max, cfg.assist_max)
}

/// Advances the torque blend by `dt`.
///
/// A driver torque above the override threshold accumulates the override
/// timer unless it pushes the same way as a non-negligible assist; the override latches
/// once the timer reaches the configured time and then attenuates the
/// assist toward `lambda_min`.
pub fn shared_torque(
    assist_cmd: f64,
    driver_torque: f64,
    state: &SharedControlState,
    dt: f64,
    cfg: &ControlConfig,
) -> SharedControlState {
    let assist = assist_cmd.clamp(-cfg.assist_max, cfg.assist_max);
    let mut next = *state;
    next.driver_torque = driver_torque;

    let assisting = driver_torque * assist > 0.0 && assist.abs() >= cfg.override_release_torque;
    let opposing = driver_torque.abs() > cfg.override_torque && !assisting;
    next.override_timer = if opposing {
        state.override_timer + dt
    } else if driver_torque.abs() > cfg.override_torque {
        state.override_timer
    } else {
        0.0
    };
    if !state.override_active && next.override_timer >= cfg.override_time - 1e-9 {
        next.override_active = true;
        next.release_timer = 0.0;
    }
    if next.override_active {
        next.release_timer = if driver_torque.abs() < cfg.override_release_torque {
            state.release_timer + dt
        } else {
            0.0
        };
        if next.release_timer >= cfg.override_release_time - 1e-9 {
            next.override_active = false;
            next.release_timer = 0.0;
        }
    }

    let rate = (1.0 - cfg.lambda_min) / cfg.lambda_ramp * dt;
    next.lambda = if next.override_active {
        (state.lambda - rate).max(cfg.lambda_min)
    } else {
        (state.lambda + rate).min(1.0)
    };
    next.assist_torque = next.lambda * assist;
    next.applied_torque = next.assist_torque + driver_torque;
    next
}

/// Acceleration the driver asks for through the pedals.
pub fn pedal_demand(throttle: f64, brake: f64, vehicle: &VehicleParams) -> f64 {
    throttle.clamp(0.0, 1.0) * vehicle.accel_max + brake.clamp(0.0, 1.0) * vehicle.accel_min
}

/// Resistance force on the accelerator when the driver asks for more than recommended.
pub fn pedal_feedback(recommended_accel: f64, driver_accel: f64, cfg: &ControlConfig) -> f64 {
    (cfg.pedal_gain * (driver_accel - recommended_accel).max(0.0) / 2.0).min(cfg.pedal_cap)
}

/// Fuel mass flow from the tractive power at speed `v` and acceleration `a`.
pub fn fuel_rate(v: f64, a: f64, mass: f64, p: &FuelParams) -> f64 {
    let v = v.max(0.0);
    let drag = 0.5 * p.air_density * p.drag_coefficient * p.frontal_area * v * v;
    let rolling = p.rolling_resistance * mass * p.gravity;
    let power = ((mass * a + drag + rolling) * v).max(0.0);
    p.idle_rate + power / (p.efficiency * p.lhv)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct FuelState {
    /// g/s
    pub rate: f64,
    /// g
    pub cumulative: f64,
}

impl FuelState {
    pub fn update(&mut self, v: f64, a: f64, mass: f64, dt: f64, p: &FuelParams) {
        self.rate = fuel_rate(v, a, mass, p);
        self.cumulative += self.rate * dt;
    }
}

/// Coasting-based advisory speed from a list of speed zones ahead.
///
/// `zones` holds `(start, limit)` pairs in distance from the vehicle, sorted
/// by start; the first zone must start at or before zero. A limit of zero
/// marks a stop.
pub fn eco_speed_advice(zones: &[(f64, f64)], at: f64, coast_decel: f64) -> f64 {
    let current = zones
        .iter()
        .take_while(|(start, _)| *start <= at)
        .last()
        .map_or(f64::INFINITY, |z| z.1);
    zones
        .iter()
        .filter(|(start, _)| *start > at)
        .map(|(start, limit)| (limit * limit + 2.0 * coast_decel * (start - at)).sqrt())
        .fold(current, f64::min)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RoadSegment;
    use crate::planner::{Maneuver, ManeuverKind, Quintic, SpeedProfile};
    use std::collections::BTreeSet;

    fn straight() -> RoadMap {
        RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89)], false).unwrap()
    }

    fn hold(d: f64, v: f64) -> Trajectory {
        Trajectory {
            maneuver: Maneuver { kind: ManeuverKind::KeepLane, target_lane: 0, target_speed: v, horizon: 3.0 },
            lateral: Quintic::constant(d),
            profile: SpeedProfile::from_speeds(&[v; 31], 0.1, 0.0),
            s0: 0.0,
            t0: 0.0,
            horizon: 3.0,
            cost: 0.0,
            feasible: true,
            reasons: BTreeSet::new(),
            emergency: false,
        }
    }

    #[test]
    fn steering_examples() {
        let cfg = ControlConfig::default();
        let veh = VehicleParams::default();
        let ego = VehicleState { s: 10.0, v: 10.0, ..Default::default() };
        assert_eq!(lateral_control(&ego, &hold(0.0, 10.0), 0.5, &straight(), &cfg, &veh).total(), 0.0);

        let k = 0.01;
        let curved = RoadMap::new(vec![RoadSegment::straight(1000.0, 2, 13.89).with_curvature(k)], false).unwrap();
        let cmd = lateral_control(&ego, &hold(0.0, 10.0), 0.5, &curved, &cfg, &veh);
        assert!((cmd.total() - (2.7f64 * k).atan()).abs() < 1e-12);

        let off = VehicleState { d: 0.5, ..ego };
        let cmd = lateral_control(&off, &hold(0.0, 10.0), 0.5, &straight(), &cfg, &veh);
        assert!((cmd.total() + 0.25).abs() < 1e-12);
    }

    #[test]
    fn longitudinal_equilibria() {
        let (cfg, pl, veh) = (ControlConfig::default(), PlannerConfig::default(), VehicleParams::default());
        let r = SpeedReference { v: 10.0, a: 0.0, emergency: false };
        assert_eq!(longitudinal_control(10.0, 0.0, r, None, 0.02, &cfg, &pl, &veh), 0.0);
        let lead = Lead { gap: 18.0, v: 10.0 };
        assert!(longitudinal_control(10.0, 0.0, r, Some(lead), 0.02, &cfg, &pl, &veh).abs() < 1e-12);
    }

    #[test]
    fn torque_examples() {
        let cfg = ControlConfig::default();
        let s = shared_torque(1.2, 0.0, &SharedControlState::default(), 0.02, &cfg);
        assert_eq!((s.applied_torque, s.lambda), (1.2, 1.0));
        let s = shared_torque(5.0, 0.0, &SharedControlState::default(), 0.02, &cfg);
        assert_eq!(s.assist_torque, 3.0);
        assert_eq!(assist_command(0.1, &cfg), 2.0);
    }

    #[test]
    fn override_latches_and_attenuates() {
        let cfg = ControlConfig::default();
        let mut s = SharedControlState::default();
        let mut latched_at = None;
        let dt = 0.02;
        for k in 1..=100 {
            let t = k as f64 * dt;
            let driver = if t <= 0.4 + 1e-9 { -2.5 } else { 0.0 };
            s = shared_torque(3.0, driver, &s, dt, &cfg);
            if s.override_active && latched_at.is_none() {
                latched_at = Some(t);
            }
            if let Some(l) = latched_at {
                if t >= l + 0.5 - 1e-9 {
                    assert!(s.assist_torque.abs() <= 0.5);
                }
            }
        }
        let l = latched_at.unwrap();
        assert!((0.3 - 1e-9..=0.4).contains(&l), "{l}");
    }

    #[test]
    fn override_releases_after_quiet_period() {
        let cfg = ControlConfig::default();
        let mut s = SharedControlState::default();
        for _ in 0..20 {
            s = shared_torque(1.0, -2.5, &s, 0.02, &cfg);
        }
        assert!(s.override_active);
        for _ in 0..99 {
            s = shared_torque(1.0, 0.0, &s, 0.02, &cfg);
        }
        assert!(s.override_active);
        s = shared_torque(1.0, 0.0, &s, 0.02, &cfg);
        assert!(!s.override_active);
    }

    #[test]
    fn same_direction_torque_never_overrides() {
        let cfg = ControlConfig::default();
        let mut s = SharedControlState::default();
        for _ in 0..100 {
            s = shared_torque(1.0, 2.5, &s, 0.02, &cfg);
        }
        assert!(!s.override_active);
    }

    #[test]
    fn pedal_examples() {
        let cfg = ControlConfig::default();
        assert_eq!(pedal_feedback(1.0, 0.5, &cfg), 0.0);
        assert_eq!(pedal_feedback(0.0, 2.0, &cfg), 20.0);
        assert_eq!(pedal_feedback(-4.0, 2.0, &cfg), 40.0);
    }

    #[test]
    fn fuel_examples() {
        let p = FuelParams::default();
        assert_eq!(fuel_rate(0.0, 0.0, 1500.0, &p), 0.15);
        assert_eq!(fuel_rate(10.0, -5.0, 1500.0, &p), 0.15);
        let v: f64 = 13.89;
        let force = 0.5 * 1.2 * 0.62 * 2.0 * v * v + 0.011 * 1500.0 * 9.81;
        let oracle = 0.15 + force * v / (0.30 * 43_000.0);
        assert!((fuel_rate(v, 0.0, 1500.0, &p) - oracle).abs() < 1e-12);
    }

    #[test]
    fn eco_advice_examples() {
        let uniform = [(0.0, 13.89)];
        assert_eq!(eco_speed_advice(&uniform, 50.0, 0.4), 13.89);
        let drop = [(0.0, 13.89), (100.0, 8.33)];
        let coast = (13.89f64.powi(2) - 8.33f64.powi(2)) / 0.8;
        assert!((coast - 154.4).abs() < 0.1);
        assert!(eco_speed_advice(&drop, 0.0, 0.4) < 13.89);
        let stop = [(0.0, 13.89), (24.0, 0.0)];
        assert!((eco_speed_advice(&stop, 0.0, 0.4) - (2.0f64 * 0.4 * 24.0).sqrt()).abs() < 1e-12);
    }
}
