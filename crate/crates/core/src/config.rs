//! Tunable parameters for every subsystem.
//!
//! Everything here can be overridden from a scenario file through flat dotted
//! keys such as `"planner.time_gap": 2.0` (see [`Config::with_overrides`]).

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("unknown configuration key `{0}`")]
    UnknownKey(String),
    #[error("invalid value for `{key}`: {message}")]
    InvalidValue { key: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct Config {
    pub vehicle: VehicleParams,
    pub perception: PerceptionConfig,
    pub arbiter: ArbiterConfig,
    pub planner: PlannerConfig,
    pub control: ControlConfig,
    pub traffic: TrafficConfig,
    pub sim: SimConfig,
}

impl Config {
    /// Applies flat `section.field` overrides on top of the defaults.
    pub fn with_overrides(overrides: &BTreeMap<String, Value>) -> Result<Self, ConfigError> {
        let mut tree = serde_json::to_value(Config::default()).expect("config serializes");
        for (key, value) in overrides {
            let mut node = &mut tree;
            for part in key.split('.') {
                node = node
                    .as_object_mut()
                    .and_then(|obj| obj.get_mut(part))
                    .ok_or_else(|| ConfigError::UnknownKey(key.clone()))?;
            }
            if node.is_object() {
                return Err(ConfigError::UnknownKey(key.clone()));
            }
            *node = value.clone();
        }
        serde_json::from_value(tree).map_err(|e| ConfigError::InvalidValue {
            key: overrides.keys().cloned().collect::<Vec<_>>().join(","),
            message: e.to_string(),
        })
    }
}

/// Vehicle geometry and actuator limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VehicleParams {
    pub wheelbase: f64,
    pub length: f64,
    pub width: f64,
    pub steer_max: f64,
    pub steer_rate_max: f64,
    pub accel_min: f64,
    pub accel_max: f64,
    pub jerk_max: f64,
    /// Jerk bound applied when a command is flagged as an emergency manoeuvre.
    pub jerk_max_emergency: f64,
    pub mass: f64,
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.7,
            length: 4.5,
            width: 1.8,
            steer_max: 0.55,
            steer_rate_max: 0.8,
            accel_min: -6.0,
            accel_max: 2.0,
            jerk_max: 4.0,
            jerk_max_emergency: 12.0,
            mass: 1500.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensorConfig {
    pub range: f64,
    pub half_fov_deg: f64,
    pub sigma_pos: f64,
    pub sigma_speed: f64,
    pub miss_probability: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerceptionConfig {
    pub lane_sigma_d: f64,
    pub lane_sigma_heading: f64,
    pub lane_debounce: f64,
    /// Weight of a new lane measurement in the smoothed lane estimate.
    pub lane_alpha: f64,
    pub lane_range: f64,
    pub loc_sigma_s: f64,
    pub loc_sigma_v: f64,
    pub loc_alpha: f64,
    pub camera: SensorConfig,
    pub laser: SensorConfig,
    pub occlusion_radius: f64,
    pub gate: f64,
    pub confirm_hits: u32,
    pub delete_misses: u32,
    pub measurement_weight: f64,
}

impl Default for PerceptionConfig {
    fn default() -> Self {
        Self {
            lane_sigma_d: 0.05,
            lane_sigma_heading: 0.01,
            lane_debounce: 0.5,
            lane_alpha: 0.3,
            lane_range: 40.0,
            loc_sigma_s: 0.5,
            loc_sigma_v: 0.1,
            loc_alpha: 0.3,
            camera: SensorConfig {
                range: 40.0,
                half_fov_deg: 22.5,
                sigma_pos: 0.3,
                sigma_speed: 0.0,
                miss_probability: 0.05,
            },
            laser: SensorConfig {
                range: 80.0,
                half_fov_deg: 60.0,
                sigma_pos: 0.1,
                sigma_speed: 0.1,
                miss_probability: 0.02,
            },
            occlusion_radius: 1.0,
            gate: 2.0,
            confirm_hits: 3,
            delete_misses: 5,
            measurement_weight: 0.7,
        }
    }
}

impl Default for SensorConfig {
    fn default() -> Self {
        PerceptionConfig::default().laser
    }
}

impl PerceptionConfig {
    /// Same layout with every noise source and miss probability zeroed.
    #[allow(clippy::field_reassign_with_default)]
    pub fn noiseless() -> Self {
        let mut cfg = Self::default();
        cfg.lane_sigma_d = 0.0;
        cfg.lane_sigma_heading = 0.0;
        cfg.loc_sigma_s = 0.0;
        cfg.loc_sigma_v = 0.0;
        for sensor in [&mut cfg.camera, &mut cfg.laser] {
            sensor.sigma_pos = 0.0;
            sensor.sigma_speed = 0.0;
            sensor.miss_probability = 0.0;
        }
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ArbiterConfig {
    /// Upper speed bound for engaging the full system (50 km/h).
    pub full_speed_threshold: f64,
    pub hysteresis: f64,
    pub dwell: f64,
    pub tor_deadline: f64,
    pub readiness_window: f64,
    pub torque_activity: f64,
    pub pedal_activity: f64,
    /// Extra distance kept between the projected stop point and the end of a secured road.
    pub tor_margin: f64,
    /// Speed the setpoint degrades toward while a take-over request is pending.
    pub tor_speed_floor: f64,
    pub tor_degrade_time: f64,
    /// Distance from either end of a secured stretch inside which the vehicle counts as off it.
    pub secured_exit_margin: f64,
}

impl Default for ArbiterConfig {
    fn default() -> Self {
        Self {
            full_speed_threshold: 13.89,
            hysteresis: 0.55,
            dwell: 1.0,
            tor_deadline: 10.0,
            readiness_window: 2.0,
            torque_activity: 0.3,
            pedal_activity: 0.05,
            tor_margin: 10.0,
            tor_speed_floor: 10.0,
            tor_degrade_time: 5.0,
            secured_exit_margin: 2.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlannerConfig {
    pub tick: f64,
    pub sample_dt: f64,
    pub horizons: Vec<f64>,
    pub speed_offsets: Vec<f64>,
    pub time_gap: f64,
    pub standstill_gap: f64,
    pub min_clearance: f64,
    pub clearance_time: f64,
    pub lat_accel_max: f64,
    pub comfort_decel: f64,
    pub profile_tau: f64,
    pub speed_margin: f64,
    pub envelope_decel: f64,
    pub same_lane_threshold: f64,
    pub lane_change_enabled: bool,
    pub w_speed: f64,
    pub w_jerk: f64,
    pub w_lane_change: f64,
    pub w_ttc: f64,
    pub ttc_threshold: f64,
    pub mrs_decel_emergency_lane: f64,
    pub mrs_decel_in_lane: f64,
    pub emergency_decel: f64,
    pub stop_margin: f64,
    pub max_stop_horizon: f64,
}

impl Default for PlannerConfig {
    fn default() -> Self {
        Self {
            tick: 0.1,
            sample_dt: 0.1,
            horizons: vec![3.0, 4.0, 5.0],
            speed_offsets: vec![-2.0, -1.0, 0.0, 1.0],
            time_gap: 1.8,
            standstill_gap: 3.0,
            min_clearance: 2.0,
            clearance_time: 0.5,
            lat_accel_max: 2.5,
            comfort_decel: 3.0,
            profile_tau: 1.0,
            speed_margin: 0.3,
            envelope_decel: 1.0,
            same_lane_threshold: 3.0,
            lane_change_enabled: false,
            w_speed: 1.0,
            w_jerk: 0.5,
            w_lane_change: 2.0,
            w_ttc: 4.0,
            ttc_threshold: 5.0,
            mrs_decel_emergency_lane: 2.5,
            mrs_decel_in_lane: 3.0,
            emergency_decel: 6.0,
            stop_margin: 1.0,
            max_stop_horizon: 12.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControlConfig {
    pub k_d: f64,
    pub k_heading: f64,
    pub k_v: f64,
    pub gap_k_s: f64,
    pub gap_k_v: f64,
    pub torque_per_rad: f64,
    pub assist_max: f64,
    pub override_torque: f64,
    pub override_time: f64,
    pub override_release_torque: f64,
    pub override_release_time: f64,
    pub lambda_min: f64,
    pub lambda_ramp: f64,
    pub pedal_gain: f64,
    pub pedal_cap: f64,
    pub fuel: FuelParams,
    pub eco_coast_decel: f64,
    pub eco_lookahead: f64,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            k_d: 0.5,
            k_heading: 1.2,
            k_v: 0.8,
            gap_k_s: 0.25,
            gap_k_v: 0.5,
            torque_per_rad: 20.0,
            assist_max: 3.0,
            override_torque: 2.0,
            override_time: 0.3,
            override_release_torque: 0.5,
            override_release_time: 2.0,
            lambda_min: 0.15,
            lambda_ramp: 0.5,
            pedal_gain: 20.0,
            pedal_cap: 40.0,
            fuel: FuelParams::default(),
            eco_coast_decel: 0.4,
            eco_lookahead: 200.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FuelParams {
    pub idle_rate: f64,
    pub air_density: f64,
    pub drag_coefficient: f64,
    pub frontal_area: f64,
    pub rolling_resistance: f64,
    pub gravity: f64,
    pub efficiency: f64,
    /// Lower heating value in J/g.
    pub lhv: f64,
}

impl Default for FuelParams {
    fn default() -> Self {
        Self {
            idle_rate: 0.15,
            air_density: 1.2,
            drag_coefficient: 0.62,
            frontal_area: 2.0,
            rolling_resistance: 0.011,
            gravity: 9.81,
            efficiency: 0.30,
            lhv: 43_000.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IdmParams {
    pub a_max: f64,
    pub b_comf: f64,
    pub s0: f64,
    pub time_gap: f64,
    pub delta: f64,
    pub a_floor: f64,
}

impl Default for IdmParams {
    fn default() -> Self {
        Self {
            a_max: 1.0,
            b_comf: 1.5,
            s0: 2.0,
            time_gap: 1.5,
            delta: 4.0,
            a_floor: -8.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrafficConfig {
    pub idm: IdmParams,
    pub desired_speed_factor: (f64, f64),
    pub density_high: f64,
    pub density_mid: f64,
    pub advise_high: f64,
    pub advise_mid: f64,
    pub recommendation_ttl: f64,
    pub supervisor_period: f64,
    /// Lets conventional vehicles change lanes by gap acceptance. Off by default because it
    /// breaks the lane-keeping assumption the planner predicts with.
    pub conventional_lane_change: bool,
}

impl Default for TrafficConfig {
    fn default() -> Self {
        Self {
            idm: IdmParams::default(),
            desired_speed_factor: (0.9, 1.1),
            density_high: 40.0,
            density_mid: 25.0,
            advise_high: 8.33,
            advise_mid: 11.11,
            recommendation_ttl: 10.0,
            supervisor_period: 1.0,
            conventional_lane_change: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SimConfig {
    pub dt: f64,
    pub gantry_s: f64,
    /// Wall-clock seconds per simulated second in interactive mode.
    pub realtime_factor: f64,
    pub snapshot_rate: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: 0.02,
            gantry_s: 0.0,
            realtime_factor: 1.0,
            snapshot_rate: 20.0,
        }
    }
}
