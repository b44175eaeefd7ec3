//! Telemetry wire protocol: JSON text frames tagged by `type`. All units SI.

use serde::{Deserialize, Serialize};

use crate::control::SharedControlState;
use crate::modes::{DriverInput, DriverReadiness, Mode, TakeOverRequest};
use crate::traffic::Recommendation;

pub const TELEMETRY_SCHEMA_VERSION: u32 = 1;

/// Frames a client may send.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum InboundFrame {
    DriverInput {
        #[serde(default)]
        steer_torque: f64,
        #[serde(default)]
        throttle: f64,
        #[serde(default)]
        brake: f64,
        #[serde(default)]
        acknowledge: bool,
    },
    Engage { mode: Mode },
    Disengage,
    ResetEmergency,
    Pause { paused: bool },
}

impl InboundFrame {
    pub fn parse(text: &str) -> Result<Self, String> {
        let frame: InboundFrame = serde_json::from_str(text).map_err(|e| e.to_string())?;
        if let InboundFrame::DriverInput { steer_torque, throttle, brake, .. } = &frame {
            if ![steer_torque, throttle, brake].iter().all(|x| x.is_finite()) {
                return Err("driver_input values must be finite".into());
            }
        }
        Ok(frame)
    }
}

/// Frames the server sends.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum OutboundFrame {
    Snapshot(Box<Snapshot>),
    Error { message: String },
    Refusal {
        t: f64,
        #[serde(default)]
        requested: Option<Mode>,
        reason: String,
    },
}

impl OutboundFrame {
    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("frame serializes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleClass {
    Abv,
    Conventional,
    Obstacle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleView {
    pub id: u64,
    pub class: VehicleClass,
    pub s: f64,
    pub d: f64,
    pub x: f64,
    pub y: f64,
    /// Global heading, rad.
    pub heading: f64,
    pub v: f64,
    pub lane: usize,
    pub mode: Option<Mode>,
}

/// Sample of a planned trajectory in road and world coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrajSample {
    pub t: f64,
    pub s: f64,
    pub d: f64,
    pub x: f64,
    pub y: f64,
    pub v: f64,
}

/// When a command reached the server and when the simulation applied it, in sim seconds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CommandStamp {
    pub received_t: f64,
    pub applied_t: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EgoView {
    pub id: u64,
    pub mode: Mode,
    pub tor: Option<TakeOverRequest>,
    /// Seconds left before a pending take-over request expires.
    pub tor_remaining: Option<f64>,
    pub readiness: DriverReadiness,
    pub applied_input: DriverInput,
    pub plan_kind: Option<String>,
    pub trajectory: Vec<TrajSample>,
    pub mrs: Vec<TrajSample>,
    pub shared: SharedControlState,
    pub speed_limit: f64,
    pub advised_limit: Option<f64>,
    pub detection_range: f64,
    pub last_command: Option<CommandStamp>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSoFar {
    pub collisions: u64,
    pub mean_speed: f64,
    pub total_fuel_g: f64,
    pub tor_issued: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Snapshot {
    pub schema_version: u32,
    pub t: f64,
    pub step: u64,
    pub paused: bool,
    pub vehicles: Vec<VehicleView>,
    pub ego: Option<EgoView>,
    pub recommendations: Vec<Recommendation>,
    pub metrics: MetricsSoFar,
}
