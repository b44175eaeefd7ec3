//! Scenario files: road, vehicles, timed events and configuration overrides.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::config::Config;
use crate::geometry::RoadMap;
use crate::modes::{DriverInput, Mode};
use crate::traffic::TrafficSpec;

pub const SCENARIO_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("line {line}, column {column}: {message}")]
    Parse {
        line: usize,
        column: usize,
        message: String,
    },
    #[error("invalid scenario:\n  {}", .0.join("\n  "))]
    Invalid(Vec<String>),
}

/// How the scripted ego driver reacts to a take-over request.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Persona {
    /// Acknowledges and grips the wheel shortly after the request.
    #[default]
    Attentive,
    /// Reacts late, close to the deadline.
    Distracted,
    /// Never reacts.
    Absent,
}

impl Persona {
    /// Delay between a take-over request and the driver's reaction.
    pub fn reaction_delay(self) -> Option<f64> {
        match self {
            Persona::Attentive => Some(1.0),
            Persona::Distracted => Some(8.0),
            Persona::Absent => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EgoSpec {
    pub s: f64,
    #[serde(default)]
    pub lane: usize,
    #[serde(default)]
    pub v: f64,
    /// Mode requested at t = 0.
    #[serde(default)]
    pub engage: Option<Mode>,
    #[serde(default)]
    pub persona: Persona,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VehicleKind {
    #[default]
    Conventional,
    Abv,
}

/// Explicitly placed vehicle besides the ego.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VehicleSpec {
    pub s: f64,
    #[serde(default)]
    pub lane: usize,
    #[serde(default)]
    pub v: f64,
    #[serde(default)]
    pub kind: VehicleKind,
    /// Desired speed as a multiple of the local limit.
    #[serde(default = "unit")]
    pub speed_factor: f64,
}

fn unit() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultTarget {
    Camera,
    Laser,
    Lanes,
    Actuation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Event {
    /// Stationary obstacle at absolute `s`, or `ahead` metres in front of the ego.
    ObstacleSpawn {
        t: f64,
        #[serde(default)]
        s: Option<f64>,
        #[serde(default)]
        ahead: Option<f64>,
        #[serde(default)]
        lane: usize,
    },
    /// The supervisor declares the secured road ends `distance` ahead of the ego.
    SecuredEndOverride { t: f64, distance: f64 },
    /// The sensor stops working for `duration` seconds, or for good.
    SensorFault {
        t: f64,
        sensor: FaultTarget,
        #[serde(default)]
        duration: Option<f64>,
    },
    /// Scripted ego input held for `duration`; flags fire once at `t`.
    DriverInput {
        t: f64,
        #[serde(default)]
        duration: f64,
        input: DriverInput,
    },
}

impl Event {
    pub fn time(&self) -> f64 {
        match self {
            Event::ObstacleSpawn { t, .. }
            | Event::SecuredEndOverride { t, .. }
            | Event::SensorFault { t, .. }
            | Event::DriverInput { t, .. } => *t,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub name: String,
    pub map: RoadMap,
    pub duration: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ego: Option<EgoSpec>,
    #[serde(default)]
    pub traffic: Option<TrafficSpec>,
    #[serde(default)]
    pub vehicles: Vec<VehicleSpec>,
    #[serde(default)]
    pub events: Vec<Event>,
    /// Flat `section.field` configuration overrides.
    #[serde(default)]
    pub overrides: BTreeMap<String, Value>,
}

fn schema_version() -> u32 {
    SCENARIO_SCHEMA_VERSION
}

impl Scenario {
    /// Scenario on `map` with nothing in it.
    pub fn new(map: RoadMap, duration: f64, seed: u64) -> Self {
        Self {
            schema_version: SCENARIO_SCHEMA_VERSION,
            name: String::new(),
            map,
            duration,
            seed,
            ego: None,
            traffic: None,
            vehicles: Vec::new(),
            events: Vec::new(),
            overrides: BTreeMap::new(),
        }
    }

    pub fn config(&self) -> Result<Config, ScenarioError> {
        Config::with_overrides(&self.overrides).map_err(|e| ScenarioError::Invalid(vec![e.to_string()]))
    }

    /// Every invariant violation, not just the first.
    pub fn violations(&self) -> Vec<String> {
        let mut out = Vec::new();
        if self.schema_version != SCENARIO_SCHEMA_VERSION {
            out.push(format!(
                "schema_version: expected {SCENARIO_SCHEMA_VERSION}, found {}",
                self.schema_version
            ));
        }
        if !(self.duration.is_finite() && self.duration > 0.0) {
            out.push(format!("duration: must be positive, found {}", self.duration));
        }
        if let Err(e) = Config::with_overrides(&self.overrides) {
            out.push(format!("overrides: {e}"));
        }
        let length = self.map.total_length();
        let lanes_at = |s: f64| self.map.segment_at(s).lane_count;
        let mut place = |what: String, s: f64, lane: usize, v: f64| {
            if !(0.0..length).contains(&s) {
                out.push(format!("{what}.s: {s} is outside the road [0, {length})"));
            } else if lane >= lanes_at(s) {
                out.push(format!("{what}.lane: {lane} but the road has {} lanes there", lanes_at(s)));
            }
            if !(v.is_finite() && v >= 0.0) {
                out.push(format!("{what}.v: must be non-negative, found {v}"));
            }
        };
        if let Some(ego) = &self.ego {
            place("ego".into(), ego.s, ego.lane, ego.v);
        }
        for (i, v) in self.vehicles.iter().enumerate() {
            place(format!("vehicles[{i}]"), v.s, v.lane, v.v);
        }
        if let Some(tr) = &self.traffic {
            if !(0.0..=1.0).contains(&tr.penetration) {
                out.push(format!("traffic.penetration: {} outside [0, 1]", tr.penetration));
            }
            if !(tr.density.is_finite() && tr.density >= 0.0) {
                out.push(format!("traffic.density: must be non-negative, found {}", tr.density));
            }
        }
        let mut last = f64::NEG_INFINITY;
        for (i, ev) in self.events.iter().enumerate() {
            let t = ev.time();
            if t < last {
                out.push(format!("events[{i}].t: {t} is earlier than the previous event ({last})"));
            }
            last = last.max(t);
            if !(0.0..=self.duration).contains(&t) {
                out.push(format!("events[{i}].t: {t} is outside [0, {}]", self.duration));
            }
            match ev {
                Event::ObstacleSpawn { s, ahead, lane, .. } => {
                    match (s, ahead) {
                        (Some(_), Some(_)) | (None, None) => {
                            out.push(format!("events[{i}]: give exactly one of `s` and `ahead`"))
                        }
                        (None, Some(_)) if self.ego.is_none() => {
                            out.push(format!("events[{i}].ahead: needs an ego vehicle"))
                        }
                        (Some(s), None) if !(0.0..length).contains(s) => {
                            out.push(format!("events[{i}].s: {s} is outside the road"))
                        }
                        _ => {}
                    }
                    let max_lanes = self.map.segments().iter().map(|g| g.lane_count).max().unwrap_or(0);
                    if *lane >= max_lanes {
                        out.push(format!("events[{i}].lane: {lane} exceeds the lane count"));
                    }
                }
                Event::SecuredEndOverride { distance, .. } => {
                    if self.ego.is_none() {
                        out.push(format!("events[{i}]: needs an ego vehicle"));
                    }
                    if !(distance.is_finite() && *distance >= 0.0) {
                        out.push(format!("events[{i}].distance: must be non-negative"));
                    }
                }
                Event::SensorFault { duration, .. } => {
                    if duration.is_some_and(|d| d.is_nan() || d <= 0.0) {
                        out.push(format!("events[{i}].duration: must be positive"));
                    }
                }
                Event::DriverInput { duration, input, .. } => {
                    if self.ego.is_none() {
                        out.push(format!("events[{i}]: driver input needs an ego vehicle"));
                    }
                    if !(duration.is_finite() && *duration >= 0.0) {
                        out.push(format!("events[{i}].duration: must be non-negative"));
                    }
                    if !input.is_finite() {
                        out.push(format!("events[{i}].input: values must be finite"));
                    }
                }
            }
        }
        out
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        let problems = self.violations();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(ScenarioError::Invalid(problems))
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("scenario serializes")
    }
}

/// Parses and validates a scenario from JSON text.
pub fn parse_scenario(text: &str) -> Result<Scenario, ScenarioError> {
    let scenario: Scenario = serde_json::from_str(text).map_err(|e| ScenarioError::Parse {
        line: e.line(),
        column: e.column(),
        message: e.to_string(),
    })?;
    scenario.validate()?;
    Ok(scenario)
}

pub fn load_scenario(path: impl AsRef<Path>) -> Result<Scenario, ScenarioError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| ScenarioError::Io {
        path: path.display().to_string(),
        source,
    })?;
    parse_scenario(&text)
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{
        "map": {"segments": [{"length": 500, "lane_count": 2, "speed_limit": 13.89, "secured": true}]},
        "duration": 10,
        "ego": {"s": 0, "v": 10}
    }"#;

    #[test]
    fn minimal_file_gets_defaults() {
        let sc = parse_scenario(MINIMAL).unwrap();
        assert_eq!(sc.config().unwrap(), Config::default());
        assert_eq!(sc.ego.unwrap().persona, Persona::Attentive);
    }

    #[test]
    fn negative_length_names_field() {
        let bad = MINIMAL.replace("\"length\": 500", "\"length\": -5");
        let err = parse_scenario(&bad).unwrap_err().to_string();
        assert!(err.contains("segments[0].length"), "{err}");
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replace("\"duration\": 10", "\"duration\": 10, \"durration\": 3");
        assert!(matches!(parse_scenario(&bad), Err(ScenarioError::Parse { .. })));
    }

    #[test]
    fn violations_listed_exhaustively() {
        let mut sc = parse_scenario(MINIMAL).unwrap();
        sc.duration = -1.0;
        sc.events = vec![
            Event::SecuredEndOverride { t: 5.0, distance: 10.0 },
            Event::ObstacleSpawn { t: 1.0, s: None, ahead: None, lane: 7 },
        ];
        let v = sc.violations();
        assert!(v.len() >= 4, "{v:?}");
    }

    #[test]
    fn round_trip() {
        let sc = parse_scenario(MINIMAL).unwrap();
        assert_eq!(parse_scenario(&sc.to_json()).unwrap(), sc);
    }
}
