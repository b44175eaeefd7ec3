//! Low-speed automation simulator and copilot.

pub mod config;
pub mod control;
pub mod geometry;
pub mod modes;
pub mod perception;
pub mod planner;
pub mod rng;
pub mod sim;
pub mod traffic;

pub use config::Config;
pub use geometry::{Command, RoadMap, RoadSegment, VehicleState};
pub use modes::{DriverInput, Mode, TakeOverRequest, TorState};
pub use planner::{ManeuverKind, Trajectory};
pub use sim::{load_scenario, run, Metrics, RunOptions, RunOutput, Scenario, SimError, Simulation};
