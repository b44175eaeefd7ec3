//! Scenario execution, recording and live telemetry.

pub mod engine;
pub mod metrics;
pub mod scenario;
pub mod server;
pub mod sweep;
pub mod telemetry;
pub mod trace;

pub use engine::{run, Audit, LogEvent, RunOptions, RunOutput, SimError, Simulation};
pub use metrics::Metrics;
pub use scenario::{load_scenario, parse_scenario, Scenario, ScenarioError};
pub use server::{run_interactive, ServeOptions, TelemetryServer};
pub use sweep::{sweep, SweepReport};
