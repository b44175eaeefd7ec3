//! Per-step CSV trace of one vehicle plus fleet aggregates.

pub const TRACE_SCHEMA_VERSION: u32 = 1;

pub const TRACE_COLUMNS: [&str; 18] = [
    "schema_version",
    "step",
    "t",
    "ego_s",
    "ego_d",
    "ego_v",
    "ego_a",
    "ego_steer",
    "ego_mode",
    "tor_state",
    "plan_kind",
    "assist_torque",
    "driver_torque",
    "override_active",
    "ego_fuel_g",
    "fleet_n",
    "fleet_mean_v",
    "collisions",
];

pub fn trace_header() -> String {
    let mut h = TRACE_COLUMNS.join(",");
    h.push('\n');
    h
}

#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub step: u64,
    pub t: f64,
    pub s: f64,
    pub d: f64,
    pub v: f64,
    pub a: f64,
    pub steer: f64,
    pub mode: String,
    pub tor_state: String,
    pub plan_kind: String,
    pub assist_torque: f64,
    pub driver_torque: f64,
    pub override_active: bool,
    pub fuel_g: f64,
    pub fleet_n: usize,
    pub fleet_mean_v: f64,
    pub collisions: u64,
}

impl TraceRow {
    pub fn write_to(&self, out: &mut String) {
        use std::fmt::Write;
        let _ = writeln!(
            out,
            "{TRACE_SCHEMA_VERSION},{},{:.2},{:.4},{:.4},{:.4},{:.4},{:.5},{},{},{},{:.4},{:.4},{},{:.4},{},{:.4},{}",
            self.step,
            self.t,
            self.s,
            self.d,
            self.v,
            self.a,
            self.steer,
            self.mode,
            self.tor_state,
            self.plan_kind,
            self.assist_torque,
            self.driver_torque,
            u8::from(self.override_active),
            self.fuel_g,
            self.fleet_n,
            self.fleet_mean_v,
            self.collisions,
        );
    }
}

/// Parsed trace row values keyed by column, for tests and tools.
pub fn parse_trace(text: &str) -> Vec<std::collections::BTreeMap<String, String>> {
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().map(|h| h.split(',').collect()).unwrap_or_default();
    lines
        .map(|line| {
            header
                .iter()
                .zip(line.split(','))
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect()
        })
        .collect()
}
