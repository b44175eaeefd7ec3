//! Penetration-rate sweeps over a traffic scenario.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::engine::{run, RunOptions, SimError};
use super::metrics::Metrics;
use super::scenario::Scenario;
use crate::modes::Mode;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("scenario has no traffic section to vary")]
    NoTraffic,
    #[error("penetration {0} outside [0, 1]")]
    Penetration(f64),
    #[error("at least one seed per point is required")]
    NoSeeds,
    #[error("penetration {penetration}, seed {seed}: {source}")]
    Run {
        penetration: f64,
        seed: u64,
        source: SimError,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub std: f64,
}

impl Stat {
    /// Mean and sample standard deviation; zero spread for a single value.
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        if n == 0 {
            return Self::default();
        }
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRun {
    pub penetration: f64,
    pub seed: u64,
    pub metrics: Metrics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPoint {
    pub penetration: f64,
    pub runs: usize,
    /// Some run at this point had a collision.
    pub tainted: bool,
    pub collisions: u64,
    pub throughput: Stat,
    pub mean_speed: Stat,
    pub total_fuel_g: Stat,
    pub fuel_g_per_km: Stat,
    pub ttc_lt_2s_exposure: Stat,
    pub full_system_s: Stat,
    pub tor_issued: Stat,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub scenario: String,
    pub points: Vec<SweepPoint>,
    pub runs: Vec<SweepRun>,
}

/// Seed used for run `index` of every point.
pub fn sweep_seed(base: u64, index: u64) -> u64 {
    base.wrapping_add(index)
}

/// Runs every penetration with `seeds` seeds and aggregates the metrics.
pub fn sweep(scenario: &Scenario, penetrations: &[f64], seeds: u64) -> Result<SweepReport, SweepError> {
    if scenario.traffic.is_none() {
        return Err(SweepError::NoTraffic);
    }
    if let Some(p) = penetrations.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(SweepError::Penetration(*p));
    }
    if seeds == 0 {
        return Err(SweepError::NoSeeds);
    }
    let jobs: Vec<(f64, u64)> = penetrations
        .iter()
        .flat_map(|&p| (0..seeds).map(move |i| (p, sweep_seed(scenario.seed, i))))
        .collect();
    let runs = jobs
        .par_iter()
        .map(|&(penetration, seed)| {
            let mut sc = scenario.clone();
            sc.seed = seed;
            if let Some(traffic) = &mut sc.traffic {
                traffic.penetration = penetration;
            }
            run(&sc, RunOptions::default())
                .map(|out| SweepRun { penetration, seed, metrics: out.metrics })
                .map_err(|source| SweepError::Run { penetration, seed, source })
        })
        .collect::<Result<Vec<_>, _>>()?;

    let points = penetrations
        .iter()
        .map(|&p| {
            let at: Vec<&Metrics> = runs.iter().filter(|r| r.penetration == p).map(|r| &r.metrics).collect();
            let stat = |f: &dyn Fn(&Metrics) -> f64| Stat::of(&at.iter().map(|m| f(m)).collect::<Vec<_>>());
            let collisions = at.iter().map(|m| m.collisions).sum();
            SweepPoint {
                penetration: p,
                runs: at.len(),
                tainted: collisions > 0,
                collisions,
                throughput: stat(&|m| m.throughput),
                mean_speed: stat(&|m| m.mean_speed),
                total_fuel_g: stat(&|m| m.total_fuel_g),
                fuel_g_per_km: stat(&|m| m.fuel_g_per_km),
                ttc_lt_2s_exposure: stat(&|m| m.ttc_lt_2s_exposure),
                full_system_s: stat(&|m| m.mode_occupancy.get(&Mode::FullSystem).copied().unwrap_or(0.0)),
                tor_issued: stat(&|m| m.tor_outcomes.issued as f64),
            }
        })
        .collect();
    Ok(SweepReport {
        scenario: scenario.name.clone(),
        points,
        runs,
    })
}

const STAT_COLUMNS: [&str; 7] = [
    "throughput_veh_h",
    "mean_speed_m_s",
    "total_fuel_g",
    "fuel_g_per_km",
    "ttc_lt_2s_s",
    "full_system_s",
    "tor_issued",
];

impl SweepPoint {
    fn stats(&self) -> [Stat; 7] {
        [
            self.throughput,
            self.mean_speed,
            self.total_fuel_g,
            self.fuel_g_per_km,
            self.ttc_lt_2s_exposure,
            self.full_system_s,
            self.tor_issued,
        ]
    }
}

impl SweepReport {
    /// One row per penetration point.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("schema_version,penetration,runs,tainted,collisions");
        for c in STAT_COLUMNS {
            let _ = write!(out, ",{c}_mean,{c}_std");
        }
        out.push('\n');
        for p in &self.points {
            let _ = write!(
                out,
                "{REPORT_SCHEMA_VERSION},{},{},{},{}",
                p.penetration, p.runs, p.tainted as u8, p.collisions
            );
            for s in p.stats() {
                let _ = write!(out, ",{:.6},{:.6}", s.mean, s.std);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        let name = if self.scenario.is_empty() { "scenario" } else { &self.scenario };
        let _ = writeln!(out, "sweep of {name}: {} points, {} runs", self.points.len(), self.runs.len());
        for p in &self.points {
            let _ = writeln!(
                out,
                "  p={:.2}  throughput {:.0} ± {:.0} veh/h  speed {:.2} ± {:.2} m/s  fuel {:.1} ± {:.1} g/km  ttc<2s {:.1} s{}",
                p.penetration,
                p.throughput.mean,
                p.throughput.std,
                p.mean_speed.mean,
                p.mean_speed.std,
                p.fuel_g_per_km.mean,
                p.fuel_g_per_km.std,
                p.ttc_lt_2s_exposure.mean,
                if p.tainted { format!("  TAINTED ({} collisions)", p.collisions) } else { String::new() },
            );
        }
        out
    }
}
