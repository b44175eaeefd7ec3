use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::modes::Mode;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Upper edges of the time-to-collision bins, in seconds; the last bin is open.
pub const TTC_BIN_EDGES: [f64; 7] = [1.0, 2.0, 3.0, 4.0, 5.0, 7.5, 10.0];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TtcBin {
    pub lower: f64,
    /// `None` for the open last bin.
    pub upper: Option<f64>,
    /// Vehicle-seconds spent with a time-to-collision in this bin.
    pub seconds: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TorOutcomes {
    pub issued: u64,
    pub acknowledged: u64,
    pub expired: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub schema_version: u32,
    pub duration: f64,
    pub vehicles: usize,
    pub abv_vehicles: usize,
    /// Vehicles per hour past the gantry.
    pub throughput: f64,
    pub mean_speed: f64,
    pub total_fuel_g: f64,
    pub distance_km: f64,
    pub fuel_g_per_km: f64,
    pub collisions: u64,
    pub min_ttc_histogram: Vec<TtcBin>,
    pub ttc_lt_2s_exposure: f64,
    /// Seconds spent in each mode, summed over automated vehicles.
    pub mode_occupancy: BTreeMap<Mode, f64>,
    pub tor_outcomes: TorOutcomes,
    pub refusals: u64,
    pub recommendations_issued: u64,
    pub max_assist_torque: f64,
}

/// Running totals that become [`Metrics`] at the end of a run.
#[derive(Debug, Clone, Default)]
pub struct MetricsAccumulator {
    pub vehicles: usize,
    pub abv_vehicles: usize,
    pub gantry_crossings: u64,
    pub speed_time: f64,
    pub vehicle_time: f64,
    pub fuel_g: f64,
    pub distance_m: f64,
    pub collisions: u64,
    pub ttc_bins: Vec<f64>,
    pub ttc_lt_2s: f64,
    pub mode_time: BTreeMap<Mode, f64>,
    pub tor: TorOutcomes,
    pub refusals: u64,
    pub recommendations: u64,
    pub max_assist: f64,
}

impl MetricsAccumulator {
    pub fn new(vehicles: usize, abv_vehicles: usize) -> Self {
        Self {
            vehicles,
            abv_vehicles,
            ttc_bins: vec![0.0; TTC_BIN_EDGES.len() + 1],
            mode_time: Mode::ALL.iter().map(|m| (*m, 0.0)).collect(),
            ..Default::default()
        }
    }

    pub fn record_ttc(&mut self, ttc: f64, dt: f64) {
        let bin = TTC_BIN_EDGES.partition_point(|&e| e <= ttc);
        self.ttc_bins[bin] += dt;
        if ttc < 2.0 {
            self.ttc_lt_2s += dt;
        }
    }

    pub fn finish(&self, duration: f64) -> Metrics {
        let mut lower = 0.0;
        let min_ttc_histogram = self
            .ttc_bins
            .iter()
            .enumerate()
            .map(|(i, &seconds)| {
                let upper = TTC_BIN_EDGES.get(i).copied();
                let bin = TtcBin { lower, upper, seconds };
                lower = upper.unwrap_or(f64::INFINITY);
                bin
            })
            .collect();
        let distance_km = self.distance_m / 1000.0;
        Metrics {
            schema_version: METRICS_SCHEMA_VERSION,
            duration,
            vehicles: self.vehicles,
            abv_vehicles: self.abv_vehicles,
            throughput: if duration > 0.0 {
                self.gantry_crossings as f64 * 3600.0 / duration
            } else {
                0.0
            },
            mean_speed: if self.vehicle_time > 0.0 {
                self.speed_time / self.vehicle_time
            } else {
                0.0
            },
            total_fuel_g: self.fuel_g,
            distance_km,
            fuel_g_per_km: if distance_km > 0.0 { self.fuel_g / distance_km } else { 0.0 },
            collisions: self.collisions,
            min_ttc_histogram,
            ttc_lt_2s_exposure: self.ttc_lt_2s,
            mode_occupancy: self.mode_time.clone(),
            tor_outcomes: self.tor,
            refusals: self.refusals,
            recommendations_issued: self.recommendations,
            max_assist_torque: self.max_assist,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ttc_binning() {
        let mut acc = MetricsAccumulator::new(1, 0);
        acc.record_ttc(0.5, 0.1);
        acc.record_ttc(1.0, 0.1);
        acc.record_ttc(f64::INFINITY, 0.1);
        let m = acc.finish(1.0);
        assert_eq!(m.min_ttc_histogram[0].seconds, 0.1);
        assert_eq!(m.min_ttc_histogram[1].seconds, 0.1);
        assert_eq!(m.min_ttc_histogram.last().unwrap().seconds, 0.1);
        assert!((m.ttc_lt_2s_exposure - 0.2).abs() < 1e-12);
    }
}
