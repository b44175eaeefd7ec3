//! Conventional traffic and the secured-road supervisor.

use std::collections::BTreeMap;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::{IdmParams, TrafficConfig, VehicleParams};
use crate::geometry::{RoadMap, VehicleState};
use crate::rng::SimRng;

#[derive(Debug, Error, PartialEq)]
pub enum TrafficError {
    #[error("density {density} veh/km/lane needs {needed:.1} m per vehicle but only {available:.1} m fits")]
    InfeasibleDensity {
        density: f64,
        needed: f64,
        available: f64,
    },
    #[error("penetration {0} outside [0, 1]")]
    Penetration(f64),
    #[error("spawn region [{start}, {end}] is empty or off the road")]
    Region { start: f64, end: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct IdmOutput {
    pub accel: f64,
    /// The gap was not positive.
    pub collision: bool,
}

/// Intelligent Driver Model acceleration toward `desired_speed`.
///
/// `gap` is bumper to bumper; pass `f64::INFINITY` on a free road.
pub fn idm_accel(v: f64, v_lead: f64, gap: f64, desired_speed: f64, p: &IdmParams) -> IdmOutput {
    if gap <= 0.0 {
        return IdmOutput {
            accel: p.a_floor,
            collision: true,
        };
    }
    let free = if desired_speed > 0.0 {
        1.0 - (v.max(0.0) / desired_speed).powf(p.delta)
    } else {
        -1.0
    };
    let dynamic = v * p.time_gap + v * (v - v_lead) / (2.0 * (p.a_max * p.b_comf).sqrt());
    let s_star = p.s0 + dynamic.max(0.0);
    let interaction = if gap.is_finite() { (s_star / gap).powi(2) } else { 0.0 };
    IdmOutput {
        accel: (p.a_max * (free - interaction)).clamp(p.a_floor, p.a_max),
        collision: false,
    }
}

/// Speed at which an IDM platoon with uniform bumper gap `gap` is in equilibrium.
pub fn idm_equilibrium_speed(gap: f64, desired_speed: f64, p: &IdmParams) -> f64 {
    let (mut lo, mut hi) = (0.0, desired_speed);
    for _ in 0..60 {
        let mid = 0.5 * (lo + hi);
        if idm_accel(mid, mid, gap, desired_speed, p).accel > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// A human-driven vehicle following the IDM in its lane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConventionalVehicle {
    pub state: VehicleState,
    /// Multiple of the local speed limit this driver aims for.
    pub speed_factor: f64,
}

impl ConventionalVehicle {
    pub fn desired_speed(&self, map: &RoadMap) -> f64 {
        self.speed_factor * map.speed_limit_at(self.state.s)
    }
}

/// Speed advice for one segment from the infrastructure.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recommendation {
    pub segment_id: u32,
    pub advised_limit: f64,
    pub issued_at: f64,
    pub ttl: f64,
}

impl Recommendation {
    pub fn live(&self, t: f64) -> bool {
        t < self.issued_at + self.ttl
    }
}

/// What the supervisor learns about one vehicle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleReport {
    pub id: u64,
    pub segment: usize,
    pub v: f64,
    /// Automated vehicles report themselves; others are only seen by static sensors.
    pub abv: bool,
}

/// Vehicles per km per lane seen on each segment.
pub fn segment_densities(reports: &[VehicleReport], map: &RoadMap) -> Vec<f64> {
    let mut counts = vec![0usize; map.segments().len()];
    for r in reports {
        let seg = &map.segments()[r.segment];
        if r.abv || seg.instrumented {
            counts[r.segment] += 1;
        }
    }
    map.segments()
        .iter()
        .zip(counts)
        .map(|(seg, n)| n as f64 / (seg.length / 1000.0) / seg.lane_count as f64)
        .collect()
}

/// Recommendations triggered by the current reports.
pub fn supervisor_step(
    reports: &[VehicleReport],
    map: &RoadMap,
    t: f64,
    cfg: &TrafficConfig,
) -> Vec<Recommendation> {
    segment_densities(reports, map)
        .into_iter()
        .zip(map.segments())
        .filter_map(|(density, seg)| {
            let advised = if density > cfg.density_high {
                cfg.advise_high
            } else if density > cfg.density_mid {
                cfg.advise_mid
            } else {
                return None;
            };
            Some(Recommendation {
                segment_id: seg.id,
                advised_limit: advised.min(seg.speed_limit),
                issued_at: t,
                ttl: cfg.recommendation_ttl,
            })
        })
        .collect()
}

/// Live recommendations per segment; a fresh issue replaces the previous one.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Supervisor {
    pub active: BTreeMap<u32, Recommendation>,
    pub issued: u64,
}

impl Supervisor {
    pub fn update(&mut self, reports: &[VehicleReport], map: &RoadMap, t: f64, cfg: &TrafficConfig) {
        for rec in supervisor_step(reports, map, t, cfg) {
            self.active.insert(rec.segment_id, rec);
            self.issued += 1;
        }
        self.active.retain(|_, r| r.live(t));
    }

    /// Advised limit per segment id, for the planners.
    pub fn advised(&self, t: f64) -> BTreeMap<u32, f64> {
        self.active
            .iter()
            .filter(|(_, r)| r.live(t))
            .map(|(id, r)| (*id, r.advised_limit))
            .collect()
    }
}

/// How the vehicles of a scenario are placed on the road.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrafficSpec {
    /// Vehicles per km per lane.
    pub density: f64,
    /// Share of automated vehicles.
    #[serde(default)]
    pub penetration: f64,
    /// Spawn region start; defaults to the start of the road.
    #[serde(default)]
    pub start: f64,
    /// Spawn region end; defaults to the end of the road.
    #[serde(default)]
    pub end: Option<f64>,
    /// Lanes to fill; all lanes when empty.
    #[serde(default)]
    pub lanes: Vec<usize>,
    /// Free distance kept around `(s, lane)` positions, such as a scripted ego.
    #[serde(default)]
    pub keep_clear: Vec<(f64, usize)>,
    #[serde(default = "default_clearance")]
    pub keep_clear_radius: f64,
}

fn default_clearance() -> f64 {
    30.0
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpawnedVehicle {
    pub state: VehicleState,
    pub abv: bool,
    pub speed_factor: f64,
}

/// Deceleration a spawned vehicle may need to meet a lower limit ahead.
const SPAWN_APPROACH_DECEL: f64 = 0.5;

/// Highest speed at `s` from which every lower limit ahead is reachable at `decel`.
fn approach_limit(map: &RoadMap, s: f64, decel: f64) -> f64 {
    let here = map.speed_limit_at(s);
    let reach = here * here / (2.0 * decel);
    map.boundaries_ahead(s, reach)
        .into_iter()
        .map(|(dist, idx)| {
            let next = map.segments()[idx].speed_limit;
            (next * next + 2.0 * decel * dist).sqrt()
        })
        .fold(here, f64::min)
}

/// Places vehicles evenly per lane with a small jitter, each automated with
/// probability `penetration`, at the IDM equilibrium speed for the spacing.
pub fn spawn_traffic(
    spec: &TrafficSpec,
    map: &RoadMap,
    cfg: &TrafficConfig,
    vehicle: &VehicleParams,
    rng: &mut SimRng,
) -> Result<Vec<SpawnedVehicle>, TrafficError> {
    if !(0.0..=1.0).contains(&spec.penetration) {
        return Err(TrafficError::Penetration(spec.penetration));
    }
    let end = spec.end.unwrap_or(map.total_length());
    if !(end > spec.start && spec.start >= 0.0 && end <= map.total_length() + 1e-9) {
        return Err(TrafficError::Region {
            start: spec.start,
            end,
        });
    }
    if spec.density <= 0.0 {
        return Ok(Vec::new());
    }
    let span = end - spec.start;
    let spacing = 1000.0 / spec.density;
    let needed = vehicle.length + cfg.idm.s0;
    if spacing < needed {
        return Err(TrafficError::InfeasibleDensity {
            density: spec.density,
            needed,
            available: spacing,
        });
    }
    let per_lane = (span / spacing).floor() as usize;
    let lane_count = map.segment_at(spec.start).lane_count;
    let lanes: Vec<usize> = if spec.lanes.is_empty() {
        (0..lane_count).collect()
    } else {
        spec.lanes.clone()
    };
    let jitter = 0.2 * (spacing - needed);
    let (lo_f, hi_f) = cfg.desired_speed_factor;

    let mut out = Vec::new();
    for &lane in &lanes {
        let phase = rng.random::<f64>() * spacing;
        for k in 0..per_lane {
            let u: f64 = rng.random();
            let abv_draw: f64 = rng.random();
            let factor_draw: f64 = rng.random();
            let s = spec.start + (phase + k as f64 * spacing + jitter * (u - 0.5)).rem_euclid(span);
            let clear = spec.keep_clear.iter().any(|&(cs, cl)| {
                cl == lane && map.delta_s(cs, s).abs() < spec.keep_clear_radius
            });
            if clear {
                continue;
            }
            let speed_factor = lo_f + (hi_f - lo_f) * factor_draw;
            let limit = approach_limit(map, s, SPAWN_APPROACH_DECEL);
            let gap = spacing - vehicle.length - jitter;
            let v = idm_equilibrium_speed(gap.max(cfg.idm.s0), speed_factor * limit, &cfg.idm).min(limit);
            out.push(SpawnedVehicle {
                state: VehicleState::at(map.wrap_s(s), lane, v, map),
                abv: abv_draw < spec.penetration,
                speed_factor,
            });
        }
    }
    out.sort_by(|a, b| a.state.lane.cmp(&b.state.lane).then(a.state.s.total_cmp(&b.state.s)));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::RoadSegment;
    use crate::rng::RngStreams;

    #[test]
    fn idm_examples() {
        let p = IdmParams::default();
        assert!(idm_accel(12.0, 12.0, f64::INFINITY, 12.0, &p).accel.abs() < 1e-3);
        assert_eq!(idm_accel(0.0, 0.0, 2.0, 12.0, &p).accel, 0.0);
        let s_star: f64 = 2.0 + 10.0 * 1.5;
        let oracle = 1.0 * (1.0 - (10.0f64 / 13.89).powi(4) - (s_star / 25.0).powi(2));
        assert!((idm_accel(10.0, 10.0, 25.0, 13.89, &p).accel - oracle).abs() < 1e-12);
        let hit = idm_accel(5.0, 0.0, 0.0, 13.89, &p);
        assert!(hit.collision);
        assert_eq!(hit.accel, -8.0);
    }

    #[test]
    fn equilibrium_speed_balances() {
        let p = IdmParams::default();
        let v = idm_equilibrium_speed(20.0, 13.89, &p);
        assert!(idm_accel(v, v, 20.0, 13.89, &p).accel.abs() < 1e-6);
    }

    fn ring(lanes: usize) -> RoadMap {
        RoadMap::new(vec![RoadSegment::straight(1000.0, lanes, 13.89)], true).unwrap()
    }

    #[test]
    fn supervisor_thresholds() {
        let map = ring(1);
        let cfg = TrafficConfig::default();
        assert!(supervisor_step(&[], &map, 0.0, &cfg).is_empty());
        let reports: Vec<VehicleReport> = (0..50)
            .map(|i| VehicleReport { id: i, segment: 0, v: 5.0, abv: true })
            .collect();
        let recs = supervisor_step(&reports, &map, 3.0, &cfg);
        assert_eq!(recs.len(), 1);
        assert_eq!(recs[0].advised_limit, 8.33);
        assert_eq!(supervisor_step(&reports[..30], &map, 3.0, &cfg)[0].advised_limit, 11.11);
    }

    #[test]
    fn conventional_only_counted_when_instrumented() {
        let mut seg = RoadSegment::straight(1000.0, 1, 13.89);
        let reports: Vec<VehicleReport> = (0..50)
            .map(|i| VehicleReport { id: i, segment: 0, v: 5.0, abv: false })
            .collect();
        let cfg = TrafficConfig::default();
        let blind = RoadMap::new(vec![seg.clone()], true).unwrap();
        assert!(supervisor_step(&reports, &blind, 0.0, &cfg).is_empty());
        seg.instrumented = true;
        let seen = RoadMap::new(vec![seg], true).unwrap();
        assert_eq!(supervisor_step(&reports, &seen, 0.0, &cfg).len(), 1);
    }

    #[test]
    fn spawn_extremes_and_determinism() {
        let map = ring(2);
        let cfg = TrafficConfig::default();
        let veh = VehicleParams::default();
        let mut spec = TrafficSpec {
            density: 20.0,
            penetration: 0.0,
            start: 0.0,
            end: None,
            lanes: vec![],
            keep_clear: vec![],
            keep_clear_radius: 30.0,
        };
        let mut rng = RngStreams::new(1).stream("spawn", 0);
        let all_conv = spawn_traffic(&spec, &map, &cfg, &veh, &mut rng).unwrap();
        assert_eq!(all_conv.len(), 40);
        assert!(all_conv.iter().all(|v| !v.abv));
        spec.penetration = 1.0;
        let all_abv = spawn_traffic(&spec, &map, &cfg, &veh, &mut rng).unwrap();
        assert!(all_abv.iter().all(|v| v.abv));
        let a = spawn_traffic(&spec, &map, &cfg, &veh, &mut RngStreams::new(9).stream("spawn", 0)).unwrap();
        let b = spawn_traffic(&spec, &map, &cfg, &veh, &mut RngStreams::new(9).stream("spawn", 0)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn spawn_speed_respects_lower_limit_ahead() {
        let map = RoadMap::new(
            vec![RoadSegment::straight(300.0, 1, 13.89), RoadSegment::straight(300.0, 1, 8.33)],
            false,
        )
        .unwrap();
        let spec = TrafficSpec {
            density: 20.0,
            penetration: 0.0,
            start: 0.0,
            end: Some(300.0),
            lanes: vec![],
            keep_clear: vec![],
            keep_clear_radius: 30.0,
        };
        let cfg = TrafficConfig::default();
        let mut rng = RngStreams::new(4).stream("spawn", 0);
        for v in spawn_traffic(&spec, &map, &cfg, &VehicleParams::default(), &mut rng).unwrap() {
            let to_boundary = 300.0 - v.state.s;
            assert!(v.state.v * v.state.v <= 8.33 * 8.33 + 2.0 * SPAWN_APPROACH_DECEL * to_boundary + 1e-9);
        }
    }

    #[test]
    fn spawn_rejects_infeasible_density() {
        let map = ring(1);
        let spec = TrafficSpec {
            density: 200.0,
            penetration: 0.5,
            start: 0.0,
            end: None,
            lanes: vec![],
            keep_clear: vec![],
            keep_clear_radius: 30.0,
        };
        let err = spawn_traffic(&spec, &map, &TrafficConfig::default(), &VehicleParams::default(), &mut RngStreams::new(1).stream("spawn", 0));
        assert!(matches!(err, Err(TrafficError::InfeasibleDensity { .. })));
    }
}
