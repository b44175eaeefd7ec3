//! Simulated lane sensing, localization, object detection and track fusion.
//!
//! Object detections and tracks live in the ego-relative road frame:
//! `rel_s` is the arc-length offset ahead of the ego, `rel_d` the lateral
//! offset to its left and `rel_v` the closing-rate sign convention
//! `v_object - v_ego`.

use std::collections::BTreeSet;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::config::{PerceptionConfig, SensorConfig};
use crate::geometry::{RoadMap, VehicleState};
use crate::rng::SimRng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LaneMeasurement {
    /// Offset from the centre of the lane the ego occupies.
    pub lateral_offset: f64,
    pub heading_err: f64,
    pub curvature_est: f64,
    pub range_valid: f64,
}

/// Lane-marking observation; `None` when the markings are not detected.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LaneObservation {
    pub measurement: Option<LaneMeasurement>,
}

impl LaneObservation {
    pub fn valid(&self) -> bool {
        self.measurement.is_some()
    }
}

/// One raw lane-detection draw: valid with probability `marking_quality`.
///
/// Always consumes the same number of random draws so that outcomes in one
/// step do not shift the sequence seen by the next.
pub fn sense_lanes(
    ego: &VehicleState,
    map: &RoadMap,
    cfg: &PerceptionConfig,
    rng: &mut SimRng,
) -> LaneObservation {
    let seg = map.segment_at(ego.s);
    let u: f64 = rng.random();
    let nd: f64 = rng.sample(StandardNormal);
    let npsi: f64 = rng.sample(StandardNormal);
    if u >= seg.marking_quality {
        return LaneObservation::default();
    }
    let lane = seg.lane_of(ego.d);
    LaneObservation {
        measurement: Some(LaneMeasurement {
            lateral_offset: ego.d - seg.lane_center(lane) + cfg.lane_sigma_d * nd,
            heading_err: ego.heading_err + cfg.lane_sigma_heading * npsi,
            curvature_est: seg.curvature,
            range_valid: cfg.lane_range.min(40.0),
        }),
    }
}

/// Offset change treated as a switch of reference lane rather than motion.
const LANE_SWITCH: f64 = 1.0;

/// Lane sensing smoothed by a first-order filter, holding the last value
/// over short dropouts.
#[derive(Debug, Clone, Default)]
pub struct LaneTracker {
    last: Option<(f64, LaneMeasurement)>,
}

impl LaneTracker {
    pub fn update(&mut self, raw: LaneObservation, t: f64, debounce: f64, alpha: f64) -> LaneObservation {
        if let Some(mut m) = raw.measurement {
            if let Some((_, prev)) = self.last {
                if (m.lateral_offset - prev.lateral_offset).abs() < LANE_SWITCH {
                    m.lateral_offset = prev.lateral_offset + alpha * (m.lateral_offset - prev.lateral_offset);
                    m.heading_err = prev.heading_err + alpha * (m.heading_err - prev.heading_err);
                }
            }
            self.last = Some((t, m));
            return LaneObservation { measurement: Some(m) };
        }
        match self.last {
            Some((seen, m)) if t - seen <= debounce + 1e-9 => LaneObservation {
                measurement: Some(m),
            },
            _ => LaneObservation::default(),
        }
    }
}

/// Noisy position and speed fix smoothed by a first-order filter.
///
/// Odometry is treated as exact, so the filter propagates its error state
/// unchanged between fixes and blends in the new error with weight `alpha`.
#[derive(Debug, Clone, Default)]
pub struct Localizer {
    err: Option<(f64, f64)>,
}

impl Localizer {
    pub fn localize(
        &mut self,
        truth: &VehicleState,
        map: &RoadMap,
        cfg: &PerceptionConfig,
        rng: &mut SimRng,
    ) -> VehicleState {
        let ns: f64 = rng.sample(StandardNormal);
        let nv: f64 = rng.sample(StandardNormal);
        let meas = (cfg.loc_sigma_s * ns, cfg.loc_sigma_v * nv);
        let alpha = cfg.loc_alpha;
        let (es, ev) = match self.err {
            None => meas,
            Some((ps, pv)) => (ps + alpha * (meas.0 - ps), pv + alpha * (meas.1 - pv)),
        };
        self.err = Some((es, ev));
        VehicleState {
            s: map.wrap_s(truth.s + es),
            v: (truth.v + ev).max(0.0),
            ..*truth
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SensorKind {
    Camera,
    Laser,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub sensor: SensorKind,
    pub rel_s: f64,
    pub rel_d: f64,
    /// Only the laser measures speed.
    pub rel_speed: Option<f64>,
    pub timestamp: f64,
}

/// Ground-truth object as seen by the sensor model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensedObject {
    pub s: f64,
    pub d: f64,
    pub v: f64,
}

/// Which sensors are producing detections this step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SensorStatus {
    pub camera: bool,
    pub laser: bool,
    pub lanes: bool,
}

impl Default for SensorStatus {
    fn default() -> Self {
        Self {
            camera: true,
            laser: true,
            lanes: true,
        }
    }
}

fn in_view(rel_s: f64, rel_d: f64, heading: f64, sensor: &SensorConfig) -> bool {
    let range = rel_s.hypot(rel_d);
    if range > sensor.range || range < 1e-9 {
        return false;
    }
    let bearing = crate::geometry::wrap_angle(rel_d.atan2(rel_s) - heading);
    bearing.abs() <= sensor.half_fov_deg.to_radians()
}

/// Whether the sight line from the origin to `target` passes through another object's disc.
fn occluded(target: (f64, f64), blockers: &[(f64, f64)], skip: usize, radius: f64) -> bool {
    let len2 = target.0 * target.0 + target.1 * target.1;
    blockers.iter().enumerate().any(|(j, &(bx, by))| {
        if j == skip {
            return false;
        }
        let u = ((bx * target.0 + by * target.1) / len2).clamp(0.0, 1.0);
        let (px, py) = (u * target.0 - bx, u * target.1 - by);
        u > 0.0 && u < 1.0 && px * px + py * py < radius * radius
    })
}

/// Camera and laser detections of `objects` from the ego's viewpoint.
///
/// Every object consumes a fixed number of draws per sensor, in object order,
/// whether or not it ends up detected.
pub fn sense_objects(
    ego: &VehicleState,
    objects: &[SensedObject],
    map: &RoadMap,
    cfg: &PerceptionConfig,
    status: SensorStatus,
    t: f64,
    rng: &mut SimRng,
) -> Vec<Detection> {
    let max_range = cfg.camera.range.max(cfg.laser.range) + cfg.occlusion_radius;
    let rel: Vec<(f64, f64)> = objects
        .iter()
        .map(|o| (map.delta_s(ego.s, o.s), o.d - ego.d))
        .collect();
    let near: Vec<usize> = (0..objects.len())
        .filter(|&i| rel[i].0.abs() <= max_range && rel[i].1.abs() <= max_range)
        .collect();
    let blockers: Vec<(f64, f64)> = near.iter().map(|&i| rel[i]).collect();

    let mut out = Vec::new();
    for (k, &i) in near.iter().enumerate() {
        let (rs, rd) = rel[i];
        let visible = !occluded((rs, rd), &blockers, k, cfg.occlusion_radius);
        for (kind, sensor, on) in [
            (SensorKind::Laser, &cfg.laser, status.laser),
            (SensorKind::Camera, &cfg.camera, status.camera),
        ] {
            let miss: f64 = rng.random();
            let ns: f64 = rng.sample(StandardNormal);
            let nd: f64 = rng.sample(StandardNormal);
            let nv: f64 = rng.sample(StandardNormal);
            if !on || !visible || miss < sensor.miss_probability {
                continue;
            }
            if !in_view(rs, rd, ego.heading_err, sensor) {
                continue;
            }
            let rel_speed = (kind == SensorKind::Laser)
                .then(|| objects[i].v - ego.v + sensor.sigma_speed * nv);
            out.push(Detection {
                sensor: kind,
                rel_s: rs + sensor.sigma_pos * ns,
                rel_d: rd + sensor.sigma_pos * nd,
                rel_speed,
                timestamp: t,
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectTrack {
    pub id: u64,
    pub rel_s: f64,
    pub rel_d: f64,
    pub rel_v: f64,
    pub hits: u32,
    pub misses: u32,
    pub confirmed: bool,
    pub sources: BTreeSet<SensorKind>,
}

impl ObjectTrack {
    /// Absolute road position and speed given the ego state used for sensing.
    pub fn absolute(&self, ego: &VehicleState, map: &RoadMap) -> (f64, f64, f64) {
        (
            map.wrap_s(ego.s + self.rel_s),
            ego.d + self.rel_d,
            (ego.v + self.rel_v).max(0.0),
        )
    }

    fn distance_to(&self, det: &Detection) -> f64 {
        (self.rel_s - det.rel_s).hypot(self.rel_d - det.rel_d)
    }
}

/// One detection-to-track pairing made during a fusion step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Association {
    pub track_id: u64,
    pub detection: usize,
}

#[derive(Debug, Clone, Default)]
pub struct FusionReport {
    pub associations: Vec<Association>,
    pub spawned: Vec<u64>,
    pub deleted: Vec<u64>,
    pub merged: Vec<(u64, u64)>,
}

/// Track list plus the id counter, owned by the simulation loop.
#[derive(Debug, Clone, Default)]
pub struct TrackManager {
    pub tracks: Vec<ObjectTrack>,
    next_id: u64,
}

impl TrackManager {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn confirmed(&self) -> impl Iterator<Item = &ObjectTrack> {
        self.tracks.iter().filter(|t| t.confirmed)
    }

    pub fn fuse(&mut self, detections: &[Detection], dt: f64, cfg: &PerceptionConfig) {
        self.fuse_with_report(detections, dt, cfg);
    }

    /// Predict, associate laser then camera detections, manage track life cycle.
    pub fn fuse_with_report(
        &mut self,
        detections: &[Detection],
        dt: f64,
        cfg: &PerceptionConfig,
    ) -> FusionReport {
        let mut report = FusionReport::default();
        for tr in &mut self.tracks {
            tr.rel_s += tr.rel_v * dt;
        }
        let mut hit = vec![false; self.tracks.len()];
        let w = cfg.measurement_weight;

        for kind in [SensorKind::Laser, SensorKind::Camera] {
            let dets: Vec<usize> = (0..detections.len())
                .filter(|&i| detections[i].sensor == kind)
                .collect();
            let mut pairs: Vec<(f64, u64, usize, usize)> = Vec::new();
            for (ti, tr) in self.tracks.iter().enumerate() {
                for &di in &dets {
                    let dist = tr.distance_to(&detections[di]);
                    if dist <= cfg.gate {
                        pairs.push((dist, tr.id, di, ti));
                    }
                }
            }
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
            let mut track_used = vec![false; self.tracks.len()];
            let mut det_used = vec![false; detections.len()];
            for (_, id, di, ti) in pairs {
                if track_used[ti] || det_used[di] {
                    continue;
                }
                track_used[ti] = true;
                det_used[di] = true;
                hit[ti] = true;
                let det = &detections[di];
                let tr = &mut self.tracks[ti];
                tr.rel_s = w * det.rel_s + (1.0 - w) * tr.rel_s;
                tr.rel_d = w * det.rel_d + (1.0 - w) * tr.rel_d;
                if let Some(v) = det.rel_speed {
                    tr.rel_v = w * v + (1.0 - w) * tr.rel_v;
                }
                tr.sources.insert(kind);
                report.associations.push(Association {
                    track_id: id,
                    detection: di,
                });
            }
            for &di in &dets {
                if det_used[di] {
                    continue;
                }
                let det = &detections[di];
                let id = self.next_id;
                self.next_id += 1;
                self.tracks.push(ObjectTrack {
                    id,
                    rel_s: det.rel_s,
                    rel_d: det.rel_d,
                    rel_v: det.rel_speed.unwrap_or(0.0),
                    hits: 0,
                    misses: 0,
                    confirmed: false,
                    sources: BTreeSet::from([kind]),
                });
                hit.push(true);
                report.spawned.push(id);
            }
        }

        for (tr, &h) in self.tracks.iter_mut().zip(&hit) {
            if h {
                tr.hits += 1;
                tr.misses = 0;
                if tr.hits >= cfg.confirm_hits {
                    tr.confirmed = true;
                }
            } else {
                tr.misses += 1;
            }
        }
        self.tracks.retain(|tr| {
            let keep = tr.misses < cfg.delete_misses;
            if !keep {
                report.deleted.push(tr.id);
            }
            keep
        });
        self.merge_duplicates(cfg.gate, &mut report);
        report
    }

    fn merge_duplicates(&mut self, gate: f64, report: &mut FusionReport) {
        loop {
            let mut found = None;
            'outer: for i in 0..self.tracks.len() {
                for j in i + 1..self.tracks.len() {
                    let (a, b) = (&self.tracks[i], &self.tracks[j]);
                    if (a.rel_s - b.rel_s).hypot(a.rel_d - b.rel_d) <= gate {
                        found = Some((i, j));
                        break 'outer;
                    }
                }
            }
            let Some((i, j)) = found else { return };
            let (a, b) = (&self.tracks[i], &self.tracks[j]);
            let keep_i = (a.hits, std::cmp::Reverse(a.id)) >= (b.hits, std::cmp::Reverse(b.id));
            let (keep, drop) = if keep_i { (i, j) } else { (j, i) };
            let dropped = self.tracks[drop].clone();
            let kept = &mut self.tracks[keep];
            kept.sources.extend(dropped.sources.iter().copied());
            kept.confirmed |= dropped.confirmed;
            report.merged.push((kept.id, dropped.id));
            self.tracks.remove(drop);
        }
    }
}

/// Everything the automation stack perceives in one control step.
#[derive(Debug, Clone, PartialEq)]
pub struct PerceptionOutput {
    pub lane: LaneObservation,
    pub ego: VehicleState,
    pub tracks: Vec<ObjectTrack>,
    pub perception_ok: bool,
}

/// Per-vehicle perception pipeline with its own random substreams.
#[derive(Debug, Clone)]
pub struct PerceptionStack {
    lanes: LaneTracker,
    localizer: Localizer,
    pub tracker: TrackManager,
    lane_rng: SimRng,
    loc_rng: SimRng,
    obj_rng: SimRng,
}

impl PerceptionStack {
    pub fn new(lane_rng: SimRng, loc_rng: SimRng, obj_rng: SimRng) -> Self {
        Self {
            lanes: LaneTracker::default(),
            localizer: Localizer::default(),
            tracker: TrackManager::new(),
            lane_rng,
            loc_rng,
            obj_rng,
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn step(
        &mut self,
        truth: &VehicleState,
        objects: &[SensedObject],
        map: &RoadMap,
        cfg: &PerceptionConfig,
        status: SensorStatus,
        t: f64,
        dt: f64,
    ) -> PerceptionOutput {
        let mut raw = sense_lanes(truth, map, cfg, &mut self.lane_rng);
        if !status.lanes {
            raw = LaneObservation::default();
        }
        let lane = self.lanes.update(raw, t, cfg.lane_debounce, cfg.lane_alpha);
        let mut ego = self.localizer.localize(truth, map, cfg, &mut self.loc_rng);
        if let Some(m) = lane.measurement {
            let seg = map.segment_at(truth.s);
            ego.d = seg.lane_center(seg.lane_of(truth.d)) + m.lateral_offset;
            ego.heading_err = m.heading_err;
        }
        let dets = sense_objects(truth, objects, map, cfg, status, t, &mut self.obj_rng);
        self.tracker.fuse(&dets, dt, cfg);
        PerceptionOutput {
            lane,
            ego,
            tracks: self.tracker.tracks.clone(),
            perception_ok: lane.valid() && status.camera && status.laser,
        }
    }
}
