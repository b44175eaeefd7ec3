//! Road network, Frenet/global conversion and kinematic vehicle dynamics.
//!
//! The reference line is the centre of lane 0 (the rightmost lane). Lateral
//! offsets `d` are positive to the left, so lane `i` is centred at
//! `d = i * lane_width` and an emergency lane, when present, at `d = -lane_width`.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::config::VehicleParams;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("invalid road map: {}", .0.join("; "))]
    InvalidMap(Vec<String>),
    #[error("arc length {s} outside open road [0, {length})")]
    OutOfRange { s: f64, length: f64 },
    #[error("point ({x:.3}, {y:.3}) is outside the road corridor")]
    OutOfCorridor { x: f64, y: f64 },
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadSegment {
    #[serde(default)]
    pub id: u32,
    pub length: f64,
    #[serde(default)]
    pub curvature: f64,
    #[serde(default = "one")]
    pub lane_count: usize,
    #[serde(default = "default_lane_width")]
    pub lane_width: f64,
    pub speed_limit: f64,
    #[serde(default)]
    pub secured: bool,
    #[serde(default)]
    pub has_emergency_lane: bool,
    #[serde(default = "one_f")]
    pub marking_quality: f64,
    /// Static infrastructure counters cover this segment.
    #[serde(default)]
    pub instrumented: bool,
}

fn one() -> usize {
    1
}
fn one_f() -> f64 {
    1.0
}
fn default_lane_width() -> f64 {
    3.5
}

impl RoadSegment {
    pub fn straight(length: f64, lane_count: usize, speed_limit: f64) -> Self {
        Self {
            id: 0,
            length,
            curvature: 0.0,
            lane_count,
            lane_width: 3.5,
            speed_limit,
            secured: false,
            has_emergency_lane: false,
            marking_quality: 1.0,
            instrumented: false,
        }
    }

    pub fn with_curvature(mut self, curvature: f64) -> Self {
        self.curvature = curvature;
        self
    }

    pub fn secured(mut self, emergency_lane: bool) -> Self {
        self.secured = true;
        self.has_emergency_lane = emergency_lane;
        self
    }

    pub fn lane_center(&self, lane: usize) -> f64 {
        lane as f64 * self.lane_width
    }

    pub fn emergency_lane_center(&self) -> Option<f64> {
        self.has_emergency_lane.then_some(-self.lane_width)
    }

    /// Lateral extent of the carriageway (edge lines), excluding any emergency lane.
    pub fn lateral_bounds(&self) -> (f64, f64) {
        let w = self.lane_width;
        (-0.5 * w, (self.lane_count as f64 - 0.5) * w)
    }

    /// Nearest lane index for a lateral offset, clamped to the carriageway.
    pub fn lane_of(&self, d: f64) -> usize {
        let idx = (d / self.lane_width).round();
        idx.clamp(0.0, (self.lane_count - 1) as f64) as usize
    }

    fn violations(&self, path: &str) -> Vec<String> {
        let mut out = Vec::new();
        let finite = [
            self.length,
            self.curvature,
            self.lane_width,
            self.speed_limit,
            self.marking_quality,
        ]
        .iter()
        .all(|v| v.is_finite());
        if !finite {
            out.push(format!("{path}: all numeric fields must be finite"));
            return out;
        }
        if self.length <= 0.0 {
            out.push(format!("{path}.length: must be > 0 (got {})", self.length));
        }
        if self.lane_count < 1 {
            out.push(format!("{path}.lane_count: must be >= 1"));
        }
        if self.lane_width <= 0.0 {
            out.push(format!("{path}.lane_width: must be > 0 (got {})", self.lane_width));
        }
        if self.speed_limit <= 0.0 {
            out.push(format!("{path}.speed_limit: must be > 0 (got {})", self.speed_limit));
        }
        if !(0.0..=1.0).contains(&self.marking_quality) {
            out.push(format!(
                "{path}.marking_quality: must lie in [0, 1] (got {})",
                self.marking_quality
            ));
        }
        if self.curvature.abs() * self.lane_count as f64 * self.lane_width >= 1.0 {
            out.push(format!(
                "{path}.curvature: |curvature| * lane_count * lane_width must be < 1"
            ));
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Pose {
    x: f64,
    y: f64,
    theta: f64,
}

/// Serialized form of a road map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RoadMapSpec {
    pub segments: Vec<RoadSegment>,
    #[serde(default)]
    pub closed: bool,
}

/// Ordered chain of road segments, optionally closed into a ring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RoadMapSpec", into = "RoadMapSpec")]
pub struct RoadMap {
    segments: Vec<RoadSegment>,
    closed: bool,
    starts: Vec<f64>,
    poses: Vec<Pose>,
    total_length: f64,
}

impl TryFrom<RoadMapSpec> for RoadMap {
    type Error = GeometryError;

    fn try_from(spec: RoadMapSpec) -> Result<Self, Self::Error> {
        RoadMap::new(spec.segments, spec.closed)
    }
}

impl From<RoadMap> for RoadMapSpec {
    fn from(map: RoadMap) -> Self {
        RoadMapSpec {
            segments: map.segments,
            closed: map.closed,
        }
    }
}

impl RoadMap {
    /// Builds a map, assigning ids by position when they are all zero.
    pub fn new(mut segments: Vec<RoadSegment>, closed: bool) -> Result<Self, GeometryError> {
        let mut problems = Vec::new();
        if segments.is_empty() {
            problems.push("segments: at least one segment is required".to_string());
        }
        for (i, seg) in segments.iter().enumerate() {
            problems.extend(seg.violations(&format!("segments[{i}]")));
        }
        if !problems.is_empty() {
            return Err(GeometryError::InvalidMap(problems));
        }
        if segments.iter().all(|s| s.id == 0) {
            for (i, seg) in segments.iter_mut().enumerate() {
                seg.id = i as u32;
            }
        }
        let mut starts = Vec::with_capacity(segments.len());
        let mut poses = Vec::with_capacity(segments.len());
        let mut acc = 0.0;
        let mut pose = Pose {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        };
        for seg in &segments {
            starts.push(acc);
            poses.push(pose);
            pose = advance_pose(pose, seg.curvature, seg.length);
            acc += seg.length;
        }
        Ok(Self {
            segments,
            closed,
            starts,
            poses,
            total_length: acc,
        })
    }

    pub fn segments(&self) -> &[RoadSegment] {
        &self.segments
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn total_length(&self) -> f64 {
        self.total_length
    }

    pub fn segment_start(&self, idx: usize) -> f64 {
        self.starts[idx]
    }

    /// Wraps `s` into `[0, L)` on a ring; identity on an open road.
    pub fn wrap_s(&self, s: f64) -> f64 {
        if self.closed {
            s.rem_euclid(self.total_length)
        } else {
            s
        }
    }

    /// Signed arc-length distance from `from` to `to`; shortest way round on a ring.
    pub fn delta_s(&self, from: f64, to: f64) -> f64 {
        let raw = to - from;
        if self.closed {
            let l = self.total_length;
            let r = raw.rem_euclid(l);
            if r > 0.5 * l {
                r - l
            } else {
                r
            }
        } else {
            raw
        }
    }

    /// Segment index owning `s`; boundaries belong to the segment that starts there.
    pub fn segment_index(&self, s: f64) -> Result<usize, GeometryError> {
        if !s.is_finite() {
            return Err(GeometryError::NonFinite("arc length"));
        }
        let s = self.wrap_s(s);
        if !self.closed && !(0.0..self.total_length).contains(&s) {
            return Err(GeometryError::OutOfRange {
                s,
                length: self.total_length,
            });
        }
        Ok(self.starts.partition_point(|&st| st <= s).saturating_sub(1))
    }

    /// Like [`segment_index`](Self::segment_index) but clamps to the first/last segment.
    pub fn segment_index_clamped(&self, s: f64) -> usize {
        match self.segment_index(s) {
            Ok(i) => i,
            Err(_) if s < 0.0 => 0,
            Err(_) => self.segments.len() - 1,
        }
    }

    pub fn segment_at(&self, s: f64) -> &RoadSegment {
        &self.segments[self.segment_index_clamped(s)]
    }

    pub fn curvature_at(&self, s: f64) -> Result<f64, GeometryError> {
        Ok(self.segments[self.segment_index(s)?].curvature)
    }

    pub fn speed_limit_at(&self, s: f64) -> f64 {
        self.segment_at(s).speed_limit
    }

    /// Distance from `s` to where the contiguous secured stretch containing it ends.
    /// Zero when `s` itself is not on a secured segment.
    pub fn secured_remaining(&self, s: f64) -> f64 {
        let n = self.segments.len();
        let mut idx = self.segment_index_clamped(s);
        if !self.segments[idx].secured {
            return 0.0;
        }
        let s = self.wrap_s(s);
        let mut remaining = self.starts[idx] + self.segments[idx].length - s;
        for _ in 0..n {
            idx += 1;
            if idx == n {
                if !self.closed {
                    return remaining;
                }
                idx = 0;
            }
            if !self.segments[idx].secured {
                return remaining;
            }
            remaining += self.segments[idx].length;
        }
        f64::INFINITY
    }

    /// Boundaries ahead of `s` within `lookahead`, as (distance ahead, next segment index).
    pub fn boundaries_ahead(&self, s: f64, lookahead: f64) -> Vec<(f64, usize)> {
        let n = self.segments.len();
        let mut out = Vec::new();
        let mut idx = self.segment_index_clamped(s);
        let s = self.wrap_s(s);
        let mut dist = self.starts[idx] + self.segments[idx].length - s;
        while dist <= lookahead {
            idx += 1;
            if idx == n {
                if !self.closed {
                    break;
                }
                idx = 0;
            }
            out.push((dist, idx));
            dist += self.segments[idx].length;
            if out.len() > 4 * n {
                break;
            }
        }
        out
    }

    /// Reference-line pose at arc length `s`.
    fn reference_pose(&self, s: f64) -> Result<(usize, Pose), GeometryError> {
        let idx = self.segment_index(s)?;
        let local = self.wrap_s(s) - self.starts[idx];
        Ok((
            idx,
            advance_pose(self.poses[idx], self.segments[idx].curvature, local),
        ))
    }

    /// Global pose `(x, y, heading)` of the point at `(s, d)`.
    pub fn frenet_to_global(&self, s: f64, d: f64) -> Result<(f64, f64, f64), GeometryError> {
        let (_, p) = self.reference_pose(s)?;
        let (sin, cos) = p.theta.sin_cos();
        Ok((p.x - d * sin, p.y + d * cos, p.theta))
    }

    /// Projects a global pose onto the road, returning `(s, d, heading_err)`.
    pub fn global_to_frenet(
        &self,
        x: f64,
        y: f64,
        psi: f64,
    ) -> Result<(f64, f64, f64), GeometryError> {
        if !(x.is_finite() && y.is_finite() && psi.is_finite()) {
            return Err(GeometryError::NonFinite("global pose"));
        }
        const EPS: f64 = 1e-9;
        let mut best: Option<(f64, f64, f64)> = None;
        for (i, seg) in self.segments.iter().enumerate() {
            let p0 = self.poses[i];
            let (sin0, cos0) = p0.theta.sin_cos();
            let (dx, dy) = (x - p0.x, y - p0.y);
            let corridor = seg.lane_count as f64 * seg.lane_width + 5.0;
            let mut consider = |u: f64, d: f64| {
                if u < -EPS || u > seg.length + EPS || d.abs() > corridor {
                    return;
                }
                let u = u.clamp(0.0, seg.length);
                if best.is_none_or(|(_, bd, _)| d.abs() < bd.abs()) {
                    best = Some((self.starts[i] + u, d, u));
                }
            };
            let k = seg.curvature;
            if k.abs() < 1e-12 {
                let u = dx * cos0 + dy * sin0;
                let d = -dx * sin0 + dy * cos0;
                consider(u, d);
            } else {
                // Centre of curvature sits at distance 1/k along the left normal.
                let (cx, cy) = (p0.x - sin0 / k, p0.y + cos0 / k);
                let (r0x, r0y) = (p0.x - cx, p0.y - cy);
                let (rx, ry) = (x - cx, y - cy);
                let radius = rx.hypot(ry);
                if radius < 1e-12 {
                    continue;
                }
                let phi = (r0x * ry - r0y * rx).atan2(r0x * rx + r0y * ry);
                let d = 1.0 / k - k.signum() * radius;
                let period = 2.0 * PI / k.abs();
                let base = phi / k;
                let mut m = -((base + EPS) / period).ceil() - 1.0;
                while base + m * period <= seg.length + EPS + period {
                    consider(base + m * period, d);
                    m += 1.0;
                }
            }
        }
        let (s, d, _) = best.ok_or(GeometryError::OutOfCorridor { x, y })?;
        let s = if self.closed && s >= self.total_length {
            s - self.total_length
        } else {
            s
        };
        let s = if !self.closed && s >= self.total_length {
            // Exactly at the far end of an open road: stay inside the half-open range.
            self.total_length - 1e-12
        } else {
            s
        };
        let (_, p) = self.reference_pose(s)?;
        Ok((s, d, wrap_angle(psi - p.theta)))
    }
}

fn advance_pose(p: Pose, k: f64, u: f64) -> Pose {
    if k.abs() < 1e-12 {
        Pose {
            x: p.x + u * p.theta.cos(),
            y: p.y + u * p.theta.sin(),
            theta: p.theta,
        }
    } else {
        let theta = p.theta + k * u;
        Pose {
            x: p.x + (theta.sin() - p.theta.sin()) / k,
            y: p.y - (theta.cos() - p.theta.cos()) / k,
            theta,
        }
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let w = (a + PI).rem_euclid(2.0 * PI) - PI;
    if w <= -PI {
        w + 2.0 * PI
    } else {
        w
    }
}

/// Pose and motion of a vehicle in road coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct VehicleState {
    pub s: f64,
    pub d: f64,
    pub heading_err: f64,
    pub v: f64,
    /// Realized longitudinal acceleration.
    pub a: f64,
    pub lane: usize,
    /// Front-wheel angle.
    pub steer: f64,
}

impl VehicleState {
    pub fn at(s: f64, lane: usize, v: f64, map: &RoadMap) -> Self {
        let seg = map.segment_at(s);
        Self {
            s,
            d: seg.lane_center(lane),
            v,
            lane,
            ..Default::default()
        }
    }

    fn is_finite(&self) -> bool {
        [self.s, self.d, self.heading_err, self.v, self.a, self.steer]
            .iter()
            .all(|x| x.is_finite())
    }
}

/// Motion vector: front-wheel angle and longitudinal acceleration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct Command {
    pub steer: f64,
    pub accel: f64,
    /// Relaxes the jerk bound to the emergency limit.
    #[serde(default)]
    pub emergency: bool,
}

impl Command {
    pub fn new(steer: f64, accel: f64) -> Self {
        Self {
            steer,
            accel,
            emergency: false,
        }
    }
}

/// One fixed-step kinematic bicycle update in road coordinates.
///
/// Acceleration follows the command under the jerk bound, steering under the
/// rate bound, and both saturate at the actuator limits. Travel over the step
/// uses the exact constant-acceleration distance, truncated at standstill.
pub fn step_vehicle(
    state: &VehicleState,
    cmd: &Command,
    dt: f64,
    map: &RoadMap,
    params: &VehicleParams,
) -> Result<VehicleState, GeometryError> {
    if !state.is_finite() {
        return Err(GeometryError::NonFinite("vehicle state"));
    }
    if !(cmd.steer.is_finite() && cmd.accel.is_finite()) {
        return Err(GeometryError::NonFinite("command"));
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(GeometryError::NonFinite("time step"));
    }

    let jerk = if cmd.emergency {
        params.jerk_max_emergency
    } else {
        params.jerk_max
    };
    let a_target = cmd.accel.clamp(params.accel_min, params.accel_max);
    let a = state.a + (a_target - state.a).clamp(-jerk * dt, jerk * dt);

    let steer_target = cmd.steer.clamp(-params.steer_max, params.steer_max);
    let rate = params.steer_rate_max * dt;
    let steer = (state.steer + (steer_target - state.steer).clamp(-rate, rate))
        .clamp(-params.steer_max, params.steer_max);

    let v0 = state.v.max(0.0);
    let (travel, v1, a_realized) = if v0 + a * dt >= 0.0 {
        (v0 * dt + 0.5 * a * dt * dt, v0 + a * dt, a)
    } else if a < 0.0 {
        (v0 * v0 / (-2.0 * a), 0.0, if v0 > 0.0 { a } else { 0.0 })
    } else {
        (0.0, 0.0, 0.0)
    };

    let idx = map.segment_index_clamped(state.s);
    let k = map.segments()[idx].curvature;
    let path_k = steer.tan() / params.wheelbase;
    let scale = |d: f64| (1.0 - k * d).max(1e-6);

    // Midpoint rule on the path-length parametrisation.
    let dpsi_ds = |psi: f64, d: f64| path_k - k * psi.cos() / scale(d);
    let psi_mid = state.heading_err + 0.5 * travel * dpsi_ds(state.heading_err, state.d);
    let d_mid = state.d + 0.5 * travel * state.heading_err.sin();
    let heading_err = state.heading_err + travel * dpsi_ds(psi_mid, d_mid);
    let d = state.d + travel * psi_mid.sin();
    let s = state.s + travel * psi_mid.cos() / scale(d_mid);

    let s = map.wrap_s(s);
    let seg = map.segment_at(s);
    let next = VehicleState {
        s,
        d,
        heading_err: wrap_angle(heading_err),
        v: v1.max(0.0),
        a: if v1 <= 0.0 && a_realized < 0.0 { 0.0 } else { a_realized },
        lane: seg.lane_of(d),
        steer,
    };
    if !next.is_finite() {
        return Err(GeometryError::NonFinite("integrated state"));
    }
    Ok(next)
}
