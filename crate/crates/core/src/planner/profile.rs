use serde::{Deserialize, Serialize};

use super::quintic::Quintic;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProfileNode {
    pub t: f64,
    /// Distance travelled since the start of the profile.
    pub s: f64,
    pub v: f64,
}

/// Piecewise-linear speed over time with trapezoidal distance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpeedProfile {
    pub nodes: Vec<ProfileNode>,
    /// Acceleration held by the vehicle when the profile starts.
    pub a0: f64,
}

impl SpeedProfile {
    /// Builds a profile from speeds at a uniform spacing `dt`, starting at t = 0.
    pub fn from_speeds(speeds: &[f64], dt: f64, a0: f64) -> Self {
        let mut nodes = Vec::with_capacity(speeds.len());
        let mut s = 0.0;
        for (i, &v) in speeds.iter().enumerate() {
            if i > 0 {
                s += 0.5 * (speeds[i - 1] + v) * dt;
            }
            nodes.push(ProfileNode {
                t: i as f64 * dt,
                s,
                v,
            });
        }
        Self { nodes, a0 }
    }

    pub fn standstill() -> Self {
        Self::from_speeds(&[0.0], 0.1, 0.0)
    }

    pub fn duration(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.t)
    }

    pub fn end_speed(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.v)
    }

    pub fn length(&self) -> f64 {
        self.nodes.last().map_or(0.0, |n| n.s)
    }

    /// Distance, speed and acceleration at `t`; the last speed is held afterwards.
    pub fn eval(&self, t: f64) -> (f64, f64, f64) {
        let n = &self.nodes;
        if n.len() < 2 || t <= 0.0 {
            let first = n.first().copied().unwrap_or(ProfileNode { t: 0.0, s: 0.0, v: 0.0 });
            let a = if n.len() >= 2 { (n[1].v - n[0].v) / (n[1].t - n[0].t) } else { 0.0 };
            return (first.s + first.v * t.min(0.0), first.v, a);
        }
        let last = n[n.len() - 1];
        if t >= last.t {
            return (last.s + last.v * (t - last.t), last.v, 0.0);
        }
        let i = n.partition_point(|x| x.t <= t) - 1;
        let (p, q) = (n[i], n[i + 1]);
        let a = (q.v - p.v) / (q.t - p.t);
        let u = t - p.t;
        (p.s + p.v * u + 0.5 * a * u * u, p.v + a * u, a)
    }

    /// Interval accelerations, one per pair of consecutive nodes.
    pub fn accels(&self) -> Vec<f64> {
        self.nodes
            .windows(2)
            .map(|w| (w[1].v - w[0].v) / (w[1].t - w[0].t))
            .collect()
    }

    /// Samples a longitudinal quintic `s(t)` into nodes at spacing `dt`.
    pub fn from_quintic(q: &Quintic, horizon: f64, dt: f64, a0: f64) -> Self {
        let n = (horizon / dt).round() as usize;
        let nodes = (0..=n)
            .map(|k| {
                let t = k as f64 * dt;
                let [s, v, _, _] = q.eval(t);
                ProfileNode { t, s, v }
            })
            .collect();
        Self { nodes, a0 }
    }
}

/// Jerk-limited speed tracking of a position-dependent target.
///
/// Each interval the desired acceleration is `(target(s + v*tau) - v) / tau`,
/// clamped to `[-decel, accel_max]`, and moves at most `jerk * dt` from the
/// previous interval's acceleration.
#[allow(clippy::too_many_arguments)]
pub fn track_speed_target(
    v0: f64,
    a0: f64,
    horizon: f64,
    dt: f64,
    tau: f64,
    decel: f64,
    accel_max: f64,
    jerk: f64,
    target: impl Fn(f64) -> f64,
) -> SpeedProfile {
    let n = (horizon / dt).round() as usize;
    let mut speeds = Vec::with_capacity(n + 1);
    let (mut v, mut a, mut s) = (v0.max(0.0), a0, 0.0);
    speeds.push(v);
    for _ in 0..n {
        let want = ((target(s + v * tau) - v) / tau).clamp(-decel, accel_max);
        a += (want - a).clamp(-jerk * dt, jerk * dt);
        let mut next = v + a * dt;
        if next < 0.0 {
            next = 0.0;
            a = 0.0;
        }
        s += 0.5 * (v + next) * dt;
        v = next;
        speeds.push(v);
    }
    SpeedProfile::from_speeds(&speeds, dt, a0)
}

/// Jerk-limited stop at `stop_distance` ahead using the required-deceleration law.
///
/// Runs until standstill or `max_horizon`, whichever comes first, and never
/// shorter than `min_horizon`.
#[allow(clippy::too_many_arguments)]
pub fn stop_profile(
    v0: f64,
    a0: f64,
    stop_distance: f64,
    dt: f64,
    decel_max: f64,
    jerk: f64,
    min_horizon: f64,
    max_horizon: f64,
) -> SpeedProfile {
    let n_max = (max_horizon / dt).round() as usize;
    let n_min = (min_horizon / dt).round() as usize;
    let mut speeds = vec![v0.max(0.0)];
    let (mut v, mut a, mut s) = (v0.max(0.0), a0, 0.0);
    for k in 0..n_max {
        if v <= 0.0 && k >= n_min {
            break;
        }
        let remaining = (stop_distance - s).max(1e-3);
        let want = if v > 0.0 {
            let plain = -(v * v) / (2.0 * remaining);
            let ramp = ((a - plain) / jerk).max(0.0);
            let shortened = (remaining - 0.5 * v * ramp).max(1e-3);
            (-(v * v) / (2.0 * shortened)).clamp(-decel_max, 0.0)
        } else {
            0.0
        };
        a += (want - a).clamp(-jerk * dt, jerk * dt);
        let mut next = v + a * dt;
        if next <= 1e-9 {
            next = 0.0;
            a = 0.0;
        }
        s += 0.5 * (v + next) * dt;
        v = next;
        speeds.push(v);
    }
    SpeedProfile::from_speeds(&speeds, dt, a0)
}

/// Constant deceleration `decel` from `v0` to standstill, ignoring the current acceleration.
pub fn constant_decel_profile(v0: f64, a0: f64, decel: f64, dt: f64) -> SpeedProfile {
    if v0 <= 0.0 {
        return SpeedProfile::standstill();
    }
    let t_stop = v0 / decel;
    let n = (t_stop / dt).ceil() as usize;
    let mut nodes: Vec<ProfileNode> = (0..=n)
        .map(|k| {
            let t = (k as f64 * dt).min(t_stop);
            ProfileNode {
                t,
                s: v0 * t - 0.5 * decel * t * t,
                v: if t >= t_stop { 0.0 } else { v0 - decel * t },
            }
        })
        .collect();
    nodes.dedup_by(|b, a| (b.t - a.t).abs() < 1e-12);
    SpeedProfile { nodes, a0 }
}
