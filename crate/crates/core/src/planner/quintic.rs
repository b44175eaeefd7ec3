use serde::{Deserialize, Serialize};

use super::PlanError;

/// Quintic `p(t) = sum c[i] t^i` on `[0, duration]`, extended beyond the end
/// by the constant-acceleration continuation of the end state.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quintic {
    pub coeffs: [f64; 6],
    pub duration: f64,
}

/// Coefficients of the unique quintic matching position, velocity and
/// acceleration at `t = 0` and `t = T`.
pub fn solve_quintic(
    start: (f64, f64, f64),
    end: (f64, f64, f64),
    t_end: f64,
) -> Result<Quintic, PlanError> {
    if !(t_end.is_finite() && t_end > 0.0) {
        return Err(PlanError::NonPositiveHorizon(t_end));
    }
    let (p0, v0, a0) = start;
    let (p1, v1, a1) = end;
    let c0 = p0;
    let c1 = v0;
    let c2 = 0.5 * a0;
    let t = t_end;
    let (t2, t3) = (t * t, t * t * t);
    let h = p1 - (c0 + c1 * t + c2 * t2);
    let dv = v1 - (c1 + 2.0 * c2 * t);
    let da = a1 - 2.0 * c2;
    let c3 = (10.0 * h - 4.0 * dv * t + 0.5 * da * t2) / t3;
    let c4 = (-15.0 * h + 7.0 * dv * t - da * t2) / (t3 * t);
    let c5 = (6.0 * h - 3.0 * dv * t + 0.5 * da * t2) / (t3 * t2);
    Ok(Quintic {
        coeffs: [c0, c1, c2, c3, c4, c5],
        duration: t_end,
    })
}

impl Quintic {
    /// Holds `value` forever.
    pub fn constant(value: f64) -> Self {
        Self {
            coeffs: [value, 0.0, 0.0, 0.0, 0.0, 0.0],
            duration: f64::INFINITY,
        }
    }

    fn raw(&self, t: f64) -> [f64; 4] {
        let c = &self.coeffs;
        let p = c[0] + t * (c[1] + t * (c[2] + t * (c[3] + t * (c[4] + t * c[5]))));
        let v = c[1] + t * (2.0 * c[2] + t * (3.0 * c[3] + t * (4.0 * c[4] + t * 5.0 * c[5])));
        let a = 2.0 * c[2] + t * (6.0 * c[3] + t * (12.0 * c[4] + t * 20.0 * c[5]));
        let j = 6.0 * c[3] + t * (24.0 * c[4] + t * 60.0 * c[5]);
        [p, v, a, j]
    }

    /// Position, velocity, acceleration and jerk at `t` (clamped below at zero).
    pub fn eval(&self, t: f64) -> [f64; 4] {
        let t = t.max(0.0);
        if t <= self.duration {
            return self.raw(t);
        }
        let [p, v, a, _] = self.raw(self.duration);
        let u = t - self.duration;
        [p + v * u + 0.5 * a * u * u, v + a * u, a, 0.0]
    }

    pub fn position(&self, t: f64) -> f64 {
        self.eval(t)[0]
    }

    pub fn is_zero(&self) -> bool {
        self.coeffs.iter().all(|c| *c == 0.0)
    }
}
