//! Planar rigid transforms.

use std::f64::consts::PI;

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let mut a = a % (2.0 * PI);
    if a <= -PI {
        a += 2.0 * PI;
    } else if a > PI {
        a -= 2.0 * PI;
    }
    a
}

/// A pose in SE(2): translation `(x, y)` in meters and heading `theta` in
/// radians, normalized to `(-pi, pi]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PoseSE2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl PoseSE2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub fn origin() -> Self {
        Self::new(0.0, 0.0, 0.0)
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.theta.is_finite()
    }

    /// Map a point from the local (sensor) frame into the world frame.
    pub fn transform(&self, sx: f64, sy: f64) -> (f64, f64) {
        let (sin, cos) = self.theta.sin_cos();
        (
            cos * sx - sin * sy + self.x,
            sin * sx + cos * sy + self.y,
        )
    }

    /// Apply an additive update `(dx, dy, dtheta)` and re-normalize the angle.
    pub fn plus(&self, dx: f64, dy: f64, dtheta: f64) -> Self {
        Self::new(self.x + dx, self.y + dy, self.theta + dtheta)
    }

    /// Componentwise difference `self - other` with the angle wrapped.
    pub fn delta_to(&self, other: &PoseSE2) -> (f64, f64, f64) {
        (
            self.x - other.x,
            self.y - other.y,
            wrap_angle(self.theta - other.theta),
        )
    }
}
