//! SE(2) poses and oriented-box overlap in the BEV plane.

use serde::{Deserialize, Serialize};

/// Normalize an angle into (-pi, pi]; ties at -pi map to pi.
pub fn normalize_angle(a: f64) -> f64 {
    let two_pi = 2.0 * std::f64::consts::PI;
    let mut x = a % two_pi;
    if x <= -std::f64::consts::PI {
        x += two_pi;
    } else if x > std::f64::consts::PI {
        x -= two_pi;
    }
    x
}

/// Rigid pose in the plane.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
}

impl Pose2 {
    pub fn new(x: f64, y: f64, yaw: f64) -> Self {
        Self {
            x,
            y,
            yaw: normalize_angle(yaw),
        }
    }

    pub fn identity() -> Self {
        Self { x: 0.0, y: 0.0, yaw: 0.0 }
    }

    /// Apply `b` then `a` (a is the outer frame).
    pub fn compose(a: Pose2, b: Pose2) -> Pose2 {
        let (s, c) = a.yaw.sin_cos();
        Pose2 {
            x: a.x + c * b.x - s * b.y,
            y: a.y + s * b.x + c * b.y,
            yaw: normalize_angle(a.yaw + b.yaw),
        }
    }

    pub fn inverse(self) -> Pose2 {
        let (s, c) = self.yaw.sin_cos();
        Pose2 {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            yaw: normalize_angle(-self.yaw),
        }
    }

    /// Image of a point under this pose, treated as a rigid motion.
    pub fn transform_point(self, p: (f64, f64)) -> (f64, f64) {
        let (s, c) = self.yaw.sin_cos();
        (self.x + c * p.0 - s * p.1, self.y + s * p.0 + c * p.1)
    }

    /// Express a world point in this pose's local frame.
    pub fn inverse_transform_point(self, p: (f64, f64)) -> (f64, f64) {
        self.inverse().transform_point(p)
    }
}

/// Axis-oriented rectangle footprint with heading.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox2 {
    pub cx: f64,
    pub cy: f64,
    pub length: f64,
    pub width: f64,
    pub yaw: f64,
}

impl OrientedBox2 {
    pub fn new(cx: f64, cy: f64, length: f64, width: f64, yaw: f64) -> Self {
        assert!(length > 0.0 && width > 0.0, "box dimensions must be positive");
        Self { cx, cy, length, width, yaw }
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    pub fn corners(&self) -> [(f64, f64); 4] {
        let (s, c) = self.yaw.sin_cos();
        let hl = self.length / 2.0;
        let hw = self.width / 2.0;
        let local = [(hl, hw), (hl, -hw), (-hl, -hw), (-hl, hw)];
        local.map(|(lx, ly)| (self.cx + c * lx - s * ly, self.cy + s * lx + c * ly))
    }
}

/// Separating-axis overlap test for two oriented rectangles. Touching
/// boundaries count as overlap.
pub fn boxes_overlap(a: &OrientedBox2, b: &OrientedBox2) -> bool {
    let ca = a.corners();
    let cb = b.corners();
    // Candidate axes: the two edge normals of each rectangle.
    let axes = [
        (a.yaw.cos(), a.yaw.sin()),
        (-a.yaw.sin(), a.yaw.cos()),
        (b.yaw.cos(), b.yaw.sin()),
        (-b.yaw.sin(), b.yaw.cos()),
    ];
    for (ax, ay) in axes {
        let proj = |pts: &[(f64, f64); 4]| {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for &(px, py) in pts {
                let d = px * ax + py * ay;
                lo = lo.min(d);
                hi = hi.max(d);
            }
            (lo, hi)
        };
        let (alo, ahi) = proj(&ca);
        let (blo, bhi) = proj(&cb);
        if ahi < blo || bhi < alo {
            return false;
        }
    }
    true
}
