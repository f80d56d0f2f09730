//! Planar points and affine transforms.

use serde::{Deserialize, Serialize};

use crate::error::{param_err, Result};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn distance(self, other: Point2) -> f64 {
        libm::hypot(self.x - other.x, self.y - other.y)
    }
}

/// Anything that maps image-a coordinates into image-b coordinates.
pub trait PointMap {
    fn map_point(&self, p: Point2) -> Point2;
}

/// `[[a, b, tx], [c, d, ty]]` acting as `p' = A p + t` on pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AffineTransform {
    pub m: [[f64; 3]; 2],
}

impl Default for AffineTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl AffineTransform {
    pub const fn identity() -> Self {
        Self { m: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]] }
    }

    pub const fn translation(dx: f64, dy: f64) -> Self {
        Self { m: [[1.0, 0.0, dx], [0.0, 1.0, dy]] }
    }

    /// Isotropic scaling about the origin.
    pub const fn scale(s: f64) -> Self {
        Self { m: [[s, 0.0, 0.0], [0.0, s, 0.0]] }
    }

    /// Isotropic scaling about `(cx, cy)`.
    pub fn scale_about(s: f64, cx: f64, cy: f64) -> Self {
        Self { m: [[s, 0.0, cx - s * cx], [0.0, s, cy - s * cy]] }
    }

    /// Rotation by `degrees` (counter-clockwise in a y-up frame, clockwise
    /// on screen) about `(cx, cy)`.
    pub fn rotation_about(degrees: f64, cx: f64, cy: f64) -> Self {
        let (s, c) = libm::sincos(degrees.to_radians());
        Self { m: [[c, -s, cx - c * cx + s * cy], [s, c, cy - s * cx - c * cy]] }
    }

    pub fn det(&self) -> f64 {
        self.m[0][0] * self.m[1][1] - self.m[0][1] * self.m[1][0]
    }

    /// `other ∘ self`: apply `self` first, then `other`.
    pub fn then(&self, other: &AffineTransform) -> AffineTransform {
        let a = &other.m;
        let b = &self.m;
        let mut m = [[0.0; 3]; 2];
        for (r, row) in m.iter_mut().enumerate() {
            for (c, v) in row.iter_mut().enumerate() {
                *v = a[r][0] * b[0][c] + a[r][1] * b[1][c];
            }
            row[2] += a[r][2];
        }
        AffineTransform { m }
    }

    pub fn inverse(&self) -> Result<AffineTransform> {
        let det = self.det();
        if !det.is_finite() || det.abs() < 1e-12 {
            return Err(param_err!("affine transform is singular (det = {det})"));
        }
        let [[a, b, tx], [c, d, ty]] = self.m;
        let (ia, ib, ic, id) = (d / det, -b / det, -c / det, a / det);
        Ok(AffineTransform { m: [[ia, ib, -(ia * tx + ib * ty)], [ic, id, -(ic * tx + id * ty)]] })
    }

    pub fn apply(&self, p: Point2) -> Point2 {
        let [[a, b, tx], [c, d, ty]] = self.m;
        Point2 { x: a * p.x + b * p.y + tx, y: c * p.x + d * p.y + ty }
    }

    /// Row-major 3x3 homogeneous matrix.
    pub fn to_matrix3(&self) -> [[f64; 3]; 3] {
        [self.m[0], self.m[1], [0.0, 0.0, 1.0]]
    }
}

impl PointMap for AffineTransform {
    fn map_point(&self, p: Point2) -> Point2 {
        self.apply(p)
    }
}

/// Image of `p` under `t`.
pub fn transform_point(p: Point2, t: &AffineTransform) -> Point2 {
    t.apply(p)
}
