//! Planar primitives shared by the world, planner and robot modules.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::ops::{Add, Mul, Sub};

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Vec2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn dist(self, other: Vec2) -> f64 {
        (self - other).norm()
    }

    /// Rotate counter-clockwise by `angle` radians.
    pub fn rotate(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn lerp(self, other: Vec2, t: f64) -> Vec2 {
        Vec2::new(
            self.x + (other.x - self.x) * t,
            self.y + (other.y - self.y) * t,
        )
    }
}

impl From<[f64; 2]> for Vec2 {
    fn from(v: [f64; 2]) -> Self {
        Vec2::new(v[0], v[1])
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, rhs: Vec2) -> Vec2 {
        Vec2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, rhs: f64) -> Vec2 {
        Vec2::new(self.x * rhs, self.y * rhs)
    }
}

/// Position and heading. `psi` is kept in (-pi, pi] by the robot models.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 3]", into = "[f64; 3]")]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub psi: f64,
}

impl Pose2 {
    pub const fn new(x: f64, y: f64, psi: f64) -> Self {
        Self { x, y, psi }
    }

    pub fn position(&self) -> Vec2 {
        Vec2::new(self.x, self.y)
    }

    /// Express a world point in this pose's frame (x forward, y left).
    pub fn to_local(&self, p: Vec2) -> Vec2 {
        (p - self.position()).rotate(-self.psi)
    }

    pub fn to_world(&self, p: Vec2) -> Vec2 {
        p.rotate(self.psi) + self.position()
    }
}

impl From<[f64; 3]> for Pose2 {
    fn from(v: [f64; 3]) -> Self {
        Pose2::new(v[0], v[1], v[2])
    }
}

impl From<Pose2> for [f64; 3] {
    fn from(p: Pose2) -> Self {
        [p.x, p.y, p.psi]
    }
}

/// Wrap an angle into (-pi, pi].
pub fn wrap_angle(a: f64) -> f64 {
    let mut w = a.rem_euclid(2.0 * PI);
    if w > PI {
        w -= 2.0 * PI;
    }
    // rem_euclid can land exactly on -pi after the subtraction for inputs just above pi
    if w <= -PI {
        w += 2.0 * PI;
    }
    w
}

/// Closed axis-aligned rectangle, stored as min/max corners.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct Rect {
    pub min: Vec2,
    pub max: Vec2,
}

impl Rect {
    pub fn new(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            min: Vec2::new(x0, y0),
            max: Vec2::new(x1, y1),
        }
    }

    pub fn is_ordered(&self) -> bool {
        self.min.x <= self.max.x && self.min.y <= self.max.y
    }

    pub fn width(&self) -> f64 {
        self.max.x - self.min.x
    }

    pub fn height(&self) -> f64 {
        self.max.y - self.min.y
    }

    pub fn center(&self) -> Vec2 {
        self.min.lerp(self.max, 0.5)
    }

    pub fn contains(&self, p: Vec2) -> bool {
        p.x >= self.min.x && p.x <= self.max.x && p.y >= self.min.y && p.y <= self.max.y
    }

    pub fn closest_point(&self, p: Vec2) -> Vec2 {
        Vec2::new(
            p.x.clamp(self.min.x, self.max.x),
            p.y.clamp(self.min.y, self.max.y),
        )
    }

    /// Euclidean distance from `p` to the rectangle (zero inside).
    pub fn distance(&self, p: Vec2) -> f64 {
        p.dist(self.closest_point(p))
    }

    pub fn intersects(&self, other: &Rect) -> bool {
        self.min.x <= other.max.x
            && other.min.x <= self.max.x
            && self.min.y <= other.max.y
            && other.min.y <= self.max.y
    }

    pub fn translate(&self, d: Vec2) -> Rect {
        Rect {
            min: self.min + d,
            max: self.max + d,
        }
    }

    pub fn corners(&self) -> [Vec2; 4] {
        [
            self.min,
            Vec2::new(self.max.x, self.min.y),
            self.max,
            Vec2::new(self.min.x, self.max.y),
        ]
    }

    /// Entry distance of the ray `origin + t * dir` (t >= 0) into the rectangle.
    /// Returns `Some(0.0)` when the origin is inside.
    pub fn ray_entry(&self, origin: Vec2, dir: Vec2) -> Option<f64> {
        let mut t_min = 0.0_f64;
        let mut t_max = f64::INFINITY;
        for (o, d, lo, hi) in [
            (origin.x, dir.x, self.min.x, self.max.x),
            (origin.y, dir.y, self.min.y, self.max.y),
        ] {
            if d.abs() < 1e-15 {
                if o < lo || o > hi {
                    return None;
                }
            } else {
                let inv = 1.0 / d;
                let (mut t0, mut t1) = ((lo - o) * inv, (hi - o) * inv);
                if t0 > t1 {
                    std::mem::swap(&mut t0, &mut t1);
                }
                t_min = t_min.max(t0);
                t_max = t_max.min(t1);
                if t_min > t_max {
                    return None;
                }
            }
        }
        Some(t_min)
    }

    /// Exit distance of a ray that starts inside the rectangle.
    pub fn ray_exit(&self, origin: Vec2, dir: Vec2) -> f64 {
        let mut t = f64::INFINITY;
        if dir.x > 0.0 {
            t = t.min((self.max.x - origin.x) / dir.x);
        } else if dir.x < 0.0 {
            t = t.min((self.min.x - origin.x) / dir.x);
        }
        if dir.y > 0.0 {
            t = t.min((self.max.y - origin.y) / dir.y);
        } else if dir.y < 0.0 {
            t = t.min((self.min.y - origin.y) / dir.y);
        }
        t.max(0.0)
    }
}

impl From<[f64; 4]> for Rect {
    fn from(v: [f64; 4]) -> Self {
        Rect::new(v[0], v[1], v[2], v[3])
    }
}

impl From<Rect> for [f64; 4] {
    fn from(r: Rect) -> Self {
        [r.min.x, r.min.y, r.max.x, r.max.y]
    }
}

/// Separating-axis test between an oriented square (center, half side, angle)
/// and an axis-aligned rectangle. Touching boundaries count as intersecting.
pub fn oriented_square_intersects_rect(center: Vec2, half: f64, angle: f64, rect: &Rect) -> bool {
    let (s, c) = angle.sin_cos();
    let ax = Vec2::new(c, s);
    let ay = Vec2::new(-s, c);
    let corners = [
        center + ax * half + ay * half,
        center + ax * half - ay * half,
        center - ax * half + ay * half,
        center - ax * half - ay * half,
    ];
    // world axes
    let (mut lo_x, mut hi_x, mut lo_y, mut hi_y) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for p in &corners {
        lo_x = lo_x.min(p.x);
        hi_x = hi_x.max(p.x);
        lo_y = lo_y.min(p.y);
        hi_y = hi_y.max(p.y);
    }
    if hi_x < rect.min.x || lo_x > rect.max.x || hi_y < rect.min.y || lo_y > rect.max.y {
        return false;
    }
    // square axes
    let rc = rect.corners();
    for axis in [ax, ay] {
        let mid = center.dot(axis);
        let (mut lo, mut hi) = (f64::MAX, f64::MIN);
        for p in &rc {
            let v = p.dot(axis);
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi < mid - half || lo > mid + half {
            return false;
        }
    }
    true
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_angle_range() {
        for k in -20..=20 {
            let a = k as f64 * 0.7;
            let w = wrap_angle(a);
            assert!(w > -PI && w <= PI, "{a} -> {w}");
            assert!(((a - w) / (2.0 * PI)).fract().abs() < 1e-9 || ((a - w) / (2.0 * PI)).fract().abs() > 1.0 - 1e-9);
        }
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
    }

    #[test]
    fn local_world_roundtrip() {
        let pose = Pose2::new(1.0, -2.0, 0.8);
        let p = Vec2::new(0.3, 4.0);
        let back = pose.to_world(pose.to_local(p));
        assert!(back.dist(p) < 1e-12);
    }

    #[test]
    fn ray_entry_hits_front_face() {
        let r = Rect::new(1.0, -1.0, 2.0, 1.0);
        let t = r.ray_entry(Vec2::ZERO, Vec2::new(1.0, 0.0)).unwrap();
        assert!((t - 1.0).abs() < 1e-12);
        assert!(r.ray_entry(Vec2::ZERO, Vec2::new(-1.0, 0.0)).is_none());
    }

    #[test]
    fn sat_square_rect() {
        let r = Rect::new(0.0, 0.0, 1.0, 1.0);
        assert!(oriented_square_intersects_rect(Vec2::new(1.1, 0.5), 0.2, 0.0, &r));
        assert!(!oriented_square_intersects_rect(Vec2::new(1.3, 0.5), 0.2, 0.0, &r));
        // a diamond whose tip just misses the corner
        let c = Vec2::new(1.0 + 0.2 * 2f64.sqrt() + 0.2, 1.2);
        assert!(!oriented_square_intersects_rect(c, 0.2, PI / 4.0, &r));
    }
}
