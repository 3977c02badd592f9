//! Planar geometry helpers shared by the lane graph, rasterizer and simulator.

use serde::{Deserialize, Serialize};
use std::ops::{Add, Mul, Neg, Sub};

/// A 2-D point or vector in meters.
///
/// Serializes as a bare `[x, y]` pair.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Vec2 {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Vec2 {
    fn from(p: [f64; 2]) -> Self {
        Vec2 { x: p[0], y: p[1] }
    }
}

impl From<Vec2> for [f64; 2] {
    fn from(v: Vec2) -> Self {
        [v.x, v.y]
    }
}

impl Vec2 {
    pub const ZERO: Vec2 = Vec2 { x: 0.0, y: 0.0 };

    pub const fn new(x: f64, y: f64) -> Self {
        Vec2 { x, y }
    }

    /// Unit vector pointing along `heading` (radians, counter-clockwise from +x).
    pub fn from_heading(heading: f64) -> Self {
        Vec2::new(heading.cos(), heading.sin())
    }

    pub fn dot(self, o: Vec2) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Vec2) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Vec2) -> f64 {
        (self - o).norm()
    }

    pub fn normalized(self) -> Vec2 {
        let n = self.norm();
        Vec2::new(self.x / n, self.y / n)
    }

    /// Left-hand perpendicular (rotated +90 degrees).
    pub fn perp(self) -> Vec2 {
        Vec2::new(-self.y, self.x)
    }

    pub fn rotated(self, angle: f64) -> Vec2 {
        let (s, c) = angle.sin_cos();
        Vec2::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }

    pub fn angle(self) -> f64 {
        self.y.atan2(self.x)
    }

    pub fn lerp(self, o: Vec2, t: f64) -> Vec2 {
        self + (o - self) * t
    }
}

impl Add for Vec2 {
    type Output = Vec2;
    fn add(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x + o.x, self.y + o.y)
    }
}

impl Sub for Vec2 {
    type Output = Vec2;
    fn sub(self, o: Vec2) -> Vec2 {
        Vec2::new(self.x - o.x, self.y - o.y)
    }
}

impl Mul<f64> for Vec2 {
    type Output = Vec2;
    fn mul(self, k: f64) -> Vec2 {
        Vec2::new(self.x * k, self.y * k)
    }
}

impl Neg for Vec2 {
    type Output = Vec2;
    fn neg(self) -> Vec2 {
        Vec2::new(-self.x, -self.y)
    }
}

/// Rigid 2-D transform: rotation about the origin followed by translation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Rigid2 {
    pub rotation: f64,
    pub translation: Vec2,
}

impl Rigid2 {
    pub fn apply(&self, p: Vec2) -> Vec2 {
        p.rotated(self.rotation) + self.translation
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let two_pi = std::f64::consts::TAU;
    let mut r = a % two_pi;
    if r <= -std::f64::consts::PI {
        r += two_pi;
    } else if r > std::f64::consts::PI {
        r -= two_pi;
    }
    r
}

/// Signed area via the shoelace formula (positive for counter-clockwise rings).
pub fn signed_area(poly: &[Vec2]) -> f64 {
    let n = poly.len();
    let mut acc = 0.0;
    for i in 0..n {
        acc += poly[i].cross(poly[(i + 1) % n]);
    }
    acc * 0.5
}

/// Even-odd point-in-polygon test with a half-open crossing rule.
pub fn point_in_polygon(p: Vec2, poly: &[Vec2]) -> bool {
    let n = poly.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (a, b) = (poly[i], poly[j]);
        if (a.y > p.y) != (b.y > p.y) {
            let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

/// Distance from `p` to the closed segment `[a, b]`.
pub fn point_segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    let t = if len2 > 0.0 { ((p - a).dot(ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    p.distance(a + ab * t)
}

/// Distance from `p` to the boundary of a closed ring.
pub fn distance_to_ring(p: Vec2, poly: &[Vec2]) -> f64 {
    let n = poly.len();
    (0..n)
        .map(|i| point_segment_distance(p, poly[i], poly[(i + 1) % n]))
        .fold(f64::INFINITY, f64::min)
}

/// Proper intersection test between segments `[a, b]` and `[c, d]`.
///
/// Touching at shared endpoints does not count; collinear overlap does.
pub fn segments_intersect(a: Vec2, b: Vec2, c: Vec2, d: Vec2) -> bool {
    const EPS: f64 = 1e-12;
    let d1 = (b - a).cross(c - a);
    let d2 = (b - a).cross(d - a);
    let d3 = (d - c).cross(a - c);
    let d4 = (d - c).cross(b - c);
    if ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS))
        && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
    {
        return true;
    }
    let on = |p: Vec2, q: Vec2, r: Vec2, cr: f64| {
        cr.abs() <= EPS
            && r.x >= p.x.min(q.x) - EPS
            && r.x <= p.x.max(q.x) + EPS
            && r.y >= p.y.min(q.y) - EPS
            && r.y <= p.y.max(q.y) + EPS
    };
    let shared = |p: Vec2| p.distance(a) <= EPS || p.distance(b) <= EPS;
    (on(a, b, c, d1) && !shared(c))
        || (on(a, b, d, d2) && !shared(d))
        || (on(c, d, a, d3) && !(a.distance(c) <= EPS || a.distance(d) <= EPS))
        || (on(c, d, b, d4) && !(b.distance(c) <= EPS || b.distance(d) <= EPS))
}

/// True when no two non-adjacent edges of the closed ring cross.
pub fn is_simple_ring(poly: &[Vec2]) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        let (a, b) = (poly[i], poly[(i + 1) % n]);
        for j in (i + 1)..n {
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (poly[j], poly[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// Result of projecting a point onto a polyline.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    /// Arc length of the closest point from the polyline start.
    pub offset: f64,
    /// Unsigned distance to the closest point.
    pub distance: f64,
    /// Index of the piece (`points[piece]..points[piece + 1]`) holding the closest point.
    pub piece: usize,
    /// Unit direction of that piece.
    pub direction: Vec2,
}

/// Projects `p` onto the polyline; ties keep the earliest piece.
pub fn project_onto_polyline(p: Vec2, points: &[Vec2]) -> Projection {
    let mut best = Projection {
        offset: 0.0,
        distance: f64::INFINITY,
        piece: 0,
        direction: Vec2::new(1.0, 0.0),
    };
    let mut walked = 0.0;
    for (i, w) in points.windows(2).enumerate() {
        let ab = w[1] - w[0];
        let len = ab.norm();
        let t = ((p - w[0]).dot(ab) / (len * len)).clamp(0.0, 1.0);
        let q = w[0] + ab * t;
        let dist = p.distance(q);
        if dist < best.distance {
            best = Projection { offset: walked + t * len, distance: dist, piece: i, direction: ab * (1.0 / len) };
        }
        walked += len;
    }
    best
}

pub fn polyline_length(points: &[Vec2]) -> f64 {
    points.windows(2).map(|w| w[0].distance(w[1])).sum()
}

/// Point and unit tangent at arc length `s` (clamped to the polyline ends).
pub fn point_at_arc_length(points: &[Vec2], s: f64) -> (Vec2, Vec2) {
    let mut remaining = s.max(0.0);
    let last = points.len() - 2;
    for (i, w) in points.windows(2).enumerate() {
        let seg = w[1] - w[0];
        let len = seg.norm();
        if remaining <= len || i == last {
            let t = (remaining / len).min(1.0);
            return (w[0] + seg * t, seg * (1.0 / len));
        }
        remaining -= len;
    }
    unreachable!("polyline has at least two points")
}
