//! Small 2D geometry toolkit shared by the map, perception and planning
//! layers: points, angle wrapping, polygons and oriented rectangles.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// A 2D point / vector in meters.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Point2 { x, y }
    }

    pub fn dist(self, other: Point2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dot(self, other: Point2) -> f64 {
        self.x * other.x + self.y * other.y
    }

    /// 2D cross product (z component).
    pub fn cross(self, other: Point2) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn is_finite(self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl std::ops::Add for Point2 {
    type Output = Point2;
    fn add(self, rhs: Point2) -> Point2 {
        Point2::new(self.x + rhs.x, self.y + rhs.y)
    }
}

impl std::ops::Sub for Point2 {
    type Output = Point2;
    fn sub(self, rhs: Point2) -> Point2 {
        Point2::new(self.x - rhs.x, self.y - rhs.y)
    }
}

impl std::ops::Mul<f64> for Point2 {
    type Output = Point2;
    fn mul(self, rhs: f64) -> Point2 {
        Point2::new(self.x * rhs, self.y * rhs)
    }
}

/// Wrap an angle to `(-pi, pi]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Wrap an orientation (line direction, mod pi) to `(-pi/2, pi/2]`.
pub fn wrap_orientation(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    if r > PI / 2.0 {
        r - PI
    } else {
        r
    }
}

/// Minimum distance from `p` to the segment `[a, b]`.
pub fn point_segment_distance(p: Point2, a: Point2, b: Point2) -> f64 {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return p.dist(a);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    p.dist(a + ab * t)
}

/// Closest point on segment `[a, b]` to `p`, returned with its parameter
/// `t` in `[0, 1]`.
pub fn project_on_segment(p: Point2, a: Point2, b: Point2) -> (Point2, f64) {
    let ab = b - a;
    let len2 = ab.dot(ab);
    if len2 == 0.0 {
        return (a, 0.0);
    }
    let t = ((p - a).dot(ab) / len2).clamp(0.0, 1.0);
    (a + ab * t, t)
}

/// True if the open segments `[a1, a2]` and `[b1, b2]` properly intersect
/// (shared endpoints do not count).
pub fn segments_properly_intersect(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> bool {
    let d1 = (a2 - a1).cross(b1 - a1);
    let d2 = (a2 - a1).cross(b2 - a1);
    let d3 = (b2 - b1).cross(a1 - b1);
    let d4 = (b2 - b1).cross(a2 - b1);
    ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
}

/// Simple polygon, vertices in order (either winding).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    vertices: Vec<Point2>,
}

impl Polygon {
    /// Builds a polygon; requires at least 3 vertices, finite coordinates
    /// and no self-intersection.
    pub fn new(vertices: Vec<Point2>) -> Result<Self, PolygonError> {
        if vertices.len() < 3 {
            return Err(PolygonError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|v| !v.is_finite()) {
            return Err(PolygonError::NonFinite);
        }
        let poly = Polygon { vertices };
        if !poly.is_simple() {
            return Err(PolygonError::SelfIntersecting);
        }
        if poly.area().abs() < 1e-12 {
            return Err(PolygonError::Degenerate);
        }
        Ok(poly)
    }

    /// Axis-aligned rectangle helper.
    pub fn rect(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Polygon {
            vertices: vec![
                Point2::new(x_min, y_min),
                Point2::new(x_max, y_min),
                Point2::new(x_max, y_max),
                Point2::new(x_min, y_max),
            ],
        }
    }

    pub fn vertices(&self) -> &[Point2] {
        &self.vertices
    }

    fn is_simple(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a1, a2) = (self.vertices[i], self.vertices[(i + 1) % n]);
            for j in i + 1..n {
                // adjacent edges share an endpoint, skip them
                if (j + 1) % n == i || (i + 1) % n == j {
                    continue;
                }
                let (b1, b2) = (self.vertices[j], self.vertices[(j + 1) % n]);
                if segments_properly_intersect(a1, a2, b1, b2) {
                    return false;
                }
            }
        }
        true
    }

    /// Signed area (shoelace).
    pub fn area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            acc += self.vertices[i].cross(self.vertices[(i + 1) % n]);
        }
        acc / 2.0
    }

    /// Point-in-polygon test; points on the boundary count as inside.
    pub fn contains(&self, p: Point2) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            if point_segment_distance(p, self.vertices[i], self.vertices[(i + 1) % n]) <= 1e-9 {
                return true;
            }
        }
        // crossing number
        let mut inside = false;
        let mut j = n - 1;
        for i in 0..n {
            let (vi, vj) = (self.vertices[i], self.vertices[j]);
            if (vi.y > p.y) != (vj.y > p.y) {
                let x_cross = vj.x + (p.y - vj.y) / (vi.y - vj.y) * (vi.x - vj.x);
                if p.x < x_cross {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    pub fn bbox(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for v in &self.vertices {
            lo.x = lo.x.min(v.x);
            lo.y = lo.y.min(v.y);
            hi.x = hi.x.max(v.x);
            hi.y = hi.y.max(v.y);
        }
        (lo, hi)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum PolygonError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has non-finite vertices")]
    NonFinite,
    #[error("polygon is degenerate (zero area)")]
    Degenerate,
    #[error("polygon is self-intersecting")]
    SelfIntersecting,
}

/// Oriented rectangle: center, heading of the long axis, and dimensions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OrientedBox {
    pub center: Point2,
    pub heading: f64,
    pub length: f64,
    pub width: f64,
}

impl OrientedBox {
    pub fn new(center: Point2, heading: f64, length: f64, width: f64) -> Self {
        OrientedBox {
            center,
            heading,
            length,
            width,
        }
    }

    /// Corners in counterclockwise order starting at front-left.
    pub fn corners(&self) -> [Point2; 4] {
        let (s, c) = self.heading.sin_cos();
        let fwd = Point2::new(c, s) * (self.length / 2.0);
        let left = Point2::new(-s, c) * (self.width / 2.0);
        [
            self.center + fwd + left,
            self.center + (fwd * -1.0) + left,
            self.center + (fwd * -1.0) + (left * -1.0),
            self.center + fwd + (left * -1.0),
        ]
    }

    pub fn area(&self) -> f64 {
        self.length * self.width
    }

    /// Box grown by `margin` on every side.
    pub fn inflate(&self, margin: f64) -> OrientedBox {
        OrientedBox {
            center: self.center,
            heading: self.heading,
            length: self.length + 2.0 * margin,
            width: self.width + 2.0 * margin,
        }
    }

    pub fn contains(&self, p: Point2) -> bool {
        let (s, c) = self.heading.sin_cos();
        let d = p - self.center;
        let u = d.x * c + d.y * s;
        let v = -d.x * s + d.y * c;
        u.abs() <= self.length / 2.0 && v.abs() <= self.width / 2.0
    }

    fn bbox(&self) -> (Point2, Point2) {
        let mut lo = Point2::new(f64::INFINITY, f64::INFINITY);
        let mut hi = Point2::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
        for cnr in self.corners() {
            lo.x = lo.x.min(cnr.x);
            lo.y = lo.y.min(cnr.y);
            hi.x = hi.x.max(cnr.x);
            hi.y = hi.y.max(cnr.y);
        }
        (lo, hi)
    }

    /// Separating-axis intersection test. Touching boundaries count as
    /// intersecting.
    pub fn intersects(&self, other: &OrientedBox) -> bool {
        let (alo, ahi) = self.bbox();
        let (blo, bhi) = other.bbox();
        if alo.x > bhi.x || blo.x > ahi.x || alo.y > bhi.y || blo.y > ahi.y {
            return false;
        }
        let ca = self.corners();
        let cb = other.corners();
        for heading in [self.heading, other.heading] {
            let (s, c) = heading.sin_cos();
            for axis in [Point2::new(c, s), Point2::new(-s, c)] {
                let (mut a_min, mut a_max) = (f64::INFINITY, f64::NEG_INFINITY);
                let (mut b_min, mut b_max) = (f64::INFINITY, f64::NEG_INFINITY);
                for p in ca {
                    let d = p.dot(axis);
                    a_min = a_min.min(d);
                    a_max = a_max.max(d);
                }
                for p in cb {
                    let d = p.dot(axis);
                    b_min = b_min.min(d);
                    b_max = b_max.max(d);
                }
                if a_max < b_min || b_max < a_min {
                    return false;
                }
            }
        }
        true
    }

    /// Exact overlap area through convex polygon clipping.
    pub fn intersection_area(&self, other: &OrientedBox) -> f64 {
        let mut subject: Vec<Point2> = self.corners().to_vec();
        let clip = other.corners();
        // Sutherland-Hodgman against each (counterclockwise) clip edge
        for i in 0..4 {
            let (e1, e2) = (clip[i], clip[(i + 1) % 4]);
            let input = std::mem::take(&mut subject);
            if input.is_empty() {
                return 0.0;
            }
            let inside = |p: Point2| (e2 - e1).cross(p - e1) >= 0.0;
            for j in 0..input.len() {
                let cur = input[j];
                let prev = input[(j + input.len() - 1) % input.len()];
                let cur_in = inside(cur);
                let prev_in = inside(prev);
                if cur_in {
                    if !prev_in {
                        subject.push(line_intersection(prev, cur, e1, e2));
                    }
                    subject.push(cur);
                } else if prev_in {
                    subject.push(line_intersection(prev, cur, e1, e2));
                }
            }
        }
        if subject.len() < 3 {
            return 0.0;
        }
        let mut acc = 0.0;
        for i in 0..subject.len() {
            acc += subject[i].cross(subject[(i + 1) % subject.len()]);
        }
        (acc / 2.0).abs()
    }
}

fn line_intersection(a1: Point2, a2: Point2, b1: Point2, b2: Point2) -> Point2 {
    let da = a2 - a1;
    let db = b2 - b1;
    let denom = da.cross(db);
    if denom.abs() < 1e-15 {
        return a2;
    }
    let t = (b1 - a1).cross(db) / denom;
    a1 + da * t
}
