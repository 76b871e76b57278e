//! Planar geometry: points, polylines, convex polygon tests.

use serde::{Deserialize, Serialize};

/// 2-D point in meters. Serialized as `[x, y]`.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point { x: v[0], y: v[1] }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn scale(self, k: f64) -> Point {
        Point::new(self.x * k, self.y * k)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    /// z-component of the 3-D cross product.
    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn dist(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    pub fn lerp(self, o: Point, t: f64) -> Point {
        self.add(o.sub(self).scale(t))
    }

    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

/// Cumulative arclength of a polyline, starting at 0.
pub fn arclengths(points: &[Point]) -> Vec<f64> {
    let mut out = Vec::with_capacity(points.len());
    let mut acc = 0.0;
    for (i, p) in points.iter().enumerate() {
        if i > 0 {
            acc += p.dist(points[i - 1]);
        }
        out.push(acc);
    }
    out
}

/// Oriented rectangle corners, counter-clockwise, for a rectangle whose
/// center is `center` and whose long axis points along `theta`.
pub fn oriented_rect(center: Point, theta: f64, length: f64, width: f64) -> Vec<Point> {
    let hl = length / 2.0;
    let hw = width / 2.0;
    [(-hl, -hw), (hl, -hw), (hl, hw), (-hl, hw)]
        .iter()
        .map(|&(x, y)| center.add(Point::new(x, y).rotate(theta)))
        .collect()
}

fn project_onto(poly: &[Point], axis: Point) -> (f64, f64) {
    poly.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), p| {
        let v = p.dot(axis);
        (lo.min(v), hi.max(v))
    })
}

/// Separating-axis test for two convex polygons. Touching counts as intersecting.
pub fn convex_intersects(a: &[Point], b: &[Point]) -> bool {
    if a.is_empty() || b.is_empty() {
        return false;
    }
    for poly in [a, b] {
        let n = poly.len();
        if n < 2 {
            continue;
        }
        for i in 0..n {
            let e = poly[(i + 1) % n].sub(poly[i]);
            if e.norm() == 0.0 {
                continue;
            }
            let axis = Point::new(-e.y, e.x);
            let (alo, ahi) = project_onto(a, axis);
            let (blo, bhi) = project_onto(b, axis);
            let tol = 1e-12 * axis.norm().max(1.0);
            if ahi < blo - tol || bhi < alo - tol {
                return false;
            }
        }
    }
    true
}

fn on_segment(p: Point, a: Point, b: Point, tol: f64) -> bool {
    let ab = b.sub(a);
    let len = ab.norm();
    if len == 0.0 {
        return p.dist(a) <= tol;
    }
    let t = p.sub(a).dot(ab) / (len * len);
    if !(-tol / len..=1.0 + tol / len).contains(&t) {
        return false;
    }
    (ab.cross(p.sub(a)) / len).abs() <= tol
}

/// Closed point-in-polygon test (boundary inclusive within `tol`). Works
/// for simple, possibly non-convex polygons.
pub fn point_in_polygon(p: Point, poly: &[Point], tol: f64) -> bool {
    let n = poly.len();
    if n < 3 {
        return false;
    }
    for i in 0..n {
        if on_segment(p, poly[i], poly[(i + 1) % n], tol) {
            return true;
        }
    }
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let (pi, pj) = (poly[i], poly[j]);
        if (pi.y > p.y) != (pj.y > p.y) {
            let x = pj.x + (p.y - pj.y) * (pi.x - pj.x) / (pi.y - pj.y);
            if p.x < x {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = b.sub(a).cross(c.sub(a));
    let d2 = b.sub(a).cross(d.sub(a));
    let d3 = d.sub(c).cross(a.sub(c));
    let d4 = d.sub(c).cross(b.sub(c));
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    let tol = 1e-12;
    (d1.abs() <= tol && on_segment(c, a, b, tol))
        || (d2.abs() <= tol && on_segment(d, a, b, tol))
        || (d3.abs() <= tol && on_segment(a, c, d, tol))
        || (d4.abs() <= tol && on_segment(b, c, d, tol))
}

/// True if any segment of `p` touches any segment of `q`.
pub fn polylines_intersect(p: &[Point], q: &[Point]) -> bool {
    p.windows(2)
        .any(|s| q.windows(2).any(|t| segments_intersect(s[0], s[1], t[0], t[1])))
}

/// Axis-aligned bounding box `(min, max)`.
pub fn bounding_box(points: &[Point]) -> (Point, Point) {
    points.iter().fold(
        (
            Point::new(f64::INFINITY, f64::INFINITY),
            Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY),
        ),
        |(lo, hi), p| {
            (
                Point::new(lo.x.min(p.x), lo.y.min(p.y)),
                Point::new(hi.x.max(p.x), hi.y.max(p.y)),
            )
        },
    )
}

/// Normalize an angle to (-π, π].
pub fn wrap_angle(a: f64) -> f64 {
    let mut x = a % (2.0 * std::f64::consts::PI);
    if x <= -std::f64::consts::PI {
        x += 2.0 * std::f64::consts::PI;
    } else if x > std::f64::consts::PI {
        x -= 2.0 * std::f64::consts::PI;
    }
    x
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rect_corners_axis_aligned() {
        let r = oriented_rect(Point::default(), 0.0, 4.0, 2.0);
        assert_eq!(r[0], Point::new(-2.0, -1.0));
        assert_eq!(r[2], Point::new(2.0, 1.0));
    }

    #[test]
    fn sat_touching_and_separated() {
        let a = oriented_rect(Point::new(0.0, 0.0), 0.0, 2.0, 2.0);
        let b = oriented_rect(Point::new(2.0, 0.0), 0.0, 2.0, 2.0);
        let c = oriented_rect(Point::new(2.1, 0.0), 0.0, 2.0, 2.0);
        assert!(convex_intersects(&a, &b));
        assert!(!convex_intersects(&a, &c));
    }

    #[test]
    fn point_in_polygon_boundary_inclusive() {
        let sq = vec![
            Point::new(0.0, 0.0),
            Point::new(1.0, 0.0),
            Point::new(1.0, 1.0),
            Point::new(0.0, 1.0),
        ];
        assert!(point_in_polygon(Point::new(0.5, 0.5), &sq, 1e-9));
        assert!(point_in_polygon(Point::new(1.0, 0.5), &sq, 1e-9));
        assert!(!point_in_polygon(Point::new(1.1, 0.5), &sq, 1e-9));
    }

    #[test]
    fn crossing_polylines() {
        let p = [Point::new(0.0, 0.0), Point::new(1.0, 1.0)];
        let q = [Point::new(0.0, 1.0), Point::new(1.0, 0.0)];
        let r = [Point::new(0.0, 2.0), Point::new(1.0, 2.0)];
        assert!(polylines_intersect(&p, &q));
        assert!(!polylines_intersect(&p, &r));
    }
}
