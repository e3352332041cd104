//! Graham scan and even-odd polygon rasterization.

use std::cmp::Ordering;

use crate::error::{Error, Result};
use crate::imgcore::MaskBitmap;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

impl From<(f64, f64)> for Point {
    fn from((x, y): (f64, f64)) -> Self {
        Point { x, y }
    }
}

/// Twice the signed area of triangle `(o, a, b)`; positive when `b` is to the
/// left of `o -> a`.
#[inline]
pub fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

#[inline]
fn dist2(a: Point, b: Point) -> f64 {
    (a.x - b.x).powi(2) + (a.y - b.y).powi(2)
}

/// A closed polygon; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Polygon {
    pub vertices: Vec<Point>,
}

impl Polygon {
    pub fn new(vertices: Vec<Point>) -> Self {
        Polygon { vertices }
    }

    /// Shoelace area, positive for counter-clockwise order (y up).
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| {
                let (a, b) = (self.vertices[i], self.vertices[(i + 1) % n]);
                a.x * b.y - b.x * a.y
            })
            .sum::<f64>()
            / 2.0
    }

    /// Even-odd containment test.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = (self.vertices[i], self.vertices[(i + n - 1) % n]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
        }
        inside
    }
}

/// Convex hull by Graham scan. Vertices come back counter-clockwise starting
/// from the lowest (then leftmost) point, without collinear interior points.
pub fn graham_convex_hull(points: &[Point]) -> Result<Polygon> {
    if points.len() < 3 {
        return Err(Error::InvalidParam(format!(
            "convex hull needs at least 3 points, got {}",
            points.len()
        )));
    }
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.y.total_cmp(&b.y).then(a.x.total_cmp(&b.x)));
    pts.dedup();
    let pivot = pts[0];
    let mut rest = pts.split_off(1);
    rest.sort_by(|&a, &b| {
        let c = cross(pivot, a, b);
        if c > 0.0 {
            Ordering::Less
        } else if c < 0.0 {
            Ordering::Greater
        } else {
            dist2(pivot, a).total_cmp(&dist2(pivot, b))
        }
    });

    let mut hull: Vec<Point> = vec![pivot];
    for p in rest {
        while hull.len() >= 2 && cross(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0.0 {
            hull.pop();
        }
        hull.push(p);
    }
    if hull.len() < 3 {
        return Err(Error::DegenerateHull(points.len()));
    }
    Ok(Polygon::new(hull))
}

/// Sets every pixel whose center lies inside the polygon (even-odd rule).
pub fn rasterize_polygon(poly: &Polygon, height: usize, width: usize) -> MaskBitmap {
    let mut mask = MaskBitmap::zeros(height, width);
    fill_polygon(&mut mask, poly);
    mask
}

pub(crate) fn fill_polygon(mask: &mut MaskBitmap, poly: &Polygon) {
    let n = poly.vertices.len();
    if n < 3 {
        return;
    }
    let mut xs = Vec::with_capacity(n);
    for y in 0..mask.height() {
        let yc = y as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = (poly.vertices[i], poly.vertices[(i + n - 1) % n]);
            if (a.y > yc) != (b.y > yc) {
                xs.push(a.x + (yc - a.y) * (b.x - a.x) / (b.y - a.y));
            }
        }
        xs.sort_by(f64::total_cmp);
        for pair in xs.chunks_exact(2) {
            // same boundary convention as `Polygon::contains`: [enter, leave)
            let lo = ((pair[0] - 0.5).floor().max(0.0)) as usize;
            let hi = ((pair[1] - 0.5).ceil().max(0.0) as usize).min(mask.width().saturating_sub(1));
            for x in lo..=hi {
                let xc = x as f64 + 0.5;
                if xc >= pair[0] && xc < pair[1] {
                    mask.set(y, x, true);
                }
            }
        }
    }
}
