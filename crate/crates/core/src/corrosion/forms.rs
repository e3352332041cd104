//! Procedural generators for the three corrosion forms.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use super::hull::{fill_polygon, graham_convex_hull, Point, Polygon};
use crate::error::Result;
use crate::imgcore::MaskBitmap;

/// Squared distance from `p` to segment `a-b`.
fn seg_dist2(p: Point, a: Point, b: Point) -> f64 {
    let (dx, dy) = (b.x - a.x, b.y - a.y);
    let len2 = dx * dx + dy * dy;
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p.x - a.x) * dx + (p.y - a.y) * dy) / len2).clamp(0.0, 1.0)
    };
    let (qx, qy) = (a.x + t * dx, a.y + t * dy);
    (p.x - qx).powi(2) + (p.y - qy).powi(2)
}

/// Rasterizes a polyline: pixels whose center is within `thickness / 2` of
/// any segment are set.
pub fn draw_stroke(mask: &mut MaskBitmap, polyline: &[Point], thickness: f64) {
    let r = thickness / 2.0;
    let r2 = r * r;
    let segs: Vec<(Point, Point)> = if polyline.len() == 1 {
        vec![(polyline[0], polyline[0])]
    } else {
        polyline.windows(2).map(|w| (w[0], w[1])).collect()
    };
    for (a, b) in segs {
        let y0 = (a.y.min(b.y) - r - 1.0).floor().max(0.0) as usize;
        let y1 = ((a.y.max(b.y) + r + 1.0).ceil().max(0.0) as usize).min(mask.height());
        let x0 = (a.x.min(b.x) - r - 1.0).floor().max(0.0) as usize;
        let x1 = ((a.x.max(b.x) + r + 1.0).ceil().max(0.0) as usize).min(mask.width());
        for y in y0..y1 {
            for x in x0..x1 {
                let c = Point::new(x as f64 + 0.5, y as f64 + 0.5);
                if seg_dist2(c, a, b) <= r2 {
                    mask.set(y, x, true);
                }
            }
        }
    }
}

/// Morphological dilation with a Euclidean disk of the given radius.
pub fn dilate(mask: &MaskBitmap, radius: usize) -> MaskBitmap {
    if radius == 0 {
        return mask.clone();
    }
    let r = radius as i64;
    let offsets: Vec<(i64, i64)> = (-r..=r)
        .flat_map(|dy| (-r..=r).map(move |dx| (dy, dx)))
        .filter(|&(dy, dx)| dy * dy + dx * dx <= r * r)
        .collect();
    let (h, w) = (mask.height() as i64, mask.width() as i64);
    let mut out = mask.clone();
    for y in 0..h {
        for x in 0..w {
            if !mask.get(y as usize, x as usize) {
                continue;
            }
            for &(dy, dx) in &offsets {
                let (yy, xx) = (y + dy, x + dx);
                if yy >= 0 && yy < h && xx >= 0 && xx < w {
                    out.set(yy as usize, xx as usize, true);
                }
            }
        }
    }
    out
}

fn random_polyline<R: Rng + ?Sized>(h: usize, w: usize, rng: &mut R) -> Vec<Point> {
    let (hf, wf) = (h as f64, w as f64);
    let mut p = Point::new(rng.random_range(0.0..wf), rng.random_range(0.0..hf));
    let mut angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
    let segments = rng.random_range(2..=6);
    let mut line = vec![p];
    for _ in 0..segments {
        angle += rng.random_range(-1.2..1.2);
        let len = rng.random_range(0.15..0.45) * wf.max(hf);
        p = Point::new(
            (p.x + len * angle.cos()).clamp(0.0, wf),
            (p.y + len * angle.sin()).clamp(0.0, hf),
        );
        line.push(p);
    }
    line
}

/// Quick-draw scribbles: `strokes` random polylines drawn at `thickness`,
/// then dilated by `dilation_radius`.
pub fn gen_quickdraw_mask<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    strokes: usize,
    thickness: usize,
    dilation_radius: usize,
    rng: &mut R,
) -> MaskBitmap {
    quickdraw_with_thickness(h, w, strokes, thickness.max(1) as f64, dilation_radius, rng)
}

pub(crate) fn quickdraw_with_thickness<R: Rng + ?Sized>(
    h: usize,
    w: usize,
    strokes: usize,
    thickness: f64,
    dilation_radius: usize,
    rng: &mut R,
) -> MaskBitmap {
    let mut mask = MaskBitmap::zeros(h, w);
    for _ in 0..strokes {
        let line = random_polyline(h, w, rng);
        draw_stroke(&mut mask, &line, thickness);
    }
    dilate(&mask, dilation_radius)
}

/// Star-shaped blob whose log-radius follows a closed random walk.
fn random_blob<R: Rng + ?Sized>(h: usize, w: usize, scale: f64, rng: &mut R) -> Polygon {
    const SPOKES: usize = 28;
    let (hf, wf) = (h as f64, w as f64);
    let cx = rng.random_range(0.1..0.9) * wf;
    let cy = rng.random_range(0.15..0.85) * hf;
    let rx = scale * rng.random_range(0.08..0.22) * wf;
    let ry = scale * rng.random_range(0.25..0.5) * hf;
    let mut walk = Vec::with_capacity(SPOKES + 1);
    let mut acc = 0.0;
    walk.push(0.0);
    for _ in 0..SPOKES {
        let step: f64 = StandardNormal.sample(rng);
        acc += 0.22 * step;
        walk.push(acc);
    }
    let drift = acc / SPOKES as f64;
    let phase = rng.random_range(0.0..std::f64::consts::TAU);
    let vertices = (0..SPOKES)
        .map(|k| {
            let r = (walk[k] - drift * k as f64).exp().clamp(0.35, 1.8);
            let theta = phase + std::f64::consts::TAU * k as f64 / SPOKES as f64;
            Point::new(cx + rx * r * theta.cos(), cy + ry * r * theta.sin())
        })
        .collect();
    Polygon::new(vertices)
}

/// Union of `blob_count` randomly deformed closed blobs.
pub fn gen_irregular_mask<R: Rng + ?Sized>(h: usize, w: usize, blob_count: usize, rng: &mut R) -> MaskBitmap {
    irregular_with_scale(h, w, blob_count.max(1), 1.0, rng)
}

pub(crate) fn irregular_with_scale<R: Rng + ?Sized>(h: usize, w: usize, blobs: usize, scale: f64, rng: &mut R) -> MaskBitmap {
    let mut mask = MaskBitmap::zeros(h, w);
    for _ in 0..blobs {
        fill_polygon(&mut mask, &random_blob(h, w, scale, rng));
    }
    mask
}

/// Convex polygon corrosion: the hull of a random point cloud, clamped to the frame.
pub(crate) fn convex_hull_with_scale<R: Rng + ?Sized>(h: usize, w: usize, scale: f64, rng: &mut R) -> Result<MaskBitmap> {
    let (hf, wf) = (h as f64, w as f64);
    let n = rng.random_range(6..=14);
    let cx = rng.random_range(0.15..0.85) * wf;
    let cy = rng.random_range(0.2..0.8) * hf;
    let rx = scale * rng.random_range(0.15..0.45) * wf;
    let ry = scale * rng.random_range(0.4..0.9) * hf;
    let points: Vec<Point> = (0..n)
        .map(|_| {
            let t = rng.random_range(0.0..std::f64::consts::TAU);
            let u: f64 = rng.random::<f64>().sqrt();
            Point::new(
                (cx + rx * u * t.cos()).clamp(0.0, wf),
                (cy + ry * u * t.sin()).clamp(0.0, hf),
            )
        })
        .collect();
    let hull = graham_convex_hull(&points)?;
    let mut mask = MaskBitmap::zeros(h, w);
    fill_polygon(&mut mask, &hull);
    Ok(mask)
}
