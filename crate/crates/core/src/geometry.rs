//! Polygon rasterization and minimum-area rotated rectangles.
//!
//! Pixel `(i, j)` is row `i`, column `j`; its center sits at `(j + 0.5, i + 0.5)`
//! in image coordinates. All containment tests use centers, so an axis-aligned
//! `w × h` box with integer corners covers exactly `w·h` pixels.

use std::collections::BTreeSet;

use crate::error::{Error, Result};
use crate::rbox::{wrap_half_turn, RBox, MIN_EXTENT};

/// `(row, column)`.
pub type Pixel = (usize, usize);

/// Row-major ordered pixel set.
pub type PixelSet = BTreeSet<Pixel>;

#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<[f64; 2]>,
}

impl Polygon {
    pub fn new(vertices: Vec<[f64; 2]>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::InvalidPolygon(format!(
                "need at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        if vertices.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::InvalidPolygon("non-finite vertex".into()));
        }
        for k in 0..vertices.len() {
            if vertices[k] == vertices[(k + 1) % vertices.len()] {
                return Err(Error::InvalidPolygon(format!("repeated consecutive vertex {k}")));
            }
        }
        Ok(Self { vertices })
    }

    pub fn vertices(&self) -> &[[f64; 2]] {
        &self.vertices
    }

    /// Even-odd test. An edge counts as crossed by the rightward ray from
    /// `(x, y)` iff `y` lies in its half-open vertical span and `x` is strictly left.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (xi, yi) = (v[i][0], v[i][1]);
            let (xj, yj) = (v[j][0], v[j][1]);
            if (yi > y) != (yj > y) && x < (xj - xi) * (y - yi) / (yj - yi) + xi {
                inside = !inside;
            }
            j = i;
        }
        inside
    }
}

/// Pixels whose centers fall inside the polygon, clipped to the image.
pub fn rasterize(polygon: &Polygon, height: usize, width: usize) -> PixelSet {
    let v = polygon.vertices();
    let (mut ymin, mut ymax) = (f64::INFINITY, f64::NEG_INFINITY);
    for p in v {
        ymin = ymin.min(p[1]);
        ymax = ymax.max(p[1]);
    }
    let mut out = PixelSet::new();
    if ymax < 0.0 || ymin > height as f64 {
        return out;
    }
    let row_lo = (ymin - 0.5).floor().max(0.0) as usize;
    let row_hi = ((ymax - 0.5).ceil().max(0.0) as usize).min(height.saturating_sub(1));
    let mut crossings: Vec<f64> = Vec::new();
    for i in row_lo..=row_hi {
        let y = i as f64 + 0.5;
        crossings.clear();
        let mut j = v.len() - 1;
        for k in 0..v.len() {
            let (xi, yi) = (v[k][0], v[k][1]);
            let (xj, yj) = (v[j][0], v[j][1]);
            if (yi > y) != (yj > y) {
                crossings.push((xj - xi) * (y - yi) / (yj - yi) + xi);
            }
            j = k;
        }
        if crossings.is_empty() {
            continue;
        }
        crossings.sort_by(f64::total_cmp);
        // center x is inside iff an odd number of crossings lie strictly to its right
        for pair in crossings.chunks(2) {
            if pair.len() < 2 {
                break;
            }
            let (a, b) = (pair[0], pair[1]);
            // x in [a, b) satisfies: crossings > x include b but not a
            let first = (a - 0.5).ceil().max(0.0);
            let last = (b - 0.5).ceil() - 1.0;
            if last < 0.0 || first > last {
                continue;
            }
            let first = first as usize;
            let last = (last as usize).min(width.saturating_sub(1));
            for col in first..=last {
                let x = col as f64 + 0.5;
                if x >= a && x < b {
                    out.insert((i, col));
                }
            }
        }
    }
    out
}

/// The four corners of every pixel in the set, deduplicated.
pub fn pixel_corners(mask: &PixelSet) -> Vec<[f64; 2]> {
    let mut pts: BTreeSet<(usize, usize)> = BTreeSet::new();
    for &(i, j) in mask {
        for (di, dj) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
            pts.insert((i + di, j + dj));
        }
    }
    pts.into_iter().map(|(y, x)| [x as f64, y as f64]).collect()
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

/// Andrew's monotone chain; collinear points are dropped.
pub fn convex_hull(points: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut pts = points.to_vec();
    pts.sort_by(|a, b| a[0].total_cmp(&b[0]).then(a[1].total_cmp(&b[1])));
    pts.dedup();
    if pts.len() < 3 {
        return pts;
    }
    let mut lower: Vec<[f64; 2]> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && cross(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<[f64; 2]> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && cross(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    lower
}

/// Minimum-area rectangle enclosing the points, found by sweeping every hull
/// edge direction. Extents are floored at [`MIN_EXTENT`]; the result has
/// `w >= h` and `theta` in `(-pi/2, pi/2]`, with squares reduced into `(-pi/4, pi/4]`.
pub fn min_area_rbox(points: &[[f64; 2]]) -> Result<RBox> {
    if points.is_empty() {
        return Err(Error::EmptyPoints);
    }
    let hull = convex_hull(points);
    if hull.len() == 1 {
        let p = hull[0];
        return Ok(RBox::new(p[0], p[1], MIN_EXTENT, MIN_EXTENT, 0.0));
    }
    let mut best: Option<(f64, RBox)> = None;
    for k in 0..hull.len() {
        let a = hull[k];
        let b = hull[(k + 1) % hull.len()];
        let (ex, ey) = (b[0] - a[0], b[1] - a[1]);
        let len = (ex * ex + ey * ey).sqrt();
        if len == 0.0 {
            continue;
        }
        let (ux, uy) = (ex / len, ey / len);
        let (mut umin, mut umax, mut vmin, mut vmax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in &hull {
            let u = p[0] * ux + p[1] * uy;
            let v = -p[0] * uy + p[1] * ux;
            umin = umin.min(u);
            umax = umax.max(u);
            vmin = vmin.min(v);
            vmax = vmax.max(v);
        }
        let (w, h) = (umax - umin, vmax - vmin);
        let area = w * h;
        if best.as_ref().is_none_or(|(a, _)| area < *a) {
            let (cu, cv) = ((umin + umax) / 2.0, (vmin + vmax) / 2.0);
            let cx = cu * ux - cv * uy;
            let cy = cu * uy + cv * ux;
            let theta = wrap_half_turn(uy.atan2(ux));
            best = Some((area, RBox::new(cx, cy, w.max(MIN_EXTENT), h.max(MIN_EXTENT), theta)));
        }
    }
    let (_, b) = best.ok_or(Error::EmptyPoints)?;
    b.canonical_geometric()
}

/// 8-connected components, each in row-major order; components ordered by first pixel.
pub fn connected_components(mask: &PixelSet) -> Vec<Vec<Pixel>> {
    let mut seen = PixelSet::new();
    let mut comps = Vec::new();
    for &start in mask {
        if seen.contains(&start) {
            continue;
        }
        let mut comp = Vec::new();
        let mut stack = vec![start];
        seen.insert(start);
        while let Some((i, j)) = stack.pop() {
            comp.push((i, j));
            for di in -1i64..=1 {
                for dj in -1i64..=1 {
                    if di == 0 && dj == 0 {
                        continue;
                    }
                    let (ni, nj) = (i as i64 + di, j as i64 + dj);
                    if ni < 0 || nj < 0 {
                        continue;
                    }
                    let n = (ni as usize, nj as usize);
                    if mask.contains(&n) && seen.insert(n) {
                        stack.push(n);
                    }
                }
            }
        }
        comp.sort();
        comps.push(comp);
    }
    comps
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

    fn poly(v: &[[f64; 2]]) -> Polygon {
        Polygon::new(v.to_vec()).unwrap()
    }

    fn brute_raster(p: &Polygon, h: usize, w: usize) -> PixelSet {
        let mut s = PixelSet::new();
        for i in 0..h {
            for j in 0..w {
                if p.contains(j as f64 + 0.5, i as f64 + 0.5) {
                    s.insert((i, j));
                }
            }
        }
        s
    }

    #[test]
    fn polygon_validation() {
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 0.0]]).is_err());
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [1.0, 0.0], [0.0, 1.0]]).is_err());
        assert!(Polygon::new(vec![[0.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 0.0]]).is_err());
    }

    #[test]
    fn square_rasterizes_to_sixteen_pixels() {
        let s = rasterize(&poly(&[[0.0, 0.0], [4.0, 0.0], [4.0, 4.0], [0.0, 4.0]]), 8, 8);
        let expect: PixelSet = (0..4).flat_map(|i| (0..4).map(move |j| (i, j))).collect();
        assert_eq!(s, expect);
    }

    #[test]
    fn triangle_excludes_centers_on_hypotenuse() {
        // centers (1.5, 0.5) and (0.5, 1.5) lie exactly on x + y = 2, so only the
        // corner pixel is strictly inside
        let p = poly(&[[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]);
        let s = rasterize(&p, 8, 8);
        assert_eq!(s, brute_raster(&p, 8, 8));
        assert_eq!(s, PixelSet::from([(0, 0)]));
    }

    #[test]
    fn outside_polygon_is_empty() {
        let p = poly(&[[20.0, 20.0], [30.0, 20.0], [30.0, 30.0]]);
        assert!(rasterize(&p, 8, 8).is_empty());
        let p = poly(&[[-9.0, -9.0], [-5.0, -9.0], [-5.0, -5.0]]);
        assert!(rasterize(&p, 8, 8).is_empty());
    }

    #[test]
    fn raster_matches_point_in_polygon_on_random_convex_polygons() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..300 {
            let n = rng.random_range(3..9);
            let cx = rng.random_range(-4.0..20.0);
            let cy = rng.random_range(-4.0..20.0);
            let r = rng.random_range(0.5..9.0);
            let mut angles: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..2.0 * PI)).collect();
            angles.sort_by(f64::total_cmp);
            let verts: Vec<[f64; 2]> = angles.iter().map(|a| [cx + r * a.cos(), cy + r * a.sin()]).collect();
            let Ok(p) = Polygon::new(verts) else { continue };
            assert_eq!(rasterize(&p, 16, 17), brute_raster(&p, 16, 17));
        }
    }

    #[test]
    fn raster_handles_integer_vertices() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..300 {
            let verts: Vec<[f64; 2]> = (0..rng.random_range(3..7))
                .map(|_| [rng.random_range(0..12) as f64, rng.random_range(0..12) as f64])
                .collect();
            let Ok(p) = Polygon::new(verts) else { continue };
            assert_eq!(rasterize(&p, 12, 12), brute_raster(&p, 12, 12));
        }
    }

    #[test]
    fn min_area_examples() {
        let b = min_area_rbox(&[[0.0, 0.0], [2.0, 0.0], [2.0, 2.0], [0.0, 2.0]]).unwrap();
        assert!((b.x - 1.0).abs() < 1e-12 && (b.y - 1.0).abs() < 1e-12);
        assert!((b.w - 2.0).abs() < 1e-12 && (b.h - 2.0).abs() < 1e-12);
        assert!(b.theta.abs() < 1e-12);

        let b = min_area_rbox(&[[2.0, 0.0], [4.0, 2.0], [2.0, 4.0], [0.0, 2.0]]).unwrap();
        assert!((b.x - 2.0).abs() < 1e-12 && (b.y - 2.0).abs() < 1e-12);
        assert!((b.w - 8f64.sqrt()).abs() < 1e-12 && (b.h - 8f64.sqrt()).abs() < 1e-12);
        assert!((b.theta.abs() - FRAC_PI_4).abs() < 1e-12);

        let b = min_area_rbox(&[[0.0, 0.0], [4.0, 0.0]]).unwrap();
        assert_eq!(b, RBox::new(2.0, 0.0, 4.0, MIN_EXTENT, 0.0));

        let b = min_area_rbox(&[[3.0, 1.0]]).unwrap();
        assert_eq!(b, RBox::new(3.0, 1.0, MIN_EXTENT, MIN_EXTENT, 0.0));
        assert!(matches!(min_area_rbox(&[]), Err(Error::EmptyPoints)));
    }

    /// Area of the tightest rectangle at angle `t`, by direct projection.
    fn area_at(points: &[[f64; 2]], t: f64) -> f64 {
        let (s, c) = t.sin_cos();
        let (mut a, mut b, mut cc, mut d) = (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in points {
            let u = c * p[0] + s * p[1];
            let v = -s * p[0] + c * p[1];
            a = a.min(u);
            b = b.max(u);
            cc = cc.min(v);
            d = d.max(v);
        }
        (b - a) * (d - cc)
    }

    #[test]
    fn min_area_beats_angle_sweep_and_aabb() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        for _ in 0..100 {
            let n = rng.random_range(3..30);
            let pts: Vec<[f64; 2]> = (0..n)
                .map(|_| [rng.random_range(-10.0..10.0), rng.random_range(-5.0..5.0)])
                .collect();
            let b = min_area_rbox(&pts).unwrap();
            let sweep = (0..20000)
                .map(|k| area_at(&pts, k as f64 * FRAC_PI_2 / 20000.0))
                .fold(f64::INFINITY, f64::min);
            assert!(b.area() <= sweep + 1e-9);
            assert!(b.area() >= sweep * (1.0 - 1e-3));
            assert!(b.area() <= area_at(&pts, 0.0) + 1e-9);
            for p in &pts {
                assert!(b.contains(p[0], p[1], 1e-9));
            }
            assert!(b.is_canonical());
        }
    }

    #[test]
    fn components_are_eight_connected() {
        let m: PixelSet = [(0, 0), (1, 1), (3, 3), (3, 4)].into_iter().collect();
        let c = connected_components(&m);
        assert_eq!(c, vec![vec![(0, 0), (1, 1)], vec![(3, 3), (3, 4)]]);
    }
}
