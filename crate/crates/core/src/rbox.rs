//! Rotated-box algebra.
//!
//! A box is `(x, y, w, h, theta)` in pixel units: `w` runs along the direction
//! `(cos theta, sin theta)` and `h` along its perpendicular. The Gaussian view of
//! a box has mean `(x, y)` and covariance `R diag(w²/4, h²/4) Rᵀ`; the distance
//! between two boxes is the squared 2-Wasserstein distance of their Gaussians.

use std::f64::consts::{FRAC_PI_2, FRAC_PI_4, PI};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Smallest extent any derived box is allowed to have.
pub const MIN_EXTENT: f64 = 1e-3;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub theta: f64,
}

/// Mean and matrix square root of the covariance of a box's Gaussian.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Gaussian2 {
    pub mu: [f64; 2],
    pub sqrt_sigma: [[f64; 2]; 2],
}

impl Gaussian2 {
    pub fn sigma(&self) -> [[f64; 2]; 2] {
        let s = &self.sqrt_sigma;
        [
            [s[0][0] * s[0][0] + s[0][1] * s[1][0], s[0][0] * s[0][1] + s[0][1] * s[1][1]],
            [s[1][0] * s[0][0] + s[1][1] * s[1][0], s[1][0] * s[0][1] + s[1][1] * s[1][1]],
        ]
    }
}

/// Wraps an angle into `(-pi/2, pi/2]`.
pub fn wrap_half_turn(theta: f64) -> f64 {
    let k = ((FRAC_PI_2 - theta) / PI).floor();
    let t = theta + k * PI;
    // floor can land one step off right at the boundary
    if t <= -FRAC_PI_2 {
        t + PI
    } else if t > FRAC_PI_2 {
        t - PI
    } else {
        t
    }
}

impl RBox {
    pub const fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> Self {
        Self { x, y, w, h, theta }
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.x, self.y, self.w, self.h, self.theta]
    }

    pub fn from_array(a: [f64; 5]) -> Self {
        Self::new(a[0], a[1], a[2], a[3], a[4])
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn validate(&self) -> Result<()> {
        let finite = self.as_array().iter().all(|v| v.is_finite());
        if !finite || self.w <= 0.0 || self.h <= 0.0 {
            return Err(Error::InvalidBox(format!("{self:?}")));
        }
        Ok(())
    }

    pub fn is_canonical(&self) -> bool {
        self.w >= self.h && self.theta > -FRAC_PI_2 && self.theta <= FRAC_PI_2
    }

    /// Same rectangle with `w >= h` and `theta` in `(-pi/2, pi/2]`; squares get `theta = 0`.
    ///
    /// The square rule identifies boxes by their Gaussian, which is isotropic for
    /// squares. Use [`RBox::canonical_geometric`] when the exact rectangle matters.
    pub fn canonicalize(&self) -> Result<RBox> {
        self.validate()?;
        let mut b = self.canonical_geometric()?;
        if b.w == b.h {
            b.theta = 0.0;
        }
        Ok(b)
    }

    /// Canonical form that never changes the covered region. Squares keep their
    /// orientation reduced into `(-pi/4, pi/4]`.
    pub fn canonical_geometric(&self) -> Result<RBox> {
        self.validate()?;
        let (mut w, mut h, mut theta) = (self.w, self.h, self.theta);
        if w < h {
            std::mem::swap(&mut w, &mut h);
            theta += FRAC_PI_2;
        }
        theta = wrap_half_turn(theta);
        if w == h {
            if theta > FRAC_PI_4 {
                theta -= FRAC_PI_2;
            } else if theta <= -FRAC_PI_4 {
                theta += FRAC_PI_2;
            }
        }
        Ok(RBox::new(self.x, self.y, w, h, theta))
    }

    pub fn to_gaussian(&self) -> Gaussian2 {
        let (s, c) = self.theta.sin_cos();
        let (hw, hh) = (self.w / 2.0, self.h / 2.0);
        let off = (self.w - self.h) / 2.0 * c * s;
        Gaussian2 {
            mu: [self.x, self.y],
            sqrt_sigma: [[hw * c * c + hh * s * s, off], [off, hw * s * s + hh * c * c]],
        }
    }

    /// Corners in counter-clockwise order under the usual y-up orientation.
    pub fn corners(&self) -> [[f64; 2]; 4] {
        let (s, c) = self.theta.sin_cos();
        let (ux, uy) = (c * self.w / 2.0, s * self.w / 2.0);
        let (vx, vy) = (-s * self.h / 2.0, c * self.h / 2.0);
        [
            [self.x - ux - vx, self.y - uy - vy],
            [self.x + ux - vx, self.y + uy - vy],
            [self.x + ux + vx, self.y + uy + vy],
            [self.x - ux + vx, self.y - uy + vy],
        ]
    }

    /// Point in the box frame: `(along w, along h)`.
    #[inline]
    pub fn to_local(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        let (dx, dy) = (px - self.x, py - self.y);
        (c * dx + s * dy, -s * dx + c * dy)
    }

    #[inline]
    pub fn contains(&self, px: f64, py: f64, slack: f64) -> bool {
        let (u, v) = self.to_local(px, py);
        u.abs() <= self.w / 2.0 + slack && v.abs() <= self.h / 2.0 + slack
    }

    fn circumradius(&self) -> f64 {
        0.5 * (self.w * self.w + self.h * self.h).sqrt()
    }
}

/// Entries `(a, b, d)` of the symmetric covariance `[[a, b], [b, d]]` and their
/// derivatives with respect to `(w, h, theta)`.
fn covariance_with_partials(w: f64, h: f64, theta: f64) -> ([f64; 3], [[f64; 3]; 3]) {
    let (s, c) = theta.sin_cos();
    let (w2, h2) = (w * w, h * h);
    let cov = [
        (w2 * c * c + h2 * s * s) / 4.0,
        (w2 - h2) * c * s / 4.0,
        (w2 * s * s + h2 * c * c) / 4.0,
    ];
    let (s2t, c2t) = (2.0 * theta).sin_cos();
    let diff = w2 - h2;
    // rows: d/dw, d/dh, d/dtheta; columns: a, b, d
    let partials = [
        [w * c * c / 2.0, w * c * s / 2.0, w * s * s / 2.0],
        [h * s * s / 2.0, -h * c * s / 2.0, h * c * c / 2.0],
        [-diff * s2t / 4.0, diff * c2t / 4.0, diff * s2t / 4.0],
    ];
    (cov, partials)
}

/// Squared 2-Wasserstein distance between the Gaussians of `p` and `g`.
///
/// For 2×2 SPD matrices `Tr(M^½) = sqrt(Tr M + 2 sqrt(det M))`; with
/// `M = Σp^½ Σg Σp^½` this needs only `Tr(Σp Σg)` and `det Σp · det Σg`.
pub fn gauss_distance(p: &RBox, g: &RBox) -> f64 {
    gauss_distance_with_grad(p, g).0
}

/// Distance plus its gradient with respect to `p`'s `(x, y, w, h, theta)`.
/// `p` need not be canonical; the distance is invariant to the representation.
pub fn gauss_distance_with_grad(p: &RBox, g: &RBox) -> (f64, [f64; 5]) {
    if p == g {
        return (0.0, [0.0; 5]);
    }
    let (cp, dp) = covariance_with_partials(p.w, p.h, p.theta);
    let (cg, _) = covariance_with_partials(g.w, g.h, g.theta);
    let (dx, dy) = (p.x - g.x, p.y - g.y);
    let trace_prod = cp[0] * cg[0] + 2.0 * cp[1] * cg[1] + cp[2] * cg[2];
    let root_det = p.w * p.h * g.w * g.h / 16.0;
    let q = (trace_prod + 2.0 * root_det).max(0.0);
    let root_q = q.sqrt();
    let traces = (p.w * p.w + p.h * p.h + g.w * g.w + g.h * g.h) / 4.0;
    let raw = dx * dx + dy * dy + traces - 2.0 * root_q;

    let mut grad = [2.0 * dx, 2.0 * dy, 0.0, 0.0, 0.0];
    let inv = if root_q > 0.0 { 1.0 / root_q } else { 0.0 };
    let dtrace = |k: usize| dp[k][0] * cg[0] + 2.0 * dp[k][1] * cg[1] + dp[k][2] * cg[2];
    grad[2] = p.w / 2.0 - inv * (dtrace(0) + p.h * g.w * g.h / 8.0);
    grad[3] = p.h / 2.0 - inv * (dtrace(1) + p.w * g.w * g.h / 8.0);
    grad[4] = -inv * dtrace(2);
    if raw <= 0.0 {
        // clamped against round-off; the minimum has zero slope anyway
        return (0.0, [0.0; 5]);
    }
    (raw, grad)
}

fn cross(o: [f64; 2], a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])
}

pub(crate) fn polygon_area(pts: &[[f64; 2]]) -> f64 {
    if pts.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..pts.len() {
        let a = pts[k];
        let b = pts[(k + 1) % pts.len()];
        acc += a[0] * b[1] - a[1] * b[0];
    }
    acc / 2.0
}

/// Clips convex `subject` against convex `clip` (both positively oriented).
fn clip_convex(subject: &[[f64; 2]], clip: &[[f64; 2]]) -> Vec<[f64; 2]> {
    let mut out: Vec<[f64; 2]> = subject.to_vec();
    for k in 0..clip.len() {
        if out.is_empty() {
            break;
        }
        let a = clip[k];
        let b = clip[(k + 1) % clip.len()];
        let input = std::mem::take(&mut out);
        for m in 0..input.len() {
            let cur = input[m];
            let prev = input[(m + input.len() - 1) % input.len()];
            let cur_in = cross(a, b, cur) >= 0.0;
            let prev_in = cross(a, b, prev) >= 0.0;
            if cur_in {
                if !prev_in {
                    out.push(segment_line_intersection(prev, cur, a, b));
                }
                out.push(cur);
            } else if prev_in {
                out.push(segment_line_intersection(prev, cur, a, b));
            }
        }
    }
    out
}

fn segment_line_intersection(p: [f64; 2], q: [f64; 2], a: [f64; 2], b: [f64; 2]) -> [f64; 2] {
    let dp = cross(a, b, p);
    let dq = cross(a, b, q);
    let t = dp / (dp - dq);
    [p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])]
}

fn oriented_corners(b: &RBox) -> [[f64; 2]; 4] {
    let mut c = b.corners();
    if polygon_area(&c) < 0.0 {
        c.reverse();
    }
    c
}

pub fn intersection_area(a: &RBox, b: &RBox) -> f64 {
    let (dx, dy) = (a.x - b.x, a.y - b.y);
    let reach = a.circumradius() + b.circumradius();
    if dx * dx + dy * dy > reach * reach {
        return 0.0;
    }
    let poly = clip_convex(&oriented_corners(a), &oriented_corners(b));
    polygon_area(&poly).abs()
}

/// Intersection over union of two rotated rectangles.
pub fn rotated_iou(a: &RBox, b: &RBox) -> f64 {
    let inter = intersection_area(a, b);
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Greedy rotated NMS. Sorts by descending score, breaking ties by lower index,
/// and keeps a box iff its IoU with every kept box is at most `iou_threshold`.
/// Returns kept indices in kept order.
pub fn rotated_nms(dets: &[(RBox, f64)], iou_threshold: f64) -> Vec<usize> {
    let order = score_order(dets.iter().map(|d| d.1));
    let mut kept: Vec<usize> = Vec::new();
    for idx in order {
        let b = &dets[idx].0;
        if kept
            .iter()
            .all(|&k| rotated_iou(b, &dets[k].0) <= iou_threshold)
        {
            kept.push(idx);
        }
    }
    kept
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn score_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    fn random_box(rng: &mut ChaCha8Rng) -> RBox {
        RBox::new(
            rng.random_range(-5.0..5.0),
            rng.random_range(-5.0..5.0),
            rng.random_range(0.5..8.0),
            rng.random_range(0.5..8.0),
            rng.random_range(-PI..PI),
        )
    }

    #[test]
    fn canonicalize_examples() {
        let b = RBox::new(0.0, 0.0, 2.0, 4.0, 0.0).canonicalize().unwrap();
        assert_eq!((b.w, b.h), (4.0, 2.0));
        assert!(close(b.theta, FRAC_PI_2, 1e-12));

        let b = RBox::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_2 + 0.1).canonicalize().unwrap();
        assert!(close(b.theta, -FRAC_PI_2 + 0.1, 1e-12));

        let b = RBox::new(0.0, 0.0, 3.0, 3.0, 1.0).canonicalize().unwrap();
        assert_eq!(b, RBox::new(0.0, 0.0, 3.0, 3.0, 0.0));

        assert!(RBox::new(0.0, 0.0, 0.0, 1.0, 0.0).canonicalize().is_err());
        assert!(RBox::new(0.0, 0.0, -1.0, 1.0, 0.0).canonicalize().is_err());
    }

    #[test]
    fn canonicalize_keeps_corner_set() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..500 {
            let b = random_box(&mut rng);
            let c = b.canonicalize().unwrap();
            assert!(c.is_canonical());
            for p in b.corners() {
                let hit = c
                    .corners()
                    .iter()
                    .any(|q| close(p[0], q[0], 1e-9) && close(p[1], q[1], 1e-9));
                assert!(hit, "{b:?} -> {c:?}");
            }
        }
    }

    #[test]
    fn wrap_stays_in_half_open_range() {
        for k in -20..20 {
            let t = wrap_half_turn(k as f64 * 0.37 + FRAC_PI_2 * (k % 3) as f64);
            assert!(t > -FRAC_PI_2 && t <= FRAC_PI_2);
        }
        assert_eq!(wrap_half_turn(FRAC_PI_2), FRAC_PI_2);
        assert!(close(wrap_half_turn(-FRAC_PI_2), FRAC_PI_2, 1e-15));
    }

    #[test]
    fn gaussian_examples() {
        let g = RBox::new(0.0, 0.0, 4.0, 4.0, 0.7).to_gaussian();
        assert!(close(g.sqrt_sigma[0][0], 2.0, 1e-12) && close(g.sqrt_sigma[1][1], 2.0, 1e-12));
        assert!(close(g.sqrt_sigma[0][1], 0.0, 1e-12));

        let g = RBox::new(1.0, 2.0, 4.0, 2.0, 0.0).to_gaussian();
        assert_eq!(g.mu, [1.0, 2.0]);
        assert_eq!(g.sqrt_sigma, [[2.0, 0.0], [0.0, 1.0]]);

        let g = RBox::new(0.0, 0.0, 4.0, 2.0, FRAC_PI_2).to_gaussian();
        assert!(close(g.sqrt_sigma[0][0], 1.0, 1e-12) && close(g.sqrt_sigma[1][1], 2.0, 1e-12));
        assert!(close(g.sqrt_sigma[0][1], 0.0, 1e-12));
    }

    #[test]
    fn distance_examples() {
        let a = RBox::new(1.0, 2.0, 5.0, 2.0, 0.3);
        assert_eq!(gauss_distance(&a, &a), 0.0);
        let d = gauss_distance(&RBox::new(0.0, 0.0, 4.0, 4.0, 0.0), &RBox::new(0.0, 0.0, 2.0, 2.0, 0.0));
        assert!(close(d, 2.0, 1e-12));
        let p = RBox::new(0.0, 0.0, 4.0, 2.0, 0.4);
        let q = RBox::new(0.0, 0.0, 4.0, 2.0, 0.4 + PI);
        assert!(gauss_distance(&p, &q) < 1e-12);
    }

    #[test]
    fn distance_gradient_matches_central_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let p = random_box(&mut rng);
            let g = random_box(&mut rng);
            let (_, grad) = gauss_distance_with_grad(&p, &g);
            for k in 0..5 {
                let h = 1e-6;
                let mut a = p.as_array();
                let mut b = p.as_array();
                a[k] += h;
                b[k] -= h;
                let num = (gauss_distance(&RBox::from_array(a), &g) - gauss_distance(&RBox::from_array(b), &g)) / (2.0 * h);
                let scale = num.abs().max(grad[k].abs()).max(1e-6);
                assert!((num - grad[k]).abs() / scale < 1e-5, "k={k} {num} vs {}", grad[k]);
            }
        }
    }

    #[test]
    fn iou_examples() {
        let a = RBox::new(0.0, 0.0, 1.0, 1.0, 0.0);
        assert!(close(rotated_iou(&a, &a), 1.0, 1e-12));
        let b = RBox::new(0.5, 0.0, 1.0, 1.0, 0.0);
        assert!(close(rotated_iou(&a, &b), 1.0 / 3.0, 1e-12));
        let c = RBox::new(10.0, 0.0, 1.0, 1.0, 0.0);
        assert_eq!(rotated_iou(&a, &c), 0.0);
        // diamond inside square of same center
        let d = RBox::new(0.0, 0.0, 2.0, 2.0, FRAC_PI_4);
        let s = RBox::new(0.0, 0.0, 2.0, 2.0, 0.0);
        let inter = 4.0 - 4.0 * (2f64.sqrt() - 1.0).powi(2) / 2.0 * 2.0;
        assert!(close(intersection_area(&d, &s), inter, 1e-9));
    }

    #[test]
    fn iou_symmetric() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..500 {
            let a = random_box(&mut rng);
            let b = random_box(&mut rng);
            assert!(close(rotated_iou(&a, &b), rotated_iou(&b, &a), 1e-12));
            assert!(close(rotated_iou(&a, &a), 1.0, 1e-12));
        }
    }

    #[test]
    fn nms_examples() {
        assert!(rotated_nms(&[], 0.3).is_empty());
        let b = RBox::new(0.0, 0.0, 4.0, 2.0, 0.0);
        assert_eq!(rotated_nms(&[(b, 0.5)], 0.3), vec![0]);
        assert_eq!(rotated_nms(&[(b, 0.8), (b, 0.9)], 0.3), vec![1]);
        // equal scores fall back to index order
        assert_eq!(rotated_nms(&[(b, 0.9), (b, 0.9)], 0.3), vec![0]);
    }
}
