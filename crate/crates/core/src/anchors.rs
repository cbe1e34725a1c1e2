//! Skeleton-guided single-anchor placement and the five-parameter box codec.
//!
//! Each foreground pixel carries one 3×3 anchor at its center. Offsets are
//! `dx = (x - px)/3`, `dy = (y - py)/3`, `dw = ln(w/3)`, `dh = ln(h/3)` and the
//! absolute angle `dtheta = theta`.

use crate::geometry::{Pixel, PixelSet};
use crate::rbox::{wrap_half_turn, RBox, MIN_EXTENT};

pub const ANCHOR_SIZE: f64 = 3.0;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub px: f64,
    pub py: f64,
    pub size: f64,
}

impl Anchor {
    pub fn at(pixel: Pixel) -> Self {
        Self {
            px: pixel.1 as f64 + 0.5,
            py: pixel.0 as f64 + 0.5,
            size: ANCHOR_SIZE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxOffsets {
    pub dx: f64,
    pub dy: f64,
    pub dw: f64,
    pub dh: f64,
    pub dtheta: f64,
}

impl BoxOffsets {
    pub fn as_array(&self) -> [f64; 5] {
        [self.dx, self.dy, self.dw, self.dh, self.dtheta]
    }

    pub fn from_slice<T: Copy + Into<f64>>(v: &[T]) -> Self {
        Self {
            dx: v[0].into(),
            dy: v[1].into(),
            dw: v[2].into(),
            dh: v[3].into(),
            dtheta: v[4].into(),
        }
    }
}

/// One anchor per foreground pixel, row-major.
pub fn place_anchors(fg: &PixelSet) -> Vec<Anchor> {
    fg.iter().map(|&p| Anchor::at(p)).collect()
}

pub fn encode_offsets(gt: &RBox, anchor: &Anchor) -> BoxOffsets {
    BoxOffsets {
        dx: (gt.x - anchor.px) / anchor.size,
        dy: (gt.y - anchor.py) / anchor.size,
        dw: (gt.w / anchor.size).ln(),
        dh: (gt.h / anchor.size).ln(),
        dtheta: gt.theta,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Decoded {
    pub rbox: RBox,
    /// An extent hit the size bound (or the degenerate floor) and was clamped.
    pub clamped: bool,
}

/// The inverse of [`encode_offsets`] without canonicalization, plus which
/// coordinates stayed unclamped (their gradients pass through).
pub(crate) fn decode_raw(off: &BoxOffsets, anchor: &Anchor, max_extent: f64) -> (RBox, [bool; 2]) {
    let s = anchor.size;
    let extent = |d: f64| {
        let v = s * d.exp();
        if v.is_nan() {
            (max_extent, false)
        } else if v > max_extent {
            (max_extent, false)
        } else if v < MIN_EXTENT {
            (MIN_EXTENT, false)
        } else {
            (v, true)
        }
    };
    let (w, w_free) = extent(off.dw);
    let (h, h_free) = extent(off.dh);
    (
        RBox::new(anchor.px + s * off.dx, anchor.py + s * off.dy, w, h, off.dtheta),
        [w_free, h_free],
    )
}

/// Decodes and canonicalizes. Extents are clamped into `[MIN_EXTENT, max_extent]`,
/// where callers pass `4·max(H, W)`.
pub fn decode_offsets(off: &BoxOffsets, anchor: &Anchor, max_extent: f64) -> Decoded {
    let (mut b, free) = decode_raw(off, anchor, max_extent);
    b.theta = wrap_half_turn(b.theta);
    if !b.x.is_finite() || !b.y.is_finite() || !b.theta.is_finite() {
        b.x = if b.x.is_finite() { b.x } else { anchor.px };
        b.y = if b.y.is_finite() { b.y } else { anchor.py };
        b.theta = if b.theta.is_finite() { b.theta } else { 0.0 };
    }
    let rbox = b.canonicalize().expect("decoded extents are positive");
    Decoded {
        rbox,
        clamped: !(free[0] && free[1]),
    }
}

pub fn max_extent_for(height: usize, width: usize) -> f64 {
    4.0 * height.max(width) as f64
}
