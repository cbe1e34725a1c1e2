//! Ground-truth synthesis: thinning, Gaussian skeleton heatmaps and the
//! skeleton / segmentation / box supervision maps.

use crate::anchors::{encode_offsets, Anchor};
use crate::error::{Error, Result};
use crate::geometry::{connected_components, min_area_rbox, pixel_corners, Pixel, PixelSet};
use crate::maps::DenseMap;
use crate::rbox::RBox;
use crate::scene::{Instance, Scene};

pub const DEFAULT_DELTA: f32 = 0.02;

/// Gaussians are evaluated out to this many bandwidths; beyond it the value is
/// below 2e-8 and stored as zero.
const GAUSS_CUTOFF_SIGMAS: f64 = 6.0;

#[derive(Debug, Clone, PartialEq)]
pub struct TargetMaps {
    /// H×W×1 skeleton heatmap in [0, 1].
    pub skl: DenseMap,
    /// H×W×(n_cls + 2) one-hot: background, classes, overlap.
    pub seg: DenseMap,
    /// H×W×5 encoded offsets of the owner's box, zero where unowned.
    pub boxes: DenseMap,
    /// H×W×1 owning instance index, −1 where no instance covers the pixel.
    pub owner: DenseMap,
    /// Canonical box per instance, indexed like `owner`.
    pub instance_boxes: Vec<RBox>,
    pub n_cls: usize,
}

impl TargetMaps {
    pub fn owner_at(&self, i: usize, j: usize) -> Option<usize> {
        let v = self.owner.get(i, j, 0);
        (v >= 0.0).then_some(v as usize)
    }

    pub fn overlap_channel(&self) -> usize {
        self.n_cls + 1
    }
}

struct Bitmap {
    h: usize,
    w: usize,
    bits: Vec<bool>,
}

impl Bitmap {
    fn from_set(mask: &PixelSet, h: usize, w: usize) -> Self {
        let mut bits = vec![false; h * w];
        for &(i, j) in mask {
            bits[i * w + j] = true;
        }
        Self { h, w, bits }
    }

    #[inline]
    fn at(&self, i: i64, j: i64) -> bool {
        i >= 0 && j >= 0 && (i as usize) < self.h && (j as usize) < self.w && self.bits[i as usize * self.w + j as usize]
    }

    /// P2..P9 clockwise from north.
    fn neighbours(&self, i: usize, j: usize) -> [bool; 8] {
        let (i, j) = (i as i64, j as i64);
        [
            self.at(i - 1, j),
            self.at(i - 1, j + 1),
            self.at(i, j + 1),
            self.at(i + 1, j + 1),
            self.at(i + 1, j),
            self.at(i + 1, j - 1),
            self.at(i, j - 1),
            self.at(i - 1, j - 1),
        ]
    }
}

/// One sub-iteration. `min_neighbours` is 2 for Zhang–Suen and 3 for the
/// Lü–Wang variant, which keeps two-pixel-thick diagonals alive.
fn zhang_suen_pass(bm: &mut Bitmap, first: bool, min_neighbours: usize) -> bool {
    let mut doomed = Vec::new();
    for i in 0..bm.h {
        for j in 0..bm.w {
            if !bm.bits[i * bm.w + j] {
                continue;
            }
            let n = bm.neighbours(i, j);
            let b = n.iter().filter(|&&v| v).count();
            if !(min_neighbours..=6).contains(&b) {
                continue;
            }
            let a = (0..8).filter(|&k| !n[k] && n[(k + 1) % 8]).count();
            if a != 1 {
                continue;
            }
            let (p2, p4, p6, p8) = (n[0], n[2], n[4], n[6]);
            let keep = if first {
                (p2 && p4 && p6) || (p4 && p6 && p8)
            } else {
                (p2 && p4 && p8) || (p2 && p6 && p8)
            };
            if !keep {
                doomed.push(i * bm.w + j);
            }
        }
    }
    for &k in &doomed {
        bm.bits[k] = false;
    }
    !doomed.is_empty()
}

fn thin_bitmap(mask: &PixelSet, height: usize, width: usize, min_neighbours: usize) -> PixelSet {
    let mut bm = Bitmap::from_set(mask, height, width);
    loop {
        let a = zhang_suen_pass(&mut bm, true, min_neighbours);
        let b = zhang_suen_pass(&mut bm, false, min_neighbours);
        if !a && !b {
            break;
        }
    }
    mask.iter().copied().filter(|&(i, j)| bm.bits[i * width + j]).collect()
}

/// Zhang–Suen thinning. Plain Zhang–Suen can collapse a diagonal band to
/// a point or nothing, so a component whose skeleton is shorter than half its
/// elongation (box length minus width) is thinned again with the Lü–Wang
/// rule. A component that still vanishes (a 2×2 block, say) keeps its most
/// interior pixel, so every component ends with at least one skeleton pixel.
pub fn thin_mask(mask: &PixelSet, height: usize, width: usize) -> PixelSet {
    if mask.is_empty() {
        return PixelSet::new();
    }
    let zs = thin_bitmap(mask, height, width, 2);
    let mut out = PixelSet::new();
    for comp in connected_components(mask) {
        let comp_set: PixelSet = comp.iter().copied().collect();
        let mut sk: PixelSet = comp_set.intersection(&zs).copied().collect();
        let elongation = min_area_rbox(&pixel_corners(&comp_set)).map_or(0.0, |b| b.w - b.h);
        if (sk.len() as f64) < elongation / 2.0 {
            let retry = thin_bitmap(&comp_set, height, width, 3);
            if retry.len() > sk.len() {
                sk = retry;
            }
        }
        if sk.is_empty() {
            let deepest = comp
                .iter()
                .copied()
                .map(|p| (distance_to_outside(mask, p, height, width), p))
                .fold(None::<(f64, Pixel)>, |best, cur| match best {
                    Some(b) if b.0 >= cur.0 => Some(b),
                    _ => Some(cur),
                })
                .expect("component is nonempty")
                .1;
            sk.insert(deepest);
        }
        out.extend(sk);
    }
    out
}

/// Euclidean distance from `p`'s center to the nearest pixel center not in
/// `mask`; pixels beyond the image border count as outside.
pub fn distance_to_outside(mask: &PixelSet, p: Pixel, height: usize, width: usize) -> f64 {
    let (pi, pj) = (p.0 as i64, p.1 as i64);
    let mut best = f64::INFINITY;
    let max_r = (height.max(width) + 1) as i64;
    for r in 1..=max_r {
        // nothing in ring r can beat a distance of at most r
        if (r as f64 - 1.0) >= best {
            break;
        }
        for di in -r..=r {
            for dj in -r..=r {
                if di.abs() != r && dj.abs() != r {
                    continue;
                }
                let (i, j) = (pi + di, pj + dj);
                let outside = i < 0
                    || j < 0
                    || i >= height as i64
                    || j >= width as i64
                    || !mask.contains(&(i as usize, j as usize));
                if outside {
                    best = best.min(((di * di + dj * dj) as f64).sqrt());
                }
            }
        }
    }
    best
}

/// Per-instance skeleton and its Gaussian field (row-major H·W values).
#[derive(Debug, Clone)]
pub struct SkeletonField {
    pub skeleton: PixelSet,
    pub values: Vec<f32>,
}

/// `value(p) = max_s exp(-|p - s|² / (2 σ_s²))` over skeleton pixels `s`, with
/// `σ_s = max(1, d_s / 3)` and `d_s` the distance from `s` to the background.
pub fn instance_field(mask: &PixelSet, height: usize, width: usize) -> SkeletonField {
    let skeleton = thin_mask(mask, height, width);
    let mut values = vec![0.0f32; height * width];
    for &s in &skeleton {
        let d = distance_to_outside(mask, s, height, width);
        let sigma = (d / 3.0).max(1.0);
        let reach = (GAUSS_CUTOFF_SIGMAS * sigma).ceil() as i64;
        let (si, sj) = (s.0 as i64, s.1 as i64);
        for i in (si - reach).max(0)..=(si + reach).min(height as i64 - 1) {
            for j in (sj - reach).max(0)..=(sj + reach).min(width as i64 - 1) {
                let d2 = ((i - si).pow(2) + (j - sj).pow(2)) as f64;
                let v = (-d2 / (2.0 * sigma * sigma)).exp() as f32;
                let slot = &mut values[i as usize * width + j as usize];
                if v > *slot {
                    *slot = v;
                }
            }
        }
    }
    for &(i, j) in &skeleton {
        values[i * width + j] = 1.0;
    }
    SkeletonField { skeleton, values }
}

pub fn render_skeleton(instances: &[Instance], height: usize, width: usize) -> DenseMap {
    let mut out = DenseMap::zeros(height, width, 1);
    for inst in instances {
        let f = instance_field(&inst.mask, height, width);
        for (o, v) in out.data_mut().iter_mut().zip(&f.values) {
            *o = o.max(*v);
        }
    }
    out
}

/// Pixels with skeleton value at least `delta`.
pub fn foreground(skl: &DenseMap, delta: f32) -> PixelSet {
    let mut out = PixelSet::new();
    for i in 0..skl.height() {
        for j in 0..skl.width() {
            if skl.get(i, j, 0) >= delta {
                out.insert((i, j));
            }
        }
    }
    out
}

pub fn build_targets(scene: &Scene, n_cls: usize) -> Result<TargetMaps> {
    for inst in &scene.instances {
        if inst.class_id == 0 || inst.class_id as usize > n_cls {
            return Err(Error::ClassOutOfRange {
                class_id: inst.class_id,
                n_cls,
            });
        }
    }
    let (h, w) = (scene.height, scene.width);
    let channels = n_cls + 2;
    let fields: Vec<SkeletonField> = scene
        .instances
        .iter()
        .map(|inst| instance_field(&inst.mask, h, w))
        .collect();
    let instance_boxes: Vec<RBox> = scene
        .instances
        .iter()
        .map(|inst| inst.rbox.canonicalize())
        .collect::<Result<_>>()?;

    let mut skl = DenseMap::zeros(h, w, 1);
    for f in &fields {
        for (o, v) in skl.data_mut().iter_mut().zip(&f.values) {
            *o = o.max(*v);
        }
    }

    let mut coverage = vec![0u32; h * w];
    let mut owner_idx: Vec<Option<usize>> = vec![None; h * w];
    for (k, inst) in scene.instances.iter().enumerate() {
        for &(i, j) in &inst.mask {
            let p = i * w + j;
            coverage[p] += 1;
            owner_idx[p] = match owner_idx[p] {
                Some(o) if fields[o].values[p] >= fields[k].values[p] => Some(o),
                _ => Some(k),
            };
        }
    }

    let mut seg = DenseMap::zeros(h, w, channels);
    let mut owner = DenseMap::filled(h, w, 1, -1.0);
    let mut boxes = DenseMap::zeros(h, w, 5);
    for i in 0..h {
        for j in 0..w {
            let p = i * w + j;
            let channel = match coverage[p] {
                0 => 0,
                1 => scene.instances[owner_idx[p].unwrap()].class_id as usize,
                _ => n_cls + 1,
            };
            seg.set(i, j, channel, 1.0);
            if let Some(o) = owner_idx[p] {
                owner.set(i, j, 0, o as f32);
                let off = encode_offsets(&instance_boxes[o], &Anchor::at((i, j)));
                for (slot, v) in boxes.pixel_mut(i, j).iter_mut().zip(off.as_array()) {
                    *slot = v as f32;
                }
            }
        }
    }
    Ok(TargetMaps {
        skl,
        seg,
        boxes,
        owner,
        instance_boxes,
        n_cls,
    })
}
