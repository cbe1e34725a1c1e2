//! Flips and quarter-turn rotations applied consistently to images, target
//! maps and scenes.
//!
//! A quarter turn maps the point `(x, y)` of an H×W image to `(H − y, x)` of
//! a W×H image (pixel `(i, j)` to `(j, H − 1 − i)`) and adds π/2 to box
//! angles. A flip maps `(x, y)` to `(W − x, y)` and negates angles.

use std::f64::consts::FRAC_PI_2;

use rand::Rng;

use crate::anchors::{encode_offsets, Anchor};
use crate::error::Result;
use crate::geometry::{Pixel, PixelSet, Polygon};
use crate::maps::Grid;
use crate::rbox::RBox;
use crate::scene::{Instance, Scene};
use crate::skeleton::TargetMaps;

/// Horizontal flip (applied first) followed by `quarter_turns` rotations.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct Dihedral {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Dihedral {
    pub const IDENTITY: Dihedral = Dihedral { flip: false, quarter_turns: 0 };

    pub fn all() -> impl Iterator<Item = Dihedral> {
        (0..8).map(|k| Dihedral { flip: k >= 4, quarter_turns: (k % 4) as u8 })
    }

    pub fn random(rng: &mut impl Rng) -> Self {
        Dihedral { flip: rng.random_bool(0.5), quarter_turns: rng.random_range(0..4) }
    }

    fn turns(&self) -> u8 {
        self.quarter_turns % 4
    }

    pub fn output_dims(&self, h: usize, w: usize) -> (usize, usize) {
        if self.turns() % 2 == 1 {
            (w, h)
        } else {
            (h, w)
        }
    }

    pub fn pixel(&self, (mut i, mut j): Pixel, h: usize, w: usize) -> Pixel {
        let (mut h, mut w) = (h, w);
        if self.flip {
            j = w - 1 - j;
        }
        for _ in 0..self.turns() {
            (i, j) = (j, h - 1 - i);
            (h, w) = (w, h);
        }
        (i, j)
    }

    pub fn point(&self, [mut x, mut y]: [f64; 2], h: usize, w: usize) -> [f64; 2] {
        let (mut h, mut w) = (h as f64, w as f64);
        if self.flip {
            x = w - x;
        }
        for _ in 0..self.turns() {
            (x, y) = (h - y, x);
            (h, w) = (w, h);
        }
        [x, y]
    }

    pub fn angle(&self, theta: f64) -> f64 {
        let t = if self.flip { -theta } else { theta };
        t + FRAC_PI_2 * self.turns() as f64
    }

    /// Transformed box in canonical form.
    pub fn rbox(&self, b: &RBox, h: usize, w: usize) -> Result<RBox> {
        let [x, y] = self.point([b.x, b.y], h, w);
        RBox::new(x, y, b.w, b.h, self.angle(b.theta)).canonicalize()
    }

    pub fn grid<T: Copy + Default>(&self, g: &Grid<T>) -> Grid<T> {
        let (h, w, c) = g.shape();
        let (ho, wo) = self.output_dims(h, w);
        let mut out = Grid::zeros(ho, wo, c);
        for i in 0..h {
            for j in 0..w {
                let (a, b) = self.pixel((i, j), h, w);
                out.pixel_mut(a, b).copy_from_slice(g.pixel(i, j));
            }
        }
        out
    }

    pub fn mask(&self, m: &PixelSet, h: usize, w: usize) -> PixelSet {
        m.iter().map(|&p| self.pixel(p, h, w)).collect()
    }

    pub fn scene(&self, s: &Scene) -> Result<Scene> {
        let (h, w) = (s.height, s.width);
        let (ho, wo) = self.output_dims(h, w);
        let instances = s
            .instances
            .iter()
            .map(|inst| {
                let mut verts: Vec<[f64; 2]> = inst.polygon.vertices().iter().map(|&p| self.point(p, h, w)).collect();
                if self.flip {
                    verts.reverse();
                }
                Ok(Instance {
                    class_id: inst.class_id,
                    polygon: Polygon::new(verts)?,
                    mask: self.mask(&inst.mask, h, w),
                    rbox: self.rbox(&inst.rbox, h, w)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Scene { height: ho, width: wo, instances })
    }

    /// Permutes the dense maps and re-encodes box offsets against the
    /// transformed boxes at each pixel's new anchor.
    pub fn targets(&self, t: &TargetMaps) -> Result<TargetMaps> {
        let (h, w) = (t.owner.height(), t.owner.width());
        let instance_boxes: Vec<RBox> = t.instance_boxes.iter().map(|b| self.rbox(b, h, w)).collect::<Result<_>>()?;
        let owner = self.grid(&t.owner);
        let mut boxes = Grid::zeros(owner.height(), owner.width(), 5);
        for i in 0..owner.height() {
            for j in 0..owner.width() {
                let o = owner.get(i, j, 0);
                if o >= 0.0 {
                    let off = encode_offsets(&instance_boxes[o as usize], &Anchor::at((i, j)));
                    for (slot, v) in boxes.pixel_mut(i, j).iter_mut().zip(off.as_array()) {
                        *slot = v as f32;
                    }
                }
            }
        }
        Ok(TargetMaps {
            skl: self.grid(&t.skl),
            seg: self.grid(&t.seg),
            boxes,
            owner,
            instance_boxes,
            n_cls: t.n_cls,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::anchors::decode_offsets;
    use crate::anchors::max_extent_for;
    use crate::rbox::gauss_distance;
    use crate::skeleton::build_targets;
    use crate::train::synth::{gen_dataset, SynthConfig};

    #[test]
    fn quarter_turn_moves_pixels_and_angles() {
        let r = Dihedral { flip: false, quarter_turns: 1 };
        assert_eq!(r.pixel((0, 0), 4, 6), (0, 3));
        assert_eq!(r.pixel((3, 5), 4, 6), (5, 0));
        assert_eq!(r.output_dims(4, 6), (6, 4));
        // pixel centres follow the point map
        for (i, j) in [(0, 0), (1, 4), (3, 2)] {
            let [x, y] = r.point([j as f64 + 0.5, i as f64 + 0.5], 4, 6);
            assert_eq!(r.pixel((i, j), 4, 6), ((y - 0.5) as usize, (x - 0.5) as usize));
        }
        let b = r.rbox(&RBox::new(2.0, 1.0, 6.0, 2.0, 0.3), 4, 6).unwrap();
        assert!((b.theta - (0.3 + FRAC_PI_2 - std::f64::consts::PI)).abs() < 1e-12);
        assert_eq!((b.x, b.y, b.w, b.h), (3.0, 2.0, 6.0, 2.0));
    }

    #[test]
    fn group_laws() {
        let g = Grid::from_vec(3, 5, 2, (0..30).map(|v| v as f32).collect()).unwrap();
        let r = Dihedral { flip: false, quarter_turns: 1 };
        let four = (0..4).fold(g.clone(), |acc, _| r.grid(&acc));
        assert_eq!(four, g);
        let f = Dihedral { flip: true, quarter_turns: 0 };
        assert_eq!(f.grid(&f.grid(&g)), g);
        let images: std::collections::HashSet<Vec<u32>> =
            Dihedral::all().map(|d| d.grid(&g.map(|v| v as u32)).into_vec()).collect();
        assert_eq!(images.len(), 8);
    }

    #[test]
    fn targets_commute_with_transforms() {
        let cfg = SynthConfig { cross_probability: 0.5, ..SynthConfig::default() };
        for (_, scene) in gen_dataset(&cfg, 6, 3).unwrap() {
            let t = build_targets(&scene, 2).unwrap();
            for d in Dihedral::all() {
                let moved = build_targets(&d.scene(&scene).unwrap(), 2).unwrap();
                let mapped = d.targets(&t).unwrap();
                assert_eq!(moved.seg, mapped.seg, "{d:?}");
                for (a, b) in moved.instance_boxes.iter().zip(&mapped.instance_boxes) {
                    assert!(gauss_distance(a, b) < 1e-8, "{d:?} {a:?} {b:?}");
                }
                // decoded boxes agree wherever both assign the same owner
                let bound = max_extent_for(64, 64);
                for i in 0..64 {
                    for j in 0..64 {
                        if let (Some(p), Some(q)) = (moved.owner_at(i, j), mapped.owner_at(i, j)) {
                            if p != q {
                                continue;
                            }
                            let anchor = Anchor::at((i, j));
                            let a = decode_offsets(&crate::anchors::BoxOffsets::from_slice(moved.boxes.pixel(i, j)), &anchor, bound).rbox;
                            let b = decode_offsets(&crate::anchors::BoxOffsets::from_slice(mapped.boxes.pixel(i, j)), &anchor, bound).rbox;
                            for (u, v) in a.as_array().iter().zip(b.as_array()) {
                                assert!((u - v).abs() < 1e-4, "{a:?} {b:?}");
                            }
                        }
                    }
                }
            }
        }
    }
}
