//! Test-time proposals: skeleton-gated anchors, fused scores, per-class
//! rotated NMS and mask assignment from the segmentation label map.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_offsets, max_extent_for, Anchor, BoxOffsets};
use crate::error::{Error, Result};
use crate::geometry::PixelSet;
use crate::maps::DenseMap;
use crate::rbox::{rotated_nms, RBox};
use crate::scene::Detection;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProposalConfig {
    /// Skeleton threshold for anchor placement.
    pub delta: f64,
    pub nms_iou: f64,
    /// Candidates scoring below this are dropped before NMS.
    pub score_floor: f64,
    pub max_detections: usize,
    /// Multiply the class probability by the skeleton value; off reproduces
    /// the class-probability-only ablation.
    pub skeleton_score: bool,
}

impl Default for ProposalConfig {
    fn default() -> Self {
        Self { delta: 0.02, nms_iou: 0.3, score_floor: 0.05, max_detections: 300, skeleton_score: true }
    }
}

impl ProposalConfig {
    pub fn validate(&self) -> Result<()> {
        let unit = |v: f64| v > 0.0 && v < 1.0;
        if !(unit(self.delta) && unit(self.nms_iou) && unit(self.score_floor)) || self.max_detections == 0 {
            return Err(Error::Config(format!("invalid proposal config {self:?}")));
        }
        Ok(())
    }
}

/// Per-pixel argmax over channels, ties to the lower channel.
pub fn label_map(seg: &DenseMap) -> Vec<usize> {
    seg.data()
        .chunks_exact(seg.channels())
        .map(|px| {
            let mut best = 0;
            for (c, &v) in px.iter().enumerate() {
                if v > px[best] {
                    best = c;
                }
            }
            best
        })
        .collect()
}

/// A decoded anchor before suppression.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Candidate {
    pub rbox: RBox,
    pub class_id: u32,
    pub score: f64,
    pub pixel: (usize, usize),
}

fn check_maps(skl: &DenseMap, seg: &DenseMap, boxes: &DenseMap) -> Result<usize> {
    let (h, w, _) = skl.shape();
    if skl.channels() != 1 || seg.height() != h || seg.width() != w || boxes.shape() != (h, w, 5) {
        return Err(Error::Shape(format!(
            "maps disagree: skl {:?}, seg {:?}, box {:?}",
            skl.shape(),
            seg.shape(),
            boxes.shape()
        )));
    }
    if seg.channels() < 3 {
        return Err(Error::Shape(format!("seg needs background, classes and overlap channels, has {}", seg.channels())));
    }
    Ok(seg.channels() - 2)
}

/// Every anchor's decoded box, class and fused score, in row-major order.
pub fn candidates(skl: &DenseMap, seg: &DenseMap, boxes: &DenseMap, cfg: &ProposalConfig) -> Result<Vec<Candidate>> {
    let n_cls = check_maps(skl, seg, boxes)?;
    let (h, w) = (skl.height(), skl.width());
    let bound = max_extent_for(h, w);
    let mut out = Vec::new();
    for i in 0..h {
        for j in 0..w {
            let s = skl.get(i, j, 0) as f64;
            if s < cfg.delta {
                continue;
            }
            let px = seg.pixel(i, j);
            let mut c = 1;
            for k in 2..=n_cls {
                if px[k] > px[c] {
                    c = k;
                }
            }
            let prob = px[c] as f64;
            let score = if cfg.skeleton_score { prob * s } else { prob };
            let rbox = decode_offsets(&BoxOffsets::from_slice(boxes.pixel(i, j)), &Anchor::at((i, j)), bound).rbox;
            out.push(Candidate { rbox, class_id: c as u32, score, pixel: (i, j) });
        }
    }
    Ok(out)
}

/// Survivors of per-class NMS, best first, truncated to `max_detections`.
pub fn suppress(cands: &[Candidate], cfg: &ProposalConfig) -> Vec<Candidate> {
    let mut classes: Vec<u32> = cands.iter().map(|c| c.class_id).collect();
    classes.sort_unstable();
    classes.dedup();
    let mut kept = Vec::new();
    for class in classes {
        let pool: Vec<&Candidate> = cands.iter().filter(|c| c.class_id == class && c.score >= cfg.score_floor).collect();
        let scored: Vec<(RBox, f64)> = pool.iter().map(|c| (c.rbox, c.score)).collect();
        kept.extend(rotated_nms(&scored, cfg.nms_iou).into_iter().map(|k| *pool[k]));
    }
    // stable: equal scores keep class-then-raster order
    kept.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap_or(Ordering::Equal));
    kept.truncate(cfg.max_detections);
    kept
}

/// Largest of the two normalized local coordinates; below 1 means inside.
fn normalized_distance(b: &RBox, x: f64, y: f64) -> f64 {
    let (u, v) = b.to_local(x, y);
    (u.abs() / (b.w / 2.0)).max(v.abs() / (b.h / 2.0))
}

/// Full pipeline from the three head maps to scored detections with masks.
///
/// A box of class `c` collects the pixels inside it labelled `c` or overlap.
/// A class pixel inside several boxes goes to the highest-scoring one, then
/// to the one it sits most centrally in; overlap pixels go to every box
/// containing them.
pub fn propose(skl: &DenseMap, seg: &DenseMap, boxes: &DenseMap, cfg: &ProposalConfig) -> Result<Vec<Detection>> {
    cfg.validate()?;
    let n_cls = check_maps(skl, seg, boxes)?;
    let overlap = n_cls + 1;
    let (h, w) = (skl.height(), skl.width());
    let kept = suppress(&candidates(skl, seg, boxes, cfg)?, cfg);
    let labels = label_map(seg);
    let mut masks: Vec<PixelSet> = vec![PixelSet::new(); kept.len()];
    for i in 0..h {
        for j in 0..w {
            let label = labels[i * w + j];
            if label == 0 {
                continue;
            }
            let (x, y) = (j as f64 + 0.5, i as f64 + 0.5);
            let inside = kept.iter().enumerate().filter(|(_, d)| d.rbox.contains(x, y, 0.0));
            if label == overlap {
                for (k, _) in inside {
                    masks[k].insert((i, j));
                }
                continue;
            }
            let winner = inside.filter(|(_, d)| d.class_id as usize == label).min_by(|(ka, a), (kb, b)| {
                b.score
                    .partial_cmp(&a.score)
                    .unwrap_or(Ordering::Equal)
                    .then(normalized_distance(&a.rbox, x, y).partial_cmp(&normalized_distance(&b.rbox, x, y)).unwrap_or(Ordering::Equal))
                    .then(ka.cmp(kb))
            });
            if let Some((k, _)) = winner {
                masks[k].insert((i, j));
            }
        }
    }
    Ok(kept
        .into_iter()
        .zip(masks)
        .filter(|(_, m)| !m.is_empty())
        .map(|(c, mask)| Detection { rbox: c.rbox, class_id: c.class_id, score: c.score, mask })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Polygon;
    use crate::scene::{Instance, Scene};
    use crate::skeleton::build_targets;

    fn rect(class_id: u32, x0: f64, y0: f64, x1: f64, y1: f64, h: usize, w: usize) -> Instance {
        let poly = Polygon::new(vec![[x0, y0], [x1, y0], [x1, y1], [x0, y1]]).unwrap();
        Instance::from_polygon(class_id, poly, h, w).unwrap()
    }

    #[test]
    fn empty_inputs_give_no_detections() {
        let skl = DenseMap::zeros(8, 8, 1);
        let mut seg = DenseMap::zeros(8, 8, 4);
        (0..8).for_each(|i| (0..8).for_each(|j| seg.set(i, j, 0, 1.0)));
        let boxes = DenseMap::zeros(8, 8, 5);
        assert!(propose(&skl, &seg, &boxes, &ProposalConfig::default()).unwrap().is_empty());
        let full = DenseMap::filled(8, 8, 1, 1.0);
        assert!(propose(&full, &seg, &boxes, &ProposalConfig::default()).unwrap().is_empty());
        assert!(propose(&skl, &seg, &DenseMap::zeros(8, 7, 5), &ProposalConfig::default()).is_err());
    }

    #[test]
    fn passthrough_recovers_boxes_and_masks() {
        let scene = Scene {
            height: 24,
            width: 32,
            instances: vec![rect(1, 2.0, 3.0, 14.0, 9.0, 24, 32), rect(2, 18.0, 2.0, 24.0, 20.0, 24, 32)],
        };
        let t = build_targets(&scene, 2).unwrap();
        let dets = propose(&t.skl, &t.seg, &t.boxes, &ProposalConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        for inst in &scene.instances {
            let gt = inst.rbox.canonicalize().unwrap();
            let d = dets.iter().find(|d| d.class_id == inst.class_id).unwrap();
            assert!(crate::rbox::rotated_iou(&d.rbox, &gt) > 0.9999, "{:?} vs {:?}", d.rbox, gt);
            assert_eq!(d.mask, inst.mask);
        }
    }

    #[test]
    fn overlap_pixels_are_shared() {
        let scene = Scene {
            height: 30,
            width: 30,
            instances: vec![rect(1, 3.0, 12.0, 27.0, 18.0, 30, 30), rect(2, 12.0, 3.0, 18.0, 27.0, 30, 30)],
        };
        let t = build_targets(&scene, 2).unwrap();
        let dets = propose(&t.skl, &t.seg, &t.boxes, &ProposalConfig::default()).unwrap();
        assert_eq!(dets.len(), 2);
        let shared: PixelSet = scene.instances[0].mask.intersection(&scene.instances[1].mask).copied().collect();
        assert_eq!(shared.len(), 36);
        for (d, inst) in dets.iter().zip([&scene.instances[0], &scene.instances[1]].iter().cycle()) {
            let gt = scene.instances.iter().find(|g| g.class_id == d.class_id).unwrap();
            assert_eq!(d.mask, gt.mask, "{inst:?}");
            assert!(shared.is_subset(&d.mask));
        }
    }

    #[test]
    fn masks_stay_inside_boxes_with_eligible_labels() {
        let scene = Scene {
            height: 20,
            width: 20,
            instances: vec![rect(1, 2.0, 2.0, 12.0, 7.0, 20, 20), rect(1, 2.0, 8.0, 12.0, 13.0, 20, 20)],
        };
        let t = build_targets(&scene, 2).unwrap();
        let dets = propose(&t.skl, &t.seg, &t.boxes, &ProposalConfig::default()).unwrap();
        let labels = label_map(&t.seg);
        for d in &dets {
            for &(i, j) in &d.mask {
                assert!(d.rbox.contains(j as f64 + 0.5, i as f64 + 0.5, 0.5));
                let l = labels[i * 20 + j];
                assert!(l == d.class_id as usize || l == 3);
            }
        }
        assert_eq!(dets.len(), 2);
    }

    #[test]
    fn lowering_skeleton_never_raises_rank() {
        let scene = Scene { height: 16, width: 16, instances: vec![rect(1, 2.0, 4.0, 14.0, 10.0, 16, 16)] };
        let t = build_targets(&scene, 2).unwrap();
        let cfg = ProposalConfig::default();
        let base = candidates(&t.skl, &t.seg, &t.boxes, &cfg).unwrap();
        let mut dimmed = t.skl.clone();
        let (i, j) = base[base.len() / 2].pixel;
        dimmed.set(i, j, 0, dimmed.get(i, j, 0) * 0.5);
        let after = candidates(&dimmed, &t.seg, &t.boxes, &cfg).unwrap();
        let k = base.iter().position(|c| c.pixel == (i, j)).unwrap();
        assert!(after[k].score < base[k].score);
        let rank = |cs: &[Candidate]| cs.iter().filter(|c| c.score > cs[k].score).count();
        assert!(rank(&after) >= rank(&base));
    }

    #[test]
    fn disabling_skeleton_score_uses_class_probability() {
        let scene = Scene { height: 16, width: 16, instances: vec![rect(2, 2.0, 4.0, 14.0, 10.0, 16, 16)] };
        let t = build_targets(&scene, 2).unwrap();
        let cfg = ProposalConfig { skeleton_score: false, ..ProposalConfig::default() };
        for c in candidates(&t.skl, &t.seg, &t.boxes, &cfg).unwrap() {
            let p = t.seg.get(c.pixel.0, c.pixel.1, 2) as f64;
            assert!(c.score == p || (c.class_id == 1 && p == 0.0));
        }
    }
}
