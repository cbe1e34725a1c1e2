//! mAP at rotated-box IoU 0.5 and panoptic quality over masks.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{io_err, Error, Result};
use crate::geometry::PixelSet;
use crate::rbox::{rotated_iou, RBox};
use crate::scene::{detections_from_json, read_annotation, Detection, Scene};

pub const AP_IOU: f64 = 0.5;
pub const PQ_IOU: f64 = 0.5;

/// A scored box tagged with the image it came from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoredBox {
    pub image: usize,
    pub rbox: RBox,
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtBox {
    pub image: usize,
    pub rbox: RBox,
}

/// Per-detection TP flags in descending-score order, ties kept in input order.
pub fn match_detections(dets: &[ScoredBox], gts: &[GtBox]) -> Vec<bool> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap_or(Ordering::Equal));
    let mut taken = vec![false; gts.len()];
    order
        .into_iter()
        .map(|k| {
            let d = &dets[k];
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] || gt.image != d.image {
                    continue;
                }
                let iou = rotated_iou(&d.rbox, &gt.rbox);
                if iou >= AP_IOU && best.is_none_or(|(_, b)| iou > b) {
                    best = Some((g, iou));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
            }
            best.is_some()
        })
        .collect()
}

/// All-point interpolated AP; `None` when there is nothing to score.
pub fn average_precision(dets: &[ScoredBox], gts: &[GtBox]) -> Option<f64> {
    if gts.is_empty() {
        return if dets.is_empty() { None } else { Some(0.0) };
    }
    let flags = match_detections(dets, gts);
    let n_gt = gts.len() as f64;
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = vec![0.0];
    let mut precision = vec![1.0];
    for hit in flags {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt);
        precision.push(tp / (tp + fp));
    }
    for k in (0..precision.len() - 1).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    Some((1..recall.len()).map(|k| (recall[k] - recall[k - 1]) * precision[k]).sum())
}

pub fn mask_iou(a: &PixelSet, b: &PixelSet) -> f64 {
    let (small, large) = if a.len() <= b.len() { (a, b) } else { (b, a) };
    let inter = small.iter().filter(|p| large.contains(p)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}

/// Pred/GT pairs with mask IoU above the PQ threshold, as `(pred, gt, iou)`.
///
/// Within disjoint mask sets such pairs are unique. Shared overlap pixels can
/// in principle break that, so conflicts resolve to the higher IoU.
pub fn match_masks(preds: &[&PixelSet], gts: &[&PixelSet]) -> Vec<(usize, usize, f64)> {
    let mut pairs = Vec::new();
    for (p, pm) in preds.iter().enumerate() {
        for (g, gm) in gts.iter().enumerate() {
            let iou = mask_iou(pm, gm);
            if iou > PQ_IOU {
                pairs.push((p, g, iou));
            }
        }
    }
    pairs.sort_by(|a, b| b.2.partial_cmp(&a.2).unwrap_or(Ordering::Equal));
    let mut pred_used = vec![false; preds.len()];
    let mut gt_used = vec![false; gts.len()];
    pairs.retain(|&(p, g, _)| {
        let free = !pred_used[p] && !gt_used[g];
        if free {
            pred_used[p] = true;
            gt_used[g] = true;
        }
        free
    });
    debug_assert!(pairs.iter().all(|&(p, g, _)| pred_used[p] && gt_used[g]));
    pairs
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PqStats {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub iou_sum: f64,
}

impl PqStats {
    pub fn from_masks(preds: &[&PixelSet], gts: &[&PixelSet]) -> Self {
        let m = match_masks(preds, gts);
        Self { tp: m.len(), fp: preds.len() - m.len(), fn_: gts.len() - m.len(), iou_sum: m.iter().map(|t| t.2).sum() }
    }

    pub fn merge(&mut self, o: &PqStats) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
        self.iou_sum += o.iou_sum;
    }

    fn denom(&self) -> f64 {
        self.tp as f64 + 0.5 * (self.fp + self.fn_) as f64
    }

    pub fn is_empty(&self) -> bool {
        self.tp + self.fp + self.fn_ == 0
    }

    pub fn dq(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.tp as f64 / self.denom()
        }
    }

    pub fn sq(&self) -> f64 {
        if self.tp == 0 {
            0.0
        } else {
            self.iou_sum / self.tp as f64
        }
    }

    pub fn pq(&self) -> f64 {
        if self.is_empty() {
            0.0
        } else {
            self.iou_sum / self.denom()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassReport {
    pub ap: f64,
    pub pq: f64,
    pub dq: f64,
    pub sq: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub map50: f64,
    pub mpq: f64,
    pub bpq: f64,
    pub per_class: BTreeMap<u32, ClassReport>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Accumulates matches over a set of images; metrics are dataset-level.
#[derive(Debug, Clone, Default)]
pub struct Evaluator {
    images: usize,
    dets: BTreeMap<u32, Vec<ScoredBox>>,
    gts: BTreeMap<u32, Vec<GtBox>>,
    pq: BTreeMap<u32, PqStats>,
    agnostic: PqStats,
}

impl Evaluator {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add_image(&mut self, gt: &Scene, dets: &[Detection]) -> Result<()> {
        let image = self.images;
        self.images += 1;
        let mut classes: BTreeSet<u32> = BTreeSet::new();
        for inst in &gt.instances {
            classes.insert(inst.class_id);
            self.gts.entry(inst.class_id).or_default().push(GtBox { image, rbox: inst.rbox.canonicalize()? });
        }
        for d in dets {
            if !(0.0..=1.0).contains(&d.score) {
                return Err(Error::Shape(format!("score {} outside [0, 1]", d.score)));
            }
            classes.insert(d.class_id);
            self.dets.entry(d.class_id).or_default().push(ScoredBox { image, rbox: d.rbox, score: d.score });
        }
        for c in classes {
            let p: Vec<&PixelSet> = dets.iter().filter(|d| d.class_id == c).map(|d| &d.mask).collect();
            let g: Vec<&PixelSet> = gt.instances.iter().filter(|i| i.class_id == c).map(|i| &i.mask).collect();
            self.pq.entry(c).or_default().merge(&PqStats::from_masks(&p, &g));
        }
        let p: Vec<&PixelSet> = dets.iter().map(|d| &d.mask).collect();
        let g: Vec<&PixelSet> = gt.instances.iter().map(|i| &i.mask).collect();
        self.agnostic.merge(&PqStats::from_masks(&p, &g));
        Ok(())
    }

    pub fn report(&self) -> EvalReport {
        let classes: BTreeSet<u32> = self.dets.keys().chain(self.gts.keys()).copied().collect();
        let mut per_class = BTreeMap::new();
        let mut aps = Vec::new();
        for c in classes {
            let ap = average_precision(self.dets.get(&c).map_or(&[][..], |v| v), self.gts.get(&c).map_or(&[][..], |v| v));
            let Some(ap) = ap else { continue };
            aps.push(ap);
            let s = self.pq.get(&c).copied().unwrap_or_default();
            per_class.insert(c, ClassReport { ap, pq: s.pq(), dq: s.dq(), sq: s.sq(), tp: s.tp, fp: s.fp, fn_: s.fn_ });
        }
        let mean = |v: Vec<f64>| if v.is_empty() { 0.0 } else { v.iter().sum::<f64>() / v.len() as f64 };
        EvalReport {
            map50: mean(aps),
            mpq: mean(per_class.values().map(|r| r.pq).collect()),
            bpq: self.agnostic.pq(),
            per_class,
        }
    }
}

/// Evaluates paired (ground truth, detections) images.
pub fn evaluate_scenes<'a>(pairs: impl IntoIterator<Item = (&'a Scene, &'a [Detection])>) -> Result<EvalReport> {
    let mut ev = Evaluator::new();
    for (gt, dets) in pairs {
        ev.add_image(gt, dets)?;
    }
    Ok(ev.report())
}

fn json_stems(dir: &Path) -> Result<BTreeMap<String, PathBuf>> {
    let mut out = BTreeMap::new();
    for entry in std::fs::read_dir(dir).map_err(io_err(dir))? {
        let path = entry.map_err(io_err(dir))?.path();
        if path.extension().is_some_and(|e| e == "json") {
            // Skip the config echoes that `synth` and `propose` leave beside their outputs.
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()).filter(|s| *s != "config" && !s.ends_with(".config")) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

fn load_pair(pred: &Path, gt: &Path) -> Result<(Scene, Vec<Detection>)> {
    let ann = read_annotation(gt)?;
    let text = std::fs::read_to_string(pred).map_err(io_err(pred))?;
    let dets = detections_from_json(&text, ann.height, ann.width)?;
    Ok((Scene::from_annotation(&ann)?, dets))
}

/// Evaluates a detections file against an annotation file, or two directories
/// of JSON files paired by file stem.
pub fn evaluate(pred: &Path, gt: &Path) -> Result<EvalReport> {
    let pairs = if pred.is_dir() || gt.is_dir() {
        if !(pred.is_dir() && gt.is_dir()) {
            return Err(Error::Config("prediction and ground truth must both be files or both directories".into()));
        }
        let (p, g) = (json_stems(pred)?, json_stems(gt)?);
        let odd: Vec<String> = p.keys().filter(|k| !g.contains_key(*k)).chain(g.keys().filter(|k| !p.contains_key(*k))).cloned().collect();
        if !odd.is_empty() {
            return Err(Error::IdMismatch(odd));
        }
        p.iter().map(|(k, path)| load_pair(path, &g[k])).collect::<Result<Vec<_>>>()?
    } else {
        vec![load_pair(pred, gt)?]
    };
    evaluate_scenes(pairs.iter().map(|(s, d)| (s, d.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn b(x: f64, y: f64, w: f64, h: f64) -> RBox {
        RBox { x, y, w, h, theta: 0.0 }
    }

    fn sb(image: usize, rbox: RBox, score: f64) -> ScoredBox {
        ScoredBox { image, rbox, score }
    }

    #[test]
    fn ap_examples() {
        let g = b(10.0, 10.0, 10.0, 4.0);
        let gts = [GtBox { image: 0, rbox: g }];
        assert_eq!(average_precision(&[sb(0, g, 0.9)], &gts), Some(1.0));
        // IoU 0.8 TP at 0.9, disjoint FP at 0.8
        let tp = b(11.0, 10.0, 8.0, 4.0);
        assert!((rotated_iou(&tp, &g) - 0.8).abs() < 1e-9);
        assert_eq!(average_precision(&[sb(0, tp, 0.9), sb(0, b(40.0, 40.0, 10.0, 4.0), 0.8)], &gts), Some(1.0));
        // FP ranked first halves precision at full recall
        assert_eq!(average_precision(&[sb(0, tp, 0.7), sb(0, b(40.0, 40.0, 10.0, 4.0), 0.8)], &gts), Some(0.5));
        // IoU 0.49 misses
        let miss = b(10.0, 10.0, 10.0 * 0.49, 4.0);
        assert!(rotated_iou(&miss, &g) < 0.5);
        assert_eq!(average_precision(&[sb(0, miss, 0.9)], &gts), Some(0.0));
        // another image's GT never matches
        assert_eq!(average_precision(&[sb(1, g, 0.9)], &gts), Some(0.0));
        assert_eq!(average_precision(&[], &gts), Some(0.0));
        assert_eq!(average_precision(&[sb(0, g, 0.9)], &[]), Some(0.0));
        assert_eq!(average_precision(&[], &[]), None);
    }

    #[test]
    fn greedy_match_prefers_highest_iou() {
        let gts = [GtBox { image: 0, rbox: b(10.0, 10.0, 10.0, 4.0) }, GtBox { image: 0, rbox: b(12.0, 10.0, 10.0, 4.0) }];
        let flags = match_detections(&[sb(0, b(12.0, 10.0, 10.0, 4.0), 0.9), sb(0, b(10.0, 10.0, 10.0, 4.0), 0.5)], &gts);
        assert_eq!(flags, vec![true, true]);
    }

    fn square(i0: usize, j0: usize, n: usize) -> PixelSet {
        (i0..i0 + n).flat_map(|i| (j0..j0 + n).map(move |j| (i, j))).collect()
    }

    #[test]
    fn pq_examples() {
        let g1 = square(0, 0, 10);
        let p1: PixelSet = g1.iter().copied().filter(|&(i, _)| i < 8).collect();
        let g2 = square(20, 20, 4);
        let fp = square(40, 40, 3);
        let s = PqStats::from_masks(&[&p1, &fp], &[&g1, &g2]);
        assert_eq!((s.tp, s.fp, s.fn_), (1, 1, 1));
        assert!((s.pq() - 0.4).abs() < 1e-12);
        assert!((s.sq() - 0.8).abs() < 1e-12);
        assert!((s.dq() - 0.5).abs() < 1e-12);
        let same = PqStats::from_masks(&[&g1, &g2], &[&g1, &g2]);
        assert_eq!((same.pq(), same.sq(), same.dq()), (1.0, 1.0, 1.0));
        let none = PqStats::from_masks(&[], &[&g1]);
        assert_eq!((none.pq(), none.fn_), (0.0, 1));
    }

    fn brute_force_pq(preds: &[PixelSet], gts: &[PixelSet]) -> (usize, f64) {
        // best over all injective assignments, counting only pairs above threshold
        fn go(p: usize, preds: &[PixelSet], gts: &[PixelSet], used: &mut Vec<bool>) -> (usize, f64) {
            if p == preds.len() {
                return (0, 0.0);
            }
            let mut best = go(p + 1, preds, gts, used);
            for g in 0..gts.len() {
                let iou = mask_iou(&preds[p], &gts[g]);
                if used[g] || iou <= PQ_IOU {
                    continue;
                }
                used[g] = true;
                let (n, s) = go(p + 1, preds, gts, used);
                used[g] = false;
                if n + 1 > best.0 || (n + 1 == best.0 && s + iou > best.1) {
                    best = (n + 1, s + iou);
                }
            }
            best
        }
        go(0, preds, gts, &mut vec![false; gts.len()])
    }

    // pairwise-disjoint squares, like the instance masks of one image
    fn arb_masks() -> impl Strategy<Value = Vec<PixelSet>> {
        prop::collection::vec((0usize..6, 0usize..6, 1usize..5), 0..=8).prop_map(|v| {
            let mut out: Vec<PixelSet> = Vec::new();
            for (i, j, n) in v {
                let m = square(i, j, n);
                if out.len() < 5 && out.iter().all(|o| o.is_disjoint(&m)) {
                    out.push(m);
                }
            }
            out
        })
    }

    proptest! {
        #[test]
        fn greedy_pq_agrees_with_brute_force(preds in arb_masks(), gts in arb_masks()) {
            let p: Vec<&PixelSet> = preds.iter().collect();
            let g: Vec<&PixelSet> = gts.iter().collect();
            let s = PqStats::from_masks(&p, &g);
            let (n, sum) = brute_force_pq(&preds, &gts);
            prop_assert_eq!(s.tp, n);
            prop_assert!((s.iou_sum - sum).abs() < 1e-12);
            prop_assert_eq!(s.tp + s.fn_, gts.len());
        }

        #[test]
        fn deleting_a_tp_never_raises_ap(
            raw in prop::collection::vec((0.0f64..30.0, 0.0f64..30.0, 0.0f64..1.0), 1..12),
            ngt in 1usize..6,
        ) {
            let gts: Vec<GtBox> = (0..ngt).map(|k| GtBox { image: 0, rbox: b(5.0 + 4.0 * k as f64, 10.0, 6.0, 3.0) }).collect();
            let dets: Vec<ScoredBox> = raw.iter().map(|&(x, y, s)| sb(0, b(x.min(25.0), y.min(12.0).max(8.0), 6.0, 3.0), s)).collect();
            let ap = average_precision(&dets, &gts).unwrap();
            prop_assert!((0.0..=1.0).contains(&ap));
            let flags = match_detections(&dets, &gts);
            let mut order: Vec<usize> = (0..dets.len()).collect();
            order.sort_by(|&a, &b| dets[b].score.partial_cmp(&dets[a].score).unwrap());
            for (rank, &k) in order.iter().enumerate() {
                if flags[rank] {
                    let mut fewer = dets.clone();
                    fewer.remove(k);
                    prop_assert!(average_precision(&fewer, &gts).unwrap() <= ap + 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_class_bpq_equals_mpq() {
        use crate::geometry::Polygon;
        use crate::scene::Instance;
        let inst = |x0: f64| {
            let poly = Polygon::new(vec![[x0, 2.0], [x0 + 8.0, 2.0], [x0 + 8.0, 6.0], [x0, 6.0]]).unwrap();
            Instance::from_polygon(1, poly, 16, 32).unwrap()
        };
        let scene = Scene { height: 16, width: 32, instances: vec![inst(1.0), inst(12.0)] };
        let det = |src: &Instance, mask: PixelSet| Detection { rbox: src.rbox, class_id: 1, score: 0.9, mask };
        let partial: PixelSet = scene.instances[1].mask.iter().copied().filter(|p| p.1 < 18).collect();
        let dets = vec![det(&scene.instances[0], scene.instances[0].mask.clone()), det(&scene.instances[1], partial)];
        let r = evaluate_scenes([(&scene, dets.as_slice())]).unwrap();
        assert_eq!(r.bpq, r.mpq);
        assert_eq!(r.map50, 1.0);
        let empty = evaluate_scenes([(&scene, &[][..])]).unwrap();
        assert_eq!((empty.map50, empty.bpq, empty.mpq), (0.0, 0.0, 0.0));
        let c = empty.per_class[&1];
        assert_eq!((c.tp, c.fn_), (0, 2));
    }

    #[test]
    fn report_json_shape() {
        let r = evaluate_scenes(std::iter::empty()).unwrap();
        let v: serde_json::Value = serde_json::from_str(&r.to_json().unwrap()).unwrap();
        for k in ["map50", "mpq", "bpq", "per_class"] {
            assert!(v.get(k).is_some());
        }
    }
}
