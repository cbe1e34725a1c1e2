//! Training objectives.
//!
//! Every loss has a value-only form and a `_grad` form returning the gradient
//! with respect to the prediction maps (post-activation: skeleton
//! probabilities, segmentation probabilities, raw box offsets). Values are
//! accumulated in `f64` whatever the map precision.

use serde::{Deserialize, Serialize};

use crate::anchors::{decode_raw, max_extent_for, Anchor, BoxOffsets};
use crate::error::{Error, Result};
use crate::maps::Grid;
use crate::rbox::{gauss_distance, gauss_distance_with_grad, RBox};
use crate::real::Real;
use crate::skeleton::TargetMaps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    /// Focal suppression exponent of the skeleton loss.
    pub gamma: f64,
    /// Offset inside the box-loss log term.
    pub tau: f64,
    /// Weight of the labeled loss in the total.
    pub lambda_labeled: f64,
    /// Skeleton threshold that defines foreground.
    pub delta: f64,
    pub eps: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            gamma: 2.0,
            tau: 1.0,
            lambda_labeled: 4.0,
            delta: 0.02,
            eps: 1e-7,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.gamma >= 0.0
            && self.tau > 0.0
            && self.lambda_labeled > 0.0
            && self.delta > 0.0
            && self.delta < 1.0
            && self.eps > 0.0
            && self.eps < 0.5;
        if !ok {
            return Err(Error::Config(format!("invalid loss config {self:?}")));
        }
        Ok(())
    }
}

/// The three per-pixel prediction maps of one image.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadMaps<T> {
    /// H×W×1 skeleton probabilities.
    pub skl: Grid<T>,
    /// H×W×C segmentation probabilities.
    pub seg: Grid<T>,
    /// H×W×5 box offsets.
    pub boxes: Grid<T>,
}

impl<T: Real> HeadMaps<T> {
    pub fn zeros(height: usize, width: usize, seg_channels: usize) -> Self {
        Self {
            skl: Grid::zeros(height, width, 1),
            seg: Grid::zeros(height, width, seg_channels),
            boxes: Grid::zeros(height, width, 5),
        }
    }

    pub fn check(&self) -> Result<()> {
        let (h, w, c) = self.skl.shape();
        if c != 1 || self.seg.height() != h || self.seg.width() != w || self.boxes.shape() != (h, w, 5) {
            return Err(Error::Shape(format!(
                "head maps disagree: skl {:?}, seg {:?}, box {:?}",
                self.skl.shape(),
                self.seg.shape(),
                self.boxes.shape()
            )));
        }
        Ok(())
    }

    pub fn scale(&mut self, k: T) {
        for g in [&mut self.skl, &mut self.seg, &mut self.boxes] {
            g.data_mut().iter_mut().for_each(|v| *v *= k);
        }
    }

    pub fn add_assign(&mut self, other: &HeadMaps<T>) {
        for (a, b) in [
            (&mut self.skl, &other.skl),
            (&mut self.seg, &other.seg),
            (&mut self.boxes, &other.boxes),
        ] {
            a.data_mut().iter_mut().zip(b.data()).for_each(|(x, y)| *x += *y);
        }
    }

    pub fn cast<U: Real>(&self) -> HeadMaps<U> {
        let f = |v: T| U::of(v.f64());
        HeadMaps {
            skl: self.skl.map(f),
            seg: self.seg.map(f),
            boxes: self.boxes.map(f),
        }
    }
}

fn same_shape<A, B>(a: &Grid<A>, b: &Grid<B>, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape(format!(
            "{what}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn qfl_impl<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, gamma: f64, eps: f64, want_grad: bool) -> Result<(f64, Option<Grid<T>>)> {
    same_shape(gt, pred, "qfl")?;
    let n = gt.data().len() as f64;
    let mut grad = want_grad.then(|| Grid::<T>::zeros(pred.height(), pred.width(), pred.channels()));
    let mut total = 0.0;
    for (k, (&g, &s)) in gt.data().iter().zip(pred.data()).enumerate() {
        let (g, raw) = (g.f64(), s.f64());
        let s = raw.clamp(eps, 1.0 - eps);
        let d = s - g;
        let m = d.abs().powf(gamma);
        let bce = g * s.ln() + (1.0 - g) * (1.0 - s).ln();
        total -= m * bce;
        if let Some(grad) = grad.as_mut() {
            if raw > eps && raw < 1.0 - eps {
                let dm = if gamma == 0.0 || d == 0.0 {
                    0.0
                } else {
                    gamma * d.abs().powf(gamma - 1.0) * d.signum()
                };
                let dbce = g / s - (1.0 - g) / (1.0 - s);
                grad.data_mut()[k] = T::of(-(dm * bce + m * dbce) / n);
            }
        }
    }
    Ok((total / n, grad))
}

/// Quality focal loss: mean of `-|g - s|^γ [g ln s + (1 - g) ln(1 - s)]`.
pub fn qfl<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, gamma: f64, eps: f64) -> Result<f64> {
    Ok(qfl_impl(gt, pred, gamma, eps, false)?.0)
}

pub fn qfl_grad<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, gamma: f64, eps: f64) -> Result<(f64, Grid<T>)> {
    let (v, g) = qfl_impl(gt, pred, gamma, eps, true)?;
    Ok((v, g.unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SegLoss {
    pub ce: f64,
    pub dice: f64,
}

impl SegLoss {
    pub fn total(&self) -> f64 {
        self.ce + self.dice
    }
}

fn seg_impl<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, eps: f64, want_grad: bool) -> Result<(SegLoss, Option<Grid<T>>)> {
    same_shape(gt, pred, "seg_loss")?;
    let c = gt.channels();
    let n = gt.pixels() as f64;
    let mut inter = vec![0.0; c];
    let mut gsum = vec![0.0; c];
    let mut ssum = vec![0.0; c];
    let mut ce = 0.0;
    for (gp, sp) in gt.data().chunks_exact(c).zip(pred.data().chunks_exact(c)) {
        for k in 0..c {
            let (g, s) = (gp[k].f64(), sp[k].f64());
            if g != 0.0 {
                ce -= g * s.max(eps).ln();
            }
            inter[k] += g * s;
            gsum[k] += g;
            ssum[k] += s;
        }
    }
    ce /= n;
    let mut coef_sum = 0.0;
    for k in 0..c {
        coef_sum += (2.0 * inter[k] + eps) / (gsum[k] + ssum[k] + eps);
    }
    let dice = 1.0 - coef_sum / c as f64;
    let grad = want_grad.then(|| {
        let mut grad = Grid::<T>::zeros(pred.height(), pred.width(), c);
        let denom: Vec<f64> = (0..c).map(|k| gsum[k] + ssum[k] + eps).collect();
        for ((gp, sp), out) in gt
            .data()
            .chunks_exact(c)
            .zip(pred.data().chunks_exact(c))
            .zip(grad.data_mut().chunks_exact_mut(c))
        {
            for k in 0..c {
                let (g, s) = (gp[k].f64(), sp[k].f64());
                let dce = if g != 0.0 && s > eps { -g / (s * n) } else { 0.0 };
                let ddice = -(2.0 * g * denom[k] - (2.0 * inter[k] + eps)) / (denom[k] * denom[k] * c as f64);
                out[k] = T::of(dce + ddice);
            }
        }
        grad
    });
    Ok((SegLoss { ce, dice }, grad))
}

/// Cross-entropy plus Dice loss, Dice averaged over all channels.
pub fn seg_loss<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, eps: f64) -> Result<SegLoss> {
    Ok(seg_impl(gt, pred, eps, false)?.0)
}

pub fn seg_loss_grad<G: Real, T: Real>(gt: &Grid<G>, pred: &Grid<T>, eps: f64) -> Result<(SegLoss, Grid<T>)> {
    let (v, g) = seg_impl(gt, pred, eps, true)?;
    Ok((v, g.unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    pub anchors: usize,
}

impl BoxLoss {
    pub fn no_anchors(&self) -> bool {
        self.anchors == 0
    }
}

#[inline]
pub fn box_term(distance: f64, tau: f64) -> f64 {
    1.0 - 1.0 / (tau + (distance + 1.0).ln())
}

#[inline]
fn box_term_slope(distance: f64, tau: f64) -> f64 {
    let q = tau + (distance + 1.0).ln();
    1.0 / (q * q * (distance + 1.0))
}

/// Mean of `1 - 1/(τ + ln(D_i + 1))` over aligned prediction/target pairs.
pub fn box_loss(preds: &[RBox], gts: &[RBox], tau: f64) -> Result<BoxLoss> {
    if preds.len() != gts.len() {
        return Err(Error::Shape(format!(
            "{} predicted boxes vs {} targets",
            preds.len(),
            gts.len()
        )));
    }
    if preds.is_empty() {
        return Ok(BoxLoss { value: 0.0, anchors: 0 });
    }
    let sum: f64 = preds
        .iter()
        .zip(gts)
        .map(|(p, g)| box_term(gauss_distance(p, g), tau))
        .sum();
    Ok(BoxLoss {
        value: sum / preds.len() as f64,
        anchors: preds.len(),
    })
}

/// Box loss over every pixel owned by an instance, decoding the predicted
/// offsets at that pixel's anchor.
pub fn box_loss_from_maps<T: Real>(gt: &TargetMaps, pred: &Grid<T>, tau: f64, want_grad: bool) -> Result<(BoxLoss, Option<Grid<T>>)> {
    if pred.shape() != (gt.owner.height(), gt.owner.width(), 5) {
        return Err(Error::Shape(format!("box map {:?} vs owner {:?}", pred.shape(), gt.owner.shape())));
    }
    let (h, w) = (pred.height(), pred.width());
    let bound = max_extent_for(h, w);
    let owned: Vec<(usize, usize, usize)> = (0..h)
        .flat_map(|i| (0..w).map(move |j| (i, j)))
        .filter_map(|(i, j)| gt.owner_at(i, j).map(|o| (i, j, o)))
        .collect();
    let mut grad = want_grad.then(|| Grid::<T>::zeros(h, w, 5));
    if owned.is_empty() {
        return Ok((BoxLoss { value: 0.0, anchors: 0 }, grad));
    }
    let n = owned.len() as f64;
    let mut sum = 0.0;
    for &(i, j, o) in &owned {
        let px = pred.pixel(i, j);
        let off = BoxOffsets {
            dx: px[0].f64(),
            dy: px[1].f64(),
            dw: px[2].f64(),
            dh: px[3].f64(),
            dtheta: px[4].f64(),
        };
        let anchor = Anchor::at((i, j));
        let (b, free) = decode_raw(&off, &anchor, bound);
        let (d, dd) = gauss_distance_with_grad(&b, &gt.instance_boxes[o]);
        sum += box_term(d, tau);
        if let Some(grad) = grad.as_mut() {
            let k = box_term_slope(d, tau) / n;
            let s = anchor.size;
            let out = grad.pixel_mut(i, j);
            out[0] = T::of(k * dd[0] * s);
            out[1] = T::of(k * dd[1] * s);
            out[2] = T::of(if free[0] { k * dd[2] * b.w } else { 0.0 });
            out[3] = T::of(if free[1] { k * dd[3] * b.h } else { 0.0 });
            out[4] = T::of(k * dd[4]);
        }
    }
    Ok((
        BoxLoss {
            value: sum / n,
            anchors: owned.len(),
        },
        grad,
    ))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LabeledLoss {
    pub skl: f64,
    pub seg: f64,
    pub boxes: f64,
    pub total: f64,
    pub anchors: usize,
}

fn labeled_impl<T: Real>(gt: &TargetMaps, pred: &HeadMaps<T>, cfg: &LossConfig, want_grad: bool) -> Result<(LabeledLoss, Option<HeadMaps<T>>)> {
    pred.check()?;
    let (skl, gskl) = qfl_impl(&gt.skl, &pred.skl, cfg.gamma, cfg.eps, want_grad)?;
    let (seg, gseg) = seg_impl(&gt.seg, &pred.seg, cfg.eps, want_grad)?;
    let (bx, gbox) = box_loss_from_maps(gt, &pred.boxes, cfg.tau, want_grad)?;
    let loss = LabeledLoss {
        skl,
        seg: seg.total(),
        boxes: bx.value,
        total: skl + seg.total() + bx.value,
        anchors: bx.anchors,
    };
    let grads = want_grad.then(|| HeadMaps {
        skl: gskl.unwrap(),
        seg: gseg.unwrap(),
        boxes: gbox.unwrap(),
    });
    Ok((loss, grads))
}

/// Skeleton + segmentation + box loss against ground-truth maps.
pub fn labeled_loss<T: Real>(gt: &TargetMaps, pred: &HeadMaps<T>, cfg: &LossConfig) -> Result<LabeledLoss> {
    Ok(labeled_impl(gt, pred, cfg, false)?.0)
}

pub fn labeled_loss_grad<T: Real>(gt: &TargetMaps, pred: &HeadMaps<T>, cfg: &LossConfig) -> Result<(LabeledLoss, HeadMaps<T>)> {
    let (v, g) = labeled_impl(gt, pred, cfg, true)?;
    Ok((v, g.unwrap()))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ConsistencyLoss {
    pub value: f64,
    /// Pixels that passed the teacher's skeleton threshold; zero means the loss was skipped.
    pub foreground: usize,
}

impl ConsistencyLoss {
    pub fn empty_foreground(&self) -> bool {
        self.foreground == 0
    }
}

fn consistency_impl<T: Real>(teacher: &HeadMaps<T>, student: &HeadMaps<T>, delta: f64, want_grad: bool) -> Result<(ConsistencyLoss, Option<HeadMaps<T>>)> {
    teacher.check()?;
    student.check()?;
    same_shape(&teacher.seg, &student.seg, "consistency seg")?;
    same_shape(&teacher.skl, &student.skl, "consistency skl")?;
    let c = teacher.seg.channels();
    let width = 1 + c + 5;
    let fg: Vec<usize> = (0..teacher.skl.pixels())
        .filter(|&p| teacher.skl.data()[p].f64() >= delta)
        .collect();
    let (h, w) = (teacher.skl.height(), teacher.skl.width());
    let mut grad = want_grad.then(|| HeadMaps::<T>::zeros(h, w, c));
    if fg.is_empty() {
        return Ok((ConsistencyLoss { value: 0.0, foreground: 0 }, grad));
    }
    let n = (fg.len() * width) as f64;
    let mut sum = 0.0;
    let pairs = [
        (&teacher.skl, &student.skl, 1usize, 0usize),
        (&teacher.seg, &student.seg, c, 1),
        (&teacher.boxes, &student.boxes, 5, 2),
    ];
    for &p in &fg {
        for &(tm, sm, ch, slot) in &pairs {
            for k in 0..ch {
                let d = sm.data()[p * ch + k].f64() - tm.data()[p * ch + k].f64();
                sum += d * d;
                if let Some(g) = grad.as_mut() {
                    let target = match slot {
                        0 => &mut g.skl,
                        1 => &mut g.seg,
                        _ => &mut g.boxes,
                    };
                    target.data_mut()[p * ch + k] = T::of(2.0 * d / n);
                }
            }
        }
    }
    Ok((
        ConsistencyLoss {
            value: sum / n,
            foreground: fg.len(),
        },
        grad,
    ))
}

/// Mean squared error between channel-concatenated teacher and student maps,
/// over pixels where the teacher's skeleton reaches `delta`.
pub fn consistency_loss<T: Real>(teacher: &HeadMaps<T>, student: &HeadMaps<T>, delta: f64) -> Result<ConsistencyLoss> {
    Ok(consistency_impl(teacher, student, delta, false)?.0)
}

pub fn consistency_loss_grad<T: Real>(teacher: &HeadMaps<T>, student: &HeadMaps<T>, delta: f64) -> Result<(ConsistencyLoss, HeadMaps<T>)> {
    let (v, g) = consistency_impl(teacher, student, delta, true)?;
    Ok((v, g.unwrap()))
}

pub fn total_loss(labeled: f64, unlabeled: f64, lambda_labeled: f64) -> f64 {
    unlabeled + lambda_labeled * labeled
}
