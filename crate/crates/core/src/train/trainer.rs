//! Teacher–student training: supervised loss on labeled scenes plus a
//! consistency loss between an EMA teacher and the student on unlabeled ones.

use std::io::Write;
use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::augment::Dihedral;
use crate::error::{io_err, Error, Result};
use crate::losses::{consistency_loss_grad, labeled_loss_grad, total_loss, HeadMaps, LossConfig};
use crate::maps::{DenseMap, Grid};
use crate::net::{ema_update, ForwardCache, Net, NetParams};
use crate::real::Real;
use crate::skeleton::TargetMaps;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    /// Labeled images per step (1 or 2).
    pub n_labeled: usize,
    /// Unlabeled images per step; ignored when there is no unlabeled data.
    pub n_unlabeled: usize,
    pub lr: f64,
    /// Learning-rate factor applied at the end of every epoch.
    pub lr_decay: f64,
    pub ema_alpha: f64,
    pub seed: u64,
    /// Random flips and quarter turns of every training image.
    pub augment: bool,
    pub loss: LossConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            n_labeled: 2,
            n_unlabeled: 1,
            lr: 1e-4,
            lr_decay: 0.96,
            ema_alpha: 0.99,
            seed: 0,
            augment: true,
            loss: LossConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(1..=2).contains(&self.n_labeled) {
            return bad(format!("n_labeled {} outside 1..=2", self.n_labeled));
        }
        if self.n_unlabeled > 1 {
            return bad(format!("n_unlabeled {} outside 0..=1", self.n_unlabeled));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} outside (0, 1]", self.lr_decay));
        }
        if !(0.0..=1.0).contains(&self.ema_alpha) {
            return bad(format!("ema_alpha {} outside [0, 1]", self.ema_alpha));
        }
        self.loss.validate()
    }

    /// Learning rate in force during zero-based epoch `epoch`, which is also
    /// the rate after `epoch` completed epochs.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.lr * self.lr_decay.powi(epoch as i32)
    }
}

/// One labeled training image with its prebuilt targets.
#[derive(Debug, Clone)]
pub struct LabeledSample {
    pub image: DenseMap,
    pub targets: TargetMaps,
}

/// Brightness shift `b` and contrast factor `c`: `x ↦ (x − mean)·c + mean + b`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Perturbation {
    pub brightness: f64,
    pub contrast: f64,
}

impl Perturbation {
    pub fn sample(rng: &mut impl Rng) -> Self {
        Self { brightness: rng.random_range(-0.1..=0.1), contrast: rng.random_range(0.9..=1.1) }
    }

    pub fn apply(&self, image: &DenseMap) -> DenseMap {
        let mean = image.data().iter().map(|&v| v as f64).sum::<f64>() / image.data().len().max(1) as f64;
        image.map(|v| ((v as f64 - mean) * self.contrast + mean + self.brightness).clamp(0.0, 1.0) as f32)
    }
}

pub fn perturb(image: &DenseMap, rng: &mut impl Rng) -> DenseMap {
    Perturbation::sample(rng).apply(image)
}

#[derive(Debug, Clone)]
pub struct Adam<T> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<T>,
    v: Vec<T>,
    t: i32,
}

impl<T: Real> Adam<T> {
    pub fn new(n: usize) -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, m: vec![T::zero(); n], v: vec![T::zero(); n], t: 0 }
    }

    pub fn step(&mut self, params: &mut NetParams<T>, grad: &[T], lr: f64) -> Result<()> {
        if grad.len() != self.m.len() || grad.len() != params.values().len() {
            return Err(Error::Registry(format!("{} gradients for {} parameters", grad.len(), self.m.len())));
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = T::of(lr * c2.sqrt() / c1);
        let eps = T::of(self.eps * c2.sqrt());
        for (((p, &g), m), v) in params.values_mut().iter_mut().zip(grad).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (T::one() - b1) * g;
            *v = b2 * *v + (T::one() - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
        Ok(())
    }
}

/// Mean losses of one step (or, averaged, of one epoch).
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct StepLoss {
    pub total: f64,
    pub labeled: f64,
    pub skl: f64,
    pub seg: f64,
    #[serde(rename = "box")]
    pub boxes: f64,
    pub unlabeled: f64,
    /// Largest deviation from 1 of any spatial attention channel sum.
    pub attention_sum_error: f64,
    /// Largest deviation from 1 of any per-pixel segmentation sum.
    pub seg_sum_error: f64,
}

fn sum_errors<T: Real>(cache: &ForwardCache<T>) -> (f64, f64) {
    let mut attn: f64 = 0.0;
    for a in cache.attention_maps() {
        let c = a.channels();
        let mut sums = vec![0.0f64; c];
        for px in a.data().chunks_exact(c) {
            for (s, &v) in sums.iter_mut().zip(px) {
                *s += v.f64();
            }
        }
        attn = sums.iter().fold(attn, |m, s| m.max((s - 1.0).abs()));
    }
    let seg = &cache.outputs().seg;
    let seg_err = seg
        .data()
        .chunks_exact(seg.channels())
        .map(|px| (px.iter().map(|v| v.f64()).sum::<f64>() - 1.0).abs())
        .fold(0.0, f64::max);
    (attn, seg_err)
}

fn to_real<T: Real>(image: &DenseMap) -> Grid<T> {
    image.map(|v| T::of(v as f64))
}

/// Student and EMA teacher with the student's optimizer state.
#[derive(Debug, Clone)]
pub struct TrainState<T> {
    pub student: NetParams<T>,
    pub teacher: NetParams<T>,
    pub adam: Adam<T>,
}

impl<T: Real> TrainState<T> {
    /// The teacher starts as an exact copy of the student.
    pub fn new(student: NetParams<T>) -> Self {
        let teacher = NetParams::from_values(student.registry().clone(), student.values().to_vec()).expect("finite parameters");
        let adam = Adam::new(student.values().len());
        Self { student, teacher, adam }
    }
}

/// One optimizer step on the student followed by the EMA teacher update.
/// `perturbations` are drawn from `rng`, independently for teacher and student.
pub fn train_step<T: Real>(
    net: &Net,
    state: &mut TrainState<T>,
    labeled: &[LabeledSample],
    unlabeled: &[DenseMap],
    cfg: &TrainConfig,
    lr: f64,
    rng: &mut ChaCha8Rng,
) -> Result<StepLoss> {
    if labeled.is_empty() {
        return Err(Error::Config("a training step needs at least one labeled image".into()));
    }
    let lambda = cfg.loss.lambda_labeled;
    let mut grad = vec![T::zero(); state.student.values().len()];
    let mut out = StepLoss::default();
    let accumulate = |grad: &mut Vec<T>, g: Vec<T>| grad.iter_mut().zip(g).for_each(|(a, b)| *a += b);

    let n_l = labeled.len() as f64;
    for sample in labeled {
        let cache = net.forward_cached(&state.student, &to_real(&sample.image))?;
        let (loss, mut dout) = labeled_loss_grad(&sample.targets, cache.outputs(), &cfg.loss)?;
        out.skl += loss.skl / n_l;
        out.seg += loss.seg / n_l;
        out.boxes += loss.boxes / n_l;
        out.labeled += loss.total / n_l;
        let (a, s) = sum_errors(&cache);
        out.attention_sum_error = out.attention_sum_error.max(a);
        out.seg_sum_error = out.seg_sum_error.max(s);
        dout.scale(T::of(lambda / n_l));
        accumulate(&mut grad, net.backward(&state.student, &cache, &dout)?);
    }
    let n_u = unlabeled.len() as f64;
    for image in unlabeled {
        let teacher_view = perturb(image, rng);
        let student_view = perturb(image, rng);
        let pseudo: HeadMaps<T> = net.forward(&state.teacher, &to_real(&teacher_view))?;
        let cache = net.forward_cached(&state.student, &to_real(&student_view))?;
        let (loss, mut dout) = consistency_loss_grad(&pseudo, cache.outputs(), cfg.loss.delta)?;
        out.unlabeled += loss.value / n_u;
        dout.scale(T::of(1.0 / n_u));
        accumulate(&mut grad, net.backward(&state.student, &cache, &dout)?);
    }
    out.total = total_loss(out.labeled, out.unlabeled, lambda);
    if !out.total.is_finite() {
        return Err(Error::NonFinite(0));
    }
    state.adam.step(&mut state.student, &grad, lr)?;
    ema_update(&mut state.teacher, &state.student, cfg.ema_alpha)?;
    Ok(out)
}

/// One JSON line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EpochLog {
    /// One-based epoch number.
    pub epoch: usize,
    pub lr: f64,
    pub steps: usize,
    #[serde(flatten)]
    pub loss: StepLoss,
}

fn augment_labeled(s: &LabeledSample, d: Dihedral) -> Result<LabeledSample> {
    if d == Dihedral::IDENTITY {
        return Ok(s.clone());
    }
    Ok(LabeledSample { image: d.grid(&s.image), targets: d.targets(&s.targets)? })
}

/// Runs `cfg.epochs` epochs of shuffled, optionally augmented batches.
///
/// Each labeled image is visited once per epoch; unlabeled images are cycled
/// in a shuffled order, `n_unlabeled` per step. After every epoch the log
/// line is written to `log` (if any) and passed to `on_epoch` together with
/// the current state; returning `Break` stops training early.
pub fn train_loop<T: Real>(
    net: &Net,
    state: &mut TrainState<T>,
    labeled: &[LabeledSample],
    unlabeled: &[DenseMap],
    cfg: &TrainConfig,
    mut log: Option<&mut dyn Write>,
    mut on_epoch: impl FnMut(&EpochLog, &TrainState<T>) -> ControlFlow<()>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if labeled.is_empty() {
        return Err(Error::Config("training needs at least one labeled scene".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..labeled.len()).collect();
    let mut u_order: Vec<usize> = (0..unlabeled.len()).collect();
    let mut u_next = unlabeled.len();
    let mut history = Vec::new();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        order.shuffle(&mut rng);
        let mut sum = StepLoss::default();
        let mut steps = 0;
        for chunk in order.chunks(cfg.n_labeled) {
            let batch: Vec<LabeledSample> = chunk
                .iter()
                .map(|&k| {
                    let d = if cfg.augment { Dihedral::random(&mut rng) } else { Dihedral::IDENTITY };
                    augment_labeled(&labeled[k], d)
                })
                .collect::<Result<_>>()?;
            let mut ubatch = Vec::new();
            if !unlabeled.is_empty() {
                for _ in 0..cfg.n_unlabeled {
                    if u_next == u_order.len() {
                        u_order.shuffle(&mut rng);
                        u_next = 0;
                    }
                    let img = &unlabeled[u_order[u_next]];
                    u_next += 1;
                    let d = if cfg.augment { Dihedral::random(&mut rng) } else { Dihedral::IDENTITY };
                    ubatch.push(d.grid(img));
                }
            }
            let s = train_step(net, state, &batch, &ubatch, cfg, lr, &mut rng)?;
            sum.total += s.total;
            sum.labeled += s.labeled;
            sum.skl += s.skl;
            sum.seg += s.seg;
            sum.boxes += s.boxes;
            sum.unlabeled += s.unlabeled;
            sum.attention_sum_error = sum.attention_sum_error.max(s.attention_sum_error);
            sum.seg_sum_error = sum.seg_sum_error.max(s.seg_sum_error);
            steps += 1;
        }
        let k = steps as f64;
        let entry = EpochLog {
            epoch: epoch + 1,
            lr,
            steps,
            loss: StepLoss {
                total: sum.total / k,
                labeled: sum.labeled / k,
                skl: sum.skl / k,
                seg: sum.seg / k,
                boxes: sum.boxes / k,
                unlabeled: sum.unlabeled / k,
                ..sum
            },
        };
        if let Some(w) = log.as_deref_mut() {
            let line = serde_json::to_string(&entry)?;
            writeln!(w, "{line}").map_err(io_err("training log"))?;
        }
        history.push(entry);
        if on_epoch(&entry, state).is_break() {
            break;
        }
    }
    Ok(history)
}
