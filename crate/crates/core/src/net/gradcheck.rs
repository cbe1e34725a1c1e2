//! Central finite-difference checks of the analytic gradients.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::layers::{conv2d, conv2d_backward, ConvShape};
use super::{Net, NetConfig, NetParams};
use crate::error::{Error, Result};
use crate::geometry::Polygon;
use crate::losses::{consistency_loss, consistency_loss_grad, labeled_loss, labeled_loss_grad, HeadMaps, LossConfig};
use crate::maps::Grid;
use crate::rbox::RBox;
use crate::scene::{Instance, Scene};
use crate::skeleton::{build_targets, TargetMaps};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_SAMPLES: usize = 256;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub worst_param: String,
    /// Parameters compared by relative error.
    pub checked: usize,
    /// Parameters whose gradient was below `floor` and so compared by absolute error.
    pub unresolvable: usize,
    /// Probes skipped because the step flipped a ReLU.
    pub kinked: usize,
    pub max_unresolved_abs_error: f64,
    pub floor: f64,
    pub loss: f64,
}

pub fn rel_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

fn random_scene(rng: &mut ChaCha8Rng, h: usize, w: usize, n_cls: usize) -> Result<Scene> {
    let mut instances = Vec::new();
    for k in 0..2 {
        let b = RBox::new(
            rng.random_range(0.3..0.7) * w as f64,
            rng.random_range(0.3..0.7) * h as f64,
            rng.random_range(0.4..0.7) * w as f64,
            rng.random_range(0.15..0.3) * h as f64,
            rng.random_range(-1.5..1.5),
        );
        let poly = Polygon::new(b.corners().to_vec())?;
        instances.push(Instance::from_polygon((k % n_cls) as u32 + 1, poly, h, w)?);
    }
    Ok(Scene { height: h, width: w, instances })
}

struct Problem {
    net: Net,
    image: Grid<f64>,
    targets: TargetMaps,
    teacher: HeadMaps<f64>,
    loss: LossConfig,
}

impl Problem {
    fn new(cfg: &NetConfig, seed: u64) -> Result<(Self, NetParams<f64>)> {
        let [h, w] = cfg.input_size;
        if h > 16 || w > 16 {
            return Err(Error::Config(format!("gradient checks expect inputs of at most 16×16, got {h}×{w}")));
        }
        let net = Net::new(cfg.clone())?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = net.init_params::<f64>(rng.random());
        // move biases, shifts and scales off their special initial values
        for spec in net.registry().specs().iter().filter(|s| !s.is_kernel()) {
            for v in &mut params.values_mut()[spec.range()] {
                *v += rng.random_range(-0.1..0.1);
            }
        }
        let image = Grid::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
        let targets = build_targets(&random_scene(&mut rng, h, w, cfg.n_cls)?, cfg.n_cls)?;
        let teacher = net.forward(&net.init_params::<f64>(rng.random()), &image)?;
        Ok((Self { net, image, targets, teacher, loss: LossConfig::default() }, params))
    }

    /// Loss plus the ReLU activation pattern it was computed under.
    fn loss(&self, params: &NetParams<f64>) -> Result<(f64, Vec<bool>)> {
        let cache = self.net.forward_cached(params, &self.image)?;
        let out = cache.outputs();
        let labeled = labeled_loss(&self.targets, out, &self.loss)?.total;
        let unlabeled = consistency_loss(&self.teacher, out, self.loss.delta)?.value;
        Ok((unlabeled + self.loss.lambda_labeled * labeled, cache.relu_pattern()))
    }

    fn gradient(&self, params: &NetParams<f64>) -> Result<(f64, Vec<f64>, Vec<bool>)> {
        let cache = self.net.forward_cached(params, &self.image)?;
        let (labeled, mut g) = labeled_loss_grad(&self.targets, cache.outputs(), &self.loss)?;
        g.scale(self.loss.lambda_labeled);
        let (cons, gc) = consistency_loss_grad(&self.teacher, cache.outputs(), self.loss.delta)?;
        g.add_assign(&gc);
        let total = cons.value + self.loss.lambda_labeled * labeled.total;
        Ok((total, self.net.backward(params, &cache, &g)?, cache.relu_pattern()))
    }
}

/// Smallest gradient magnitude a central difference of a loss of size `loss`
/// can resolve with step `step` in double precision, with margin.
pub fn resolvable_floor(loss: f64, step: f64) -> f64 {
    1e5 * f64::EPSILON * loss.abs().max(1.0) / step
}

/// Full training-loss check: λ·labeled loss plus consistency against fixed
/// teacher maps, on a random image and two random boxes.
pub fn grad_check(cfg: &NetConfig, seed: u64) -> Result<GradCheckReport> {
    grad_check_with(cfg, seed, DEFAULT_SAMPLES, DEFAULT_STEP)
}

/// Samples about `samples` parameters spread evenly over every tensor.
///
/// Two kinds of probe cannot be judged by relative error and are passed over
/// in favour of the next candidate from the same tensor: gradients below the
/// round-off floor, and probes whose ±step passes flip a ReLU (the central
/// difference then straddles a kink). If a tensor runs out of resolvable
/// candidates, its remaining slots are filled with sub-floor parameters that
/// must agree in absolute terms to within the floor.
pub fn grad_check_with(cfg: &NetConfig, seed: u64, samples: usize, step: f64) -> Result<GradCheckReport> {
    let (problem, params) = Problem::new(cfg, seed)?;
    let (loss, analytic, pattern) = problem.gradient(&params)?;
    let floor = resolvable_floor(loss, step);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let specs = problem.net.registry().specs();
    let per = samples.div_ceil(specs.len()).max(1);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        unresolvable: 0,
        kinked: 0,
        max_unresolved_abs_error: 0.0,
        floor,
        loss,
    };
    let mut probe = params.clone();
    let mut central = |k: usize| -> Result<Option<f64>> {
        let orig = params.values()[k];
        probe.values_mut()[k] = orig + step;
        let (up, pu) = problem.loss(&probe)?;
        probe.values_mut()[k] = orig - step;
        let (down, pd) = problem.loss(&probe)?;
        probe.values_mut()[k] = orig;
        Ok((pu == pattern && pd == pattern).then_some((up - down) / (2.0 * step)))
    };
    for spec in specs {
        let want = per.min(spec.len());
        let mut done = 0;
        let mut small = Vec::new();
        for i in sample(&mut rng, spec.len(), spec.len()) {
            if done == want {
                break;
            }
            let k = spec.offset + i;
            if analytic[k].abs() < floor {
                small.push(i);
                continue;
            }
            let Some(numeric) = central(k)? else {
                report.kinked += 1;
                continue;
            };
            let err = rel_error(analytic[k], numeric);
            report.checked += 1;
            done += 1;
            if err > report.max_rel_error || report.worst_param.is_empty() {
                report.max_rel_error = err;
                report.worst_param = format!("{}[{i}]", spec.name);
            }
        }
        for i in small {
            if done == want {
                break;
            }
            let k = spec.offset + i;
            let Some(numeric) = central(k)? else {
                report.kinked += 1;
                continue;
            };
            report.unresolvable += 1;
            done += 1;
            report.max_unresolved_abs_error = report.max_unresolved_abs_error.max((analytic[k] - numeric).abs());
        }
    }
    Ok(report)
}

/// Degenerate check on a single convolution under a fixed linear readout,
/// where central differences are exact up to round-off.
pub fn linear_grad_check(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let shape = ConvShape::square(3, 3, 4);
    let (h, w) = (8, 8);
    // positive inputs and readout weights keep every gradient well away from
    // zero, so the relative error measures the check rather than cancellation
    let x = Grid::from_vec(h, w, 3, (0..h * w * 3).map(|_| rng.random_range(0.0..1.0)).collect())?;
    let t = Grid::from_vec(h, w, 4, (0..h * w * 4).map(|_| rng.random_range(0.5..1.0)).collect())?;
    let n_k = shape.kernel_len();
    let mut theta: Vec<f64> = (0..n_k + 4).map(|_| rng.random_range(-1.0..1.0)).collect();
    let loss = |theta: &[f64]| -> f64 {
        let y = conv2d(&x, &shape, &theta[..n_k], Some(&theta[n_k..]));
        y.data().iter().zip(t.data()).map(|(a, b)| a * b).sum::<f64>()
    };
    let mut grad = vec![0.0; n_k + 4];
    let (gk, gb) = grad.split_at_mut(n_k);
    conv2d_backward(&x, &shape, &theta[..n_k], &t, gk, Some(gb), false);
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_param: String::new(),
        checked: 0,
        unresolvable: 0,
        kinked: 0,
        max_unresolved_abs_error: 0.0,
        floor: resolvable_floor(loss(&theta), DEFAULT_STEP),
        loss: loss(&theta),
    };
    for i in 0..theta.len() {
        let orig = theta[i];
        theta[i] = orig + DEFAULT_STEP;
        let up = loss(&theta);
        theta[i] = orig - DEFAULT_STEP;
        let down = loss(&theta);
        theta[i] = orig;
        let err = rel_error(grad[i], (up - down) / (2.0 * DEFAULT_STEP));
        report.checked += 1;
        if err >= report.max_rel_error {
            report.max_rel_error = err;
            report.worst_param = if i < n_k { format!("kernel[{i}]") } else { format!("bias[{}]", i - n_k) };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn linear_check_is_exact() {
        let r = linear_grad_check(3).unwrap();
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        assert_eq!(r.checked, 3 * 3 * 3 * 4 + 4);
    }

    #[test]
    fn tiny_network_gradients_match() {
        let r = grad_check(&NetConfig::tiny(), 1).unwrap();
        eprintln!("{r:?}");
        assert!(r.checked >= 200);
        assert!(r.max_rel_error < 1e-4, "{r:?}");
        assert!(r.max_unresolved_abs_error <= r.floor, "{r:?}");
        assert_eq!(r, grad_check(&NetConfig::tiny(), 1).unwrap());
    }

    #[test]
    fn rejects_large_inputs() {
        assert!(grad_check(&NetConfig::toy(), 0).is_err());
    }
}
