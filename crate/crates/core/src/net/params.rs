//! Named parameter storage, initialization, checkpoints and EMA.

use std::collections::BTreeMap;
use std::ops::Range;
use std::path::Path;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::NetConfig;
use crate::error::{io_err, Error, Result};
use crate::maps::{read_tensor, write_atomic, write_tensor, Grid};
use crate::real::Real;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> Range<usize> {
        self.offset..self.offset + self.len()
    }

    pub fn is_kernel(&self) -> bool {
        self.shape.len() == 4
    }

    /// How the tensor is laid out as a three-axis map on disk.
    fn file_shape(&self) -> (usize, usize, usize) {
        match self.shape[..] {
            [kh, kw, din, dout] => (kh * kw, din, dout),
            [n] => (1, 1, n),
            _ => unreachable!("parameters are kernels or vectors"),
        }
    }
}

/// Deterministic name → (offset, shape) table over one flat parameter vector.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Registry {
    specs: Vec<ParamSpec>,
    total: usize,
}

impl Registry {
    pub(crate) fn push(&mut self, name: String, shape: Vec<usize>) -> Range<usize> {
        let spec = ParamSpec { name, shape, offset: self.total };
        self.total += spec.len();
        let r = spec.range();
        self.specs.push(spec);
        r
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn get(&self, name: &str) -> Option<&ParamSpec> {
        self.specs.iter().find(|s| s.name == name)
    }
}

static NEXT_STAMP: AtomicU64 = AtomicU64::new(1);

fn fresh_stamp() -> u64 {
    NEXT_STAMP.fetch_add(1, Ordering::Relaxed)
}

/// Flat parameter vector. Every mutable borrow takes a new stamp so
/// activation caches from older values are detected.
#[derive(Debug, Clone)]
pub struct NetParams<T> {
    registry: Arc<Registry>,
    values: Vec<T>,
    stamp: u64,
}

impl<T: Real> NetParams<T> {
    pub fn zeros(registry: Arc<Registry>) -> Self {
        let values = vec![T::zero(); registry.total()];
        Self { registry, values, stamp: fresh_stamp() }
    }

    /// He-scaled normal kernels, zero biases and shifts, unit norm scales.
    /// Tensors named in `bias_overrides` are filled with the given constant.
    pub fn init(registry: Arc<Registry>, seed: u64, bias_overrides: &[(&str, f64)]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = Self::zeros(registry.clone());
        for spec in registry.specs() {
            let slot = &mut p.values[spec.range()];
            if spec.is_kernel() {
                let fan_in = (spec.shape[0] * spec.shape[1] * spec.shape[2]) as f64;
                let normal = Normal::new(0.0, (2.0 / fan_in).sqrt()).expect("positive std");
                slot.iter_mut().for_each(|v| *v = T::of(normal.sample(&mut rng)));
            } else if spec.name.ends_with(".scale") {
                slot.iter_mut().for_each(|v| *v = T::one());
            }
            if let Some(&(_, c)) = bias_overrides.iter().find(|(n, _)| *n == spec.name) {
                slot.iter_mut().for_each(|v| *v = T::of(c));
            }
        }
        p
    }

    pub fn from_values(registry: Arc<Registry>, values: Vec<T>) -> Result<Self> {
        if values.len() != registry.total() {
            return Err(Error::Registry(format!(
                "{} values for a registry of {}",
                values.len(),
                registry.total()
            )));
        }
        if let Some(k) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(k));
        }
        Ok(Self { registry, values, stamp: fresh_stamp() })
    }

    pub fn registry(&self) -> &Arc<Registry> {
        &self.registry
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [T] {
        self.stamp = fresh_stamp();
        &mut self.values
    }

    pub fn stamp(&self) -> u64 {
        self.stamp
    }

    pub fn tensor(&self, name: &str) -> Option<&[T]> {
        self.registry.get(name).map(|s| &self.values[s.range()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [T]> {
        let r = self.registry.get(name)?.range();
        Some(&mut self.values_mut()[r])
    }

    pub fn cast<U: Real>(&self) -> NetParams<U> {
        NetParams {
            registry: self.registry.clone(),
            values: self.values.iter().map(|&v| U::of(v.f64())).collect(),
            stamp: fresh_stamp(),
        }
    }

    pub fn check_aligned<U>(&self, other: &NetParams<U>) -> Result<()> {
        if !Arc::ptr_eq(&self.registry, &other.registry) && *self.registry != *other.registry {
            return Err(Error::Registry("parameter sets come from different configs".into()));
        }
        Ok(())
    }

    /// Euclidean distance between two aligned parameter sets.
    pub fn distance(&self, other: &NetParams<T>) -> Result<f64> {
        self.check_aligned(other)?;
        Ok(self
            .values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a.f64() - b.f64()).powi(2))
            .sum::<f64>()
            .sqrt())
    }
}

/// `t ← α·t + (1 − α)·s`, parameter by parameter.
pub fn ema_update<T: Real>(teacher: &mut NetParams<T>, student: &NetParams<T>, alpha: f64) -> Result<()> {
    teacher.check_aligned(student)?;
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("ema alpha {alpha} outside [0, 1]")));
    }
    let (a, b) = (T::of(alpha), T::of(1.0 - alpha));
    for (t, &s) in teacher.values_mut().iter_mut().zip(&student.values) {
        *t = if alpha == 0.0 { s } else { a * *t + b * s };
    }
    Ok(())
}

const MANIFEST: &str = "manifest.json";
const CONFIG: &str = "net_config.json";

/// Writes one tensor file per parameter plus the shape manifest and config.
/// Tensors are stored in single precision.
pub fn save_checkpoint<T: Real>(dir: impl AsRef<Path>, cfg: &NetConfig, params: &NetParams<T>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(io_err(dir))?;
    let mut manifest = BTreeMap::new();
    for spec in params.registry.specs() {
        let (h, w, c) = spec.file_shape();
        let data: Vec<f32> = params.values[spec.range()].iter().map(|v| v.f64() as f32).collect();
        write_tensor(&Grid::from_vec(h, w, c, data)?, dir.join(format!("{}.a2bt", spec.name)))?;
        manifest.insert(spec.name.clone(), spec.shape.clone());
    }
    write_atomic(&dir.join(MANIFEST), serde_json::to_string_pretty(&manifest)?.as_bytes())?;
    write_atomic(&dir.join(CONFIG), serde_json::to_string_pretty(cfg)?.as_bytes())?;
    Ok(())
}

/// Reads a checkpoint, checking the manifest and every tensor against the
/// registry implied by its config.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(NetConfig, NetParams<f32>)> {
    let dir = dir.as_ref();
    let read = |name: &str| std::fs::read_to_string(dir.join(name)).map_err(io_err(dir.join(name)));
    let cfg: NetConfig = serde_json::from_str(&read(CONFIG)?)?;
    let manifest: BTreeMap<String, Vec<usize>> = serde_json::from_str(&read(MANIFEST)?)?;
    let net = super::Net::new(cfg.clone())?;
    let registry = net.registry().clone();
    if manifest.len() != registry.specs().len() {
        return Err(Error::Registry(format!(
            "manifest lists {} tensors, config implies {}",
            manifest.len(),
            registry.specs().len()
        )));
    }
    let mut values = vec![0f32; registry.total()];
    for spec in registry.specs() {
        match manifest.get(&spec.name) {
            Some(shape) if *shape == spec.shape => {}
            other => {
                return Err(Error::Registry(format!("{}: manifest has {other:?}, expected {:?}", spec.name, spec.shape)));
            }
        }
        let t = read_tensor(dir.join(format!("{}.a2bt", spec.name)))?;
        if t.shape() != spec.file_shape() {
            return Err(Error::Registry(format!("{}: tensor file shape {:?}", spec.name, t.shape())));
        }
        values[spec.range()].copy_from_slice(t.data());
    }
    Ok((cfg, NetParams::from_values(registry, values)?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn registry() -> Arc<Registry> {
        let mut r = Registry::default();
        r.push("a.kernel".into(), vec![3, 3, 2, 4]);
        r.push("a.bias".into(), vec![4]);
        r.push("n.scale".into(), vec![4]);
        Arc::new(r)
    }

    #[test]
    fn ema_examples() {
        let reg = registry();
        let mut t = NetParams::<f64>::zeros(reg.clone());
        let mut s = NetParams::<f64>::zeros(reg.clone());
        s.values_mut().iter_mut().for_each(|v| *v = 1.0);
        ema_update(&mut t, &s, 0.99).unwrap();
        assert!(t.values().iter().all(|&v| (v - 0.01).abs() < 1e-15));

        let before = t.values().to_vec();
        ema_update(&mut t, &s, 1.0).unwrap();
        assert_eq!(t.values(), &before[..]);

        ema_update(&mut t, &s, 0.0).unwrap();
        assert_eq!(t.values(), s.values());
    }

    #[test]
    fn ema_distance_follows_power_law() {
        let reg = registry();
        let mut t = NetParams::<f64>::init(reg.clone(), 1, &[]);
        let s = NetParams::<f64>::init(reg, 2, &[]);
        let d0 = t.distance(&s).unwrap();
        for n in 1..=20 {
            ema_update(&mut t, &s, 0.9).unwrap();
            let d = t.distance(&s).unwrap();
            assert!((d - d0 * 0.9f64.powi(n)).abs() < 1e-12 * d0);
        }
    }

    #[test]
    fn ema_rejects_mismatched_registries() {
        let mut other = Registry::default();
        other.push("x.bias".into(), vec![2]);
        let mut t = NetParams::<f64>::zeros(registry());
        let s = NetParams::<f64>::zeros(Arc::new(other));
        assert!(matches!(ema_update(&mut t, &s, 0.5), Err(Error::Registry(_))));
    }

    #[test]
    fn mutation_changes_stamp() {
        let mut p = NetParams::<f32>::zeros(registry());
        let s0 = p.stamp();
        p.values_mut()[0] = 1.0;
        assert_ne!(p.stamp(), s0);
    }

    #[test]
    fn init_is_seeded_and_scaled() {
        let reg = registry();
        let a = NetParams::<f64>::init(reg.clone(), 7, &[("a.bias", -2.0)]);
        let b = NetParams::<f64>::init(reg, 7, &[("a.bias", -2.0)]);
        assert_eq!(a.values(), b.values());
        assert!(a.tensor("a.bias").unwrap().iter().all(|&v| v == -2.0));
        assert!(a.tensor("n.scale").unwrap().iter().all(|&v| v == 1.0));
        assert!(a.tensor("a.kernel").unwrap().iter().any(|&v| v != 0.0));
    }
}
