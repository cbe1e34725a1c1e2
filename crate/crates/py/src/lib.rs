use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use a2bis::maps::{read_tensor, write_tensor, DenseMap, Grid};
use a2bis::net::{grad_check, load_checkpoint, Net as CoreNet, NetConfig, NetParams};
use a2bis::proposal::ProposalConfig;
use a2bis::rbox;
use a2bis::scene::{detections_to_json, Annotation, Scene};
use a2bis::skeleton;
use a2bis::train::{gen_dataset, SynthConfig};

fn err(e: a2bis::Error) -> PyErr {
    match e {
        a2bis::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "RBox", module = "a2bis_py", from_py_object)]
#[derive(Clone, Copy)]
struct PyRBox {
    inner: rbox::RBox,
}

#[pymethods]
impl PyRBox {
    #[new]
    fn new(x: f64, y: f64, w: f64, h: f64, theta: f64) -> PyResult<Self> {
        let inner = rbox::RBox::new(x, y, w, h, theta);
        inner.validate().map_err(err)?;
        Ok(Self { inner })
    }

    #[getter]
    fn x(&self) -> f64 {
        self.inner.x
    }
    #[getter]
    fn y(&self) -> f64 {
        self.inner.y
    }
    #[getter]
    fn w(&self) -> f64 {
        self.inner.w
    }
    #[getter]
    fn h(&self) -> f64 {
        self.inner.h
    }
    #[getter]
    fn theta(&self) -> f64 {
        self.inner.theta
    }

    fn area(&self) -> f64 {
        self.inner.area()
    }

    fn canonicalize(&self) -> PyResult<Self> {
        Ok(Self { inner: self.inner.canonicalize().map_err(err)? })
    }

    fn corners(&self) -> Vec<(f64, f64)> {
        self.inner.corners().iter().map(|c| (c[0], c[1])).collect()
    }

    fn as_tuple(&self) -> (f64, f64, f64, f64, f64) {
        let [x, y, w, h, t] = self.inner.as_array();
        (x, y, w, h, t)
    }

    fn __repr__(&self) -> String {
        let b = self.inner;
        format!("RBox(x={}, y={}, w={}, h={}, theta={})", b.x, b.y, b.w, b.h, b.theta)
    }
}

#[pyfunction]
fn gauss_distance(p: PyRBox, g: PyRBox) -> f64 {
    rbox::gauss_distance(&p.inner, &g.inner)
}

#[pyfunction]
#[pyo3(signature = (p, g, tau = 1.0))]
fn box_loss(p: PyRBox, g: PyRBox, tau: f64) -> PyResult<f64> {
    let l = a2bis::losses::box_loss(&[p.inner], &[g.inner], tau).map_err(err)?;
    Ok(l.value)
}

#[pyfunction]
fn rotated_iou(a: PyRBox, b: PyRBox) -> f64 {
    rbox::rotated_iou(&a.inner, &b.inner)
}

/// Returns the kept indices, highest score first.
#[pyfunction]
fn rotated_nms(boxes: Vec<PyRBox>, scores: Vec<f64>, iou_threshold: f64) -> PyResult<Vec<usize>> {
    if boxes.len() != scores.len() {
        return Err(PyValueError::new_err("boxes and scores differ in length"));
    }
    let dets: Vec<_> = boxes.iter().map(|b| b.inner).zip(scores).collect();
    Ok(rbox::rotated_nms(&dets, iou_threshold))
}

/// H×W×C float32 map, as stored in `.a2bt` files.
#[pyclass(name = "Tensor", module = "a2bis_py", from_py_object)]
#[derive(Clone)]
struct PyTensor {
    inner: DenseMap,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(height: usize, width: usize, channels: usize, data: Vec<f32>) -> PyResult<Self> {
        Ok(Self { inner: Grid::from_vec(height, width, channels, data).map_err(err)? })
    }

    #[staticmethod]
    fn read(path: PathBuf) -> PyResult<Self> {
        Ok(Self { inner: read_tensor(path).map_err(err)? })
    }

    fn write(&self, path: PathBuf) -> PyResult<()> {
        write_tensor(&self.inner, path).map_err(err)
    }

    #[getter]
    fn shape(&self) -> (usize, usize, usize) {
        self.inner.shape()
    }

    fn data(&self) -> Vec<f32> {
        self.inner.data().to_vec()
    }

    fn get(&self, i: usize, j: usize, c: usize) -> PyResult<f32> {
        let (h, w, ch) = self.inner.shape();
        if i >= h || j >= w || c >= ch {
            return Err(PyValueError::new_err(format!("index ({i}, {j}, {c}) outside {:?}", self.inner.shape())));
        }
        Ok(self.inner.get(i, j, c))
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

fn scene_from_json(annotation: &str) -> PyResult<Scene> {
    let ann: Annotation = serde_json::from_str(annotation).map_err(json_err)?;
    Scene::from_annotation(&ann).map_err(err)
}

/// Generates synthetic scenes as `(image, annotation_json)` pairs.
#[pyfunction]
#[pyo3(signature = (count, seed, config_json = None))]
fn synth(count: usize, seed: u64, config_json: Option<&str>) -> PyResult<Vec<(PyTensor, String)>> {
    let cfg: SynthConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => SynthConfig::default(),
    };
    cfg.validate().map_err(err)?;
    gen_dataset(&cfg, count, seed)
        .map_err(err)?
        .into_iter()
        .map(|(image, scene)| {
            let ann = serde_json::to_string(&scene.to_annotation()).map_err(json_err)?;
            Ok((PyTensor { inner: image }, ann))
        })
        .collect()
}

/// Supervision maps for one annotation: a dict with `skl`, `seg`, `box` and `owner`.
#[pyfunction]
fn build_targets<'py>(py: Python<'py>, annotation_json: &str, n_cls: usize) -> PyResult<Bound<'py, PyDict>> {
    let scene = scene_from_json(annotation_json)?;
    let t = skeleton::build_targets(&scene, n_cls).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("skl", PyTensor { inner: t.skl })?;
    d.set_item("seg", PyTensor { inner: t.seg })?;
    d.set_item("box", PyTensor { inner: t.boxes })?;
    d.set_item("owner", PyTensor { inner: t.owner })?;
    Ok(d)
}

#[pyclass(name = "Net", module = "a2bis_py")]
struct PyNet {
    net: CoreNet,
    params: NetParams<f64>,
}

#[pymethods]
impl PyNet {
    #[new]
    #[pyo3(signature = (config_json = None, seed = 0))]
    fn new(config_json: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: NetConfig = match config_json {
            Some(s) => serde_json::from_str(s).map_err(json_err)?,
            None => NetConfig::toy(),
        };
        let net = CoreNet::new(cfg).map_err(err)?;
        let params = net.init_params::<f64>(seed);
        Ok(Self { net, params })
    }

    #[staticmethod]
    fn load(checkpoint: PathBuf) -> PyResult<Self> {
        let (cfg, params) = load_checkpoint(checkpoint).map_err(err)?;
        let net = CoreNet::new(cfg).map_err(err)?;
        Ok(Self { net, params: params.cast() })
    }

    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(self.net.config()).map_err(json_err)
    }

    fn num_params(&self) -> usize {
        self.params.values().len()
    }

    /// Returns a dict with `skl`, `seg` and `box` maps.
    fn forward<'py>(&self, py: Python<'py>, image: &PyTensor) -> PyResult<Bound<'py, PyDict>> {
        let x = image.inner.map(|v| v as f64);
        let o = self.net.forward(&self.params, &x).map_err(err)?;
        let back = |g: &Grid<f64>| PyTensor { inner: g.map(|v| v as f32) };
        let d = PyDict::new(py);
        d.set_item("skl", back(&o.skl))?;
        d.set_item("seg", back(&o.seg))?;
        d.set_item("box", back(&o.boxes))?;
        Ok(d)
    }
}

/// Detections as the JSON document the `propose` command writes.
#[pyfunction]
#[pyo3(signature = (skl, seg, boxes, config_json = None))]
fn propose(skl: &PyTensor, seg: &PyTensor, boxes: &PyTensor, config_json: Option<&str>) -> PyResult<String> {
    let cfg: ProposalConfig = match config_json {
        Some(s) => serde_json::from_str(s).map_err(json_err)?,
        None => ProposalConfig::default(),
    };
    cfg.validate().map_err(err)?;
    let dets = a2bis::proposal::propose(&skl.inner, &seg.inner, &boxes.inner, &cfg).map_err(err)?;
    detections_to_json(&dets, skl.inner.width()).map_err(err)
}

/// Scores detection JSON against annotation JSON; returns the report as JSON.
#[pyfunction]
fn evaluate(pairs: Vec<(String, String)>) -> PyResult<String> {
    let mut ev = a2bis::eval::Evaluator::new();
    for (dets_json, ann_json) in &pairs {
        let scene = scene_from_json(ann_json)?;
        let dets = a2bis::scene::detections_from_json(dets_json, scene.height, scene.width).map_err(err)?;
        ev.add_image(&scene, &dets).map_err(err)?;
    }
    ev.report().to_json().map_err(err)
}

#[pyfunction]
fn evaluate_files(pred: PathBuf, gt: PathBuf) -> PyResult<String> {
    a2bis::eval::evaluate(&pred, &gt).map_err(err)?.to_json().map_err(err)
}

/// Finite-difference gradient check on the tiny double-precision config.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn gradcheck(seed: u64) -> PyResult<String> {
    let report = grad_check(&NetConfig::tiny(), seed).map_err(err)?;
    serde_json::to_string(&report).map_err(json_err)
}

/// Runs the command-line tool in-process and returns its exit code.
#[pyfunction]
fn cli(argv: Vec<String>) -> i32 {
    a2bis::cli::run(std::iter::once("a2bis".to_string()).chain(argv))
}

#[pymodule]
fn a2bis_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyRBox>()?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyNet>()?;
    m.add_function(wrap_pyfunction!(gauss_distance, m)?)?;
    m.add_function(wrap_pyfunction!(box_loss, m)?)?;
    m.add_function(wrap_pyfunction!(rotated_iou, m)?)?;
    m.add_function(wrap_pyfunction!(rotated_nms, m)?)?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(build_targets, m)?)?;
    m.add_function(wrap_pyfunction!(propose, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_files, m)?)?;
    m.add_function(wrap_pyfunction!(gradcheck, m)?)?;
    m.add_function(wrap_pyfunction!(cli, m)?)?;
    Ok(())
}
