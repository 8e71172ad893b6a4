//! Python bindings. Tensors cross the boundary as `Tensor` objects holding
//! a shape and a flat row-major list; reports come back as plain dicts.

use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};

use unsct::encoding::{encode_targets as encode, EncodingParams};
use unsct::eval::{self, Pair};
use unsct::harness::{self, RunConfig};
use unsct::landmarks::{self as lm, build_default_skeleton, Landmark, Spacing};
use unsct::losses::{self, AwingParams};
use unsct::net::{self, NetworkConfig};
use unsct::nn;
use unsct::phantom::{self, ManifestSpec, PhantomConfig, Split, UnstructuredMode};
use unsct::uncertainty::{self as ue, UeParams};

fn to_py(e: unsct::Error) -> PyErr {
    match e {
        unsct::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        unsct::Error::Divergence { .. } => PyRuntimeError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn json_to_py(py: Python<'_>, v: &serde_json::Value) -> PyObject {
    use serde_json::Value;
    match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_py(py),
        Value::Number(n) => match n.as_i64() {
            Some(i) => i.into_py(py),
            None => n.as_f64().unwrap_or(f64::NAN).into_py(py),
        },
        Value::String(s) => s.into_py(py),
        Value::Array(a) => PyList::new_bound(py, a.iter().map(|x| json_to_py(py, x))).into_py(py),
        Value::Object(o) => {
            let d = PyDict::new_bound(py);
            for (k, x) in o {
                d.set_item(k, json_to_py(py, x)).expect("string keys");
            }
            d.into_py(py)
        }
    }
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyObject {
    json_to_py(py, &serde_json::to_value(v).expect("serialisable"))
}

#[pyclass(name = "Tensor", module = "unsct_py")]
#[derive(Clone)]
struct PyTensor {
    inner: nn::Tensor,
}

#[pymethods]
impl PyTensor {
    #[new]
    fn new(shape: [usize; 4], data: Vec<f64>) -> PyResult<Self> {
        if data.len() != shape.iter().product::<usize>() {
            return Err(PyValueError::new_err(format!("{} values do not fill shape {shape:?}", data.len())));
        }
        Ok(PyTensor {
            inner: nn::Tensor::from_vec(shape, data),
        })
    }

    #[getter]
    fn shape(&self) -> [usize; 4] {
        self.inner.shape()
    }

    fn tolist(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn __repr__(&self) -> String {
        format!("Tensor(shape={:?})", self.inner.shape())
    }
}

#[pyclass(name = "AnnotatedImage", module = "unsct_py")]
#[derive(Clone)]
struct PyAnnotatedImage {
    inner: lm::AnnotatedImage,
}

#[pymethods]
impl PyAnnotatedImage {
    #[getter]
    fn id(&self) -> String {
        self.inner.id.clone()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn structured(&self) -> bool {
        self.inner.structured
    }

    /// `(mm per pixel along x, along y)`.
    #[getter]
    fn spacing(&self) -> (f64, f64) {
        (self.inner.spacing.x, self.inner.spacing.y)
    }

    /// `(x, y, visible)` per global landmark id.
    #[getter]
    fn landmarks(&self) -> Vec<(f64, f64, bool)> {
        self.inner.landmarks.iter().map(|l| (l.x, l.y, l.visible)).collect()
    }

    fn missing_ids(&self) -> Vec<usize> {
        self.inner.missing_ids()
    }

    /// Row-major intensities in `[0, 1]`.
    fn pixels(&self) -> Vec<f64> {
        self.inner.pixels.data().to_vec()
    }

    fn validate(&self) -> Vec<String> {
        lm::validate_annotation(&self.inner).iter().map(|v| format!("{v:?}")).collect()
    }

    fn __repr__(&self) -> String {
        format!(
            "AnnotatedImage(id={:?}, {}x{}, structured={})",
            self.inner.id,
            self.inner.width(),
            self.inner.height(),
            self.inner.structured
        )
    }
}

#[pyclass(name = "Network", module = "unsct_py")]
struct PyNetwork {
    inner: net::Network,
}

#[pymethods]
impl PyNetwork {
    /// `config` is a JSON object with any subset of the network fields.
    #[new]
    #[pyo3(signature = (config = None, seed = 0))]
    fn new(config: Option<&str>, seed: u64) -> PyResult<Self> {
        let cfg: NetworkConfig = match config {
            Some(text) => serde_json::from_str(text).map_err(|e| PyValueError::new_err(e.to_string()))?,
            None => NetworkConfig::default(),
        };
        Ok(PyNetwork {
            inner: net::Network::new(cfg, seed).map_err(to_py)?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (inner, _) = net::Network::load(&path).map_err(to_py)?;
        Ok(PyNetwork { inner })
    }

    #[getter]
    fn parameter_count(&self) -> usize {
        self.inner.params().count()
    }

    #[getter]
    fn srf_parameter_count(&self) -> usize {
        self.inner.srf_parameter_count()
    }

    /// `(heatmaps, paf)` for an `N x 1 x H x W` batch.
    fn predict(&self, images: &PyTensor) -> PyResult<(PyTensor, PyTensor)> {
        let out = self.inner.predict(&images.inner).map_err(to_py)?;
        Ok((PyTensor { inner: out.heatmaps }, PyTensor { inner: out.paf }))
    }
}

#[pyfunction]
#[pyo3(signature = (seed, size = 256))]
fn generate_phantom(seed: u64, size: usize) -> PyResult<PyAnnotatedImage> {
    let cfg = PhantomConfig::with_size(size, size);
    Ok(PyAnnotatedImage {
        inner: phantom::generate_phantom(&cfg, seed).map_err(to_py)?,
    })
}

#[pyfunction]
#[pyo3(signature = (image, missing, mode = "occlude", texture_seed = 0))]
fn inject_unstructured(image: &PyAnnotatedImage, missing: Vec<usize>, mode: &str, texture_seed: u64) -> PyResult<PyAnnotatedImage> {
    let mode = match mode {
        "occlude" => UnstructuredMode::Occlude,
        "truncate" => UnstructuredMode::Truncate,
        other => return Err(PyValueError::new_err(format!("unknown mode {other:?}"))),
    };
    Ok(PyAnnotatedImage {
        inner: phantom::inject_unstructured(&image.inner, &missing, mode, texture_seed).map_err(to_py)?,
    })
}

#[pyfunction]
fn mirror_landmarks(image: &PyAnnotatedImage) -> PyAnnotatedImage {
    PyAnnotatedImage {
        inner: lm::mirror_landmarks(&image.inner),
    }
}

#[pyfunction]
fn load_annotated(json_path: PathBuf) -> PyResult<PyAnnotatedImage> {
    Ok(PyAnnotatedImage {
        inner: lm::load_annotated(&json_path).map_err(to_py)?,
    })
}

/// Edges of the default skeleton as `(global_id_a, global_id_b)`.
#[pyfunction]
fn skeleton_edges() -> Vec<(usize, usize)> {
    build_default_skeleton().edges().iter().map(|e| (e.a, e.b)).collect()
}

/// `{"heatmaps", "paf", "mask"}` tensors for one image.
#[pyfunction]
#[pyo3(signature = (image, stride = 4, sigma = 2.0, limb_width = 3.0))]
fn encode_targets(py: Python<'_>, image: &PyAnnotatedImage, stride: usize, sigma: f64, limb_width: f64) -> PyResult<PyObject> {
    let p = EncodingParams {
        stride,
        sigma,
        limb_width,
        ..EncodingParams::default()
    };
    p.validate().map_err(to_py)?;
    let t = encode(&image.inner, &build_default_skeleton(), &p).map_err(to_py)?;
    let d = PyDict::new_bound(py);
    d.set_item("heatmaps", PyTensor { inner: t.heatmaps }.into_py(py))?;
    d.set_item("paf", PyTensor { inner: t.paf }.into_py(py))?;
    d.set_item("mask", PyTensor { inner: t.mask }.into_py(py))?;
    Ok(d.into_py(py))
}

#[pyfunction]
#[pyo3(signature = (heatmaps, stride = 4, sample = 0))]
fn decode_landmarks(py: Python<'_>, heatmaps: &PyTensor, stride: usize, sample: usize) -> PyResult<PyObject> {
    if sample >= heatmaps.inner.n() {
        return Err(PyValueError::new_err("sample index out of range"));
    }
    Ok(serialize(py, &ue::decode_landmarks(&heatmaps.inner, sample, stride)))
}

/// `(raw, normalized)` line integral of the field along `a -> b`.
#[pyfunction]
#[pyo3(signature = (fx, fy, height, width, stride, a, b, n = 32))]
#[allow(clippy::too_many_arguments)]
fn projection_weight(fx: Vec<f64>, fy: Vec<f64>, height: usize, width: usize, stride: usize, a: (f64, f64), b: (f64, f64), n: usize) -> PyResult<(f64, f64)> {
    if fx.len() != height * width || fy.len() != height * width {
        return Err(PyValueError::new_err("field planes must have height * width values"));
    }
    let p = ue::projection_weight(&fx, &fy, height, width, stride, a, b, n).map_err(to_py)?;
    Ok((p.raw, p.normalized))
}

#[pyfunction]
#[pyo3(signature = (w, epsilon = 1e-6))]
fn entropy_uncertainty(w: f64, epsilon: f64) -> f64 {
    ue::entropy_uncertainty(w, epsilon)
}

/// Decodes sample `sample` and scores every landmark against the PAF;
/// returns one verdict dict per landmark.
#[pyfunction]
#[pyo3(signature = (heatmaps, paf, stride = 4, tau = 0.3, sample = 0))]
fn uncertainty_filter(py: Python<'_>, heatmaps: &PyTensor, paf: &PyTensor, stride: usize, tau: f64, sample: usize) -> PyResult<PyObject> {
    let sk = build_default_skeleton();
    if paf.inner.c() != sk.paf_channels() {
        return Err(PyValueError::new_err(format!("paf needs {} channels", sk.paf_channels())));
    }
    let p = UeParams { tau, ..UeParams::default() };
    let decoded = ue::decode_landmarks(&heatmaps.inner, sample, stride);
    let (verdicts, _) = ue::aggregate_and_suppress(&decoded, &sk, &paf.inner, sample, stride, &p).map_err(to_py)?;
    Ok(serialize(py, &verdicts))
}

fn awing_params(omega: f64, theta: f64, epsilon: f64, alpha: f64) -> PyResult<AwingParams> {
    AwingParams::new(omega, theta, epsilon, alpha).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, omega = 14.0, theta = 0.5, epsilon = 1.0, alpha = 2.1))]
fn awing(pred: Vec<f64>, gt: Vec<f64>, omega: f64, theta: f64, epsilon: f64, alpha: f64) -> PyResult<Vec<f64>> {
    losses::awing(&pred, &gt, &awing_params(omega, theta, epsilon, alpha)?).map_err(to_py)
}

/// `(loss, gradient)` of the masked Adaptive Wing loss.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask, w_mask = 10.0, omega = 14.0, theta = 0.5, epsilon = 1.0, alpha = 2.1))]
#[allow(clippy::too_many_arguments)]
fn masked_awing(pred: Vec<f64>, gt: Vec<f64>, mask: Vec<f64>, w_mask: f64, omega: f64, theta: f64, epsilon: f64, alpha: f64) -> PyResult<(f64, Vec<f64>)> {
    losses::masked_awing_grad(&pred, &gt, &mask, &awing_params(omega, theta, epsilon, alpha)?, w_mask).map_err(to_py)
}

#[pyfunction]
fn paf_mse(pred: Vec<f64>, gt: Vec<f64>) -> PyResult<f64> {
    losses::paf_mse(&pred, &gt).map_err(to_py)
}

fn pairs(pred: &[(f64, f64)], gt: &[(f64, f64)]) -> PyResult<Vec<Pair>> {
    if pred.len() != gt.len() || pred.is_empty() {
        return Err(PyValueError::new_err("pred and gt must be equally long and non-empty"));
    }
    Ok(pred
        .iter()
        .zip(gt)
        .enumerate()
        .map(|(i, (p, g))| Pair { global_id: i, pred: *p, gt: *g })
        .collect())
}

#[pyfunction]
#[pyo3(signature = (pred, gt, spacing = 1.0))]
fn mre(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, spacing: f64) -> PyResult<f64> {
    eval::mre(&pairs(&pred, &gt)?, Spacing::uniform(spacing)).map_err(to_py)
}

#[pyfunction]
fn nme(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, d_norm: f64) -> PyResult<f64> {
    eval::nme(&pairs(&pred, &gt)?, d_norm).map_err(to_py)
}

#[pyfunction]
#[pyo3(signature = (pred, gt, missed = 0, spacing = 1.0, threshold_mm = 2.0))]
fn sdr(pred: Vec<(f64, f64)>, gt: Vec<(f64, f64)>, missed: usize, spacing: f64, threshold_mm: f64) -> PyResult<f64> {
    eval::sdr(&pairs(&pred, &gt)?, missed, Spacing::uniform(spacing), threshold_mm).map_err(to_py)
}

#[pyfunction]
fn pearson(x: Vec<f64>, y: Vec<f64>) -> PyResult<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(PyValueError::new_err("need two equally long series of at least 2 values"));
    }
    Ok(eval::pearson(&x, &y))
}

/// ICC(2,1) over rows of subjects by columns of raters.
#[pyfunction]
fn icc21(rows: Vec<Vec<f64>>) -> PyResult<f64> {
    let k = rows.first().map(|r| r.len()).unwrap_or(0);
    if rows.len() < 2 || k < 2 || rows.iter().any(|r| r.len() != k) {
        return Err(PyValueError::new_err("need at least 2 subjects and 2 raters in a rectangular table"));
    }
    Ok(eval::icc21(&rows))
}

/// Clinical parameters from `(x, y, visible)` landmarks in pixels.
#[pyfunction]
#[pyo3(signature = (landmarks, spacing = 1.0))]
fn clinical_parameters(py: Python<'_>, landmarks: Vec<(f64, f64, bool)>, spacing: f64) -> PyResult<PyObject> {
    if landmarks.len() != lm::NUM_LANDMARKS {
        return Err(PyValueError::new_err(format!("expected {} landmarks", lm::NUM_LANDMARKS)));
    }
    let kept: Vec<Landmark> = landmarks
        .iter()
        .map(|&(x, y, v)| if v { Landmark::visible(x, y) } else { Landmark::missing() })
        .collect();
    Ok(serialize(py, &eval::clinical_parameters(&kept, Spacing::uniform(spacing))))
}

/// Writes a phantom dataset; returns the manifest.
#[pyfunction]
#[pyo3(signature = (out, train = 257, val = 53, size = 256, unstructured_frac = None, seed = 0))]
fn build_dataset(py: Python<'_>, out: PathBuf, train: usize, val: usize, size: usize, unstructured_frac: Option<f64>, seed: u64) -> PyResult<PyObject> {
    let mut cfg = PhantomConfig::with_size(size, size);
    cfg.seed = seed;
    let spec = match unstructured_frac {
        Some(f) if !(0.0..=1.0).contains(&f) => return Err(PyValueError::new_err("unstructured_frac outside [0, 1]")),
        Some(f) => ManifestSpec::with_fraction(train, val, f),
        None => ManifestSpec::scaled(train, val),
    };
    let manifest = phantom::build_dataset(&cfg, &spec, &out).map_err(to_py)?;
    Ok(serialize(py, &manifest))
}

fn run_config(config: &str, overrides: Vec<String>) -> PyResult<RunConfig> {
    let cfg = RunConfig::from_toml_with_overrides(config, &overrides).map_err(to_py)?;
    cfg.validate().map_err(to_py)?;
    Ok(cfg)
}

/// Trains from TOML text plus `key=value` overrides; returns the ledger.
#[pyfunction]
#[pyo3(signature = (config = "", overrides = Vec::new()))]
fn train(py: Python<'_>, config: &str, overrides: Vec<String>) -> PyResult<PyObject> {
    let cfg = run_config(config, overrides)?;
    let ledger = py.allow_threads(|| harness::train(&cfg)).map_err(to_py)?;
    Ok(serialize(py, &ledger))
}

#[pyfunction]
#[pyo3(signature = (checkpoint, dataset, out, split = "val", ue_enabled = false))]
fn evaluate(py: Python<'_>, checkpoint: PathBuf, dataset: PathBuf, out: PathBuf, split: &str, ue_enabled: bool) -> PyResult<PyObject> {
    let split = match split {
        "train" => Split::Train,
        "val" => Split::Val,
        other => return Err(PyValueError::new_err(format!("unknown split {other:?}"))),
    };
    let r = py
        .allow_threads(|| harness::evaluate(&checkpoint, &dataset, split, ue_enabled, None, &out, false))
        .map_err(to_py)?;
    Ok(serialize(py, &r.report))
}

#[pyfunction]
#[pyo3(signature = (checkpoint, image, out, spacing_mm = 0.5, ue_enabled = true))]
fn infer(py: Python<'_>, checkpoint: PathBuf, image: PathBuf, out: PathBuf, spacing_mm: f64, ue_enabled: bool) -> PyResult<PyObject> {
    if !(spacing_mm > 0.0) {
        return Err(PyValueError::new_err("spacing must be positive"));
    }
    let r = harness::infer(&checkpoint, &image, Spacing::uniform(spacing_mm), ue_enabled, &out, false).map_err(to_py)?;
    Ok(serialize(py, &r))
}

#[pymodule]
fn unsct_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("NUM_LANDMARKS", lm::NUM_LANDMARKS)?;
    m.add_class::<PyTensor>()?;
    m.add_class::<PyAnnotatedImage>()?;
    m.add_class::<PyNetwork>()?;
    m.add_function(wrap_pyfunction!(generate_phantom, m)?)?;
    m.add_function(wrap_pyfunction!(inject_unstructured, m)?)?;
    m.add_function(wrap_pyfunction!(mirror_landmarks, m)?)?;
    m.add_function(wrap_pyfunction!(load_annotated, m)?)?;
    m.add_function(wrap_pyfunction!(skeleton_edges, m)?)?;
    m.add_function(wrap_pyfunction!(encode_targets, m)?)?;
    m.add_function(wrap_pyfunction!(decode_landmarks, m)?)?;
    m.add_function(wrap_pyfunction!(projection_weight, m)?)?;
    m.add_function(wrap_pyfunction!(entropy_uncertainty, m)?)?;
    m.add_function(wrap_pyfunction!(uncertainty_filter, m)?)?;
    m.add_function(wrap_pyfunction!(awing, m)?)?;
    m.add_function(wrap_pyfunction!(masked_awing, m)?)?;
    m.add_function(wrap_pyfunction!(paf_mse, m)?)?;
    m.add_function(wrap_pyfunction!(mre, m)?)?;
    m.add_function(wrap_pyfunction!(nme, m)?)?;
    m.add_function(wrap_pyfunction!(sdr, m)?)?;
    m.add_function(wrap_pyfunction!(pearson, m)?)?;
    m.add_function(wrap_pyfunction!(icc21, m)?)?;
    m.add_function(wrap_pyfunction!(clinical_parameters, m)?)?;
    m.add_function(wrap_pyfunction!(build_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(train, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add_function(wrap_pyfunction!(infer, m)?)?;
    Ok(())
}
