//! Python bindings. Tensors cross the boundary as a flat row-major list of
//! floats plus a shape.

use std::path::PathBuf;

use ghost_stereo::cost_volume::build_gwc_volume;
use ghost_stereo::data::metrics;
use ghost_stereo::data::synthetic::random_dot_dataset;
use ghost_stereo::data::Normalization;
use ghost_stereo::inference::predict_disparity;
use ghost_stereo::nn::{ParamStore, Session};
use ghost_stereo::regression::topk_disparity;
use ghost_stereo::{checkpoint, Preset, Tensor};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;
use pyo3::types::PyDict;

type Flat = (Vec<f64>, Vec<usize>);

fn err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(data: Vec<f64>, shape: &[usize]) -> PyResult<Tensor> {
    Tensor::from_vec(shape, data).map_err(err)
}

fn flat(t: Tensor) -> Flat {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

#[pyclass(name = "ModelConfig", from_py_object)]
#[derive(Clone)]
pub struct PyModelConfig {
    inner: ghost_stereo::ModelConfig,
}

#[pymethods]
impl PyModelConfig {
    /// A preset: `"desk"` or `"paper"`.
    #[new]
    #[pyo3(signature = (preset = "desk"))]
    fn new(preset: &str) -> PyResult<Self> {
        let p: Preset = preset.parse().map_err(err)?;
        Ok(PyModelConfig {
            inner: ghost_stereo::ModelConfig::preset(p),
        })
    }

    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(PyModelConfig {
            inner: ghost_stereo::ModelConfig::from_json(text).map_err(err)?,
        })
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    fn validate(&self) -> PyResult<()> {
        self.inner.validate().map_err(err)
    }

    #[getter]
    fn max_disparity(&self) -> usize {
        self.inner.max_disparity
    }

    #[setter]
    fn set_max_disparity(&mut self, v: usize) {
        self.inner.max_disparity = v;
    }

    #[getter]
    fn num_groups(&self) -> usize {
        self.inner.num_groups
    }

    #[getter]
    fn topk(&self) -> usize {
        self.inner.topk
    }

    #[setter]
    fn set_topk(&mut self, v: usize) {
        self.inner.topk = v;
    }

    #[getter]
    fn use_cve(&self) -> bool {
        self.inner.use_cve
    }

    #[setter]
    fn set_use_cve(&mut self, v: bool) {
        self.inner.use_cve = v;
    }

    #[getter]
    fn use_cva(&self) -> bool {
        self.inner.use_cva
    }

    #[setter]
    fn set_use_cva(&mut self, v: bool) {
        self.inner.use_cva = v;
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed
    }

    #[setter]
    fn set_seed(&mut self, v: u64) {
        self.inner.seed = v;
    }

    fn __repr__(&self) -> String {
        let c = &self.inner;
        format!(
            "ModelConfig(max_disparity={}, num_groups={}, topk={}, use_cve={}, use_cva={}, seed={})",
            c.max_disparity, c.num_groups, c.topk, c.use_cve, c.use_cva, c.seed
        )
    }
}

/// A model with its parameters and input normalization.
#[pyclass(name = "GhostStereo")]
pub struct PyGhostStereo {
    model: ghost_stereo::GhostStereo,
    store: ParamStore,
    norm: Normalization,
}

#[pymethods]
impl PyGhostStereo {
    /// Freshly initialized from `config.seed`.
    #[new]
    fn new(config: &PyModelConfig) -> PyResult<Self> {
        let (model, store) = ghost_stereo::GhostStereo::new(&config.inner).map_err(err)?;
        Ok(PyGhostStereo {
            model,
            store,
            norm: Normalization::default(),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (model, state) = checkpoint::load_model(&path).map_err(err)?;
        Ok(PyGhostStereo {
            model,
            store: state.store,
            norm: state.norm,
        })
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig {
            inner: self.model.config.clone(),
        }
    }

    fn num_parameters(&self) -> usize {
        self.store.num_learnable()
    }

    /// `[3, H, W]` images in `[0, 1]` → `[H, W]` disparity in pixels.
    fn predict(&self, py: Python<'_>, left: Vec<f64>, right: Vec<f64>, height: usize, width: usize) -> PyResult<Flat> {
        let shape = [3, height, width];
        let (l, r) = (tensor(left, &shape)?, tensor(right, &shape)?);
        let out = py.detach(|| predict_disparity(&self.model, &self.store, &self.norm, &l, &r));
        Ok(flat(out.map_err(err)?))
    }
}

/// Group-wise correlation volume of `[B, C, H, W]` features.
#[pyfunction]
fn gwc_volume(left: Vec<f64>, right: Vec<f64>, shape: Vec<usize>, groups: usize, levels: usize) -> PyResult<Flat> {
    let store = ParamStore::default();
    let s = Session::eval(&store);
    let (l, r) = (s.input(tensor(left, &shape)?), s.input(tensor(right, &shape)?));
    let v = build_gwc_volume(&s, l, r, groups, levels).map_err(err)?;
    Ok(flat(s.value(v)))
}

/// Expected disparity over the `k` best candidates of `[B, D, H, W]` scores.
#[pyfunction]
fn topk_regression(volume: Vec<f64>, shape: Vec<usize>, k: usize) -> PyResult<Flat> {
    let store = ParamStore::default();
    let s = Session::eval(&store);
    let v = s.input(tensor(volume, &shape)?);
    let d = topk_disparity(&s, v, k).map_err(err)?;
    Ok(flat(s.value(d)))
}

/// JSON report of parameter and MAC counts for the model and its dense twin.
#[pyfunction]
#[pyo3(signature = (config, height = 256, width = 512, batch = 1))]
fn analyze(config: &PyModelConfig, height: usize, width: usize, batch: usize) -> PyResult<String> {
    let report = ghost_stereo::analysis::analyze(&config.inner, batch, height, width).map_err(err)?;
    serde_json::to_string(&report).map_err(err)
}

/// Random-dot stereo pair: `left`, `right` (`[3, H, W]`), `disparity` and
/// `mask` (`[H, W]`).
#[pyfunction]
#[pyo3(signature = (height, width, seed = 0))]
fn synthetic_pair(py: Python<'_>, height: usize, width: usize, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let s = random_dot_dataset(height, width, 1, seed).map_err(err)?.remove(0);
    let d = PyDict::new(py);
    d.set_item("left", s.left.data().to_vec())?;
    d.set_item("right", s.right.data().to_vec())?;
    d.set_item("disparity", s.gt_disparity.map(Tensor::into_data))?;
    d.set_item("mask", s.valid_mask)?;
    d.set_item("shape", (height, width))?;
    Ok(d)
}

/// EPE, D1 and bad-τ percentages over the masked pixels.
#[pyfunction]
#[pyo3(signature = (pred, gt, mask, foreground = None))]
fn evaluate<'py>(
    py: Python<'py>,
    pred: Vec<f64>,
    gt: Vec<f64>,
    mask: Vec<bool>,
    foreground: Option<Vec<bool>>,
) -> PyResult<Bound<'py, PyDict>> {
    let n = [pred.len()];
    let r = metrics::evaluate(&tensor(pred, &n)?, &tensor(gt, &n)?, &mask, foreground.as_deref()).map_err(err)?;
    let d = PyDict::new(py);
    d.set_item("epe", r.epe)?;
    d.set_item("d1_all", r.d1_all)?;
    d.set_item("d1_bg", r.d1_bg)?;
    d.set_item("d1_fg", r.d1_fg)?;
    d.set_item("bad1", r.bad1)?;
    d.set_item("bad2", r.bad2)?;
    d.set_item("bad3", r.bad3)?;
    d.set_item("num_valid_pixels", r.num_valid_pixels)?;
    Ok(d)
}

#[pymodule]
fn ghost_stereo_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyGhostStereo>()?;
    m.add_function(wrap_pyfunction!(gwc_volume, m)?)?;
    m.add_function(wrap_pyfunction!(topk_regression, m)?)?;
    m.add_function(wrap_pyfunction!(analyze, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_pair, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    Ok(())
}
