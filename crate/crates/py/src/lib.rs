//! Python bindings: config handling, synthetic scene generation, model
//! inference, trajectory metrics, and the gradient audit.

use ndarray::{Array3, ArrayD, IxDyn};
use pyo3::exceptions::PyValueError;
use pyo3::prelude::*;

use bevforecast::config::RunConfig;
use bevforecast::nn::{AdamW, ParamStore};
use bevforecast::scene_sim::{read_dataset, write_dataset, SceneSample};
use bevforecast::traj_decoder::Model;
use bevforecast::{checkpoint, gradcheck, metrics, trainer};

fn err<E: std::fmt::Display>(e: E) -> PyErr {
    PyValueError::new_err(e.to_string())
}

/// Run configuration: construct from a preset, then override individual keys.
#[pyclass(name = "Config")]
#[derive(Clone)]
struct PyConfig {
    inner: RunConfig,
}

#[pymethods]
impl PyConfig {
    #[new]
    #[pyo3(signature = (preset = "small"))]
    fn new(preset: &str) -> PyResult<Self> {
        let inner = match preset {
            "small" => RunConfig::small(),
            "paper" => RunConfig::default(),
            other => return Err(err(format!("unknown preset `{other}`"))),
        };
        Ok(PyConfig { inner })
    }

    /// Sets one config key from its text form, e.g. cfg.set("d_model", "16").
    fn set(&mut self, key: &str, value: &str) -> PyResult<()> {
        self.inner.set_key(key, value).map_err(err)?;
        self.inner.validate().map_err(err)
    }

    fn to_text(&self) -> String {
        self.inner.to_text()
    }

    fn hash(&self) -> String {
        self.inner.hash()
    }

    fn __repr__(&self) -> String {
        format!("Config(hash={})", self.inner.hash())
    }
}

/// One synthetic prediction instance.
#[pyclass(name = "Scene")]
struct PyScene {
    inner: SceneSample,
}

#[pymethods]
impl PyScene {
    #[getter]
    fn scene_id(&self) -> u64 {
        self.inner.scene_id
    }

    #[getter]
    fn n_agents(&self) -> usize {
        self.inner.agents.len()
    }

    #[getter]
    fn target_id(&self) -> u32 {
        self.inner.target_id
    }

    /// Raster shape as (channels, height, width).
    #[getter]
    fn raster_shape(&self) -> (usize, usize, usize) {
        let s = self.inner.raster.channels.shape();
        (s[0], s[1], s[2])
    }

    /// BEV raster channels as a nested (C, H, W) list.
    fn raster(&self) -> Vec<Vec<Vec<f64>>> {
        nested3(&self.inner.raster.channels)
    }

    /// Per-cell segmentation labels as a nested (H, W) list.
    fn seg_labels(&self) -> Vec<Vec<u8>> {
        self.inner
            .seg_labels
            .rows()
            .into_iter()
            .map(|r| r.to_vec())
            .collect()
    }
}

fn nested3(a: &Array3<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = a.shape();
    (0..s[0])
        .map(|i| (0..s[1]).map(|j| (0..s[2]).map(|k| a[[i, j, k]]).collect()).collect())
        .collect()
}

fn nested3_dyn(a: &ArrayD<f64>) -> Vec<Vec<Vec<f64>>> {
    let s = a.shape();
    (0..s[0])
        .map(|i| (0..s[1]).map(|j| (0..s[2]).map(|k| a[[i, j, k]]).collect()).collect())
        .collect()
}

fn nested2_dyn(a: &ArrayD<f64>) -> Vec<Vec<f64>> {
    let s = a.shape();
    (0..s[0]).map(|i| (0..s[1]).map(|j| a[[i, j]]).collect()).collect()
}

/// The full prediction model with its parameter store.
#[pyclass(name = "Model", unsendable)]
struct PyModel {
    cfg: RunConfig,
    model: Model,
    ps: ParamStore,
}

#[pymethods]
impl PyModel {
    #[new]
    fn new(cfg: &PyConfig) -> Self {
        PyModel {
            cfg: cfg.inner.clone(),
            model: Model::from_config(&cfg.inner),
            ps: ParamStore::new(cfg.inner.seed),
        }
    }

    /// Loads trained parameters from a checkpoint written by the CLI.
    fn load_checkpoint(&mut self, path: &str) -> PyResult<()> {
        let mut opt = AdamW::new(self.cfg.weight_decay, self.cfg.grad_clip);
        checkpoint::load_checkpoint(path.as_ref(), &self.cfg, &self.ps, &mut opt).map_err(err)?;
        Ok(())
    }

    /// Runs a forward pass on one scene.
    ///
    /// Returns a dict with "modes" (K, T, 5), "probs" (K,), "goals" (K, 2),
    /// "gt" (T, 2), "gt_valid" (T,), and "n_layers".
    fn predict<'py>(&self, py: Python<'py>, scene: &PyScene) -> PyResult<Bound<'py, pyo3::types::PyDict>> {
        self.ps.clear_step();
        let (pred, input) = self.model.predict(&self.ps, &scene.inner).map_err(err)?;
        let last = pred.layers.last().expect("at least one decoder layer");

        let logits = last.mode_logits.data();
        let mx = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
        let z: f64 = exps.iter().sum();
        let probs: Vec<f64> = exps.iter().map(|e| e / z).collect();

        let t_fut = input.future.shape()[1];
        let gt: Vec<Vec<f64>> = (0..t_fut)
            .map(|s| vec![input.future[[0, s, 0]], input.future[[0, s, 1]]])
            .collect();
        let gt_valid: Vec<bool> = (0..t_fut).map(|s| input.future_valid[[0, s]]).collect();

        let d = pyo3::types::PyDict::new(py);
        d.set_item("modes", nested3_dyn(last.gmm.data()))?;
        d.set_item("probs", probs)?;
        d.set_item("goals", nested2_dyn(pred.goals.goals.data()))?;
        d.set_item("gt", gt)?;
        d.set_item("gt_valid", gt_valid)?;
        d.set_item("n_layers", pred.layers.len())?;
        Ok(d)
    }
}

/// Generates `n` deterministic scenes from a base seed.
#[pyfunction]
fn generate_scenes(cfg: &PyConfig, base_seed: u64, n: usize) -> PyResult<Vec<PyScene>> {
    let samples = trainer::generate_dataset(&cfg.inner, base_seed, n).map_err(err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

/// Writes scenes in the CLI's dataset format.
#[pyfunction]
fn save_dataset(path: &str, scenes: Vec<PyRef<PyScene>>) -> PyResult<()> {
    let samples: Vec<SceneSample> = scenes.iter().map(|s| s.inner.clone()).collect();
    write_dataset(path.as_ref(), &samples).map_err(err)
}

/// Reads a dataset written by the CLI or `save_dataset`.
#[pyfunction]
fn load_dataset(path: &str) -> PyResult<Vec<PyScene>> {
    let samples = read_dataset(path.as_ref()).map_err(err)?;
    Ok(samples.into_iter().map(|inner| PyScene { inner }).collect())
}

fn to_traj(traj: Vec<Vec<Vec<f64>>>) -> PyResult<ArrayD<f64>> {
    let (k, t) = (traj.len(), traj.first().map_or(0, |m| m.len()));
    let mut flat = Vec::with_capacity(k * t * 2);
    for m in &traj {
        if m.len() != t {
            return Err(err("ragged trajectory"));
        }
        for p in m {
            if p.len() != 2 {
                return Err(err("trajectory points must be (x, y)"));
            }
            flat.extend_from_slice(p);
        }
    }
    ArrayD::from_shape_vec(IxDyn(&[k, t, 2]), flat).map_err(err)
}

fn to_gt(y: Vec<Vec<f64>>) -> PyResult<ArrayD<f64>> {
    let t = y.len();
    let mut flat = Vec::with_capacity(t * 2);
    for p in &y {
        if p.len() != 2 {
            return Err(err("ground truth points must be (x, y)"));
        }
        flat.extend_from_slice(p);
    }
    ArrayD::from_shape_vec(IxDyn(&[t, 2]), flat).map_err(err)
}

/// Minimum average displacement error over the top-k most likely modes.
#[pyfunction]
fn min_ade(
    traj: Vec<Vec<Vec<f64>>>,
    probs: Vec<f64>,
    y: Vec<Vec<f64>>,
    mask: Vec<bool>,
    k: usize,
) -> PyResult<Option<f64>> {
    Ok(metrics::min_ade(&to_traj(traj)?, &probs, &to_gt(y)?, &mask, k))
}

/// Minimum final displacement error over the top-k most likely modes.
#[pyfunction]
fn min_fde(
    traj: Vec<Vec<Vec<f64>>>,
    probs: Vec<f64>,
    y: Vec<Vec<f64>>,
    mask: Vec<bool>,
    k: usize,
) -> PyResult<Option<f64>> {
    Ok(metrics::min_fde(&to_traj(traj)?, &probs, &to_gt(y)?, &mask, k))
}

/// Fraction of final displacement errors strictly above the threshold.
#[pyfunction]
fn miss_rate(fdes: Vec<f64>, threshold: f64) -> PyResult<f64> {
    metrics::miss_rate(&fdes, threshold).map_err(err)
}

/// Finite-difference audit of the differentiable kernels.
///
/// Returns a list of (name, max_rel_err, passed) tuples.
#[pyfunction]
#[pyo3(signature = (seed = 0))]
fn run_gradcheck(seed: u64) -> Vec<(String, f64, bool)> {
    gradcheck::run_all(seed, false)
        .into_iter()
        .map(|r| (r.name.to_string(), r.max_rel_err, r.passed))
        .collect()
}

#[pymodule]
fn bevforecast_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyConfig>()?;
    m.add_class::<PyScene>()?;
    m.add_class::<PyModel>()?;
    m.add_function(wrap_pyfunction!(generate_scenes, m)?)?;
    m.add_function(wrap_pyfunction!(save_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(load_dataset, m)?)?;
    m.add_function(wrap_pyfunction!(min_ade, m)?)?;
    m.add_function(wrap_pyfunction!(min_fde, m)?)?;
    m.add_function(wrap_pyfunction!(miss_rate, m)?)?;
    m.add_function(wrap_pyfunction!(run_gradcheck, m)?)?;
    Ok(())
}
