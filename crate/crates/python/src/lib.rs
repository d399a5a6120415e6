//! Python bindings: cubes, model configs, models, checkpoints, training and
//! evaluation. Structured results come back as plain dicts and lists.

use std::path::PathBuf;
use std::sync::Arc;

use dgcnet::hsi::{BandStats, SplitRatio};
use dgcnet::train::{argmax_rows, ensemble_predict_dataset};
use dgcnet::{
    compute_metrics, fit_runs, load_checkpoint, load_cube, save_checkpoint, save_cube, stratified_split, synth_cube,
    Checkpoint, DgcConfig, HsiCube, Model, ModelConfig, PatchDataset, PatchExtractor, Schedule, Shape5, SplitSpec,
    Tensor5, TrainConfig,
};
use pyo3::exceptions::{PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyDict, PyList};
use serde_json::Value;

fn err(e: dgcnet::Error) -> PyErr {
    match e {
        dgcnet::Error::Config(_) | dgcnet::Error::Shape { .. } | dgcnet::Error::Label { .. } => {
            PyValueError::new_err(e.to_string())
        }
        dgcnet::Error::Io { .. } => PyIOError::new_err(e.to_string()),
        _ => PyRuntimeError::new_err(e.to_string()),
    }
}

fn json_err(e: serde_json::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn to_py(py: Python<'_>, v: &Value) -> PyResult<Py<PyAny>> {
    Ok(match v {
        Value::Null => py.None(),
        Value::Bool(b) => b.into_pyobject(py)?.to_owned().into_any().unbind(),
        Value::Number(n) => match (n.as_u64(), n.as_i64()) {
            (Some(u), _) => u.into_pyobject(py)?.into_any().unbind(),
            (None, Some(i)) => i.into_pyobject(py)?.into_any().unbind(),
            _ => n.as_f64().unwrap_or(f64::NAN).into_pyobject(py)?.into_any().unbind(),
        },
        Value::String(s) => s.into_pyobject(py)?.into_any().unbind(),
        Value::Array(a) => {
            let items = a.iter().map(|x| to_py(py, x)).collect::<PyResult<Vec<_>>>()?;
            PyList::new(py, items)?.into_any().unbind()
        }
        Value::Object(o) => {
            let d = PyDict::new(py);
            for (k, x) in o {
                d.set_item(k, to_py(py, x)?)?;
            }
            d.into_any().unbind()
        }
    })
}

fn serialize<T: serde::Serialize>(py: Python<'_>, v: &T) -> PyResult<Py<PyAny>> {
    to_py(py, &serde_json::to_value(v).map_err(json_err)?)
}

/// A labeled hyperspectral cube.
#[pyclass(name = "Cube", module = "dgcnet", skip_from_py_object)]
#[derive(Clone)]
struct PyCube(HsiCube);

#[pymethods]
impl PyCube {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_cube(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_cube(&self.0, path).map_err(err)
    }

    #[getter]
    fn rows(&self) -> usize {
        self.0.rows
    }

    #[getter]
    fn cols(&self) -> usize {
        self.0.cols
    }

    #[getter]
    fn bands(&self) -> usize {
        self.0.bands
    }

    #[getter]
    fn classes(&self) -> usize {
        self.0.classes
    }

    /// Row-major labels, 0 = unlabeled.
    fn labels(&self) -> Vec<u16> {
        self.0.labels.clone()
    }

    fn spectrum(&self, row: usize, col: usize) -> PyResult<Vec<f32>> {
        if row >= self.0.rows || col >= self.0.cols {
            return Err(PyValueError::new_err(format!("pixel ({row}, {col}) outside the raster")));
        }
        Ok(self.0.spectrum(row, col).to_vec())
    }

    /// Pixel count per class, index 0 = class 1.
    fn class_histogram(&self) -> Vec<usize> {
        self.0.class_histogram()
    }

    fn __repr__(&self) -> String {
        format!("Cube({}x{}x{}, {} classes)", self.0.rows, self.0.cols, self.0.bands, self.0.classes)
    }
}

#[pyfunction]
#[pyo3(signature = (seed, rows, cols, bands, classes, noise=0.05))]
fn synth(seed: u64, rows: usize, cols: usize, bands: usize, classes: usize, noise: f64) -> PyResult<PyCube> {
    synth_cube(seed, rows, cols, bands, classes, noise).map(PyCube).map_err(err)
}

#[pyclass(name = "ModelConfig", module = "dgcnet", skip_from_py_object)]
#[derive(Clone)]
struct PyModelConfig(ModelConfig);

#[pymethods]
impl PyModelConfig {
    /// `small`, `base` or `large`.
    #[staticmethod]
    fn preset(name: &str) -> PyResult<Self> {
        ModelConfig::named(name)
            .map(Self)
            .ok_or_else(|| PyValueError::new_err(format!("unknown variant `{name}`")))
    }

    /// Every field optional; missing ones take the `small` values.
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        let cfg: ModelConfig = serde_json::from_str(text).map_err(json_err)?;
        cfg.validate().map_err(err)?;
        Ok(Self(cfg))
    }

    fn to_json(&self) -> String {
        serde_json::to_string(&self.0).expect("config serializes")
    }

    fn to_dict(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.0)
    }

    fn growth_rates(&self) -> Vec<usize> {
        self.0.growth_rates()
    }

    fn classifier_channels(&self) -> usize {
        self.0.classifier_channels()
    }

    fn target_eps(&self) -> f64 {
        self.0.target_eps()
    }

    fn __repr__(&self) -> String {
        format!("ModelConfig({})", self.to_json())
    }
}

#[pyclass(name = "Model", module = "dgcnet", skip_from_py_object)]
#[derive(Clone)]
struct PyModel(Model);

#[pymethods]
impl PyModel {
    #[new]
    #[pyo3(signature = (config, seed=0))]
    fn new(config: &PyModelConfig, seed: u64) -> PyResult<Self> {
        Model::new(config.0.clone(), seed).map(Self).map_err(err)
    }

    #[getter]
    fn config(&self) -> PyModelConfig {
        PyModelConfig(self.0.config().clone())
    }

    fn num_params(&self) -> usize {
        self.0.params().numel()
    }

    fn param_breakdown(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.0.count_params())
    }

    fn param_names(&self) -> Vec<String> {
        self.0.params().iter().map(|p| p.name.clone()).collect()
    }

    /// Per-sample multiply-accumulates at pruning rate `eps` (default: the
    /// target rate).
    #[pyo3(signature = (eps=None))]
    fn macs(&self, py: Python<'_>, eps: Option<f64>) -> PyResult<Py<PyAny>> {
        let eps = eps.unwrap_or_else(|| self.0.config().target_eps());
        serialize(py, &self.0.count_macs(eps).map_err(err)?)
    }

    /// Class probabilities for `n` patches given as one flat list in
    /// `(n, bands, rows, cols)` order.
    fn predict(&self, py: Python<'_>, patches: Vec<f64>, n: usize, eps: f64) -> PyResult<Vec<Vec<f64>>> {
        let [b, r, c] = self.0.config().input_extent;
        let x = Tensor5::from_vec(Shape5::new(n, 1, b, r, c), patches).map_err(err)?;
        let model = &self.0;
        let probs = py.detach(|| model.predict(&x, eps)).map_err(err)?;
        let k = self.0.config().num_classes;
        Ok(probs.data().chunks(k).map(<[f64]>::to_vec).collect())
    }
}

#[pyclass(name = "Checkpoint", module = "dgcnet", from_py_object)]
#[derive(Clone)]
struct PyCheckpoint(Checkpoint);

#[pymethods]
impl PyCheckpoint {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_checkpoint(path).map(Self).map_err(err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        save_checkpoint(&self.0, path).map_err(err)
    }

    #[getter]
    fn eps(&self) -> f64 {
        self.0.eps
    }

    #[getter]
    fn model(&self) -> PyModel {
        PyModel(self.0.model.clone())
    }

    fn attrs(&self, py: Python<'_>) -> PyResult<Py<PyAny>> {
        serialize(py, &self.0.attrs)
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, pyo3::types::PyBytes> {
        pyo3::types::PyBytes::new(py, &self.0.to_bytes())
    }
}

#[pyfunction]
fn keep_count(channels: usize, eps: f64) -> PyResult<usize> {
    dgcnet::keep_count(channels, eps).map_err(err)
}

/// Indices (ascending) of the channels kept at pruning rate `eps`.
#[pyfunction]
fn select_channels(scores: Vec<f64>, eps: f64) -> PyResult<Vec<usize>> {
    dgcnet::select_channels(&scores, eps).map(|s| s.indices).map_err(err)
}

#[pyfunction]
#[pyo3(signature = (in_channels, out_channels, heads, compression, kernel, extent, eps, padding=0))]
#[allow(clippy::too_many_arguments)]
fn dgc_macs(
    py: Python<'_>,
    in_channels: usize,
    out_channels: usize,
    heads: usize,
    compression: usize,
    kernel: usize,
    extent: [usize; 3],
    eps: f64,
    padding: usize,
) -> PyResult<Py<PyAny>> {
    let cfg = DgcConfig {
        in_channels,
        out_channels,
        heads,
        compression,
        gate_factor: 1.0 - eps,
        kernel_size: [kernel; 3],
        padding: [padding; 3],
    };
    cfg.validate().map_err(err)?;
    serialize(py, &dgcnet::dgc_macs(&cfg, extent, eps).map_err(err)?)
}

#[pyfunction]
fn eps_schedule(epochs: usize, target: f64) -> Vec<f64> {
    let s = Schedule::new(epochs, target);
    (0..epochs).map(|e| s.eps(e)).collect()
}

#[pyfunction]
fn metrics(py: Python<'_>, truth: Vec<usize>, predicted: Vec<usize>, classes: usize) -> PyResult<Py<PyAny>> {
    serialize(py, &compute_metrics(&truth, &predicted, classes).map_err(err)?)
}

fn parse_ratio(ratio: &str) -> PyResult<SplitRatio> {
    ratio.parse().map_err(err)
}

/// `(train, val, test)` flat pixel indices.
#[pyfunction]
#[pyo3(signature = (labels, ratio="6:1:3", seed=0))]
fn split(labels: Vec<u16>, ratio: &str, seed: u64) -> PyResult<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    let s = stratified_split(&labels, &SplitSpec { ratio: parse_ratio(ratio)?, seed }).map_err(err)?;
    Ok((s.train, s.val, s.test))
}

struct Data {
    train: PatchDataset,
    val: PatchDataset,
    test: PatchDataset,
}

fn prepare(cube: &HsiCube, patch: usize, ratio: &str, seed: u64) -> PyResult<Data> {
    let s = stratified_split(&cube.labels, &SplitSpec { ratio: parse_ratio(ratio)?, seed }).map_err(err)?;
    let stats = BandStats::from_pixels(cube, &s.train).map_err(err)?;
    let ex = Arc::new(PatchExtractor::new(cube, patch, &stats).map_err(err)?);
    let ds = |px: Vec<usize>| PatchDataset::new(ex.clone(), px).map_err(err);
    Ok(Data {
        train: ds(s.train)?,
        val: ds(s.val)?,
        test: ds(s.test)?,
    })
}

/// Trains `runs` models and returns each run's best checkpoint. `train` is a
/// JSON object with any of the training fields (epochs, learning_rate,
/// batch_size, seed, runs, beta1, beta2, adam_eps).
#[pyfunction]
#[pyo3(signature = (cube, model, patch=11, ratio="6:1:3", split_seed=None, train="{}", out_dir=None, threads=1))]
#[allow(clippy::too_many_arguments)]
fn fit(
    py: Python<'_>,
    cube: &PyCube,
    model: &PyModelConfig,
    patch: usize,
    ratio: &str,
    split_seed: Option<u64>,
    train: &str,
    out_dir: Option<PathBuf>,
    threads: usize,
) -> PyResult<Vec<PyCheckpoint>> {
    let cfg: TrainConfig = serde_json::from_str(train).map_err(json_err)?;
    let data = prepare(&cube.0, patch, ratio, split_seed.unwrap_or(cfg.seed))?;
    let model_cfg = model.0.clone();
    let runs = py
        .detach(|| {
            if let Some(d) = &out_dir {
                std::fs::create_dir_all(d).map_err(|e| dgcnet::Error::Io {
                    path: d.clone(),
                    source: e,
                })?;
            }
            fit_runs(&model_cfg, &data.train, &data.val, &cfg, out_dir.as_deref(), threads)
        })
        .map_err(err)?;
    Ok(runs.into_iter().map(|r| PyCheckpoint(r.best)).collect())
}

/// Ensemble metrics of `checkpoints` on one split (`train`, `val` or `test`)
/// of `cube`, recreated from `ratio` and `split_seed`.
#[pyfunction]
#[pyo3(signature = (checkpoints, cube, patch, ratio="6:1:3", split_seed=0, split="test"))]
fn evaluate(
    py: Python<'_>,
    checkpoints: Vec<PyCheckpoint>,
    cube: &PyCube,
    patch: usize,
    ratio: &str,
    split_seed: u64,
    split: &str,
) -> PyResult<Py<PyAny>> {
    let data = prepare(&cube.0, patch, ratio, split_seed)?;
    let ds = match split {
        "train" => &data.train,
        "val" => &data.val,
        "test" => &data.test,
        other => return Err(PyValueError::new_err(format!("unknown split `{other}`"))),
    };
    let k = cube.0.classes;
    let members: Vec<&Checkpoint> = checkpoints.iter().map(|c| &c.0).collect();
    let m = py
        .detach(|| {
            let probs = ensemble_predict_dataset(&members, ds, 64)?;
            compute_metrics(ds.labels(), &argmax_rows(&probs, k), k)
        })
        .map_err(err)?;
    serialize(py, &m)
}

#[pymodule(name = "dgcnet")]
pub fn dgcnet_module(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCube>()?;
    m.add_class::<PyModelConfig>()?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyCheckpoint>()?;
    m.add_function(wrap_pyfunction!(synth, m)?)?;
    m.add_function(wrap_pyfunction!(keep_count, m)?)?;
    m.add_function(wrap_pyfunction!(select_channels, m)?)?;
    m.add_function(wrap_pyfunction!(dgc_macs, m)?)?;
    m.add_function(wrap_pyfunction!(eps_schedule, m)?)?;
    m.add_function(wrap_pyfunction!(metrics, m)?)?;
    m.add_function(wrap_pyfunction!(split, m)?)?;
    m.add_function(wrap_pyfunction!(fit, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
