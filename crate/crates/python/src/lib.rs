//! Python bindings. Structured results cross the boundary as plain dicts and
//! lists (through their JSON form); errors raise `pimforge.PimforgeError`.

use std::path::{Path, PathBuf};

use pimforge::bitserial::{bitwise_conv2d as conv2d, OperandBits, TraceMode};
use pimforge::config::{load_config, CompressConfig, MapConfig, ReportConfig, SimulateConfig, VerifyConfig};
use pimforge::cost::{estimate, CostParams};
use pimforge::mapper::{build_layout, layout_stats, PimLayout, RemovalMode, SimulationTrace, Simulator};
use pimforge::nn::Dataset;
use pimforge::pipeline::{self, Event};
use pimforge::sparsity::{self, GroupKind, SparsityConstraint};
use pimforge::{verify, LayerShape, Model, WeightTensor4D};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use pyo3::types::PyAny;
use serde::Serialize;

create_exception!(pimforge, PimforgeError, PyException);

fn err(e: impl std::fmt::Display) -> PyErr {
    PimforgeError::new_err(e.to_string())
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(err)?;
    py.import("json")?.call_method1("loads", (s,))
}

fn kind(name: &str) -> PyResult<GroupKind> {
    match name {
        "filter" => Ok(GroupKind::Filter),
        "channel" => Ok(GroupKind::Channel),
        "kernel" => Ok(GroupKind::Kernel),
        _ => Err(err(format!("unknown group kind {name:?}; expected filter, channel or kernel"))),
    }
}

fn mode(name: &str) -> PyResult<RemovalMode> {
    match name {
        "physical" => Ok(RemovalMode::Physical),
        "lut" => Ok(RemovalMode::Lut),
        _ => Err(err(format!("unknown mode {name:?}; expected physical or lut"))),
    }
}

/// Exact bit-serial convolution of unsigned input codes with signed weight
/// codes. Returns the integer output and the operation counts.
#[pyfunction]
#[pyo3(signature = (input, dims, weights, shape, input_bits, weight_bits, stride=1))]
#[allow(clippy::too_many_arguments)]
fn bitwise_conv2d<'py>(
    py: Python<'py>,
    input: Vec<i64>,
    dims: (usize, usize, usize),
    weights: Vec<i64>,
    shape: (usize, usize, usize, usize),
    input_bits: u32,
    weight_bits: u32,
    stride: usize,
) -> PyResult<(Vec<i64>, Bound<'py, PyAny>)> {
    let s = LayerShape::conv(shape.0, shape.1, shape.2, shape.3, stride);
    let bits = OperandBits { input: input_bits, weight: weight_bits, signed_weights: true };
    let (out, trace) = conv2d(&input, [dims.0, dims.1, dims.2], &weights, &s, bits, TraceMode::Logical).map_err(err)?;
    Ok((out, to_py(py, &trace)?))
}

/// Euclidean projection of a `(F, C, KH, KW)` tensor onto "at most `budget`
/// nonzero groups".
#[pyfunction]
fn project(values: Vec<f64>, shape: (usize, usize, usize, usize), kind_name: &str, budget: usize) -> PyResult<Vec<f64>> {
    let w = WeightTensor4D::new(LayerShape::conv(shape.0, shape.1, shape.2, shape.3, 1), values).map_err(err)?;
    let c = SparsityConstraint::new(kind(kind_name)?, budget).map_err(err)?;
    Ok(sparsity::project(&w, &c).map_err(err)?.into_values())
}

#[pyclass(name = "Model", module = "pimforge", frozen)]
struct PyModel {
    inner: Model,
}

#[pymethods]
impl PyModel {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyModel { inner: Model::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    #[getter]
    fn num_layers(&self) -> usize {
        self.inner.num_layers()
    }

    #[getter]
    fn is_quantized(&self) -> bool {
        self.inner.is_quantized()
    }

    fn sparsity<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &self.inner.sparsity_report())
    }

    fn weights(&self, layer: usize) -> PyResult<Vec<f64>> {
        let l = self.inner.layers().get(layer).ok_or_else(|| err(format!("no layer {layer}")))?;
        Ok(l.weights.values().to_vec())
    }

    fn to_dict<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        let s = self.inner.to_json().map_err(err)?;
        py.import("json")?.call_method1("loads", (s,))
    }

    fn __repr__(&self) -> String {
        format!("Model(layers={}, quantized={})", self.inner.num_layers(), self.inner.is_quantized())
    }
}

#[pyclass(name = "Layout", module = "pimforge", frozen)]
struct PyLayout {
    inner: PimLayout,
}

#[pymethods]
impl PyLayout {
    /// Maps a quantized model; `mode` is "physical" or "lut".
    #[staticmethod]
    #[pyo3(signature = (model, mode="physical"))]
    fn build(model: &PyModel, mode: &str) -> PyResult<Self> {
        Ok(PyLayout { inner: build_layout(&model.inner, None, self::mode(mode)?).map_err(err)? })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyLayout { inner: PimLayout::load(&path).map_err(err)? })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn stats<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, &layout_stats(&self.inner))
    }

    /// Logits for one flattened input sample.
    fn infer(&self, py: Python<'_>, x: Vec<f64>) -> PyResult<Vec<f64>> {
        py.detach(|| Simulator::new(&self.inner).and_then(|s| s.run(&x)).map(|r| r.0)).map_err(err)
    }

    /// Runs `samples` (flattened, `dims` each) and returns the logits and
    /// the cost report under `cost_params` (defaults when omitted).
    #[pyo3(signature = (samples, dims, cost_params=None))]
    fn simulate<'py>(
        &self,
        py: Python<'py>,
        samples: Vec<Vec<f64>>,
        dims: (usize, usize, usize),
        cost_params: Option<PathBuf>,
    ) -> PyResult<(Vec<Vec<f64>>, Bound<'py, PyAny>)> {
        let params = match cost_params {
            Some(p) => CostParams::load(&p).map_err(err)?,
            None => CostParams::default(),
        };
        let n = samples.len();
        let data = Dataset::new([dims.0, dims.1, dims.2], 1, samples.concat(), vec![0; n]).map_err(err)?;
        let (logits, trace): (Vec<Vec<f64>>, SimulationTrace) =
            py.detach(|| Simulator::new(&self.inner).and_then(|s| s.run_dataset(&data))).map_err(err)?;
        let report = estimate(&self.inner, &trace, &params).map_err(err)?;
        Ok((logits, to_py(py, &report)?))
    }

    fn __repr__(&self) -> String {
        let s = layout_stats(&self.inner).total;
        format!("Layout(mode={:?}, pes={}, weight_subarrays={})", self.inner.mode, s.pes, s.weight_subarrays)
    }
}

/// Collects job events as dicts.
fn collect<T>(
    py: Python<'_>,
    job: impl FnOnce(&mut dyn FnMut(&Event)) -> pimforge::Result<T> + Send,
) -> PyResult<(T, Vec<String>)>
where
    T: Send,
{
    py.detach(|| {
        let mut events = Vec::new();
        let mut sink = |e: &Event| events.push(serde_json::to_string(e).unwrap_or_default());
        job(&mut sink).map(|r| (r, events))
    })
    .map_err(err)
}

fn config<T: serde::de::DeserializeOwned>(path: &Path) -> PyResult<(T, PathBuf)> {
    load_config(path).map_err(err)
}

/// Runs the compress job described by the config file; returns the log.
#[pyfunction]
#[pyo3(signature = (config_path, seed=None))]
fn compress<'py>(py: Python<'py>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, base) = config::<CompressConfig>(&config_path)?;
    let (out, _) = collect(py, |s| pipeline::run_compress(&cfg, &base, seed, s))?;
    to_py(py, &out.log)
}

/// Runs the map job; returns the layout statistics.
#[pyfunction]
#[pyo3(signature = (config_path, seed=None))]
fn map<'py>(py: Python<'py>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, base) = config::<MapConfig>(&config_path)?;
    let ((_, stats), _) = collect(py, |s| pipeline::run_map(&cfg, &base, seed, s))?;
    to_py(py, &stats)
}

/// Runs the simulate job; returns the outputs summary.
#[pyfunction]
#[pyo3(signature = (config_path, seed=None))]
fn simulate<'py>(py: Python<'py>, config_path: PathBuf, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, base) = config::<SimulateConfig>(&config_path)?;
    let ((outputs, _), _) = collect(py, |s| pipeline::run_simulate(&cfg, &base, seed, s))?;
    to_py(py, &outputs)
}

/// Runs the report job; returns the cost report.
#[pyfunction]
#[pyo3(signature = (config_path, compare=None))]
fn report<'py>(py: Python<'py>, config_path: PathBuf, compare: Option<PathBuf>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, base) = config::<ReportConfig>(&config_path)?;
    let (r, _) = collect(py, |s| pipeline::run_report(&cfg, &base, compare.as_deref(), s))?;
    to_py(py, &r)
}

/// Runs the correctness suites; returns the verification report.
#[pyfunction]
#[pyo3(signature = (config_path=None, seed=None))]
fn run_verify<'py>(py: Python<'py>, config_path: Option<PathBuf>, seed: Option<u64>) -> PyResult<Bound<'py, PyAny>> {
    let (cfg, base) = match config_path {
        Some(p) => config::<VerifyConfig>(&p)?,
        None => (VerifyConfig::default(), PathBuf::from(".")),
    };
    let (r, _) = collect(py, |s| verify::run_verify(&cfg, &base, seed, s))?;
    to_py(py, &r)
}

#[pymodule]
#[pyo3(name = "pimforge")]
fn pimforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("PimforgeError", m.py().get_type::<PimforgeError>())?;
    m.add_class::<PyModel>()?;
    m.add_class::<PyLayout>()?;
    m.add_function(wrap_pyfunction!(bitwise_conv2d, m)?)?;
    m.add_function(wrap_pyfunction!(project, m)?)?;
    m.add_function(wrap_pyfunction!(compress, m)?)?;
    m.add_function(wrap_pyfunction!(map, m)?)?;
    m.add_function(wrap_pyfunction!(simulate, m)?)?;
    m.add_function(wrap_pyfunction!(report, m)?)?;
    m.add_function(wrap_pyfunction!(run_verify, m)?)?;
    Ok(())
}
