//! Python bindings: attention energy, logit remapping, trace replay and the
//! grid-model checks.

use std::path::PathBuf;

use lascd_core::energy::{self, AttentionSlice as CoreSlice};
use lascd_core::engine::{ConfigEcho, DecodeSummary};
use lascd_core::remap::{self, LogitView as CoreView, MaskBasis, RemapConfig as CoreConfig};
use lascd_core::theory::{self, GridGraph, TheoryConfig};
use lascd_core::trace::{file_digest, load_trace, open_trace, validate_trace};
use lascd_core::{
    CandidateLayerSet, DecodeMode, DecodePolicy, Direction, EnergyBasis, Error, ErrorClass, Signal,
    SpectralKernel, VisualLayout,
};
use pyo3::create_exception;
use pyo3::exceptions::PyException;
use pyo3::prelude::*;
use serde::Serialize;

create_exception!(lascd, LascdError, PyException, "Invalid input or configuration.");
create_exception!(lascd, TraceContractError, LascdError, "Trace lacks data the request needs.");

fn to_py(e: Error) -> PyErr {
    match e.class() {
        ErrorClass::Validation => LascdError::new_err(e.to_string()),
        ErrorClass::TraceContract => TraceContractError::new_err(e.to_string()),
    }
}

fn parsed<T: std::str::FromStr<Err = Error>>(text: &str) -> PyResult<T> {
    text.parse().map_err(to_py)
}

fn to_object<'py, T: Serialize>(py: Python<'py>, value: &T) -> PyResult<Bound<'py, PyAny>> {
    let text = serde_json::to_string(value).map_err(|e| LascdError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (text,))
}

/// Per-head attention over the visual tokens of one layer.
#[pyclass(frozen, module = "lascd")]
struct AttentionSlice(CoreSlice);

#[pymethods]
impl AttentionSlice {
    /// `rows` holds one list per head, all of equal length.
    #[new]
    #[pyo3(signature = (rows, layer = 0))]
    fn new(rows: Vec<Vec<f64>>, layer: usize) -> PyResult<Self> {
        CoreSlice::from_rows(layer, &rows).map(Self).map_err(to_py)
    }

    #[getter]
    fn layer(&self) -> usize {
        self.0.layer()
    }

    #[getter]
    fn heads(&self) -> usize {
        self.0.heads()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }

    fn head_average(&self) -> Vec<f64> {
        self.0.head_average()
    }

    fn __repr__(&self) -> String {
        format!("AttentionSlice(layer={}, heads={}, len={})", self.0.layer(), self.0.heads(), self.0.len())
    }
}

/// Logits over a step's candidate ids, optionally with the layer's top probability.
#[pyclass(frozen, module = "lascd")]
struct LogitView(CoreView);

#[pymethods]
impl LogitView {
    #[new]
    #[pyo3(signature = (token_ids, values, layer = 0, pi_max = None))]
    fn new(token_ids: Vec<u32>, values: Vec<f64>, layer: usize, pi_max: Option<f64>) -> PyResult<Self> {
        CoreView::new(layer, token_ids, values, pi_max).map(Self).map_err(to_py)
    }

    #[getter]
    fn token_ids(&self) -> Vec<u32> {
        self.0.token_ids().to_vec()
    }

    #[getter]
    fn values(&self) -> Vec<f64> {
        self.0.values().to_vec()
    }

    #[getter]
    fn pi_max(&self) -> Option<f64> {
        self.0.pi_max()
    }

    fn __len__(&self) -> usize {
        self.0.len()
    }
}

#[pyclass(module = "lascd", get_all, set_all, skip_from_py_object)]
#[derive(Clone)]
struct RemapConfig {
    alpha: f64,
    beta: f64,
    top_k: usize,
    top_p: f64,
    mask_basis: String,
}

#[pymethods]
impl RemapConfig {
    #[new]
    #[pyo3(signature = (alpha = 0.1, beta = 0.0, top_k = 10, top_p = 0.9, mask_basis = "final".to_string()))]
    fn new(alpha: f64, beta: f64, top_k: usize, top_p: f64, mask_basis: String) -> PyResult<Self> {
        let cfg = Self {
            alpha,
            beta,
            top_k,
            top_p,
            mask_basis,
        };
        cfg.core()?;
        Ok(cfg)
    }

    fn __repr__(&self) -> String {
        format!(
            "RemapConfig(alpha={}, beta={}, top_k={}, top_p={}, mask_basis={:?})",
            self.alpha, self.beta, self.top_k, self.top_p, self.mask_basis
        )
    }
}

impl RemapConfig {
    fn core(&self) -> PyResult<CoreConfig> {
        let cfg = CoreConfig {
            alpha: self.alpha,
            beta: self.beta,
            top_k: self.top_k,
            top_p: self.top_p,
            mask_basis: parsed::<MaskBasis>(&self.mask_basis)?,
        };
        cfg.validate().map_err(to_py)?;
        Ok(cfg)
    }
}

fn config_or_default(cfg: Option<&RemapConfig>) -> PyResult<CoreConfig> {
    cfg.map_or(Ok(CoreConfig::default()), RemapConfig::core)
}

fn layout(n_visual: usize, grid: Option<(usize, usize)>) -> PyResult<VisualLayout> {
    VisualLayout::new(n_visual, grid).map_err(to_py)
}

/// Head-averaged high-pass energy of the slice.
#[pyfunction]
#[pyo3(signature = (slice, grid = None, kernel = "laplacian2d", basis = "raw"))]
fn layer_energy(slice: &AttentionSlice, grid: Option<(usize, usize)>, kernel: &str, basis: &str) -> PyResult<f64> {
    let layout = layout(slice.0.len(), grid)?;
    energy::layer_energy_in_basis(&slice.0, &layout, &parsed::<SpectralKernel>(kernel)?, parsed::<EnergyBasis>(basis)?)
        .map_err(to_py)
}

/// Sum of the head-averaged row.
#[pyfunction]
fn visual_mass(slice: &AttentionSlice) -> f64 {
    energy::visual_mass(&slice.0)
}

/// Entropy in nats of the renormalized head-averaged row.
#[pyfunction]
fn shannon_entropy(slice: &AttentionSlice) -> PyResult<f64> {
    energy::shannon_entropy(&slice.0).map_err(to_py)
}

#[pyfunction]
fn softmax(values: Vec<f64>) -> PyResult<Vec<f64>> {
    remap::softmax(&values).map_err(to_py)
}

/// Ids kept by the top-k and nucleus filters of the final distribution.
#[pyfunction]
#[pyo3(signature = (final_view, config = None))]
fn candidate_mask(final_view: &LogitView, config: Option<&RemapConfig>) -> PyResult<Vec<u32>> {
    remap::candidate_mask(&final_view.0, &config_or_default(config)?).map_err(to_py)
}

/// Remapped logits as a dict: `chosen`, `beta_eff`, `token_ids` and `values`
/// with `None` for masked tokens.
#[pyfunction]
#[pyo3(signature = (final_view, peak, gt, config = None))]
fn compose_full<'py>(
    py: Python<'py>,
    final_view: &LogitView,
    peak: &LogitView,
    gt: &LogitView,
    config: Option<&RemapConfig>,
) -> PyResult<Bound<'py, PyAny>> {
    let out = remap::compose_full(&final_view.0, &peak.0, &gt.0, &config_or_default(config)?).map_err(to_py)?;
    let dict = pyo3::types::PyDict::new(py);
    dict.set_item("token_ids", out.token_ids)?;
    dict.set_item("values", out.values)?;
    dict.set_item("chosen", out.chosen)?;
    dict.set_item("beta_eff", out.beta_eff)?;
    Ok(dict.into_any())
}

/// Manifest of a trace file as a dict, plus `step_count_read`.
#[pyfunction]
fn load_manifest<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let trace = load_trace(&path).map_err(to_py)?;
    let obj = to_object(py, &trace.manifest)?;
    obj.set_item("step_count_read", trace.steps.len())?;
    Ok(obj)
}

/// Runs every contract check on a trace file.
#[pyfunction]
fn validate<'py>(py: Python<'py>, path: PathBuf) -> PyResult<Bound<'py, PyAny>> {
    let report = validate_trace(&path).map_err(to_py)?;
    let obj = to_object(py, &report)?;
    obj.set_item("passed", report.passed())?;
    Ok(obj)
}

/// Replays a trace and returns the decode summary as a dict.
#[pyfunction]
#[pyo3(signature = (
    path, alpha = 0.1, beta = 0.0, top_k = 10, top_p = 0.9, mode = "lascd", signal = "energy",
    direction = "max", layers = "8:29", kernel = "laplacian2d", energy_basis = "raw",
    mask_basis = "final", watch_tokens = None
))]
#[allow(clippy::too_many_arguments)]
fn decode<'py>(
    py: Python<'py>,
    path: PathBuf,
    alpha: f64,
    beta: f64,
    top_k: usize,
    top_p: f64,
    mode: &str,
    signal: &str,
    direction: &str,
    layers: &str,
    kernel: &str,
    energy_basis: &str,
    mask_basis: &str,
    watch_tokens: Option<Vec<String>>,
) -> PyResult<Bound<'py, PyAny>> {
    let signal = parsed::<Signal>(signal)?;
    let direction = parsed::<Direction>(direction)?;
    let mode = match parsed::<DecodeMode>(mode)? {
        DecodeMode::Lascd if signal != Signal::Energy || direction != Direction::Max => {
            DecodeMode::Ablation { signal, direction }
        }
        m => m,
    };
    let policy = DecodePolicy {
        mode,
        remap: CoreConfig {
            alpha,
            beta,
            top_k,
            top_p,
            mask_basis: parsed(mask_basis)?,
        },
        candidates: parsed::<CandidateLayerSet>(layers)?,
        kernel: parsed(kernel)?,
        energy_basis: parsed(energy_basis)?,
    };
    let summary = py
        .detach(|| -> Result<DecodeSummary, Error> {
            let (manifest, steps) = open_trace(&path)?;
            let watch_ids = match &watch_tokens {
                None => manifest.watch_token_ids.clone(),
                Some(given) => given
                    .iter()
                    .map(|t| t.trim().parse::<u32>().or_else(|_| manifest.token_id_for(t.trim())))
                    .collect::<Result<_, _>>()?,
            };
            let run = lascd_core::run_decode(&manifest, steps, &policy, &watch_ids)?;
            let digest = file_digest(&path)?;
            Ok(DecodeSummary::new(&run, &manifest, ConfigEcho::new(&policy, &watch_ids), digest))
        })
        .map_err(to_py)?;
    to_object(py, &summary)
}

/// Numerical checks of the grid energy bounds; returns the full report.
#[pyfunction]
#[pyo3(signature = (grid = (16, 16), samples = 20000, sigma = 0.005, seed = 0x5eed))]
fn verify_theory<'py>(
    py: Python<'py>,
    grid: (usize, usize),
    samples: usize,
    sigma: f64,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let cfg = TheoryConfig {
        grid: GridGraph::new(grid.0, grid.1).map_err(to_py)?,
        samples,
        sigma,
        seed,
        ..TheoryConfig::default()
    };
    let report = py.detach(|| theory::verify_theory(&cfg)).map_err(to_py)?;
    to_object(py, &report)
}

#[pymodule]
fn lascd(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("LascdError", m.py().get_type::<LascdError>())?;
    m.add("TraceContractError", m.py().get_type::<TraceContractError>())?;
    m.add_class::<AttentionSlice>()?;
    m.add_class::<LogitView>()?;
    m.add_class::<RemapConfig>()?;
    m.add_function(wrap_pyfunction!(layer_energy, m)?)?;
    m.add_function(wrap_pyfunction!(visual_mass, m)?)?;
    m.add_function(wrap_pyfunction!(shannon_entropy, m)?)?;
    m.add_function(wrap_pyfunction!(softmax, m)?)?;
    m.add_function(wrap_pyfunction!(candidate_mask, m)?)?;
    m.add_function(wrap_pyfunction!(compose_full, m)?)?;
    m.add_function(wrap_pyfunction!(load_manifest, m)?)?;
    m.add_function(wrap_pyfunction!(validate, m)?)?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(verify_theory, m)?)?;
    m.add("__version__", env!("CARGO_PKG_VERSION"))?;
    Ok(())
}
