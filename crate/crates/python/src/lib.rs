//! Python bindings for the streaming block encoder.
//!
//! Matrices cross the boundary as lists of rows (`list[list[float]]`).

use std::path::PathBuf;

use pyo3::create_exception;
use pyo3::exceptions::{PyOSError, PyValueError};
use pyo3::prelude::*;

use spiral_encoder::block::{self, BlockConfig};
use spiral_encoder::ctc;
use spiral_encoder::encoder::{ctc_head_forward, EncoderWeights, ModelDims};
use spiral_encoder::engine::run_utterance;
use spiral_encoder::formats;
use spiral_encoder::metrics;
use spiral_encoder::schedule::{self, EngineMode, SpiralConfig};
use spiral_encoder::tensor::FeatureMatrix;
use spiral_encoder::trace;
use spiral_encoder::verify;

create_exception!(spiral_encoder_py, SpiralError, PyValueError);

fn err(e: spiral_encoder::SpiralError) -> PyErr {
    match e {
        spiral_encoder::SpiralError::Io(io) => PyOSError::new_err(io.to_string()),
        other => SpiralError::new_err(other.to_string()),
    }
}

fn matrix(rows: Vec<Vec<f32>>) -> PyResult<FeatureMatrix> {
    let cols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || cols == 0 {
        return Err(SpiralError::new_err("matrix must have at least one non-empty row"));
    }
    FeatureMatrix::from_rows(&rows, cols).map_err(err)
}

fn rows(m: &FeatureMatrix) -> Vec<Vec<f32>> {
    m.iter_rows().map(<[f32]>::to_vec).collect()
}

/// Block geometry: left context, chunk and look-ahead in frames.
#[pyclass(name = "BlockConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PyBlockConfig(BlockConfig);

#[pymethods]
impl PyBlockConfig {
    #[new]
    #[pyo3(signature = (n_left, n_center, n_right, frame_ms=40.0))]
    fn new(n_left: usize, n_center: usize, n_right: usize, frame_ms: f64) -> PyResult<Self> {
        let c = BlockConfig::new(n_left, n_center, n_right).with_frame_ms(frame_ms);
        c.validate().map_err(err)?;
        Ok(PyBlockConfig(c))
    }

    #[getter]
    fn n_left(&self) -> usize {
        self.0.n_left
    }

    #[getter]
    fn n_center(&self) -> usize {
        self.0.n_center
    }

    #[getter]
    fn n_right(&self) -> usize {
        self.0.n_right
    }

    #[getter]
    fn frame_ms(&self) -> f64 {
        self.0.frame_ms
    }

    fn window_len(&self) -> usize {
        self.0.window_len()
    }

    /// `(n_center + n_right) * frame_ms`.
    fn max_theoretical_latency(&self) -> f64 {
        metrics::max_theoretical_latency(&self.0)
    }

    fn __repr__(&self) -> String {
        let c = &self.0;
        format!("BlockConfig({}, {}, {}, frame_ms={})", c.n_left, c.n_center, c.n_right, c.frame_ms)
    }
}

/// Layer schedule: depth, skipping pitch, cache flags and mode.
#[pyclass(name = "SpiralConfig", frozen, from_py_object)]
#[derive(Clone)]
struct PySpiralConfig(SpiralConfig);

#[pymethods]
impl PySpiralConfig {
    #[new]
    #[pyo3(signature = (total_layers, pitch=1, cache_combination=true, layer0_cache=false, mode="spiral"))]
    fn new(total_layers: usize, pitch: usize, cache_combination: bool, layer0_cache: bool, mode: &str) -> PyResult<Self> {
        let mode = match mode {
            "spiral" => EngineMode::Spiral,
            "baseline" => EngineMode::Baseline,
            other => return Err(SpiralError::new_err(format!("unknown mode {other:?}"))),
        };
        let c = SpiralConfig {
            total_layers,
            pitch,
            cache_combination,
            layer0_cache,
            mode,
        };
        c.validate().map_err(err)?;
        Ok(PySpiralConfig(c))
    }

    #[staticmethod]
    fn baseline(total_layers: usize) -> PyResult<Self> {
        let c = SpiralConfig::baseline(total_layers);
        c.validate().map_err(err)?;
        Ok(PySpiralConfig(c))
    }

    #[getter]
    fn total_layers(&self) -> usize {
        self.0.total_layers
    }

    #[getter]
    fn pitch(&self) -> usize {
        self.0.pitch
    }

    #[getter]
    fn mode(&self) -> &'static str {
        match self.0.mode {
            EngineMode::Spiral => "spiral",
            EngineMode::Baseline => "baseline",
        }
    }

    fn layers_for_block(&self, b: usize) -> PyResult<Vec<usize>> {
        if b == 0 {
            return Err(SpiralError::new_err("block indices start at 1"));
        }
        self.0.layers_for_shift(self.0.shift_for_block(b)).map_err(err)
    }

    fn exit_for_block(&self, b: usize) -> PyResult<usize> {
        if b == 0 {
            return Err(SpiralError::new_err("block indices start at 1"));
        }
        Ok(self.0.exit_for_shift(self.0.shift_for_block(b)))
    }

    fn evals_per_block(&self) -> usize {
        self.0.evals_per_block()
    }
}

#[pyclass(name = "BlockPlan", frozen, get_all)]
struct PyBlockPlan {
    block_index: usize,
    window_start: usize,
    window_end: usize,
    left_pad: usize,
    chunk_start: usize,
    chunk_end: usize,
    ready_time_ms: f64,
    is_final: bool,
}

#[pymethods]
impl PyBlockPlan {
    fn __repr__(&self) -> String {
        format!(
            "BlockPlan(b={}, window=[{}, {}), chunk=[{}, {}), ready_time_ms={}, is_final={})",
            self.block_index,
            self.window_start,
            self.window_end,
            self.chunk_start,
            self.chunk_end,
            self.ready_time_ms,
            if self.is_final { "True" } else { "False" }
        )
    }
}

#[pyfunction]
fn plan_blocks(total_frames: usize, cfg: PyBlockConfig) -> PyResult<Vec<PyBlockPlan>> {
    let plans = block::plan_blocks(total_frames, &cfg.0).map_err(err)?;
    Ok(plans
        .into_iter()
        .map(|p| PyBlockPlan {
            block_index: p.block_index,
            window_start: p.window_start,
            window_end: p.window_end,
            left_pad: p.left_pad,
            chunk_start: p.chunk_start,
            chunk_end: p.chunk_end,
            ready_time_ms: p.ready_time_ms,
            is_final: p.is_final,
        })
        .collect())
}

#[pyfunction]
fn shift_index(b: usize, p: usize) -> PyResult<usize> {
    if b == 0 || p == 0 {
        return Err(SpiralError::new_err("block index and pitch start at 1"));
    }
    Ok(schedule::shift_index(b, p))
}

#[pyfunction]
fn computed_layers(s: usize, total_layers: usize, p: usize) -> PyResult<Vec<usize>> {
    schedule::computed_layers(s, total_layers, p).map_err(err)
}

#[pyfunction]
fn exit_layer(s: usize, total_layers: usize, p: usize) -> PyResult<usize> {
    schedule::computed_layers(s, total_layers, p).map_err(err)?;
    Ok(schedule::exit_layer(s, total_layers, p))
}

/// Output of [`PyEncoder::run_utterance`].
#[pyclass(name = "EncodeResult", frozen, get_all)]
struct PyEncodeResult {
    encoded: Vec<Vec<f32>>,
    exit_layers: Vec<usize>,
    block_evals: Vec<usize>,
    layer_evals: usize,
    per_shift: Vec<Vec<Vec<f32>>>,
}

/// Encoder weights plus the operations that use them.
#[pyclass(name = "Encoder", frozen)]
struct PyEncoder(EncoderWeights);

#[pymethods]
impl PyEncoder {
    /// Seeded random weights.
    #[staticmethod]
    #[pyo3(signature = (layers, dim, vocab, heads=1, ff_dim=None, seed=0))]
    fn random(layers: usize, dim: usize, vocab: usize, heads: usize, ff_dim: Option<usize>, seed: u64) -> PyResult<Self> {
        if layers == 0 || dim == 0 || heads == 0 || !dim.is_multiple_of(heads) {
            return Err(SpiralError::new_err("need layers >= 1 and dim divisible by heads"));
        }
        let dims = ModelDims {
            layers,
            dim,
            ff_dim: ff_dim.unwrap_or(4 * dim),
            heads,
            vocab,
        };
        Ok(PyEncoder(EncoderWeights::random(dims, seed)))
    }

    /// Read a binary weight file.
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        formats::read_weights(&path).map(PyEncoder).map_err(err)
    }

    /// Write a binary weight file and its JSON manifest.
    fn save(&self, path: PathBuf) -> PyResult<()> {
        formats::write_weights(&path, &self.0).map_err(err)
    }

    #[getter]
    fn layers(&self) -> usize {
        self.0.dims.layers
    }

    #[getter]
    fn dim(&self) -> usize {
        self.0.dims.dim
    }

    #[getter]
    fn vocab(&self) -> usize {
        self.0.dims.vocab
    }

    #[pyo3(signature = (features, block, schedule, capture_exits=false))]
    fn run_utterance(
        &self,
        py: Python<'_>,
        features: Vec<Vec<f32>>,
        block: PyBlockConfig,
        schedule: PySpiralConfig,
        capture_exits: bool,
    ) -> PyResult<PyEncodeResult> {
        let x = matrix(features)?;
        let out = py
            .detach(|| run_utterance(&x, &block.0, &schedule.0, &self.0, capture_exits))
            .map_err(err)?;
        Ok(PyEncodeResult {
            encoded: rows(&out.encoded),
            exit_layers: out.blocks.iter().map(|b| b.exit_layer).collect(),
            block_evals: out.blocks.iter().map(|b| b.layer_evals).collect(),
            layer_evals: out.layer_evals(),
            per_shift: out.per_shift.iter().map(rows).collect(),
        })
    }

    /// Per-frame log-probabilities over `vocab + 1` classes, blank last.
    fn ctc_logprobs(&self, encoded: Vec<Vec<f32>>) -> PyResult<Vec<Vec<f32>>> {
        let lp = ctc_head_forward(&self.0, &matrix(encoded)?).map_err(err)?;
        Ok(rows(&lp))
    }

    /// `(full, per_shift, total)` of the combined multi-exit CTC loss.
    fn combined_loss(
        &self,
        py: Python<'_>,
        features: Vec<Vec<f32>>,
        target: Vec<usize>,
        block: PyBlockConfig,
        schedule: PySpiralConfig,
    ) -> PyResult<(f64, Vec<f64>, f64)> {
        let x = matrix(features)?;
        let l = py
            .detach(|| {
                let out = run_utterance(&x, &block.0, &schedule.0, &self.0, true)?;
                ctc::combined_loss(&out.per_shift, &out.encoded, &target, &self.0)
            })
            .map_err(err)?;
        Ok((l.full, l.per_shift, l.total))
    }
}

#[pyfunction]
fn ctc_loss(logprobs: Vec<Vec<f32>>, target: Vec<usize>) -> PyResult<f64> {
    ctc::ctc_loss(&matrix(logprobs)?, &target).map_err(err)
}

/// `(loss, gradient)` with respect to pre-softmax logits.
#[pyfunction]
fn ctc_loss_grad(logits: Vec<Vec<f64>>, target: Vec<usize>) -> PyResult<(f64, Vec<Vec<f64>>)> {
    let classes = logits.first().map_or(0, Vec::len);
    if logits.iter().any(|r| r.len() != classes) {
        return Err(SpiralError::new_err("ragged logits"));
    }
    let flat: Vec<f64> = logits.concat();
    let (loss, grad) = ctc::ctc_loss_grad_f64(&flat, classes, &target).map_err(err)?;
    Ok((loss, grad.chunks(classes).map(<[f64]>::to_vec).collect()))
}

/// `[(token_id, frame_index), ...]` after collapsing repeats and dropping blanks.
#[pyfunction]
fn greedy_decode(logprobs: Vec<Vec<f32>>) -> PyResult<Vec<(usize, usize)>> {
    Ok(ctc::greedy_decode(&matrix(logprobs)?)
        .into_iter()
        .map(|t| (t.token_id, t.frame_index))
        .collect())
}

#[pyfunction]
fn percentile(values: Vec<f64>, q: f64) -> PyResult<f64> {
    metrics::percentile(&values, q).map_err(err)
}

#[pyfunction]
fn max_theoretical_latency(cfg: PyBlockConfig) -> f64 {
    metrics::max_theoretical_latency(&cfg.0)
}

/// Sorted `(block, layer, frame)` cells that feed block `b`'s output.
#[pyfunction]
fn trace_dependencies(b: usize, block: PyBlockConfig, schedule: PySpiralConfig) -> PyResult<Vec<(usize, usize, usize)>> {
    if b == 0 {
        return Err(SpiralError::new_err("block indices start at 1"));
    }
    let cells = trace::trace_dependencies(b, &block.0, &schedule.0).map_err(err)?;
    Ok(cells.into_iter().map(|c| (c.block, c.layer, c.frame)).collect())
}

/// `[(name, passed, detail), ...]` for one invariant suite.
#[pyfunction]
fn run_suite(py: Python<'_>, name: &str) -> PyResult<Vec<(String, bool, String)>> {
    let suite = verify::Suite::ALL
        .into_iter()
        .find(|s| s.name() == name)
        .ok_or_else(|| SpiralError::new_err(format!("unknown suite {name:?}")))?;
    let checks = py.detach(|| verify::run_suite(suite)).map_err(err)?;
    Ok(checks.into_iter().map(|c| (c.name, c.passed, c.detail)).collect())
}

#[pyfunction]
fn read_features(path: PathBuf) -> PyResult<Vec<Vec<f32>>> {
    formats::read_features_any(&path).map(|m| rows(&m)).map_err(err)
}

#[pyfunction]
fn write_features(path: PathBuf, features: Vec<Vec<f32>>) -> PyResult<()> {
    formats::write_features(&path, &matrix(features)?).map_err(err)
}

#[pymodule]
fn spiral_encoder_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add("SpiralError", m.py().get_type::<SpiralError>())?;
    m.add_class::<PyBlockConfig>()?;
    m.add_class::<PySpiralConfig>()?;
    m.add_class::<PyBlockPlan>()?;
    m.add_class::<PyEncoder>()?;
    m.add_class::<PyEncodeResult>()?;
    m.add_function(wrap_pyfunction!(plan_blocks, m)?)?;
    m.add_function(wrap_pyfunction!(shift_index, m)?)?;
    m.add_function(wrap_pyfunction!(computed_layers, m)?)?;
    m.add_function(wrap_pyfunction!(exit_layer, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss, m)?)?;
    m.add_function(wrap_pyfunction!(ctc_loss_grad, m)?)?;
    m.add_function(wrap_pyfunction!(greedy_decode, m)?)?;
    m.add_function(wrap_pyfunction!(percentile, m)?)?;
    m.add_function(wrap_pyfunction!(max_theoretical_latency, m)?)?;
    m.add_function(wrap_pyfunction!(trace_dependencies, m)?)?;
    m.add_function(wrap_pyfunction!(run_suite, m)?)?;
    m.add_function(wrap_pyfunction!(read_features, m)?)?;
    m.add_function(wrap_pyfunction!(write_features, m)?)?;
    Ok(())
}
