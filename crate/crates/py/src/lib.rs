//! Python bindings for the layerforge toolkit.
//!
//! Matrices cross the boundary as nested lists of floats; checkpoints,
//! corpora and predictor sets stay opaque handles on the Rust side.

use std::path::PathBuf;

use layerforge::analysis::{self, Projection2D, TsneParams};
use layerforge::expansion::{self, ExpansionParams, ExpansionPlan, LayerSource, PredictorSet, Strategy};
use layerforge::predictor::PredictorTrainConfig;
use layerforge::trainpipe::{self, FreezeMode, TrainConfig};
use layerforge::{Error, MatrixFamily, ModelConfig, Rng, SvdSpace, Tensor, TransformerCheckpoint};
use pyo3::exceptions::{PyArithmeticError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;

fn to_py(e: Error) -> PyErr {
    let msg = e.to_string();
    match e {
        Error::Io(_) => PyIOError::new_err(msg),
        Error::Numeric(_) => PyArithmeticError::new_err(msg),
        Error::Convergence(_) => PyRuntimeError::new_err(msg),
        _ => PyValueError::new_err(msg),
    }
}

trait IntoPy<T> {
    fn py(self) -> PyResult<T>;
}

impl<T> IntoPy<T> for layerforge::Result<T> {
    fn py(self) -> PyResult<T> {
        self.map_err(to_py)
    }
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    let c = t.cols();
    t.data().chunks(c.max(1)).map(|r| r.to_vec()).collect()
}

fn family(name: &str) -> PyResult<MatrixFamily> {
    name.parse().py()
}

fn strategy(name: &str) -> PyResult<Strategy> {
    name.parse().py()
}

/// A decoder-only model checkpoint.
#[pyclass(name = "Checkpoint", module = "layerforge_py")]
struct PyCheckpoint {
    inner: TransformerCheckpoint,
}

#[pymethods]
impl PyCheckpoint {
    /// Gaussian-initialised model with a byte-level vocabulary.
    #[staticmethod]
    #[pyo3(signature = (n_layers, d_model=64, n_heads=4, d_ff=128, max_seq_len=128, seed=0, std=0.02))]
    fn init(
        n_layers: usize,
        d_model: usize,
        n_heads: usize,
        d_ff: usize,
        max_seq_len: usize,
        seed: u64,
        std: f64,
    ) -> PyResult<Self> {
        let cfg = ModelConfig {
            n_layers,
            d_model,
            n_heads,
            d_ff,
            max_seq_len,
            ..Default::default()
        };
        let mut rng = Rng::derive(seed, "init");
        Ok(PyCheckpoint {
            inner: TransformerCheckpoint::init(cfg, &mut rng, std).py()?,
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        Ok(PyCheckpoint {
            inner: layerforge::load_checkpoint(&path).py()?,
        })
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        layerforge::save_checkpoint(&self.inner, &path).py()
    }

    #[getter]
    fn n_layers(&self) -> usize {
        self.inner.n_layers()
    }

    /// Model configuration as a JSON string.
    #[getter]
    fn config_json(&self) -> PyResult<String> {
        serde_json::to_string(&self.inner.config).map_err(|e| PyValueError::new_err(e.to_string()))
    }

    /// One weight matrix of a 0-based layer, as a list of rows.
    fn matrix(&self, layer: usize, family_name: &str) -> PyResult<Vec<Vec<f32>>> {
        let f = family(family_name)?;
        let l = self
            .inner
            .layers
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))?;
        Ok(rows(l.matrix(f)))
    }

    fn perplexity(&self, eval_sequences: Vec<Vec<u32>>) -> PyResult<f64> {
        layerforge::lm::perplexity(&self.inner, &eval_sequences).py()
    }

    fn bit_eq(&self, other: &PyCheckpoint) -> bool {
        self.inner.bit_eq(&other.inner)
    }

    fn __repr__(&self) -> String {
        let c = &self.inner.config;
        format!(
            "Checkpoint(n_layers={}, d_model={}, n_heads={}, d_ff={})",
            c.n_layers, c.d_model, c.n_heads, c.d_ff
        )
    }
}

/// Byte-level training stream plus held-out evaluation sequences.
#[pyclass(name = "Corpus", module = "layerforge_py")]
struct PyCorpus {
    inner: trainpipe::Corpus,
}

#[pymethods]
impl PyCorpus {
    #[staticmethod]
    #[pyo3(signature = (text, eval_count=100, eval_len=128))]
    fn from_text(text: &str, eval_count: usize, eval_len: usize) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: trainpipe::corpus_from_bytes(text.as_bytes(), eval_count, eval_len).py()?,
        })
    }

    /// Reads a file or every file under a directory.
    #[staticmethod]
    #[pyo3(signature = (path, eval_count=500, eval_len=128))]
    fn from_path(path: PathBuf, eval_count: usize, eval_len: usize) -> PyResult<Self> {
        Ok(PyCorpus {
            inner: trainpipe::ingest(&path, eval_count, eval_len).py()?,
        })
    }

    #[getter]
    fn train_tokens(&self) -> usize {
        self.inner.train.len()
    }

    #[getter]
    fn eval_sequences(&self) -> Vec<Vec<u32>> {
        self.inner.eval.clone()
    }
}

/// Shared SVD basis of one matrix family across layers.
#[pyclass(name = "SvdSpace", module = "layerforge_py")]
struct PySvdSpace {
    inner: SvdSpace,
}

#[pymethods]
impl PySvdSpace {
    #[new]
    fn new(ckpt: &PyCheckpoint, family_name: &str) -> PyResult<Self> {
        Ok(PySvdSpace {
            inner: SvdSpace::of_checkpoint(&ckpt.inner, family(family_name)?).py()?,
        })
    }

    #[getter]
    fn sigma(&self) -> Vec<f32> {
        self.inner.sigma.clone()
    }

    #[getter]
    fn rank(&self) -> usize {
        self.inner.rank()
    }

    /// Coefficient block of a 0-based layer.
    fn coeffs(&self, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        self.inner
            .coeffs
            .get(layer)
            .map(rows)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))
    }

    fn reconstruct_layer(&self, layer: usize) -> PyResult<Vec<Vec<f32>>> {
        let c = self
            .inner
            .coeffs
            .get(layer)
            .ok_or_else(|| PyValueError::new_err(format!("layer {layer} out of range")))?;
        Ok(rows(&self.inner.reconstruct_layer(c).py()?))
    }

    /// Per-layer signature vectors (row 0 of each coefficient block).
    fn signatures(&self) -> Vec<Vec<f64>> {
        analysis::layer_signatures(&self.inner).into_iter().map(|s| s.vector).collect()
    }
}

/// One trained predictor per matrix family.
#[pyclass(name = "PredictorSet", module = "layerforge_py")]
struct PyPredictorSet {
    inner: PredictorSet,
    use_svd: bool,
}

#[pymethods]
impl PyPredictorSet {
    #[getter]
    fn families(&self) -> Vec<String> {
        self.inner.keys().map(|f| f.to_string()).collect()
    }

    #[getter]
    fn use_svd(&self) -> bool {
        self.use_svd
    }
}

#[pyfunction]
#[pyo3(signature = (ckpt, epochs=5, lambda_=5e-5, lr=1e-3, hidden=256, use_svd=true, seed=0))]
fn train_predictors(
    ckpt: &PyCheckpoint,
    epochs: usize,
    lambda_: f64,
    lr: f64,
    hidden: usize,
    use_svd: bool,
    seed: u64,
) -> PyResult<PyPredictorSet> {
    let cfg = PredictorTrainConfig {
        epochs,
        lambda: lambda_,
        lr,
        hidden,
        seed,
        ..Default::default()
    };
    Ok(PyPredictorSet {
        inner: expansion::train_family_predictors(&ckpt.inner, &cfg, use_svd).py()?,
        use_svd,
    })
}

/// Planned layer sources for a strategy, as `(kind, source_layers)` pairs
/// with 1-based source indices.
#[pyfunction]
#[pyo3(signature = (n_layers, strategy_name, interval=None, group_size=None, n_copies=None, n_overlap=None))]
fn plan(
    n_layers: usize,
    strategy_name: &str,
    interval: Option<(usize, usize)>,
    group_size: Option<usize>,
    n_copies: Option<usize>,
    n_overlap: Option<usize>,
) -> PyResult<Vec<(String, Vec<usize>)>> {
    let params = ExpansionParams {
        interval,
        group_size,
        n_copies,
        n_overlap,
        identity_init: false,
    };
    let p = ExpansionPlan::new(n_layers, strategy(strategy_name)?, &params).py()?;
    Ok(p
        .entries
        .iter()
        .map(|e| {
            let kind = match e {
                LayerSource::Original { .. } => "original",
                LayerSource::Synth { .. } => "synth",
                LayerSource::Copy { .. } => "copy",
            };
            (kind.to_string(), e.sources())
        })
        .collect())
}

/// A grown checkpoint together with the plan that produced it.
#[pyclass(name = "Expansion", module = "layerforge_py")]
struct PyExpansion {
    inner: expansion::Expanded,
}

#[pymethods]
impl PyExpansion {
    #[getter]
    fn model(&self) -> PyCheckpoint {
        PyCheckpoint {
            inner: self.inner.model.clone(),
        }
    }

    #[getter]
    fn new_layer_mask(&self) -> Vec<bool> {
        self.inner.new_layer_mask()
    }

    /// 0-based indices of the layers carried over unchanged.
    #[getter]
    fn frozen_layers(&self) -> Vec<usize> {
        self.inner.frozen_layers()
    }

    #[getter]
    fn provenance_json(&self) -> String {
        self.inner.plan.provenance().to_string()
    }

    /// `(family, original_mean_norm, synthesized_mean_norm, ratio)` rows.
    fn norm_report(&self, original: &PyCheckpoint) -> PyResult<Vec<(String, f64, f64, f64)>> {
        Ok(expansion::norm_report(&original.inner, &self.inner)
            .py()?
            .into_iter()
            .map(|r| (r.family.to_string(), r.original_mean_norm, r.synthesized_mean_norm, r.ratio))
            .collect())
    }
}

/// Grows a checkpoint. Learned strategies train predictors unless a
/// matching set is given.
#[pyfunction]
#[pyo3(signature = (ckpt, strategy_name, interval=None, predictors=None, identity_init=false, n_copies=None, group_size=None, n_overlap=None, epochs=5, seed=0))]
#[allow(clippy::too_many_arguments)]
fn expand(
    ckpt: &PyCheckpoint,
    strategy_name: &str,
    interval: Option<(usize, usize)>,
    predictors: Option<&PyPredictorSet>,
    identity_init: bool,
    n_copies: Option<usize>,
    group_size: Option<usize>,
    n_overlap: Option<usize>,
    epochs: usize,
    seed: u64,
) -> PyResult<PyExpansion> {
    let s = strategy(strategy_name)?;
    let params = ExpansionParams {
        interval,
        group_size,
        n_copies,
        identity_init,
        n_overlap,
    };
    let p = ExpansionPlan::new(ckpt.inner.n_layers(), s, &params).py()?;
    let inner = match predictors {
        Some(set) if s.is_learned() => {
            let use_svd = s == Strategy::Lesa;
            if set.use_svd != use_svd {
                return Err(PyValueError::new_err(format!(
                    "predictor set trained with use_svd={}, {s} needs {use_svd}",
                    set.use_svd
                )));
            }
            expansion::expand_lesa(&ckpt.inner, &set.inner, &p, use_svd).py()?
        }
        _ => {
            let cfg = PredictorTrainConfig {
                epochs,
                seed,
                ..Default::default()
            };
            expansion::expand(&ckpt.inner, &p, &cfg).py()?
        }
    };
    Ok(PyExpansion { inner })
}

/// Trains a checkpoint on a corpus. Returns the trained model and the loss
/// curve as `(step, raw_loss, smoothed_loss, lr)` tuples.
#[pyfunction]
#[pyo3(signature = (ckpt, corpus, steps=100, lr=5e-5, batch_size=8, grad_accum=4, cutoff=128, warmup_ratio=0.1, seed=0, frozen_layers=Vec::new()))]
#[allow(clippy::too_many_arguments)]
fn pretrain(
    ckpt: &PyCheckpoint,
    corpus: &PyCorpus,
    steps: usize,
    lr: f64,
    batch_size: usize,
    grad_accum: usize,
    cutoff: usize,
    warmup_ratio: f64,
    seed: u64,
    frozen_layers: Vec<usize>,
) -> PyResult<(PyCheckpoint, Vec<(usize, f64, f64, f64)>)> {
    let cfg = TrainConfig {
        lr,
        batch_size,
        grad_accum_steps: grad_accum,
        cutoff_len: cutoff,
        total_steps: steps,
        warmup_ratio,
        seed,
        freeze_mode: if frozen_layers.is_empty() {
            FreezeMode::None
        } else {
            FreezeMode::NewLayersOnly
        },
        ..Default::default()
    };
    let (m, curve) = trainpipe::pretrain(&ckpt.inner, &corpus.inner, &cfg, &frozen_layers).py()?;
    let pts = curve
        .points
        .iter()
        .map(|p| (p.step, p.raw_loss, p.smoothed_loss, p.lr))
        .collect();
    Ok((PyCheckpoint { inner: m }, pts))
}

fn points(p: Projection2D) -> Vec<(usize, f64, f64)> {
    p.points.into_iter().map(|q| (q.layer, q.x, q.y)).collect()
}

/// PCA to two dimensions: `(layer, x, y)` with 1-based layers.
#[pyfunction]
fn pca2d(vectors: Vec<Vec<f64>>) -> PyResult<Vec<(usize, f64, f64)>> {
    Ok(points(analysis::pca2d(&vectors).py()?))
}

/// Exact t-SNE. Returns the points and the per-iteration KL history.
#[pyfunction]
#[pyo3(signature = (vectors, perplexity=5.0, iterations=1000, seed=0, learning_rate=2.0))]
fn tsne2d(
    vectors: Vec<Vec<f64>>,
    perplexity: f64,
    iterations: usize,
    seed: u64,
    learning_rate: f64,
) -> PyResult<(Vec<(usize, f64, f64)>, Vec<f64>)> {
    let params = TsneParams {
        perplexity,
        iterations,
        seed,
        learning_rate,
    };
    let p = analysis::tsne2d(&vectors, &params).py()?;
    let kl = p.kl_history.clone();
    Ok((points(p), kl))
}

#[pyfunction]
fn synthetic_corpus(seed: u64, n_bytes: usize) -> String {
    trainpipe::synthetic_corpus(seed, n_bytes)
}

#[pyfunction]
fn tokenize(data: &[u8]) -> Vec<u32> {
    trainpipe::tokenize(data)
}

#[pyfunction]
fn detokenize(tokens: Vec<u32>) -> PyResult<Vec<u8>> {
    trainpipe::detokenize(&tokens).py()
}

#[pymodule]
fn layerforge_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyCheckpoint>()?;
    m.add_class::<PyCorpus>()?;
    m.add_class::<PySvdSpace>()?;
    m.add_class::<PyPredictorSet>()?;
    m.add_class::<PyExpansion>()?;
    m.add_function(wrap_pyfunction!(train_predictors, m)?)?;
    m.add_function(wrap_pyfunction!(plan, m)?)?;
    m.add_function(wrap_pyfunction!(expand, m)?)?;
    m.add_function(wrap_pyfunction!(pretrain, m)?)?;
    m.add_function(wrap_pyfunction!(pca2d, m)?)?;
    m.add_function(wrap_pyfunction!(tsne2d, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add_function(wrap_pyfunction!(tokenize, m)?)?;
    m.add_function(wrap_pyfunction!(detokenize, m)?)?;
    m.add("FAMILIES", MatrixFamily::ALL.iter().map(|f| f.name()).collect::<Vec<_>>())?;
    m.add("STRATEGIES", Strategy::ALL.iter().map(|s| s.name()).collect::<Vec<_>>())?;
    Ok(())
}
