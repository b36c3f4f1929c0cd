//! Python bindings: plans, grouped attention, the similarity metric and
//! the training harness.
//!
//! Tensors cross the boundary as a flat list of floats plus a shape list.

use std::fs::File;
use std::path::PathBuf;

use pyo3::exceptions::{PyIOError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyBytes;

use randattn::attention::{
    block_mask_attention_oracle, grouped_self_attention, pooled_group_attention, AttentionWeights,
};
use randattn::backbone::Backbone;
use randattn::diagnostics::head_similarity;
use randattn::harness::{evaluate, load_datasets, train, ExperimentConfig};
use randattn::randgroup::{deserialize_plan, serialize_plan, GroupPlan, GroupingMode};
use randattn::rng::SplitMix64;
use randattn::TensorF;

fn err(e: randattn::Error) -> PyErr {
    PyValueError::new_err(e.to_string())
}

fn tensor(data: Vec<f64>, shape: Vec<usize>) -> PyResult<TensorF> {
    TensorF::new(shape, data).map_err(err)
}

fn split(t: TensorF) -> (Vec<f64>, Vec<usize>) {
    let shape = t.shape().to_vec();
    (t.into_data(), shape)
}

/// A token-grouping plan.
#[pyclass(name = "Plan", module = "randattn_py", frozen)]
struct PyPlan {
    inner: GroupPlan,
}

#[pymethods]
impl PyPlan {
    #[new]
    #[pyo3(signature = (seed, n_heads, height, width, group_size, mode = "per-head-fixed"))]
    fn new(
        seed: u64,
        n_heads: usize,
        height: usize,
        width: usize,
        group_size: usize,
        mode: &str,
    ) -> PyResult<Self> {
        let mode = GroupingMode::parse(mode).map_err(err)?;
        let inner =
            GroupPlan::generate(seed, n_heads, height, width, group_size, mode).map_err(err)?;
        Ok(Self { inner })
    }

    #[staticmethod]
    fn from_bytes(data: &[u8]) -> PyResult<Self> {
        Ok(Self {
            inner: deserialize_plan(data).map_err(err)?,
        })
    }

    fn to_bytes<'py>(&self, py: Python<'py>) -> Bound<'py, PyBytes> {
        PyBytes::new(py, &serialize_plan(&self.inner))
    }

    #[pyo3(signature = (height, width, group_size = None))]
    fn interpolate(
        &self,
        height: usize,
        width: usize,
        group_size: Option<usize>,
    ) -> PyResult<Self> {
        let gs = group_size.unwrap_or(self.inner.group_size());
        Ok(Self {
            inner: self.inner.interpolate(height, width, gs).map_err(err)?,
        })
    }

    fn perm(&self, head: usize) -> PyResult<Vec<usize>> {
        self.check_head(head)?;
        Ok(self.inner.perm(head).to_vec())
    }

    fn inv_perm(&self, head: usize) -> PyResult<Vec<usize>> {
        self.check_head(head)?;
        Ok(self.inner.inv_perm(head).to_vec())
    }

    fn values(&self, head: usize) -> PyResult<Vec<f64>> {
        self.check_head(head)?;
        Ok(self.inner.p_values(head).to_vec())
    }

    /// Token lists of every group of `head`, padding excluded.
    fn groups(&self, head: usize) -> PyResult<Vec<Vec<usize>>> {
        self.check_head(head)?;
        Ok(self.inner.assignment().groups(head))
    }

    #[getter]
    fn seed(&self) -> u64 {
        self.inner.seed()
    }
    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }
    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }
    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }
    #[getter]
    fn group_size(&self) -> usize {
        self.inner.group_size()
    }
    #[getter]
    fn n_pad(&self) -> usize {
        self.inner.n_pad()
    }
    #[getter]
    fn mode(&self) -> String {
        self.inner.mode().label()
    }

    fn __eq__(&self, other: &Self) -> bool {
        self.inner == other.inner
    }

    fn __repr__(&self) -> String {
        format!(
            "Plan(seed={}, heads={}, grid={}x{}, group_size={}, mode={})",
            self.inner.seed(),
            self.inner.n_heads(),
            self.inner.height(),
            self.inner.width(),
            self.inner.group_size(),
            self.inner.mode().label()
        )
    }
}

impl PyPlan {
    fn check_head(&self, head: usize) -> PyResult<()> {
        if head < self.inner.n_heads() {
            Ok(())
        } else {
            Err(PyValueError::new_err(format!("head {head} out of range")))
        }
    }
}

/// Projection weights of one attention layer.
#[pyclass(name = "AttentionWeights", module = "randattn_py", frozen)]
struct PyWeights {
    inner: AttentionWeights,
}

#[pymethods]
impl PyWeights {
    /// Normal weights with standard deviation `std`.
    #[staticmethod]
    #[pyo3(signature = (d_model, n_heads, std, seed))]
    fn random(d_model: usize, n_heads: usize, std: f64, seed: u64) -> PyResult<Self> {
        let mut rng = SplitMix64::new(seed);
        Ok(Self {
            inner: AttentionWeights::random(d_model, n_heads, std, &mut rng).map_err(err)?,
        })
    }

    #[getter]
    fn d_model(&self) -> usize {
        self.inner.d_model()
    }
    #[getter]
    fn n_heads(&self) -> usize {
        self.inner.n_heads()
    }
}

/// Attention within the groups of `plan`; `x` is `[N, d]` or `[B, N, d]`.
#[pyfunction]
fn grouped_attention(
    x: Vec<f64>,
    shape: Vec<usize>,
    plan: &PyPlan,
    weights: &PyWeights,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let x = tensor(x, shape)?;
    Ok(split(
        grouped_self_attention(&x, &plan.inner, &weights.inner).map_err(err)?,
    ))
}

/// Attention over one mean-pooled key/value token per group.
#[pyfunction]
fn pooled_attention(
    x: Vec<f64>,
    shape: Vec<usize>,
    plan: &PyPlan,
    weights: &PyWeights,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let x = tensor(x, shape)?;
    Ok(split(
        pooled_group_attention(&x, &plan.inner, &weights.inner).map_err(err)?,
    ))
}

/// Dense attention with a same-group mask; the reference for
/// `grouped_attention`.
#[pyfunction]
fn oracle_attention(
    x: Vec<f64>,
    shape: Vec<usize>,
    plan: &PyPlan,
    weights: &PyWeights,
) -> PyResult<(Vec<f64>, Vec<usize>)> {
    let x = tensor(x, shape)?;
    let out =
        block_mask_attention_oracle(&x, &plan.inner.assignment(), &weights.inner).map_err(err)?;
    Ok(split(out))
}

/// Similarity of two `[N, d]` head feature maps, in [-1, 1].
#[pyfunction]
fn similarity(a: Vec<f64>, b: Vec<f64>, shape: Vec<usize>) -> PyResult<f64> {
    head_similarity(&tensor(a, shape.clone())?, &tensor(b, shape)?).map_err(err)
}

fn parse_config(text: &str) -> PyResult<ExperimentConfig> {
    ExperimentConfig::from_kv_str(text).map_err(err)
}

/// Fingerprint of a `key=value` configuration.
#[pyfunction]
fn config_fingerprint(config: &str) -> PyResult<String> {
    Ok(parse_config(config)?.fingerprint())
}

/// The full configuration, defaults filled in, as `key=value` lines.
#[pyfunction]
#[pyo3(signature = (config = ""))]
fn resolve_config(config: &str) -> PyResult<String> {
    Ok(parse_config(config)?.to_kv())
}

/// Trains with a `key=value` configuration and returns the run report as a
/// JSON string. Outputs are written when `output_dir` is set.
#[pyfunction]
#[pyo3(signature = (config = "", output_dir = None))]
fn train_run(py: Python<'_>, config: &str, output_dir: Option<PathBuf>) -> PyResult<String> {
    let mut config = parse_config(config)?;
    if output_dir.is_some() {
        config.output_dir = output_dir;
    }
    let (report, _) = py.detach(|| train(&config)).map_err(err)?;
    serde_json::to_string(&report).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Validation accuracy of a checkpoint on the configured dataset.
#[pyfunction]
#[pyo3(signature = (checkpoint, config = ""))]
fn evaluate_checkpoint(py: Python<'_>, checkpoint: PathBuf, config: &str) -> PyResult<f64> {
    let mut config = parse_config(config)?;
    let mut f = File::open(&checkpoint)
        .map_err(|e| PyIOError::new_err(format!("{}: {e}", checkpoint.display())))?;
    let model = Backbone::read_checkpoint(&mut f).map_err(err)?;
    config.backbone = model.config().clone();
    py.detach(|| {
        let (_, val) = load_datasets(&config)?;
        evaluate(&model, &val)
    })
    .map_err(err)
}

#[pymodule]
fn randattn_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyPlan>()?;
    m.add_class::<PyWeights>()?;
    m.add_function(wrap_pyfunction!(grouped_attention, m)?)?;
    m.add_function(wrap_pyfunction!(pooled_attention, m)?)?;
    m.add_function(wrap_pyfunction!(oracle_attention, m)?)?;
    m.add_function(wrap_pyfunction!(similarity, m)?)?;
    m.add_function(wrap_pyfunction!(config_fingerprint, m)?)?;
    m.add_function(wrap_pyfunction!(resolve_config, m)?)?;
    m.add_function(wrap_pyfunction!(train_run, m)?)?;
    m.add_function(wrap_pyfunction!(evaluate_checkpoint, m)?)?;
    Ok(())
}
