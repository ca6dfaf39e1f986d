//! Python bindings: the model types, template sets, decoding and benchmarking.

use std::path::PathBuf;
use std::sync::Arc;

use cerberus::backbone::{Backbone, BackboneConfig};
use cerberus::bench::{self, Approach, BenchReport};
use cerberus::checkpoint;
use cerberus::data;
use cerberus::engine::{DecodeConfig, DecodeSession};
use cerberus::gate::{self, EntropySource, GateConfig};
use cerberus::heads::{HeadConfig, HeadStack, Paradigm, ResblockVariant};
use cerberus::tensor::Tensor;
use cerberus::trainer::{self, TrainConfig};
use cerberus::tree::{self, TemplateSet};
use cerberus::TokenId;
use pyo3::exceptions::{PyFileNotFoundError, PyIOError, PyRuntimeError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::{PyBytes, PyString};
use serde::de::DeserializeOwned;
use serde::Serialize;

fn err(e: cerberus::Error) -> PyErr {
    use cerberus::Error as E;
    match e {
        E::NotFound(p) => PyFileNotFoundError::new_err(p.display().to_string()),
        E::Io(e) => PyIOError::new_err(e.to_string()),
        E::Config(_) | E::Dimension { .. } | E::Index { .. } | E::Capacity { .. } | E::Data(_) => {
            PyValueError::new_err(e.to_string())
        }
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn to_py<'py, T: Serialize>(py: Python<'py>, v: &T) -> PyResult<Bound<'py, PyAny>> {
    let s = serde_json::to_string(v).map_err(|e| PyValueError::new_err(e.to_string()))?;
    py.import("json")?.call_method1("loads", (s,))
}

fn from_py<T: DeserializeOwned + Default>(obj: Option<&Bound<'_, PyAny>>) -> PyResult<T> {
    let Some(obj) = obj else {
        return Ok(T::default());
    };
    let s: String = obj.py().import("json")?.call_method1("dumps", (obj,))?.extract()?;
    serde_json::from_str(&s).map_err(|e| PyValueError::new_err(e.to_string()))
}

/// Accepts `str` (UTF-8 bytes), `bytes`, or a list of token ids.
fn tokens_of(obj: &Bound<'_, PyAny>) -> PyResult<Vec<TokenId>> {
    if let Ok(s) = obj.cast::<PyString>() {
        return Ok(data::encode(s.to_str()?.as_bytes()));
    }
    if let Ok(b) = obj.cast::<PyBytes>() {
        return Ok(data::encode(b.as_bytes()));
    }
    obj.extract()
}

fn rows(t: &Tensor) -> Vec<Vec<f32>> {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

fn parse<T: std::str::FromStr<Err = cerberus::Error>>(s: &str) -> PyResult<T> {
    s.parse().map_err(err)
}

#[pyclass(name = "Backbone", module = "cerberus_py")]
struct PyBackbone {
    inner: Arc<Backbone>,
}

#[pymethods]
impl PyBackbone {
    #[new]
    #[pyo3(signature = (seed=0, vocab_size=256, d_model=128, n_layers=4, n_attn_heads=4, max_context=512, ffn_dim=512))]
    fn new(
        seed: u64,
        vocab_size: usize,
        d_model: usize,
        n_layers: usize,
        n_attn_heads: usize,
        max_context: usize,
        ffn_dim: usize,
    ) -> PyResult<Self> {
        let cfg = BackboneConfig {
            vocab_size,
            d_model,
            n_layers,
            n_attn_heads,
            max_context,
            ffn_dim,
        };
        Ok(PyBackbone {
            inner: Arc::new(Backbone::new(cfg, seed).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (b, _) = checkpoint::load_backbone(&path).map_err(err)?;
        Ok(PyBackbone { inner: Arc::new(b) })
    }

    #[pyo3(signature = (path, metadata=None))]
    fn save(&self, path: PathBuf, metadata: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        let meta: serde_json::Value = from_py(metadata)?;
        checkpoint::save_backbone(&path, &self.inner, meta).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_params()
    }

    fn fingerprint(&self) -> String {
        self.inner.params().fingerprint()
    }

    /// Trains in place. `config` is a dict of training keys (lr, steps, window, ...).
    #[pyo3(signature = (tokens, eval_tokens=None, config=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        tokens: &Bound<'py, PyAny>,
        eval_tokens: Option<&Bound<'py, PyAny>>,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let train = tokens_of(tokens)?;
        let eval = eval_tokens.map(tokens_of).transpose()?.unwrap_or_default();
        let cfg: TrainConfig = from_py(config)?;
        let model = Arc::make_mut(&mut self.inner);
        let rep = py
            .detach(|| trainer::train_backbone(model, &train, &eval, &cfg))
            .map_err(err)?;
        to_py(py, &rep)
    }

    /// Final-layer hidden states `[T][d]` for a fresh forward over `tokens`.
    fn hidden(&self, tokens: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f32>>> {
        let out = self.inner.forward_fresh(&tokens_of(tokens)?).map_err(err)?;
        Ok(rows(&out.h_last))
    }

    /// Next-token logits `[T][V]` for a fresh forward over `tokens`.
    fn logits(&self, tokens: &Bound<'_, PyAny>) -> PyResult<Vec<Vec<f32>>> {
        let out = self.inner.forward_fresh(&tokens_of(tokens)?).map_err(err)?;
        Ok(rows(&out.logits))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "Backbone(d_model={}, n_layers={}, n_attn_heads={}, max_context={}, params={})",
            c.d_model,
            c.n_layers,
            c.n_attn_heads,
            c.max_context,
            self.inner.params().num_params()
        )
    }
}

#[pyclass(name = "HeadStack", module = "cerberus_py")]
struct PyHeadStack {
    inner: Arc<HeadStack>,
}

#[pymethods]
impl PyHeadStack {
    /// Heads warm-started from the backbone's LM head.
    #[new]
    #[pyo3(signature = (backbone, paradigm="cerberus", n_heads=4, resblocks_per_head=4, special_position=1, top_k=10, variant="paper"))]
    fn new(
        backbone: &PyBackbone,
        paradigm: &str,
        n_heads: usize,
        resblocks_per_head: usize,
        special_position: usize,
        top_k: usize,
        variant: &str,
    ) -> PyResult<Self> {
        let cfg = HeadConfig {
            paradigm: parse::<Paradigm>(paradigm)?,
            n_heads,
            resblocks_per_head,
            special_position,
            top_k,
            variant: parse::<ResblockVariant>(variant)?,
        };
        Ok(PyHeadStack {
            inner: Arc::new(HeadStack::new(cfg, &backbone.inner).map_err(err)?),
        })
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        let (h, _) = checkpoint::load_heads(&path).map_err(err)?;
        Ok(PyHeadStack { inner: Arc::new(h) })
    }

    #[pyo3(signature = (path, metadata=None))]
    fn save(&self, path: PathBuf, metadata: Option<&Bound<'_, PyAny>>) -> PyResult<()> {
        let meta: serde_json::Value = from_py(metadata)?;
        checkpoint::save_heads(&path, &self.inner, meta).map_err(err)
    }

    #[getter]
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyAny>> {
        to_py(py, self.inner.config())
    }

    #[getter]
    fn num_params(&self) -> usize {
        self.inner.params().num_params()
    }

    /// Resblock executions in one stack forward.
    #[getter]
    fn block_executions(&self) -> usize {
        self.inner.block_executions()
    }

    /// Trains the heads against a frozen backbone.
    #[pyo3(signature = (backbone, tokens, config=None))]
    fn train<'py>(
        &mut self,
        py: Python<'py>,
        backbone: &PyBackbone,
        tokens: &Bound<'py, PyAny>,
        config: Option<&Bound<'py, PyAny>>,
    ) -> PyResult<Bound<'py, PyAny>> {
        let toks = tokens_of(tokens)?;
        let cfg: TrainConfig = from_py(config)?;
        let bb = backbone.inner.clone();
        let heads = Arc::make_mut(&mut self.inner);
        let rep = py
            .detach(|| trainer::train_heads(&bb, heads, &toks, &cfg))
            .map_err(err)?;
        to_py(py, &rep)
    }

    /// Top-k accuracy and rank frequencies of every head over `tokens`.
    #[pyo3(signature = (backbone, tokens, k=10, window=64))]
    fn topk<'py>(
        &self,
        py: Python<'py>,
        backbone: &PyBackbone,
        tokens: &Bound<'py, PyAny>,
        k: usize,
        window: usize,
    ) -> PyResult<Bound<'py, PyAny>> {
        let toks = tokens_of(tokens)?;
        let t = trainer::eval_head_topk(&self.inner, &backbone.inner, &toks, k, window).map_err(err)?;
        to_py(py, &t)
    }

    /// Per-head logits `[H][V]` for one hidden-state vector.
    fn forward(&self, hidden: Vec<f32>) -> PyResult<Vec<Vec<f32>>> {
        Ok(rows(&self.inner.head_stack_forward(&hidden).map_err(err)?))
    }

    fn __repr__(&self) -> String {
        let c = self.inner.config();
        format!(
            "HeadStack(paradigm={}, n_heads={}, resblocks_per_head={}, top_k={})",
            c.paradigm, c.n_heads, c.resblocks_per_head, c.top_k
        )
    }
}

#[pyclass(name = "TemplateSet", module = "cerberus_py", frozen)]
struct PyTemplateSet {
    inner: Arc<TemplateSet>,
}

impl PyTemplateSet {
    fn wrap(r: cerberus::Result<TemplateSet>) -> PyResult<Self> {
        Ok(PyTemplateSet {
            inner: Arc::new(r.map_err(err)?),
        })
    }
}

#[pymethods]
impl PyTemplateSet {
    #[new]
    fn new(templates: Vec<Vec<usize>>, top_k: usize) -> PyResult<Self> {
        Self::wrap(TemplateSet::new(templates, top_k))
    }

    #[staticmethod]
    fn full(n_heads: usize, top_k: usize) -> PyResult<Self> {
        Self::wrap(TemplateSet::full(n_heads, top_k))
    }

    /// The `budget` most probable paths under per-head rank frequencies.
    #[staticmethod]
    fn select(budget: usize, calibration: Vec<Vec<f64>>) -> PyResult<Self> {
        Self::wrap(tree::select_templates(budget, &calibration))
    }

    #[staticmethod]
    fn uniform(budget: usize, n_heads: usize, top_k: usize) -> PyResult<Self> {
        Self::wrap(tree::select_templates(
            budget,
            &tree::uniform_calibration(n_heads, top_k),
        ))
    }

    #[staticmethod]
    fn from_json(s: &str, top_k: usize) -> PyResult<Self> {
        Self::wrap(TemplateSet::from_json(s, top_k))
    }

    #[staticmethod]
    fn load(path: PathBuf, top_k: usize) -> PyResult<Self> {
        Self::wrap(TemplateSet::load(&path, top_k))
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(err)
    }

    fn to_json(&self) -> String {
        self.inner.to_json()
    }

    #[getter]
    fn templates(&self) -> Vec<Vec<usize>> {
        self.inner.templates().iter().map(|t| t.0.clone()).collect()
    }

    #[getter]
    fn top_k(&self) -> usize {
        self.inner.top_k()
    }

    #[getter]
    fn node_count(&self) -> usize {
        self.inner.node_count()
    }

    #[getter]
    fn max_depth(&self) -> usize {
        self.inner.max_depth()
    }

    fn is_prefix_closed(&self) -> bool {
        self.inner.is_prefix_closed()
    }

    fn __len__(&self) -> usize {
        self.inner.path_count()
    }

    fn __repr__(&self) -> String {
        format!(
            "TemplateSet(paths={}, top_k={})",
            self.inner.path_count(),
            self.inner.top_k()
        )
    }
}

fn gate_config(enabled: bool, threshold: Option<f64>, source: &str) -> PyResult<GateConfig> {
    if !enabled {
        return Ok(GateConfig::disabled());
    }
    let g = GateConfig::with_threshold(threshold.unwrap_or(f64::INFINITY), parse::<EntropySource>(source)?);
    g.validate().map_err(err)?;
    Ok(g)
}

/// Greedy decoding. With `heads` and `templates` it decodes in parallel, gated
/// by `gate_threshold` bits (`None` never gates); otherwise one token per forward.
#[pyfunction]
#[pyo3(signature = (backbone, prompt, heads=None, templates=None, max_tokens=64, stop_token=None, gate_threshold=None, gate_source="hidden", gate_enabled=true, seed=0))]
#[allow(clippy::too_many_arguments)]
fn decode<'py>(
    py: Python<'py>,
    backbone: &PyBackbone,
    prompt: &Bound<'py, PyAny>,
    heads: Option<&PyHeadStack>,
    templates: Option<&PyTemplateSet>,
    max_tokens: usize,
    stop_token: Option<TokenId>,
    gate_threshold: Option<f64>,
    gate_source: &str,
    gate_enabled: bool,
    seed: u64,
) -> PyResult<Bound<'py, PyAny>> {
    let prompt = tokens_of(prompt)?;
    let cfg = DecodeConfig {
        max_tokens,
        stop_token,
        begin_token: 0,
        gate: gate_config(gate_enabled, gate_threshold, gate_source)?,
        seed,
    };
    let mut session = match (heads, templates) {
        (Some(h), Some(t)) => DecodeSession::new(
            backbone.inner.clone(),
            Some(h.inner.clone()),
            Some(t.inner.clone()),
            cfg,
        ),
        (None, None) => DecodeSession::vanilla(backbone.inner.clone(), cfg),
        _ => return Err(PyValueError::new_err("heads and templates must be given together")),
    }
    .map_err(err)?;
    let out = py.detach(|| session.decode(&prompt)).map_err(err)?;
    let d = to_py(py, &out)?;
    d.set_item("forwards", out.forwards())?;
    d.set_item("tokens_per_forward", out.tokens_per_forward())?;
    d.set_item("text", PyBytes::new(py, &data::decode(&out.tokens).map_err(err)?))?;
    Ok(d)
}

type ApproachSpec<'py> = (String, PyRef<'py, PyHeadStack>, PyRef<'py, PyTemplateSet>, Option<f64>);

/// Decodes `prompts` (a list of `(category, prompt)`) under vanilla decoding
/// and each `(name, heads, templates, gate_threshold)` approach; returns the report.
#[pyfunction]
#[pyo3(signature = (backbone, prompts, approaches, max_tokens=64, gate_source="hidden"))]
fn run_bench<'py>(
    py: Python<'py>,
    backbone: &PyBackbone,
    prompts: Vec<(String, Bound<'py, PyAny>)>,
    approaches: Vec<ApproachSpec<'py>>,
    max_tokens: usize,
    gate_source: &str,
) -> PyResult<Bound<'py, PyAny>> {
    let prompts = prompts
        .iter()
        .map(|(c, p)| Ok((c.clone(), tokens_of(p)?)))
        .collect::<PyResult<Vec<_>>>()?;
    let mut list = vec![Approach::vanilla()];
    for (name, h, t, threshold) in &approaches {
        let g = match threshold {
            Some(_) => gate_config(true, *threshold, gate_source)?,
            None => GateConfig::disabled(),
        };
        list.push(Approach::parallel(name.clone(), h.inner.clone(), t.inner.clone(), g));
    }
    let cfg = DecodeConfig {
        max_tokens,
        ..Default::default()
    };
    let bb = backbone.inner.clone();
    let run = py
        .detach(|| bench::run_bench(&bb, &list, &prompts, &cfg))
        .map_err(err)?;
    let report = BenchReport::from_records(&run.records, "vanilla").map_err(err)?;
    report.check_identities(&run.records).map_err(PyRuntimeError::new_err)?;
    to_py(py, &report)
}

#[pyfunction]
fn encode(text: &Bound<'_, PyAny>) -> PyResult<Vec<TokenId>> {
    tokens_of(text)
}

#[pyfunction(name = "decode_tokens")]
fn decode_tokens<'py>(py: Python<'py>, tokens: Vec<TokenId>) -> PyResult<Bound<'py, PyBytes>> {
    Ok(PyBytes::new(py, &data::decode(&tokens).map_err(err)?))
}

/// Entropy in bits of `softmax(values)`.
#[pyfunction]
fn entropy(values: Vec<f32>) -> f64 {
    gate::entropy(&values)
}

#[pyfunction]
fn threshold_grid(k: usize) -> Vec<f64> {
    gate::threshold_grid(k)
}

#[pyfunction]
fn full_space_size(n_heads: usize, top_k: usize) -> usize {
    tree::full_space_size(n_heads, top_k)
}

#[pyfunction]
#[pyo3(signature = (n_bytes, seed=1))]
fn synthetic_corpus(n_bytes: usize, seed: u64) -> String {
    data::synthetic_corpus(n_bytes, seed)
}

#[pymodule]
fn cerberus_py(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyBackbone>()?;
    m.add_class::<PyHeadStack>()?;
    m.add_class::<PyTemplateSet>()?;
    m.add_function(wrap_pyfunction!(decode, m)?)?;
    m.add_function(wrap_pyfunction!(run_bench, m)?)?;
    m.add_function(wrap_pyfunction!(encode, m)?)?;
    m.add_function(wrap_pyfunction!(decode_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(entropy, m)?)?;
    m.add_function(wrap_pyfunction!(threshold_grid, m)?)?;
    m.add_function(wrap_pyfunction!(full_space_size, m)?)?;
    m.add_function(wrap_pyfunction!(synthetic_corpus, m)?)?;
    m.add("VOCAB_SIZE", data::VOCAB_SIZE)?;
    Ok(())
}
