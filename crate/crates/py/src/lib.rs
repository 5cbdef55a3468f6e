//! Python bindings for the vocabulary-anchored adapter: the module
//! `langbridge_lab` exposes the main types (vocabulary, toy model, adapter,
//! binding) and operations (build, generate, train, attach, evaluate,
//! analyze, gradient-check) with plain Python data in and out.
//!
//! Exchange conventions: matrices are `list[list[float]]`, datasets are
//! `list[tuple[features, planted]]`, and reports are dicts. Errors map to
//! `OSError` (I/O or parsing), `IndexError` (out-of-range access), and
//! `ValueError` (everything else).

use std::collections::BTreeMap;
use std::io::Cursor;
use std::path::Path;

use pyo3::exceptions::{PyIOError, PyIndexError, PyValueError};
use pyo3::prelude::*;
use pyo3::types::PyDict;

use langbridge_core::adapter::{
    self, AdapterCheckpoint, AdapterConfig, CheckpointMeta, LangBridgeAdapter,
};
use langbridge_core::analysis;
use langbridge_core::error::Error as CoreError;
use langbridge_core::numerics::Matrix;
use langbridge_core::testbed::{
    derive_model, gen_dataset, gen_feature_map, gen_latents, DatasetConfig, LatentSemantics,
    SyntheticSample, ToyLanguageModel,
};
use langbridge_core::training::{self, Schedule, TrainConfig};
use langbridge_core::vocab::{
    count_frequencies, intersect, select_top_n, SharedVocabEntry, SharedVocabulary, TokenSet,
    TokenizerVocab, VOCAB_FILE_VERSION,
};

fn py_err(e: CoreError) -> PyErr {
    match &e {
        CoreError::Io { .. } | CoreError::Json { .. } | CoreError::Decode { .. } => {
            PyIOError::new_err(e.to_string())
        }
        CoreError::Index { .. } => PyIndexError::new_err(e.to_string()),
        _ => PyValueError::new_err(e.to_string()),
    }
}

fn matrix_from_py(rows: &[Vec<f64>]) -> PyResult<Matrix> {
    Matrix::from_rows(rows).map_err(py_err)
}

/// One dataset sample on the Python side: (N×D_v features, planted indices).
type PySample = (Vec<Vec<f64>>, Vec<usize>);

fn samples_from_py(samples: &[PySample]) -> PyResult<Vec<SyntheticSample>> {
    samples
        .iter()
        .map(|(features, planted)| {
            Ok(SyntheticSample {
                features: matrix_from_py(features)?,
                planted: planted.clone(),
                mixture_weights: None,
            })
        })
        .collect()
}

fn samples_to_py(samples: &[SyntheticSample]) -> Vec<PySample> {
    samples
        .iter()
        .map(|s| (s.features.to_rows(), s.planted.clone()))
        .collect()
}

// ---------------------------------------------------------------------------
// Vocabulary
// ---------------------------------------------------------------------------

/// A frequency-ranked shared vocabulary; the contract between adapters and
/// models is its fingerprint.
#[pyclass(module = "langbridge_lab", from_py_object)]
#[derive(Clone)]
pub struct Vocabulary {
    inner: SharedVocabulary,
}

#[pymethods]
impl Vocabulary {
    /// Builds a synthetic vocabulary directly from a token list (ids are
    /// positional) — convenient for in-memory worlds and tests.
    #[staticmethod]
    #[pyo3(signature = (tokens, name_a = "alpha", name_b = "beta"))]
    fn from_tokens(tokens: Vec<String>, name_a: &str, name_b: &str) -> PyResult<Self> {
        if tokens.is_empty() {
            return Err(PyValueError::new_err("from_tokens requires at least one token"));
        }
        let n = tokens.len();
        let inner = SharedVocabulary {
            version: VOCAB_FILE_VERSION,
            model_a: name_a.into(),
            model_b: name_b.into(),
            entries: tokens
                .into_iter()
                .enumerate()
                .map(|(i, token)| SharedVocabEntry {
                    token,
                    id_a: i as u64,
                    id_b: (i + 1000) as u64,
                    freq: (n - i) as u64,
                })
                .collect(),
        };
        inner.validate().map_err(py_err)?;
        Ok(Vocabulary { inner })
    }

    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Vocabulary {
            inner: SharedVocabulary::load(Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(py_err)
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    fn tokens(&self) -> Vec<String> {
        self.inner.entries.iter().map(|e| e.token.clone()).collect()
    }

    fn __len__(&self) -> usize {
        self.inner.len()
    }

    fn __repr__(&self) -> String {
        format!(
            "Vocabulary({} tokens, {} x {})",
            self.inner.len(),
            self.inner.model_a,
            self.inner.model_b
        )
    }
}

/// Intersects two tokenizer vocabularies (token → id maps), ranks the shared
/// tokens by frequency over the corpus lines, and keeps the top `top_n`.
#[pyfunction]
#[pyo3(signature = (tokens_a, tokens_b, corpus_lines, top_n, name_a = "alpha", name_b = "beta"))]
fn build_vocabulary(
    tokens_a: BTreeMap<String, u64>,
    tokens_b: BTreeMap<String, u64>,
    corpus_lines: Vec<String>,
    top_n: usize,
    name_a: &str,
    name_b: &str,
) -> PyResult<Vocabulary> {
    let a = TokenizerVocab::new(name_a, tokens_a).map_err(py_err)?;
    let b = TokenizerVocab::new(name_b, tokens_b).map_err(py_err)?;
    let pairs = intersect(&a, &b);
    if pairs.is_empty() {
        return Err(PyValueError::new_err(
            "empty intersection between the tokenizer vocabularies",
        ));
    }
    let set = TokenSet::new(pairs.iter().map(|(t, _, _)| t.clone())).map_err(py_err)?;
    let counts =
        count_frequencies(Cursor::new(corpus_lines.join("\n")), &set).map_err(py_err)?;
    let outcome =
        select_top_n(&counts.counts, &pairs, top_n, name_a, name_b).map_err(py_err)?;
    Ok(Vocabulary {
        inner: outcome.vocabulary,
    })
}

// ---------------------------------------------------------------------------
// Toy language model and testbed
// ---------------------------------------------------------------------------

/// A toy language model: a named embedding table plus the map from shared
/// vocabulary indices to its own rows.
#[pyclass(module = "langbridge_lab", from_py_object)]
#[derive(Clone)]
pub struct Model {
    inner: ToyLanguageModel,
}

#[pymethods]
impl Model {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Model {
            inner: ToyLanguageModel::load(Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn name(&self) -> String {
        self.inner.name.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.dim
    }

    #[getter]
    fn vocab_fingerprint(&self) -> Option<String> {
        self.inner.vocab_fingerprint.clone()
    }

    /// T×D_m embedding rows in shared-vocabulary order.
    fn shared_embeddings(&self) -> Vec<Vec<f64>> {
        self.inner.shared_embeddings().to_rows()
    }

    fn __repr__(&self) -> String {
        format!("Model({:?}, dim={})", self.inner.name, self.inner.dim)
    }
}

/// A generated world: shared latents, two toy models of different embedding
/// dimensions over the same vocabulary, and the feature projection used to
/// synthesize datasets with planted tokens.
#[pyclass(module = "langbridge_lab")]
pub struct Testbed {
    latents: LatentSemantics,
    feature_map: Matrix,
    #[pyo3(get)]
    model_a: Model,
    #[pyo3(get)]
    model_b: Model,
}

#[pymethods]
impl Testbed {
    /// Draws (train, heldout) datasets of `(features, planted)` samples.
    #[pyo3(signature = (train, heldout, patches, seed, noise_sigma = 0.05, mixture_k = 1))]
    fn dataset(
        &self,
        train: usize,
        heldout: usize,
        patches: usize,
        seed: u64,
        noise_sigma: f64,
        mixture_k: usize,
    ) -> PyResult<(Vec<PySample>, Vec<PySample>)> {
        let data = gen_dataset(
            &self.latents,
            &self.feature_map,
            &DatasetConfig {
                train,
                heldout,
                patches,
                noise_sigma,
                mixture_k,
            },
            seed,
        )
        .map_err(py_err)?;
        Ok((samples_to_py(&data.train), samples_to_py(&data.heldout)))
    }
}

/// Generates a two-model testbed over `vocabulary`; the vocabulary
/// fingerprint is stamped into both models.
#[pyfunction]
#[pyo3(signature = (vocabulary, seed, d_s, d_v, dim_a, dim_b, t_full_a, t_full_b,
                    name_a = "alpha", name_b = "beta"))]
#[allow(clippy::too_many_arguments)]
fn generate_testbed(
    vocabulary: &Vocabulary,
    seed: u64,
    d_s: usize,
    d_v: usize,
    dim_a: usize,
    dim_b: usize,
    t_full_a: usize,
    t_full_b: usize,
    name_a: &str,
    name_b: &str,
) -> PyResult<Testbed> {
    if name_a == name_b {
        return Err(PyValueError::new_err(
            "the two models need distinct names: the name seeds the derivation substream",
        ));
    }
    let t = vocabulary.inner.len();
    let fingerprint = vocabulary.inner.fingerprint();
    let latents = gen_latents(seed, t, d_s).map_err(py_err)?;
    let mut model_a = derive_model(&latents, name_a, dim_a, t_full_a, seed).map_err(py_err)?;
    let mut model_b = derive_model(&latents, name_b, dim_b, t_full_b, seed).map_err(py_err)?;
    model_a.vocab_fingerprint = Some(fingerprint.clone());
    model_b.vocab_fingerprint = Some(fingerprint);
    let feature_map = gen_feature_map(seed, d_v, d_s).map_err(py_err)?;
    Ok(Testbed {
        latents,
        feature_map,
        model_a: Model { inner: model_a },
        model_b: Model { inner: model_b },
    })
}

// ---------------------------------------------------------------------------
// Adapter, training, attachment
// ---------------------------------------------------------------------------

/// An adapter snapshot (parameters + metadata), loadable from and savable to
/// the same checkpoint files the command-line pipeline produces.
#[pyclass(module = "langbridge_lab", from_py_object)]
#[derive(Clone)]
pub struct Adapter {
    inner: AdapterCheckpoint,
}

#[pymethods]
impl Adapter {
    #[staticmethod]
    fn load(path: &str) -> PyResult<Self> {
        Ok(Adapter {
            inner: AdapterCheckpoint::load(Path::new(path)).map_err(py_err)?,
        })
    }

    fn save(&self, path: &str) -> PyResult<()> {
        self.inner.save(Path::new(path)).map_err(py_err)
    }

    #[getter]
    fn stage(&self) -> String {
        self.inner.metadata.stage.clone()
    }

    #[getter]
    fn loss(&self) -> Option<f64> {
        self.inner.metadata.loss
    }

    #[getter]
    fn vocab_fingerprint(&self) -> String {
        self.inner.vocab_fingerprint.clone()
    }

    /// The architectural configuration as a dict.
    fn config<'py>(&self, py: Python<'py>) -> PyResult<Bound<'py, PyDict>> {
        let c = &self.inner.config;
        let d = PyDict::new(py);
        d.set_item("d_v", c.d_v)?;
        d.set_item("hidden", c.hidden)?;
        d.set_item("d_proj", c.d_proj)?;
        d.set_item("t", c.t)?;
        d.set_item("temperature", c.temperature)?;
        Ok(d)
    }

    fn __repr__(&self) -> String {
        format!(
            "Adapter(stage={:?}, d_v={}, t={})",
            self.inner.metadata.stage, self.inner.config.d_v, self.inner.config.t
        )
    }
}

impl Adapter {
    fn to_core(&self) -> PyResult<LangBridgeAdapter> {
        self.inner.to_adapter().map_err(py_err)
    }
}

/// Initializes an untrained adapter against `vocabulary`.
#[pyfunction]
#[pyo3(signature = (vocabulary, d_v, hidden, d_proj, temperature = 1.0, seed = 0))]
fn init_adapter(
    vocabulary: &Vocabulary,
    d_v: usize,
    hidden: usize,
    d_proj: usize,
    temperature: f64,
    seed: u64,
) -> PyResult<Adapter> {
    let config = AdapterConfig {
        d_v,
        hidden,
        d_proj,
        t: vocabulary.inner.len(),
        temperature,
    };
    let adapter = adapter::init(&config, seed, vocabulary.inner.fingerprint()).map_err(py_err)?;
    Ok(Adapter {
        inner: AdapterCheckpoint::from_adapter(&adapter, CheckpointMeta::initial()),
    })
}

/// Runs the training pipeline: pretraining on `samples`, optionally followed
/// by a fine-tuning stage on `sft_samples` (which inherits the optimizer
/// state). Returns `{"checkpoints": [Adapter, ...], "pretrain_metrics":
/// [(step, lr, loss), ...], "sft_metrics": [...]}`; the last checkpoint is
/// the final state.
#[pyfunction]
#[pyo3(signature = (adapter, model, vocabulary, samples, total_steps,
                    learning_rate = 1e-3, warmup_ratio = 0.03, batch_size = 32, seed = 0,
                    checkpoint_steps = None, sft_samples = None, sft_total_steps = 500,
                    sft_learning_rate = 2e-5))]
#[allow(clippy::too_many_arguments)]
fn train_adapter<'py>(
    py: Python<'py>,
    adapter: &Adapter,
    model: &Model,
    vocabulary: &Vocabulary,
    samples: Vec<PySample>,
    total_steps: u64,
    learning_rate: f64,
    warmup_ratio: f64,
    batch_size: usize,
    seed: u64,
    checkpoint_steps: Option<Vec<u64>>,
    sft_samples: Option<Vec<PySample>>,
    sft_total_steps: u64,
    sft_learning_rate: f64,
) -> PyResult<Bound<'py, PyDict>> {
    let data = samples_from_py(&samples)?;
    let pretrain = TrainConfig {
        learning_rate,
        warmup_ratio,
        schedule: Schedule::Cosine,
        batch_size,
        total_steps,
        checkpoint_steps: checkpoint_steps.unwrap_or_default(),
        seed,
        ..TrainConfig::pretrain_default()
    };
    let sft_data = sft_samples.as_deref().map(samples_from_py).transpose()?;
    let sft_config = TrainConfig {
        learning_rate: sft_learning_rate,
        total_steps: sft_total_steps,
        batch_size,
        seed,
        ..TrainConfig::sft_default()
    };

    let outcome = training::train_pipeline(
        adapter.to_core()?,
        &model.inner,
        &vocabulary.inner,
        &data,
        &pretrain,
        sft_data.as_ref().map(|d| (d.as_slice(), &sft_config)),
        |_| Ok(()),
    )
    .map_err(py_err)?;

    let metrics =
        |ms: &[training::StepMetric]| -> Vec<(u64, f64, f64)> {
            ms.iter().map(|m| (m.step, m.lr, m.train_loss)).collect()
        };
    let result = PyDict::new(py);
    result.set_item(
        "checkpoints",
        outcome
            .checkpoints
            .into_iter()
            .map(|inner| Adapter { inner })
            .collect::<Vec<_>>(),
    )?;
    result.set_item("pretrain_metrics", metrics(&outcome.pretrain_metrics))?;
    result.set_item("sft_metrics", metrics(&outcome.sft_metrics))?;
    Ok(result)
}

/// An adapter bound to one model's embedding table.
#[pyclass(module = "langbridge_lab")]
pub struct BoundAdapter {
    inner: adapter::BoundAdapter,
}

#[pymethods]
impl BoundAdapter {
    #[getter]
    fn model_name(&self) -> String {
        self.inner.model.name.clone()
    }

    #[getter]
    fn dim(&self) -> usize {
        self.inner.model.dim
    }

    /// N×T simplex rows over the shared vocabulary — identical under every
    /// binding of the same adapter.
    fn probabilities(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = matrix_from_py(&features)?;
        Ok(self.inner.adapter.probabilities(&f).map_err(py_err)?.to_rows())
    }

    /// N×D_m composed visual embeddings in the bound model's dimension.
    fn forward(&self, features: Vec<Vec<f64>>) -> PyResult<Vec<Vec<f64>>> {
        let f = matrix_from_py(&features)?;
        Ok(self.inner.forward(&f).map_err(py_err)?.to_rows())
    }

    /// Fraction of patches whose top-1 cosine retrieval recovers the
    /// planted token.
    fn recovery(&self, samples: Vec<PySample>) -> PyResult<f64> {
        let data = samples_from_py(&samples)?;
        analysis::recovery_accuracy(&self.inner, &data).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!(
            "BoundAdapter(model={:?}, dim={})",
            self.inner.model.name, self.inner.model.dim
        )
    }
}

/// Binds a trained adapter to any model carrying the same vocabulary —
/// no retraining involved.
#[pyfunction]
fn attach(adapter: &Adapter, model: &Model, vocabulary: &Vocabulary) -> PyResult<BoundAdapter> {
    Ok(BoundAdapter {
        inner: adapter::attach(&adapter.to_core()?, &model.inner, &vocabulary.inner)
            .map_err(py_err)?,
    })
}

// ---------------------------------------------------------------------------
// Analysis
// ---------------------------------------------------------------------------

/// Top-k shared tokens for a composed embedding by cosine similarity:
/// `[(shared_index, token, score), ...]`, scores descending.
#[pyfunction]
#[pyo3(signature = (embedding, model, vocabulary, k = 5))]
fn topk_tokens(
    embedding: Vec<f64>,
    model: &Model,
    vocabulary: &Vocabulary,
    k: usize,
) -> PyResult<Vec<(usize, String, f64)>> {
    let ranked =
        analysis::topk_tokens(&embedding, &model.inner, &vocabulary.inner, k).map_err(py_err)?;
    Ok(ranked
        .into_iter()
        .map(|r| (r.shared_index, r.token, r.score))
        .collect())
}

/// Attaches `adapter` to both models, verifies the probability matrices
/// match bitwise, and reports per-binding recovery. Raises `ValueError` on
/// any parity violation.
#[pyfunction]
fn transfer_parity<'py>(
    py: Python<'py>,
    adapter: &Adapter,
    model_a: &Model,
    model_b: &Model,
    vocabulary: &Vocabulary,
    samples: Vec<PySample>,
) -> PyResult<Bound<'py, PyDict>> {
    let data = samples_from_py(&samples)?;
    let report = analysis::transfer_parity_report(
        &adapter.to_core()?,
        &model_a.inner,
        &model_b.inner,
        &vocabulary.inner,
        &data,
    )
    .map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("model_a", report.model_a)?;
    d.set_item("model_b", report.model_b)?;
    d.set_item("dim_a", report.dim_a)?;
    d.set_item("dim_b", report.dim_b)?;
    d.set_item("samples", report.samples)?;
    d.set_item("patches", report.patches)?;
    d.set_item("probability_parity", report.probability_parity)?;
    d.set_item("recovery_a", report.recovery_a)?;
    d.set_item("recovery_b", report.recovery_b)?;
    d.set_item("recovery_ratio", report.recovery_ratio)?;
    Ok(d)
}

/// Verifies analytic gradients against central finite differences over a
/// battery of seeded configurations.
#[pyfunction]
#[pyo3(signature = (seed = 42))]
fn gradient_check(py: Python<'_>, seed: u64) -> PyResult<Bound<'_, PyDict>> {
    let report = training::gradient_check(seed).map_err(py_err)?;
    let d = PyDict::new(py);
    d.set_item("passed", report.passed)?;
    d.set_item("max_rel", report.max_rel)?;
    d.set_item("threshold", report.threshold)?;
    d.set_item("configs", report.configs.len())?;
    Ok(d)
}

#[pymodule]
fn langbridge_lab(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<Vocabulary>()?;
    m.add_class::<Model>()?;
    m.add_class::<Testbed>()?;
    m.add_class::<Adapter>()?;
    m.add_class::<BoundAdapter>()?;
    m.add_function(wrap_pyfunction!(build_vocabulary, m)?)?;
    m.add_function(wrap_pyfunction!(generate_testbed, m)?)?;
    m.add_function(wrap_pyfunction!(init_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(train_adapter, m)?)?;
    m.add_function(wrap_pyfunction!(attach, m)?)?;
    m.add_function(wrap_pyfunction!(topk_tokens, m)?)?;
    m.add_function(wrap_pyfunction!(transfer_parity, m)?)?;
    m.add_function(wrap_pyfunction!(gradient_check, m)?)?;
    Ok(())
}
