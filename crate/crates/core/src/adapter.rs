//! The vocabulary-anchored adapter and its dimension-bound baseline.
//!
//! The adapter maps patch features to a probability distribution over the
//! shared vocabulary (a two-layer GELU MLP followed by a vocabulary head and
//! softmax), then *composes* output embeddings as probability-weighted
//! combinations of the attached model's vocabulary embeddings. Because the
//! probability matrix never reads the attached model, one trained adapter
//! serves any model that shares the vocabulary — the baseline MLP, whose
//! output layer is welded to a single model's dimension, cannot.

use std::collections::BTreeMap;
use std::path::Path;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{affine, gelu, matmul, softmax_rows, Matrix};
use crate::rng::substream;
use crate::testbed::ToyLanguageModel;
use crate::vocab::SharedVocabulary;

/// Current on-disk schema version for checkpoint files.
pub const CHECKPOINT_FILE_VERSION: u32 = 1;

/// Adapter dimensions; `Default` is the desk-scale configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterConfig {
    /// Patch-feature dimension D_v.
    pub d_v: usize,
    /// MLP hidden width H.
    pub hidden: usize,
    /// MLP output width D_proj (decoupled from any model's dimension).
    pub d_proj: usize,
    /// Shared-vocabulary size T.
    pub t: usize,
    /// Softmax temperature; higher → flatter distributions.
    pub temperature: f64,
}

impl Default for AdapterConfig {
    fn default() -> Self {
        AdapterConfig {
            d_v: 16,
            hidden: 32,
            d_proj: 24,
            t: 64,
            temperature: 1.0,
        }
    }
}

impl AdapterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_v == 0 || self.hidden == 0 || self.d_proj == 0 || self.t == 0 {
            return Err(Error::Contract(format!(
                "adapter dimensions must be positive, got D_v={}, H={}, D_proj={}, T={}",
                self.d_v, self.hidden, self.d_proj, self.t
            )));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Contract(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// The transferable adapter. Parameters are plain matrices; `temperature`
/// and `vocab_fingerprint` are frozen at construction.
#[derive(Debug, Clone, PartialEq)]
pub struct LangBridgeAdapter {
    /// H×D_v first MLP layer.
    pub w1: Matrix,
    /// 1×H first bias.
    pub b1: Matrix,
    /// D_proj×H second MLP layer.
    pub w2: Matrix,
    /// 1×D_proj second bias.
    pub b2: Matrix,
    /// T×D_proj vocabulary head.
    pub w_vocab: Matrix,
    pub temperature: f64,
    /// Fingerprint of the shared vocabulary the adapter was built against.
    pub vocab_fingerprint: String,
}

/// Initializes an adapter with seeded Gaussian weights scaled by 1/√fan_in
/// and zero biases. The vocabulary head is additionally damped by 0.1 so
/// initial distributions start near-uniform: a full-scale head places a few
/// tokens deep inside saturated softmax basins where their gradient signal
/// vanishes, which measurably caps recoverable accuracy.
pub fn init(config: &AdapterConfig, seed: u64, vocab_fingerprint: impl Into<String>) -> Result<LangBridgeAdapter> {
    config.validate()?;
    let mut rng = substream(seed, "adapter/init");
    let mut draw = |rows: usize, cols: usize, scale: f64| -> Matrix {
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let g: f64 = StandardNormal.sample(&mut rng);
            values.push(g * scale);
        }
        Matrix::raw(rows, cols, values)
    };
    let w1 = draw(config.hidden, config.d_v, 1.0 / (config.d_v as f64).sqrt());
    let w2 = draw(config.d_proj, config.hidden, 1.0 / (config.hidden as f64).sqrt());
    let w_vocab = draw(config.t, config.d_proj, 0.1 / (config.d_proj as f64).sqrt());
    Ok(LangBridgeAdapter {
        w1,
        b1: Matrix::zeros(1, config.hidden),
        w2,
        b2: Matrix::zeros(1, config.d_proj),
        w_vocab,
        temperature: config.temperature,
        vocab_fingerprint: vocab_fingerprint.into(),
    })
}

impl LangBridgeAdapter {
    /// The configuration implied by the parameter shapes.
    pub fn config(&self) -> AdapterConfig {
        AdapterConfig {
            d_v: self.w1.cols(),
            hidden: self.w1.rows(),
            d_proj: self.w2.rows(),
            t: self.w_vocab.rows(),
            temperature: self.temperature,
        }
    }

    /// Pre-softmax vocabulary scores (N×T), the inspectable intermediate:
    /// `probabilities` is exactly `softmax_rows(logits / temperature)`.
    pub fn logits(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.w1.cols() {
            return Err(Error::Shape {
                op: "adapter-forward",
                left_rows: features.rows(),
                left_cols: features.cols(),
                right_rows: self.w1.rows(),
                right_cols: self.w1.cols(),
            });
        }
        let h = gelu(&affine(features, &self.w1, &self.b1)?);
        let z = affine(&h, &self.w2, &self.b2)?;
        matmul(&z, &self.w_vocab.transpose())
    }

    /// The probability distribution over the shared vocabulary, one simplex
    /// row per patch (N×T).
    pub fn probabilities(&self, features: &Matrix) -> Result<Matrix> {
        let logits = self.logits(features)?;
        Ok(softmax_rows(&logits.scale(1.0 / self.temperature)?))
    }
}

/// Simplex tolerance for `compose` input validation.
pub const SIMPLEX_TOLERANCE: f64 = 1e-6;

/// Composes output embeddings as probability-weighted combinations of
/// vocabulary embedding rows: `p · E`. Every output row lies in the convex
/// hull of the rows of `E`; a one-hot row reproduces its embedding exactly.
pub fn compose(p: &Matrix, shared_embeddings: &Matrix) -> Result<Matrix> {
    if p.cols() != shared_embeddings.rows() {
        return Err(Error::Shape {
            op: "compose",
            left_rows: p.rows(),
            left_cols: p.cols(),
            right_rows: shared_embeddings.rows(),
            right_cols: shared_embeddings.cols(),
        });
    }
    for r in 0..p.rows() {
        let row = p.row(r);
        let sum: f64 = row.iter().sum();
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::Contract(format!(
                "compose requires simplex rows: row {r} sums to {sum}"
            )));
        }
        if let Some(&bad) = row.iter().find(|&&v| v < -SIMPLEX_TOLERANCE) {
            return Err(Error::Contract(format!(
                "compose requires simplex rows: row {r} has negative weight {bad}"
            )));
        }
    }
    matmul(p, shared_embeddings)
}

/// An adapter attached to one model: the model's shared-token embedding rows
/// are gathered once; the adapter itself is untouched by attachment.
#[derive(Debug, Clone)]
pub struct BoundAdapter {
    pub adapter: LangBridgeAdapter,
    pub model: ToyLanguageModel,
    /// T×D_m rows of the model, ordered by shared index.
    pub shared_embeddings: Matrix,
}

/// Binds an adapter to a model through the shared vocabulary.
///
/// The vocabulary must be the one the adapter was built against (by
/// fingerprint), and the model must carry every shared token.
pub fn attach(
    adapter: &LangBridgeAdapter,
    model: &ToyLanguageModel,
    vocab: &SharedVocabulary,
) -> Result<BoundAdapter> {
    let fingerprint = vocab.fingerprint();
    if fingerprint != adapter.vocab_fingerprint {
        return Err(Error::IncompatibleVocabulary {
            expected: adapter.vocab_fingerprint.clone(),
            found: fingerprint,
        });
    }
    if let Some(model_fp) = &model.vocab_fingerprint {
        if *model_fp != fingerprint {
            return Err(Error::IncompatibleVocabulary {
                expected: fingerprint,
                found: model_fp.clone(),
            });
        }
    }
    if vocab.len() != adapter.w_vocab.rows() {
        return Err(Error::Integrity(format!(
            "adapter vocabulary head has {} rows but the shared vocabulary has {} tokens",
            adapter.w_vocab.rows(),
            vocab.len()
        )));
    }
    if model.shared_index_map.len() < vocab.len() {
        return Err(Error::Integrity(format!(
            "model {:?} maps only {} shared tokens; the shared vocabulary has {}",
            model.name,
            model.shared_index_map.len(),
            vocab.len()
        )));
    }
    model.validate()?;
    Ok(BoundAdapter {
        adapter: adapter.clone(),
        model: model.clone(),
        shared_embeddings: model.shared_embeddings(),
    })
}

impl BoundAdapter {
    /// Full forward pass: `compose(probabilities(features), shared_embeddings)`,
    /// producing one row per patch in the bound model's dimension.
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        let p = self.adapter.probabilities(features)?;
        compose(&p, &self.shared_embeddings)
    }
}

/// The conventional baseline: a two-layer GELU MLP whose output layer is
/// fixed to one model's embedding dimension at construction. It cannot
/// produce output for any model of a different dimension — the limitation
/// the vocabulary-anchored design removes.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpBaselineAdapter {
    /// H×D_v first layer.
    pub w1: Matrix,
    /// 1×H first bias.
    pub b1: Matrix,
    /// D_m×H output layer — welded to the bound model's dimension.
    pub w2: Matrix,
    /// 1×D_m output bias.
    pub b2: Matrix,
    pub bound_dim: usize,
    pub bound_model_name: String,
}

/// Initializes a baseline bound to `model`'s dimension.
pub fn init_baseline(
    d_v: usize,
    hidden: usize,
    model: &ToyLanguageModel,
    seed: u64,
) -> Result<MlpBaselineAdapter> {
    if d_v == 0 || hidden == 0 || model.dim == 0 {
        return Err(Error::Contract("baseline dimensions must be positive".into()));
    }
    let mut rng = substream(seed, "baseline/init");
    let mut draw = |rows: usize, cols: usize, scale: f64| -> Matrix {
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let g: f64 = StandardNormal.sample(&mut rng);
            values.push(g * scale);
        }
        Matrix::raw(rows, cols, values)
    };
    let w1 = draw(hidden, d_v, 1.0 / (d_v as f64).sqrt());
    let w2 = draw(model.dim, hidden, 1.0 / (hidden as f64).sqrt());
    Ok(MlpBaselineAdapter {
        w1,
        b1: Matrix::zeros(1, hidden),
        w2,
        b2: Matrix::zeros(1, model.dim),
        bound_dim: model.dim,
        bound_model_name: model.name.clone(),
    })
}

impl MlpBaselineAdapter {
    /// Errors unless `model` has exactly the dimension this baseline was
    /// built for. This failure mode is the point of comparison: the
    /// vocabulary-anchored adapter has no such restriction.
    pub fn check_model(&self, model: &ToyLanguageModel) -> Result<()> {
        if model.dim != self.bound_dim {
            return Err(Error::Contract(format!(
                "baseline adapter is bound to dimension {} (model {:?}) and cannot serve \
                 model {:?} with dimension {}",
                self.bound_dim, self.bound_model_name, model.name, model.dim
            )));
        }
        Ok(())
    }

    /// Two-layer GELU MLP output in the bound dimension (N×D_m).
    pub fn forward(&self, features: &Matrix) -> Result<Matrix> {
        if features.cols() != self.w1.cols() {
            return Err(Error::Shape {
                op: "baseline-forward",
                left_rows: features.rows(),
                left_cols: features.cols(),
                right_rows: self.w1.rows(),
                right_cols: self.w1.cols(),
            });
        }
        let h = gelu(&affine(features, &self.w1, &self.b1)?);
        affine(&h, &self.w2, &self.b2)
    }
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// AdamW accumulator state stored alongside a checkpoint so training can
/// resume bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    /// Global optimizer step count (drives bias correction).
    pub step: u64,
    /// First-moment accumulators, keyed by parameter name, flat row-major.
    pub m: BTreeMap<String, Vec<f64>>,
    /// Second-moment accumulators.
    pub v: BTreeMap<String, Vec<f64>>,
}

/// Training metadata recorded in a checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    /// Training stage label ("init", a step number, or "final").
    pub stage: String,
    /// Schedule-local step at which the checkpoint was taken.
    pub step: u64,
    /// Training loss at that step, when one exists.
    pub loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerState>,
    /// Echo of the effective training configuration.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_config: Option<serde_json::Value>,
}

impl CheckpointMeta {
    /// Metadata for a freshly initialized, untrained adapter.
    pub fn initial() -> Self {
        CheckpointMeta {
            stage: "init".into(),
            step: 0,
            loss: None,
            optimizer: None,
            train_config: None,
        }
    }
}

/// On-disk adapter snapshot: configuration, named flat row-major parameter
/// arrays, and training metadata. Round-trips bit-exactly.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdapterCheckpoint {
    pub version: u32,
    pub config: AdapterConfig,
    pub vocab_fingerprint: String,
    pub parameters: BTreeMap<String, Vec<f64>>,
    pub metadata: CheckpointMeta,
}

impl AdapterCheckpoint {
    pub fn from_adapter(adapter: &LangBridgeAdapter, metadata: CheckpointMeta) -> Self {
        let mut parameters = BTreeMap::new();
        parameters.insert("w1".to_string(), adapter.w1.values().to_vec());
        parameters.insert("b1".to_string(), adapter.b1.values().to_vec());
        parameters.insert("w2".to_string(), adapter.w2.values().to_vec());
        parameters.insert("b2".to_string(), adapter.b2.values().to_vec());
        parameters.insert("w_vocab".to_string(), adapter.w_vocab.values().to_vec());
        AdapterCheckpoint {
            version: CHECKPOINT_FILE_VERSION,
            config: adapter.config(),
            vocab_fingerprint: adapter.vocab_fingerprint.clone(),
            parameters,
            metadata,
        }
    }

    /// Rebuilds the adapter, validating every parameter shape.
    pub fn to_adapter(&self) -> Result<LangBridgeAdapter> {
        self.config.validate()?;
        let c = &self.config;
        let take = |name: &str, rows: usize, cols: usize| -> Result<Matrix> {
            let flat = self.parameters.get(name).ok_or_else(|| {
                Error::Integrity(format!("checkpoint is missing parameter {name:?}"))
            })?;
            if flat.len() != rows * cols {
                return Err(Error::Integrity(format!(
                    "checkpoint parameter {name:?} has {} values, expected {}×{}",
                    flat.len(),
                    rows,
                    cols
                )));
            }
            Matrix::new(rows, cols, flat.clone())
        };
        Ok(LangBridgeAdapter {
            w1: take("w1", c.hidden, c.d_v)?,
            b1: take("b1", 1, c.hidden)?,
            w2: take("w2", c.d_proj, c.hidden)?,
            b2: take("b2", 1, c.d_proj)?,
            w_vocab: take("w_vocab", c.t, c.d_proj)?,
            temperature: c.temperature,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path.display().to_string(), e))
    }
}
