//! Interpretability workflow over trained adapters: per-patch top-k token
//! retrieval by cosine similarity, planted-token recovery accuracy, alignment
//! trajectories across saved checkpoints, and transfer-parity reports.
//!
//! Everything here is read-only over adapters, models, and datasets. Reports
//! serialize as JSON (structured, lossless round-trip) and CSV (flat
//! `checkpoint,patch,rank,token,score` rows) with deterministic field order,
//! so any external plotter can render the stage-by-stage evolution.

use std::borrow::Cow;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapter::{attach, AdapterCheckpoint, BoundAdapter, LangBridgeAdapter};
use crate::error::{Error, Result};
use crate::numerics::{cosine_similarity, Matrix};
use crate::testbed::{SyntheticSample, ToyLanguageModel};
use crate::vocab::SharedVocabulary;

/// Default number of retrieved tokens per patch.
pub const DEFAULT_TOP_K: usize = 5;

/// Schema version written into alignment-report files.
pub const ANALYSIS_FILE_VERSION: u32 = 1;

// ---------------------------------------------------------------------------
// Report types
// ---------------------------------------------------------------------------

/// One retrieved vocabulary token: its shared index, the token string, and
/// its cosine score against the query embedding.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedToken {
    pub shared_index: usize,
    pub token: String,
    pub score: f64,
}

/// Retrieval results for one patch of the probe sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchAlignment {
    pub patch: usize,
    /// Shared index of the token planted under this patch.
    pub planted: usize,
    /// Exactly k tokens, score descending, ties by shared index ascending.
    pub ranked: Vec<RankedToken>,
}

/// All patches of the probe sample under one checkpoint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageAlignment {
    /// Checkpoint stage label ("100", "sft-500", "final", ...).
    pub checkpoint: String,
    /// Fraction of patches whose rank-1 token equals the planted token.
    pub top1_recovery: f64,
    pub patches: Vec<PatchAlignment>,
}

/// The data behind a stage-by-stage alignment-evolution graph: per
/// checkpoint, per patch, the top-k retrieved tokens with cosine scores,
/// plus the per-stage top-1 planted-recovery rate.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignmentReport {
    pub version: u32,
    /// Name of the model whose embedding table scored the retrievals.
    pub model: String,
    pub vocab_fingerprint: String,
    pub k: usize,
    pub stages: Vec<StageAlignment>,
}

/// Outcome of evaluating one adapter under two model bindings: bitwise
/// probability parity (enforced, not merely reported), per-model recovery,
/// and the composed-output dimensions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferParityReport {
    pub model_a: String,
    pub model_b: String,
    /// Composed-output dimension under the first binding.
    pub dim_a: usize,
    /// Composed-output dimension under the second binding.
    pub dim_b: usize,
    pub samples: usize,
    pub patches: usize,
    /// Always true on a returned report: a violation raises an error instead.
    pub probability_parity: bool,
    pub recovery_a: f64,
    pub recovery_b: f64,
    /// `recovery_b / recovery_a`; absent when `recovery_a` is zero.
    pub recovery_ratio: Option<f64>,
}

// ---------------------------------------------------------------------------
// Retrieval
// ---------------------------------------------------------------------------

/// Cosine scores of `embedding` against every shared-token row, in shared
/// order. Rejects non-finite scores so downstream ranking is total.
fn shared_token_scores(
    embedding: &[f64],
    model: &ToyLanguageModel,
    t: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(t);
    for i in 0..t {
        let row = model.full_embeddings.row(model.shared_index_map[i]);
        let s = cosine_similarity(embedding, row)?;
        if !s.is_finite() {
            return Err(Error::Domain(format!(
                "non-finite cosine score against shared token {i}"
            )));
        }
        scores.push(s);
    }
    Ok(scores)
}

/// Shared indices ranked by score descending, ties by index ascending.
fn rank_indices(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .expect("scores are checked finite")
            .then(a.cmp(&b))
    });
    idx
}

/// Index of the best score, preferring the lowest index on exact ties.
fn rank1_index(scores: &[f64]) -> usize {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate().skip(1) {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

/// The k shared tokens most cosine-similar to a visual embedding, ranked
/// score descending with ties broken by shared index ascending.
///
/// Requires `1 <= k <= T`, a finite nonzero embedding of the model's
/// dimension, and a model that carries every shared token.
pub fn topk_tokens(
    embedding: &[f64],
    model: &ToyLanguageModel,
    vocab: &SharedVocabulary,
    k: usize,
) -> Result<Vec<RankedToken>> {
    let t = vocab.len();
    if t == 0 {
        return Err(Error::Contract(
            "topk_tokens requires a non-empty shared vocabulary".into(),
        ));
    }
    if k == 0 || k > t {
        return Err(Error::Contract(format!(
            "topk_tokens requires 1 <= k <= {t}, got k = {k}"
        )));
    }
    if embedding.len() != model.dim {
        return Err(Error::Contract(format!(
            "embedding has {} entries but model {:?} has dimension {}",
            embedding.len(),
            model.name,
            model.dim
        )));
    }
    if embedding.iter().any(|v| !v.is_finite()) {
        return Err(Error::Domain(
            "topk_tokens requires a finite embedding".into(),
        ));
    }
    if embedding.iter().all(|&v| v == 0.0) {
        return Err(Error::Domain(
            "topk_tokens requires a nonzero embedding".into(),
        ));
    }
    if model.shared_index_map.len() < t {
        return Err(Error::Integrity(format!(
            "model {:?} maps only {} shared tokens; the shared vocabulary has {t}",
            model.name,
            model.shared_index_map.len()
        )));
    }
    model.validate()?;

    let scores = shared_token_scores(embedding, model, t)?;
    let order = rank_indices(&scores);
    Ok(order[..k]
        .iter()
        .map(|&i| RankedToken {
            shared_index: i,
            token: vocab.entries[i].token.clone(),
            score: scores[i],
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Recovery accuracy
// ---------------------------------------------------------------------------

/// A sample whose planted labels do not pair up with its feature rows is a
/// broken artifact, not a measurable input.
fn check_sample(sample: &SyntheticSample, t: usize) -> Result<()> {
    if sample.planted.len() != sample.features.rows() {
        return Err(Error::Integrity(format!(
            "sample has {} feature rows but {} planted labels",
            sample.features.rows(),
            sample.planted.len()
        )));
    }
    if let Some(&bad) = sample.planted.iter().find(|&&p| p >= t) {
        return Err(Error::Integrity(format!(
            "planted token index {bad} out of range for {t} shared tokens"
        )));
    }
    Ok(())
}

/// Fraction of patches whose rank-1 retrieved token (cosine against the
/// bound model's shared rows) equals the planted token.
pub fn recovery_accuracy(bound: &BoundAdapter, samples: &[SyntheticSample]) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "recovery_accuracy requires a non-empty dataset".into(),
        ));
    }
    let rows = &bound.shared_embeddings;
    let t = rows.rows();
    let mut hits = 0usize;
    let mut total = 0usize;
    for sample in samples {
        check_sample(sample, t)?;
        let composed = bound.forward(&sample.features)?;
        for patch in 0..composed.rows() {
            let mut scores = Vec::with_capacity(t);
            for token in 0..t {
                scores.push(cosine_similarity(composed.row(patch), rows.row(token))?);
            }
            if rank1_index(&scores) == sample.planted[patch] {
                hits += 1;
            }
        }
        total += composed.rows();
    }
    if total == 0 {
        return Err(Error::Contract(
            "recovery_accuracy requires at least one patch".into(),
        ));
    }
    Ok(hits as f64 / total as f64)
}

// ---------------------------------------------------------------------------
// Alignment trajectory
// ---------------------------------------------------------------------------

/// Runs one probe sample through every checkpoint (each attached to the same
/// model) and records the per-patch top-k retrievals — the evolution of
/// vocabulary alignment over the course of training.
///
/// All checkpoints must carry the given vocabulary's fingerprint. The report
/// is a pure function of its inputs.
pub fn alignment_trajectory(
    checkpoints: &[AdapterCheckpoint],
    sample: &SyntheticSample,
    model: &ToyLanguageModel,
    vocab: &SharedVocabulary,
    k: usize,
) -> Result<AlignmentReport> {
    if checkpoints.is_empty() {
        return Err(Error::Contract(
            "alignment_trajectory requires at least one checkpoint".into(),
        ));
    }
    if sample.features.rows() == 0 {
        return Err(Error::Contract(
            "alignment_trajectory requires a probe sample with at least one patch".into(),
        ));
    }
    check_sample(sample, vocab.len())?;
    let fingerprint = vocab.fingerprint();
    for ckpt in checkpoints {
        if ckpt.vocab_fingerprint != fingerprint {
            return Err(Error::IncompatibleVocabulary {
                expected: fingerprint,
                found: ckpt.vocab_fingerprint.clone(),
            });
        }
    }

    let mut stages = Vec::with_capacity(checkpoints.len());
    for ckpt in checkpoints {
        let adapter = ckpt.to_adapter()?;
        let bound = attach(&adapter, model, vocab)?;
        let composed = bound.forward(&sample.features)?;
        let mut patches = Vec::with_capacity(composed.rows());
        let mut hits = 0usize;
        for patch in 0..composed.rows() {
            let ranked = topk_tokens(composed.row(patch), model, vocab, k)?;
            if ranked[0].shared_index == sample.planted[patch] {
                hits += 1;
            }
            patches.push(PatchAlignment {
                patch,
                planted: sample.planted[patch],
                ranked,
            });
        }
        stages.push(StageAlignment {
            checkpoint: ckpt.metadata.stage.clone(),
            top1_recovery: hits as f64 / composed.rows() as f64,
            patches,
        });
    }

    Ok(AlignmentReport {
        version: ANALYSIS_FILE_VERSION,
        model: model.name.clone(),
        vocab_fingerprint: fingerprint,
        k,
        stages,
    })
}

// ---------------------------------------------------------------------------
// Transfer parity
// ---------------------------------------------------------------------------

/// Bitwise equality of two probability matrices; the first differing entry
/// (row-major order) is reported as a parity violation.
pub fn probability_parity(a: &Matrix, b: &Matrix) -> Result<()> {
    if a.rows() != b.rows() || a.cols() != b.cols() {
        return Err(Error::Shape {
            op: "probability-parity",
            left_rows: a.rows(),
            left_cols: a.cols(),
            right_rows: b.rows(),
            right_cols: b.cols(),
        });
    }
    for r in 0..a.rows() {
        for c in 0..a.cols() {
            let (x, y) = (a.get(r, c), b.get(r, c));
            if x.to_bits() != y.to_bits() {
                return Err(Error::Parity {
                    row: r,
                    col: c,
                    a: x,
                    b: y,
                });
            }
        }
    }
    Ok(())
}

/// Attaches one adapter to two models and verifies that the probability
/// matrices agree bitwise on every sample (rows are reported as
/// dataset-global patch indices), then reports per-model recovery accuracy,
/// their ratio, and the composed-output dimensions.
pub fn transfer_parity_report(
    adapter: &LangBridgeAdapter,
    model_a: &ToyLanguageModel,
    model_b: &ToyLanguageModel,
    vocab: &SharedVocabulary,
    samples: &[SyntheticSample],
) -> Result<TransferParityReport> {
    if samples.is_empty() {
        return Err(Error::Contract(
            "transfer_parity_report requires a non-empty dataset".into(),
        ));
    }
    let bound_a = attach(adapter, model_a, vocab)?;
    let bound_b = attach(adapter, model_b, vocab)?;

    let mut patches = 0usize;
    for sample in samples {
        let pa = bound_a.adapter.probabilities(&sample.features)?;
        let pb = bound_b.adapter.probabilities(&sample.features)?;
        probability_parity(&pa, &pb).map_err(|e| match e {
            Error::Parity { row, col, a, b } => Error::Parity {
                row: patches + row,
                col,
                a,
                b,
            },
            other => other,
        })?;
        patches += pa.rows();
    }

    let recovery_a = recovery_accuracy(&bound_a, samples)?;
    let recovery_b = recovery_accuracy(&bound_b, samples)?;
    Ok(TransferParityReport {
        model_a: model_a.name.clone(),
        model_b: model_b.name.clone(),
        dim_a: model_a.dim,
        dim_b: model_b.dim,
        samples: samples.len(),
        patches,
        probability_parity: true,
        recovery_a,
        recovery_b,
        recovery_ratio: if recovery_a > 0.0 {
            Some(recovery_b / recovery_a)
        } else {
            None
        },
    })
}

// ---------------------------------------------------------------------------
// Report serialization
// ---------------------------------------------------------------------------

/// Quotes a CSV field when it contains a comma, quote, or line break.
fn csv_field(s: &str) -> Cow<'_, str> {
    if s.contains([',', '"', '\n', '\r']) {
        let mut out = String::with_capacity(s.len() + 2);
        out.push('"');
        for ch in s.chars() {
            if ch == '"' {
                out.push('"');
            }
            out.push(ch);
        }
        out.push('"');
        Cow::Owned(out)
    } else {
        Cow::Borrowed(s)
    }
}

impl AlignmentReport {
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

    /// Flat CSV view, one row per (checkpoint, patch, rank): header
    /// `checkpoint,patch,rank,token,score`, rank 1-based, fields quoted
    /// where needed.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("checkpoint,patch,rank,token,score\n");
        for stage in &self.stages {
            for patch in &stage.patches {
                for (rank, entry) in patch.ranked.iter().enumerate() {
                    out.push_str(&format!(
                        "{},{},{},{},{}\n",
                        csv_field(&stage.checkpoint),
                        patch.patch,
                        rank + 1,
                        csv_field(&entry.token),
                        entry.score
                    ));
                }
            }
        }
        out
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv().as_bytes())
            .map_err(|e| Error::io(path.display().to_string(), e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::adapter::{init, AdapterConfig, CheckpointMeta};
    use crate::rng::substream;
    use crate::testbed::{
        derive_model, gen_dataset, gen_feature_map, gen_latents, gen_sample, DatasetConfig,
        LatentSemantics,
    };
    use crate::training::{run_stage, AdamW, OptimizerConfig, Phase, Schedule, TrainConfig};
    use crate::vocab::{SharedVocabEntry, SharedVocabulary, VOCAB_FILE_VERSION};
    use proptest::prelude::*;

    fn test_vocab(t: usize) -> SharedVocabulary {
        SharedVocabulary {
            version: VOCAB_FILE_VERSION,
            model_a: "alpha".into(),
            model_b: "beta".into(),
            entries: (0..t)
                .map(|i| SharedVocabEntry {
                    token: format!("t{i:03}"),
                    id_a: i as u64,
                    id_b: (i + 500) as u64,
                    freq: (t - i) as u64,
                })
                .collect(),
        }
    }

    /// An 8-token world for retrieval unit tests.
    fn tiny_model() -> (LatentSemantics, ToyLanguageModel, SharedVocabulary) {
        let latents = gen_latents(5, 8, 4).unwrap();
        let model = derive_model(&latents, "alpha", 4, 12, 9).unwrap();
        (latents, model, test_vocab(8))
    }

    #[test]
    fn identity_retrieval_ranks_the_matching_token_first() {
        let (_, model, vocab) = tiny_model();
        for j in [0, 3, 7] {
            let embedding = model.full_embeddings.row(model.shared_index_map[j]).to_vec();
            let ranked = topk_tokens(&embedding, &model, &vocab, 3).unwrap();
            assert_eq!(ranked[0].shared_index, j);
            assert_eq!(ranked[0].token, vocab.entries[j].token);
            assert!((ranked[0].score - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn k_equal_to_vocab_size_returns_a_full_permutation() {
        let (_, model, vocab) = tiny_model();
        let embedding = vec![0.3, -1.2, 0.7, 0.05];
        let ranked = topk_tokens(&embedding, &model, &vocab, 8).unwrap();
        let mut indices: Vec<usize> = ranked.iter().map(|r| r.shared_index).collect();
        for pair in ranked.windows(2) {
            assert!(pair[0].score >= pair[1].score);
        }
        for r in &ranked {
            assert!(r.score >= -1.0 && r.score <= 1.0);
        }
        indices.sort_unstable();
        assert_eq!(indices, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn topk_rejects_out_of_range_k_and_degenerate_embeddings() {
        let (_, model, vocab) = tiny_model();
        let embedding = vec![1.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            topk_tokens(&embedding, &model, &vocab, 0),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            topk_tokens(&embedding, &model, &vocab, 9),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            topk_tokens(&[0.0, 0.0, 0.0, 0.0], &model, &vocab, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            topk_tokens(&[1.0, f64::NAN, 0.0, 0.0], &model, &vocab, 1),
            Err(Error::Domain(_))
        ));
        assert!(matches!(
            topk_tokens(&[1.0, 0.0], &model, &vocab, 1),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn ties_break_by_shared_index_ascending() {
        // Rows 0 and 1 are parallel, so both score exactly 1 against [3, 0];
        // the lower shared index must come first.
        let model = ToyLanguageModel {
            name: "hand".into(),
            dim: 2,
            full_embeddings: Matrix::from_rows(&[
                vec![1.0, 0.0],
                vec![2.0, 0.0],
                vec![0.0, 1.0],
                vec![-1.0, 0.0],
            ])
            .unwrap(),
            shared_index_map: vec![0, 1, 2, 3],
            vocab_fingerprint: None,
        };
        let vocab = test_vocab(4);
        let ranked = topk_tokens(&[3.0, 0.0], &model, &vocab, 4).unwrap();
        let indices: Vec<usize> = ranked.iter().map(|r| r.shared_index).collect();
        assert_eq!(indices, vec![0, 1, 2, 3]);
        assert_eq!(ranked[0].score, 1.0);
        assert_eq!(ranked[1].score, 1.0);
    }

    #[test]
    fn topk_matches_a_brute_force_oracle_for_every_k() {
        let latents = gen_latents(7, 64, 24).unwrap();
        let model = derive_model(&latents, "alpha", 24, 100, 21).unwrap();
        let vocab = test_vocab(64);
        let mut rng = substream(33, "probe");
        for _ in 0..5 {
            let embedding: Vec<f64> =
                (0..24).map(|_| rand::Rng::random::<f64>(&mut rng) - 0.5).collect();

            // Independent oracle: inline cosine plus selection by repeated
            // max-scan, preferring the lower index on ties.
            let oracle_scores: Vec<f64> = (0..64)
                .map(|i| {
                    let row = model.full_embeddings.row(model.shared_index_map[i]);
                    let dot: f64 = embedding.iter().zip(row).map(|(a, b)| a * b).sum();
                    let nu: f64 = embedding.iter().map(|a| a * a).sum::<f64>().sqrt();
                    let nv: f64 = row.iter().map(|b| b * b).sum::<f64>().sqrt();
                    dot / (nu * nv)
                })
                .collect();
            let mut remaining: Vec<usize> = (0..64).collect();
            let mut oracle_order = Vec::new();
            while !remaining.is_empty() {
                let mut best = 0;
                for (pos, &i) in remaining.iter().enumerate() {
                    if oracle_scores[i] > oracle_scores[remaining[best]] {
                        best = pos;
                    } else if oracle_scores[i] == oracle_scores[remaining[best]]
                        && i < remaining[best]
                    {
                        best = pos;
                    }
                }
                oracle_order.push(remaining.remove(best));
            }

            for k in [1, 2, 3, 17, 64] {
                let ranked = topk_tokens(&embedding, &model, &vocab, k).unwrap();
                let indices: Vec<usize> = ranked.iter().map(|r| r.shared_index).collect();
                assert_eq!(indices, oracle_order[..k], "k = {k}");
                for (r, &i) in ranked.iter().zip(&indices) {
                    assert!((r.score - oracle_scores[i]).abs() < 1e-12);
                }
            }
        }
    }

    proptest! {
        /// Rank order is scale-free: positively rescaling the query embedding
        /// or any single token row leaves the argsort unchanged.
        #[test]
        fn cosine_rank_order_is_invariant_to_positive_rescaling(
            embedding in proptest::collection::vec(-5.0f64..5.0, 4),
            scale in 0.1f64..50.0,
            row_scale in 0.1f64..50.0,
            target in 0usize..8,
        ) {
            prop_assume!(embedding.iter().any(|v| v.abs() > 1e-3));
            let (_, model, vocab) = tiny_model();

            let base = topk_tokens(&embedding, &model, &vocab, 8).unwrap();
            // Order is only well-defined away from ties; skip razor-thin gaps.
            for pair in base.windows(2) {
                prop_assume!(pair[0].score - pair[1].score > 1e-9);
            }
            let base_order: Vec<usize> = base.iter().map(|r| r.shared_index).collect();

            let scaled: Vec<f64> = embedding.iter().map(|v| v * scale).collect();
            let scaled_order: Vec<usize> = topk_tokens(&scaled, &model, &vocab, 8)
                .unwrap()
                .iter()
                .map(|r| r.shared_index)
                .collect();
            prop_assert_eq!(&base_order, &scaled_order);

            let mut rows = model.full_embeddings.to_rows();
            for v in &mut rows[model.shared_index_map[target]] {
                *v *= row_scale;
            }
            let mut rescaled_model = model.clone();
            rescaled_model.full_embeddings = Matrix::from_rows(&rows).unwrap();
            let rescaled_order: Vec<usize> = topk_tokens(&embedding, &rescaled_model, &vocab, 8)
                .unwrap()
                .iter()
                .map(|r| r.shared_index)
                .collect();
            prop_assert_eq!(&base_order, &rescaled_order);
        }
    }

    /// A trainable world mirroring the training tests: 16 tokens, tiny dims.
    struct World {
        latents: LatentSemantics,
        feature_map: Matrix,
        adapter: LangBridgeAdapter,
        model: ToyLanguageModel,
        vocab: SharedVocabulary,
        train: Vec<SyntheticSample>,
        heldout: Vec<SyntheticSample>,
    }

    fn small_world() -> World {
        let vocab = test_vocab(16);
        let fp = vocab.fingerprint();
        let latents = gen_latents(7, 16, 8).unwrap();
        let mut model = derive_model(&latents, "alpha", 8, 24, 11).unwrap();
        model.vocab_fingerprint = Some(fp.clone());
        let feature_map = gen_feature_map(5, 6, 8).unwrap();
        let cfg = DatasetConfig {
            train: 64,
            heldout: 16,
            patches: 4,
            noise_sigma: 0.05,
            mixture_k: 1,
        };
        let data = gen_dataset(&latents, &feature_map, &cfg, 21).unwrap();
        let adapter = init(
            &AdapterConfig {
                d_v: 6,
                hidden: 12,
                d_proj: 8,
                t: 16,
                temperature: 1.0,
            },
            0,
            fp,
        )
        .unwrap();
        World {
            latents,
            feature_map,
            adapter,
            model,
            vocab,
            train: data.train,
            heldout: data.heldout,
        }
    }

    #[test]
    fn untrained_recovery_sits_near_chance() {
        let latents = gen_latents(3, 64, 24).unwrap();
        let model = derive_model(&latents, "alpha", 24, 100, 17).unwrap();
        let feature_map = gen_feature_map(5, 16, 24).unwrap();
        let vocab = test_vocab(64);
        let cfg = DatasetConfig {
            train: 64,
            heldout: 0,
            patches: 16,
            noise_sigma: 0.05,
            mixture_k: 1,
        };
        let data = gen_dataset(&latents, &feature_map, &cfg, 21).unwrap().train;
        let adapter = init(&AdapterConfig::default(), 0, vocab.fingerprint()).unwrap();
        let bound = attach(&adapter, &model, &vocab).unwrap();

        // 1024 patches: a binomial baseline at p = 1/64 stays within 3/sqrt(n).
        let r = recovery_accuracy(&bound, &data).unwrap();
        let n = 64.0_f64 * 16.0;
        assert!(
            (r - 1.0 / 64.0).abs() <= 3.0 / n.sqrt(),
            "untrained recovery {r} is not near chance"
        );
    }

    #[test]
    fn recovery_rejects_empty_or_broken_datasets() {
        let w = small_world();
        let bound = attach(&w.adapter, &w.model, &w.vocab).unwrap();
        assert!(matches!(
            recovery_accuracy(&bound, &[]),
            Err(Error::Contract(_))
        ));

        let mut broken = w.train[0].clone();
        broken.planted.pop();
        assert!(matches!(
            recovery_accuracy(&bound, &[broken]),
            Err(Error::Integrity(_))
        ));

        let mut out_of_range = w.train[0].clone();
        out_of_range.planted[0] = 16;
        assert!(matches!(
            recovery_accuracy(&bound, &[out_of_range]),
            Err(Error::Integrity(_))
        ));
    }

    #[test]
    fn training_improves_recovery_and_the_trajectory_reflects_it() {
        let mut w = small_world();
        let bound = attach(&w.adapter, &w.model, &w.vocab).unwrap();
        let untrained = recovery_accuracy(&bound, &w.heldout).unwrap();

        let config = TrainConfig {
            learning_rate: 1e-2,
            warmup_ratio: 0.1,
            schedule: Schedule::Cosine,
            batch_size: 8,
            total_steps: 400,
            optimizer: OptimizerConfig::default(),
            checkpoint_steps: vec![10, 400],
            seed: 13,
        };
        let mut optimizer = AdamW::new(OptimizerConfig::default());
        let run = run_stage(
            &mut w.adapter,
            &mut optimizer,
            &bound.shared_embeddings,
            &w.train,
            &config,
            Phase::Pretrain,
            0,
            true,
            |_| Ok(()),
        )
        .unwrap();

        let trained_bound = attach(&w.adapter, &w.model, &w.vocab).unwrap();
        let trained = recovery_accuracy(&trained_bound, &w.heldout).unwrap();
        assert!(
            trained >= untrained + 0.5,
            "recovery went {untrained} -> {trained}"
        );
        assert!(trained >= 0.75, "held-out recovery {trained} too low");

        // The trajectory over a fresh 32-patch probe shows the same rise.
        let probe = gen_sample(&w.latents, &w.feature_map, 32, 0.05, 1, 99).unwrap();
        let report =
            alignment_trajectory(&run.checkpoints, &probe, &w.model, &w.vocab, 5).unwrap();
        let labels: Vec<&str> = report.stages.iter().map(|s| s.checkpoint.as_str()).collect();
        assert_eq!(labels, vec!["10", "400", "final"]);
        let first = report.stages[0].top1_recovery;
        let last = report.stages.last().unwrap().top1_recovery;
        assert!(
            last >= first + 0.3,
            "trajectory went {first} -> {last} on the probe"
        );
        for stage in &report.stages {
            assert_eq!(stage.patches.len(), 32);
            for patch in &stage.patches {
                assert_eq!(patch.ranked.len(), 5);
                for pair in patch.ranked.windows(2) {
                    assert!(pair[0].score >= pair[1].score);
                }
            }
        }
    }

    #[test]
    fn trajectory_reports_one_stage_per_checkpoint_deterministically() {
        let w = small_world();
        let fp = w.vocab.fingerprint();
        let other = init(
            &AdapterConfig {
                d_v: 6,
                hidden: 12,
                d_proj: 8,
                t: 16,
                temperature: 1.0,
            },
            1,
            fp,
        )
        .unwrap();
        let checkpoints = vec![
            AdapterCheckpoint::from_adapter(&w.adapter, CheckpointMeta::initial()),
            AdapterCheckpoint::from_adapter(
                &other,
                CheckpointMeta {
                    stage: "final".into(),
                    step: 10,
                    loss: Some(1.0),
                    optimizer: None,
                    train_config: None,
                },
            ),
        ];
        let probe = &w.train[0];

        let single =
            alignment_trajectory(&checkpoints[..1], probe, &w.model, &w.vocab, 3).unwrap();
        assert_eq!(single.stages.len(), 1);
        assert_eq!(single.stages[0].checkpoint, "init");

        let a = alignment_trajectory(&checkpoints, probe, &w.model, &w.vocab, 3).unwrap();
        let b = alignment_trajectory(&checkpoints, probe, &w.model, &w.vocab, 3).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.stages.len(), 2);
        assert_eq!(a.k, 3);
        assert_eq!(a.model, "alpha");
    }

    #[test]
    fn trajectory_rejects_mismatched_vocabularies_and_empty_inputs() {
        let w = small_world();
        let checkpoints = vec![AdapterCheckpoint::from_adapter(
            &w.adapter,
            CheckpointMeta::initial(),
        )];
        let probe = &w.train[0];

        let mut other_vocab = test_vocab(16);
        other_vocab.entries[0].id_b = 9_999;
        assert!(matches!(
            alignment_trajectory(&checkpoints, probe, &w.model, &other_vocab, 3),
            Err(Error::IncompatibleVocabulary { .. })
        ));

        assert!(matches!(
            alignment_trajectory(&[], probe, &w.model, &w.vocab, 3),
            Err(Error::Contract(_))
        ));

        let empty_probe = SyntheticSample {
            features: Matrix::zeros(0, 6),
            planted: vec![],
            mixture_weights: None,
        };
        assert!(matches!(
            alignment_trajectory(&checkpoints, &empty_probe, &w.model, &w.vocab, 3),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn alignment_report_roundtrips_losslessly() {
        let w = small_world();
        let checkpoints = vec![AdapterCheckpoint::from_adapter(
            &w.adapter,
            CheckpointMeta::initial(),
        )];
        let report =
            alignment_trajectory(&checkpoints, &w.train[0], &w.model, &w.vocab, 4).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("analysis.json");
        report.save(&path).unwrap();
        let loaded = AlignmentReport::load(&path).unwrap();
        assert_eq!(report, loaded);

        report.save_csv(&dir.path().join("analysis.csv")).unwrap();
        let csv = std::fs::read_to_string(dir.path().join("analysis.csv")).unwrap();
        assert!(csv.starts_with("checkpoint,patch,rank,token,score\n"));
        // Header plus one row per (patch, rank).
        assert_eq!(csv.lines().count(), 1 + 4 * 4);
    }

    #[test]
    fn csv_is_flat_with_header_and_escaped_fields() {
        let report = AlignmentReport {
            version: ANALYSIS_FILE_VERSION,
            model: "alpha".into(),
            vocab_fingerprint: "fp".into(),
            k: 2,
            stages: vec![StageAlignment {
                checkpoint: "final".into(),
                top1_recovery: 1.0,
                patches: vec![PatchAlignment {
                    patch: 0,
                    planted: 1,
                    ranked: vec![
                        RankedToken {
                            shared_index: 1,
                            token: "x,y".into(),
                            score: 0.5,
                        },
                        RankedToken {
                            shared_index: 0,
                            token: "ab\"c".into(),
                            score: 0.25,
                        },
                    ],
                }],
            }],
        };
        assert_eq!(
            report.to_csv(),
            "checkpoint,patch,rank,token,score\n\
             final,0,1,\"x,y\",0.5\n\
             final,0,2,\"ab\"\"c\",0.25\n"
        );
    }

    #[test]
    fn parity_report_covers_dims_recovery_and_ratio() {
        let vocab = test_vocab(64);
        let fp = vocab.fingerprint();
        let latents = gen_latents(3, 64, 24).unwrap();
        let mut model_a = derive_model(&latents, "alpha", 24, 100, 17).unwrap();
        let mut model_b = derive_model(&latents, "beta", 40, 120, 19).unwrap();
        model_a.vocab_fingerprint = Some(fp.clone());
        model_b.vocab_fingerprint = Some(fp.clone());
        let feature_map = gen_feature_map(5, 16, 24).unwrap();
        let cfg = DatasetConfig {
            train: 8,
            heldout: 0,
            patches: 4,
            noise_sigma: 0.05,
            mixture_k: 1,
        };
        let data = gen_dataset(&latents, &feature_map, &cfg, 21).unwrap().train;
        let adapter = init(&AdapterConfig::default(), 0, fp).unwrap();

        let report =
            transfer_parity_report(&adapter, &model_a, &model_b, &vocab, &data).unwrap();
        assert!(report.probability_parity);
        assert_eq!((report.dim_a, report.dim_b), (24, 40));
        assert_eq!(report.samples, 8);
        assert_eq!(report.patches, 32);
        assert!((0.0..=1.0).contains(&report.recovery_a));
        assert!((0.0..=1.0).contains(&report.recovery_b));
        match report.recovery_ratio {
            Some(ratio) => {
                assert!(report.recovery_a > 0.0);
                assert!((ratio - report.recovery_b / report.recovery_a).abs() < 1e-15);
            }
            None => assert_eq!(report.recovery_a, 0.0),
        }
    }

    #[test]
    fn parity_check_reports_the_first_differing_entry() {
        let a = Matrix::from_rows(&[vec![0.25, 0.25, 0.5], vec![0.1, 0.2, 0.7]]).unwrap();
        let mut rows = a.to_rows();
        rows[0][1] = 0.250_000_000_000_1;
        rows[1][2] = 0.8;
        let b = Matrix::from_rows(&rows).unwrap();
        match probability_parity(&a, &b) {
            Err(Error::Parity { row, col, a, b }) => {
                assert_eq!((row, col), (0, 1));
                assert_eq!(a, 0.25);
                assert_eq!(b, 0.250_000_000_000_1);
            }
            other => panic!("expected a parity violation, got {other:?}"),
        }

        // Bitwise means bitwise: -0.0 and 0.0 differ.
        let x = Matrix::from_rows(&[vec![0.0]]).unwrap();
        let y = Matrix::from_rows(&[vec![-0.0]]).unwrap();
        assert!(matches!(
            probability_parity(&x, &y),
            Err(Error::Parity { row: 0, col: 0, .. })
        ));
        assert!(probability_parity(&x, &x).is_ok());

        let wide = Matrix::zeros(1, 2);
        assert!(matches!(
            probability_parity(&x, &wide),
            Err(Error::Shape { .. })
        ));
    }
}
