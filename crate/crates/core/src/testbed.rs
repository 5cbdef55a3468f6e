//! Synthetic testbed: a planted ground truth for verifying adapter learning
//! and transfer at desk scale.
//!
//! A single latent geometry (one unit vector per shared token) is projected
//! into two frozen "language models" with different embedding dimensions via
//! scaled isometries, so the models agree on token geometry while disagreeing
//! on coordinates. "Visual" features are generated from the same latents
//! through a fixed feature map plus optional noise, with the planted token
//! recorded — making recovery and cross-model transfer exactly checkable.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Exp1, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{matmul, Matrix};
use crate::rng::{child_seed, substream};

/// Desk-scale defaults: shared vocabulary size and latent dimension.
pub const DEFAULT_T: usize = 64;
pub const DEFAULT_D_S: usize = 24;
/// Feature and patch defaults for generated samples.
pub const DEFAULT_D_V: usize = 16;
pub const DEFAULT_PATCHES: usize = 16;
pub const DEFAULT_NOISE_SIGMA: f64 = 0.05;
pub const DEFAULT_MIXTURE_K: usize = 1;
/// Dataset split defaults; the fine-tuning stage draws from a second,
/// separately seeded dataset.
pub const DEFAULT_TRAIN: usize = 2048;
pub const DEFAULT_HELDOUT: usize = 256;
pub const DEFAULT_SFT_TRAIN: usize = 512;
/// Full (non-shared) vocabulary sizes and dims of the two default models.
pub const DEFAULT_T_FULL_A: usize = 100;
pub const DEFAULT_T_FULL_B: usize = 120;
pub const DEFAULT_DIM_A: usize = 24;
pub const DEFAULT_DIM_B: usize = 40;

/// Current on-disk schema version for model files.
pub const MODEL_FILE_VERSION: u32 = 1;

/// The planted ground truth: one unit-norm latent row per shared token.
#[derive(Debug, Clone)]
pub struct LatentSemantics {
    /// T×D_s; row `i` is the latent direction of shared token `i`.
    pub latents: Matrix,
    pub seed: u64,
}

/// Draws T unit-norm latent rows from a seeded isotropic Gaussian.
pub fn gen_latents(seed: u64, t: usize, d_s: usize) -> Result<LatentSemantics> {
    if t < 2 || d_s < 2 {
        return Err(Error::Contract(format!(
            "gen_latents requires T >= 2 and D_s >= 2, got T={t}, D_s={d_s}"
        )));
    }
    let mut rng = substream(seed, "testbed/latents");
    let mut values = Vec::with_capacity(t * d_s);
    for _ in 0..t * d_s {
        values.push(StandardNormal.sample(&mut rng));
    }
    let mut latents = Matrix::new(t, d_s, values)?;
    for r in 0..t {
        let norm = l2_norm(latents.row(r));
        if norm == 0.0 {
            return Err(Error::Domain("degenerate zero latent draw".into()));
        }
        for v in &mut latents.values_mut()[r * d_s..(r + 1) * d_s] {
            *v /= norm;
        }
    }
    Ok(LatentSemantics { latents, seed })
}

/// A frozen synthetic language model: an embedding table over its full
/// vocabulary plus the map from shared-token index to embedding row.
#[derive(Debug, Clone)]
pub struct ToyLanguageModel {
    pub name: String,
    /// Embedding dimension D_m.
    pub dim: usize,
    /// T_full×D_m embedding table.
    pub full_embeddings: Matrix,
    /// shared_index → row of `full_embeddings`; injective.
    pub shared_index_map: Vec<usize>,
    /// Fingerprint of the shared vocabulary this model's index map follows.
    pub vocab_fingerprint: Option<String>,
}

impl ToyLanguageModel {
    /// Gathers the shared-token rows into a T×D_m matrix, ordered by
    /// shared index.
    pub fn shared_embeddings(&self) -> Matrix {
        let d = self.dim;
        let mut values = Vec::with_capacity(self.shared_index_map.len() * d);
        for &row in &self.shared_index_map {
            values.extend_from_slice(self.full_embeddings.row(row));
        }
        Matrix::raw(self.shared_index_map.len(), d, values)
    }

    pub fn validate(&self) -> Result<()> {
        let t_full = self.full_embeddings.rows();
        if self.dim != self.full_embeddings.cols() {
            return Err(Error::Contract(format!(
                "model {:?}: dim {} does not match embedding table width {}",
                self.name,
                self.dim,
                self.full_embeddings.cols()
            )));
        }
        let mut seen = vec![false; t_full];
        for &row in &self.shared_index_map {
            if row >= t_full {
                return Err(Error::Index {
                    what: "shared_index_map entry".into(),
                    index: row,
                    size: t_full,
                });
            }
            if seen[row] {
                return Err(Error::Contract(format!(
                    "model {:?}: shared_index_map maps two shared tokens to row {row}",
                    self.name
                )));
            }
            seen[row] = true;
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ModelFile {
            version: MODEL_FILE_VERSION,
            name: self.name.clone(),
            dim: self.dim,
            embeddings: self.full_embeddings.to_rows(),
            shared_index_map: self.shared_index_map.clone(),
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        };
        let text = serde_json::to_string_pretty(&file)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        std::fs::write(path, text.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::io(path.display().to_string(), e))?;
        let file: ModelFile = serde_json::from_str(&text)
            .map_err(|e| Error::json(path.display().to_string(), e))?;
        let rows = file.embeddings.len();
        let mut values = Vec::with_capacity(rows * file.dim);
        for row in &file.embeddings {
            if row.len() != file.dim {
                return Err(Error::Contract(format!(
                    "model file {}: embedding row of width {} in a dim-{} model",
                    path.display(),
                    row.len(),
                    file.dim
                )));
            }
            values.extend_from_slice(row);
        }
        let model = ToyLanguageModel {
            name: file.name,
            dim: file.dim,
            full_embeddings: Matrix::new(rows, file.dim, values)?,
            shared_index_map: file.shared_index_map,
            vocab_fingerprint: file.vocab_fingerprint,
        };
        model.validate()?;
        Ok(model)
    }
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    name: String,
    dim: usize,
    embeddings: Vec<Vec<f64>>,
    shared_index_map: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    vocab_fingerprint: Option<String>,
}

/// Derives a frozen model from the latents.
///
/// The shared rows are `latents · A_mᵀ` with `A_m = √D_m · Q`, `Q` a seeded
/// random isometry (orthonormal columns), so shared-token geometry — norms,
/// angles, nearest neighbors — is preserved exactly across models of any
/// dimension while coordinates differ completely. The remaining `T_full − T`
/// rows are seeded Gaussian noise embeddings (norm ≈ √D_m, matching the
/// shared rows), and all rows are scattered over the table by a seeded
/// permutation recorded in `shared_index_map`.
pub fn derive_model(
    latents: &LatentSemantics,
    name: &str,
    d_m: usize,
    t_full: usize,
    seed: u64,
) -> Result<ToyLanguageModel> {
    let d_s = latents.latents.cols();
    if d_m < d_s {
        return Err(Error::Contract(format!(
            "derive_model requires D_m >= D_s for an exact isometry, got D_m={d_m}, D_s={d_s}"
        )));
    }
    let mut rng = substream(seed, &format!("testbed/model/{name}/map"));
    let gauss = gaussian_matrix(&mut rng, d_m, d_s)?;
    let q = orthonormal_columns(&gauss)?;
    let map = q.map("derive-model-scale", |v| v * (d_m as f64).sqrt())?;
    derive_model_with_map(latents, name, &map, t_full, seed)
}

/// Shared construction core with an explicit mixing map (exposed separately
/// so the identity-map case is directly checkable).
fn derive_model_with_map(
    latents: &LatentSemantics,
    name: &str,
    map: &Matrix,
    t_full: usize,
    seed: u64,
) -> Result<ToyLanguageModel> {
    let t = latents.latents.rows();
    let d_m = map.rows();
    if t_full < t {
        return Err(Error::Contract(format!(
            "derive_model requires T_full >= T, got T_full={t_full}, T={t}"
        )));
    }
    let shared = matmul(&latents.latents, &map.transpose())?;

    let mut noise_rng = substream(seed, &format!("testbed/model/{name}/noise"));
    let noise_rows = t_full - t;
    let mut noise_values = Vec::with_capacity(noise_rows * d_m);
    for _ in 0..noise_rows * d_m {
        noise_values.push(StandardNormal.sample(&mut noise_rng));
    }

    // Scatter shared and noise rows over the table with a seeded permutation.
    let mut scatter_rng = substream(seed, &format!("testbed/model/{name}/scatter"));
    let mut perm: Vec<usize> = (0..t_full).collect();
    for i in (1..t_full).rev() {
        let j = scatter_rng.random_range(0..=i);
        perm.swap(i, j);
    }

    let mut values = vec![0.0; t_full * d_m];
    for i in 0..t {
        values[perm[i] * d_m..(perm[i] + 1) * d_m].copy_from_slice(shared.row(i));
    }
    for j in 0..noise_rows {
        let dst = perm[t + j];
        values[dst * d_m..(dst + 1) * d_m].copy_from_slice(&noise_values[j * d_m..(j + 1) * d_m]);
    }

    let model = ToyLanguageModel {
        name: name.to_string(),
        dim: d_m,
        full_embeddings: Matrix::new(t_full, d_m, values)?,
        shared_index_map: perm[..t].to_vec(),
        vocab_fingerprint: None,
    };
    model.validate()?;
    Ok(model)
}

/// Draws the fixed feature map B (D_v×D_s): a scaled partial isometry with
/// orthonormal rows, so unit latents map to features of unit expected norm
/// and distinct latents stay distinguishable. Requires D_v <= D_s.
pub fn gen_feature_map(seed: u64, d_v: usize, d_s: usize) -> Result<Matrix> {
    if d_v > d_s {
        return Err(Error::Contract(format!(
            "gen_feature_map requires D_v <= D_s, got D_v={d_v}, D_s={d_s}"
        )));
    }
    let mut rng = substream(seed, "testbed/feature-map");
    let gauss = gaussian_matrix(&mut rng, d_s, d_v)?;
    let q = orthonormal_columns(&gauss)?;
    let scale = (d_s as f64 / d_v as f64).sqrt();
    q.transpose().map("feature-map-scale", |v| v * scale)
}

/// One synthetic "image": N patch feature rows, each generated from a
/// planted shared token (or a small mixture with a dominant token).
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    /// N×D_v patch features.
    pub features: Matrix,
    /// Dominant (argmax-weight) shared-token index per patch; the caption
    /// target of the sample is exactly this sequence.
    pub planted: Vec<usize>,
    /// N×T simplex rows when mixture_k > 1; `None` for the pure case, where
    /// each row would be the one-hot of `planted`.
    pub mixture_weights: Option<Matrix>,
}

/// Generates one sample: per patch, draw `mixture_k` tokens and simplex
/// weights (k=1 → a single planted token with weight 1), form the weighted
/// latent, map through B, and add `noise_sigma`-scaled Gaussian noise.
pub fn gen_sample(
    latents: &LatentSemantics,
    feature_map: &Matrix,
    n: usize,
    noise_sigma: f64,
    mixture_k: usize,
    seed: u64,
) -> Result<SyntheticSample> {
    if mixture_k < 1 {
        return Err(Error::Contract("gen_sample requires mixture_k >= 1".into()));
    }
    if !(noise_sigma >= 0.0) {
        return Err(Error::Contract(format!(
            "gen_sample requires noise_sigma >= 0, got {noise_sigma}"
        )));
    }
    let t = latents.latents.rows();
    let d_s = latents.latents.cols();
    if feature_map.cols() != d_s {
        return Err(Error::Shape {
            op: "gen_sample",
            left_rows: n,
            left_cols: d_s,
            right_rows: feature_map.rows(),
            right_cols: feature_map.cols(),
        });
    }

    let mut rng = substream(seed, "sample");
    let mut planted = Vec::with_capacity(n);
    let mut mix_rows = Vec::with_capacity(n * d_s);
    let mut weights = if mixture_k > 1 {
        Some(vec![0.0; n * t])
    } else {
        None
    };
    for patch in 0..n {
        let mut drawn: Vec<(usize, f64)> = Vec::with_capacity(mixture_k);
        if mixture_k == 1 {
            drawn.push((rng.random_range(0..t), 1.0));
        } else {
            // Dirichlet(1, …, 1) weights via normalized exponentials.
            let mut total = 0.0;
            for _ in 0..mixture_k {
                let token = rng.random_range(0..t);
                let w: f64 = Exp1.sample(&mut rng);
                total += w;
                drawn.push((token, w));
            }
            for (_, w) in &mut drawn {
                *w /= total;
            }
        }
        // Accumulate repeated draws of the same token before the argmax.
        if let Some(weights) = weights.as_mut() {
            for &(token, w) in &drawn {
                weights[patch * t + token] += w;
            }
        }
        let dominant = match weights.as_ref() {
            None => drawn[0].0,
            Some(weights) => {
                let row = &weights[patch * t..(patch + 1) * t];
                let mut best = 0;
                for (i, &w) in row.iter().enumerate() {
                    if w > row[best] {
                        best = i;
                    }
                }
                best
            }
        };
        planted.push(dominant);

        let mut mix = vec![0.0; d_s];
        for &(token, w) in &drawn {
            for (m, &l) in mix.iter_mut().zip(latents.latents.row(token)) {
                *m += w * l;
            }
        }
        mix_rows.extend_from_slice(&mix);
    }

    let mix = Matrix::new(n, d_s, mix_rows)?;
    let mut features = matmul(&mix, &feature_map.transpose())?;
    if noise_sigma > 0.0 {
        for v in features.values_mut() {
            let eps: f64 = StandardNormal.sample(&mut rng);
            *v += noise_sigma * eps;
        }
    }
    Ok(SyntheticSample {
        features,
        planted,
        mixture_weights: weights.map(|w| Matrix::raw(n, t, w)),
    })
}

/// Dataset generation config; `Default` is the desk-scale configuration.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct DatasetConfig {
    pub train: usize,
    pub heldout: usize,
    pub patches: usize,
    pub noise_sigma: f64,
    pub mixture_k: usize,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            train: DEFAULT_TRAIN,
            heldout: DEFAULT_HELDOUT,
            patches: DEFAULT_PATCHES,
            noise_sigma: DEFAULT_NOISE_SIGMA,
            mixture_k: DEFAULT_MIXTURE_K,
        }
    }
}

/// A generated dataset with its disjoint train/held-out split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub train: Vec<SyntheticSample>,
    pub heldout: Vec<SyntheticSample>,
}

/// Generates `train + heldout` samples with per-sample derived seeds and
/// splits them deterministically (first `train` samples train, rest held out).
pub fn gen_dataset(
    latents: &LatentSemantics,
    feature_map: &Matrix,
    config: &DatasetConfig,
    seed: u64,
) -> Result<Dataset> {
    let total = config.train + config.heldout;
    let mut samples = Vec::with_capacity(total);
    for i in 0..total {
        let sample_seed = child_seed(seed, &format!("sample/{i}"));
        samples.push(gen_sample(
            latents,
            feature_map,
            config.patches,
            config.noise_sigma,
            config.mixture_k,
            sample_seed,
        )?);
    }
    let heldout = samples.split_off(config.train);
    Ok(Dataset {
        train: samples,
        heldout,
    })
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    features: Vec<Vec<f64>>,
    planted: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    mixture_weights: Option<Vec<Vec<f64>>>,
}

/// Writes samples as JSON lines (one sample per line).
pub fn save_samples(samples: &[SyntheticSample], path: &Path) -> Result<()> {
    let mut out = String::new();
    for s in samples {
        let line = SampleLine {
            features: s.features.to_rows(),
            planted: s.planted.clone(),
            mixture_weights: s.mixture_weights.as_ref().map(Matrix::to_rows),
        };
        out.push_str(
            &serde_json::to_string(&line).map_err(|e| Error::json(path.display().to_string(), e))?,
        );
        out.push('\n');
    }
    std::fs::write(path, out.as_bytes()).map_err(|e| Error::io(path.display().to_string(), e))
}

/// Reads samples back from JSON lines.
pub fn load_samples(path: &Path) -> Result<Vec<SyntheticSample>> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut samples = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parsed: SampleLine =
            serde_json::from_str(line).map_err(|_| Error::Decode { line: idx + 1 })?;
        let features = matrix_from_rows(&parsed.features, "features")?;
        let mixture_weights = parsed
            .mixture_weights
            .as_deref()
            .map(|rows| matrix_from_rows(rows, "mixture_weights"))
            .transpose()?;
        samples.push(SyntheticSample {
            features,
            planted: parsed.planted,
            mixture_weights,
        });
    }
    Ok(samples)
}

fn matrix_from_rows(rows: &[Vec<f64>], what: &str) -> Result<Matrix> {
    let width = rows.first().map(|r| r.len()).unwrap_or(0);
    if width == 0 {
        return Err(Error::Contract(format!("{what}: empty or zero-width rows")));
    }
    let mut values = Vec::with_capacity(rows.len() * width);
    for row in rows {
        if row.len() != width {
            return Err(Error::Contract(format!("{what}: ragged rows")));
        }
        values.extend_from_slice(row);
    }
    Matrix::new(rows.len(), width, values)
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn gaussian_matrix(rng: &mut impl Rng, rows: usize, cols: usize) -> Result<Matrix> {
    let mut values = Vec::with_capacity(rows * cols);
    for _ in 0..rows * cols {
        values.push(StandardNormal.sample(rng));
    }
    Matrix::new(rows, cols, values)
}

/// Modified Gram–Schmidt: orthonormalizes the columns of `a` (rows >= cols).
/// Pivot signs follow the positive-diagonal convention.
fn orthonormal_columns(a: &Matrix) -> Result<Matrix> {
    let (rows, cols) = (a.rows(), a.cols());
    if rows < cols {
        return Err(Error::Contract(format!(
            "orthonormal_columns requires rows >= cols, got {rows}×{cols}"
        )));
    }
    // Column-major working copy.
    let mut q: Vec<Vec<f64>> = (0..cols)
        .map(|c| (0..rows).map(|r| a.get(r, c)).collect())
        .collect();
    for j in 0..cols {
        for i in 0..j {
            let dot: f64 = (0..rows).map(|r| q[i][r] * q[j][r]).sum();
            for r in 0..rows {
                q[j][r] -= dot * q[i][r];
            }
        }
        let norm = l2_norm(&q[j]);
        if norm < 1e-12 {
            return Err(Error::Domain(
                "rank-deficient draw during orthonormalization".into(),
            ));
        }
        for v in &mut q[j] {
            *v /= norm;
        }
    }
    let mut values = vec![0.0; rows * cols];
    for (c, col) in q.iter().enumerate() {
        for (r, &v) in col.iter().enumerate() {
            values[r * cols + c] = v;
        }
    }
    Matrix::new(rows, cols, values)
}
