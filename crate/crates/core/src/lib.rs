//! Desk-scale vocabulary-anchored vision-language adapter.
//!
//! The core idea: instead of mapping visual features directly into one
//! language model's embedding space (which welds the adapter to that model's
//! dimension), map each feature to a probability distribution over a *shared
//! vocabulary* and deliver the weighted combination `p * E` of the target
//! model's vocabulary embedding rows. Any model that shares the vocabulary
//! can be attached after training — the probability matrix is identical under
//! every binding, only the composition changes dimension.
//!
//! Module map:
//! * [`numerics`] — dense f64 matrices + reverse-mode autodiff tape.
//! * [`vocab`] — vocabulary intersection, corpus frequency counting, top-N
//!   selection, fingerprinting.
//! * [`testbed`] — seeded synthetic latents, two toy language models with
//!   different embedding dimensions, planted-token feature datasets.
//! * [`adapter`] — the vocabulary-anchored adapter, the dimension-bound MLP
//!   baseline, attach/transfer, checkpoints.
//! * [`training`] — caption-loss pretraining with AdamW, warmup + cosine
//!   schedule, staged checkpoints, gradient checking.
//! * [`analysis`] — top-k token retrieval by cosine, alignment trajectories
//!   across checkpoints, recovery accuracy, transfer-parity reports.
//! * [`cli`] — the `langbridge` command-line pipeline.

pub mod adapter;
pub mod analysis;
pub mod cli;
pub mod error;
pub mod numerics;
pub mod rng;
pub mod testbed;
pub mod training;
pub mod vocab;

pub use error::{Error, Result};
pub use numerics::Matrix;
