//! Concept-bottleneck image privacy classification.
//!
//! Images and legally defined personal-data concepts are embedded into a shared
//! vision-language space, scored by cosine similarity, and classified as
//! private or public by an L1-sparse logistic regression over the normalized
//! concept scores. Because the classifier is linear in named concepts, every
//! prediction can be explained by the concepts detected in the image together
//! with the sign of their learned weights.
//!
//! The crate is organized by pipeline stage:
//!
//! - [`vocab`]: concept vocabularies and prompt sentences
//! - [`embed`]: the `PVX1` embedding container and ONNX encoders
//! - [`score`]: cosine concept scores and the `[0, 1]` normalizer
//! - [`lrmodel`]: the sparse logistic-regression model and its solver
//! - [`tune`]: random / TPE hyperparameter search
//! - [`explain`]: per-image surfaced concepts and reports
//! - [`zeroshot`]: per-concept threshold calibration and detection
//! - [`metrics`]: confusion counts, balanced accuracy and F1
//! - [`bias`]: cross-dataset weight comparison
//! - [`datasets`]: label files, splits and alignment
//! - [`pipeline`]: config-driven orchestration with content-hash caching
//! - [`cli`]: the `privlex` command line
//!
//! See the `examples/` directory for one runnable program per capability.

pub mod bias;
pub mod cli;
pub mod datasets;
pub mod embed;
pub mod error;
pub mod explain;
pub mod hashing;
pub mod lrmodel;
pub mod metrics;
pub mod pipeline;
pub mod score;
pub mod synth;
pub mod tune;
pub mod vocab;
pub mod zeroshot;

pub use error::{Error, Result};
