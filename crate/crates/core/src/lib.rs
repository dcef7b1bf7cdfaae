//! Patch-based prostate histology grading.
//!
//! The pipeline: tile annotated slides into labeled patches, train a compact
//! CNN grader (plus a cribriform-pattern detector fine-tuned from it), stitch
//! patch predictions back into slide-level probability maps, summarize tissue
//! composition, and score slides with both a threshold rule and a small MLP.
//! Metrics and saliency tooling (class activation maps, activation
//! maximization) round out the toolbox.

pub mod error;
pub mod explain;
pub mod fsconv;
pub mod metrics;
pub mod nn;
pub mod patchwork;
pub mod reconstruct;
pub mod scorer;
pub mod tensor;
pub mod types;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};
pub use types::{Grade, GleasonScore, GradePercentages};
