//! Black-box universal domain adaptation.
//!
//! A target classifier is trained from nothing but the probability outputs
//! of a fixed source model, while the target label space may only partially
//! overlap the source one. The pieces:
//!
//! - [`numerics`]: dense math, probability primitives, k-means, gradient checks.
//! - [`model`]: the MLP feature extractor plus linear head, prototypes and the
//!   entropy-thresholded inference rule.
//! - [`blackbox`]: the predictor contract, in-process and HTTP realizations,
//!   and the query-once prediction cache.
//! - [`objective`]: distillation, entropy-separation self-training and the
//!   prototype consistency regularizer, with analytic gradients.
//! - [`benchgen`]: synthetic source/target domains with configurable overlap.
//! - [`trainer`]: the adaptation loop.
//! - [`eval`]: H-score, average class accuracy and the source-only baseline.
//! - [`experiment`]: ablation, openness and sensitivity sweeps.

pub mod benchgen;
pub mod blackbox;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod gradsuite;
pub mod json;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod trainer;

pub use error::{Error, Result};
pub use eval::{EvalReport, GroundTruth};
pub use model::{Activation, ModelConfig, Prediction, PrototypeBank, TargetModel};
pub use numerics::{Matrix, ProbVector, Vector};
