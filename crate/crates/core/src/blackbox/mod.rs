//! The source-model boundary.
//!
//! Adaptation code sees the source model only through [`Predictor`]:
//! inputs go in, probability vectors over the `K` source classes come out.
//! [`SourceModelArtifact`] keeps its network private, so nothing outside
//! this module can reach the source parameters.

mod cache;
mod client;
mod server;

use std::sync::atomic::{AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{ModelDocument, TargetModel};
use crate::numerics::{softmax_in_place, Matrix, ProbVector};

pub use cache::{fill_cache, PredictionCache, DEFAULT_MAX_BATCH};
pub use client::{RemoteConfig, RemotePredictor};
pub use server::{serve, ServerHandle};

pub const WIRE_SCHEMA_VERSION: u32 = 1;

/// Input to probability-vector interface of a fixed source model.
pub trait Predictor: Send + Sync {
    fn num_classes(&self) -> usize;

    fn input_dim(&self) -> usize;

    /// One probability vector per row of `batch`, in order.
    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>>;

    /// Short label recorded in caches filled from this predictor.
    fn describe(&self) -> String;
}

impl<P: Predictor + ?Sized> Predictor for &P {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        (**self).predict(batch)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

impl<P: Predictor + ?Sized> Predictor for Box<P> {
    fn num_classes(&self) -> usize {
        (**self).num_classes()
    }
    fn input_dim(&self) -> usize {
        (**self).input_dim()
    }
    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        (**self).predict(batch)
    }
    fn describe(&self) -> String {
        (**self).describe()
    }
}

/// A trained source network as shipped to whoever serves it.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceModelArtifact {
    model: TargetModel,
    train_accuracy: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArtifactDocument {
    schema_version: u32,
    model: ModelDocument,
    train_accuracy: Option<f64>,
}

impl SourceModelArtifact {
    pub fn new(model: TargetModel, train_accuracy: Option<f64>) -> Self {
        SourceModelArtifact { model, train_accuracy }
    }

    pub fn num_classes(&self) -> usize {
        self.model.num_classes()
    }

    pub fn input_dim(&self) -> usize {
        self.model.input_dim()
    }

    pub fn train_accuracy(&self) -> Option<f64> {
        self.train_accuracy
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string(&ArtifactDocument {
            schema_version: WIRE_SCHEMA_VERSION,
            model: self.model.to_document(),
            train_accuracy: self.train_accuracy,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ArtifactDocument = serde_json::from_str(text)?;
        if doc.schema_version != WIRE_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported artifact schema_version {}", doc.schema_version)));
        }
        Ok(SourceModelArtifact { model: TargetModel::from_document(&doc.model)?, train_accuracy: doc.train_accuracy })
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn into_predictor(self) -> InProcessPredictor {
        InProcessPredictor { artifact: self }
    }
}

/// Runs the source network in the caller's process.
#[derive(Debug, Clone)]
pub struct InProcessPredictor {
    artifact: SourceModelArtifact,
}

impl InProcessPredictor {
    pub fn new(artifact: SourceModelArtifact) -> Self {
        InProcessPredictor { artifact }
    }
}

impl Predictor for InProcessPredictor {
    fn num_classes(&self) -> usize {
        self.artifact.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.artifact.input_dim()
    }

    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        predict_in_process(&self.artifact, batch)
    }

    fn describe(&self) -> String {
        "in-process".to_string()
    }
}

/// Softmax of the source network's logits for every row of `batch`.
pub fn predict_in_process(artifact: &SourceModelArtifact, batch: &Matrix) -> Result<Vec<ProbVector>> {
    if batch.cols() != artifact.input_dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: predictor expects {} inputs, got {}",
            artifact.input_dim(),
            batch.cols()
        )));
    }
    if batch.rows() == 0 {
        return Ok(Vec::new());
    }
    let logits = artifact.model.logits_batch(batch)?;
    logits
        .iter_rows()
        .map(|row| {
            let mut p = row.to_vec();
            softmax_in_place(&mut p);
            ProbVector::new(p)
        })
        .collect()
}

/// Wraps a predictor and counts `predict` calls.
pub struct CountingPredictor<P> {
    inner: P,
    calls: AtomicUsize,
}

impl<P: Predictor> CountingPredictor<P> {
    pub fn new(inner: P) -> Self {
        CountingPredictor { inner, calls: AtomicUsize::new(0) }
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::SeqCst)
    }

    pub fn into_inner(self) -> P {
        self.inner
    }
}

impl<P: Predictor> Predictor for CountingPredictor<P> {
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    fn input_dim(&self) -> usize {
        self.inner.input_dim()
    }

    fn predict(&self, batch: &Matrix) -> Result<Vec<ProbVector>> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        self.inner.predict(batch)
    }

    fn describe(&self) -> String {
        self.inner.describe()
    }
}
