use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Predictor, WIRE_SCHEMA_VERSION};
use crate::error::{Error, Result};
use crate::numerics::{Matrix, ProbVector};

pub const DEFAULT_MAX_BATCH: usize = 256;

/// Source predictions for every target instance, queried once.
///
/// Entries are write-once: filling an already filled slot is an error.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionCache {
    inputs: Matrix,
    k: usize,
    outputs: Vec<Option<ProbVector>>,
    source: String,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CacheDocument {
    schema_version: u32,
    source: String,
    classes: usize,
    inputs: Matrix,
    probabilities: Vec<ProbVector>,
}

impl PredictionCache {
    pub fn empty(inputs: Matrix, k: usize, source: impl Into<String>) -> Self {
        let outputs = vec![None; inputs.rows()];
        PredictionCache { inputs, k, outputs, source: source.into() }
    }

    pub fn fill(&mut self, index: usize, p: ProbVector) -> Result<()> {
        if p.len() != self.k {
            return Err(Error::Cache(format!("entry {index} has {} classes, expected {}", p.len(), self.k)));
        }
        match self.outputs.get_mut(index) {
            None => Err(Error::Cache(format!("entry {index} out of range"))),
            Some(Some(_)) => Err(Error::Cache(format!("entry {index} is already filled"))),
            Some(slot) => {
                *slot = Some(p);
                Ok(())
            }
        }
    }

    pub fn is_complete(&self) -> bool {
        self.outputs.iter().all(Option::is_some)
    }

    pub fn len(&self) -> usize {
        self.outputs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.outputs.is_empty()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn inputs(&self) -> &Matrix {
        &self.inputs
    }

    pub fn source(&self) -> &str {
        &self.source
    }

    pub fn get(&self, index: usize) -> Option<&ProbVector> {
        self.outputs.get(index).and_then(Option::as_ref)
    }

    /// All cached probabilities as an `N x K` matrix.
    pub fn probabilities(&self) -> Result<Matrix> {
        let mut data = Vec::with_capacity(self.len() * self.k);
        for (i, p) in self.outputs.iter().enumerate() {
            let p = p.as_ref().ok_or_else(|| Error::Cache(format!("entry {i} is not filled")))?;
            data.extend_from_slice(p);
        }
        Matrix::new(self.len(), self.k, data)
    }

    pub fn to_json(&self) -> Result<String> {
        if !self.is_complete() {
            return Err(Error::Cache("refusing to serialize a partial cache".into()));
        }
        crate::json::to_string(&CacheDocument {
            schema_version: WIRE_SCHEMA_VERSION,
            source: self.source.clone(),
            classes: self.k,
            inputs: self.inputs.clone(),
            probabilities: self.outputs.iter().flatten().cloned().collect(),
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: CacheDocument = serde_json::from_str(text)?;
        if doc.schema_version != WIRE_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported cache schema_version {}", doc.schema_version)));
        }
        if doc.probabilities.len() != doc.inputs.rows() {
            return Err(Error::Cache("row count mismatch between inputs and probabilities".into()));
        }
        let mut cache = PredictionCache::empty(doc.inputs, doc.classes, doc.source);
        for (i, p) in doc.probabilities.into_iter().enumerate() {
            cache.fill(i, p)?;
        }
        Ok(cache)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

/// Queries `predictor` for every row of `inputs`, `max_batch` rows per
/// call, so exactly `ceil(N / max_batch)` calls are made. Any failure
/// discards the partial cache.
pub fn fill_cache(predictor: &dyn Predictor, inputs: &Matrix, max_batch: usize) -> Result<PredictionCache> {
    if max_batch == 0 {
        return Err(Error::invalid("max_batch must be positive"));
    }
    if inputs.cols() != predictor.input_dim() {
        return Err(Error::invalid(format!(
            "dimension mismatch: predictor expects {} inputs, data has {}",
            predictor.input_dim(),
            inputs.cols()
        )));
    }
    let mut cache = PredictionCache::empty(inputs.clone(), predictor.num_classes(), predictor.describe());
    let n = inputs.rows();
    let mut start = 0;
    while start < n {
        let end = (start + max_batch).min(n);
        let idx: Vec<usize> = (start..end).collect();
        let probs = predictor.predict(&inputs.select_rows(&idx))?;
        if probs.len() != idx.len() {
            return Err(Error::Cache(format!("predictor returned {} rows for {}", probs.len(), idx.len())));
        }
        for (i, p) in idx.into_iter().zip(probs) {
            cache.fill(i, p)?;
        }
        start = end;
    }
    Ok(cache)
}
