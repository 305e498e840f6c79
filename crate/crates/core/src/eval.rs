//! Open-set scoring: per-group accuracies, H-score and average class
//! accuracy, plus the source-only baseline read straight from the cache.

use serde::{Deserialize, Serialize};

use crate::blackbox::PredictionCache;
use crate::error::{Error, Result};
use crate::model::{classify_probs, Prediction};

/// Harmonic mean of the common-class and unknown accuracies; 0 when both are 0.
pub fn h_score(acc_in: f64, acc_out: f64) -> Result<f64> {
    for (name, v) in [("acc_in", acc_in), ("acc_out", acc_out)] {
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::invalid(format!("{name} = {v} is outside [0, 1]")));
        }
    }
    if acc_in + acc_out == 0.0 {
        return Ok(0.0);
    }
    Ok(2.0 * acc_in * acc_out / (acc_in + acc_out))
}

/// True labels of a target set. Labels below `k` are classes the source
/// model knows; labels `>= k` are target-private and should be UNKNOWN.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruth {
    labels: Vec<usize>,
    k: usize,
}

impl GroundTruth {
    pub fn new(labels: Vec<usize>, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("ground truth needs K >= 2"));
        }
        Ok(GroundTruth { labels, k })
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn is_unknown(&self, i: usize) -> bool {
        self.labels[i] >= self.k
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAccuracy {
    /// `None` is the pooled UNKNOWN class.
    pub class: Option<usize>,
    pub count: usize,
    pub correct: usize,
}

impl ClassAccuracy {
    pub fn accuracy(&self) -> f64 {
        self.correct as f64 / self.count as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n: usize,
    pub n_in: usize,
    pub n_out: usize,
    pub acc_in: Option<f64>,
    pub acc_out: Option<f64>,
    /// Defined only when both groups are non-empty.
    pub h_score: Option<f64>,
    /// Mean of per-class accuracies over the common classes present plus
    /// the pooled UNKNOWN class when present.
    pub aa: f64,
    pub per_class: Vec<ClassAccuracy>,
}

impl EvalReport {
    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string_pretty(self)
    }

    /// One-row CSV with a header; undefined metrics are empty fields.
    pub fn to_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["n", "n_in", "n_out", "acc_in", "acc_out", "h_score", "aa"])?;
        w.write_record([
            self.n.to_string(),
            self.n_in.to_string(),
            self.n_out.to_string(),
            opt(self.acc_in),
            opt(self.acc_out),
            opt(self.h_score),
            self.aa.to_string(),
        ])?;
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

pub fn evaluate(predictions: &[Prediction], truth: &GroundTruth) -> Result<EvalReport> {
    if predictions.len() != truth.len() {
        return Err(Error::invalid(format!(
            "{} predictions for {} labels",
            predictions.len(),
            truth.len()
        )));
    }
    if predictions.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty prediction set"));
    }
    let k = truth.k;
    let mut known = vec![ClassAccuracy { class: None, count: 0, correct: 0 }; k];
    let mut unknown = ClassAccuracy { class: None, count: 0, correct: 0 };
    for (pred, &label) in predictions.iter().zip(&truth.labels) {
        let slot = if label >= k { &mut unknown } else { &mut known[label] };
        slot.count += 1;
        let hit = match pred {
            Prediction::Unknown => label >= k,
            Prediction::Class(c) => *c == label,
        };
        slot.correct += usize::from(hit);
    }

    let n_in: usize = known.iter().map(|c| c.count).sum();
    let n_out = unknown.count;
    let c_in: usize = known.iter().map(|c| c.correct).sum();
    let acc_in = (n_in > 0).then(|| c_in as f64 / n_in as f64);
    let acc_out = (n_out > 0).then(|| unknown.correct as f64 / n_out as f64);
    let h = match (acc_in, acc_out) {
        (Some(a), Some(b)) => Some(h_score(a, b)?),
        _ => None,
    };

    let mut per_class: Vec<ClassAccuracy> = known
        .into_iter()
        .enumerate()
        .filter(|(_, c)| c.count > 0)
        .map(|(i, c)| ClassAccuracy { class: Some(i), ..c })
        .collect();
    if n_out > 0 {
        per_class.push(unknown);
    }
    let aa = per_class.iter().map(ClassAccuracy::accuracy).sum::<f64>() / per_class.len() as f64;

    Ok(EvalReport { n: predictions.len(), n_in, n_out, acc_in, acc_out, h_score: h, aa, per_class })
}

/// The source-only baseline: the inference rule applied to cached source
/// probabilities, with no adaptation.
pub fn source_only_predictions(cache: &PredictionCache) -> Result<Vec<Prediction>> {
    (0..cache.len())
        .map(|i| {
            cache
                .get(i)
                .map(|p| classify_probs(p))
                .ok_or_else(|| Error::Cache(format!("entry {i} is not filled")))
        })
        .collect()
}

pub fn so_plus_plus(cache: &PredictionCache, truth: &GroundTruth) -> Result<EvalReport> {
    if cache.num_classes() != truth.k {
        return Err(Error::invalid("cache and ground truth disagree on K"));
    }
    evaluate(&source_only_predictions(cache)?, truth)
}
