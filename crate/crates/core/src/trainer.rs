//! Target-model adaptation against a black-box source predictor.
//!
//! The source is queried exactly once per target instance, up front. Each
//! epoch then recomputes the frozen auxiliary targets `q` over the whole
//! target set, shuffles, and takes one SGD-with-momentum step per
//! mini-batch on the model parameters and prototype coordinates together.

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::blackbox::{fill_cache, PredictionCache, Predictor, DEFAULT_MAX_BATCH};
use crate::error::{Error, Result};
use crate::eval::{evaluate, GroundTruth};
use crate::model::{init_prototypes, ModelConfig, ParamView, PrototypeBank, TargetModel};
use crate::numerics::{rng_for, Matrix, Purpose};
use crate::objective::{
    auxiliary_targets, prototype_affinities, total_loss, Batch, LossBreakdown, Objective, ObjectiveWeights,
    PseudoLabelConfig,
};

/// Distillation weight at epoch `t`: `max(0, 1 - t / total)`.
pub fn alpha_schedule(t: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (1.0 - t as f64 / total as f64).max(0.0)
}

/// `v <- momentum * v + g; p <- p - lr * v`.
pub fn sgd_step(params: &mut [f64], grads: &[f64], velocity: &mut [f64], lr: f64, momentum: f64) {
    debug_assert_eq!(params.len(), grads.len());
    debug_assert_eq!(params.len(), velocity.len());
    for ((p, g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

pub(crate) fn shuffled(n: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdaptConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Half-width of the entropy band left without pseudo-label.
    pub rho: f64,
    /// Weight of the prototype regularizer; 0 disables prototypes.
    pub beta: f64,
    pub prototypes: usize,
    /// Epoch at which prototypes are initialized from the current features.
    pub prototype_init_epoch: usize,
    pub temperature: f64,
    /// Fixes the distillation weight instead of following the schedule.
    pub alpha: Option<f64>,
    pub max_batch: usize,
    pub seed: u64,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            epochs: 100,
            batch_size: 64,
            learning_rate: 0.01,
            momentum: 0.9,
            rho: 0.5,
            beta: 1.0,
            prototypes: 100,
            prototype_init_epoch: 0,
            temperature: 1.0,
            alpha: None,
            max_batch: DEFAULT_MAX_BATCH,
            seed: 0,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self, k: usize, n: usize) -> Result<()> {
        PseudoLabelConfig::new(self.rho, k)?;
        if self.batch_size == 0 || self.max_batch == 0 {
            return Err(Error::invalid("batch sizes must be positive"));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::invalid("temperature must be positive"));
        }
        ObjectiveWeights::new(self.alpha.unwrap_or(0.0), self.beta)?;
        if self.uses_prototypes() {
            if self.prototypes < 2 {
                return Err(Error::invalid("at least 2 prototypes are required"));
            }
            if self.prototypes > n {
                return Err(Error::invalid(format!("{} prototypes for {n} target instances", self.prototypes)));
            }
        }
        Ok(())
    }

    pub fn uses_prototypes(&self) -> bool {
        self.beta > 0.0
    }

    pub fn alpha_at(&self, epoch: usize) -> f64 {
        self.alpha.unwrap_or_else(|| alpha_schedule(epoch, self.epochs))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub alpha: f64,
    /// Sample-weighted means of the per-batch losses.
    pub loss: LossBreakdown,
    pub h_score: Option<f64>,
    pub aa: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    pub with_metrics: bool,
}

impl TrainHistory {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut header = vec!["epoch", "alpha", "loss_distill", "loss_self", "loss_reg", "loss_total"];
        if self.with_metrics {
            header.extend(["h_score", "aa"]);
        }
        w.write_record(&header)?;
        for r in &self.records {
            let mut row = vec![
                r.epoch.to_string(),
                r.alpha.to_string(),
                r.loss.distill.to_string(),
                r.loss.self_training.to_string(),
                r.loss.regularization.to_string(),
                r.loss.total.to_string(),
            ];
            if self.with_metrics {
                let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
                row.push(opt(r.h_score));
                row.push(opt(r.aa));
            }
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()?)?;
        Ok(())
    }
}

/// Prototypes only serve training and are dropped here.
#[derive(Debug, Clone)]
pub struct AdaptOutcome {
    pub model: TargetModel,
    pub history: TrainHistory,
}

/// Queries the predictor once for every row of `inputs`, then adapts.
pub fn adapt(
    inputs: &Matrix,
    predictor: &dyn Predictor,
    model_cfg: &ModelConfig,
    cfg: &AdaptConfig,
    truth: Option<&GroundTruth>,
) -> Result<(AdaptOutcome, PredictionCache)> {
    let cache = fill_cache(predictor, inputs, cfg.max_batch)?;
    let outcome = adapt_from_cache(&cache, model_cfg, cfg, truth)?;
    Ok((outcome, cache))
}

/// Adaptation driven entirely by an already filled cache.
pub fn adapt_from_cache(
    cache: &PredictionCache,
    model_cfg: &ModelConfig,
    cfg: &AdaptConfig,
    truth: Option<&GroundTruth>,
) -> Result<AdaptOutcome> {
    let inputs = cache.inputs();
    let n = inputs.rows();
    let k = cache.num_classes();
    if n == 0 {
        return Err(Error::invalid("target set is empty"));
    }
    cfg.validate(k, n)?;
    if let Some(t) = truth {
        if t.len() != n || t.num_classes() != k {
            return Err(Error::invalid("ground truth does not match the target set"));
        }
    }
    let source_probs = cache.probabilities()?;
    let pseudo = PseudoLabelConfig::new(cfg.rho, k)?;

    let mut model = TargetModel::from_config(model_cfg, inputs.cols(), k, cfg.seed)?;
    let mut bank: Option<PrototypeBank> = None;
    let mut view = ParamView::gather(&model, None);
    let mut velocity = vec![0.0; view.len()];
    let mut shuffle_rng = rng_for(cfg.seed, Purpose::Shuffle);
    let mut history = TrainHistory { records: Vec::with_capacity(cfg.epochs), with_metrics: truth.is_some() };

    for epoch in 0..cfg.epochs {
        if cfg.uses_prototypes() && epoch == cfg.prototype_init_epoch {
            let b = init_prototypes(&model, inputs, cfg.prototypes, cfg.seed)?;
            view = ParamView::gather(&model, Some(&b));
            velocity.resize(view.len(), 0.0);
            bank = Some(b);
        }
        let alpha = cfg.alpha_at(epoch);
        let objective = Objective {
            weights: ObjectiveWeights::new(alpha, if bank.is_some() { cfg.beta } else { 0.0 })?,
            pseudo,
            temperature: cfg.temperature,
        };
        let q_all = match &bank {
            Some(b) => {
                let features = model.features_batch(inputs)?;
                Some(auxiliary_targets(&prototype_affinities(&features, b.matrix())?))
            }
            None => None,
        };

        let mut sums = LossBreakdown::default();
        for chunk in shuffled(n, &mut shuffle_rng).chunks(cfg.batch_size) {
            let x = inputs.select_rows(chunk);
            let s = source_probs.select_rows(chunk);
            let q = q_all.as_ref().map(|q| q.select_rows(chunk));
            let batch = Batch { inputs: &x, source_probs: &s, q: q.as_ref() };
            let (loss, grad) = total_loss(&model, &batch, bank.as_ref().map(|b| b.matrix()), &objective)?;
            let w = chunk.len() as f64;
            sums.distill += w * loss.distill;
            sums.self_training += w * loss.self_training;
            sums.regularization += w * loss.regularization;
            sums.total += w * loss.total;

            sgd_step(view.values_mut(), &grad, &mut velocity, cfg.learning_rate, cfg.momentum);
            if !view.values().iter().all(|v| v.is_finite()) {
                return Err(Error::Training(format!("non-finite parameters at epoch {epoch}")));
            }
            view.scatter(&mut model, bank.as_mut())?;
        }

        let nf = n as f64;
        let loss = LossBreakdown {
            distill: sums.distill / nf,
            self_training: sums.self_training / nf,
            regularization: sums.regularization / nf,
            total: sums.total / nf,
        };
        if !loss.total.is_finite() {
            return Err(Error::Training(format!("non-finite loss at epoch {epoch}")));
        }
        let (h_score, aa) = match truth {
            Some(t) => {
                let report = evaluate(&model.infer_batch(inputs)?, t)?;
                (report.h_score, Some(report.aa))
            }
            None => (None, None),
        };
        log::debug!("epoch {epoch}: alpha {alpha:.3} loss {:.6}", loss.total);
        history.records.push(EpochRecord { epoch, alpha, loss, h_score, aa });
    }

    Ok(AdaptOutcome { model, history })
}
