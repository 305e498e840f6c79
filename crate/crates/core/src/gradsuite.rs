//! Finite-difference checks of every analytic gradient on small random
//! configurations.
//!
//! Self-training gradients are only defined away from the entropy values
//! where a pseudo-label flips, so configurations with a row within
//! `SWITCH_MARGIN` of a band edge are redrawn, as are configurations where
//! every pseudo-label is zero. Networks use tanh so that no kink sits
//! inside a finite-difference step.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Activation, ParamView, PrototypeBank, TargetModel};
use crate::numerics::{entropy_of, grad_check, norm, rng_for, softmax_in_place, Matrix, Purpose};
use crate::objective::{
    auxiliary_targets, consistency_regularizer, distillation_loss, prototype_affinities, pseudo_labels,
    self_training_loss, total_loss, Batch, Objective, ObjectiveWeights, PseudoLabel, PseudoLabelConfig,
};

pub const DEFAULT_STEP: f64 = 1e-5;
pub const DEFAULT_THRESHOLD: f64 = 1e-4;
const SWITCH_MARGIN: f64 = 1e-3;
const MAX_REDRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GradTarget {
    Distillation,
    SelfTraining,
    Regularizer,
    Total,
}

impl GradTarget {
    pub const ALL: [GradTarget; 4] =
        [GradTarget::Distillation, GradTarget::SelfTraining, GradTarget::Regularizer, GradTarget::Total];

    pub fn name(self) -> &'static str {
        match self {
            GradTarget::Distillation => "distillation",
            GradTarget::SelfTraining => "self_training",
            GradTarget::Regularizer => "regularizer",
            GradTarget::Total => "total",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCase {
    pub target: GradTarget,
    pub config: usize,
    pub params: usize,
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub step: f64,
    pub threshold: f64,
    pub cases: Vec<GradCase>,
}

impl GradReport {
    pub fn worst(&self, target: GradTarget) -> f64 {
        self.cases.iter().filter(|c| c.target == target).map(|c| c.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.cases.iter().all(|c| c.max_rel_error < self.threshold)
    }
}

/// One random problem: a model, a batch, source targets and prototypes.
struct Problem {
    model: TargetModel,
    inputs: Matrix,
    targets: Matrix,
    bank: PrototypeBank,
    pseudo: PseudoLabelConfig,
    alpha: f64,
    beta: f64,
    temperature: f64,
}

fn gaussian(rows: usize, cols: usize, scale: f64, rng: &mut ChaCha8Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
    Matrix::new(rows, cols, data).expect("finite gaussian matrix")
}

fn draw_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    let input = rng.random_range(3..=6);
    let hidden = rng.random_range(4..=8);
    let feature = rng.random_range(3..=6);
    let k = rng.random_range(3..=6);
    let n = rng.random_range(4..=10);
    let m = rng.random_range(2..=4);
    let model = TargetModel::init(&[input, hidden, feature], k, Activation::Tanh, rng.random())?;
    let inputs = gaussian(n, input, rng.random_range(1.0..4.0), rng);
    let mut targets = gaussian(n, k, 2.0, rng);
    (0..n).for_each(|i| softmax_in_place(targets.row_mut(i)));
    let bank = PrototypeBank::new(gaussian(m, feature, 1.0, rng))?;
    let half = (k as f64).ln() / 2.0;
    let pseudo = PseudoLabelConfig::new(rng.random_range(0.0..0.8 * half), k)?;
    let temperature = if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..3.0) };
    Ok(Problem {
        model,
        inputs,
        targets,
        bank,
        pseudo,
        alpha: rng.random_range(0.0..=1.0),
        beta: rng.random_range(0.1..2.0),
        temperature,
    })
}

fn well_posed(p: &Problem) -> Result<bool> {
    let logits = p.model.logits_batch(&p.inputs)?;
    let (lo, hi) = p.pseudo.band();
    let near_edge = logits.iter_rows().any(|z| {
        let mut q = z.to_vec();
        softmax_in_place(&mut q);
        let h = entropy_of(&q);
        (h - lo).abs() < SWITCH_MARGIN || (h - hi).abs() < SWITCH_MARGIN
    });
    let active = pseudo_labels(&logits, &p.pseudo).iter().any(|&g| g != PseudoLabel::Ignore);
    let features = p.model.features_batch(&p.inputs)?;
    let cosines_defined = features.iter_rows().all(|f| norm(f) > 1e-3);
    Ok(!near_edge && active && cosines_defined)
}

fn next_problem(rng: &mut ChaCha8Rng) -> Result<Problem> {
    for _ in 0..MAX_REDRAWS {
        let p = draw_problem(rng)?;
        if well_posed(&p)? {
            return Ok(p);
        }
    }
    Err(Error::Degenerate("no well-posed gradient-check configuration found".into()))
}

fn check_one(p: &Problem, target: GradTarget, step: f64) -> Result<(usize, f64)> {
    let logits = p.model.logits_batch(&p.inputs)?;
    let features = p.model.features_batch(&p.inputs)?;
    let (n, k) = (logits.rows(), logits.cols());
    let as_matrix = |v: &[f64], rows, cols| Matrix::new(rows, cols, v.to_vec()).expect("probe shape");
    let out = match target {
        GradTarget::Distillation => {
            let f = |z: &[f64]| {
                let l = distillation_loss(&as_matrix(z, n, k), &p.targets, p.temperature).expect("distillation");
                (l.value, l.grad.into_vec())
            };
            (logits.as_slice().len(), grad_check(f, logits.as_slice(), step))
        }
        GradTarget::SelfTraining => {
            let f = |z: &[f64]| {
                let l = self_training_loss(&as_matrix(z, n, k), &p.pseudo).expect("self-training");
                (l.value, l.grad.into_vec())
            };
            (logits.as_slice().len(), grad_check(f, logits.as_slice(), step))
        }
        GradTarget::Regularizer => {
            let (d, m) = (features.cols(), p.bank.len());
            let q = auxiliary_targets(&prototype_affinities(&features, p.bank.matrix())?);
            let mut joint = features.as_slice().to_vec();
            joint.extend_from_slice(p.bank.as_slice());
            let f = |v: &[f64]| {
                let (fv, wv) = v.split_at(n * d);
                let r = consistency_regularizer(&as_matrix(fv, n, d), &as_matrix(wv, m, d), &q).expect("regularizer");
                let mut g = r.d_features.into_vec();
                g.extend(r.d_prototypes.into_vec());
                (r.value, g)
            };
            (joint.len(), grad_check(f, &joint, step))
        }
        GradTarget::Total => {
            let q = auxiliary_targets(&prototype_affinities(&features, p.bank.matrix())?);
            let objective = Objective {
                weights: ObjectiveWeights::new(p.alpha, p.beta)?,
                pseudo: p.pseudo,
                temperature: p.temperature,
            };
            let batch = Batch { inputs: &p.inputs, source_probs: &p.targets, q: Some(&q) };
            let start = ParamView::gather(&p.model, Some(&p.bank));
            let f = |v: &[f64]| {
                let mut model = p.model.clone();
                let mut bank = p.bank.clone();
                let mut view = start.clone();
                view.values_mut().copy_from_slice(v);
                view.scatter(&mut model, Some(&mut bank)).expect("scatter");
                let (loss, grad) = total_loss(&model, &batch, Some(bank.matrix()), &objective).expect("total loss");
                (loss.total, grad)
            };
            (start.len(), grad_check(f, start.values(), step))
        }
    };
    Ok(out)
}

/// Runs every gradient check on `configs` random configurations.
pub fn run(configs: usize, seed: u64, step: f64, threshold: f64) -> Result<GradReport> {
    if configs == 0 {
        return Err(Error::invalid("at least one configuration is required"));
    }
    let mut rng = rng_for(seed, Purpose::Data);
    let mut cases = Vec::with_capacity(configs * GradTarget::ALL.len());
    for config in 0..configs {
        let problem = next_problem(&mut rng)?;
        for target in GradTarget::ALL {
            let (params, max_rel_error) = check_one(&problem, target, step)?;
            cases.push(GradCase { target, config, params, max_rel_error });
        }
    }
    Ok(GradReport { step, threshold, cases })
}
