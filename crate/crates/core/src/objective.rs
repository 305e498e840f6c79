//! Loss terms of regularized self-training and their analytic gradients.
//!
//! - distillation: mean cross entropy from the cached source probabilities
//!   to the model's softmax output;
//! - self-training: mean `g(x) * H(softmax(f(x)))`, where the pseudo-label
//!   `g` in {-1, 0, +1} comes from an entropy band around `ln(K)/2` and is
//!   held constant (no gradient through the indicator);
//! - consistency regularizer: mean cross entropy from frozen auxiliary
//!   targets `q` to prototype affinities `p`, where `p` is a softmax over
//!   cosine similarities between features and prototypes;
//! - the total: `alpha * distill + (1 - alpha) * self + beta * reg`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{unknown_threshold, TargetModel};
use crate::numerics::{dot, entropy_of, norm, softmax_in_place, Matrix, LOG_EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum PseudoLabel {
    /// Entropy above the band: push it up.
    Reject,
    /// Inside the band: no signal.
    Ignore,
    /// Entropy below the band: push it down.
    Accept,
}

impl PseudoLabel {
    pub fn sign(self) -> f64 {
        match self {
            PseudoLabel::Reject => -1.0,
            PseudoLabel::Ignore => 0.0,
            PseudoLabel::Accept => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelConfig {
    rho: f64,
    k: usize,
}

impl PseudoLabelConfig {
    /// `rho` must satisfy `0 <= rho < ln(k)/2`.
    pub fn new(rho: f64, k: usize) -> Result<Self> {
        if k < 2 {
            return Err(Error::invalid("pseudo-labels need at least 2 classes"));
        }
        if !(rho >= 0.0 && rho < unknown_threshold(k)) {
            return Err(Error::invalid(format!(
                "rho = {rho} must lie in [0, ln({k})/2 = {:.6})",
                unknown_threshold(k)
            )));
        }
        Ok(PseudoLabelConfig { rho, k })
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `(lower, upper)` edges of the ignore band in nats.
    pub fn band(&self) -> (f64, f64) {
        let mid = unknown_threshold(self.k);
        (mid - self.rho, mid + self.rho)
    }
}

pub fn pseudo_label_for_entropy(entropy: f64, cfg: &PseudoLabelConfig) -> PseudoLabel {
    let (lower, upper) = cfg.band();
    if entropy > upper {
        PseudoLabel::Reject
    } else if entropy < lower {
        PseudoLabel::Accept
    } else {
        PseudoLabel::Ignore
    }
}

pub fn pseudo_label(logits: &[f64], cfg: &PseudoLabelConfig) -> PseudoLabel {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    pseudo_label_for_entropy(entropy_of(&p), cfg)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveWeights {
    pub alpha: f64,
    pub beta: f64,
}

impl ObjectiveWeights {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha = {alpha} outside [0, 1]")));
        }
        if !(beta >= 0.0 && beta.is_finite()) {
            return Err(Error::invalid(format!("beta = {beta} must be non-negative")));
        }
        Ok(ObjectiveWeights { alpha, beta })
    }
}

/// A scalar loss and its gradient with respect to some matrix input.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Matrix,
}

fn check_batch(rows: usize) -> Result<f64> {
    if rows == 0 {
        return Err(Error::invalid("empty batch"));
    }
    Ok(rows as f64)
}

/// Teacher distribution at temperature `t`: `p^(1/t)` renormalized, which
/// equals `softmax(source_logits / t)`.
fn temper(p: &[f64], temperature: f64) -> Vec<f64> {
    if temperature == 1.0 {
        return p.to_vec();
    }
    let mut out: Vec<f64> = p.iter().map(|&v| if v > 0.0 { v.powf(1.0 / temperature) } else { 0.0 }).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

/// Mean cross entropy from `targets` rows to `softmax(logits / temperature)`,
/// with gradient with respect to `logits`.
pub fn distillation_loss(logits: &Matrix, targets: &Matrix, temperature: f64) -> Result<LossGrad> {
    if logits.rows() != targets.rows() || logits.cols() != targets.cols() {
        return Err(Error::invalid(format!(
            "distillation shapes differ: logits {}x{}, targets {}x{}",
            logits.rows(),
            logits.cols(),
            targets.rows(),
            targets.cols()
        )));
    }
    if !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::invalid("temperature must be positive"));
    }
    let n = check_batch(logits.rows())?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    let scale = 1.0 / (temperature * n);
    for i in 0..logits.rows() {
        let t = temper(targets.row(i), temperature);
        let mut q: Vec<f64> = logits.row(i).iter().map(|z| z / temperature).collect();
        softmax_in_place(&mut q);
        total += t.iter().zip(&q).filter(|(&tk, _)| tk != 0.0).map(|(&tk, &qk)| -tk * qk.max(LOG_EPS).ln()).sum::<f64>();
        for ((g, &qk), &tk) in grad.row_mut(i).iter_mut().zip(&q).zip(&t) {
            *g = (qk - tk) * scale;
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

/// Pseudo-labels of every row of `logits`.
pub fn pseudo_labels(logits: &Matrix, cfg: &PseudoLabelConfig) -> Vec<PseudoLabel> {
    logits.iter_rows().map(|r| pseudo_label(r, cfg)).collect()
}

/// Mean `g * H(softmax(z))` with `g` recomputed from the current logits.
pub fn self_training_loss(logits: &Matrix, cfg: &PseudoLabelConfig) -> Result<LossGrad> {
    if logits.cols() != cfg.k() {
        return Err(Error::invalid(format!("logits have {} classes, config says {}", logits.cols(), cfg.k())));
    }
    self_training_loss_with_labels(logits, &pseudo_labels(logits, cfg))
}

/// Mean `g_i * H(softmax(z_i))` for given labels `g_i`, which are treated as
/// constants.
pub fn self_training_loss_with_labels(logits: &Matrix, labels: &[PseudoLabel]) -> Result<LossGrad> {
    if labels.len() != logits.rows() {
        return Err(Error::invalid("one pseudo-label per row required"));
    }
    let n = check_batch(logits.rows())?;
    let mut grad = Matrix::zeros(logits.rows(), logits.cols());
    let mut total = 0.0;
    for (i, label) in labels.iter().enumerate() {
        let g = label.sign();
        if g == 0.0 {
            continue;
        }
        let mut p = logits.row(i).to_vec();
        softmax_in_place(&mut p);
        let h = entropy_of(&p);
        total += g * h;
        // dH/dz_j = -p_j (ln p_j + H)
        for (d, &pj) in grad.row_mut(i).iter_mut().zip(&p) {
            if pj > 0.0 {
                *d = -g * pj * (pj.ln() + h) / n;
            }
        }
    }
    Ok(LossGrad { value: total / n, grad })
}

fn row_norms(m: &Matrix, what: &str) -> Result<Vec<f64>> {
    m.iter_rows()
        .enumerate()
        .map(|(i, r)| {
            let n = norm(r);
            if n == 0.0 {
                Err(Error::Degenerate(format!("{what} {i} has zero norm")))
            } else {
                Ok(n)
            }
        })
        .collect()
}

fn cosines(features: &Matrix, prototypes: &Matrix) -> Result<(Matrix, Vec<f64>, Vec<f64>)> {
    if features.cols() != prototypes.cols() {
        return Err(Error::invalid(format!(
            "feature dim {} differs from prototype dim {}",
            features.cols(),
            prototypes.cols()
        )));
    }
    if prototypes.rows() == 0 {
        return Err(Error::invalid("no prototypes"));
    }
    let fn_ = row_norms(features, "feature")?;
    let pn = row_norms(prototypes, "prototype")?;
    let mut d = Matrix::zeros(features.rows(), prototypes.rows());
    for i in 0..features.rows() {
        let u = features.row(i);
        for (m, out) in d.row_mut(i).iter_mut().enumerate() {
            *out = dot(u, prototypes.row(m)) / (fn_[i] * pn[m]);
        }
    }
    Ok((d, fn_, pn))
}

/// Row-stochastic `N x M` matrix: softmax over each feature's cosine
/// similarities to the prototypes.
pub fn prototype_affinities(features: &Matrix, prototypes: &Matrix) -> Result<Matrix> {
    let (mut d, _, _) = cosines(features, prototypes)?;
    for i in 0..d.rows() {
        softmax_in_place(d.row_mut(i));
    }
    Ok(d)
}

/// Frequency-normalized targets: `p_im / sqrt(sum_i p_im)`, renormalized
/// per row. Column sums are taken over every row of `p`.
pub fn auxiliary_targets(p: &Matrix) -> Matrix {
    let m = p.cols();
    let mut col = vec![0.0; m];
    for row in p.iter_rows() {
        for (c, v) in col.iter_mut().zip(row) {
            *c += v;
        }
    }
    debug_assert!(p.rows() == 0 || col.iter().all(|&c| c > 0.0), "softmax affinities have positive column sums");
    let inv_sqrt: Vec<f64> = col.iter().map(|&c| if c > 0.0 { 1.0 / c.sqrt() } else { 0.0 }).collect();
    let mut q = Matrix::zeros(p.rows(), m);
    for i in 0..p.rows() {
        let row = q.row_mut(i);
        for ((dst, &v), &w) in row.iter_mut().zip(p.row(i)).zip(&inv_sqrt) {
            *dst = v * w;
        }
        let sum: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= sum);
    }
    q
}

#[derive(Debug, Clone, PartialEq)]
pub struct RegularizerGrad {
    pub value: f64,
    pub d_features: Matrix,
    pub d_prototypes: Matrix,
}

/// Mean `CE(q_i, p_i)` with `q` held fixed; gradients flow to features and
/// prototypes through `p`.
pub fn consistency_regularizer(features: &Matrix, prototypes: &Matrix, q: &Matrix) -> Result<RegularizerGrad> {
    if q.rows() != features.rows() || q.cols() != prototypes.rows() {
        return Err(Error::invalid("auxiliary targets do not match batch and prototype counts"));
    }
    let n = check_batch(features.rows())?;
    let (cos, fnorm, pnorm) = cosines(features, prototypes)?;
    let (rows, m, dim) = (features.rows(), prototypes.rows(), features.cols());
    let mut d_features = Matrix::zeros(rows, dim);
    let mut d_prototypes = Matrix::zeros(m, dim);
    let mut proto_cos_weight = vec![0.0; m];
    let mut total = 0.0;
    let mut p = vec![0.0; m];
    let mut g = vec![0.0; m];

    for i in 0..rows {
        p.copy_from_slice(cos.row(i));
        softmax_in_place(&mut p);
        let qi = q.row(i);
        total += qi.iter().zip(&p).filter(|(&qk, _)| qk != 0.0).map(|(&qk, &pk)| -qk * pk.max(LOG_EPS).ln()).sum::<f64>();
        // dL_i/dcos_im = p_im - q_im
        for k in 0..m {
            g[k] = (p[k] - qi[k]) / n;
        }
        let u = features.row(i);
        let inv_u = 1.0 / fnorm[i];
        let mut self_weight = 0.0;
        let df = d_features.row_mut(i);
        for k in 0..m {
            if g[k] == 0.0 {
                continue;
            }
            let c = cos.row(i)[k];
            self_weight += g[k] * c;
            proto_cos_weight[k] += g[k] * c;
            let w = prototypes.row(k);
            let coef_f = g[k] * inv_u / pnorm[k];
            for (d, wv) in df.iter_mut().zip(w) {
                *d += coef_f * wv;
            }
            let coef_w = g[k] * inv_u / pnorm[k];
            for (d, uv) in d_prototypes.row_mut(k).iter_mut().zip(u) {
                *d += coef_w * uv;
            }
        }
        // minus (sum_m g_im cos_im) u_i / |u_i|^2
        let s = self_weight * inv_u * inv_u;
        for (d, uv) in df.iter_mut().zip(u) {
            *d -= s * uv;
        }
    }
    for k in 0..m {
        let s = proto_cos_weight[k] / (pnorm[k] * pnorm[k]);
        let w = prototypes.row(k).to_vec();
        for (d, wv) in d_prototypes.row_mut(k).iter_mut().zip(&w) {
            *d -= s * wv;
        }
    }
    Ok(RegularizerGrad { value: total / n, d_features, d_prototypes })
}

/// Everything needed to evaluate the combined loss.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Objective {
    pub weights: ObjectiveWeights,
    pub pseudo: PseudoLabelConfig,
    pub temperature: f64,
}

/// One mini-batch: inputs, the matching cached source probabilities and,
/// when the regularizer is active, the matching frozen `q` rows.
#[derive(Debug, Clone, Copy)]
pub struct Batch<'a> {
    pub inputs: &'a Matrix,
    pub source_probs: &'a Matrix,
    pub q: Option<&'a Matrix>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub distill: f64,
    pub self_training: f64,
    pub regularization: f64,
    pub total: f64,
}

/// Combined loss and its gradient in parameter-view order: model
/// parameters, then prototype coordinates when `prototypes` is given.
pub fn total_loss(
    model: &TargetModel,
    batch: &Batch<'_>,
    prototypes: Option<&Matrix>,
    objective: &Objective,
) -> Result<(LossBreakdown, Vec<f64>)> {
    let ObjectiveWeights { alpha, beta } = objective.weights;
    let pass = model.forward_batch(batch.inputs)?;
    let distill = distillation_loss(&pass.logits, batch.source_probs, objective.temperature)?;
    let selft = self_training_loss(&pass.logits, &objective.pseudo)?;

    let mut d_logits = distill.grad;
    for (d, s) in d_logits.as_mut_slice().iter_mut().zip(selft.grad.as_slice()) {
        *d = alpha * *d + (1.0 - alpha) * s;
    }

    let reg = match (prototypes, batch.q) {
        (Some(w), Some(q)) => Some(consistency_regularizer(&pass.features, w, q)?),
        (None, _) => None,
        (Some(_), None) => return Err(Error::invalid("prototypes given without auxiliary targets")),
    };

    let reg_value = reg.as_ref().map_or(0.0, |r| r.value);
    let breakdown = LossBreakdown {
        distill: distill.value,
        self_training: selft.value,
        regularization: reg_value,
        total: alpha * distill.value + (1.0 - alpha) * selft.value + beta * reg_value,
    };

    let mut grad = match &reg {
        Some(r) => {
            let mut d_feat = r.d_features.clone();
            d_feat.as_mut_slice().iter_mut().for_each(|v| *v *= beta);
            model.backward(&pass, &d_logits, Some(&d_feat))
        }
        None => model.backward(&pass, &d_logits, None),
    };
    if let Some(r) = reg {
        grad.extend(r.d_prototypes.as_slice().iter().map(|v| beta * v));
    }
    Ok((breakdown, grad))
}
