//! Synthetic universal domain adaptation benchmarks.
//!
//! Every class is an isotropic unit-variance Gaussian around a mean placed
//! on a sphere of radius `class_separation`, with pairwise mean distances of
//! at least `class_separation`. The source domain holds common and
//! source-private classes. The target domain holds common and
//! target-private classes, pushed through an affine shift (a rotation in a
//! random 2-plane, a scale, a translation) plus extra isotropic noise.
//!
//! Class ids: common `[0, n_common)`, source-private `[n_common, K)`,
//! target-private `[K, K + n_target_private)` where `K` is the number of
//! source classes.

use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::blackbox::SourceModelArtifact;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, TargetModel};
use crate::numerics::{argmax, dot, norm, rng_for, softmax_in_place, squared_distance, Matrix, Purpose};
use crate::trainer::{shuffled, sgd_step};

pub const DATASET_SCHEMA_VERSION: u32 = 1;
const MAX_MEAN_DRAWS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabelPartition {
    pub n_common: usize,
    pub n_source_private: usize,
    pub n_target_private: usize,
}

impl LabelPartition {
    pub fn new(n_common: usize, n_source_private: usize, n_target_private: usize) -> Result<Self> {
        let p = LabelPartition { n_common, n_source_private, n_target_private };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_common == 0 {
            return Err(Error::invalid("partition needs at least one common class"));
        }
        if self.source_classes() < 2 {
            return Err(Error::invalid("the source domain needs at least 2 classes"));
        }
        Ok(())
    }

    /// `K`, the number of source classes.
    pub fn source_classes(&self) -> usize {
        self.n_common + self.n_source_private
    }

    pub fn target_classes(&self) -> usize {
        self.n_common + self.n_target_private
    }

    pub fn total_classes(&self) -> usize {
        self.n_common + self.n_source_private + self.n_target_private
    }

    pub fn source_ids(&self) -> std::ops::Range<usize> {
        0..self.source_classes()
    }

    pub fn target_ids(&self) -> impl Iterator<Item = usize> {
        let k = self.source_classes();
        (0..self.n_common).chain(k..k + self.n_target_private)
    }

    pub fn is_target_private(&self, label: usize) -> bool {
        label >= self.source_classes()
    }
}

impl Default for LabelPartition {
    fn default() -> Self {
        LabelPartition { n_common: 10, n_source_private: 5, n_target_private: 6 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplesPerClass {
    pub source: usize,
    pub target: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftSpec {
    /// Radians, applied in a random 2-plane.
    pub rotation: f64,
    /// Length of the translation vector.
    pub translation: f64,
    pub scale: f64,
}

impl ShiftSpec {
    pub fn identity() -> Self {
        ShiftSpec { rotation: 0.0, translation: 0.0, scale: 1.0 }
    }
}

/// Means sit far enough apart that tanh units saturate on the source
/// classes while target-private inputs still land between them.
pub const DEFAULT_CLASS_SEPARATION: f64 = 20.0;

impl Default for ShiftSpec {
    fn default() -> Self {
        ShiftSpec { rotation: 0.3, translation: 0.5 * DEFAULT_CLASS_SEPARATION, scale: 1.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSpec {
    pub partition: LabelPartition,
    pub input_dim: usize,
    pub samples_per_class: SamplesPerClass,
    pub shift: ShiftSpec,
    pub class_separation: f64,
    /// Standard deviation of the extra noise added to target samples.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for BenchmarkSpec {
    fn default() -> Self {
        BenchmarkSpec {
            partition: LabelPartition::default(),
            input_dim: 64,
            samples_per_class: SamplesPerClass { source: 100, target: 100 },
            shift: ShiftSpec::default(),
            class_separation: DEFAULT_CLASS_SEPARATION,
            noise_sigma: 0.14 * DEFAULT_CLASS_SEPARATION,
            seed: 0,
        }
    }
}

impl BenchmarkSpec {
    pub fn validate(&self) -> Result<()> {
        self.partition.validate()?;
        if self.input_dim < 2 {
            return Err(Error::invalid("input_dim must be at least 2"));
        }
        if self.samples_per_class.source == 0 || self.samples_per_class.target == 0 {
            return Err(Error::invalid("samples_per_class must be positive"));
        }
        if !(self.class_separation > 0.0 && self.class_separation.is_finite()) {
            return Err(Error::invalid("class_separation must be positive"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::invalid("noise_sigma must be non-negative"));
        }
        if !(self.shift.scale > 0.0 && self.shift.scale.is_finite()) {
            return Err(Error::invalid("shift scale must be positive"));
        }
        if !self.shift.rotation.is_finite() || !(self.shift.translation >= 0.0 && self.shift.translation.is_finite()) {
            return Err(Error::invalid("shift rotation/translation must be finite, translation non-negative"));
        }
        Ok(())
    }
}

/// `x -> scale * R x + t` with `R` a rotation by `angle` in the plane
/// spanned by orthonormal `u`, `v`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineShift {
    u: Vec<f64>,
    v: Vec<f64>,
    cos: f64,
    sin: f64,
    scale: f64,
    translation: Vec<f64>,
}

fn random_unit(dim: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-8 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

impl AffineShift {
    pub fn from_spec(spec: &ShiftSpec, dim: usize, seed: u64) -> Self {
        let mut rng = rng_for(seed, Purpose::Shift);
        let u = random_unit(dim, &mut rng);
        let v = loop {
            let mut w = random_unit(dim, &mut rng);
            let proj = dot(&w, &u);
            w.iter_mut().zip(&u).for_each(|(a, b)| *a -= proj * b);
            let n = norm(&w);
            if n > 1e-6 {
                break w.into_iter().map(|x| x / n).collect::<Vec<_>>();
            }
        };
        let dir = random_unit(dim, &mut rng);
        AffineShift {
            u,
            v,
            cos: spec.rotation.cos(),
            sin: spec.rotation.sin(),
            scale: spec.scale,
            translation: dir.into_iter().map(|d| d * spec.translation).collect(),
        }
    }

    fn rotate(&self, x: &[f64], sin: f64) -> Vec<f64> {
        let a = dot(x, &self.u);
        let b = dot(x, &self.v);
        let (ra, rb) = (self.cos * a - sin * b, sin * a + self.cos * b);
        x.iter()
            .zip(self.u.iter().zip(&self.v))
            .map(|(xi, (ui, vi))| xi + (ra - a) * ui + (rb - b) * vi)
            .collect()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        self.rotate(x, self.sin).iter().zip(&self.translation).map(|(r, t)| self.scale * r + t).collect()
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        let unshifted: Vec<f64> = y.iter().zip(&self.translation).map(|(yi, t)| (yi - t) / self.scale).collect();
        self.rotate(&unshifted, -self.sin)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Rows of inputs with one class id each.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetDocument {
    pub schema_version: u32,
    pub domain: Domain,
    pub spec: BenchmarkSpec,
    pub inputs: Matrix,
    pub labels: Vec<usize>,
}

impl DatasetDocument {
    pub fn new(domain: Domain, spec: &BenchmarkSpec, data: &LabeledDataset) -> Self {
        DatasetDocument {
            schema_version: DATASET_SCHEMA_VERSION,
            domain,
            spec: spec.clone(),
            inputs: data.inputs.clone(),
            labels: data.labels.clone(),
        }
    }

    pub fn dataset(&self) -> LabeledDataset {
        LabeledDataset { inputs: self.inputs.clone(), labels: self.labels.clone() }
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string(self)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let doc: DatasetDocument = serde_json::from_str(text)?;
        if doc.schema_version != DATASET_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported dataset schema_version {}", doc.schema_version)));
        }
        if doc.labels.len() != doc.inputs.rows() {
            return Err(Error::invalid("dataset has a different number of labels and rows"));
        }
        Ok(doc)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub source: LabeledDataset,
    pub target: LabeledDataset,
    pub partition: LabelPartition,
    /// Class means indexed by class id.
    pub means: Matrix,
    pub shift: AffineShift,
}

fn draw_means(spec: &BenchmarkSpec, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let total = spec.partition.total_classes();
    let min_sq = spec.class_separation * spec.class_separation;
    let mut means: Vec<Vec<f64>> = Vec::with_capacity(total);
    let mut draws = 0;
    while means.len() < total {
        if draws == MAX_MEAN_DRAWS {
            return Err(Error::Generation(format!(
                "could not place {total} class means at separation {} after {MAX_MEAN_DRAWS} draws",
                spec.class_separation
            )));
        }
        draws += 1;
        let candidate: Vec<f64> =
            random_unit(spec.input_dim, rng).into_iter().map(|x| x * spec.class_separation).collect();
        if means.iter().all(|m| squared_distance(m, &candidate) >= min_sq) {
            means.push(candidate);
        }
    }
    Matrix::from_rows(&means)
}

pub fn generate(spec: &BenchmarkSpec) -> Result<Benchmark> {
    spec.validate()?;
    let mut rng = rng_for(spec.seed, Purpose::Data);
    let means = draw_means(spec, &mut rng)?;
    let shift = AffineShift::from_spec(&spec.shift, spec.input_dim, spec.seed);
    let p = spec.partition;
    let dim = spec.input_dim;

    let sample = |class: usize, rng: &mut ChaCha8Rng| -> Vec<f64> {
        means.row(class).iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)).collect()
    };

    let mut src_rows = Vec::with_capacity(p.source_classes() * spec.samples_per_class.source * dim);
    let mut src_labels = Vec::new();
    for class in p.source_ids() {
        for _ in 0..spec.samples_per_class.source {
            src_rows.extend(sample(class, &mut rng));
            src_labels.push(class);
        }
    }

    let mut tgt_rows = Vec::with_capacity(p.target_classes() * spec.samples_per_class.target * dim);
    let mut tgt_labels = Vec::new();
    for class in p.target_ids() {
        for _ in 0..spec.samples_per_class.target {
            let x = sample(class, &mut rng);
            let shifted = shift.apply(&x);
            tgt_rows.extend(shifted.into_iter().map(|v| v + spec.noise_sigma * rng.sample::<f64, _>(StandardNormal)));
            tgt_labels.push(class);
        }
    }

    Ok(Benchmark {
        source: LabeledDataset { inputs: Matrix::new(src_labels.len(), dim, src_rows)?, labels: src_labels },
        target: LabeledDataset { inputs: Matrix::new(tgt_labels.len(), dim, tgt_rows)?, labels: tgt_labels },
        partition: p,
        means,
        shift,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourceTrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub seed: u64,
}

impl Default for SourceTrainConfig {
    fn default() -> Self {
        SourceTrainConfig { epochs: 1, batch_size: 32, learning_rate: 0.01, momentum: 0.9, seed: 0 }
    }
}

impl SourceTrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::invalid("learning_rate must be positive"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::invalid("momentum must lie in [0, 1)"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SourceTrainOutcome {
    pub artifact: SourceModelArtifact,
    pub train_accuracy: f64,
    /// Mean training cross entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

/// Supervised training of the source network with mini-batch SGD and
/// momentum on the cross entropy to one-hot labels.
pub fn train_source(
    source: &LabeledDataset,
    k: usize,
    model_cfg: &ModelConfig,
    cfg: &SourceTrainConfig,
) -> Result<SourceTrainOutcome> {
    cfg.validate()?;
    if let Some(bad) = source.labels.iter().find(|&&l| l >= k) {
        return Err(Error::invalid(format!("source label {bad} outside [0, {k})")));
    }
    if source.labels.len() != source.inputs.rows() || source.labels.is_empty() {
        return Err(Error::invalid("source dataset is empty or misaligned"));
    }
    let mut model = TargetModel::from_config(model_cfg, source.inputs.cols(), k, cfg.seed)?;
    let mut params = model.params();
    let mut velocity = vec![0.0; params.len()];
    let mut shuffle_rng = rng_for(cfg.seed, Purpose::Shuffle);
    let n = source.labels.len();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let order = shuffled(n, &mut shuffle_rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let x = source.inputs.select_rows(chunk);
            let pass = model.forward_batch(&x)?;
            let mut d_logits = pass.logits.clone();
            let bn = chunk.len() as f64;
            for (r, &idx) in chunk.iter().enumerate() {
                let row = d_logits.row_mut(r);
                softmax_in_place(row);
                let label = source.labels[idx];
                loss_sum -= row[label].max(crate::numerics::LOG_EPS).ln();
                row[label] -= 1.0;
                row.iter_mut().for_each(|v| *v /= bn);
            }
            let grad = model.backward(&pass, &d_logits, None);
            sgd_step(&mut params, &grad, &mut velocity, cfg.learning_rate, cfg.momentum);
            model.set_params(&params)?;
        }
        let mean = loss_sum / n as f64;
        if !mean.is_finite() || !params.iter().all(|p| p.is_finite()) {
            return Err(Error::Training(format!("source training diverged at epoch {epoch}")));
        }
        epoch_losses.push(mean);
    }

    let logits = model.logits_batch(&source.inputs)?;
    let correct = logits.iter_rows().zip(&source.labels).filter(|(row, &l)| argmax(row) == l).count();
    let train_accuracy = correct as f64 / n as f64;
    Ok(SourceTrainOutcome {
        artifact: SourceModelArtifact::new(model, Some(train_accuracy)),
        train_accuracy,
        epoch_losses,
    })
}
