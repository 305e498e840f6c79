//! Target network `f = head ∘ φ`, prototypes and the inference rule.
//!
//! φ is a stack of dense layers. Hidden layers apply the activation; the
//! last φ layer (the feature layer) is affine. The head is a linear map
//! from features to `k` logits.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{self, dot, entropy_of, norm, rng_for, softmax_in_place, KMeansConfig, Matrix, Purpose};

pub const MODEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
}

impl Activation {
    #[inline]
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Tanh => x.tanh(),
            Activation::Relu => x.max(0.0),
        }
    }

    /// Derivative expressed through the activation's output.
    #[inline]
    fn derivative_from_output(self, y: f64) -> f64 {
        match self {
            Activation::Tanh => 1.0 - y * y,
            Activation::Relu => {
                if y > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
        }
    }
}

/// Architecture knobs shared by the source and target networks.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub feature_dim: usize,
    pub activation: Activation,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { hidden: vec![64, 64], feature_dim: 32, activation: Activation::Tanh }
    }
}

impl ModelConfig {
    pub fn layer_sizes(&self, input_dim: usize) -> Vec<usize> {
        let mut sizes = vec![input_dim];
        sizes.extend(&self.hidden);
        sizes.push(self.feature_dim);
        sizes
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Dense {
    inputs: usize,
    outputs: usize,
    /// `outputs x inputs`, row-major.
    weight: Vec<f64>,
    bias: Vec<f64>,
}

impl Dense {
    fn glorot<R: Rng>(inputs: usize, outputs: usize, rng: &mut R) -> Self {
        let limit = (6.0 / (inputs + outputs) as f64).sqrt();
        let weight = (0..inputs * outputs).map(|_| rng.random_range(-limit..=limit)).collect();
        Dense { inputs, outputs, weight, bias: vec![0.0; outputs] }
    }

    fn num_params(&self) -> usize {
        self.weight.len() + self.bias.len()
    }

    fn apply_row(&self, x: &[f64], out: &mut [f64]) {
        for (o, y) in out.iter_mut().enumerate() {
            *y = dot(&self.weight[o * self.inputs..(o + 1) * self.inputs], x) + self.bias[o];
        }
    }

    fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(x.rows(), self.outputs);
        for i in 0..x.rows() {
            self.apply_row(x.row(i), out.row_mut(i));
        }
        out
    }

    /// Accumulates parameter gradients into `grad` (weight then bias) and
    /// returns the gradient with respect to the layer input.
    fn backward(&self, input: &Matrix, d_out: &Matrix, grad: &mut [f64], want_input_grad: bool) -> Option<Matrix> {
        let (gw, gb) = grad.split_at_mut(self.weight.len());
        for n in 0..input.rows() {
            let x = input.row(n);
            for (o, &g) in d_out.row(n).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                gb[o] += g;
                for (w, xi) in gw[o * self.inputs..(o + 1) * self.inputs].iter_mut().zip(x) {
                    *w += g * xi;
                }
            }
        }
        if !want_input_grad {
            return None;
        }
        let mut d_in = Matrix::zeros(input.rows(), self.inputs);
        for n in 0..input.rows() {
            let row = d_in.row_mut(n);
            for (o, &g) in d_out.row(n).iter().enumerate() {
                if g == 0.0 {
                    continue;
                }
                for (d, w) in row.iter_mut().zip(&self.weight[o * self.inputs..(o + 1) * self.inputs]) {
                    *d += g * w;
                }
            }
        }
        Some(d_in)
    }
}

/// Intermediate values kept from a batched forward pass for backprop.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    /// `layer_inputs[l]` is the input to φ layer `l`; index 0 is the batch.
    layer_inputs: Vec<Matrix>,
    pub features: Matrix,
    pub logits: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TargetModel {
    layer_sizes: Vec<usize>,
    k: usize,
    activation: Activation,
    phi: Vec<Dense>,
    head: Dense,
}

impl TargetModel {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], k: usize, activation: Activation, seed: u64) -> Result<Self> {
        validate_shape(layer_sizes, k)?;
        let mut rng = rng_for(seed, Purpose::Init);
        let phi = layer_sizes.windows(2).map(|w| Dense::glorot(w[0], w[1], &mut rng)).collect();
        let head = Dense::glorot(*layer_sizes.last().unwrap(), k, &mut rng);
        Ok(TargetModel { layer_sizes: layer_sizes.to_vec(), k, activation, phi, head })
    }

    pub fn from_config(cfg: &ModelConfig, input_dim: usize, k: usize, seed: u64) -> Result<Self> {
        Self::init(&cfg.layer_sizes(input_dim), k, cfg.activation, seed)
    }

    /// A model with every parameter set to zero.
    pub fn zeros(layer_sizes: &[usize], k: usize, activation: Activation) -> Result<Self> {
        let mut model = Self::init(layer_sizes, k, activation, 0)?;
        let n = model.num_params();
        model.set_params(&vec![0.0; n])?;
        Ok(model)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_dim(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn feature_dim(&self) -> usize {
        *self.layer_sizes.last().unwrap()
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    pub fn num_params(&self) -> usize {
        self.phi.iter().map(Dense::num_params).sum::<usize>() + self.head.num_params()
    }

    /// Flattened parameters: each φ layer's weight then bias, then the head.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for layer in self.phi.iter().chain(std::iter::once(&self.head)) {
            out.extend_from_slice(&layer.weight);
            out.extend_from_slice(&layer.bias);
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.num_params() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                params.len()
            )));
        }
        let mut rest = params;
        for layer in self.phi.iter_mut().chain(std::iter::once(&mut self.head)) {
            let (w, tail) = rest.split_at(layer.weight.len());
            let (b, tail) = tail.split_at(layer.bias.len());
            layer.weight.copy_from_slice(w);
            layer.bias.copy_from_slice(b);
            rest = tail;
        }
        Ok(())
    }

    fn check_input_dim(&self, got: usize) -> Result<()> {
        if got != self.input_dim() {
            return Err(Error::invalid(format!(
                "dimension mismatch: model expects {} inputs, got {got}",
                self.input_dim()
            )));
        }
        Ok(())
    }

    /// Features and logits for a single input.
    pub fn forward(&self, x: &[f64]) -> Result<(Vec<f64>, Vec<f64>)> {
        self.check_input_dim(x.len())?;
        let mut current = x.to_vec();
        let last = self.phi.len() - 1;
        for (l, layer) in self.phi.iter().enumerate() {
            let mut out = vec![0.0; layer.outputs];
            layer.apply_row(&current, &mut out);
            if l < last {
                out.iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            current = out;
        }
        let mut logits = vec![0.0; self.k];
        self.head.apply_row(&current, &mut logits);
        Ok((current, logits))
    }

    pub fn forward_batch(&self, x: &Matrix) -> Result<ForwardPass> {
        self.check_input_dim(x.cols())?;
        let mut layer_inputs = Vec::with_capacity(self.phi.len());
        let mut current = x.clone();
        let last = self.phi.len() - 1;
        for (l, layer) in self.phi.iter().enumerate() {
            let mut out = layer.apply(&current);
            if l < last {
                out.as_mut_slice().iter_mut().for_each(|v| *v = self.activation.apply(*v));
            }
            layer_inputs.push(std::mem::replace(&mut current, out));
        }
        let logits = self.head.apply(&current);
        Ok(ForwardPass { layer_inputs, features: current, logits })
    }

    pub fn logits_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(x)?.logits)
    }

    pub fn features_batch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(self.forward_batch(x)?.features)
    }

    /// Parameter gradient (in [`TargetModel::params`] order) given upstream
    /// gradients on the logits and, optionally, extra gradient arriving
    /// directly at the features.
    pub fn backward(&self, pass: &ForwardPass, d_logits: &Matrix, d_features: Option<&Matrix>) -> Vec<f64> {
        let mut grad = vec![0.0; self.num_params()];
        let head_offset = grad.len() - self.head.num_params();
        let mut d_feat = self
            .head
            .backward(&pass.features, d_logits, &mut grad[head_offset..], true)
            .expect("input gradient requested");
        if let Some(extra) = d_features {
            for (d, e) in d_feat.as_mut_slice().iter_mut().zip(extra.as_slice()) {
                *d += e;
            }
        }

        let mut offsets = Vec::with_capacity(self.phi.len());
        let mut acc = 0;
        for layer in &self.phi {
            offsets.push(acc);
            acc += layer.num_params();
        }

        let mut d_out = d_feat;
        let last = self.phi.len() - 1;
        for l in (0..self.phi.len()).rev() {
            if l < last {
                // d_out currently holds dL/d(activated output of layer l)
                let activated = &pass.layer_inputs[l + 1];
                for (d, &y) in d_out.as_mut_slice().iter_mut().zip(activated.as_slice()) {
                    *d *= self.activation.derivative_from_output(y);
                }
            }
            let layer = &self.phi[l];
            let slot = &mut grad[offsets[l]..offsets[l] + layer.num_params()];
            match layer.backward(&pass.layer_inputs[l], &d_out, slot, l > 0) {
                Some(d_in) => d_out = d_in,
                None => break,
            }
        }
        grad
    }

    pub fn infer(&self, x: &[f64]) -> Result<Prediction> {
        let (_, logits) = self.forward(x)?;
        Ok(infer_from_logits(&logits))
    }

    pub fn infer_batch(&self, x: &Matrix) -> Result<Vec<Prediction>> {
        let logits = self.logits_batch(x)?;
        Ok(logits.iter_rows().map(infer_from_logits).collect())
    }

    pub fn to_document(&self) -> ModelDocument {
        ModelDocument {
            schema_version: MODEL_SCHEMA_VERSION,
            layer_sizes: self.layer_sizes.clone(),
            k: self.k,
            activation: self.activation,
            parameters: self.params(),
        }
    }

    pub fn from_document(doc: &ModelDocument) -> Result<Self> {
        if doc.schema_version != MODEL_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported model schema_version {}", doc.schema_version)));
        }
        numerics::Vector::new(doc.parameters.clone())?;
        let mut model = Self::init(&doc.layer_sizes, doc.k, doc.activation, 0)?;
        model.set_params(&doc.parameters)?;
        Ok(model)
    }

    pub fn to_json(&self) -> Result<String> {
        crate::json::to_string(&self.to_document())
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Self::from_document(&serde_json::from_str(text)?)
    }
}

fn validate_shape(layer_sizes: &[usize], k: usize) -> Result<()> {
    if layer_sizes.len() < 2 {
        return Err(Error::invalid("layer_sizes needs at least an input and a feature size"));
    }
    if layer_sizes.contains(&0) {
        return Err(Error::invalid("layer_sizes entries must be positive"));
    }
    if k < 2 {
        return Err(Error::invalid("a classifier needs at least 2 classes"));
    }
    Ok(())
}

/// Serialized form of a [`TargetModel`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelDocument {
    pub schema_version: u32,
    pub layer_sizes: Vec<usize>,
    pub k: usize,
    pub activation: Activation,
    pub parameters: Vec<f64>,
}

/// Output of the inference rule: a source class or "unknown".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Prediction {
    Class(usize),
    Unknown,
}

/// `ln(k) / 2`, the entropy threshold separating known from unknown.
pub fn unknown_threshold(k: usize) -> f64 {
    (k as f64).ln() / 2.0
}

/// 1 when the softmax entropy of `logits` exceeds `ln(K)/2`.
pub fn h1_detect_unknown(logits: &[f64]) -> bool {
    let mut p = logits.to_vec();
    softmax_in_place(&mut p);
    entropy_of(&p) > unknown_threshold(logits.len())
}

pub fn h2_classify(logits: &[f64]) -> usize {
    numerics::argmax(logits)
}

/// Applies the inference rule to a probability vector directly.
pub fn classify_probs(p: &[f64]) -> Prediction {
    if entropy_of(p) > unknown_threshold(p.len()) {
        Prediction::Unknown
    } else {
        Prediction::Class(numerics::argmax(p))
    }
}

pub fn infer_from_logits(logits: &[f64]) -> Prediction {
    if h1_detect_unknown(logits) {
        Prediction::Unknown
    } else {
        Prediction::Class(h2_classify(logits))
    }
}

/// `M` prototypes in feature space, used only while adapting.
#[derive(Debug, Clone, PartialEq)]
pub struct PrototypeBank {
    prototypes: Matrix,
}

impl PrototypeBank {
    pub fn new(prototypes: Matrix) -> Result<Self> {
        if prototypes.rows() < 2 {
            return Err(Error::invalid("a prototype bank needs at least 2 prototypes"));
        }
        if let Some(i) = prototypes.iter_rows().position(|r| norm(r) == 0.0) {
            return Err(Error::Degenerate(format!("prototype {i} has zero norm")));
        }
        Ok(PrototypeBank { prototypes })
    }

    pub fn len(&self) -> usize {
        self.prototypes.rows()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn matrix(&self) -> &Matrix {
        &self.prototypes
    }

    pub fn as_slice(&self) -> &[f64] {
        self.prototypes.as_slice()
    }

    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.prototypes.as_slice().len() {
            return Err(Error::invalid("prototype value count mismatch"));
        }
        self.prototypes.as_mut_slice().copy_from_slice(values);
        Ok(())
    }
}

/// k-means over the model's features of `data`; centers become prototypes.
pub fn init_prototypes(model: &TargetModel, data: &Matrix, m: usize, seed: u64) -> Result<PrototypeBank> {
    let features = model.features_batch(data)?;
    let result = numerics::kmeans(&features, m, seed, KMeansConfig::default())?;
    let mut centers = result.centers;
    for c in 0..centers.rows() {
        let row = centers.row_mut(c);
        if norm(row) == 0.0 {
            row.iter_mut().for_each(|v| *v += 1e-6);
        }
    }
    PrototypeBank::new(centers)
}

/// All learnable scalars in one flat vector: model parameters followed by
/// prototype coordinates when a bank is present.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamView {
    values: Vec<f64>,
    model_len: usize,
}

impl ParamView {
    pub fn gather(model: &TargetModel, bank: Option<&PrototypeBank>) -> Self {
        let mut values = model.params();
        let model_len = values.len();
        if let Some(bank) = bank {
            values.extend_from_slice(bank.as_slice());
        }
        ParamView { values, model_len }
    }

    pub fn scatter(&self, model: &mut TargetModel, bank: Option<&mut PrototypeBank>) -> Result<()> {
        model.set_params(&self.values[..self.model_len])?;
        match bank {
            Some(bank) => bank.set_values(&self.values[self.model_len..]),
            None if self.values.len() == self.model_len => Ok(()),
            None => Err(Error::invalid("param view carries prototypes but no bank was given")),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn model_len(&self) -> usize {
        self.model_len
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::softmax;
    use proptest::prelude::*;
    use rand::Rng;

    fn random_input(model: &TargetModel, n: usize, seed: u64) -> Matrix {
        let mut rng = rng_for(seed, Purpose::Data);
        let d = model.input_dim();
        Matrix::new(n, d, (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect()).unwrap()
    }

    #[test]
    fn init_is_deterministic_and_bounded() {
        let a = TargetModel::init(&[5, 7, 3], 4, Activation::Tanh, 9).unwrap();
        let b = TargetModel::init(&[5, 7, 3], 4, Activation::Tanh, 9).unwrap();
        assert_eq!(a.params(), b.params());
        assert_ne!(a.params(), TargetModel::init(&[5, 7, 3], 4, Activation::Tanh, 10).unwrap().params());
        let limit = (6.0f64 / 12.0).sqrt();
        assert!(a.phi[0].weight.iter().all(|w| w.abs() <= limit));
        assert!(a.phi.iter().all(|l| l.bias.iter().all(|&b| b == 0.0)));
    }

    #[test]
    fn init_rejects_bad_shapes() {
        assert!(TargetModel::init(&[4, 0, 3], 3, Activation::Tanh, 0).is_err());
        assert!(TargetModel::init(&[4], 3, Activation::Tanh, 0).is_err());
        assert!(TargetModel::init(&[4, 3], 1, Activation::Tanh, 0).is_err());
    }

    #[test]
    fn zero_hidden_layers_is_affine() {
        let m = TargetModel::init(&[3, 2], 2, Activation::Tanh, 1).unwrap();
        let x = [0.5, -1.0, 2.0];
        let (f, _) = m.forward(&x).unwrap();
        let l = &m.phi[0];
        for (o, v) in f.iter().enumerate() {
            assert_eq!(*v, dot(&l.weight[o * 3..o * 3 + 3], &x));
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = TargetModel::zeros(&[4, 6, 3], 5, Activation::Tanh).unwrap();
        let (_, logits) = m.forward(&[1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(logits, vec![0.0; 5]);
        assert_eq!(softmax(&logits).unwrap().as_slice(), ProbVector::uniform(5).as_slice());
    }

    use crate::numerics::ProbVector;

    #[test]
    fn forward_dimension_mismatch() {
        let m = TargetModel::init(&[4, 3], 2, Activation::Tanh, 1).unwrap();
        assert!(matches!(m.forward(&[1.0]), Err(Error::InvalidInput(_))));
        assert!(m.forward_batch(&Matrix::zeros(2, 5)).is_err());
    }

    #[test]
    fn batch_matches_single() {
        let m = TargetModel::init(&[6, 8, 8, 4], 3, Activation::Tanh, 2).unwrap();
        let x = random_input(&m, 9, 3);
        let pass = m.forward_batch(&x).unwrap();
        for i in 0..9 {
            let (f, l) = m.forward(x.row(i)).unwrap();
            for (a, b) in f.iter().zip(pass.features.row(i)).chain(l.iter().zip(pass.logits.row(i))) {
                assert!((a - b).abs() <= 1e-12);
                assert!(a.is_finite());
            }
        }
    }

    #[test]
    fn backward_matches_finite_differences() {
        for act in [Activation::Tanh, Activation::Relu] {
            let m = TargetModel::init(&[4, 5, 3], 3, act, 4).unwrap();
            let x = random_input(&m, 6, 5);
            let mut rng = rng_for(6, Purpose::Data);
            let coef_l = Matrix::new(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            let coef_f = Matrix::new(6, 3, (0..18).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
            // L = <coef_l, logits> + <coef_f, features>
            let loss = |p: &[f64]| {
                let mut mm = m.clone();
                mm.set_params(p).unwrap();
                let pass = mm.forward_batch(&x).unwrap();
                let v = dot(coef_l.as_slice(), pass.logits.as_slice()) + dot(coef_f.as_slice(), pass.features.as_slice());
                (v, mm.backward(&pass, &coef_l, Some(&coef_f)))
            };
            let err = numerics::grad_check(loss, &m.params(), 1e-5);
            assert!(err < 1e-6, "{act:?}: {err}");
        }
    }

    #[test]
    fn inference_rules() {
        assert!(h1_detect_unknown(&[0.0; 4]));
        let mut peaked = vec![0.0; 10];
        peaked[0] = 100.0;
        assert!(!h1_detect_unknown(&peaked));

        // K = 10 with mass p on one class and (1 - p)/9 elsewhere
        let spread = |p: f64| -> Vec<f64> { std::iter::once(p).chain(std::iter::repeat_n((1.0 - p) / 9.0, 9)).collect() };
        let oracle = |p: f64| -p * p.ln() - (1.0 - p) * ((1.0 - p) / 9.0).ln();
        let threshold = 10f64.ln() / 2.0;
        let h7 = entropy_of(&spread(0.7));
        assert!((h7 - oracle(0.7)).abs() < 1e-12);
        assert!((h7 - 1.2700316752557592).abs() < 1e-12);
        assert!(h7 > threshold);
        assert!(h1_detect_unknown(&spread(0.7).iter().map(|v| v.ln()).collect::<Vec<_>>()));
        let h8 = entropy_of(&spread(0.8));
        assert!((h8 - 0.9398473390054319).abs() < 1e-12);
        assert!(!h1_detect_unknown(&spread(0.8).iter().map(|v| v.ln()).collect::<Vec<_>>()));

        assert_eq!(h2_classify(&[1.0, 3.0, 2.0]), 1);
        assert_eq!(h2_classify(&[2.0, 2.0, 2.0]), 0);
        assert_eq!(infer_from_logits(&[0.0; 3]), Prediction::Unknown);
        let mut three = vec![0.0; 6];
        three[3] = 50.0;
        assert_eq!(infer_from_logits(&three), Prediction::Class(3));
    }

    #[test]
    fn json_roundtrip_bit_exact() {
        let m = TargetModel::init(&[3, 4, 2], 3, Activation::Relu, 8).unwrap();
        let text = m.to_json().unwrap();
        let back = TargetModel::from_json(&text).unwrap();
        assert_eq!(m, back);
        assert!(text.contains("\"activation\":\"relu\""));
    }

    #[test]
    fn prototypes_from_distinct_features() {
        // identity-like single layer so features equal a linear image of data
        let m = TargetModel::init(&[2, 2], 2, Activation::Tanh, 3).unwrap();
        let data = Matrix::from_rows(&[[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]]).unwrap();
        let bank = init_prototypes(&m, &data, 3, 4).unwrap();
        let feats = m.features_batch(&data).unwrap();
        let mut got = bank.matrix().to_rows();
        let mut want = feats.to_rows();
        got.sort_by(|a, b| a.partial_cmp(b).unwrap());
        want.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(got, want);
        assert_eq!(bank, init_prototypes(&m, &data, 3, 4).unwrap());
    }

    #[test]
    fn prototypes_land_on_cluster_means() {
        // features = data exactly: single affine layer with identity weights
        let mut m = TargetModel::init(&[2, 2], 2, Activation::Tanh, 0).unwrap();
        let mut p = m.params();
        p[..6].copy_from_slice(&[1.0, 0.0, 0.0, 1.0, 0.0, 0.0]);
        m.set_params(&p).unwrap();
        let data = Matrix::from_rows(&[[0.0, 0.0], [0.0, 1.0], [10.0, 0.0], [10.0, 1.0]]).unwrap();
        let mut bank = init_prototypes(&m, &data, 2, 1).unwrap().matrix().to_rows();
        bank.sort_by(|a, b| a[0].total_cmp(&b[0]));
        assert_eq!(bank, vec![vec![0.0, 0.5], vec![10.0, 0.5]]);
    }

    #[test]
    fn bank_rejects_degenerate() {
        assert!(PrototypeBank::new(Matrix::zeros(1, 3)).is_err());
        assert!(matches!(PrototypeBank::new(Matrix::zeros(2, 3)), Err(Error::Degenerate(_))));
    }

    proptest! {
        #[test]
        fn infer_agrees_with_h1_h2(logits in proptest::collection::vec(-6.0f64..6.0, 2..50)) {
            let pred = infer_from_logits(&logits);
            let p = softmax(&logits).unwrap();
            let unknown = p.entropy() > unknown_threshold(logits.len());
            prop_assert_eq!(unknown, pred == Prediction::Unknown);
            if !unknown {
                prop_assert_eq!(pred, Prediction::Class(h2_classify(&logits)));
            }
            prop_assert_eq!(classify_probs(&p), pred);
        }

        #[test]
        fn argmax_invariant_to_shift_and_scale(
            logits in proptest::collection::vec(-6.0f64..6.0, 2..30),
            shift in -100.0f64..100.0,
            scale in 0.01f64..100.0,
        ) {
            let base = h2_classify(&logits);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let scaled: Vec<f64> = logits.iter().map(|v| v * scale).collect();
            // shifting may merge near-ties through rounding; compare values, not only indices
            let s = h2_classify(&shifted);
            prop_assert!(s == base || shifted[s] == shifted[base]);
            let c = h2_classify(&scaled);
            prop_assert!(c == base || scaled[c] == scaled[base]);
        }

        #[test]
        fn param_view_roundtrip(seed in any::<u64>(), with_bank in any::<bool>()) {
            let mut m = TargetModel::init(&[3, 4, 2], 3, Activation::Tanh, seed).unwrap();
            let mut bank = PrototypeBank::new(Matrix::from_rows(&[[1.0, 2.0], [-0.5, 3.0]]).unwrap()).unwrap();
            let view = ParamView::gather(&m, with_bank.then_some(&bank));
            let before_model = m.clone();
            let before_bank = bank.clone();
            view.scatter(&mut m, with_bank.then_some(&mut bank)).unwrap();
            prop_assert_eq!(&m, &before_model);
            prop_assert_eq!(&bank, &before_bank);
            prop_assert_eq!(ParamView::gather(&m, with_bank.then_some(&bank)), view);
        }
    }
}
