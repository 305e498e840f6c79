//! Fixed-size problems shared by the criterion benchmarks.

use bbuda::benchgen::{generate, BenchmarkSpec};
use bbuda::model::{init_prototypes, TargetModel};
use bbuda::numerics::{softmax_in_place, Matrix};
use bbuda::objective::{auxiliary_targets, prototype_affinities, PseudoLabelConfig};
use bbuda::{ModelConfig, PrototypeBank};

/// A mini-batch from the default benchmark with everything the objective needs.
pub struct ObjectiveFixture {
    pub model: TargetModel,
    pub inputs: Matrix,
    pub source_probs: Matrix,
    pub prototypes: PrototypeBank,
    pub q: Matrix,
    pub pseudo: PseudoLabelConfig,
}

pub fn objective_fixture(batch: usize, prototypes: usize) -> ObjectiveFixture {
    let bench = generate(&BenchmarkSpec::default()).expect("default benchmark");
    let k = bench.partition.source_classes();
    let idx: Vec<usize> = (0..batch).collect();
    let inputs = bench.target.inputs.select_rows(&idx);
    let model = TargetModel::from_config(&ModelConfig::default(), inputs.cols(), k, 0).expect("model");
    let source = TargetModel::from_config(&ModelConfig::default(), inputs.cols(), k, 1).expect("source");
    let mut source_probs = source.logits_batch(&inputs).expect("logits");
    for i in 0..batch {
        softmax_in_place(source_probs.row_mut(i));
    }
    let bank = init_prototypes(&model, &bench.target.inputs, prototypes, 0).expect("prototypes");
    let features = model.features_batch(&inputs).expect("features");
    let q = auxiliary_targets(&prototype_affinities(&features, bank.matrix()).expect("affinities"));
    ObjectiveFixture {
        model,
        inputs,
        source_probs,
        prototypes: bank,
        q,
        pseudo: PseudoLabelConfig::new(0.5, k).expect("pseudo-label config"),
    }
}
