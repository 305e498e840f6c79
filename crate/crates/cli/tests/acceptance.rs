//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line for
//! each, and exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use rand::Rng;

use bbuda::blackbox::{serve, CountingPredictor, RemoteConfig, RemotePredictor};
use bbuda::benchgen::{generate, train_source};
use bbuda::eval::{evaluate, h_score};
use bbuda::experiment::{prepare, run_method, sweep, Method, RowKind, RunConfig, SweepGrid, SweepKind, SweepResult};
use bbuda::gradsuite::{self, GradTarget};
use bbuda::model::classify_probs;
use bbuda::numerics::{rng_for, ProbVector, Purpose};
use bbuda::objective::{
    auxiliary_targets, consistency_regularizer, distillation_loss, prototype_affinities, pseudo_label_for_entropy,
    self_training_loss, total_loss, Batch, Objective, ObjectiveWeights, PseudoLabel, PseudoLabelConfig,
};
use bbuda::trainer::{adapt, alpha_schedule};
use bbuda::{Activation, GroundTruth, Matrix, Prediction, TargetModel};

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict { pass, detail: detail.into() }
}

// ---------------------------------------------------------------- 1

fn gradient_suite() -> Verdict {
    let configs = 12;
    let start = Instant::now();
    let report = match gradsuite::run(configs, 0, 1e-5, 1e-4) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst: Vec<String> =
        GradTarget::ALL.iter().map(|&t| format!("{}={:.1e}", t.name(), report.worst(t))).collect();
    let pass = configs >= 10 && report.passed() && secs < 30.0;
    verdict(pass, format!("{configs} configs, worst rel err {} (< 1e-4), {secs:.2} s (< 30 s)", worst.join(" ")))
}

// ---------------------------------------------------------------- 2
// Scalar-loop reimplementation of the forward pass and every loss term.

struct Instance {
    model: TargetModel,
    x: Matrix,
    source: Matrix,
    prototypes: Matrix,
    alpha: f64,
    beta: f64,
    rho: f64,
    temperature: f64,
}

fn softmax(z: &[f64]) -> Vec<f64> {
    let mx = z.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let e: Vec<f64> = z.iter().map(|v| (v - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

fn entropy(p: &[f64]) -> f64 {
    let mut h = 0.0;
    for &v in p {
        if v > 0.0 {
            h -= v * v.ln();
        }
    }
    h
}

fn cross_entropy(t: &[f64], q: &[f64]) -> f64 {
    let mut acc = 0.0;
    for k in 0..t.len() {
        if t[k] != 0.0 {
            acc -= t[k] * q[k].max(1e-12).ln();
        }
    }
    acc
}

/// Features and logits from the flat parameter vector: per layer an
/// `out x in` row-major weight then the bias; tanh between feature layers,
/// the last feature layer affine, then the linear head.
fn naive_forward(model: &TargetModel, x: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let params = model.params();
    let sizes = model.layer_sizes().to_vec();
    let mut offset = 0;
    let mut dense = |input: &[f64], outputs: usize| {
        let inputs = input.len();
        let mut out = vec![0.0; outputs];
        for o in 0..outputs {
            let mut acc = 0.0;
            for i in 0..inputs {
                acc += params[offset + o * inputs + i] * input[i];
            }
            out[o] = acc + params[offset + outputs * inputs + o];
        }
        offset += outputs * inputs + outputs;
        out
    };
    let mut h = x.to_vec();
    for l in 1..sizes.len() {
        h = dense(&h, sizes[l]);
        if l + 1 < sizes.len() {
            for v in h.iter_mut() {
                *v = v.tanh();
            }
        }
    }
    let logits = dense(&h, model.num_classes());
    (h, logits)
}

struct NaiveLosses {
    distill: f64,
    self_training: f64,
    regularization: f64,
    total: f64,
    q: Vec<Vec<f64>>,
}

fn naive_losses(inst: &Instance) -> NaiveLosses {
    let n = inst.x.rows();
    let k = inst.model.num_classes() as f64;
    let m = inst.prototypes.rows();
    let (mut distill, mut selft) = (0.0, 0.0);
    let mut affinities = Vec::new();
    for i in 0..n {
        let (f, z) = naive_forward(&inst.model, inst.x.row(i));
        let t = inst.temperature;
        let mut teacher: Vec<f64> = inst.source.row(i).iter().map(|p| p.powf(1.0 / t)).collect();
        let s: f64 = teacher.iter().sum();
        teacher.iter_mut().for_each(|v| *v /= s);
        let scaled: Vec<f64> = z.iter().map(|v| v / t).collect();
        distill += cross_entropy(&teacher, &softmax(&scaled));

        let h = entropy(&softmax(&z));
        let g = if h > k.ln() / 2.0 + inst.rho {
            -1.0
        } else if h < k.ln() / 2.0 - inst.rho {
            1.0
        } else {
            0.0
        };
        selft += g * h;

        let mut d = Vec::new();
        for j in 0..m {
            let w = inst.prototypes.row(j);
            let (mut uv, mut uu, mut vv) = (0.0, 0.0, 0.0);
            for c in 0..f.len() {
                uv += f[c] * w[c];
                uu += f[c] * f[c];
                vv += w[c] * w[c];
            }
            d.push(uv / (uu.sqrt() * vv.sqrt()));
        }
        affinities.push(softmax(&d));
    }
    let mut colsum = vec![0.0; m];
    for p in &affinities {
        for j in 0..m {
            colsum[j] += p[j];
        }
    }
    let mut q = Vec::new();
    let mut reg = 0.0;
    for p in &affinities {
        let mut row: Vec<f64> = (0..m).map(|j| p[j] / colsum[j].sqrt()).collect();
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
        reg += cross_entropy(&row, p);
        q.push(row);
    }
    let nf = n as f64;
    let (distill, selft, reg) = (distill / nf, selft / nf, reg / nf);
    NaiveLosses {
        distill,
        self_training: selft,
        regularization: reg,
        total: inst.alpha * distill + (1.0 - inst.alpha) * selft + inst.beta * reg,
        q,
    }
}

fn uniform(rows: usize, cols: usize, scale: f64, rng: &mut impl Rng) -> Matrix {
    let data = (0..rows * cols).map(|_| scale * rng.random_range(-1.0..1.0)).collect();
    Matrix::new(rows, cols, data).unwrap()
}

fn random_instance(rng: &mut impl Rng) -> Instance {
    let input = rng.random_range(2..=8);
    let mut sizes = vec![input];
    for _ in 0..rng.random_range(0..=2) {
        sizes.push(rng.random_range(3..=10));
    }
    sizes.push(rng.random_range(2..=6));
    let k = rng.random_range(2..=8);
    let n = rng.random_range(1..=12);
    let m = rng.random_range(1..=6);
    let model = TargetModel::init(&sizes, k, Activation::Tanh, rng.random()).unwrap();
    let x = uniform(n, input, rng.random_range(0.5..3.0), rng);
    let logits = uniform(n, k, 2.0, rng);
    let rows: Vec<f64> = logits.iter_rows().flat_map(softmax).collect();
    let source = Matrix::new(n, k, rows).unwrap();
    let prototypes = uniform(m, *sizes.last().unwrap(), 1.0, rng);
    let half = (k as f64).ln() / 2.0;
    Instance {
        model,
        x,
        source,
        prototypes,
        alpha: rng.random_range(0.0..=1.0),
        beta: rng.random_range(0.0..2.0),
        rho: rng.random_range(0.0..0.9 * half),
        temperature: if rng.random_bool(0.5) { 1.0 } else { rng.random_range(0.5..3.0) },
    }
}

fn oracle_equivalence() -> Verdict {
    let mut rng = rng_for(2024, Purpose::Data);
    let mut worst: f64 = 0.0;
    let instances = 100;
    for _ in 0..instances {
        let inst = random_instance(&mut rng);
        let naive = naive_losses(&inst);
        let pass = inst.model.forward_batch(&inst.x).unwrap();
        let pseudo = PseudoLabelConfig::new(inst.rho, inst.model.num_classes()).unwrap();
        let q = auxiliary_targets(&prototype_affinities(&pass.features, &inst.prototypes).unwrap());
        let d = distillation_loss(&pass.logits, &inst.source, inst.temperature).unwrap().value;
        let s = self_training_loss(&pass.logits, &pseudo).unwrap().value;
        let r = consistency_regularizer(&pass.features, &inst.prototypes, &q).unwrap().value;
        let objective = Objective {
            weights: ObjectiveWeights::new(inst.alpha, inst.beta).unwrap(),
            pseudo,
            temperature: inst.temperature,
        };
        let batch = Batch { inputs: &inst.x, source_probs: &inst.source, q: Some(&q) };
        let (total, _) = total_loss(&inst.model, &batch, Some(&inst.prototypes), &objective).unwrap();
        let mut diffs = vec![
            (d - naive.distill).abs(),
            (s - naive.self_training).abs(),
            (r - naive.regularization).abs(),
            (total.distill - naive.distill).abs(),
            (total.self_training - naive.self_training).abs(),
            (total.regularization - naive.regularization).abs(),
            (total.total - naive.total).abs(),
        ];
        diffs.extend(q.as_slice().iter().zip(naive.q.iter().flatten()).map(|(a, b)| (a - b).abs()));
        worst = diffs.into_iter().fold(worst, f64::max);
    }
    verdict(worst <= 1e-10, format!("{instances} random instances, max |batched - naive| = {worst:.2e} (<= 1e-10)"))
}

// ---------------------------------------------------------------- 3, 4

fn mean_h(result: &SweepResult, cell: &str, method: Method) -> Option<f64> {
    result.mean(cell, method).and_then(|r| r.h_score)
}

fn single_run_seconds() -> Result<f64, String> {
    let cfg = RunConfig::default();
    let start = Instant::now();
    let prepared = prepare(&cfg).map_err(|e| e.to_string())?;
    run_method(&prepared, &cfg.model, &cfg.adapt).map_err(|e| e.to_string())?;
    Ok(start.elapsed().as_secs_f64())
}

fn method_beats_baseline(ablation: &SweepResult) -> Verdict {
    let secs = match single_run_seconds() {
        Ok(s) => s,
        Err(e) => return verdict(false, format!("run failed: {e}")),
    };
    match (mean_h(ablation, "full", Method::Ours), mean_h(ablation, "full", Method::SoPlusPlus)) {
        (Some(ours), Some(so)) => {
            let gain = 100.0 * (ours - so);
            verdict(
                gain >= 10.0 && secs < 300.0,
                format!(
                    "3-seed mean H-score {:.2} vs SO++ {:.2}: +{gain:.2} points (>= 10); one run {secs:.1} s (< 300 s)",
                    100.0 * ours,
                    100.0 * so
                ),
            )
        }
        _ => verdict(false, "missing summary rows"),
    }
}

fn ablation_ordering(ablation: &SweepResult) -> Verdict {
    let get = |c| mean_h(ablation, c, Method::Ours);
    match (get("distill_only"), get("distill_self"), get("full")) {
        (Some(d), Some(ds), Some(f)) => {
            let margin = 100.0 * (f - d);
            verdict(
                f >= ds && ds >= d && margin >= 3.0,
                format!(
                    "full {:.2} >= distill+self {:.2} >= distill-only {:.2}; full - distill-only = {margin:.2} (>= 3)",
                    100.0 * f,
                    100.0 * ds,
                    100.0 * d
                ),
            )
        }
        _ => verdict(false, "missing summary rows"),
    }
}

// ---------------------------------------------------------------- 5

fn parse_history(csv: &str) -> Vec<Vec<f64>> {
    csv.lines().skip(1).map(|l| l.split(',').map(|v| v.parse().unwrap()).collect()).collect()
}

fn black_box_boundary() -> Verdict {
    let cfg = RunConfig::default();
    let bench = generate(&cfg.benchmark).unwrap();
    let k = bench.partition.source_classes();
    let artifact = train_source(&bench.source, k, &cfg.model, &cfg.source_train).unwrap().artifact;
    let truth = GroundTruth::new(bench.target.labels.clone(), k).unwrap();
    let inputs = &bench.target.inputs;
    let n = inputs.rows();
    let expected_calls = n.div_ceil(cfg.adapt.max_batch);

    let local = CountingPredictor::new(artifact.clone().into_predictor());
    let (local_out, _) = adapt(inputs, &local, &cfg.model, &cfg.adapt, Some(&truth)).unwrap();

    let server = serve(artifact, "127.0.0.1:0").unwrap();
    let remote_cfg = RemoteConfig { max_batch: cfg.adapt.max_batch, ..RemoteConfig::default() };
    let remote = CountingPredictor::new(RemotePredictor::connect(&server.url(), remote_cfg).unwrap());
    let (remote_out, _) = adapt(inputs, &remote, &cfg.model, &cfg.adapt, Some(&truth)).unwrap();
    // one extra request for the metadata handshake
    let predict_requests = server.request_count() - 1;
    server.shutdown();

    let a = parse_history(&local_out.history.to_csv().unwrap());
    let b = parse_history(&remote_out.history.to_csv().unwrap());
    let max_diff = a.iter().flatten().zip(b.iter().flatten()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    let same_shape = a.len() == b.len() && a.len() == cfg.adapt.epochs;
    let calls_ok = local.calls() == expected_calls && remote.calls() == expected_calls && predict_requests == expected_calls;
    verdict(
        same_shape && max_diff <= 1e-9 && calls_ok,
        format!(
            "history max diff {max_diff:.1e} (<= 1e-9) over {} epochs; calls local {} remote {} server {} (expected ceil({n}/{}) = {expected_calls})",
            a.len(),
            local.calls(),
            remote.calls(),
            predict_requests,
            cfg.adapt.max_batch
        ),
    )
}

// ---------------------------------------------------------------- 6

fn schedule_and_thresholds() -> Verdict {
    let schedule = alpha_schedule(0, 100) == 1.0
        && alpha_schedule(50, 100) == 0.5
        && (100..=300).all(|t| alpha_schedule(t, 100) == 0.0);

    let uniform_unknown = (2..=50).all(|k| {
        let by_probs = classify_probs(ProbVector::uniform(k).as_slice()) == Prediction::Unknown;
        let zero = TargetModel::zeros(&[3, 4], k, Activation::Tanh).unwrap();
        by_probs && zero.infer(&[0.3, -1.0, 2.0]).unwrap() == Prediction::Unknown
    });

    let cfg = PseudoLabelConfig::new(0.5, 10).unwrap();
    let (lo, hi) = cfg.band();
    let half = 10f64.ln() / 2.0;
    let edges = (lo - (half - 0.5)).abs() <= 1e-9
        && (hi - (half + 0.5)).abs() <= 1e-9
        && (lo - 0.65129).abs() < 5e-6
        && (hi - 1.65129).abs() < 5e-6;
    let bands = pseudo_label_for_entropy(lo - 1e-6, &cfg) == PseudoLabel::Accept
        && pseudo_label_for_entropy(lo + 1e-6, &cfg) == PseudoLabel::Ignore
        && pseudo_label_for_entropy(half, &cfg) == PseudoLabel::Ignore
        && pseudo_label_for_entropy(hi - 1e-6, &cfg) == PseudoLabel::Ignore
        && pseudo_label_for_entropy(hi + 1e-6, &cfg) == PseudoLabel::Reject;
    verdict(
        schedule && uniform_unknown && edges && bands,
        format!(
            "alpha schedule {schedule}; uniform -> UNKNOWN for K=2..50 {uniform_unknown}; band ({lo:.9}, {hi:.9}) {edges}; three bands {bands}"
        ),
    )
}

// ---------------------------------------------------------------- 7

fn sensitivity_robustness() -> Verdict {
    let result = match sweep(SweepKind::Sensitivity, &RunConfig::default(), &SweepGrid::default(), &[0]) {
        Ok(r) => r,
        Err(e) => return verdict(false, format!("sweep failed: {e}")),
    };
    let ours: Vec<_> = result.runs().filter(|r| r.method == Method::Ours).collect();
    let wins = ours
        .iter()
        .filter(|o| {
            let so = result
                .runs()
                .find(|s| s.method == Method::SoPlusPlus && s.cell == o.cell && s.kind == o.kind)
                .and_then(|s| s.h_score);
            matches!((o.h_score, so), (Some(a), Some(b)) if a > b)
        })
        .count();
    let cells = ours.len();
    let share = wins as f64 / cells.max(1) as f64;
    let worst = ours.iter().filter_map(|o| o.h_score).fold(f64::INFINITY, f64::min);
    verdict(
        cells == 27 && share >= 0.9,
        format!("method beats SO++ in {wins}/{cells} cells ({:.0}%, >= 90%); lowest H-score {:.2}", 100.0 * share, 100.0 * worst),
    )
}

// ---------------------------------------------------------------- 8

fn metric_checks() -> Verdict {
    use Prediction::{Class, Unknown};
    let example = (h_score(0.8, 0.6).unwrap() - 0.685714).abs() <= 1e-6;
    let grid: Vec<f64> = (0..=20).map(|i| i as f64 / 20.0).collect();
    let symmetric = grid.iter().all(|&a| grid.iter().all(|&b| h_score(a, b).unwrap() == h_score(b, a).unwrap()));
    let zero = grid.iter().all(|&a| h_score(a, 0.0).unwrap() == 0.0 && h_score(0.0, a).unwrap() == 0.0);

    // Fixture A: K = 4; 10 in-class (8 right), 10 private (6 UNKNOWN).
    let truth_a = GroundTruth::new(vec![0, 0, 1, 1, 1, 2, 2, 3, 3, 3, 4, 4, 4, 4, 4, 5, 5, 5, 6, 6], 4).unwrap();
    let preds_a = [
        Class(0), Class(1), Class(1), Class(1), Class(1), Class(2), Unknown, Class(3), Class(3), Class(3),
        Unknown, Class(0), Unknown, Unknown, Class(2), Unknown, Unknown, Class(3), Unknown, Class(1),
    ];
    let a = evaluate(&preds_a, &truth_a).unwrap();
    // per class: 0 -> 1/2, 1 -> 3/3, 2 -> 1/2, 3 -> 3/3, unknown -> 6/10
    let aa_a = (0.5 + 1.0 + 0.5 + 1.0 + 0.6) / 5.0;
    let fixture_a = (a.n_in, a.n_out) == (10, 10)
        && a.acc_in == Some(0.8)
        && a.acc_out == Some(0.6)
        && (a.h_score.unwrap() - 0.96 / 1.4).abs() < 1e-15
        && (a.aa - aa_a).abs() < 1e-15
        && a.per_class.iter().map(|c| (c.count, c.correct)).collect::<Vec<_>>()
            == vec![(2, 1), (3, 3), (2, 1), (3, 3), (10, 6)];

    // Fixture B: K = 3; 15 in-class (12 right), 5 private (1 UNKNOWN).
    let truth_b = GroundTruth::new(vec![0, 0, 0, 0, 0, 1, 1, 1, 1, 1, 2, 2, 2, 2, 2, 3, 3, 4, 4, 5], 3).unwrap();
    let preds_b = [
        Class(0), Class(0), Class(0), Class(0), Unknown, Class(1), Class(1), Class(1), Class(1), Class(1),
        Class(2), Class(2), Class(2), Class(0), Unknown, Class(0), Unknown, Class(1), Class(2), Class(2),
    ];
    let b = evaluate(&preds_b, &truth_b).unwrap();
    let (ai, ao) = (12.0 / 15.0, 1.0 / 5.0);
    let fixture_b = (b.n_in, b.n_out) == (15, 5)
        && b.acc_in == Some(ai)
        && b.acc_out == Some(ao)
        && (b.h_score.unwrap() - 2.0 * ai * ao / (ai + ao)).abs() < 1e-15
        && (b.aa - (0.8 + 1.0 + 0.6 + 0.2) / 4.0).abs() < 1e-15;

    verdict(
        example && symmetric && zero && fixture_a && fixture_b,
        format!(
            "h(0.8,0.6)={:.6} {example}; symmetry {symmetric}; h(x,0)=0 {zero}; 20-instance fixtures {fixture_a} {fixture_b}",
            h_score(0.8, 0.6).unwrap()
        ),
    )
}

// ---------------------------------------------------------------- 9

fn bbuda(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_bbuda")).args(args).env("RUST_LOG", "warn").output().map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("bbuda {} failed: {}", args.join(" "), String::from_utf8_lossy(&out.stderr)))
    }
}

fn determinism_steps(dir: &Path) -> Result<(bool, bool), String> {
    let p = |s: &str| dir.join(s).to_string_lossy().into_owned();
    bbuda(&["gen", "--out", &p("data"), "--seed", "0"])?;
    bbuda(&["train-source", "--data", &p("data/source.json"), "--out", &p("source.json"), "--seed", "0"])?;
    let predictor = format!("local:{}", p("source.json"));
    for run in ["a", "b"] {
        bbuda(&["adapt", "--target", &p("data/target.json"), "--predictor", &predictor, "--seed", "0", "--out", &p(run)])?;
    }
    let same = |f: &str| std::fs::read(dir.join("a").join(f)).ok() == std::fs::read(dir.join("b").join(f)).ok();
    Ok((same("model.json"), same("history.csv")))
}

fn determinism() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    match determinism_steps(dir.path()) {
        Ok((model, history)) => {
            verdict(model && history, format!("two adapt runs: model.json identical {model}, history.csv identical {history}"))
        }
        Err(e) => verdict(false, e),
    }
}

fn main() {
    let ablation = sweep(SweepKind::Ablation, &RunConfig::default(), &SweepGrid::default(), &[0, 1, 2]);
    let ablation_verdicts = match &ablation {
        Ok(r) if !r.failed() => (method_beats_baseline(r), ablation_ordering(r)),
        Ok(_) => (verdict(false, "ablation sweep had failed rows"), verdict(false, "ablation sweep had failed rows")),
        Err(e) => (verdict(false, format!("ablation sweep: {e}")), verdict(false, format!("ablation sweep: {e}"))),
    };
    let (c3, c4) = ablation_verdicts;
    let results = [
        ("1 gradient suite", gradient_suite()),
        ("2 oracle equivalence", oracle_equivalence()),
        ("3 method beats SO++", c3),
        ("4 ablation ordering", c4),
        ("5 black-box boundary", black_box_boundary()),
        ("6 schedule and thresholds", schedule_and_thresholds()),
        ("7 sensitivity robustness", sensitivity_robustness()),
        ("8 metrics", metric_checks()),
        ("9 determinism", determinism()),
    ];
    if let Ok(r) = &ablation {
        for row in r.rows.iter().filter(|r| r.kind == RowKind::Mean) {
            println!("    ablation mean {:<13} {:<5} h={:?}", row.cell, row.method.name(), row.h_score);
        }
    }
    let mut failed = 0;
    for (name, v) in &results {
        println!("[{}] {name}: {}", if v.pass { "PASS" } else { "FAIL" }, v.detail);
        failed += usize::from(!v.pass);
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
