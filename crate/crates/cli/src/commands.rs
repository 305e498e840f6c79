use std::fs;
use std::io::Write;
use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::Serialize;

use bbuda::benchgen::{generate, train_source as fit_source, BenchmarkSpec, DatasetDocument, Domain};
use bbuda::blackbox::{
    serve as start_server, CountingPredictor, Predictor, RemoteConfig, RemotePredictor, SourceModelArtifact,
};
use bbuda::eval::{evaluate, so_plus_plus};
use bbuda::experiment::{sweep as run_sweep, RunConfig, SweepGrid, SweepKind};
use bbuda::gradsuite::{self, GradTarget};
use bbuda::trainer::adapt as run_adapt;
use bbuda::{EvalReport, GroundTruth, TargetModel};

fn load_config(path: Option<&Path>) -> Result<RunConfig> {
    let cfg = match path {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading config {}", p.display()))?;
            RunConfig::from_json(&text).with_context(|| format!("config {}", p.display()))?
        }
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn load_dataset(path: &Path) -> Result<DatasetDocument> {
    DatasetDocument::load(path).with_context(|| format!("loading dataset {}", path.display()))
}

fn write(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        create_dir(dir)?;
    }
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn open_predictor(spec: &str, max_batch: usize) -> Result<Box<dyn Predictor>> {
    if let Some(path) = spec.strip_prefix("local:") {
        let artifact = SourceModelArtifact::load(Path::new(path))
            .with_context(|| format!("loading source artifact {path}"))?;
        Ok(Box::new(artifact.into_predictor()))
    } else if let Some(url) = spec.strip_prefix("remote:") {
        let cfg = RemoteConfig { max_batch, ..RemoteConfig::default() };
        let remote = RemotePredictor::connect(url, cfg).with_context(|| format!("connecting to {url}"))?;
        Ok(Box::new(remote))
    } else {
        bail!("predictor must be local:<artifact> or remote:<url>, got {spec:?}")
    }
}

fn write_report(report: &EvalReport, json_path: &Path) -> Result<()> {
    write(json_path, &report.to_json()?)?;
    write(&json_path.with_extension("csv"), &report.to_csv()?)
}

fn summarize(report: &EvalReport) -> String {
    let show = |v: Option<f64>| v.map_or("n/a".to_string(), |x| format!("{x:.4}"));
    format!(
        "acc_in={} acc_out={} h_score={} aa={:.4}",
        show(report.acc_in),
        show(report.acc_out),
        show(report.h_score),
        report.aa
    )
}

pub fn print_config() -> Result<()> {
    println!("{}", bbuda::json::to_string_pretty(&RunConfig::default())?);
    Ok(())
}

#[derive(Serialize)]
struct Manifest<'a> {
    schema_version: u32,
    seed: u64,
    spec: &'a BenchmarkSpec,
    source_file: &'static str,
    target_file: &'static str,
    source_rows: usize,
    target_rows: usize,
    source_classes: usize,
    target_classes: usize,
}

pub fn gen(config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.benchmark.seed = s;
    }
    cfg.benchmark.validate()?;
    let bench = generate(&cfg.benchmark)?;
    create_dir(out)?;
    DatasetDocument::new(Domain::Source, &cfg.benchmark, &bench.source).save(&out.join("source.json"))?;
    DatasetDocument::new(Domain::Target, &cfg.benchmark, &bench.target).save(&out.join("target.json"))?;
    let manifest = Manifest {
        schema_version: 1,
        seed: cfg.benchmark.seed,
        spec: &cfg.benchmark,
        source_file: "source.json",
        target_file: "target.json",
        source_rows: bench.source.labels.len(),
        target_rows: bench.target.labels.len(),
        source_classes: bench.partition.source_classes(),
        target_classes: bench.partition.target_classes(),
    };
    write(&out.join("manifest.json"), &bbuda::json::to_string_pretty(&manifest)?)?;
    log::info!("wrote {} source and {} target rows to {}", manifest.source_rows, manifest.target_rows, out.display());
    Ok(())
}

pub fn train_source(data: &Path, config: Option<&Path>, seed: Option<u64>, out: &Path) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.source_train.seed = s;
    }
    let doc = load_dataset(data)?;
    if doc.domain != Domain::Source {
        bail!("{} is a target dataset", data.display());
    }
    let k = doc.spec.partition.source_classes();
    let outcome = fit_source(&doc.dataset(), k, &cfg.model, &cfg.source_train)?;
    write(out, &outcome.artifact.to_json()?)?;
    println!("train_accuracy={}", outcome.train_accuracy);
    Ok(())
}

pub fn serve(artifact: &Path, bind: &str) -> Result<()> {
    let artifact =
        SourceModelArtifact::load(artifact).with_context(|| format!("loading source artifact {}", artifact.display()))?;
    let handle = start_server(artifact, bind)?;
    println!("listening on {}", handle.url());
    std::io::stdout().flush()?;
    handle.join();
    Ok(())
}

#[derive(Serialize)]
struct RunSummary {
    predictor: String,
    instances: usize,
    source_classes: usize,
    max_batch: usize,
    predictor_calls: usize,
    seed: u64,
    epochs: usize,
}

pub fn adapt(
    target: &Path,
    predictor: &str,
    truth: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
    out: &Path,
) -> Result<()> {
    let mut cfg = load_config(config)?;
    if let Some(s) = seed {
        cfg.adapt.seed = s;
    }
    let doc = load_dataset(target)?;
    let counted = CountingPredictor::new(open_predictor(predictor, cfg.adapt.max_batch)?);
    let k = counted.num_classes();
    if counted.input_dim() != doc.inputs.cols() {
        bail!("predictor expects {} inputs, target rows have {}", counted.input_dim(), doc.inputs.cols());
    }
    let truth = match truth {
        Some(p) => Some(GroundTruth::new(load_dataset(p)?.labels, k)?),
        None => None,
    };
    let (outcome, cache) = run_adapt(&doc.inputs, &counted, &cfg.model, &cfg.adapt, truth.as_ref())?;

    create_dir(out)?;
    write(&out.join("model.json"), &outcome.model.to_json()?)?;
    outcome.history.save_csv(&out.join("history.csv"))?;
    let summary = RunSummary {
        predictor: cache.source().to_string(),
        instances: cache.len(),
        source_classes: k,
        max_batch: cfg.adapt.max_batch,
        predictor_calls: counted.calls(),
        seed: cfg.adapt.seed,
        epochs: cfg.adapt.epochs,
    };
    write(&out.join("run.json"), &bbuda::json::to_string_pretty(&summary)?)?;
    log::info!("{} predictor calls for {} instances", summary.predictor_calls, summary.instances);
    if let Some(t) = &truth {
        let report = evaluate(&outcome.model.infer_batch(&doc.inputs)?, t)?;
        write_report(&report, &out.join("report.json"))?;
        println!("{}", summarize(&report));
    }
    Ok(())
}

pub fn eval(target: &Path, model: Option<&Path>, predictor: Option<&str>, out: Option<&Path>) -> Result<()> {
    let doc = load_dataset(target)?;
    let report = match (model, predictor) {
        (Some(m), _) => {
            let text = fs::read_to_string(m).with_context(|| format!("reading model {}", m.display()))?;
            let model = TargetModel::from_json(&text)?;
            let truth = GroundTruth::new(doc.labels.clone(), model.num_classes())?;
            evaluate(&model.infer_batch(&doc.inputs)?, &truth)?
        }
        (None, Some(spec)) => {
            let p = open_predictor(spec, bbuda::blackbox::DEFAULT_MAX_BATCH)?;
            let cache = bbuda::blackbox::fill_cache(p.as_ref(), &doc.inputs, bbuda::blackbox::DEFAULT_MAX_BATCH)?;
            so_plus_plus(&cache, &GroundTruth::new(doc.labels.clone(), p.num_classes())?)?
        }
        (None, None) => bail!("either --model or --predictor is required"),
    };
    if let Some(path) = out {
        write_report(&report, path)?;
    }
    println!("{}", summarize(&report));
    Ok(())
}

pub fn sweep(kind: SweepKind, config: Option<&Path>, grid: Option<&Path>, seeds: &[u64], out: &Path) -> Result<()> {
    if seeds.is_empty() {
        bail!("at least one seed is required");
    }
    let base = load_config(config)?;
    let grid: SweepGrid = match grid {
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading grid {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("grid {}", p.display()))?
        }
        None => SweepGrid::default(),
    };
    let result = run_sweep(kind, &base, &grid, seeds)?;
    for reason in &result.skipped {
        log::warn!("skipped cell: {reason}");
    }
    write(out, &result.to_csv()?)?;
    let failures = result.rows.iter().filter(|r| r.error.is_some()).count();
    if failures > 0 {
        bail!("{failures} sweep rows failed; see the status column of {}", out.display());
    }
    Ok(())
}

pub fn gradcheck(configs: usize, seed: u64, out: Option<&Path>) -> Result<()> {
    let report = gradsuite::run(configs, seed, gradsuite::DEFAULT_STEP, gradsuite::DEFAULT_THRESHOLD)?;
    for t in GradTarget::ALL {
        println!("{:<14} worst relative error {:.3e}", t.name(), report.worst(t));
    }
    if let Some(path) = out {
        write(path, &bbuda::json::to_string_pretty(&report)?)?;
    }
    if !report.passed() {
        bail!("gradient check failed: some relative error is at least {:e}", report.threshold);
    }
    println!("all {} checks below {:e}", report.cases.len(), report.threshold);
    Ok(())
}
