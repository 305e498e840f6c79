//! End-to-end runs and the comparative sweeps (ablation, openness,
//! hyperparameter sensitivity).
//!
//! A run is: generate the benchmark, train the source model, query it once
//! for every target instance, score the source-only baseline, adapt, score
//! the adapted model. Prepared datasets are shared by every sweep cell
//! whose benchmark, source-training and model settings hash the same.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::benchgen::{generate, train_source, Benchmark, BenchmarkSpec, LabelPartition, SourceTrainConfig};
use crate::blackbox::{fill_cache, PredictionCache};
use crate::error::{Error, Result};
use crate::eval::{evaluate, so_plus_plus, EvalReport, GroundTruth};
use crate::model::ModelConfig;
use crate::trainer::{adapt_from_cache, AdaptConfig};

pub const CONFIG_SCHEMA_VERSION: u32 = 1;

/// Everything one end-to-end run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub schema_version: u32,
    pub benchmark: BenchmarkSpec,
    pub source_train: SourceTrainConfig,
    pub model: ModelConfig,
    pub adapt: AdaptConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            schema_version: CONFIG_SCHEMA_VERSION,
            benchmark: BenchmarkSpec::default(),
            source_train: SourceTrainConfig::default(),
            model: ModelConfig::default(),
            adapt: AdaptConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.schema_version != CONFIG_SCHEMA_VERSION {
            return Err(Error::invalid(format!("unsupported config schema_version {}", self.schema_version)));
        }
        self.benchmark.validate()?;
        self.source_train.validate()?;
        let n = self.benchmark.partition.target_classes() * self.benchmark.samples_per_class.target;
        self.adapt.validate(self.benchmark.partition.source_classes(), n)
    }

    /// One seed drives data, source training and adaptation.
    pub fn with_seed(&self, seed: u64) -> Self {
        let mut cfg = self.clone();
        cfg.benchmark.seed = seed;
        cfg.source_train.seed = seed;
        cfg.adapt.seed = seed;
        cfg
    }

    /// Stable digest of the settings that determine the data, the source
    /// model and therefore the prediction cache.
    pub fn data_hash(&self) -> Result<String> {
        let key = crate::json::to_string(&(&self.benchmark, &self.source_train, &self.model))?;
        let digest = Sha256::digest(key.as_bytes());
        Ok(digest.iter().take(8).map(|b| format!("{b:02x}")).collect())
    }
}

/// A benchmark with its trained source model already queried.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub benchmark: Benchmark,
    pub source_accuracy: f64,
    pub cache: PredictionCache,
    pub truth: GroundTruth,
    pub so_plus_plus: EvalReport,
    pub data_hash: String,
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.benchmark.validate()?;
    let benchmark = generate(&cfg.benchmark)?;
    let k = benchmark.partition.source_classes();
    let source = train_source(&benchmark.source, k, &cfg.model, &cfg.source_train)?;
    let predictor = source.artifact.into_predictor();
    let cache = fill_cache(&predictor, &benchmark.target.inputs, cfg.adapt.max_batch)?;
    let truth = GroundTruth::new(benchmark.target.labels.clone(), k)?;
    let so_plus_plus = so_plus_plus(&cache, &truth)?;
    Ok(Prepared {
        benchmark,
        source_accuracy: source.train_accuracy,
        cache,
        truth,
        so_plus_plus,
        data_hash: cfg.data_hash()?,
    })
}

/// Adapts on a prepared benchmark and scores the final model.
pub fn run_method(prepared: &Prepared, model: &ModelConfig, adapt: &AdaptConfig) -> Result<EvalReport> {
    let outcome = adapt_from_cache(&prepared.cache, model, adapt, None)?;
    let preds = outcome.model.infer_batch(prepared.cache.inputs())?;
    evaluate(&preds, &prepared.truth)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepKind {
    Ablation,
    Openness,
    Sensitivity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpennessProtocol {
    /// Vary the number of source-private classes with `n_common` fixed.
    SourcePrivate,
    /// Vary the number of common classes; the remainder is split between
    /// the two private sets, the target side taking the extra class.
    Common,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OpennessGrid {
    pub protocol: OpennessProtocol,
    /// Total number of classes across both domains, held fixed.
    pub union: usize,
    /// Fixed common-class count for the `source_private` protocol.
    pub n_common: usize,
    pub values: Vec<usize>,
}

impl Default for OpennessGrid {
    fn default() -> Self {
        OpennessGrid { protocol: OpennessProtocol::Common, union: 21, n_common: 10, values: vec![5, 10, 15] }
    }
}

impl OpennessGrid {
    pub fn partition(&self, value: usize) -> Result<LabelPartition> {
        let (n_common, n_source_private) = match self.protocol {
            OpennessProtocol::SourcePrivate => (self.n_common, value),
            OpennessProtocol::Common => {
                let rest = self.union.checked_sub(value).ok_or_else(|| Error::invalid("n_common exceeds the union"))?;
                (value, rest.saturating_sub(1) / 2)
            }
        };
        let n_target_private = self
            .union
            .checked_sub(n_common + n_source_private)
            .ok_or_else(|| Error::invalid(format!("{n_common} + {n_source_private} classes exceed the union")))?;
        LabelPartition::new(n_common, n_source_private, n_target_private)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SensitivityGrid {
    pub rho: Vec<f64>,
    pub beta: Vec<f64>,
    pub prototypes: Vec<usize>,
}

impl Default for SensitivityGrid {
    fn default() -> Self {
        SensitivityGrid { rho: vec![0.25, 0.5, 0.75], beta: vec![0.1, 1.0, 10.0], prototypes: vec![50, 100, 200] }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepGrid {
    pub openness: OpennessGrid,
    pub sensitivity: SensitivityGrid,
}

/// One point of a sweep: a full run configuration under a readable name.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepCell {
    pub name: String,
    pub config: RunConfig,
}

/// Expands a sweep into cells; infeasible cells are returned separately
/// with the reason they were skipped.
pub fn sweep_cells(kind: SweepKind, base: &RunConfig, grid: &SweepGrid) -> (Vec<SweepCell>, Vec<String>) {
    let mut cells = Vec::new();
    let mut skipped = Vec::new();
    match kind {
        SweepKind::Ablation => {
            let mut distill = base.clone();
            distill.adapt.alpha = Some(1.0);
            distill.adapt.beta = 0.0;
            let mut distill_self = base.clone();
            distill_self.adapt.alpha = None;
            distill_self.adapt.beta = 0.0;
            let mut full = base.clone();
            full.adapt.alpha = None;
            for (name, config) in [("distill_only", distill), ("distill_self", distill_self), ("full", full)] {
                cells.push(SweepCell { name: name.into(), config });
            }
        }
        SweepKind::Openness => {
            for &value in &grid.openness.values {
                match grid.openness.partition(value) {
                    Ok(p) => {
                        let mut config = base.clone();
                        config.benchmark.partition = p;
                        let name = format!("c{}_s{}_t{}", p.n_common, p.n_source_private, p.n_target_private);
                        cells.push(SweepCell { name, config });
                    }
                    Err(e) => skipped.push(format!("openness value {value}: {e}")),
                }
            }
        }
        SweepKind::Sensitivity => {
            let g = &grid.sensitivity;
            for &rho in &g.rho {
                for &beta in &g.beta {
                    for &m in &g.prototypes {
                        let mut config = base.clone();
                        config.adapt.rho = rho;
                        config.adapt.beta = beta;
                        config.adapt.prototypes = m;
                        cells.push(SweepCell { name: format!("rho{rho}_beta{beta}_m{m}"), config });
                    }
                }
            }
        }
    }
    let (ok, bad): (Vec<_>, Vec<_>) = cells.into_iter().partition(|c| c.config.validate().is_ok());
    for c in bad {
        let reason = c.config.validate().err().map(|e| e.to_string()).unwrap_or_default();
        skipped.push(format!("cell {}: {reason}", c.name));
    }
    (ok, skipped)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Ours,
    SoPlusPlus,
}

impl Method {
    pub fn name(self) -> &'static str {
        match self {
            Method::Ours => "ours",
            Method::SoPlusPlus => "so++",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum RowKind {
    Run(u64),
    Mean,
    Std,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub cell: String,
    pub kind: RowKind,
    pub method: Method,
    pub config: RunConfig,
    pub data_hash: String,
    pub acc_in: Option<f64>,
    pub acc_out: Option<f64>,
    pub h_score: Option<f64>,
    pub aa: Option<f64>,
    /// `None` on success, the error message otherwise.
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    pub skipped: Vec<String>,
}

impl SweepResult {
    pub fn failed(&self) -> bool {
        self.rows.iter().any(|r| r.error.is_some())
    }

    pub fn runs(&self) -> impl Iterator<Item = &SweepRow> {
        self.rows.iter().filter(|r| matches!(r.kind, RowKind::Run(_)))
    }

    pub fn mean(&self, cell: &str, method: Method) -> Option<&SweepRow> {
        self.rows.iter().find(|r| r.cell == cell && r.method == method && r.kind == RowKind::Mean)
    }

    pub fn to_csv(&self) -> Result<String> {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "cell",
            "seed",
            "stat",
            "method",
            "n_common",
            "n_source_private",
            "n_target_private",
            "rho",
            "beta",
            "prototypes",
            "alpha",
            "acc_in",
            "acc_out",
            "h_score",
            "aa",
            "data_hash",
            "status",
        ])?;
        for r in &self.rows {
            let (seed, stat) = match r.kind {
                RowKind::Run(s) => (s.to_string(), "run"),
                RowKind::Mean => (String::new(), "mean"),
                RowKind::Std => (String::new(), "std"),
            };
            let p = r.config.benchmark.partition;
            let a = &r.config.adapt;
            let alpha = a.alpha.map(|v| v.to_string()).unwrap_or_else(|| "schedule".into());
            w.write_record([
                r.cell.clone(),
                seed,
                stat.to_string(),
                r.method.name().to_string(),
                p.n_common.to_string(),
                p.n_source_private.to_string(),
                p.n_target_private.to_string(),
                a.rho.to_string(),
                a.beta.to_string(),
                a.prototypes.to_string(),
                alpha,
                opt(r.acc_in),
                opt(r.acc_out),
                opt(r.h_score),
                opt(r.aa),
                r.data_hash.clone(),
                r.error.clone().map(|e| format!("failed: {e}")).unwrap_or_else(|| "ok".into()),
            ])?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
    }
}

fn mean_std(values: &[f64]) -> (Option<f64>, Option<f64>) {
    if values.is_empty() {
        return (None, None);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    (Some(mean), Some(std))
}

fn report_row(cell: &SweepCell, seed: u64, method: Method, hash: &str, report: Result<EvalReport>) -> SweepRow {
    let mut row = SweepRow {
        cell: cell.name.clone(),
        kind: RowKind::Run(seed),
        method,
        config: cell.config.with_seed(seed),
        data_hash: hash.to_string(),
        acc_in: None,
        acc_out: None,
        h_score: None,
        aa: None,
        error: None,
    };
    match report {
        Ok(r) => {
            row.acc_in = r.acc_in;
            row.acc_out = r.acc_out;
            row.h_score = r.h_score;
            row.aa = Some(r.aa);
        }
        Err(e) => row.error = Some(e.to_string()),
    }
    row
}

/// Runs every cell for every seed, with the adapted model and the
/// source-only baseline, and appends mean/std rows per (cell, method).
pub fn run_sweep(cells: &[SweepCell], seeds: &[u64]) -> Result<Vec<SweepRow>> {
    if seeds.is_empty() {
        return Err(Error::invalid("a sweep needs at least one seed"));
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len()).flat_map(|c| seeds.iter().map(move |&s| (c, s))).collect();

    let mut hashes: BTreeMap<String, RunConfig> = BTreeMap::new();
    let mut job_hash = Vec::with_capacity(jobs.len());
    for &(c, s) in &jobs {
        let cfg = cells[c].config.with_seed(s);
        let h = cfg.data_hash()?;
        hashes.entry(h.clone()).or_insert(cfg);
        job_hash.push(h);
    }
    log::info!("sweep: {} cells x {} seeds over {} distinct datasets", cells.len(), seeds.len(), hashes.len());
    let prepared: BTreeMap<String, std::result::Result<Prepared, String>> = hashes
        .into_par_iter()
        .map(|(h, cfg)| {
            let p = prepare(&cfg).map_err(|e| e.to_string());
            (h, p)
        })
        .collect();

    let per_job: Vec<[SweepRow; 2]> = jobs
        .par_iter()
        .zip(job_hash.par_iter())
        .map(|(&(c, seed), hash)| {
            let cell = &cells[c];
            let cfg = cell.config.with_seed(seed);
            match &prepared[hash] {
                Ok(p) => {
                    let ours = run_method(p, &cfg.model, &cfg.adapt);
                    [
                        report_row(cell, seed, Method::Ours, hash, ours),
                        report_row(cell, seed, Method::SoPlusPlus, hash, Ok(p.so_plus_plus.clone())),
                    ]
                }
                Err(e) => {
                    let err = || Err(Error::Training(e.clone()));
                    [
                        report_row(cell, seed, Method::Ours, hash, err()),
                        report_row(cell, seed, Method::SoPlusPlus, hash, err()),
                    ]
                }
            }
        })
        .collect();

    let mut rows = Vec::new();
    for (c, cell) in cells.iter().enumerate() {
        let cell_rows: Vec<&SweepRow> =
            jobs.iter().zip(&per_job).filter(|((jc, _), _)| *jc == c).flat_map(|(_, r)| r.iter()).collect();
        rows.extend(cell_rows.iter().map(|r| (*r).clone()));
        for method in [Method::Ours, Method::SoPlusPlus] {
            let ok: Vec<&&SweepRow> = cell_rows.iter().filter(|r| r.method == method && r.error.is_none()).collect();
            let stat = |f: fn(&SweepRow) -> Option<f64>| mean_std(&ok.iter().filter_map(|r| f(r)).collect::<Vec<_>>());
            let (acc_in, acc_out, h, aa) =
                (stat(|r| r.acc_in), stat(|r| r.acc_out), stat(|r| r.h_score), stat(|r| r.aa));
            let hash = cell_rows.first().map(|r| r.data_hash.clone()).unwrap_or_default();
            for (kind, pick) in [(RowKind::Mean, 0), (RowKind::Std, 1)] {
                let get = |t: (Option<f64>, Option<f64>)| if pick == 0 { t.0 } else { t.1 };
                rows.push(SweepRow {
                    cell: cell.name.clone(),
                    kind,
                    method,
                    config: cell.config.clone(),
                    data_hash: hash.clone(),
                    acc_in: get(acc_in),
                    acc_out: get(acc_out),
                    h_score: get(h),
                    aa: get(aa),
                    error: None,
                });
            }
        }
    }
    Ok(rows)
}

pub fn sweep(kind: SweepKind, base: &RunConfig, grid: &SweepGrid, seeds: &[u64]) -> Result<SweepResult> {
    let (cells, skipped) = sweep_cells(kind, base, grid);
    for reason in &skipped {
        log::warn!("skipping infeasible {reason}");
    }
    Ok(SweepResult { rows: run_sweep(&cells, seeds)?, skipped })
}
