//! `bbuda`: generate synthetic benchmarks, train and serve a source model,
//! adapt a target model through the black-box interface, score it, and run
//! the comparative sweeps.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

const CONFIG_HELP: &str = "\
Run configuration (JSON, unknown fields rejected, every field optional):
  schema_version   1
  benchmark        partition {n_common, n_source_private, n_target_private},
                   input_dim, samples_per_class {source, target},
                   shift {rotation, translation, scale}, class_separation,
                   noise_sigma, seed
  source_train     epochs, batch_size, learning_rate, momentum, seed
  model            hidden [sizes], feature_dim, activation (\"tanh\" | \"relu\")
  adapt            epochs, batch_size, learning_rate, momentum, rho, beta,
                   prototypes, prototype_init_epoch, temperature,
                   alpha (null follows the decay schedule), max_batch, seed
`bbuda config` prints the defaults.";

#[derive(Parser)]
#[command(name = "bbuda", version, about = "Black-box universal domain adaptation lab", after_help = CONFIG_HELP)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Print the default run configuration.
    Config,
    /// Generate source and target datasets plus a manifest.
    Gen {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides benchmark.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for source.json, target.json and manifest.json.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the source model on a source dataset and write its artifact.
    TrainSource {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides source_train.seed.
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Serve a source artifact over HTTP until interrupted.
    Serve {
        #[arg(long)]
        artifact: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
    },
    /// Adapt a target model using only the source predictor's outputs.
    Adapt {
        /// Target dataset; its labels are ignored.
        #[arg(long)]
        target: PathBuf,
        /// `local:<artifact path>` or `remote:<url>`.
        #[arg(long)]
        predictor: String,
        /// Dataset whose labels score the run (usually the target file).
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Overrides adapt.seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Output directory for model.json, history.csv, run.json and,
        /// with --truth, report.json and report.csv.
        #[arg(long)]
        out: PathBuf,
    },
    /// Score an adapted model, or the source-only baseline of a predictor.
    Eval {
        #[arg(long)]
        target: PathBuf,
        #[arg(long, conflicts_with = "predictor", required_unless_present = "predictor")]
        model: Option<PathBuf>,
        /// `local:<artifact path>` or `remote:<url>`; scores the baseline.
        #[arg(long)]
        predictor: Option<String>,
        /// Report JSON path; a CSV with the same stem is written beside it.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the ablation, openness or sensitivity sweep.
    Sweep {
        #[arg(long, value_enum)]
        kind: Kind,
        /// Base run configuration.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Grid JSON: {openness: {protocol, union, n_common, values},
        /// sensitivity: {rho, beta, prototypes}}.
        #[arg(long)]
        grid: Option<PathBuf>,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check every analytic gradient against finite differences.
    Gradcheck {
        #[arg(long, default_value_t = 12)]
        configs: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Ablation,
    Openness,
    Sensitivity,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let outcome = match cli.command {
        Command::Config => commands::print_config(),
        Command::Gen { config, seed, out } => commands::gen(config.as_deref(), seed, &out),
        Command::TrainSource { data, config, seed, out } => commands::train_source(&data, config.as_deref(), seed, &out),
        Command::Serve { artifact, bind } => commands::serve(&artifact, &bind),
        Command::Adapt { target, predictor, truth, config, seed, out } => {
            commands::adapt(&target, &predictor, truth.as_deref(), config.as_deref(), seed, &out)
        }
        Command::Eval { target, model, predictor, out } => {
            commands::eval(&target, model.as_deref(), predictor.as_deref(), out.as_deref())
        }
        Command::Sweep { kind, config, grid, seeds, out } => {
            let kind = match kind {
                Kind::Ablation => bbuda::experiment::SweepKind::Ablation,
                Kind::Openness => bbuda::experiment::SweepKind::Openness,
                Kind::Sensitivity => bbuda::experiment::SweepKind::Sensitivity,
            };
            commands::sweep(kind, config.as_deref(), grid.as_deref(), &seeds, &out)
        }
        Command::Gradcheck { configs, seed, out } => commands::gradcheck(configs, seed, out.as_deref()),
    };
    match outcome {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
