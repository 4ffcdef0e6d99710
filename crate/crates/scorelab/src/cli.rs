//! Command-line surface.
//!
//! Every subcommand is a pure function of (config, seed): it reads the
//! TOML config (or the built-in default), applies `--seed` / `--out`
//! overrides *before* hashing, runs, and writes a machine-readable
//! `result.json` into the output directory. Exit codes: 0 on success, 1
//! when an operation ran and failed (a check did not pass, training
//! diverged), 2 when the configuration or invocation was unusable.

use crate::config::ExperimentConfig;
use crate::degrade::degrade;
use crate::distill::verify;
use crate::nets::{gradcheck, init_params, GradCheckReport};
use crate::patch::Patch;
use crate::rng::{indexed_rng, stream_rng, Stream};
use crate::trainer::{
    ensure_teacher, eval_checkpoint, make_corpus, resolve, run_experiment, teacher_cache_key,
    CorpusParams, TrainerError,
};
use clap::{Parser, Subcommand};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::Serialize;
use serde_json::json;
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Debug, Parser)]
#[command(
    name = "scorelab",
    version,
    about = "One-step restoration by score distillation, at laboratory scale"
)]
pub struct Cli {
    /// Experiment configuration (TOML). Omitted: a built-in two-mode
    /// mixture experiment.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed override (applied before the config is hashed).
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory override (applied before the config is hashed).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Pretrain the teacher denoiser (or report the cached one).
    PretrainTeacher,
    /// Run the full distillation experiment.
    Distill,
    /// Evaluate a stored generator checkpoint on the held-out data.
    Eval {
        /// Generator checkpoint to load.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Feed the null label 0 to every sample regardless of class.
        #[arg(long)]
        null_condition: bool,
    },
    /// Finite-difference gradient check of every configured network.
    Gradcheck {
        /// Maximum allowed relative error.
        #[arg(long, default_value_t = 1e-4)]
        tolerance: f64,
    },
    /// Closed-form verification of the distribution-matching gradient
    /// estimator: an exact fixed-coefficient value plus cosine agreement
    /// with finite differences across the whole schedule.
    VerifyEstimator {
        /// Monte-Carlo sample count.
        #[arg(long, default_value_t = 100_000)]
        samples: usize,
    },
    /// Apply the configured degradation chain to one PGM image.
    Degrade {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        output: PathBuf,
    },
    /// Generate a procedural patch corpus under the configured degradation.
    MakeCorpus {
        /// Directory to create the corpus in.
        #[arg(long)]
        dir: PathBuf,
        #[arg(long, default_value_t = 256)]
        count: usize,
        #[arg(long, default_value_t = 16)]
        side: usize,
        #[arg(long, default_value_t = 2)]
        classes: usize,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::PretrainTeacher => "pretrain-teacher",
            Command::Distill => "distill",
            Command::Eval { .. } => "eval",
            Command::Gradcheck { .. } => "gradcheck",
            Command::VerifyEstimator { .. } => "verify-estimator",
            Command::Degrade { .. } => "degrade",
            Command::MakeCorpus { .. } => "make-corpus",
        }
    }
}

/// The file every subcommand leaves behind.
#[derive(Debug, Serialize)]
struct ResultFile<'a> {
    subcommand: &'a str,
    config_hash: &'a str,
    seed: u64,
    status: &'a str,
    payload: serde_json::Value,
}

#[derive(Debug)]
enum CliError {
    /// The invocation or configuration was unusable; nothing ran. Exit 2.
    Config(String),
    /// The operation ran and failed. Exit 1.
    Failed(String),
}

impl From<TrainerError> for CliError {
    fn from(e: TrainerError) -> Self {
        match e {
            TrainerError::Config(_) | TrainerError::Corpus(_) => CliError::Config(e.to_string()),
            other => CliError::Failed(other.to_string()),
        }
    }
}

/// Entry point used by the binary. Parses arguments, runs, writes
/// `result.json`, and maps the outcome to an exit code.
pub fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    run(&cli)
}

fn run(cli: &Cli) -> ExitCode {
    let mut cfg = match &cli.config {
        Some(path) => match ExperimentConfig::load(path) {
            Ok(cfg) => cfg,
            Err(e) => {
                eprintln!("error: {e}");
                return ExitCode::from(2);
            }
        },
        None => ExperimentConfig::builtin(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    if let Some(out) = &cli.out {
        cfg.out_dir = out.clone();
    }
    if let Err(e) = cfg.validate() {
        eprintln!("error: {e}");
        return ExitCode::from(2);
    }
    let config_hash = cfg.hash16();

    let (status, payload) = match dispatch(&cli.command, &cfg) {
        Ok((pass, payload)) => (if pass { "pass" } else { "fail" }, payload),
        Err(CliError::Config(msg)) => {
            eprintln!("error: {msg}");
            return ExitCode::from(2);
        }
        Err(CliError::Failed(msg)) => {
            eprintln!("error: {msg}");
            ("fail", json!({ "error": msg }))
        }
    };

    let result = ResultFile {
        subcommand: cli.command.name(),
        config_hash: &config_hash,
        seed: cfg.seed,
        status,
        payload,
    };
    let path = cfg.out_dir.join("result.json");
    if let Err(e) = std::fs::create_dir_all(&cfg.out_dir).and_then(|()| {
        let json = serde_json::to_string_pretty(&result).expect("result serializes");
        std::fs::write(&path, json + "\n")
    }) {
        eprintln!("error: cannot write {}: {e}", path.display());
        return ExitCode::from(2);
    }
    println!("{}: {status} ({})", cli.command.name(), path.display());
    ExitCode::from(if status == "pass" { 0 } else { 1 })
}

fn dispatch(
    cmd: &Command,
    cfg: &ExperimentConfig,
) -> Result<(bool, serde_json::Value), CliError> {
    match cmd {
        Command::PretrainTeacher => {
            let resolved = resolve(cfg)?;
            let (_, report, path) = ensure_teacher(cfg, &resolved, &cfg.out_dir)?;
            let key = teacher_cache_key(cfg, &resolved);
            Ok((true, json!({ "checkpoint": path, "cache_key": key, "report": report })))
        }
        Command::Distill => {
            let summary = run_experiment(cfg)?;
            Ok((true, serde_json::to_value(&summary).expect("summary serializes")))
        }
        Command::Eval { checkpoint, null_condition } => {
            let report = eval_checkpoint(cfg, checkpoint, *null_condition)?;
            Ok((true, serde_json::to_value(&report).expect("report serializes")))
        }
        Command::Gradcheck { tolerance } => {
            if !tolerance.is_finite() || *tolerance <= 0.0 {
                return Err(CliError::Config("tolerance must be positive".into()));
            }
            let resolved = resolve(cfg)?;
            let mid = resolved.schedule.num_steps().div_ceil(2);
            let nets = [
                ("generator", &resolved.gen_spec, 0u64, 0usize),
                ("denoiser", &resolved.den_spec, 1, mid),
            ];
            let mut checks = Vec::new();
            let mut all_pass = true;
            for (name, spec, stream, t) in nets {
                let params = init_params(spec, &mut indexed_rng(cfg.seed, Stream::Init, stream));
                let mut probe = stream_rng(cfg.seed, Stream::Probe);
                let x: Vec<f64> = (0..spec.input_dim)
                    .map(|_| probe.sample::<f64, _>(StandardNormal))
                    .collect();
                let y = spec.num_labels - 1;
                let report: GradCheckReport =
                    gradcheck(spec, &params, &x, t, y, *tolerance, cfg.seed)
                        .map_err(|e| CliError::Failed(e.to_string()))?;
                all_pass &= report.pass;
                checks.push(json!({ "net": name, "report": report }));
            }
            Ok((all_pass, json!({ "tolerance": tolerance, "checks": checks })))
        }
        Command::VerifyEstimator { samples } => {
            if *samples == 0 {
                return Err(CliError::Config("samples must be >= 1".into()));
            }
            let report = verify::run(*samples, cfg.seed)
                .map_err(|e| CliError::Failed(e.to_string()))?;
            let pass = report.pass;
            Ok((pass, serde_json::to_value(&report).expect("report serializes")))
        }
        Command::Degrade { input, output } => {
            let deg = cfg.degradation.clone().ok_or_else(|| {
                CliError::Config("the degrade subcommand needs a [degradation] table".into())
            })?;
            deg.validate().map_err(|e| CliError::Config(e.to_string()))?;
            let patch = Patch::read_pgm(input).map_err(|e| CliError::Config(e.to_string()))?;
            let out = degrade(&patch, &deg).map_err(|e| CliError::Failed(e.to_string()))?;
            out.write_pgm(output).map_err(|e| CliError::Failed(e.to_string()))?;
            Ok((
                true,
                json!({
                    "input": input,
                    "output": output,
                    "in_size": [patch.height(), patch.width()],
                    "out_size": [out.height(), out.width()],
                }),
            ))
        }
        Command::MakeCorpus { dir, count, side, classes } => {
            let degradation = cfg.degradation.clone().ok_or_else(|| {
                CliError::Config("the make-corpus subcommand needs a [degradation] table".into())
            })?;
            let params = CorpusParams {
                count: *count,
                side: *side,
                num_classes: *classes,
                seed: cfg.seed,
                degradation,
            };
            let manifest = make_corpus(dir, &params)?;
            Ok((
                true,
                json!({
                    "dir": dir,
                    "entries": manifest.entries.len(),
                    "side": manifest.side,
                    "num_classes": manifest.num_classes,
                }),
            ))
        }
    }
}
