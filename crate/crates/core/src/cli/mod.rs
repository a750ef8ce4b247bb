//! Command-line pipeline: `gen-data`, `train`, `eval`, `report`, `inspect`.
//!
//! Exit codes: 0 success, 2 invalid input or configuration, 3 runtime
//! failure, 4 too many catalog objects skipped during data generation.

mod commands;
mod plot;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::eval::EvalConfig;
use crate::expert::GenerationConfig;
use crate::policy::{PolicyConfig, Variant};

pub use plot::trace_svg;

pub const EXIT_OK: u8 = 0;
pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;
pub const EXIT_SKIPPED: u8 = 4;

/// Environment variable holding the log filter.
pub const LOG_ENV: &str = "FORCEGRASP_LOG";

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Validation(String),
    #[error("{0}")]
    Runtime(String),
    #[error("{skipped} of {total} catalog objects skipped, above the {limit:.0}% limit")]
    SkippedObjects {
        skipped: usize,
        total: usize,
        limit: f64,
    },
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Validation(_) => EXIT_VALIDATION,
            CliError::Runtime(_) => EXIT_RUNTIME,
            CliError::SkippedObjects { .. } => EXIT_SKIPPED,
        }
    }
}

pub(crate) fn invalid(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Validation(format!("{context}: {e}"))
}

pub(crate) fn runtime(context: impl std::fmt::Display) -> impl FnOnce(String) -> CliError {
    move |e| CliError::Runtime(format!("{context}: {e}"))
}

#[derive(Debug, Parser)]
#[command(
    name = "forcegrasp",
    version,
    about = "Force-aware grasping: data, training, evaluation"
)]
pub struct Cli {
    /// JSON run configuration; command-line flags override it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for data generation and evaluation.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Output directory.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sample a training catalog and record expert demonstrations.
    GenData,
    /// Train a diffusion policy on a dataset.
    Train {
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long, value_parser = parse_variant)]
        variant: Variant,
    },
    /// Run the evaluation protocol for a policy checkpoint or the expert.
    Eval {
        #[arg(long, required_unless_present = "expert", conflicts_with = "expert")]
        checkpoint: Option<PathBuf>,
        /// Evaluate the adaptive expert with exact object parameters.
        #[arg(long)]
        expert: bool,
        /// Refuse the checkpoint unless it holds this variant.
        #[arg(long, value_parser = parse_variant)]
        variant: Option<Variant>,
        /// Refuse the checkpoint unless it was trained on this dataset.
        #[arg(long)]
        dataset: Option<PathBuf>,
    },
    /// Tables, comparison and plots from one or more evaluation reports.
    Report {
        #[arg(long = "eval", required = true)]
        evals: Vec<PathBuf>,
    },
    /// Summarize a dataset, checkpoint, manifest or evaluation report.
    Inspect { path: PathBuf },
}

fn parse_variant(s: &str) -> Result<Variant, String> {
    s.parse()
        .map_err(|e: crate::policy::PolicyError| e.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub jobs: Option<usize>,
    pub out: PathBuf,
    pub catalog_size: usize,
    /// Fraction of episodes kept for training.
    pub split_ratio: f64,
    /// Largest tolerated share of skipped catalog objects.
    pub max_skipped_fraction: f64,
    pub generation: GenerationConfig,
    pub policy: PolicyConfig,
    pub eval: EvalConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            jobs: None,
            out: PathBuf::from("out"),
            catalog_size: 30,
            split_ratio: 0.9,
            max_skipped_fraction: 0.2,
            generation: GenerationConfig::default(),
            policy: PolicyConfig::default(),
            eval: EvalConfig::default(),
        }
    }
}

impl RunConfig {
    /// Load the config file (if any) and apply flag overrides.
    pub fn resolve(cli: &Cli) -> Result<RunConfig, CliError> {
        let mut cfg = match &cli.config {
            Some(path) => {
                let text =
                    fs::read_to_string(path).map_err(|e| invalid(path.display())(e.to_string()))?;
                serde_json::from_str(&text).map_err(|e| invalid(path.display())(e.to_string()))?
            }
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        if let Some(jobs) = cli.jobs {
            cfg.jobs = Some(jobs);
        }
        if let Some(out) = &cli.out {
            cfg.out = out.clone();
        }
        cfg.generation.seed = cfg.seed;
        cfg.eval.seed = cfg.seed;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Validation(m));
        if self.jobs == Some(0) {
            return bad("--jobs must be at least 1".into());
        }
        if self.catalog_size == 0 {
            return bad("catalog_size must be positive".into());
        }
        if !(self.split_ratio > 0.0 && self.split_ratio <= 1.0) {
            return bad(format!("split_ratio {} outside (0, 1]", self.split_ratio));
        }
        self.generation
            .sim
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.policy
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        self.eval
            .validate()
            .map_err(|e| CliError::Validation(e.to_string()))?;
        Ok(())
    }

    /// Run `f` on a worker pool capped at `jobs` threads.
    pub fn in_pool<T: Send>(&self, f: impl FnOnce() -> T + Send) -> Result<T, CliError> {
        let mut builder = rayon::ThreadPoolBuilder::new();
        if let Some(n) = self.jobs {
            builder = builder.num_threads(n);
        }
        let pool = builder
            .build()
            .map_err(|e| CliError::Runtime(format!("thread pool: {e}")))?;
        Ok(pool.install(f))
    }
}

/// Create the output directory if needed.
pub(crate) fn prepare_out(dir: &Path) -> Result<(), CliError> {
    if !dir.exists() {
        fs::create_dir_all(dir).map_err(|e| runtime(dir.display())(e.to_string()))?;
        log::info!("created output directory {}", dir.display());
    }
    Ok(())
}

/// Write through a temporary file in the same directory, then rename, so
/// readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    let fail = |e: String| CliError::Runtime(format!("writing {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| fail(e.to_string()))?;
    tmp.write_all(bytes).map_err(|e| fail(e.to_string()))?;
    tmp.persist(path).map_err(|e| fail(e.to_string()))?;
    Ok(())
}

pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| CliError::Runtime(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli)?;
    match &cli.command {
        Command::GenData => commands::gen_data(&cfg),
        Command::Train { dataset, variant } => commands::train(&cfg, dataset, *variant),
        Command::Eval {
            checkpoint,
            expert,
            variant,
            dataset,
        } => commands::eval(
            &cfg,
            checkpoint.as_deref(),
            *expert,
            *variant,
            dataset.as_deref(),
        ),
        Command::Report { evals } => commands::report(&cfg, evals),
        Command::Inspect { path } => commands::inspect(path),
    }
}

/// Entry point for the binary: parse arguments, set up logging, run, and
/// map the result to an exit code.
pub fn main_with_args<I, T>(args: I) -> u8
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                EXIT_VALIDATION
            } else {
                EXIT_OK
            };
        }
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info"))
        .format_timestamp(None)
        .try_init();
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(
            &path,
            r#"{"seed": 5, "catalog_size": 12, "eval": {"trials_per_object": 3}}"#,
        )
        .unwrap();
        let cli = Cli::try_parse_from([
            "forcegrasp",
            "--config",
            path.to_str().unwrap(),
            "--seed",
            "9",
            "gen-data",
        ])
        .unwrap();
        let cfg = RunConfig::resolve(&cli).unwrap();
        assert_eq!(cfg.seed, 9);
        assert_eq!(cfg.generation.seed, 9);
        assert_eq!(cfg.eval.seed, 9);
        assert_eq!(cfg.catalog_size, 12);
        assert_eq!(cfg.eval.trials_per_object, 3);
        assert_eq!(cfg.eval.ticks, 15);
    }

    #[test]
    fn unknown_config_keys_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.json");
        fs::write(&path, r#"{"sede": 5}"#).unwrap();
        let cli =
            Cli::try_parse_from(["forcegrasp", "--config", path.to_str().unwrap(), "gen-data"])
                .unwrap();
        assert_eq!(
            RunConfig::resolve(&cli).unwrap_err().exit_code(),
            EXIT_VALIDATION
        );
    }

    #[test]
    fn variant_flag_accepts_both_spellings() {
        for v in ["position-only", "position_only"] {
            let cli =
                Cli::try_parse_from(["forcegrasp", "train", "--dataset", "x", "--variant", v])
                    .unwrap();
            assert!(matches!(
                cli.command,
                Command::Train {
                    variant: Variant::PositionOnly,
                    ..
                }
            ));
        }
        assert!(Cli::try_parse_from([
            "forcegrasp",
            "train",
            "--dataset",
            "x",
            "--variant",
            "grip"
        ])
        .is_err());
    }

    #[test]
    fn bad_usage_exits_with_validation_code() {
        assert_eq!(main_with_args(["forcegrasp", "eval"]), EXIT_VALIDATION);
    }
}
