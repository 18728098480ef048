//! Batch pipeline for chain-of-thought multi-organ toxicity prediction:
//! `prepare` builds the context store, `predict` prompts a chat model,
//! `evaluate` scores predictions and `gsea-context` derives context from
//! ranked gene signatures.

pub mod commands;
pub mod config;
pub mod env;
pub mod error;
pub mod pipeline;
pub mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cotox_core::prompt::{PromptStrategy, StructureFormat};

use crate::config::PipelineConfig;
use crate::env::Env;
use crate::error::{CliError, CliResult};

#[derive(Debug, Parser)]
#[command(name = "cotox", version, about = "Chain-of-thought multi-organ toxicity prediction pipeline")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build contexts, split the data set, filter contexts, resolve structures.
    Prepare(CommonArgs),
    /// Prompt the model for every test compound.
    Predict(PredictArgs),
    /// Score one or more predictions files and write report.md.
    Evaluate(EvaluateArgs),
    /// Derive context for compounds from ranked gene signatures.
    GseaContext(CommonArgs),
}

#[derive(Debug, Args)]
pub struct CommonArgs {
    /// Pipeline configuration (TOML).
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides run.strategy.
    #[arg(long)]
    pub strategy: Option<PromptStrategy>,
    /// Overrides run.format.
    #[arg(long)]
    pub format: Option<StructureFormat>,
    /// Overrides the output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Run directory name; defaults to a timestamp plus the method name.
    #[arg(long)]
    pub run_id: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub common: CommonArgs,
    /// Predictions files (exchange JSONL).
    #[arg(required = true)]
    pub predictions: Vec<PathBuf>,
}

/// Loads the configuration and applies command-line overrides.
pub fn load_config(args: &CommonArgs) -> CliResult<PipelineConfig> {
    let mut cfg = PipelineConfig::load(&args.config)?;
    if let Some(s) = args.strategy {
        cfg.run.strategy = s;
    }
    if let Some(f) = args.format {
        cfg.run.format = f;
    }
    cfg.run
        .strategy
        .check_format(cfg.run.format)
        .map_err(|e| CliError::config(e.to_string()))?;
    Ok(cfg)
}

/// Runs one command and returns the summary printed on success.
pub fn run(cli: &Cli, env: &Env) -> CliResult<String> {
    match &cli.command {
        Command::Prepare(args) => {
            let cfg = load_config(args)?;
            Ok(commands::cmd_prepare(&cfg, env)?.to_string())
        }
        Command::Predict(args) => {
            let cfg = load_config(&args.common)?;
            let out = pipeline::output_dir(&cfg, args.common.out.as_ref());
            Ok(commands::cmd_predict(&cfg, env, out, args.run_id.clone())?.to_string())
        }
        Command::Evaluate(args) => {
            let cfg = load_config(&args.common)?;
            Ok(commands::cmd_evaluate(&cfg, &args.predictions, args.common.out.as_deref())?.to_string())
        }
        Command::GseaContext(args) => {
            let cfg = load_config(args)?;
            let out = pipeline::output_dir(&cfg, args.out.as_ref());
            Ok(commands::cmd_gsea_context(&cfg, env, out)?.to_string())
        }
    }
}

/// Runs the command line and maps the outcome to the process exit code:
/// 0 success, 1 config error, 2 data error, 3 provider error.
pub fn main_with(args: impl IntoIterator<Item = std::ffi::OsString>, env: &Env) -> i32 {
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(&cli, env) {
        Ok(summary) => {
            println!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
