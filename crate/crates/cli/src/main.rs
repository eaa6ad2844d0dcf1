mod commands;
mod config;
mod run;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use xlst_core::tensor::Real;

use config::RunConfig;
use run::RunDir;

/// Default parent of output directories when `--out` is not given.
pub const OUT_ROOT_ENV: &str = "XLST_OUT_ROOT";

#[derive(Parser)]
#[command(
    name = "xlst",
    version,
    about = "Cross-lingual self-training on synthetic speech corpora"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// TOML run configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Checkpoint to start from (pretrain-xlst, finetune) or model to score (eval).
    #[arg(long, global = true)]
    init: Option<PathBuf>,
    /// Checkpoint of an interrupted run of the same command and config.
    #[arg(long, global = true)]
    resume: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory; defaults to `$XLST_OUT_ROOT/<command>` or `runs/<command>`.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Overrides `precision` from the config.
    #[arg(long, global = true, value_parser = ["32", "64"])]
    precision: Option<String>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate a synthetic language family and write its corpora.
    SynthData,
    /// Train the supervised target producer on annotated data.
    PretrainSup,
    /// Self-train on un-annotated data against a moving-average target.
    PretrainXlst,
    /// Fine-tune with CTC per target language and report PER.
    Finetune,
    /// Score a fine-tuned model on a test corpus.
    Eval,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::SynthData => "synth-data",
            Command::PretrainSup => "pretrain-sup",
            Command::PretrainXlst => "pretrain-xlst",
            Command::Finetune => "finetune",
            Command::Eval => "eval",
        }
    }
}

fn dispatch<T: Real>(cli: &Cli, config: &RunConfig, out: &RunDir) -> Result<()> {
    let init = cli.init.as_deref();
    let resume = cli.resume.as_deref();
    if resume.is_some() && !matches!(cli.command, Command::PretrainSup | Command::PretrainXlst) {
        anyhow::bail!("--resume applies to pretrain-sup and pretrain-xlst only");
    }
    match cli.command {
        Command::SynthData => commands::synth_data(config, out),
        Command::PretrainSup => commands::pretrain_sup::<T>(config, out, resume),
        Command::PretrainXlst => commands::pretrain_xlst::<T>(config, out, init, resume),
        Command::Finetune => commands::finetune::<T>(config, out, init),
        Command::Eval => commands::eval::<T>(config, out, init),
    }
}

fn output_dir(cli: &Cli) -> PathBuf {
    cli.out.clone().unwrap_or_else(|| {
        let root =
            std::env::var_os(OUT_ROOT_ENV).map_or_else(|| PathBuf::from("runs"), PathBuf::from);
        root.join(cli.command.name())
    })
}

fn run(cli: &Cli) -> Result<()> {
    let mut config = RunConfig::load(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        config.seed = seed;
    }
    if let Some(p) = &cli.precision {
        config.precision = p.parse()?;
    }
    config.resolve()?;
    let out = RunDir::acquire(Path::new(&output_dir(cli)))?;
    out.write_config(&config)?;
    match config.precision {
        64 => dispatch::<f64>(cli, &config, &out),
        _ => dispatch::<f32>(cli, &config, &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
