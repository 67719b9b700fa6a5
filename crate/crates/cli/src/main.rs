//! `uacal`: the synthetic-world calibration workflow from the command line.
//!
//! Every command writes into a fresh run directory (see `--out` and
//! `UACAL_RUN_DIR`) and finishes by writing `manifest.json` with the SHA-256
//! of each artifact. Any config field can be set with a flag named after its
//! dotted path, for example `--finetune.learning_rate 3e-4`.

mod commands;
mod config;
mod error;
mod plot;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Result;
use clap::{Parser, Subcommand};
use uacal::losses::LossKind;

use commands::{Ctx, SplitChoice};
use error::CliError;
use run::RunDir;

#[derive(Debug, Parser)]
#[command(name = "uacal", version, about = "Uncertainty-aware fine-tuning experiments on a synthetic QA world")]
struct Cli {
    /// TOML run configuration; omitted fields keep their defaults.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Seed for model init, training, dropout and sampling (not the world).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Sampling temperature (default 0.3).
    #[arg(long, global = true)]
    temperature: Option<f64>,
    /// Samples per prompt (default 5).
    #[arg(long, global = true)]
    samples: Option<usize>,
    /// Fine-tuning objective.
    #[arg(long, global = true, value_parser = parse_loss)]
    loss: Option<LossKind>,
    /// Decode on a single thread. Results are identical either way.
    #[arg(long, global = true)]
    deterministic: bool,
    /// Exact run directory instead of a timestamped one.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    s.parse().map_err(|e: uacal::Error| e.to_string())
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic world.
    Genworld,
    /// Train a base model on the pretraining split.
    Pretrain {
        /// World JSONL; generated from the config when omitted.
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Train LoRA adapters on the fine-tuning split.
    Finetune {
        #[arg(long)]
        base: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Greedy answer plus sampled answers for every prompt of a split.
    Generate {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "test")]
        split: SplitChoice,
    },
    /// Score generations and build the calibration report.
    Evaluate {
        #[arg(long)]
        generations: PathBuf,
        #[arg(long)]
        world: Option<PathBuf>,
    },
    /// Per-metric differences between two reports (second minus first).
    Compare { a: PathBuf, b: PathBuf },
    /// Markdown and SVG figures from evaluation records and training logs.
    Report {
        /// Evaluation records (`eval-*.jsonl`), repeatable.
        #[arg(long = "eval")]
        evals: Vec<PathBuf>,
        /// Training logs (`trainlog-*.csv`), repeatable.
        #[arg(long = "log")]
        logs: Vec<PathBuf>,
    },
    /// The whole comparison: pretrain, fine-tune with clm and ua_clm, decode,
    /// evaluate, compare and report.
    PaperMirror,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Genworld => "genworld",
            Command::Pretrain { .. } => "pretrain",
            Command::Finetune { .. } => "finetune",
            Command::Generate { .. } => "generate",
            Command::Evaluate { .. } => "evaluate",
            Command::Compare { .. } => "compare",
            Command::Report { .. } => "report",
            Command::PaperMirror => "paper-mirror",
        }
    }
}

fn build_config(cli: &Cli, overrides: &[(String, String)]) -> Result<uacal::experiment::RunConfig> {
    let mut cfg = config::load(cli.config.as_deref())?;
    for (key, value) in overrides {
        cfg = config::apply_override(&cfg, key, value)?;
    }
    if let Some(seed) = cli.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(t) = cli.temperature {
        cfg.generate.temperature = t;
    }
    if let Some(m) = cli.samples {
        cfg.generate.num_samples = m;
    }
    if let Some(kind) = cli.loss {
        cfg.finetune.loss_kind = kind;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn run(args: Vec<String>) -> Result<()> {
    let (args, overrides) = config::extract_overrides(args)?;
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            print!("{e}");
            return Ok(());
        }
        Err(e) => {
            let text = e.to_string();
            let first = text.lines().next().unwrap_or("invalid arguments");
            return Err(CliError::usage(first.trim_start_matches("error: ").to_string()).into());
        }
    };
    let config = build_config(&cli, &overrides)?;
    let seed = config.model.seed;
    let name = cli.command.name();
    let path = cli.out.clone().unwrap_or_else(|| run::default_path(name, seed));
    let mut dir = RunDir::create(path)?;
    dir.write("config.toml", config::to_toml(&config)?)?;
    let ctx = Ctx { config, deterministic: cli.deterministic };
    match &cli.command {
        Command::Genworld => {
            commands::genworld(&ctx, &mut dir)?;
        }
        Command::Pretrain { world } => {
            commands::pretrain(&ctx, &mut dir, world.as_deref())?;
        }
        Command::Finetune { base, world } => {
            commands::finetune(&ctx, &mut dir, base, world.as_deref())?;
        }
        Command::Generate { checkpoint, world, split } => {
            commands::generate(&ctx, &mut dir, checkpoint, world.as_deref(), *split)?;
        }
        Command::Evaluate { generations, world } => {
            commands::evaluate(&ctx, &mut dir, generations, world.as_deref())?;
        }
        Command::Compare { a, b } => {
            commands::compare(&mut dir, a, b)?;
        }
        Command::Report { evals, logs } => {
            commands::report(&mut dir, evals, logs)?;
        }
        Command::PaperMirror => commands::paper_mirror(&ctx, &mut dir)?,
    }
    let out = dir.path().to_path_buf();
    let manifest = dir.finish(name, seed, cli.deterministic)?;
    println!("{} artifacts in {}", manifest.artifacts.len(), out.display());
    Ok(())
}

fn main() -> ExitCode {
    match run(std::env::args().collect()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error::render(&err));
            let usage = error::code_of(&err) == "usage";
            ExitCode::from(if usage { 2 } else { 1 })
        }
    }
}
