use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use inpaint_cli::commands::{self, EvalSource};
use inpaint_cli::config::{RunConfig, KEYS};
use inpaint_cli::gradsuite::SuiteOptions;

/// Corrupted text image restoration: synthesis, training, inference and
/// evaluation. Log level comes from `RUST_LOG` (default `info`).
#[derive(Parser, Debug)]
#[command(name = "inpaint", version)]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Overrides one config key; repeatable.
    #[arg(long = "set", short = 's', value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Worker threads for per-record work (0 = one per core).
    #[arg(long, short = 'j', default_value_t = 0, global = true)]
    workers: usize,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Synthesize a dataset into `dataset_dir`.
    Synth,
    /// Corrode a directory of intact PNGs into a dataset at `dataset_dir`.
    Corrupt {
        #[arg(long)]
        input: PathBuf,
    },
    /// Train the structure prediction module.
    TrainSpm {
        /// Continue from the checkpoint in `run_dir`.
        #[arg(long)]
        resume: bool,
    },
    /// Train the reconstruction module.
    TrainRm {
        #[arg(long)]
        resume: bool,
    },
    /// Restore corrupted images with the trained modules.
    Infer {
        /// Dataset directory or directory of PNGs (default: `dataset_dir`).
        #[arg(long)]
        input: Option<PathBuf>,
        /// Output directory (default: `run_dir/infer`).
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score restored images against the dataset.
    Eval {
        /// Directory of `<id>.png` predictions (default: `run_dir/infer`).
        #[arg(long, conflicts_with = "corrupted")]
        pred: Option<PathBuf>,
        /// Score the corrupted inputs themselves (baseline row).
        #[arg(long)]
        corrupted: bool,
        /// `id<TAB>text` transcripts to use instead of the toy recognizer.
        #[arg(long)]
        transcripts: Option<PathBuf>,
        /// Report directory (default: `run_dir`).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every layer kind and both toy networks.
    Gradcheck {
        /// Seeds per layer kind.
        #[arg(long, default_value_t = 20)]
        seeds: u64,
        #[arg(long, default_value_t = 0)]
        base_seed: u64,
        /// Negate analytic gradients (negative control; must fail).
        #[arg(long, hide = true)]
        mutate: bool,
    },
    /// Print the resolved configuration, or every key with its description.
    Config {
        #[arg(long)]
        describe: bool,
    },
}

fn resolve_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for o in &common.overrides {
        cfg.apply_override(o).with_context(|| format!("override {o:?}"))?;
    }
    Ok(cfg)
}

fn run(cli: Cli) -> Result<()> {
    if cli.common.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cli.common.workers)
            .build_global()
            .context("configuring worker pool")?;
    }
    let cfg = resolve_config(&cli.common)?;
    match cli.command {
        Command::Synth => {
            commands::synth(&cfg)?;
        }
        Command::Corrupt { input } => {
            commands::corrupt(&cfg, &input)?;
        }
        Command::TrainSpm { resume } => {
            commands::train_spm_cmd(&cfg, resume)?;
        }
        Command::TrainRm { resume } => {
            commands::train_rm_cmd(&cfg, resume)?;
        }
        Command::Infer { input, output } => {
            let input = input.unwrap_or_else(|| cfg.dataset_dir.clone());
            let output = output.unwrap_or_else(|| cfg.run_dir.join("infer"));
            let summary = commands::infer(&cfg, &input, &output)?;
            if !summary.failed.is_empty() {
                bail!("{} of {} inputs failed", summary.failed.len(), summary.failed.len() + summary.written);
            }
        }
        Command::Eval { pred, corrupted, transcripts, out } => {
            let pred_dir = pred.unwrap_or_else(|| cfg.run_dir.join("infer"));
            let source = if corrupted { EvalSource::Corrupted } else { EvalSource::Dir(&pred_dir) };
            let out = out.unwrap_or_else(|| cfg.run_dir.clone());
            commands::eval_cmd(&cfg, source, transcripts.as_deref(), &out)?;
        }
        Command::Gradcheck { seeds, base_seed, mutate } => {
            let opts = SuiteOptions {
                layer_seeds: seeds,
                base_seed,
                mutate,
                ..SuiteOptions::default()
            };
            let report = commands::gradcheck_cmd(&opts)?;
            if !report.passed() {
                let names: Vec<&str> = report.failures().iter().map(|e| e.name.as_str()).collect();
                bail!("gradient check failed for {}", names.join(", "));
            }
        }
        Command::Config { describe } => {
            if describe {
                for k in KEYS {
                    println!("{:<18} {}", k.key, k.doc);
                }
            } else {
                print!("{cfg}");
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
