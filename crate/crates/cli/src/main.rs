use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use docalign::pipeline::{self, RunConfig};
use docalign::Error;

#[derive(Parser, Debug)]
#[command(
    name = "docalign",
    version,
    about = "Zero-shot document classification by aligning images, class prompts and content"
)]
struct Cli {
    #[command(flatten)]
    common: Common,

    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML run configuration; defaults apply to missing keys
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output root; the run directory is created beneath it
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Split used by train and eval (e.g. A, S_I_3)
    #[arg(long, global = true)]
    split: Option<String>,

    /// Content channel used by train and eval
    #[arg(long, global = true)]
    channel: Option<String>,

    /// Treat a checkpoint trained on other seen classes as an error
    #[arg(long, global = true)]
    strict: bool,

    /// More log output (-v info, -vv debug)
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate the synthetic corpus
    Gen,
    /// Write sequential and incremental split files
    Splits {
        /// Incremental split indices, e.g. 2..8
        #[arg(long)]
        incremental: Option<String>,
        /// CSV of `class,accuracy` rows ranking the classes
        #[arg(long)]
        rank_csv: Option<PathBuf>,
    },
    /// Train a model on the seen classes of a split
    Train,
    /// Run ZSL and GZSL evaluation
    Eval {
        /// Evaluate this checkpoint instead of the run's own model
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Train and evaluate the ablation matrix
    Ablate,
}

fn load_config(common: &Common) -> anyhow::Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &common.out {
        cfg.out_dir = out.clone();
    }
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    if let Some(split) = &common.split {
        cfg.split = split.clone();
    }
    if let Some(channel) = &common.channel {
        cfg.channel = channel.clone();
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let mut cfg = load_config(&cli.common)?;
    match cli.command {
        Command::Gen => {
            let summary = pipeline::cmd_gen(cfg)?;
            println!("{}", summary.manifest.display());
            println!(
                "{} records, {} classes, channels: {}",
                summary.records,
                summary.classes,
                summary.channels.join(", ")
            );
        }
        Command::Splits { incremental, rank_csv } => {
            if incremental.is_some() {
                cfg.splits.incremental = incremental;
            }
            if rank_csv.is_some() {
                cfg.splits.rank_csv = rank_csv;
            }
            for path in pipeline::cmd_splits(cfg)? {
                println!("{}", path.display());
            }
        }
        Command::Train => {
            let trained = pipeline::cmd_train(cfg)?;
            println!("{}", trained.checkpoint.display());
            if let Some(report) = trained.report {
                let last = report.epoch_loss.last().copied().unwrap_or(f64::NAN);
                println!(
                    "{} epochs, final loss {last:.4}, tau_ic {:.4}, tau_tc {:.4}",
                    report.epoch_loss.len(),
                    report.tau_ic,
                    report.tau_tc
                );
            }
        }
        Command::Eval { checkpoint } => {
            let out = pipeline::cmd_eval(cfg, checkpoint.as_deref(), cli.common.strict).context("evaluation failed")?;
            println!("{}", out.dir.display());
            println!(
                "ZSL T1 {:.2} | GZSL u {:.2} s {:.2} H {:.2} (gamma {:.4})",
                out.zsl.t1.unwrap_or(f64::NAN),
                out.gzsl.u.unwrap_or(f64::NAN),
                out.gzsl.s.unwrap_or(f64::NAN),
                out.gzsl.h.unwrap_or(f64::NAN),
                out.gzsl.gamma.unwrap_or(f64::NAN)
            );
        }
        Command::Ablate => {
            let out = pipeline::cmd_ablate(cfg)?;
            println!("{}", out.tables.display());
            println!("{}", out.metrics.display());
            println!("{}", out.curve.display());
            println!("{} cell reports", out.cells.len());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.common.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            let validation = err
                .chain()
                .find_map(|e| e.downcast_ref::<Error>())
                .is_some_and(Error::is_validation);
            ExitCode::from(if validation { 2 } else { 1 })
        }
    }
}
