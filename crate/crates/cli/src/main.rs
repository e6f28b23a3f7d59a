use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use jigclu_core::commands::{self, AblationFactor};
use jigclu_core::config::ExperimentConfig;
use jigclu_core::evaluation::EvalMode;
use jigclu_core::Result;

#[derive(Parser)]
#[command(name = "jigclu", version, about = "Montage pretext pretraining and evaluation")]
struct Cli {
    #[command(flatten)]
    common: Common,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// TOML experiment config; defaults are used for anything it omits.
    #[arg(long, short, global = true)]
    config: Option<PathBuf>,
    /// Override a config value, e.g. `--set task.m=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
    /// Output directory (overrides io.out_dir and JIGCLU_OUT_DIR).
    #[arg(long, global = true)]
    out_dir: Option<PathBuf>,
    /// Log verbosity: -v info, -vv debug.
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
}

#[derive(Subcommand)]
enum Command {
    /// Pretext training with checkpoints and a metrics log.
    Pretrain {
        #[arg(long)]
        epochs: Option<usize>,
        /// Resume from a checkpoint manifest (`ckpt_epochNNNN.json`).
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Linear probe on frozen backbone features.
    LinearEval {
        /// Checkpoint manifest; a randomly initialised backbone when omitted.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune backbone and a fresh classifier.
    Finetune {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune on a class-balanced fraction of the labels.
    Semi {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Dump the first training batch as PNG files plus labels.json.
    InspectBatch {
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Time training steps for the montage, small-patch and scaled-up inputs.
    BenchInputFormat {
        #[arg(long, default_value_t = 5)]
        steps: usize,
    },
    /// One-factor sweeps with pretraining and linear evaluation per variant.
    Ablate {
        /// grid_size, overlap_ratio, aug_position or branches; all when omitted.
        #[arg(long = "factor")]
        factors: Vec<String>,
    },
    /// Print the resolved config and its hash.
    ShowConfig,
}

fn run(cli: Cli) -> Result<()> {
    let mut overrides = cli.common.overrides.clone();
    match &cli.command {
        Command::Pretrain { epochs: Some(e), .. } => overrides.push(format!("optim.epochs={e}")),
        Command::Semi { fraction: Some(f), .. } => overrides.push(format!("eval.label_fraction={f}")),
        _ => {}
    }
    let mut cfg = ExperimentConfig::load(cli.common.config.as_deref(), &overrides)?;
    if let Some(dir) = cli.common.out_dir {
        cfg.io.out_dir = dir;
    }
    match cli.command {
        Command::Pretrain { resume, .. } => {
            let s = commands::pretrain(&cfg, resume.as_deref())?;
            match &s.final_metrics {
                Some(m) => println!(
                    "pretrain: {} steps, total {:.4} (clu {:.4}, loc {:.4}), retrieval {:.3}, location {:.3}",
                    s.steps, m.total, m.l_clu, m.l_loc, m.retrieval_acc, m.loc_acc
                ),
                None => println!("pretrain: {} steps", s.steps),
            }
            println!("checkpoint {} (config {})", s.checkpoint.display(), s.config_hash);
        }
        Command::LinearEval { checkpoint } => {
            println!("{}", commands::evaluate(&cfg, EvalMode::Linear, checkpoint.as_deref())?.summary_line());
        }
        Command::Finetune { checkpoint } => {
            println!("{}", commands::evaluate(&cfg, EvalMode::Finetune, checkpoint.as_deref())?.summary_line());
        }
        Command::Semi { checkpoint, .. } => {
            println!("{}", commands::evaluate(&cfg, EvalMode::Semi, checkpoint.as_deref())?.summary_line());
        }
        Command::InspectBatch { seed } => {
            let d = commands::inspect_batch(&cfg, seed)?;
            println!(
                "wrote {} images and labels.json to {} (batch seed {})",
                d.files.len(),
                cfg.io.out_dir.display(),
                d.batch_seed
            );
        }
        Command::BenchInputFormat { steps } => {
            print!("{}", commands::bench_command(&cfg, steps)?.table());
        }
        Command::Ablate { factors } => {
            let factors = if factors.is_empty() {
                AblationFactor::ALL.to_vec()
            } else {
                factors.iter().map(|f| AblationFactor::parse(f)).collect::<Result<_>>()?
            };
            print!("{}", commands::ablate(&cfg, &factors)?.table());
        }
        Command::ShowConfig => {
            print!("{}", cfg.to_toml_string());
            println!("# config hash {}", cfg.hash());
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
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
