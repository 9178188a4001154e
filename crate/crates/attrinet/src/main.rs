//! Thin argument-parsing shell over [`attrinet::cli`].

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use attrinet::cli::{self, CliArgs, Command};

#[derive(Parser)]
#[command(
    name = "attrinet",
    version,
    about = "Transparent multi-label classification through class-specific counterfactual attribution maps"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
}

#[derive(Args)]
struct Common {
    /// Run configuration file (flat key = value, supports `include`)
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trained checkpoint
    #[arg(long)]
    ckpt: Option<PathBuf>,
    /// Output directory (created if missing)
    #[arg(long)]
    out: PathBuf,
    /// Override the config's seed keys (`seed`, `synth.seed`, `eval.seed`)
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Sub {
    /// Generate and save a synthetic shape dataset
    Synth(Common),
    /// Train a model and write checkpoint, metrics, and thresholds
    Train(Common),
    /// Evaluate a checkpoint on the config's test fold
    Eval(Common),
    /// Export per-class explanation panels and probabilities for one image
    Explain(Common),
    /// Run the class-sensitivity grid benchmark
    Sensitivity(Common),
    /// Train the four loss configurations and compare them
    Ablate(Common),
    /// Export per-class center and head-weight images
    ExportGlobal(Common),
}

fn main() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let (command, common) = match cli.command {
        Sub::Synth(c) => (Command::Synth, c),
        Sub::Train(c) => (Command::Train, c),
        Sub::Eval(c) => (Command::Eval, c),
        Sub::Explain(c) => (Command::Explain, c),
        Sub::Sensitivity(c) => (Command::Sensitivity, c),
        Sub::Ablate(c) => (Command::Ablate, c),
        Sub::ExportGlobal(c) => (Command::ExportGlobal, c),
    };
    let args = CliArgs {
        command,
        config: common.config,
        ckpt: common.ckpt,
        out: common.out,
        seed: common.seed,
    };
    match cli::run(&args) {
        Ok(paths) => {
            for p in paths {
                println!("wrote {}", p.display());
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            std::process::exit(1);
        }
    }
}
