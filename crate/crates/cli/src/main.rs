use std::path::PathBuf;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use mega_core::harness::{compare_module_usage, evaluate, run_training, Checkpoint, RunConfig};

#[derive(Parser)]
#[command(name = "mega", about = "Genotype-routed modular multi-task SAC", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train from scratch and write logs, checkpoint and report to --out.
    Train {
        /// JSON config; missing keys take defaults.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
        /// Override a config key, e.g. `--set baseline=fixed-16`. Repeatable.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Greedy success rate of a checkpoint, as CSV.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value_t = 10)]
        episodes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Per-task final-stage difference between two run directories.
    Compare {
        #[arg(long)]
        a: PathBuf,
        #[arg(long)]
        b: PathBuf,
    },
    /// Every genotype of a checkpoint, as CSV.
    DumpGenotypes {
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Print the default config as JSON.
    DefaultConfig,
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Train { config, seed, out, overrides } => {
            let mut cfg = match &config {
                Some(path) => RunConfig::load(path).with_context(|| format!("reading {}", path.display()))?,
                None => RunConfig::default(),
            };
            for o in &overrides {
                cfg.set(o)?;
            }
            if let Some(seed) = seed {
                cfg.seed = seed;
            }
            cfg.validate()?;
            std::fs::create_dir_all(&out)?;
            std::fs::write(out.join("config.json"), serde_json::to_string_pretty(&cfg)?)?;
            let report = run_training(cfg, Some(&out))?;
            print!("{}", report.eval.to_csv());
            println!("final stages: {:?}, modules: {}", report.final_stages, report.module_count);
        }
        Command::Eval { checkpoint, episodes, seed } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            let report = evaluate(&ck, episodes, seed)?;
            print!("{}", report.to_csv());
            println!("mean,,{},", report.mean_success());
        }
        Command::Compare { a, b } => print!("{}", compare_module_usage(&a, &b)?.to_csv()),
        Command::DumpGenotypes { checkpoint } => {
            let ck = Checkpoint::load(&checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
            print!("{}", ck.genotype_csv());
        }
        Command::DefaultConfig => println!("{}", serde_json::to_string_pretty(&RunConfig::default())?),
    }
    Ok(())
}
