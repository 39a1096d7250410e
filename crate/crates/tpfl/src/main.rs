use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use tpfl::config::ExperimentConfig;
use tpfl::data::{generate_synthetic, save_dataset, Split};
use tpfl::error::Result;
use tpfl::harness::{mean_std, run_ablation, run_experiment};

#[derive(Parser)]
#[command(
    name = "tpfl",
    version,
    about = "Simulator of federated prompt learning over frozen dual encoders"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the experiment described by a config file across all its seeds.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the config's seed list with this single seed.
        #[arg(long)]
        seed_override: Option<u64>,
        /// Replace the config's output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Sweep one preset ablation axis (infonce, shots, or clients).
    Ablate {
        #[arg(long)]
        axis: String,
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Generate the config's synthetic train/test splits and save them.
    GenData {
        #[arg(long)]
        config: PathBuf,
        /// Directory for the splits (default: "<out_dir>/data").
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Check a config file and print the fully resolved settings.
    Validate {
        #[arg(long)]
        config: PathBuf,
    },
}

fn main() -> ExitCode {
    env_logger::init();
    let cli = Cli::parse();
    match dispatch(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // One machine-readable line on stderr.
            eprintln!(
                "{}",
                serde_json::json!({ "error": e.kind(), "message": e.to_string() })
            );
            ExitCode::FAILURE
        }
    }
}

fn load(config: &PathBuf) -> Result<ExperimentConfig> {
    let cfg = ExperimentConfig::load(config)?;
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Run {
            config,
            seed_override,
            out,
        } => {
            let mut cfg = load(&config)?;
            if let Some(seed) = seed_override {
                cfg.seeds = vec![seed];
            }
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            let outcome = run_experiment(&cfg)?;
            let (acc, acc_sd) = mean_std(&outcome.final_accuracy_values());
            let (f1, f1_sd) = mean_std(&outcome.final_macro_f1_values());
            println!(
                "{}: {} seeds, {} failed | final accuracy {acc:.4} ± {acc_sd:.4} | final macro-F1 {f1:.4} ± {f1_sd:.4}",
                cfg.variant.name(),
                cfg.seeds.len(),
                outcome.failed_seeds.len(),
            );
            println!("artifacts in {}", outcome.out_dir.display());
            Ok(())
        }
        Cmd::Ablate { axis, config, out } => {
            let mut cfg = load(&config)?;
            if let Some(dir) = out {
                cfg.out_dir = dir.to_string_lossy().into_owned();
            }
            let points = run_ablation(&axis, &cfg)?;
            for p in &points {
                let (m, sd) = mean_std(&p.final_accuracy);
                println!("{axis} {}: accuracy {m:.4} ± {sd:.4}", p.label);
            }
            println!("plot data in {}/{axis}", cfg.out_dir);
            Ok(())
        }
        Cmd::GenData { config, out } => {
            let cfg = load(&config)?;
            let base = out.unwrap_or_else(|| PathBuf::from(&cfg.out_dir).join("data"));
            let seed = cfg.seeds[0];
            let train = generate_synthetic(
                seed,
                cfg.class_count,
                cfg.train_per_class_resolved(),
                cfg.height,
                cfg.width,
                cfg.channels,
                cfg.noise_sigma,
                Split::Train,
            )?;
            let test = generate_synthetic(
                seed,
                cfg.class_count,
                cfg.test_per_class,
                cfg.height,
                cfg.width,
                cfg.channels,
                cfg.noise_sigma,
                Split::Test,
            )?;
            save_dataset(&train, &base.join("train"))?;
            save_dataset(&test, &base.join("test"))?;
            println!(
                "wrote {} train and {} test samples to {}",
                train.len(),
                test.len(),
                base.display()
            );
            Ok(())
        }
        Cmd::Validate { config } => {
            let cfg = load(&config)?;
            println!("ok");
            print!("{}", cfg.serialize());
            Ok(())
        }
    }
}
