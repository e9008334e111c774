use std::path::PathBuf;
use std::process::ExitCode;

use bayesal::datasets::generate_synthetic;
use bayesal::scoring::Strategy;
use bayesal::studies::{run_study, validate_outputs, StudyConfig, StudyKind};
use clap::{Parser, Subcommand};

#[derive(Parser)]
#[command(name = "bayesal", version, about = "Pool-based active learning with Bayesian MLPs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic dataset described by a study config.
    GenerateData {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Overrides the generator seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override a config key, e.g. `--set generator.items=2000`.
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Run a study and write its CSVs, checkpoints and manifest.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        study: Option<StudyKind>,
        /// Restrict to these strategies (repeatable).
        #[arg(long)]
        strategy: Vec<Strategy>,
        /// Replace the seed roster (repeatable).
        #[arg(long)]
        seed: Vec<u64>,
        #[arg(long = "set", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Check every CSV below a directory against the declared schemas.
    ValidateOutputs { dir: PathBuf },
}

fn run(cli: Cli) -> bayesal::Result<()> {
    match cli.command {
        Command::GenerateData { config, out, seed, mut overrides } => {
            if let Some(s) = seed {
                overrides.push(format!("generator.seed={s}"));
            }
            let cfg = StudyConfig::load(&config, &overrides)?;
            let dataset = generate_synthetic(&cfg.generator)?;
            dataset.save(&out)?;
            println!("wrote {} items to {}", dataset.len(), out.display());
        }
        Command::Run { config, out, study, strategy, seed, mut overrides } => {
            if let Some(kind) = study {
                overrides.push(format!("study=\"{}\"", kind.as_str()));
            }
            if !strategy.is_empty() {
                let list: Vec<String> = strategy.iter().map(|s| format!("\"{s}\"")).collect();
                overrides.push(format!("strategies=[{}]", list.join(",")));
            }
            if !seed.is_empty() {
                let list: Vec<String> = seed.iter().map(u64::to_string).collect();
                overrides.push(format!("seeds=[{}]", list.join(",")));
            }
            let cfg = StudyConfig::load(&config, &overrides)?;
            let manifest = run_study(&cfg, &out)?;
            println!("{} study: {} files in {}", cfg.study.as_str(), manifest.files.len() + 1, out.display());
        }
        Command::ValidateOutputs { dir } => {
            let n = validate_outputs(&dir)?;
            println!("{n} csv files valid");
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = e.to_string().replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
