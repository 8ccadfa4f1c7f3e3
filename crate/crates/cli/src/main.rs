use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use cohort_cli::{run_pipeline, run_stage, PipelineConfig, Stage};

/// Synthetic-world lab for group-conditioned ad-creative preference
/// alignment: world generation, preference model, adaptive grouping,
/// pairwise reward model, policy alignment and evaluation.
#[derive(Parser, Debug)]
#[command(name = "cohort", version, about)]
struct Args {
    /// TOML configuration file; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,

    /// Override the global seed from the config.
    #[arg(long)]
    seed: Option<u64>,

    /// Output directory for artifacts.
    #[arg(long, default_value = "runs/default")]
    out: PathBuf,

    /// Run a single stage (gen-data, train-pref, cluster, train-grm,
    /// pretrain-policy, align, eval); the full pipeline when omitted.
    #[arg(long)]
    stage: Option<String>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args = Args::parse();

    let mut config = match &args.config {
        Some(path) => match PipelineConfig::load(path) {
            Ok(config) => config,
            Err(err) => {
                eprintln!("{err}");
                return ExitCode::from(err.exit_code() as u8);
            }
        },
        None => PipelineConfig::default(),
    };
    if let Some(seed) = args.seed {
        config.seed = seed;
    }

    let stage = match args.stage.as_deref().map(str::parse::<Stage>).transpose() {
        Ok(stage) => stage,
        Err(message) => {
            eprintln!("{message}");
            return ExitCode::from(3);
        }
    };

    let result = match stage {
        Some(stage) => run_stage(stage, &config, &args.out),
        None => run_pipeline(&config, &args.out).map(|report| {
            println!(
                "{}",
                serde_json::to_string_pretty(&report).expect("report serializes")
            );
        }),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
