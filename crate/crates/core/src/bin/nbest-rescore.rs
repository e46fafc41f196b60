use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use nbest_rescore::pipeline::{self, ExperimentConfig, PipelineError};

/// N-best rescoring experiments: synthetic data, LM training, fusion tuning
/// and evaluation.
#[derive(Parser)]
#[command(version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Experiment config (TOML); defaults apply to anything it leaves out.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the config's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "runs/default")]
    out_dir: PathBuf,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Sample queries and simulate on-device N-best lists.
    Generate,
    /// Sweep n-gram order and pruning threshold on validation.
    SweepNgram,
    /// Train the sub-word models and neural LMs.
    TrainNnlm,
    /// Score every hypothesis with every server-side LM.
    Score,
    /// Tune single-feature and fusion weights on validation.
    Tune,
    /// Apply the tuned weights to validation and test.
    Rescore,
    /// Write WER tables and the significance test.
    Evaluate,
    /// Run all stages in order.
    Run,
    /// Print the resolved config as TOML.
    Config,
}

fn run(cli: &Cli) -> Result<(), PipelineError> {
    let mut cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    let out = cli.out_dir.as_path();
    match cli.command {
        Command::Generate => pipeline::cmd_generate(&cfg, out).map(drop),
        Command::SweepNgram => pipeline::cmd_sweep_ngram(&cfg, out).map(drop),
        Command::TrainNnlm => pipeline::cmd_train_nnlm(&cfg, out).map(drop),
        Command::Score => pipeline::cmd_score(&cfg, out).map(drop),
        Command::Tune => pipeline::cmd_tune(&cfg, out).map(drop),
        Command::Rescore => pipeline::cmd_rescore(&cfg, out).map(drop),
        Command::Evaluate => {
            pipeline::cmd_evaluate(&cfg, out)?;
            print!("{}", std::fs::read_to_string(out.join("evaluate/report.txt"))?);
            Ok(())
        }
        Command::Run => {
            pipeline::cmd_run(&cfg, out)?;
            print!("{}", std::fs::read_to_string(out.join("evaluate/report.txt"))?);
            Ok(())
        }
        Command::Config => {
            cfg.validate()?;
            print!("{}", cfg.to_toml());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Help and version requests are not errors.
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
