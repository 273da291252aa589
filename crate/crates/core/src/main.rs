//! asrlab CLI: drive the pipeline stage by stage or end to end.
//!
//! Exit codes: 0 success, 2 config error, 3 data/compatibility error,
//! 4 divergence.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use asrlab::eval_harness::{run_experiment, write_tokens_jsonl, ExperimentConfig, Stage};
use asrlab::Error;

#[derive(Parser)]
#[command(
    name = "asrlab",
    about = "Desk-scale LLM-ASR lab: audio-token vocabulary remapping plus PPO domain adaptation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Artifact directory.
    #[arg(long)]
    out: PathBuf,
    /// Override the experiment seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic two-domain corpus and text corpus.
    GenData(StageArgs),
    /// Train the k-means codebook on clean-domain frames.
    TrainCodebook(StageArgs),
    /// Quantize a manifest into audio-token ids (tokens_<split>.jsonl).
    Tokenize {
        #[command(flatten)]
        stage: StageArgs,
        /// Manifest name, e.g. disordered_train.
        #[arg(long, default_value = "disordered_train")]
        split: String,
    },
    /// Build the vocab map + tokenizer and pretrain the text LM.
    Pretrain(StageArgs),
    /// Supervised fine-tuning (mixture, clean-only, continued variants).
    Sft(StageArgs),
    /// Generate labeled pairs and train the MP reward model.
    TrainMp(StageArgs),
    /// PPO adaptation for every configured gamma.
    Rlhf(StageArgs),
    /// Evaluate all trained models and write reports + summary.
    Eval(StageArgs),
    /// Run the rlhf stage over the pinned gamma sweep {0, 0.25, 0.5, 1.0}.
    SweepGamma(StageArgs),
    /// Rebuild summary.json from existing reports and print it.
    Report(StageArgs),
    /// Run every stage end to end.
    All(StageArgs),
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, Error> {
    let cfg = match &args.config {
        Some(path) => ExperimentConfig::load(path)?,
        None => ExperimentConfig::default(),
    };
    Ok(cfg.with_seed(args.seed))
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.command {
        Command::GenData(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::GenData])?;
        }
        Command::TrainCodebook(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::Codebook])?;
        }
        Command::Tokenize { stage: a, split } => {
            load_config(&a)?;
            let path = write_tokens_jsonl(&a.out, &split)?;
            println!("wrote {}", path.display());
        }
        Command::Pretrain(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::Pretrain])?;
        }
        Command::Sft(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::Sft])?;
        }
        Command::TrainMp(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::TrainMp])?;
        }
        Command::Rlhf(a) => {
            run_experiment(&load_config(&a)?, &a.out, &[Stage::Rlhf])?;
        }
        Command::Eval(a) => {
            let summary = run_experiment(&load_config(&a)?, &a.out, &[Stage::Eval])?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::SweepGamma(a) => {
            let mut config = load_config(&a)?;
            config.rlhf.gammas = vec![0.0, 0.25, 0.5, 1.0];
            run_experiment(&config, &a.out, &[Stage::Rlhf])?;
        }
        Command::Report(a) => {
            let config = load_config(&a)?;
            let summary = run_experiment(&config, &a.out, &[])?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
        Command::All(a) => {
            let summary = run_experiment(&load_config(&a)?, &a.out, &Stage::all())?;
            println!("{}", serde_json::to_string_pretty(&summary)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(err.exit_code() as u8)
        }
    }
}
