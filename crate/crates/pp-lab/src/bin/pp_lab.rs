//! Experiment driver: runs pipeline stages against a flat key-value
//! config. Exit codes: 0 success, 2 config error, 3 missing prerequisite.

use clap::{Parser, Subcommand};
use pp_lab::pipeline::{
    emit_plotdata, run_stage, ExperimentConfig, PipelineError, Stage,
};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "pp-lab", version, about = "Prediction-profile experiment pipeline")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct StageArgs {
    /// Flat `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Master seed; every stage and trial derives its own stream.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Artifact directory.
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

#[derive(Subcommand)]
enum Command {
    /// Sample trajectories under the uniform-random policy.
    GenData(StageArgs),
    /// Cluster history statistics into a profile set.
    EstimateProfiles(StageArgs),
    /// Relabel trajectories with profile indices.
    Translate(StageArgs),
    /// Train the configured profile-sequence model.
    TrainPp(StageArgs),
    /// Train the flat POMDP baseline.
    TrainFlat(StageArgs),
    /// Run the control/prediction evaluation loop.
    Evaluate(StageArgs),
    /// Rank-check a built-in deterministic profile machine.
    SdmCheck(StageArgs),
    /// Full pipeline followed by evaluation.
    All(StageArgs),
    /// Merge evaluation CSVs into a long-format plot table.
    Plotdata {
        /// Output CSV path.
        #[arg(long)]
        out: PathBuf,
        /// Input eval.csv files.
        inputs: Vec<PathBuf>,
    },
}

fn load_config(args: &StageArgs) -> Result<ExperimentConfig, PipelineError> {
    match &args.config {
        None => Ok(ExperimentConfig::default()),
        Some(path) => {
            let text = std::fs::read_to_string(path).map_err(|e| {
                PipelineError::Config(format!("cannot read {}: {e}", path.display()))
            })?;
            ExperimentConfig::parse(&text)
        }
    }
}

fn run(cli: Cli) -> Result<(), PipelineError> {
    let (stage, args) = match cli.command {
        Command::GenData(a) => (Stage::GenData, a),
        Command::EstimateProfiles(a) => (Stage::EstimateProfiles, a),
        Command::Translate(a) => (Stage::Translate, a),
        Command::TrainPp(a) => (Stage::TrainPp, a),
        Command::TrainFlat(a) => (Stage::TrainFlat, a),
        Command::Evaluate(a) => (Stage::Evaluate, a),
        Command::SdmCheck(a) => (Stage::SdmCheck, a),
        Command::All(a) => (Stage::All, a),
        Command::Plotdata { out, inputs } => {
            return emit_plotdata(&inputs, &out);
        }
    };
    let cfg = load_config(&args)?;
    let manifest = run_stage(stage, &cfg, &args.out, args.seed)?;
    for s in &manifest.stages {
        println!("{}: {} ({}ms)", s.stage, s.artifact.display(), s.millis);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
