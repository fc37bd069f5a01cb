use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use s2ig_core::Error;

mod commands;

/// Speech-to-image generation: synthetic corpora, training, generation and evaluation.
#[derive(Debug, Parser)]
#[command(name = "s2ig", version)]
struct Cli {
    /// Relative manifest, corpus and audio paths resolve against this directory.
    #[arg(long, global = true, env = "S2IG_DATA_ROOT", default_value = ".")]
    data_root: PathBuf,

    /// New experiment directories are created here.
    #[arg(long, global = true, env = "S2IG_EXPERIMENT_ROOT", default_value = "experiments")]
    experiment_root: PathBuf,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a deterministic synthetic paired speech/image corpus.
    MakeDataset(MakeDatasetArgs),
    /// Train the speech embedding network.
    TrainSen(TrainSenArgs),
    /// Train the generator stack against a frozen SEN checkpoint.
    TrainRdg(TrainRdgArgs),
    /// Render pictures for utterances.
    Generate(GenerateArgs),
    /// Score generated pictures against real ones (IS, FID, retrieval mAP).
    Evaluate(EvaluateArgs),
}

#[derive(Debug, Args)]
struct MakeDatasetArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 8)]
    classes: usize,
    #[arg(long = "per-class", default_value_t = 10)]
    per_class: usize,
    /// Output directory (created if missing).
    #[arg(long)]
    out: PathBuf,
}

/// Options shared by the training and evaluation commands.
#[derive(Debug, Args, Clone)]
struct ConfigArgs {
    /// TOML overrides on top of the profile.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Base settings: `default` or `ci`.
    #[arg(long, default_value = "default")]
    profile: String,
    /// Overrides the configured global seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Corpus manifest; overrides `data.manifest`.
    #[arg(long)]
    manifest: Option<PathBuf>,
}

#[derive(Debug, Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Name of a new experiment directory (suffixed if it exists).
    #[arg(long, default_value = "run")]
    name: String,
    /// Write into this existing experiment directory instead of creating one.
    #[arg(long)]
    exp_dir: Option<PathBuf>,
    /// Continue from the stage checkpoint in `--exp-dir`.
    #[arg(long, requires = "exp_dir")]
    resume: bool,
}

#[derive(Debug, Args)]
struct TrainSenArgs {
    #[command(flatten)]
    run: RunArgs,
}

#[derive(Debug, Args)]
struct TrainRdgArgs {
    #[command(flatten)]
    run: RunArgs,
    /// SEN checkpoint providing the conditions.
    #[arg(long)]
    sen: Option<PathBuf>,
    /// Disable a component: no-rs, no-dense or no-sen (repeatable).
    #[arg(long)]
    ablate: Vec<String>,
}

#[derive(Debug, Args)]
struct GenerateArgs {
    /// Generator checkpoint.
    #[arg(long)]
    rdg: PathBuf,
    /// SEN checkpoint the generator was trained against.
    #[arg(long)]
    sen: Option<PathBuf>,
    /// Generate for every utterance of a manifest split.
    #[arg(long, conflicts_with = "audio", required_unless_present = "audio")]
    manifest: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    split: String,
    /// Individual WAV files.
    #[arg(long, num_args = 1..)]
    audio: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Images per utterance, each with fresh noise.
    #[arg(long, default_value_t = 1)]
    per_caption: usize,
    /// Also write the intermediate scales.
    #[arg(long)]
    all_scales: bool,
}

#[derive(Debug, Args)]
struct EvaluateArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Real images: a PNG directory, a feature cache, or a manifest (its `--split`).
    #[arg(long)]
    real: PathBuf,
    /// Generated images: a PNG directory or a feature cache.
    #[arg(long)]
    fake: PathBuf,
    #[arg(long, default_value = "test")]
    split: String,
    /// Evaluation backbone checkpoint. Without it one is trained on the manifest's train split.
    #[arg(long)]
    backbone: Option<PathBuf>,
    /// Where to keep a freshly trained backbone.
    #[arg(long)]
    save_backbone: Option<PathBuf>,
    /// Write `real.safetensors` / `fake.safetensors` feature caches here.
    #[arg(long)]
    cache_dir: Option<PathBuf>,
    /// Report path; defaults to `reports/metrics.json` of `--exp-dir`, else stdout.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    exp_dir: Option<PathBuf>,
}

/// 0 success, 2 config/validation, 3 compatibility, 4 protocol, 1 anything else.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::Validation(_) | Error::Parse { .. } => 2,
        Error::Compatibility(_) => 3,
        Error::Protocol(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let roots = commands::Roots {
        data: cli.data_root,
        experiments: cli.experiment_root,
    };
    let result = match cli.command {
        Command::MakeDataset(a) => commands::make_dataset(&roots, a),
        Command::TrainSen(a) => commands::train_sen(&roots, a),
        Command::TrainRdg(a) => commands::train_rdg(&roots, a),
        Command::Generate(a) => commands::generate(&roots, a),
        Command::Evaluate(a) => commands::evaluate(&roots, a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }

    #[test]
    fn exit_codes() {
        assert_eq!(exit_code(&Error::Config("x".into())), 2);
        assert_eq!(exit_code(&Error::Validation("x".into())), 2);
        assert_eq!(exit_code(&Error::Compatibility("x".into())), 3);
        assert_eq!(exit_code(&Error::Protocol("x".into())), 4);
        assert_eq!(exit_code(&Error::Numerical("x".into())), 1);
    }

    #[test]
    fn resume_needs_an_experiment_dir() {
        let r = Cli::try_parse_from(["s2ig", "train-sen", "--resume"]);
        assert!(r.is_err());
    }
}
