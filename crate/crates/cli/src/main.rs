//! `mage`: dataset synthesis, codec and backbone training, sampling,
//! editing, evaluation, and ablation grids — one reproducible pipeline.

use clap::{Parser, Subcommand};

use mage_cli::commands;
use mage_core::error::{ErrorCategory, MageError};

#[derive(Parser)]
#[command(
    name = "mage",
    version,
    about = "Flow-matching music generation and mixture-grounded editing \
             on a synthetic benchmark",
    propagate_version = true
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Synthesize the dataset manifest (and optionally export audio).
    MakeData(commands::MakeDataArgs),
    /// Train the waveform codec.
    TrainCodec(commands::TrainCodecArgs),
    /// Train the flow backbone on frozen-codec latents.
    TrainFlux(commands::TrainFluxArgs),
    /// Sample a clip from noise under optional prompt/frame conditioning.
    Generate(commands::GenerateArgs),
    /// Re-synthesize a mixture into the conditioned target source.
    Edit(commands::EditArgs),
    /// Score editing and generation on a dataset split.
    Evaluate(commands::EvaluateArgs),
    /// Train and score the ablation grid.
    Ablate(commands::AblateArgs),
}

fn exit_code(err: &MageError) -> i32 {
    match err.category() {
        ErrorCategory::Usage => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Io => 5,
    }
}

fn main() {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::MakeData(args) => commands::make_data(args),
        Command::TrainCodec(args) => commands::train_codec(args),
        Command::TrainFlux(args) => commands::train_flux(args),
        Command::Generate(args) => commands::generate(args),
        Command::Edit(args) => commands::edit(args),
        Command::Evaluate(args) => commands::evaluate(args),
        Command::Ablate(args) => commands::ablate(args),
    };
    if let Err(err) = result {
        eprintln!("error: {err}");
        std::process::exit(exit_code(&err));
    }
}
