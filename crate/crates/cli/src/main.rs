//! `facemotion`: corpus generation, labeling, training, adaptation,
//! synthesis and evaluation, file in and file out.

mod commands;
mod config;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::Exit;

#[derive(Parser)]
#[command(name = "facemotion", version, about = "Speech-driven 3D facial animation with per-speaker style adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic multi-speaker corpus with a manifest.
    GenData(commands::GenDataArgs),
    /// Detect lip closures and write per-frame closure weights.
    Label(commands::LabelArgs),
    /// Train the model on the train split of a manifest.
    Train(commands::TrainArgs),
    /// Two-stage style adaptation to a held-out speaker.
    Adapt(commands::AdaptArgs),
    /// Synthesize a mesh sequence from audio or features.
    Synth(commands::SynthArgs),
    /// Compute metrics for predictions against references.
    Eval(commands::EvalArgs),
}

fn exit_code(e: &anyhow::Error) -> u8 {
    use facemotion::Error as E;
    for cause in e.chain() {
        if let Some(x) = cause.downcast_ref::<Exit>() {
            return x.code;
        }
        if let Some(err) = cause.downcast_ref::<E>() {
            return match err {
                E::Config(_) | E::InvalidArgument(_) => 2,
                E::Io(_) | E::Format(_) | E::Length(_) | E::Json(_) => 3,
                E::Metadata(_) | E::UnknownPhoneme(_) => 4,
                E::Shape { .. } | E::Topology { .. } | E::MissingParameter(_) | E::Alignment { .. } => 5,
                E::Divergence { .. } | E::NonFinite { .. } | E::DegenerateRow { .. } => 6,
                _ => 1,
            };
        }
        if cause.downcast_ref::<std::io::Error>().is_some() {
            return 3;
        }
    }
    1
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Label(a) => commands::label(a),
        Command::Train(a) => commands::train(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Synth(a) => commands::synth(a),
        Command::Eval(a) => commands::eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
