//! The `relex` command line: corpus synthesis and masking, training,
//! evaluation, cross-validation and attention analysis. Every subcommand
//! reads and writes plain files and leaves a JSON [`RunManifest`] next to
//! its outputs.

pub mod commands;
pub mod config;
pub mod manifest;

use clap::{Parser, Subcommand};

pub use commands::{cmd_analyze, cmd_cv, cmd_eval, cmd_preprocess, cmd_synth, cmd_train};
pub use config::RunConfig;
pub use manifest::RunManifest;

#[derive(Debug, Parser)]
#[command(name = "relex", version, about = "Relation extraction with pooled transformer heads")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic trigger-word corpus.
    Synth(commands::SynthArgs),
    /// Replace annotated entity spans with type tags.
    Preprocess(commands::PreprocessArgs),
    /// Fine-tune a model and write a checkpoint and metric trace.
    Train(commands::TrainArgs),
    /// Score a checkpoint on a test set.
    Eval(commands::EvalArgs),
    /// Stratified k-fold cross-validation.
    Cv(commands::CvArgs),
    /// Attention heatmaps and trigger-word statistics from eval records.
    Analyze(commands::AnalyzeArgs),
}

pub fn run(cli: &Cli) -> anyhow::Result<RunManifest> {
    match &cli.command {
        Command::Synth(a) => cmd_synth(a),
        Command::Preprocess(a) => cmd_preprocess(a),
        Command::Train(a) => cmd_train(a),
        Command::Eval(a) => cmd_eval(a),
        Command::Cv(a) => cmd_cv(a),
        Command::Analyze(a) => cmd_analyze(a),
    }
}
