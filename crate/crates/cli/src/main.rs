//! `culicid`: mosquito vector classification from the command line.
//!
//! Data preparation, training, evaluation and explanation run in-process.
//! `serve` starts the surveillance service; `classify`, `review`,
//! `summary`, `alerts` and `export-corpus` are clients of it.

mod fail;
mod local;
mod model;
mod remote;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use fail::{Failure, BAD_INPUT, INTERNAL};

#[derive(Debug, Parser)]
#[command(name = "culicid", version, about = "Mosquito vector classification pipeline")]
struct Cli {
    /// Machine-readable output.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Non-local-means denoise one image.
    Denoise(local::DenoiseArgs),
    /// Expand the train partition with zoom and gain variants.
    Augment(local::AugmentArgs),
    /// Specimen-grouped stratified train/validation split.
    Split(local::SplitArgs),
    /// Train one classifier head; writes a run directory.
    Train(local::TrainArgs),
    /// Score a model on a manifest.
    Eval(local::EvalArgs),
    /// Class activation map of one image.
    Explain(local::ExplainArgs),
    /// Precompute backbone feature maps into an archive.
    ExportFeatures(local::ExportFeaturesArgs),
    /// Combine trained heads into one model bundle.
    Bundle(local::BundleArgs),
    /// Run the surveillance service.
    Serve(remote::ServeArgs),
    /// Send one specimen's images to the service.
    Classify(remote::ClassifyArgs),
    /// Expert review queue.
    #[command(subcommand)]
    Review(remote::ReviewCommand),
    /// Surveillance counts.
    Summary(remote::SummaryArgs),
    /// The alert log.
    Alerts(remote::SummaryArgs),
    /// Download the labeled training corpus.
    ExportCorpus(remote::ExportCorpusArgs),
}

fn run(cli: Cli) -> Result<(), Failure> {
    let j = cli.json;
    match &cli.command {
        Command::Denoise(a) => local::run_denoise(a, j),
        Command::Augment(a) => local::run_augment(a, j),
        Command::Split(a) => local::run_split(a, j),
        Command::Train(a) => local::run_train(a, j),
        Command::Eval(a) => local::run_eval(a, j),
        Command::Explain(a) => local::run_explain(a, j),
        Command::ExportFeatures(a) => local::run_export_features(a, j),
        Command::Bundle(a) => local::run_bundle(a, j),
        Command::Serve(a) => remote::run_serve(a),
        Command::Classify(a) => remote::run_classify(a, j),
        Command::Review(c) => remote::run_review(c, j),
        Command::Summary(a) => remote::run_summary(a, j),
        Command::Alerts(a) => remote::run_alerts(a, j),
        Command::ExportCorpus(a) => remote::run_export_corpus(a),
    }
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(
            tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()),
        )
        .with_writer(std::io::stderr)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => ExitCode::SUCCESS,
                _ => ExitCode::from(BAD_INPUT),
            };
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(f)) => {
            eprintln!("error: {f}");
            ExitCode::from(f.code)
        }
        Err(_) => ExitCode::from(INTERNAL),
    }
}
