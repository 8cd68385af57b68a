use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use monosem_cli::pipeline::{self, Run};
use monosem_cli::{PipelineError, RunConfig};

#[derive(Parser)]
#[command(
    name = "monosem",
    version,
    about = "Explanation pipeline over synthetic clinical-note cohorts"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// `key = value` config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides one key, e.g. `--set seed=3`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the cohort of the configured distribution.
    Generate(Common),
    /// Train the surrogate classifier on the IID cohort.
    TrainClassifier(Common),
    /// Train the sparse autoencoder on IID layer activations.
    TrainSae(Common),
    /// Compute the six attribution maps in the layer and in SAE space.
    Attribute(Common),
    /// Train the explanation optimizer on the IID validation split.
    TrainOptimizer(Common),
    /// Score every method and the optimizer on the test split.
    Evaluate(Common),
    /// Featurewise UMAP, PCA and subgroup selection of the optimized explanations.
    Embed(Common),
    /// Heatmaps and highlighted-token tables.
    Export(Common),
    /// Metric tables, paired tests and the run summary.
    Report(Common),
    /// Every stage of the configured distribution in order.
    Run(Common),
}

fn config(c: &Common) -> Result<RunConfig, PipelineError> {
    let mut cfg = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &c.set {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| PipelineError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
        cfg.set(k, v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn dispatch(cmd: Command) -> Result<PathBuf, PipelineError> {
    let (stage, common) = match &cmd {
        Command::Generate(c) => ("generate", c),
        Command::TrainClassifier(c) => ("train-classifier", c),
        Command::TrainSae(c) => ("train-sae", c),
        Command::Attribute(c) => ("attribute", c),
        Command::TrainOptimizer(c) => ("train-optimizer", c),
        Command::Evaluate(c) => ("evaluate", c),
        Command::Embed(c) => ("embed", c),
        Command::Export(c) => ("export", c),
        Command::Report(c) => ("report", c),
        Command::Run(c) => return pipeline::run_pipeline(config(c)?),
    };
    let run = Run::new(config(common)?)?;
    pipeline::run_stage(&run, stage)?;
    Ok(run.dir)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(dir) => {
            println!("{}", dir.display());
            ExitCode::SUCCESS
        }
        Err(e) => {
            match &e {
                PipelineError::Stage { stage, .. } => eprintln!("[{stage}] error: {}", e.root()),
                other => eprintln!("error: {other}"),
            }
            ExitCode::FAILURE
        }
    }
}
