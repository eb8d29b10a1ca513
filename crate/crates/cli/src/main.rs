mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use config::{Preset, RunConfig, UsageError};

#[derive(Debug, Parser)]
#[command(name = "formula-gan", version, about = "Rendered-to-handwritten formula synthesis and recognition")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for every random draw of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// `stub`, `http` (uses RENDER_URL) or `http:<url>`.
    #[arg(long, global = true)]
    renderer: Option<String>,
    /// Parallel render requests during data preparation.
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// TOML file overlaid on the preset defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value = "large")]
    preset: Preset,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Render a corpus (or rasterize InkML) into a dataset directory.
    PrepareData(commands::PrepareArgs),
    /// Train the generator, discriminator and task model jointly.
    TrainGan(commands::TrainGanArgs),
    /// Translate rendered formulas into synthetic handwriting.
    Synthesize(commands::SynthesizeArgs),
    /// Train a recognizer on a mix of datasets.
    TrainRecognizer(commands::TrainRecognizerArgs),
    /// Score predictions or a recognizer checkpoint against ground truth.
    Evaluate(commands::EvaluateArgs),
    /// Perplexity table over GAN variants and checkpoints.
    Ablate(commands::AblateArgs),
    /// Rendered / synthesized image pairs side by side.
    SampleGrid(commands::SampleGridArgs),
}

fn resolve(global: &GlobalArgs) -> anyhow::Result<RunConfig> {
    let mut cfg = RunConfig::load(global.preset, global.config.as_deref())?;
    let seed = global.seed.unwrap_or(cfg.seed);
    cfg.set_seed(seed);
    if let Some(r) = &global.renderer {
        cfg.renderer = r.clone();
    }
    if let Some(w) = global.workers {
        cfg.workers = w;
    }
    if cfg.workers == 0 {
        return Err(UsageError("--workers must be at least 1".into()).into());
    }
    Ok(cfg)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let cfg = resolve(&cli.global)?;
    match cli.command {
        Command::PrepareData(a) => commands::prepare_data(cfg, a),
        Command::TrainGan(a) => commands::train_gan(cfg, a),
        Command::Synthesize(a) => commands::synthesize(cfg, a),
        Command::TrainRecognizer(a) => commands::train_recognizer(cfg, a),
        Command::Evaluate(a) => commands::evaluate(cfg, a),
        Command::Ablate(a) => commands::ablate(cfg, a),
        Command::SampleGrid(a) => commands::sample_grid(cfg, a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("error: {e:#}\n\nRun with --help for the accepted flags and config keys.");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
