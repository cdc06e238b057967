//! Command-line driver: one verb per pipeline stage.
//!
//! Every stage writes under `<run_dir>/<stage>/` (`config.toml`,
//! `checkpoints/`, `logs/`, `outputs/`) and reads its prerequisites from the
//! sibling stage directories of the same run.

pub mod commands;
pub mod config;
pub mod layout;

use std::ffi::OsString;
use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use config::{Mode, RunConfig, Source};

#[derive(Debug, Parser)]
#[command(name = "stylekit", version, about = "Single-image style extraction and injection")]
pub struct Cli {
    /// TOML run configuration; flags override its values.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[arg(long, global = true, value_enum)]
    pub mode: Option<Mode>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true)]
    pub run_dir: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Caption a class-folder image tree and write the split manifest.
    BuildDataset(BuildArgs),
    /// Stage 1: per-image style vectors by textual inversion.
    Invert(InvertArgs),
    /// Stage 2a: align the style encoder with style-tag text features.
    PretrainEncoder(StageArgs),
    /// Stage 2b: fit the projection to the stage-1 vectors.
    PretrainProjection(StageArgs),
    /// Stage 3: joint fine-tuning through the frozen generator.
    Finetune(StageArgs),
    /// Stage 3 without the projection (replicated encoder feature).
    FinetuneAblation(StageArgs),
    /// Generate an image from a reference image and a prompt.
    Generate(GenerateArgs),
    /// Score reconstructions of the test split.
    Evaluate(EvaluateArgs),
    /// Write procedural styled fixture images with recorded captions.
    SynthFixtures(SynthArgs),
}

#[derive(Debug, Args)]
pub struct BuildArgs {
    /// Class-folder image tree.
    #[arg(long)]
    pub images: Option<PathBuf>,
    /// Recorded captions JSON (toy mode).
    #[arg(long)]
    pub captions: Option<PathBuf>,
    #[arg(long)]
    pub test_size: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InvertArgs {
    /// Optimization steps per image.
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct StageArgs {
    #[arg(long)]
    pub epochs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, required_unless_present = "replay")]
    pub reference: Option<PathBuf>,
    #[arg(long, required_unless_present = "replay")]
    pub prompt: Option<String>,
    /// Output PNG; defaults to `<run_dir>/generate/outputs/<reference>-<seed>.png`.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub source: Option<Source>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub guidance: Option<f64>,
    #[arg(long)]
    pub size: Option<u32>,
    /// Regenerate from a sidecar and check the bytes match.
    #[arg(long, conflicts_with_all = ["reference", "prompt", "out"])]
    pub replay: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_enum, value_delimiter = ',')]
    pub source: Vec<Source>,
    /// `final`, `epoch-N` or `step-N`.
    #[arg(long)]
    pub checkpoint: Option<String>,
    #[arg(long)]
    pub plots: bool,
    #[arg(long)]
    pub steps: Option<usize>,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 4)]
    pub per_style: usize,
    #[arg(long, default_value_t = 64)]
    pub size: u32,
}

/// Loads the configuration file (if any) and applies the global flags.
pub fn resolve_config(cli: &Cli) -> Result<RunConfig> {
    let cwd = std::env::current_dir()?;
    let mut cfg = match &cli.config {
        Some(path) => {
            let mut cfg = RunConfig::load(path)?;
            let base = path.parent().map(|p| cwd.join(p)).unwrap_or_else(|| cwd.clone());
            cfg.absolutize(&base);
            cfg
        }
        None => RunConfig::default(),
    };
    if let Some(m) = cli.mode {
        cfg.mode = m;
    }
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(d) = &cli.run_dir {
        cfg.run_dir = d.clone();
    }
    cfg.absolutize(&cwd);
    Ok(cfg)
}

/// Parses `args` (including the program name) and runs the command.
pub fn run<I, S>(args: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: Into<OsString> + Clone,
{
    let cli = Cli::try_parse_from(args)?;
    let cfg = resolve_config(&cli)?;
    commands::dispatch(cfg, cli.command)
}
