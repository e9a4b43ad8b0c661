//! `havc`: profile expert heads, build cropping guidance, crop images and
//! generate synthetic benchmarks.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use havc::guidance::FusionScope;
use havc::spatial::Connectivity;

use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "havc", version, about = "Head-aware visual cropping")]
pub struct Cli {
    /// TOML config file; flags override its values.
    #[arg(long, global = true, env = "HAVC_CONFIG")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Score every head on a diagnostic corpus and write the expert-head file.
    ScoreHeads(ScoreHeadsArgs),
    /// Build the guidance map and crop box for one inference record.
    Guide(GuideArgs),
    /// Cut a box out of an image.
    Crop(CropArgs),
    /// Write a synthetic corpus, scenes and their ground truth.
    Synth(SynthArgs),
    /// Render a `.hvt` map as a grayscale PGM.
    Render(RenderArgs),
    /// Ablation ladder and parameter sweeps on synthetic scenes.
    Sweep(SweepArgs),
}

#[derive(Debug, Args)]
pub struct ScoreHeadsArgs {
    /// Corpus manifest (`.hvm`).
    pub corpus: PathBuf,
    /// Expert-head file to write.
    #[arg(short, long)]
    pub out: PathBuf,
    /// Keep heads whose normalized score is above this.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Normalize each layer separately.
    #[arg(long)]
    pub per_layer: bool,
    /// Rows of the score table to print.
    #[arg(long, default_value_t = 16)]
    pub show: usize,
}

#[derive(Debug, Clone, Default, Args)]
pub struct GuidanceFlags {
    /// Weight of the entropy branch.
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Softmax temperature.
    #[arg(long)]
    pub tau: Option<f64>,
    /// Heads need entropy strictly below this.
    #[arg(long)]
    pub entropy_threshold: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_d: Option<f64>,
    /// Salient cells are at or above this fraction of the map maximum.
    #[arg(long)]
    pub theta_box: Option<f64>,
    #[arg(long)]
    pub pad: Option<usize>,
    #[arg(long)]
    pub min_side: Option<usize>,
    /// Component connectivity, 4 or 8, for both entropy and box stages.
    #[arg(long)]
    pub connectivity: Option<Connectivity>,
    #[arg(long, value_parser = parse_scope)]
    pub fusion_scope: Option<FusionScope>,
}

fn parse_scope(s: &str) -> Result<FusionScope, String> {
    match s {
        "survivors" => Ok(FusionScope::Survivors),
        "all-candidates" => Ok(FusionScope::AllCandidates),
        _ => Err(format!("expected survivors or all-candidates, got {s:?}")),
    }
}

#[derive(Debug, Args)]
pub struct GuideArgs {
    /// Expert-head file from `score-heads`.
    #[arg(long)]
    pub experts: PathBuf,
    /// Inference record manifest (`.hvm`).
    pub record: PathBuf,
    #[command(flatten)]
    pub flags: GuidanceFlags,
    /// Write the guidance report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Print the JSON report instead of the table.
    #[arg(long)]
    pub json: bool,
    /// Write the guidance map as `.hvt`.
    #[arg(long)]
    pub write_map: Option<PathBuf>,
    /// Write the guidance map as PGM with the crop outlined.
    #[arg(long)]
    pub write_pgm: Option<PathBuf>,
    #[arg(long, default_value_t = 8)]
    pub pgm_scale: usize,
}

#[derive(Debug, Args)]
pub struct CropArgs {
    pub image: PathBuf,
    /// Pixel box `x0,y0,x1,y1`, half-open.
    #[arg(long, conflicts_with = "report", required_unless_present = "report")]
    pub bbox: Option<String>,
    /// Take the box from a guidance report.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Scenario TOML; defaults apply to missing keys.
    pub scenario: Option<PathBuf>,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Diagnostic records in the corpus.
    #[arg(long, default_value_t = 50)]
    pub records: usize,
    /// Inference scenes to write.
    #[arg(long, default_value_t = 1)]
    pub scenes: usize,
}

#[derive(Debug, Args)]
pub struct RenderArgs {
    /// Square map as `.hvt` (`[n, n]` or `[n*n]`).
    pub map: PathBuf,
    #[arg(short, long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 8)]
    pub scale: usize,
    /// Patch box `r0,c0,r1,c1` to outline.
    #[arg(long)]
    pub outline: Option<String>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    /// Scenario TOML for the suite base.
    pub scenario: Option<PathBuf>,
    #[arg(long, default_value_t = 100)]
    pub scenes: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Write the sweep report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub flags: GuidanceFlags,
}

fn run(cli: Cli) -> Result<(), CliError> {
    let config = config::Config::load(cli.config.as_deref())?;
    match cli.command {
        Command::ScoreHeads(a) => commands::score_heads(&config, a),
        Command::Guide(a) => commands::guide(&config, a),
        Command::Crop(a) => commands::crop(a),
        Command::Synth(a) => commands::synth(a),
        Command::Render(a) => commands::render(a),
        Command::Sweep(a) => commands::sweep(&config, a),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.code() as u8)
        }
    }
}
