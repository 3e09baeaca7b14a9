//! `otrack`: simulate scenes, track them, score the results, train the
//! appearance embedder and render occlusion heatmaps.
//!
//! Exit codes: 0 success, 1 runtime or data error, 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "otrack", version, about = "Occlusion-aware multi-object tracking toolkit")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic sequence directory.
    Simulate(SimulateArgs),
    /// Track a sequence directory and write MOTChallenge results.
    Track(TrackArgs),
    /// Score result files against ground truth.
    Eval(EvalArgs),
    /// Train the appearance embedder on simulated sequences.
    TrainReid(TrainArgs),
    /// Write the occlusion heatmap of one frame as a PGM image.
    Render(RenderArgs),
    /// Re-run the command recorded in a manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Debug, Clone, Args)]
pub struct OutArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Write into a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SimulateArgs {
    #[arg(long)]
    pub seed: u64,
    /// `key = value` simulator settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequence name written to seqinfo.ini.
    #[arg(long, default_value = "synthetic")]
    pub name: String,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct TrackArgs {
    /// Sequence directory.
    pub sequence: PathBuf,
    /// `key = value` tracker settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Switch::On)]
    pub refind: Switch,
    /// `oracle`, `raw`, or the path of an embedder checkpoint.
    #[arg(long, default_value = "oracle")]
    pub embedder: String,
    #[arg(long)]
    pub iou_gate: Option<f64>,
    #[arg(long)]
    pub cos_gate: Option<f64>,
    #[arg(long)]
    pub refind_tau: Option<f64>,
    #[arg(long)]
    pub new_track_conf: Option<f64>,
    #[arg(long)]
    pub max_lost: Option<u32>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    /// Ground-truth files, paired in order with `--results`.
    #[arg(long, required = true)]
    pub gt: Vec<PathBuf>,
    #[arg(long, required = true)]
    pub results: Vec<PathBuf>,
    /// Row names; defaults to the ground truth's directory name.
    #[arg(long)]
    pub name: Vec<String>,
    #[arg(long, default_value_t = 0.5)]
    pub iou: f64,
    /// Directory for report.csv and the manifest; print only when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Training sequence directories.
    #[arg(required = true)]
    pub datasets: Vec<PathBuf>,
    #[arg(long)]
    pub seed: u64,
    /// `key = value` training settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Sequence for the final retrieval report; defaults to the first dataset.
    #[arg(long)]
    pub eval: Option<PathBuf>,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct RenderArgs {
    pub sequence: PathBuf,
    /// 1-based frame number.
    #[arg(long)]
    pub frame: u32,
    #[arg(long, default_value_t = 0.7)]
    pub tau: f64,
    #[arg(long, default_value_t = 4)]
    pub stride: u32,
    #[command(flatten)]
    pub out: OutArgs,
}

#[derive(Debug, Clone, Args)]
pub struct ReplayArgs {
    /// Manifest file or the directory holding it.
    pub manifest: PathBuf,
    /// Write to this directory instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match commands::run(cli.command, None) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

/// Parses recorded arguments the same way as the command line.
pub fn parse_recorded(args: &[String]) -> Result<Command, clap::Error> {
    let argv = std::iter::once("otrack".to_string()).chain(args.iter().cloned());
    Cli::try_parse_from(argv).map(|c| c.command)
}
