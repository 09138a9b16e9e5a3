use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub const MAX_SPEED_KMH: f64 = 110.0;

#[derive(Debug, Parser)]
#[command(name = "udrt", version, about = "Ultrasonic rail defectogram decoder")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic run as `.udfg` plus `.truth.jsonl`.
    Simulate(SimulateArgs),
    /// Train the five group classifiers into a model directory.
    Train(TrainArgs),
    /// Decode a recorded run into `decisions.jsonl`.
    Run(RunArgs),
    /// Replay a recording at track speed and check it keeps up.
    Bench(BenchArgs),
    /// Decode a stream and serve the review API.
    Serve(ServeArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    #[arg(long, default_value_t = 1000.0)]
    pub length_m: f64,
    #[arg(long, default_value_t = 110.0, value_parser = parse_speed)]
    pub speed_kmh: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Indications per km.
    #[arg(long, default_value_t = 20.0)]
    pub density: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise: f64,
    #[arg(long, default_value_t = 1.0)]
    pub pitch_mm: f64,
    /// Output `.udfg` path; ground truth goes next to it.
    #[arg(long, short)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Model directory to write.
    #[arg(long, short)]
    pub out: PathBuf,
    /// Simulated examples per group; 0 trains on the retraining set alone.
    #[arg(long, default_value_t = 1200)]
    pub examples: usize,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Expert-labeled retraining set to include.
    #[arg(long)]
    pub retraining: Option<PathBuf>,
    /// Existing model directory to continue training from.
    #[arg(long)]
    pub warm_start: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    #[arg(long, short)]
    pub models: PathBuf,
    /// Decisions output; defaults to `decisions.jsonl` next to the input.
    #[arg(long, short)]
    pub out: Option<PathBuf>,
    /// Also write the pipeline metrics here.
    #[arg(long)]
    pub metrics: Option<PathBuf>,
    /// Score the decisions against this ground truth.
    #[arg(long)]
    pub truth: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, short)]
    pub input: PathBuf,
    /// Model directory; freshly initialized weights when omitted.
    #[arg(long, short)]
    pub models: Option<PathBuf>,
    #[arg(long, default_value_t = 110.0, value_parser = parse_speed)]
    pub speed_kmh: f64,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    #[arg(long, short)]
    pub models: PathBuf,
    /// Recording to replay; a fresh simulation runs when omitted.
    #[arg(long, short)]
    pub input: Option<PathBuf>,
    /// Replay pace; unpaced when omitted.
    #[arg(long, value_parser = parse_speed)]
    pub speed_kmh: Option<f64>,
    /// Length of the simulated stream when no recording is given.
    #[arg(long, default_value_t = 200.0)]
    pub length_m: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
    #[arg(long)]
    pub retraining: Option<PathBuf>,
    #[command(flatten)]
    pub thresholds: ThresholdArgs,
}

#[derive(Debug, Clone, Copy, Args)]
pub struct ThresholdArgs {
    #[arg(long, default_value_t = 0.85)]
    pub min_confidence: f64,
    #[arg(long, default_value_t = 0.20)]
    pub min_margin: f64,
}

fn parse_speed(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if !(v > 0.0 && v <= MAX_SPEED_KMH) {
        return Err(format!(
            "speed must be in (0, {MAX_SPEED_KMH}] km/h, got {v}"
        ));
    }
    Ok(v)
}
