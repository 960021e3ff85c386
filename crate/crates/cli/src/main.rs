use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod error;
mod report;
mod settings;

use error::CliError;
use settings::Settings;

/// Synthetic RGBD scene completion: generate rooms, train the toy
/// completion model and grow point clouds along camera trajectories.
#[derive(Debug, Parser)]
#[command(name = "scomp", version)]
struct Cli {
    /// Seed for every random choice of the run.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON object of flag values; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Print reports and errors as JSON.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a room and save an orbit of exact RGBD frames.
    Synth(SynthArgs),
    /// Reproject one frame's depth into another frame's camera.
    Project(ProjectArgs),
    /// Report the percentile normalization of a depth map.
    Normalize(NormalizeArgs),
    /// Fit scale and offset between two depth maps.
    Align(AlignArgs),
    /// Train the completion model on synthetic condition/target pairs.
    Train(TrainArgs),
    /// Complete one partial frame with a trained model.
    Sample(SampleArgs),
    /// Grow a point cloud along a camera trajectory.
    Complete(CompleteArgs),
    /// Compare generated frames against ground truth.
    Metrics(MetricsArgs),
    /// Fuse the frames of a container into a PLY point cloud.
    ExportPly(ExportPlyArgs),
}

#[derive(Debug, Args)]
struct SynthArgs {
    #[arg(long)]
    frames: Option<usize>,
    #[arg(long)]
    width: Option<usize>,
    #[arg(long)]
    height: Option<usize>,
    /// Orbit radius around the room centre.
    #[arg(long)]
    radius: Option<f64>,
    /// Angle of the first camera, radians.
    #[arg(long)]
    phase: Option<f64>,
    /// Angle between consecutive cameras, radians.
    #[arg(long)]
    step: Option<f64>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Scene container directory.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    source: Option<usize>,
    #[arg(long)]
    target: Option<usize>,
}

#[derive(Debug, Args)]
struct NormalizeArgs {
    /// PFM depth map.
    #[arg(long)]
    depth: Option<PathBuf>,
    /// Validity mask PNG; defaults to every positive depth.
    #[arg(long)]
    mask: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct AlignArgs {
    /// PFM depth the fit should land on.
    #[arg(long)]
    clue: Option<PathBuf>,
    /// PFM depth to be mapped.
    #[arg(long)]
    pred: Option<PathBuf>,
    #[arg(long)]
    mask: Option<PathBuf>,
    /// `predicted-to-clue` or `clue-to-predicted`.
    #[arg(long)]
    direction: Option<String>,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Train on this container's scene and cameras instead of a generated orbit.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    steps: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    pairs: Option<usize>,
    #[arg(long)]
    scene_seed: Option<u64>,
    #[arg(long)]
    resolution: Option<usize>,
    #[arg(long)]
    d_model: Option<usize>,
    #[arg(long)]
    d_hidden: Option<usize>,
    #[arg(long)]
    scene_tokens: Option<usize>,
}

#[derive(Debug, Args)]
struct SampleArgs {
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Container holding the partial frame.
    #[arg(long)]
    input: Option<PathBuf>,
    #[arg(long)]
    frame: Option<usize>,
    /// Frame whose image conditions the scene tokens; defaults to `--frame`.
    #[arg(long)]
    reference: Option<usize>,
}

#[derive(Debug, Args)]
struct CompleteArgs {
    /// Container; frame 0 seeds the cloud.
    #[arg(long)]
    input: Option<PathBuf>,
    /// Trajectory JSON; defaults to the container's remaining frames.
    #[arg(long)]
    trajectory: Option<PathBuf>,
    /// `oracle`, `diffusion` or `passthrough`.
    #[arg(long)]
    backend: Option<String>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// `identity` or `area`.
    #[arg(long)]
    codec: Option<String>,
}

#[derive(Debug, Args)]
struct MetricsArgs {
    /// Container of generated frames.
    #[arg(long)]
    generated: Option<PathBuf>,
    /// Container of ground-truth frames with the same names.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Comma-separated subset of psnr, ssim, r_dist, t_dist.
    #[arg(long)]
    metrics: Option<String>,
}

#[derive(Debug, Args)]
struct ExportPlyArgs {
    #[arg(long)]
    input: Option<PathBuf>,
}

fn run(cli: Cli) -> Result<report::Report, CliError> {
    let settings = Settings::load(cli.config.as_deref())?;
    let seed = settings.or(cli.seed, "seed", 0)?;
    let out = settings.merge(cli.out, "out")?;
    let ctx = commands::Context { settings, seed, out };
    match cli.command {
        Command::Synth(a) => commands::synth(&ctx, a),
        Command::Project(a) => commands::project(&ctx, a),
        Command::Normalize(a) => commands::normalize(&ctx, a),
        Command::Align(a) => commands::align(&ctx, a),
        Command::Train(a) => commands::train(&ctx, a),
        Command::Sample(a) => commands::sample(&ctx, a),
        Command::Complete(a) => commands::complete(&ctx, a),
        Command::Metrics(a) => commands::metrics(&ctx, a),
        Command::ExportPly(a) => commands::export_ply(&ctx, a),
    }
}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            if argv.iter().any(|a| a == "--json") {
                eprintln!("{}", CliError::usage("USAGE", e.to_string().trim_end()).to_json());
            } else {
                eprint!("{e}");
            }
            return ExitCode::from(1);
        }
    };
    let json = cli.json;
    match run(cli) {
        Ok(r) => {
            // a closed stdout (e.g. piped into `head`) is not a failure of the run
            let _ = writeln!(std::io::stdout(), "{}", if json { r.to_json() } else { r.to_text() });
            ExitCode::SUCCESS
        }
        Err(e) => {
            if json {
                eprintln!("{}", e.to_json());
            } else {
                eprintln!("error[{}]: {}", e.code(), e.message());
            }
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
