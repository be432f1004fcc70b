//! `cardioquant`: batch ventricle segmentation and cardiac-function CSVs.

mod commands;
mod config;
mod exit;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use cardioquant::geometry::AxisMethod;
use cardioquant::neural::LossKind;
use clap::{Parser, Subcommand};

use crate::commands::{SynthArgs, TrainArgs};
use crate::config::{BackendName, Overrides, RunConfig};
use crate::exit::{Failure, EXIT_CONFIG};

#[derive(Parser, Debug)]
#[command(name = "cardioquant", version, about = "Ventricle segmentation and cardiac-function quantification")]
struct Cli {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Segmentation backend.
    #[arg(long, global = true, value_enum)]
    backend: Option<BackendName>,
    /// Model file: read by the unet backend, written by `train`.
    #[arg(long, global = true, value_name = "PATH")]
    model: Option<PathBuf>,
    /// Seed for every stochastic component.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Axis measurement for the per-frame CSV.
    #[arg(long, global = true, value_name = "moments|chord")]
    geometry: Option<AxisMethod>,
    /// Comma-separated frame rates for `fpscheck`.
    #[arg(long, global = true, value_delimiter = ',', value_name = "LIST")]
    fps_rates: Option<Vec<f64>>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a synthetic beating-ventricle video, or a training set with --dataset.
    Synth {
        /// Write N independent frame/mask pairs instead of a video.
        #[arg(long, value_name = "N")]
        dataset: Option<usize>,
        #[arg(long)]
        fps: Option<f64>,
        /// Seconds.
        #[arg(long)]
        duration: Option<f64>,
        /// Beat phase at t = 0, radians.
        #[arg(long)]
        phase: Option<f64>,
        /// Axis modulation depth m.
        #[arg(long)]
        modulation: Option<f64>,
        /// Beat frequency, Hz.
        #[arg(long)]
        beat_freq: Option<f64>,
        #[arg(long)]
        video_id: Option<String>,
    },
    /// Train a U-net on DATASET_DIR/frames and DATASET_DIR/masks.
    Train {
        dataset_dir: PathBuf,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long, value_name = "dice|bce")]
        loss: Option<LossKind>,
    },
    /// Write per-frame masks for each video.
    Segment {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Per-frame and summary CSVs (EF, FS, SV, HR) for each video.
    Quantify {
        #[arg(required = true)]
        manifests: Vec<PathBuf>,
    },
    /// Pixel accuracy, Dice and IoU of predicted masks against the truth.
    Eval { pred: PathBuf, truth: PathBuf },
    /// Area series and EF after subsampling to each of --fps-rates.
    Fpscheck { manifest: PathBuf },
}

fn init_threads() -> Result<(), Failure> {
    let Ok(raw) = std::env::var("CARDIOQUANT_THREADS") else {
        return Ok(());
    };
    let n: usize = raw
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| Failure::msg(EXIT_CONFIG, format!("CARDIOQUANT_THREADS must be a positive integer, got {raw:?}")))?;
    rayon::ThreadPoolBuilder::new().num_threads(n).build_global().map_err(Failure::config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    init_threads()?;
    let mut cfg = RunConfig::load(cli.config.as_deref())?;
    cfg.apply(&Overrides {
        backend: cli.backend,
        model: cli.model,
        seed: cli.seed,
        out: cli.out,
        geometry: cli.geometry,
        fps_rates: cli.fps_rates,
    });
    match cli.command {
        Command::Synth { dataset, fps, duration, phase, modulation, beat_freq, video_id } => {
            let args = SynthArgs { dataset, fps, duration, phase, modulation, beat_freq, video_id };
            commands::synth(cfg, &args)
        }
        Command::Train { dataset_dir, epochs, loss } => commands::train(cfg, &TrainArgs { dataset_dir, epochs, loss }),
        Command::Segment { manifests } => commands::segment(cfg, &manifests),
        Command::Quantify { manifests } => commands::quantify_videos(cfg, &manifests),
        Command::Eval { pred, truth } => commands::eval(cfg, &pred, &truth),
        Command::Fpscheck { manifest } => commands::fpscheck(cfg, &manifest),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(EXIT_CONFIG) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
