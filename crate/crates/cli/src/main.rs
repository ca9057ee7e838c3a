use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use log::error;
use superad_cli::pipeline::{self, ThresholdSource};
use superad_cli::{CliError, Overrides, Settings};

/// Training-free anomaly segmentation over pre-extracted ViT features.
#[derive(Parser)]
#[command(name = "superad", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct RunArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    dataset_root: Option<PathBuf>,
    #[arg(long)]
    features_root: Option<PathBuf>,
    /// Output root for banks, maps and reports.
    #[arg(long)]
    output: Option<PathBuf>,
    /// Category to process; repeat for several. Defaults to the config file, then all.
    #[arg(long = "category")]
    categories: Vec<String>,
}

impl RunArgs {
    fn settings(&self, sigma: Option<f64>) -> Result<Settings, CliError> {
        Settings::load(&Overrides {
            config: self.config.clone(),
            dataset_root: self.dataset_root.clone(),
            features_root: self.features_root.clone(),
            output_root: self.output.clone(),
            categories: self.categories.clone(),
            sigma,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Select reference images and build one memory bank per category.
    BuildBank {
        #[command(flatten)]
        run: RunArgs,
        /// Also write foreground masks as PGM files.
        #[arg(long)]
        debug_maps: bool,
    },
    /// Score every image of a split against its category bank.
    Score {
        #[command(flatten)]
        run: RunArgs,
        /// Split to score [default: the configured evaluation split].
        #[arg(long)]
        split: Option<String>,
        /// Gaussian smoothing sigma in pixels, overriding the configuration.
        #[arg(long)]
        sigma: Option<f64>,
        /// Also write per-layer grid maps.
        #[arg(long)]
        debug_maps: bool,
    },
    /// Compute thresholds and metrics against ground truth; write masks and reports.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        split: Option<String>,
        /// Pixel threshold for every category instead of the F1-optimal one.
        #[arg(long)]
        threshold: Option<f32>,
        /// Reuse the thresholds of an earlier report.
        #[arg(long, conflicts_with = "threshold")]
        threshold_from: Option<PathBuf>,
        /// Smoothing sigma the maps were scored with (only affects the recorded configuration).
        #[arg(long)]
        sigma: Option<f64>,
    },
    /// Rebuild the combined report from per-category evaluations.
    Report {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        split: Option<String>,
    },
    /// Blend an anomaly map over its image, next to the thresholded mask.
    Overlay {
        /// `.anom` map file.
        #[arg(long)]
        map: PathBuf,
        /// Source image with the map's dimensions.
        #[arg(long)]
        image: PathBuf,
        /// Output PNG.
        #[arg(long)]
        output: PathBuf,
        /// Mask threshold [default: half the map maximum].
        #[arg(long)]
        threshold: Option<f32>,
    },
}

fn configure_workers() -> Result<(), CliError> {
    let Ok(value) = std::env::var("SUPERAD_WORKERS") else {
        return Ok(());
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("SUPERAD_WORKERS must be a positive integer, got '{value}'")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| CliError::Config(format!("worker pool: {e}")))
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_workers()?;
    match cli.command {
        Command::BuildBank { run, debug_maps } => {
            let settings = run.settings(None)?;
            pipeline::build_banks(&settings, debug_maps)?;
            pipeline::write_manifest(&settings)?;
        }
        Command::Score {
            run,
            split,
            sigma,
            debug_maps,
        } => {
            let settings = run.settings(sigma)?;
            let split = split.unwrap_or_else(|| settings.layout.eval_split.clone());
            pipeline::score(&settings, &split, debug_maps)?;
            pipeline::write_manifest(&settings)?;
        }
        Command::Evaluate {
            run,
            split,
            threshold,
            threshold_from,
            sigma,
        } => {
            let settings = run.settings(sigma)?;
            let split = split.unwrap_or_else(|| settings.layout.eval_split.clone());
            let source = ThresholdSource {
                pixel: threshold,
                frozen: threshold_from,
            };
            let report = pipeline::evaluate(&settings, &split, &source)?;
            pipeline::write_manifest(&settings)?;
            print!("{}", String::from_utf8_lossy(&report.to_csv()));
        }
        Command::Report { run, split } => {
            let settings = run.settings(None)?;
            let split = split.unwrap_or_else(|| settings.layout.eval_split.clone());
            let report = pipeline::report(&settings, &split)?;
            pipeline::write_manifest(&settings)?;
            print!("{}", String::from_utf8_lossy(&report.to_csv()));
        }
        Command::Overlay {
            map,
            image,
            output,
            threshold,
        } => pipeline::overlay(&map, &image, &output, threshold)?,
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            error!("{e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
