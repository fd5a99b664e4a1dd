//! `stainforge`: stain deconvolution, augmentation, synthetic data and
//! H&E-adversarial training from the command line.

mod commands;
mod error;
mod table;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};


#[derive(Debug, Parser)]
#[command(name = "stainforge", version, about = "H&E stain tools and stain-adversarial training")]
struct Cli {
    #[command(flatten)]
    global: GlobalArgs,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct GlobalArgs {
    /// Seed for every random choice; overrides the config file's seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// JSON configuration file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory (created if missing).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum AugmentKind {
    Stain,
    Hsv,
    Geometric,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Estimate the H&E stain matrix and concentrations of an image.
    Deconv {
        #[arg(long)]
        input: PathBuf,
    },
    /// Re-render an image with the stain appearance of a target image.
    Normalize {
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        target: PathBuf,
    },
    /// Write randomly augmented copies of an image.
    Augment {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "stain")]
        kind: AugmentKind,
        #[arg(long, default_value_t = 1)]
        count: usize,
        /// HSV preset: colon or prostate.
        #[arg(long, default_value = "colon")]
        preset: String,
    },
    /// Render a synthetic multi-center dataset.
    GenData {
        /// Patches per class per center (overrides the config).
        #[arg(long)]
        patches_per_class: Option<usize>,
        /// Patch side in pixels (overrides the config).
        #[arg(long)]
        patch_size: Option<usize>,
    },
    /// Train one model on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        mode: Option<String>,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Class probabilities for an image, a directory of images or a dataset.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        input: PathBuf,
    },
    /// Quadratic-weighted kappa between predicted and true labels.
    Eval {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        truth: PathBuf,
        /// Number of classes; defaults to the largest label + 1.
        #[arg(long)]
        classes: Option<usize>,
    },
    /// 2-D PCA projection of the numeric columns of a CSV file.
    Project {
        #[arg(long)]
        input: PathBuf,
        /// Column used to colour the scatter plot.
        #[arg(long)]
        label: Option<String>,
    },
    /// Train several modes repeatedly and compare their kappa scores.
    Compare {
        /// Dataset directory (overrides the config's `data`).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Worker threads; 0 uses every core.
        #[arg(long)]
        jobs: Option<usize>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli.command, &cli.global) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
