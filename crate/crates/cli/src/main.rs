//! `patchcam` command-line front end.
//!
//! Exit codes: 0 success, 1 operational failure (or an attack that did not
//! succeed), 2 usage error.

mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "patchcam", version, about = "Grad-CAM fooling adversarial patches on a small CNN")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic shapes dataset (PPM images + manifest.jsonl).
    GenData(GenDataArgs),
    /// Train the default CNN on a dataset directory.
    Train(TrainArgs),
    /// Attack one image, or a dataset split in universal mode.
    Attack(AttackCmdArgs),
    /// Attack and interpret a batch of images and report metrics.
    Evaluate(EvaluateArgs),
    /// Render a heatmap for one image.
    Interpret(InterpretArgs),
    /// Re-run a command from its manifest.
    Rerun(RerunArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    pub n: usize,
    /// Comma-separated subset of disk,square,triangle,cross.
    #[arg(long, value_delimiter = ',', default_value = "disk,square,triangle,cross")]
    pub classes: Vec<String>,
    #[arg(long, default_value_t = 64)]
    pub size: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Model file to write; the report goes to `<out>.report.json`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long, default_value_t = 0.9)]
    pub momentum: f64,
    /// Keep the learning rate fixed instead of cosine-decaying it to 0.
    #[arg(long)]
    pub constant_lr: bool,
    /// Fraction of the dataset tail held out for validation.
    #[arg(long, default_value_t = 0.2)]
    pub held_out: f64,
    /// Seeds weight init and shuffling.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    Targeted,
    Nontargeted,
    Uniform,
    FullImage,
    Universal,
}

#[derive(Args, Debug, Clone)]
pub struct AttackArgs {
    #[arg(long, value_enum)]
    pub mode: ModeArg,
    /// Heatmap term weight; the mode's default when omitted.
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    /// Optimizer steps (epochs in universal mode).
    #[arg(long)]
    pub iterations: Option<usize>,
    /// `step-rnd`, `least-likely`, or a class index.
    #[arg(long, default_value = "step-rnd")]
    pub target: String,
    /// L-infinity budget for full-image mode.
    #[arg(long)]
    pub eps: Option<f64>,
    /// Patch rectangle `x0,y0,w,h`; top-left ~8.2% square by default.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub patch: Option<Vec<usize>>,
    /// Decoy rectangle `x0,y0,w,h` for uniform mode; top-right by default.
    #[arg(long, value_delimiter = ',', num_args = 4)]
    pub decoy: Option<Vec<usize>>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Treat the Grad-CAM channel weights as constants.
    #[arg(long)]
    pub stop_alpha: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Args, Debug)]
pub struct AttackCmdArgs {
    #[arg(long)]
    pub model: PathBuf,
    /// Input PPM image.
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub image: Option<PathBuf>,
    /// Dataset directory (with --index, or the split for universal mode).
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Universal mode: fraction of the dataset tail held out.
    #[arg(long, default_value_t = 0.25)]
    pub held_out: f64,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub attack: AttackArgs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum MethodArg {
    Gradcam,
    Occlusion,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum EvalModeArg {
    None,
    Targeted,
    Nontargeted,
    Uniform,
    FullImage,
    Universal,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// First dataset index to evaluate.
    #[arg(long, default_value_t = 0)]
    pub offset: usize,
    /// Number of images; all remaining when omitted.
    #[arg(long)]
    pub limit: Option<usize>,
    #[arg(long, value_enum, default_value = "none")]
    pub mode: EvalModeArg,
    /// Patch stem (`<stem>.ppm` + `<stem>.json`) for universal mode.
    #[arg(long)]
    pub patch_file: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub eta: Option<f64>,
    #[arg(long)]
    pub iterations: Option<usize>,
    #[arg(long, default_value = "step-rnd")]
    pub target: String,
    #[arg(long)]
    pub eps: Option<f64>,
    #[arg(long)]
    pub stop_alpha: bool,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, value_enum, default_value = "gradcam")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 11)]
    pub occlusion_size: usize,
    #[arg(long, default_value_t = 4)]
    pub occlusion_stride: usize,
    /// Worker threads; results do not depend on it.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Row label in the text table.
    #[arg(long)]
    pub label: Option<String>,
    /// Output directory (report.json, table.txt).
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InterpretArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long, conflicts_with_all = ["data", "index"])]
    pub image: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub index: Option<usize>,
    /// Class to explain; the predicted class by default.
    #[arg(long)]
    pub class: Option<usize>,
    #[arg(long, value_enum, default_value = "gradcam")]
    pub method: MethodArg,
    #[arg(long, default_value_t = 11)]
    pub occlusion_size: usize,
    #[arg(long, default_value_t = 4)]
    pub occlusion_stride: usize,
    /// Blend the colormapped heatmap over the image (PPM output only).
    #[arg(long)]
    pub overlay: bool,
    /// `.pgm` for grayscale, `.ppm` for color.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct RerunArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Write to a different output path instead of the recorded one.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Errors that map to exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

/// An attack that ran to completion without succeeding (exit code 1).
#[derive(Debug)]
pub struct AttackFailed;

impl std::fmt::Display for AttackFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str("attack did not succeed")
    }
}

impl std::error::Error for AttackFailed {}

fn main() -> ExitCode {
    let argv: Vec<String> = std::env::args().skip(1).collect();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match commands::dispatch(cli.command, &argv) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.is::<AttackFailed>() => {
            eprintln!("patchcam: {e}");
            ExitCode::from(1)
        }
        Err(e) if e.is::<UsageError>() => {
            eprintln!("patchcam: usage: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("patchcam: error: {e:#}");
            ExitCode::from(1)
        }
    }
}
