//! `ctseg`: command-line front end for the segmentation pipeline.

mod commands;
mod run_manifest;

use std::fmt;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;

/// Misuse of the command line detected after parsing.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "ctseg", version, about = "CT volume segmentation pipeline", arg_required_else_help = true)]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone)]
pub struct Global {
    /// Base seed for every stochastic step.
    #[arg(long, global = true, env = "CTSEG_SEED", default_value_t = 0)]
    pub seed: u64,
    /// Worker thread cap.
    #[arg(long, global = true, env = "CTSEG_THREADS")]
    pub threads: Option<usize>,
    /// Where to write the metrics report.
    #[arg(long, global = true, env = "CTSEG_REPORT")]
    pub report: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a phantom dataset and its manifest.
    Synth(SynthArgs),
    /// Sample dataset intensity statistics.
    Stats(StatsArgs),
    /// Window, normalize, reduce slices and downsample volumes.
    Preprocess(PreprocessArgs),
    /// Apply the augmentation chain to one volume and record the trace.
    Augment(AugmentArgs),
    /// Assign manifest entries to cross-validation folds.
    Folds(FoldsArgs),
    /// Train the reference segmenter on one fold split.
    Train(TrainArgs),
    /// Predict probability maps and labels with trained parameters.
    Predict(PredictArgs),
    /// Score predicted labels against ground truth.
    Evaluate(EvaluateArgs),
    /// Select, train and apply stacked ensembles.
    #[command(subcommand)]
    Stack(StackCommand),
    /// Run the built-in invariant suite.
    Selftest,
}

#[derive(Args, Debug, Clone)]
pub struct WindowArgs {
    /// Named window preset (organ, bone, lung); overrides the quantiles.
    #[arg(long)]
    pub window: Option<String>,
    #[arg(long, default_value_t = 0.6)]
    pub q_low: f64,
    #[arg(long, default_value_t = 0.99)]
    pub q_high: f64,
}

#[derive(Args, Debug, Clone)]
pub struct LossArgs {
    /// Tanimoto weight.
    #[arg(long, default_value_t = 0.6)]
    pub alpha: f64,
    /// Cross-entropy weight.
    #[arg(long, default_value_t = 0.4)]
    pub beta: f64,
    #[arg(long, default_value_t = 1e-5)]
    pub smooth: f64,
    /// Average the Tanimoto term over foreground classes only.
    #[arg(long)]
    pub foreground_only: bool,
}

#[derive(Args, Debug, Clone)]
pub struct AugmentFlags {
    /// Maximum rotation angle in degrees.
    #[arg(long, default_value_t = 16.0)]
    pub rot_max: f64,
    #[arg(long, default_value_t = 0.05)]
    pub noise_sigma: f64,
    #[arg(long, default_value_t = 0.1)]
    pub skip_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub interp_rate: f64,
    #[arg(long, default_value_t = 0.1)]
    pub shift_max: f64,
    #[arg(long, default_value_t = 0.9)]
    pub policy_2d: f64,
    #[arg(long, default_value_t = 0.8)]
    pub policy_3d: f64,
    #[arg(long, default_value_t = 0.2)]
    pub shift_prob: f64,
    /// Disable every augmentation.
    #[arg(long)]
    pub no_augment: bool,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModeArg {
    #[value(name = "2d")]
    TwoD,
    #[value(name = "3d")]
    ThreeD,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetArg {
    Multiclass,
    Binary,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SliceModeArg {
    Training,
    Inference,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum TotalArg {
    Pooled,
    Mean,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum CombinerArg {
    Mean,
    Weighted,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 20)]
    pub n: usize,
    #[arg(long, default_value_t = 64)]
    pub size_min: usize,
    #[arg(long, default_value_t = 64)]
    pub size_max: usize,
    #[arg(long, default_value_t = 16)]
    pub slices_min: usize,
    #[arg(long, default_value_t = 32)]
    pub slices_max: usize,
    /// Slice thickness range in mm.
    #[arg(long, default_value_t = 1.0)]
    pub thickness_min: f64,
    #[arg(long, default_value_t = 5.0)]
    pub thickness_max: f64,
    /// Noise standard deviation in HU.
    #[arg(long, default_value_t = 12.0)]
    pub noise: f64,
}

#[derive(Args, Debug)]
pub struct StatsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Fraction of volumes sampled.
    #[arg(long, default_value_t = 0.2)]
    pub fraction: f64,
    #[command(flatten)]
    pub window: WindowArgs,
}

/// One volume (`--input`) or every entry of a manifest (`--manifest`).
#[derive(Args, Debug, Clone)]
pub struct InputArgs {
    #[arg(long, conflicts_with = "manifest")]
    pub input: Option<PathBuf>,
    /// Ground-truth labels of `--input`.
    #[arg(long, requires = "input")]
    pub labels: Option<PathBuf>,
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Fold plan restricting a manifest to one fold.
    #[arg(long, requires = "manifest", requires = "fold")]
    pub plan: Option<PathBuf>,
    #[arg(long, requires = "plan")]
    pub fold: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PreprocessArgs {
    #[command(flatten)]
    pub inputs: InputArgs,
    /// Intensity statistics from `stats`.
    #[arg(long)]
    pub stats: PathBuf,
    /// Output volume file, or directory for a manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Output labels file for `--input`.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long, default_value_t = 16)]
    pub slices: usize,
    /// In-plane size after downsampling.
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, value_enum, default_value_t = SliceModeArg::Inference)]
    pub slice_mode: SliceModeArg,
    /// Keep every slice.
    #[arg(long)]
    pub all_slices: bool,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Args, Debug)]
pub struct AugmentArgs {
    /// Normalized input volume.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub labels: Option<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::ThreeD)]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub batch_id: u64,
    #[command(flatten)]
    pub augment: AugmentFlags,
}

#[derive(Args, Debug)]
pub struct FoldsArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Fold plan; computed from the manifest with `--k` when absent.
    #[arg(long)]
    pub plan: Option<PathBuf>,
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Held-out validation fold.
    #[arg(long, default_value_t = 0)]
    pub fold: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = ModeArg::TwoD)]
    pub mode: ModeArg,
    #[arg(long, value_enum, default_value_t = TargetArg::Multiclass)]
    pub target: TargetArg,
    #[arg(long, default_value_t = 28)]
    pub batch_2d: usize,
    #[arg(long, default_value_t = 1)]
    pub batch_3d: usize,
    #[arg(long, default_value_t = 5000)]
    pub max_epochs: usize,
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 16)]
    pub slices: usize,
    #[arg(long, default_value_t = 128)]
    pub size: usize,
    #[arg(long, default_value_t = 0.2)]
    pub stats_fraction: f64,
    /// Fixed intensity statistics instead of sampling them.
    #[arg(long)]
    pub stats: Option<PathBuf>,
    /// Draw training slices once per volume.
    #[arg(long)]
    pub freeze_slices: bool,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub loss: LossArgs,
    #[command(flatten)]
    pub augment: AugmentFlags,
}

#[derive(Args, Debug)]
pub struct PredictArgs {
    /// Trained parameters.
    #[arg(long)]
    pub params: PathBuf,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long)]
    pub stats: PathBuf,
    /// Probability map file, or output directory for a manifest.
    #[arg(long)]
    pub out: PathBuf,
    /// Predicted labels for `--input`.
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    /// Preprocessed ground truth for `--input`.
    #[arg(long, requires = "labels")]
    pub truth_out: Option<PathBuf>,
    /// In-plane size; native resolution when absent.
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub window: WindowArgs,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Predicted labels.
    #[arg(long, requires = "truth", conflicts_with = "predictions")]
    pub pred: Option<PathBuf>,
    #[arg(long)]
    pub truth: Option<PathBuf>,
    /// Table of `id, probmap, prediction, truth` written by `predict`.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = TotalArg::Pooled)]
    pub total: TotalArg,
    /// Report file; defaults to `--report`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum StackCommand {
    /// Keep the top-n candidates of an ensemble file.
    Select(StackSelectArgs),
    /// Fit the stacker on member outputs for held-out volumes.
    Train(StackTrainArgs),
    /// Run an ensemble.
    Predict(StackPredictArgs),
}

#[derive(Args, Debug)]
pub struct StackSelectArgs {
    /// Ensemble file listing candidate members.
    #[arg(long)]
    pub candidates: PathBuf,
    #[arg(long, default_value_t = 5)]
    pub top_n: usize,
    #[arg(long, value_enum, default_value_t = CombinerArg::Mean)]
    pub combiner: CombinerArg,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct StackTrainArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long, requires = "fold")]
    pub plan: Option<PathBuf>,
    #[arg(long, requires = "plan")]
    pub fold: Option<usize>,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long, default_value_t = 200)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    /// Output directory for the stacker and the updated ensemble file.
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub window: WindowArgs,
    #[command(flatten)]
    pub loss: LossArgs,
}

#[derive(Args, Debug)]
pub struct StackPredictArgs {
    #[arg(long)]
    pub spec: PathBuf,
    #[command(flatten)]
    pub inputs: InputArgs,
    #[arg(long)]
    pub stats: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub labels_out: Option<PathBuf>,
    #[arg(long, requires = "labels")]
    pub truth_out: Option<PathBuf>,
    #[arg(long)]
    pub size: Option<usize>,
    #[command(flatten)]
    pub window: WindowArgs,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = match e.kind() {
                clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion => 0,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    if let Some(n) = cli.global.threads {
        if n == 0 {
            eprintln!("error: --threads must be >= 1");
            return ExitCode::from(EXIT_USAGE);
        }
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n).build_global() {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_DATA);
        }
    }
    match commands::run(&cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.downcast_ref::<UsageError>().is_some() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::from(EXIT_DATA)
            }
        }
    }
}
