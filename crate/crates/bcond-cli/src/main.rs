//! `bcond`: batch driver for the building condition pipeline.
//!
//! Every command reads its inputs from disk and writes its artifacts into
//! `--out`, so stages can be re-run and inspected independently. Runtime
//! failures print a single `error: ...` line on stderr and exit 1; usage
//! errors exit 2. Set `BCOND_LOG` to `error`, `info`, or `debug` for
//! progress output.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};

use bcond::aggregation::AggregationMethod;
use bcond::classifier::FeatureMode;
use bcond::dataset::SplitLabel;

#[derive(Parser)]
#[command(
    name = "bcond",
    version,
    about = "Building condition estimation from facade photographs"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args)]
pub struct GlobalArgs {
    /// Pipeline configuration file (key=value lines).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed; overrides the configuration file.
    #[arg(long, global = true, value_name = "INT")]
    pub seed: Option<u64>,
    /// Worker threads for extract and predict.
    #[arg(long, global = true, default_value_t = 1, value_name = "INT")]
    pub workers: usize,
    /// Directory receiving all output artifacts.
    #[arg(long, global = true, default_value = ".", value_name = "DIR")]
    pub out: PathBuf,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic facade dataset with split labels.
    Synth(SynthArgs),
    /// Extract selected patches from manifest images into a CSV.
    Extract(ExtractArgs),
    /// Train the patch relevance classifier from labeled patch directories.
    #[command(name = "train_relevance")]
    TrainRelevance(TrainRelevanceArgs),
    /// Train the condition classifier from extracted patches.
    #[command(name = "train_condition")]
    TrainCondition(TrainConditionArgs),
    /// Predict building conditions for a split.
    Predict(PredictArgs),
    /// Score stored predictions against the manifest.
    Evaluate(EvaluateArgs),
    /// Fit the retained-value regression under true and predicted classes.
    Regress(RegressArgs),
}

/// A concrete split or every record regardless of label.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    All,
    One(SplitLabel),
}

impl FromStr for SplitArg {
    type Err = bcond::Error;

    fn from_str(s: &str) -> bcond::Result<Self> {
        if s == "all" {
            Ok(SplitArg::All)
        } else {
            SplitLabel::from_str(s).map(SplitArg::One)
        }
    }
}

/// One aggregation method or both side by side.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MethodArg {
    One(AggregationMethod),
    Both,
}

impl MethodArg {
    pub fn methods(self) -> Vec<AggregationMethod> {
        match self {
            MethodArg::One(m) => vec![m],
            MethodArg::Both => vec![
                AggregationMethod::MajorityVote,
                AggregationMethod::AverageLikelihood,
            ],
        }
    }
}

impl FromStr for MethodArg {
    type Err = bcond::Error;

    fn from_str(s: &str) -> bcond::Result<Self> {
        if s == "both" {
            Ok(MethodArg::Both)
        } else {
            AggregationMethod::from_str(s).map(MethodArg::One)
        }
    }
}

fn parse_counts(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated counts, got '{s}'"));
    }
    let mut out = [0usize; 3];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad count '{part}'"))?;
    }
    Ok(out)
}

fn parse_ratios(s: &str) -> Result<[f64; 3], String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 3 {
        return Err(format!("expected three comma-separated ratios, got '{s}'"));
    }
    let mut out = [0.0f64; 3];
    for (slot, part) in out.iter_mut().zip(parts) {
        *slot = part
            .trim()
            .parse()
            .map_err(|_| format!("bad ratio '{part}'"))?;
    }
    Ok(out)
}

#[derive(Args)]
pub struct SynthArgs {
    /// Houses per class as A,B,C.
    #[arg(long, value_parser = parse_counts, default_value = "20,20,20", value_name = "A,B,C")]
    pub counts: [usize; 3],
    /// Facade image side in pixels.
    #[arg(long, default_value_t = 256, value_name = "PX")]
    pub image_side: usize,
    /// Split ratios as training,validation,test.
    #[arg(long, value_parser = parse_ratios, default_value = "0.6,0.15,0.25", value_name = "TR,VA,TE")]
    pub ratios: [f64; 3],
}

#[derive(Args)]
pub struct ExtractArgs {
    /// Dataset manifest (JSON array of building records).
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Records to process: training, validation, test, or all.
    #[arg(long, default_value = "training", value_name = "SPLIT")]
    pub split: SplitArg,
    /// Relevance model for dropping non-building patches.
    #[arg(long, value_name = "PATH")]
    pub relevance_model: Option<PathBuf>,
    /// Also dump every kept patch as a PNG into this directory.
    #[arg(long, value_name = "DIR")]
    pub dump_dir: Option<PathBuf>,
}

#[derive(Args)]
pub struct TrainRelevanceArgs {
    /// Directory with one subdirectory of patch PNGs per class.
    #[arg(long, value_name = "DIR")]
    pub patches: PathBuf,
    /// Name of the subdirectory holding building-related patches.
    #[arg(long, default_value = "building", value_name = "NAME")]
    pub building_class: String,
}

#[derive(Args)]
pub struct TrainConditionArgs {
    /// Dataset manifest (JSON array of building records).
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Patch CSV produced by extract.
    #[arg(long, value_name = "PATH")]
    pub patches: PathBuf,
    /// Records to train on: training, validation, test, or all.
    #[arg(long, default_value = "training", value_name = "SPLIT")]
    pub split: SplitArg,
    /// Copies per patch including the original; 1 disables augmentation.
    #[arg(long, default_value_t = 1, value_name = "N")]
    pub augment_factor: usize,
    /// Patch features: descriptor or pixels.
    #[arg(long, default_value = "descriptor", value_name = "MODE")]
    pub feature_mode: FeatureMode,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Dataset manifest (JSON array of building records).
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Condition model file from train_condition.
    #[arg(long, value_name = "PATH")]
    pub model: PathBuf,
    /// Records to predict: training, validation, test, or all.
    #[arg(long, default_value = "test", value_name = "SPLIT")]
    pub split: SplitArg,
    /// Aggregation: mv, lh, or both.
    #[arg(long, default_value = "both", value_name = "METHOD")]
    pub method: MethodArg,
    /// Relevance model for dropping non-building patches.
    #[arg(long, value_name = "PATH")]
    pub relevance_model: Option<PathBuf>,
    /// Also write per-patch likelihoods to this CSV.
    #[arg(long, value_name = "PATH")]
    pub patch_out: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Dataset manifest (JSON array of building records).
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Building predictions CSV from predict.
    #[arg(long, value_name = "PATH")]
    pub predictions: PathBuf,
    /// Per-patch likelihood CSV; enables the exemplar report.
    #[arg(long, value_name = "PATH")]
    pub patch_predictions: Option<PathBuf>,
    /// Year valuations refer to, for building ages.
    #[arg(long, default_value_t = 2018, value_name = "YEAR")]
    pub reference_year: i32,
    /// Minimum top likelihood for the confident exemplar lists.
    #[arg(long, default_value_t = 0.75, value_name = "P")]
    pub confidence: f64,
}

#[derive(Args)]
pub struct RegressArgs {
    /// Dataset manifest (JSON array of building records).
    #[arg(long, value_name = "PATH")]
    pub manifest: PathBuf,
    /// Building predictions CSV from predict.
    #[arg(long, value_name = "PATH")]
    pub predictions: PathBuf,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("BCOND_LOG", "error")).init();
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
