mod commands;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use graftstereo::cost::CostMethod;
use graftstereo::nets::AdaptorArch;
use graftstereo::pipeline::Stage;

#[derive(Parser, Debug)]
#[command(name = "graftstereo", version, about = "Stereo cost volumes, disparity regression and feature grafting")]
pub struct Cli {
    /// Seed for every random choice; overrides the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// key=value pipeline configuration.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Worker threads for gen-data and eval.
    #[arg(long, global = true, default_value_t = 1, value_parser = clap::value_parser!(u16).range(1..))]
    pub jobs: u16,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Write random-dot stereo pairs with ground truth.
    GenData(GenData),
    /// Write stand-in external features (an untrained, optionally blurred extractor).
    ExportFeatures(ExportFeatures),
    /// Build a cost volume from two feature tensors.
    BuildCost(BuildCost),
    /// Run one training stage and write its checkpoint and loss trace.
    Train(Train),
    /// Attach a trained aggregator to a new feature source.
    Graft(Graft),
    /// Predict disparity maps for a dataset.
    Infer(Infer),
    /// Score predicted disparity maps against ground truth.
    Eval(Eval),
    /// Compare analytic and finite-difference gradients of a toy model.
    GradCheck(GradCheck),
}

#[derive(Args, Debug)]
pub struct GenData {
    /// `constant:d=3`, `twoplane:d1=2,d2=5,split=24`, `slanted:a=..,b=..,c=..`,
    /// or `random` for a fresh two-plane field per sample.
    #[arg(long)]
    pub spec: String,
    #[arg(long, default_value_t = 1)]
    pub count: usize,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 48)]
    pub height: usize,
    #[arg(long, default_value_t = 96)]
    pub width: usize,
    #[arg(long, default_value_t = 1.0)]
    pub density: f64,
    #[arg(long, default_value_t = 0.0)]
    pub noise: f64,
    /// Largest disparity of `random` fields, in network pixels (image pixels / 4).
    #[arg(long, default_value_t = 5)]
    pub max_disp: usize,
}

#[derive(Args, Debug)]
pub struct ExportFeatures {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 16)]
    pub channels: usize,
    /// Box-blur radius applied to the features.
    #[arg(long, default_value_t = 0)]
    pub blur: usize,
}

#[derive(Args, Debug)]
pub struct BuildCost {
    #[arg(long)]
    pub left: PathBuf,
    #[arg(long)]
    pub right: PathBuf,
    #[arg(long)]
    pub d_max: usize,
    #[arg(long, default_value = "cosine")]
    pub method: CostMethod,
    #[arg(long, default_value_t = graftstereo::cost::DEFAULT_EPS)]
    pub eps: f64,
    #[arg(long)]
    pub squared_l2: bool,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Train {
    #[arg(long)]
    pub data: PathBuf,
    /// base, adapt or retrain.
    #[arg(long)]
    pub stage: Stage,
    /// Checkpoint the stage continues from (required after base).
    #[arg(long, value_name = "CKPT")]
    pub from: Option<PathBuf>,
    /// Directory of `{id}_left.tns` / `{id}_right.tns` external features.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Checkpoint root; the stage is written to `<out>/<stage>/`.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub method: Option<CostMethod>,
    #[arg(long)]
    pub d_max: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub adaptor: Option<AdaptorArch>,
}

#[derive(Args, Debug)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["features", "feature_net"]))]
pub struct Graft {
    /// Checkpoint holding the trained aggregator.
    #[arg(long, value_name = "CKPT")]
    pub aggregator: PathBuf,
    /// External feature directory to graft onto.
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Checkpoint whose feature network to graft onto.
    #[arg(long, value_name = "CKPT")]
    pub feature_net: Option<PathBuf>,
    /// Checkpoint whose adaptor to insert between features and cost.
    #[arg(long, value_name = "CKPT")]
    pub adaptor: Option<PathBuf>,
    /// Cost method of the grafted pipeline (defaults to the aggregator's).
    #[arg(long)]
    pub method: Option<CostMethod>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Infer {
    #[arg(long, value_name = "CKPT")]
    pub model: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub features: Option<PathBuf>,
    /// Receives `{id}_disp.pfm` at image resolution, in image pixels.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct Eval {
    /// Directory of `{id}_disp.pfm` predictions.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory with ground truth and masks.
    #[arg(long)]
    pub gt: PathBuf,
    /// Error threshold in pixels.
    #[arg(long, default_value_t = 3.0)]
    pub tau: f64,
    /// CSV destination; standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct GradCheck {
    /// linear, nonlinear, ushape or none.
    #[arg(long, default_value = "ushape")]
    pub adaptor: String,
    #[arg(long, default_value = "cosine")]
    pub method: CostMethod,
    #[arg(long, default_value_t = 4)]
    pub channels: usize,
    #[arg(long, default_value_t = 4)]
    pub height: usize,
    #[arg(long, default_value_t = 8)]
    pub width: usize,
    #[arg(long, default_value_t = 4)]
    pub d_max: usize,
    #[arg(long, default_value_t = 3)]
    pub adaptor_base: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub step: f64,
    #[arg(long, default_value_t = 1e-4)]
    pub tolerance: f64,
    /// Report destination (key=value); standard output when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("GRAFTSTEREO_LOG", "warn")).init();
    let cli = Cli::parse();
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            if e.is::<commands::UsageError>() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}
