//! Argument surface. Every struct doubles as the configuration snapshot
//! recorded in the run manifest, so all of them serialize.

use clap::{Args, Parser, Subcommand, ValueEnum};
use kdphys::models::{HeadKind, TsmConfig, TsmVariant};
use kdphys::{Error, Result};
use serde::Serialize;
use std::path::PathBuf;

#[derive(Parser)]
#[command(
    name = "kdphys",
    version,
    about = "Pulse-from-video toolkit: synthesis, preprocessing, training, distillation, and evaluation"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Render a synthetic pulsatile clip and its ground-truth pulse.
    Synth(SynthArgs),
    /// Turn a raw video tensor into a network input clip and aligned label.
    Preprocess(PreprocessArgs),
    /// Fit the 3-D reference network on a labelled dataset.
    TrainTeacher(TrainTeacherArgs),
    /// Fit the lightweight network, optionally guided by a trained teacher.
    Distill(DistillArgs),
    /// Run a trained network or a colour-projection method on a clip.
    Infer(InferArgs),
    /// Estimate windowed heart rate from a pulse trace.
    EstimateHr(EstimateHrArgs),
    /// Compare two heart-rate series and write agreement tables.
    Evaluate(EvaluateArgs),
    /// Cross-check the fast alignment losses against brute-force references.
    OracleCheck(OracleCheckArgs),
}

#[derive(Args, Serialize)]
pub struct SynthArgs {
    /// Pulse frequency in Hz (0.75-3).
    #[arg(long, default_value_t = 1.5)]
    pub hr: f64,
    /// Clip duration in seconds (at least 10).
    #[arg(long, default_value_t = 30.0)]
    pub seconds: f64,
    #[arg(long, default_value_t = 30.0)]
    pub fps: f64,
    /// Square frame edge in pixels.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Relative pulsation amplitude.
    #[arg(long, default_value_t = 0.01)]
    pub pulse_amp: f64,
    /// Second-harmonic fraction of the fundamental.
    #[arg(long, default_value_t = 0.25)]
    pub harmonic_amp: f64,
    /// Additive Gaussian pixel noise level.
    #[arg(long, default_value_t = 0.0)]
    pub noise_sd: f64,
    /// Global illumination drift frequency in Hz.
    #[arg(long, default_value_t = 0.1)]
    pub drift_hz: f64,
    /// Global illumination drift amplitude (0 disables drift).
    #[arg(long, default_value_t = 0.0)]
    pub drift_amp: f64,
    /// Peak rigid translation of the skin region, in pixels.
    #[arg(long, default_value_t = 0.0)]
    pub motion_amp: f64,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    /// Video tensor output (frames x height x width x 3).
    #[arg(long)]
    pub out_video: PathBuf,
    /// Ground-truth pulse trace output.
    #[arg(long)]
    pub out_truth: PathBuf,
}

#[derive(Args, Serialize)]
pub struct PreprocessArgs {
    /// Input video tensor (frames x height x width x 3).
    #[arg(long)]
    pub video: PathBuf,
    /// Frame rate of the video in Hz.
    #[arg(long)]
    pub fps: f64,
    /// Raw pulse trace to turn into a training label (one sample per frame).
    #[arg(long)]
    pub ppg: Option<PathBuf>,
    /// Normalised frame-difference clip output (frames-1 x 3 x h x w).
    #[arg(long)]
    pub out_clip: PathBuf,
    /// Prepared label output; required when --ppg is given.
    #[arg(long)]
    pub out_label: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct TrainTeacherArgs {
    /// Directory of <stem>.clip.kdt / <stem>.label.csv training pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Held-out pairs driving early stopping.
    #[arg(long)]
    pub val: PathBuf,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Epochs without validation improvement before stopping.
    #[arg(long, default_value_t = 10)]
    pub patience: usize,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV training curve.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct DistillArgs {
    /// Directory of <stem>.clip.kdt / <stem>.label.csv training pairs.
    #[arg(long)]
    pub data: PathBuf,
    /// Teacher checkpoint; omit to train the student on labels alone.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
    /// Shape/temporal blend inside the signal loss (0-1).
    #[arg(long, default_value_t = 0.5)]
    pub alpha: f64,
    /// Weight of the feature-distillation term.
    #[arg(long, default_value_t = 10.0)]
    pub beta: f64,
    /// Weight of the signal term.
    #[arg(long, default_value_t = 10.0)]
    pub eta: f64,
    /// Alignment smoothing temperature.
    #[arg(long, default_value_t = 0.01)]
    pub gamma: f64,
    /// Scale applied inside the feature loss itself.
    #[arg(long, default_value_t = 1.0)]
    pub lambda_afd: f64,
    /// Temporal-shift variant: 1 plain, 2 pooled, 3 deconvolution-normalised.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=3))]
    pub tsm: u8,
    /// Prediction head.
    #[arg(long, value_enum, default_value_t = HeadArg::Deconv)]
    pub head: HeadArg,
    #[arg(long, default_value_t = 7)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 4)]
    pub batch: usize,
    /// Checkpoint output.
    #[arg(long)]
    pub out: PathBuf,
    /// Optional CSV training curve.
    #[arg(long)]
    pub log: Option<PathBuf>,
}

impl DistillArgs {
    pub fn tsm_config(&self) -> Result<TsmConfig> {
        let variant = match self.tsm {
            1 => TsmVariant::Tsm1,
            2 => TsmVariant::Tsm2,
            3 => TsmVariant::Tsm3,
            other => return Err(Error::Parameter(format!("no shift variant {other}"))),
        };
        Ok(TsmConfig::with_variant(variant))
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum HeadArg {
    Deconv,
    Dense,
}

impl From<HeadArg> for HeadKind {
    fn from(arg: HeadArg) -> Self {
        match arg {
            HeadArg::Deconv => HeadKind::Deconv,
            HeadArg::Dense => HeadKind::Dense,
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum BaselineArg {
    Pos,
    Chrom,
    None,
}

#[derive(Args, Serialize)]
pub struct InferArgs {
    /// Trained checkpoint (either network kind).
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Preprocessed clip tensor (frames x 3 x h x w) for --model runs.
    #[arg(long)]
    pub clip: Option<PathBuf>,
    /// Colour-projection method run directly on the raw video instead.
    #[arg(long, value_enum, default_value_t = BaselineArg::None)]
    pub baseline: BaselineArg,
    /// Raw video tensor (frames x height x width x 3) for --baseline runs.
    #[arg(long)]
    pub video: Option<PathBuf>,
    /// Frame rate of the source video in Hz.
    #[arg(long)]
    pub fps: f64,
    /// Predicted pulse trace output.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Serialize)]
pub struct EstimateHrArgs {
    /// Pulse trace to analyse.
    #[arg(long)]
    pub ppg: PathBuf,
    #[arg(long, default_value_t = 10.0)]
    pub window_seconds: f64,
    /// Window stride; defaults to non-overlapping windows.
    #[arg(long)]
    pub stride_seconds: Option<f64>,
    /// Search band in Hz as lo:hi, inside 0.75-3.
    #[arg(long, default_value = "0.75:3", value_parser = parse_band)]
    pub band: (f64, f64),
    /// Heart-rate series output (JSON).
    #[arg(long)]
    pub out: PathBuf,
}

fn parse_band(s: &str) -> std::result::Result<(f64, f64), String> {
    let (lo, hi) = s.split_once(':').ok_or("expected lo:hi, e.g. 0.75:3")?;
    let lo: f64 = lo.trim().parse().map_err(|_| format!("bad lower edge {lo:?}"))?;
    let hi: f64 = hi.trim().parse().map_err(|_| format!("bad upper edge {hi:?}"))?;
    Ok((lo, hi))
}

#[derive(Args, Serialize)]
pub struct EvaluateArgs {
    /// Predicted heart-rate series (JSON).
    #[arg(long)]
    pub pred: PathBuf,
    /// Ground-truth heart-rate series (JSON).
    #[arg(long)]
    pub truth: PathBuf,
    /// Predicted pulse trace; give both traces to fill in the
    /// signal-quality column.
    #[arg(long, requires = "truth_ppg")]
    pub pred_ppg: Option<PathBuf>,
    /// Ground-truth pulse trace.
    #[arg(long, requires = "pred_ppg")]
    pub truth_ppg: Option<PathBuf>,
    /// Metric table output (CSV with a header row).
    #[arg(long)]
    pub out_report: PathBuf,
    /// Per-window agreement table output (mean_bpm, diff_bpm).
    #[arg(long)]
    pub out_ba: Option<PathBuf>,
    /// Per-window correlation table output (truth_bpm, pred_bpm).
    #[arg(long)]
    pub out_corr: Option<PathBuf>,
}

#[derive(Args, Serialize)]
pub struct OracleCheckArgs {
    /// Sequence length for the brute-force enumeration (2-8).
    #[arg(long, default_value_t = 5)]
    pub k: usize,
    /// Number of random sequence pairs.
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Smoothing temperatures to test.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 0.1, 0.01])]
    pub gammas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}
