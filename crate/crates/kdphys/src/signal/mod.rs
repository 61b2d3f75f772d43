//! 1-D signal processing and evaluation: band-pass filtering, windowed
//! spectral heart-rate estimation, error metrics, and the classic POS/CHROM
//! colour-projection baselines.

mod baseline;
mod filter;
mod spectrum;

pub use baseline::{chrom_baseline, pos_baseline};
pub use filter::butterworth_bandpass;
pub use spectrum::{estimate_hr, HrOptions};

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};

/// A sampled pulse trace.
#[derive(Debug, Clone)]
pub struct PpgSignal {
    samples: Vec<f64>,
    fs: f64,
}

impl PpgSignal {
    pub fn new(samples: Vec<f64>, fs: f64) -> Result<Self> {
        if !fs.is_finite() || fs <= 0.0 {
            return Err(Error::Parameter(format!("sampling rate must be positive, got {fs}")));
        }
        if samples.len() < 2 {
            return Err(Error::Parameter(format!(
                "a signal needs at least 2 samples, got {}",
                samples.len()
            )));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("signal construction".into()));
        }
        Ok(PpgSignal { samples, fs })
    }

    pub fn samples(&self) -> &[f64] {
        &self.samples
    }

    pub fn fs(&self) -> f64 {
        self.fs
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        false // the constructor guarantees >= 2 samples
    }

    pub fn duration_seconds(&self) -> f64 {
        self.samples.len() as f64 / self.fs
    }
}

/// Heart-rate estimates, one per analysis window.
#[derive(Debug, Clone)]
pub struct HrSeries {
    pub values: Vec<f64>,
    pub window_seconds: f64,
    pub fs_source: f64,
    /// Spectral resolution of one FFT bin, in bpm.
    pub bin_bpm: f64,
}

impl HrSeries {
    pub fn new(values: Vec<f64>, window_seconds: f64, fs_source: f64, bin_bpm: f64) -> Result<Self> {
        if window_seconds <= 0.0 {
            return Err(Error::Parameter("window_seconds must be positive".into()));
        }
        if let Some(bad) = values.iter().find(|v| !(45.0..=180.0).contains(*v)) {
            return Err(Error::Contract(format!(
                "heart-rate value {bad} bpm outside the 45-180 bpm band"
            )));
        }
        Ok(HrSeries { values, window_seconds, fs_source, bin_bpm })
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Agreement statistics between predicted and reference heart rates.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae: f64,
    pub rmse: f64,
    pub pearson: f64,
    pub nmse: f64,
    /// NaN when no signal pair was supplied; +inf for a perfect match.
    pub psnr_db: f64,
    pub ba_mean_diff: f64,
    pub ba_sd: f64,
    pub n_windows: usize,
}

impl MetricReport {
    /// One key:value pair per line.
    pub fn to_text(&self) -> String {
        format!(
            "mae: {}\nrmse: {}\npearson: {}\nnmse: {}\npsnr_db: {}\nba_mean_diff: {}\nba_sd: {}\nn_windows: {}\n",
            self.mae,
            self.rmse,
            self.pearson,
            self.nmse,
            self.psnr_db,
            self.ba_mean_diff,
            self.ba_sd,
            self.n_windows
        )
    }

    pub fn csv_header() -> &'static str {
        "mae,rmse,pearson,nmse,psnr_db,ba_mean_diff,ba_sd,n_windows"
    }

    pub fn to_csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.mae,
            self.rmse,
            self.pearson,
            self.nmse,
            self.psnr_db,
            self.ba_mean_diff,
            self.ba_sd,
            self.n_windows
        )
    }
}

/// Compare two heart-rate series window by window. `psnr_db` is left NaN;
/// use [`metrics_with_signals`] to fill it from the underlying pulse traces.
pub fn metrics(pred: &HrSeries, truth: &HrSeries) -> Result<MetricReport> {
    let (p, t) = (&pred.values, &truth.values);
    if p.len() != t.len() {
        return Err(Error::Parameter(format!(
            "window-count mismatch: {} predicted vs {} reference",
            p.len(),
            t.len()
        )));
    }
    if p.len() < 2 {
        return Err(Error::Parameter("metrics need at least 2 windows".into()));
    }
    let n = p.len() as f64;
    let mae = p.iter().zip(t).map(|(a, b)| (a - b).abs()).sum::<f64>() / n;
    let mse = p.iter().zip(t).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let rmse = mse.sqrt();
    let pearson = pearson_corr(p, t)?;
    let nmse = {
        let num = p.iter().zip(t).map(|(a, b)| (b - a) * (b - a)).sum::<f64>();
        if num == 0.0 {
            0.0
        } else {
            let pred_mean = p.iter().sum::<f64>() / n;
            let den = t.iter().map(|b| (b - pred_mean) * (b - pred_mean)).sum::<f64>();
            if den == 0.0 {
                return Err(Error::DegenerateSignal(
                    "normalised-error denominator is zero (constant reference equal to the prediction mean)"
                        .into(),
                ));
            }
            num / den
        }
    };
    let diffs: Vec<f64> = p.iter().zip(t).map(|(a, b)| a - b).collect();
    let ba_mean_diff = diffs.iter().sum::<f64>() / n;
    // Sample standard deviation, the usual Bland-Altman convention.
    let ba_sd =
        (diffs.iter().map(|d| (d - ba_mean_diff) * (d - ba_mean_diff)).sum::<f64>() / (n - 1.0))
            .sqrt();
    Ok(MetricReport {
        mae,
        rmse,
        pearson,
        nmse,
        psnr_db: f64::NAN,
        ba_mean_diff,
        ba_sd,
        n_windows: p.len(),
    })
}

/// Full report including the PSNR of the underlying pulse traces.
pub fn metrics_with_signals(
    pred_hr: &HrSeries,
    truth_hr: &HrSeries,
    pred_sig: &PpgSignal,
    truth_sig: &PpgSignal,
) -> Result<MetricReport> {
    let mut report = metrics(pred_hr, truth_hr)?;
    report.psnr_db = psnr(pred_sig, truth_sig)?;
    Ok(report)
}

fn pearson_corr(p: &[f64], t: &[f64]) -> Result<f64> {
    let n = p.len() as f64;
    let pm = p.iter().sum::<f64>() / n;
    let tm = t.iter().sum::<f64>() / n;
    let mut num = 0.0;
    let mut dp = 0.0;
    let mut dt = 0.0;
    for (a, b) in p.iter().zip(t) {
        num += (a - pm) * (b - tm);
        dp += (a - pm) * (a - pm);
        dt += (b - tm) * (b - tm);
    }
    if dp == 0.0 {
        return Err(Error::UndefinedCorrelation("predicted"));
    }
    if dt == 0.0 {
        return Err(Error::UndefinedCorrelation("reference"));
    }
    Ok((num / (dp.sqrt() * dt.sqrt())).clamp(-1.0, 1.0))
}

/// Peak signal-to-noise ratio between two pulse traces. Both are
/// z-normalised first; MAX is the largest absolute reference value after
/// normalisation. A perfect match reports +inf.
pub fn psnr(pred: &PpgSignal, truth: &PpgSignal) -> Result<f64> {
    if pred.len() != truth.len() {
        return Err(Error::Parameter(format!(
            "psnr length mismatch: {} vs {}",
            pred.len(),
            truth.len()
        )));
    }
    let pn = znorm(pred.samples())?;
    let tn = znorm(truth.samples())?;
    let n = pn.len() as f64;
    let mse = pn.iter().zip(&tn).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    let max_abs = tn.iter().fold(0.0f64, |m, &v| m.max(v.abs()));
    Ok(psnr_db(max_abs, mse))
}

/// The raw formula: 10 * log10(max^2 / mse); +inf when mse is zero.
pub fn psnr_db(max_abs: f64, mse: f64) -> f64 {
    if mse == 0.0 {
        f64::INFINITY
    } else {
        10.0 * (max_abs * max_abs / mse).log10()
    }
}

/// Z-normalise with the population standard deviation.
pub(crate) fn znorm(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateSignal("constant signal has no shape to normalise".into()));
    }
    let sd = var.sqrt();
    Ok(x.iter().map(|v| (v - mean) / sd).collect())
}
