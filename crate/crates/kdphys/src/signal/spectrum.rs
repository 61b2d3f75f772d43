//! Windowed spectral heart-rate estimation.

use crate::error::{Error, Result};
use crate::signal::{HrSeries, PpgSignal};
use rustfft::num_complex::Complex64;
use rustfft::FftPlanner;

/// Windowing and band settings for [`estimate_hr`].
#[derive(Debug, Clone, Copy)]
pub struct HrOptions {
    pub window_seconds: f64,
    /// `None` keeps windows non-overlapping (stride = window).
    pub stride_seconds: Option<f64>,
    /// Search band in Hz; must stay inside (0.75, 3.0) so every estimate
    /// lands in the 45-180 bpm range.
    pub band: (f64, f64),
}

impl Default for HrOptions {
    fn default() -> Self {
        HrOptions { window_seconds: 10.0, stride_seconds: None, band: (0.75, 3.0) }
    }
}

/// Estimate heart rate per analysis window: mean-subtract, taper with a Hann
/// window, zero-pad to the next power of two at least 4x the window length,
/// and convert the in-band magnitude peak to beats per minute.
pub fn estimate_hr(signal: &PpgSignal, opts: &HrOptions) -> Result<HrSeries> {
    let fs = signal.fs();
    let (lo, hi) = opts.band;
    if !(lo < hi) {
        return Err(Error::Parameter(format!("need band lo < hi, got ({lo}, {hi})")));
    }
    if lo < 0.75 - 1e-12 || hi > 3.0 + 1e-12 {
        return Err(Error::Parameter(format!(
            "band ({lo}, {hi}) Hz leaves the 45-180 bpm range"
        )));
    }
    if opts.window_seconds <= 0.0 {
        return Err(Error::Parameter("window_seconds must be positive".into()));
    }
    let window = (opts.window_seconds * fs).round() as usize;
    if window < 4 {
        return Err(Error::Parameter(format!(
            "window of {window} samples is too short for spectral analysis"
        )));
    }
    if signal.len() < window {
        return Err(Error::Parameter(format!(
            "signal of {} samples is shorter than one {window}-sample window",
            signal.len()
        )));
    }
    let stride = match opts.stride_seconds {
        None => window,
        Some(s) => {
            let st = (s * fs).round() as usize;
            if st == 0 {
                return Err(Error::Parameter("stride must cover at least one sample".into()));
            }
            st
        }
    };

    let nfft = (4 * window).next_power_of_two();
    let fft = FftPlanner::new().plan_fft_forward(nfft);
    let hann: Vec<f64> = (0..window)
        .map(|i| {
            0.5 * (1.0 - (2.0 * std::f64::consts::PI * i as f64 / (window as f64 - 1.0)).cos())
        })
        .collect();

    let x = signal.samples();
    let mut values = Vec::new();
    let mut start = 0;
    while start + window <= x.len() {
        let slab = &x[start..start + window];
        let energy: f64 = slab.iter().map(|v| v * v).sum();
        let mean = slab.iter().sum::<f64>() / window as f64;
        let mut buf = vec![Complex64::new(0.0, 0.0); nfft];
        for (i, (&v, &w)) in slab.iter().zip(&hann).enumerate() {
            buf[i].re = (v - mean) * w;
        }
        fft.process(&mut buf);

        let mut best: Option<(usize, f64)> = None;
        for (k, c) in buf.iter().enumerate().take(nfft / 2 + 1) {
            let f = k as f64 * fs / nfft as f64;
            if f < lo || f > hi {
                continue;
            }
            let power = c.norm_sqr();
            if best.map_or(true, |(_, p)| power > p) {
                best = Some((k, power));
            }
        }
        let (peak_bin, peak_power) = best.ok_or_else(|| {
            Error::Parameter(format!("no FFT bin falls inside ({lo}, {hi}) Hz"))
        })?;
        // Mean subtraction of a constant window leaves rounding residue
        // rather than exact zeros, so judge the peak against the raw window
        // energy instead of comparing with zero.
        if peak_power <= energy * 1e-24 {
            return Err(Error::DegenerateSignal(format!(
                "window starting at sample {start} has no in-band energy"
            )));
        }
        values.push(60.0 * peak_bin as f64 * fs / nfft as f64);
        start += stride;
    }

    HrSeries::new(values, opts.window_seconds, fs, 60.0 * fs / nfft as f64)
}
