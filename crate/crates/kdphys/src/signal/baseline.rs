//! Colour-projection pulse-extraction baselines (POS and CHROM).

use crate::dataio::FrameSequence;
use crate::error::{Error, Result};
use crate::signal::{butterworth_bandpass, PpgSignal};

/// Window length for the plane-orthogonal-to-skin projection, in seconds.
const POS_WINDOW_SECONDS: f64 = 1.6;

fn population_sd(x: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    (x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n).sqrt()
}

/// Plane-orthogonal-to-skin pulse extraction: per sliding window, temporally
/// normalise the mean-RGB trace, project onto [0, 1, -1] and [-2, 1, 1],
/// combine with the adaptive sigma ratio, and overlap-add.
pub fn pos_baseline(frames: &FrameSequence) -> Result<PpgSignal> {
    let fs = frames.fps();
    let t = frames.t();
    let l = (POS_WINDOW_SECONDS * fs).round() as usize;
    if l < 2 || t < l {
        return Err(Error::Parameter(format!(
            "projection needs at least {POS_WINDOW_SECONDS} s of frames ({l} at {fs} fps), got {t}"
        )));
    }
    let c = frames.channel_means();
    let mut h = vec![0.0; t];
    for start in 0..=t - l {
        let window = &c[start..start + l];
        let mut mu = [0.0; 3];
        for rgb in window {
            for k in 0..3 {
                mu[k] += rgb[k];
            }
        }
        for m in &mut mu {
            *m /= l as f64;
            if m.abs() < 1e-12 {
                return Err(Error::DegenerateSignal(
                    "a channel averages to zero; cannot normalise the trace".into(),
                ));
            }
        }
        let (mut s1, mut s2) = (Vec::with_capacity(l), Vec::with_capacity(l));
        for rgb in window {
            let [rn, gn, bn] = [rgb[0] / mu[0], rgb[1] / mu[1], rgb[2] / mu[2]];
            s1.push(gn - bn);
            s2.push(-2.0 * rn + gn + bn);
        }
        let sd2 = population_sd(&s2);
        let alpha = if sd2 > 0.0 { population_sd(&s1) / sd2 } else { 0.0 };
        let mut hw: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let mean = hw.iter().sum::<f64>() / l as f64;
        for v in &mut hw {
            *v -= mean;
        }
        for (i, v) in hw.iter().enumerate() {
            h[start + i] += v;
        }
    }
    PpgSignal::new(h, fs)
}

/// Chrominance pulse extraction: band-pass the globally normalised channel
/// traces, form Xs = 3R - 2G and Ys = 1.5R + G - 1.5B, and combine as
/// Xs - (sigma(Xs)/sigma(Ys)) * Ys.
pub fn chrom_baseline(frames: &FrameSequence) -> Result<PpgSignal> {
    let fs = frames.fps();
    let c = frames.channel_means();
    let mut channels: [Vec<f64>; 3] = Default::default();
    for k in 0..3 {
        let trace: Vec<f64> = c.iter().map(|rgb| rgb[k]).collect();
        let mu = trace.iter().sum::<f64>() / trace.len() as f64;
        if mu.abs() < 1e-12 {
            return Err(Error::DegenerateSignal(
                "a channel averages to zero; cannot normalise the trace".into(),
            ));
        }
        let centred: Vec<f64> = trace.iter().map(|v| v / mu - 1.0).collect();
        let filtered = butterworth_bandpass(&PpgSignal::new(centred, fs)?, 0.75, 3.0, 2)?;
        channels[k] = filtered.samples().to_vec();
    }
    let [rf, gf, bf] = channels;
    let xs: Vec<f64> = rf.iter().zip(&gf).map(|(r, g)| 3.0 * r - 2.0 * g).collect();
    let ys: Vec<f64> = rf
        .iter()
        .zip(&gf)
        .zip(&bf)
        .map(|((r, g), b)| 1.5 * r + g - 1.5 * b)
        .collect();
    let sd_y = population_sd(&ys);
    let alpha = if sd_y > 1e-12 { population_sd(&xs) / sd_y } else { 0.0 };
    let pulse: Vec<f64> = xs.iter().zip(&ys).map(|(x, y)| x - alpha * y).collect();
    PpgSignal::new(pulse, fs)
}
