//! Seeded synthetic pulsatile video with known ground truth.

use crate::dataio::{FrameSequence, SequenceMeta};
use crate::error::{Error, Result};
use crate::signal::PpgSignal;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

/// Generator settings. The pulse modulates an elliptical "skin" region of
/// otherwise flat frames; drift and noise act globally.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    /// Fundamental pulse frequency in Hz, inside the 0.75-3 Hz metric band.
    pub hr_hz: f64,
    /// Relative pulsation amplitude.
    pub pulse_amp: f64,
    /// Second-harmonic fraction of the fundamental.
    pub harmonic_amp: f64,
    /// Additive Gaussian pixel noise level.
    pub noise_sd: f64,
    /// Global illumination drift frequency (Hz) and amplitude.
    pub illum_drift_hz: f64,
    pub illum_drift_amp: f64,
    /// Peak rigid translation of the skin region, in pixels.
    pub motion_amp_px: f64,
    /// Per-channel pulsation strength (R, G, B). Blood-volume changes show
    /// mostly in green, so the default keeps the channels distinct — a
    /// channel-uniform pulse would be invisible to colour-projection
    /// baselines by construction.
    pub pulse_weights: [f64; 3],
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            hr_hz: 1.5,
            pulse_amp: 0.01,
            harmonic_amp: 0.25,
            noise_sd: 0.0,
            illum_drift_hz: 0.1,
            illum_drift_amp: 0.0,
            motion_amp_px: 0.0,
            pulse_weights: [0.5, 1.0, 0.7],
            seed: 7,
        }
    }
}

const BASE_COLOR: [f64; 3] = [0.55, 0.45, 0.35];
const MOTION_HZ: f64 = 0.25;

/// True inside the elliptical face-like region of a `height` x `width` frame.
pub fn skin_mask(row: usize, col: usize, height: usize, width: usize) -> bool {
    let cy = (height as f64 - 1.0) / 2.0;
    let cx = (width as f64 - 1.0) / 2.0;
    let ry = 0.38 * height as f64;
    let rx = 0.30 * width as f64;
    let dy = (row as f64 - cy) / ry;
    let dx = (col as f64 - cx) / rx;
    dy * dy + dx * dx <= 1.0
}

/// Render a clip and return it with its ground-truth pulse trace
/// p(t) = sin(2*pi*hr*t) + harmonic_amp*sin(4*pi*hr*t).
pub fn synth_video(
    cfg: &SynthConfig,
    t: usize,
    height: usize,
    width: usize,
    fps: f64,
) -> Result<(FrameSequence, PpgSignal)> {
    if !(0.75..=3.0).contains(&cfg.hr_hz) {
        return Err(Error::Parameter(format!(
            "pulse frequency {} Hz outside the 0.75-3 Hz band",
            cfg.hr_hz
        )));
    }
    if cfg.pulse_amp <= 0.0 {
        return Err(Error::Parameter("pulse_amp must be positive".into()));
    }
    if cfg.noise_sd < 0.0 || cfg.illum_drift_amp < 0.0 || cfg.motion_amp_px < 0.0 {
        return Err(Error::Parameter("noise, drift, and motion amplitudes must be >= 0".into()));
    }
    if !fps.is_finite() || fps <= 0.0 {
        return Err(Error::Parameter(format!("frame rate must be positive, got {fps}")));
    }
    if (t as f64) / fps < 10.0 {
        return Err(Error::Parameter(format!(
            "clip of {t} frames at {fps} fps is shorter than the 10 s needed for HR evaluation"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let noise = Normal::new(0.0, cfg.noise_sd.max(f64::MIN_POSITIVE))
        .map_err(|e| Error::Parameter(format!("noise distribution: {e}")))?;

    let tau = 2.0 * std::f64::consts::PI;
    let pulse: Vec<f64> = (0..t)
        .map(|i| {
            let s = i as f64 / fps;
            (tau * cfg.hr_hz * s).sin() + cfg.harmonic_amp * (tau * 2.0 * cfg.hr_hz * s).sin()
        })
        .collect();

    let mut data = Vec::with_capacity(t * height * width * 3);
    for (i, &p) in pulse.iter().enumerate() {
        let s = i as f64 / fps;
        let drift = cfg.illum_drift_amp * (tau * cfg.illum_drift_hz * s).sin();
        let shift = (cfg.motion_amp_px * (tau * MOTION_HZ * s).sin()).round() as isize;
        for row in 0..height {
            for col in 0..width {
                let src_col = col as isize - shift;
                let masked = src_col >= 0
                    && (src_col as usize) < width
                    && skin_mask(row, src_col as usize, height, width);
                for c in 0..3 {
                    let modulation =
                        if masked { cfg.pulse_amp * cfg.pulse_weights[c] * p } else { 0.0 };
                    let mut v = BASE_COLOR[c] * (1.0 + modulation) + drift;
                    if cfg.noise_sd > 0.0 {
                        v += noise.sample(&mut rng);
                    }
                    data.push(v.clamp(0.0, 1.0));
                }
            }
        }
    }

    let frames = FrameSequence::new(data, t, height, width, fps)?.with_meta(SequenceMeta {
        subject: format!("synth-{}", cfg.seed),
        condition: "synthetic".into(),
    });
    let truth = PpgSignal::new(pulse, fps)?;
    Ok((frames, truth))
}
