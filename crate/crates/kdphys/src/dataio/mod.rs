//! Frame containers, preprocessing into network inputs and training labels,
//! synthetic pulsatile video, and the on-disk file formats.

mod files;
mod synth;

pub use files::{
    file_digest, read_checkpoint, read_ppg, read_tensor, write_checkpoint, write_ppg,
    write_tensor, CheckpointHeader, TensorEntry,
};
pub use synth::{skin_mask, synth_video, SynthConfig};

use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use crate::signal::{butterworth_bandpass, PpgSignal};
use serde::{Deserialize, Serialize};

/// Free-form provenance carried alongside a clip.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SequenceMeta {
    pub subject: String,
    pub condition: String,
}

/// A clip of RGB frames, stored as unit-interval floats in (frame, row,
/// column, channel) order with channels R, G, B.
#[derive(Debug, Clone)]
pub struct FrameSequence {
    data: Vec<f64>,
    t: usize,
    height: usize,
    width: usize,
    fps: f64,
    pub meta: SequenceMeta,
}

impl FrameSequence {
    pub fn new(data: Vec<f64>, t: usize, height: usize, width: usize, fps: f64) -> Result<Self> {
        if t < 2 || height == 0 || width == 0 {
            return Err(Error::Parameter(format!(
                "frame geometry ({t}, {height}, {width}) needs t >= 2 and nonzero spatial dims"
            )));
        }
        if !fps.is_finite() || fps <= 0.0 {
            return Err(Error::Parameter(format!("frame rate must be positive, got {fps}")));
        }
        let expected = t * height * width * 3;
        if data.len() != expected {
            return Err(Error::Dimension(format!(
                "frame buffer holds {} values, geometry needs {expected}",
                data.len()
            )));
        }
        if data.iter().any(|v| !(0.0..=1.0).contains(v)) {
            return Err(Error::Parameter(
                "frame values must be unit-interval floats".into(),
            ));
        }
        Ok(FrameSequence { data, t, height, width, fps, meta: SequenceMeta::default() })
    }

    pub fn with_meta(mut self, meta: SequenceMeta) -> Self {
        self.meta = meta;
        self
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn pixel(&self, t: usize, h: usize, w: usize) -> [f64; 3] {
        let base = ((t * self.height + h) * self.width + w) * 3;
        [self.data[base], self.data[base + 1], self.data[base + 2]]
    }

    /// Spatial mean of each channel, one triple per frame.
    pub fn channel_means(&self) -> Vec<[f64; 3]> {
        self.channel_means_where(|_, _| true)
    }

    /// Channel means restricted to pixels where `keep(row, col)` holds.
    pub fn channel_means_where(&self, keep: impl Fn(usize, usize) -> bool) -> Vec<[f64; 3]> {
        let kept: Vec<(usize, usize)> = (0..self.height)
            .flat_map(|h| (0..self.width).map(move |w| (h, w)))
            .filter(|&(h, w)| keep(h, w))
            .collect();
        let count = kept.len().max(1) as f64;
        (0..self.t)
            .map(|t| {
                let mut acc = [0.0; 3];
                for &(h, w) in &kept {
                    let p = self.pixel(t, h, w);
                    for c in 0..3 {
                        acc[c] += p[c];
                    }
                }
                [acc[0] / count, acc[1] / count, acc[2] / count]
            })
            .collect()
    }
}

/// Per-pixel ratio difference between consecutive frames, before any
/// normalisation: (c(t+1) - c(t)) / (c(t) + c(t+1) + 1), laid out as
/// (t, channel, row, column).
pub fn frame_diff_raw(seq: &FrameSequence) -> Result<Tensor> {
    let (t, h, w) = (seq.t(), seq.height(), seq.width());
    if t < 2 {
        return Err(Error::Parameter("frame differencing needs at least 2 frames".into()));
    }
    let mut out = vec![0.0; (t - 1) * 3 * h * w];
    for ti in 0..t - 1 {
        for c in 0..3 {
            for hi in 0..h {
                for wi in 0..w {
                    let a = seq.pixel(ti, hi, wi)[c];
                    let b = seq.pixel(ti + 1, hi, wi)[c];
                    out[((ti * 3 + c) * h + hi) * w + wi] = (b - a) / (a + b + 1.0);
                }
            }
        }
    }
    Tensor::new(out, vec![t - 1, 3, h, w])
}

/// Network input: ratio frame differences z-normalised over the whole clip.
pub fn frame_diff(seq: &FrameSequence) -> Result<Tensor> {
    let raw = frame_diff_raw(seq)?;
    let normalised = crate::signal::znorm(&raw.data)
        .map_err(|_| Error::DegenerateSignal("clip has no frame-to-frame variation".into()))?;
    Tensor::new(normalised, raw.shape.clone())
}

/// Training label from a reference pulse trace: first difference,
/// z-normalisation, then a zero-phase 0.5-3 Hz band-pass. The output is one
/// sample shorter than the input, matching the frame-difference length.
pub fn prepare_label(ppg: &PpgSignal) -> Result<PpgSignal> {
    if ppg.len() < 3 {
        return Err(Error::Parameter(format!(
            "label preparation needs at least 3 samples, got {}",
            ppg.len()
        )));
    }
    let x = ppg.samples();
    let diff: Vec<f64> = x.windows(2).map(|p| p[1] - p[0]).collect();
    let normalised = crate::signal::znorm(&diff)
        .map_err(|_| Error::DegenerateSignal("constant reference trace has a zero derivative".into()))?;
    let sig = PpgSignal::new(normalised, ppg.fs())?;
    butterworth_bandpass(&sig, 0.5, 3.0, 1)
}
