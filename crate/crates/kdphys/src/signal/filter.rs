//! Butterworth band-pass filtering via cascaded biquad sections and
//! zero-phase (forward-backward) application.

use crate::error::{Error, Result};
use crate::signal::PpgSignal;
use rustfft::num_complex::Complex64;

/// One second-order IIR section in direct form II transposed.
#[derive(Debug, Clone, Copy)]
struct Biquad {
    b: [f64; 3],
    a: [f64; 2], // a0 normalised to 1
}

impl Biquad {
    /// Filter with the state pre-loaded to its steady-state response for a
    /// step at the first sample's level, so a constant input produces its
    /// steady-state output from sample 0 instead of a start-up transient.
    fn filter_in_place(&self, x: &mut [f64]) {
        let u0 = x[0];
        let h1 = (self.b[0] + self.b[1] + self.b[2]) / (1.0 + self.a[0] + self.a[1]);
        let y0 = h1 * u0;
        let mut z1 = y0 - self.b[0] * u0;
        let mut z2 = self.b[2] * u0 - self.a[1] * y0;
        for v in x.iter_mut() {
            let input = *v;
            let out = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[0] * out + z2;
            z2 = self.b[2] * input - self.a[1] * out;
            *v = out;
        }
    }

    /// |H(e^{j 2 pi f / fs})|
    #[cfg(test)]
    fn gain_at(&self, f: f64, fs: f64) -> f64 {
        let w = 2.0 * std::f64::consts::PI * f / fs;
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = Complex64::new(self.b[0], 0.0) + z1 * self.b[1] + z2 * self.b[2];
        let den = Complex64::new(1.0, 0.0) + z1 * self.a[0] + z2 * self.a[1];
        (num / den).norm()
    }
}

/// Analogue band-pass sections for a Butterworth prototype of the given
/// order, centred on `w0` with bandwidth `bw` (both rad/s, already warped).
///
/// Each prototype pole p maps the low-pass s to the band-pass plane through
/// s_lp = (s^2 + w0^2) / (bw * s); a real pole yields one section directly
/// and a conjugate pair yields two sections from the quartic's root pairs.
fn analog_bandpass_sections(order: usize, w0: f64, bw: f64) -> Vec<(f64, f64)> {
    // Each section is s^2 + b1*s + b0 in the denominator (unit leading term).
    let mut sections = Vec::new();
    let n = order as f64;
    let mut k = 0usize;
    while k < order {
        let theta = std::f64::consts::PI * (2.0 * k as f64 + n + 1.0) / (2.0 * n);
        let pole = Complex64::from_polar(1.0, theta);
        if pole.im.abs() < 1e-12 {
            // Real prototype pole at -1: denominator s^2 + bw*s + w0^2.
            sections.push((w0 * w0, bw));
            k += 1;
        } else {
            // Conjugate pair: solve s^2 - p*bw*s + w0^2 = 0 for each root
            // pair; the two (conjugate-closed) quadratics are
            // (s - r)(s - conj(r)) for the two roots r of one member.
            let half = pole * bw * 0.5;
            let disc = (half * half - Complex64::new(w0 * w0, 0.0)).sqrt();
            for root in [half + disc, half - disc] {
                let b1 = -2.0 * root.re;
                let b0 = root.norm_sqr();
                sections.push((b0, b1));
            }
            k += 2;
        }
    }
    sections
}

/// Digital biquads for an order-`order` Butterworth band-pass over
/// (`lo`, `hi`) Hz at sampling rate `fs`, unity gain at the geometric
/// centre frequency.
fn design_bandpass(order: usize, lo: f64, hi: f64, fs: f64) -> Vec<Biquad> {
    // Pre-warp the band edges so the bilinear transform lands them exactly.
    let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
    let (wl, wh) = (warp(lo), warp(hi));
    let w0 = (wl * wh).sqrt();
    let bw = wh - wl;

    let k = 2.0 * fs;
    analog_bandpass_sections(order, w0, bw)
        .into_iter()
        .map(|(b0, b1)| {
            // Per-section numerator g*s with g chosen so the section has
            // unit gain at w0: |g*j*w0| = |(jw0)^2 + b1*jw0 + b0|.
            let g = {
                let num = ((b0 - w0 * w0).powi(2) + (b1 * w0).powi(2)).sqrt();
                num / w0
            };
            // Bilinear transform s = k*(z-1)/(z+1) of g*s / (s^2 + b1*s + b0).
            let a0 = k * k + b1 * k + b0;
            Biquad {
                b: [g * k / a0, 0.0, -g * k / a0],
                a: [(2.0 * b0 - 2.0 * k * k) / a0, (k * k - b1 * k + b0) / a0],
            }
        })
        .collect()
}

/// Zero-phase Butterworth band-pass. The cascade runs forward and then
/// backward over the samples, so the pass-band is applied twice (gain
/// squared) and the phase response cancels exactly.
pub fn butterworth_bandpass(signal: &PpgSignal, lo: f64, hi: f64, order: usize) -> Result<PpgSignal> {
    let fs = signal.fs();
    if !(lo > 0.0 && hi > lo) {
        return Err(Error::Parameter(format!("need 0 < lo < hi, got ({lo}, {hi})")));
    }
    if hi >= fs / 2.0 {
        return Err(Error::Parameter(format!(
            "upper edge {hi} Hz reaches the Nyquist rate {} Hz",
            fs / 2.0
        )));
    }
    if order == 0 || order > 8 {
        return Err(Error::Parameter(format!("filter order must be in 1..=8, got {order}")));
    }
    let pad = 3 * 2 * order + 1;
    if signal.len() <= pad {
        return Err(Error::Parameter(format!(
            "signal of {} samples is too short for order {order} (needs > {pad})",
            signal.len()
        )));
    }

    let sections = design_bandpass(order, lo, hi, fs);

    // Reflect-pad both ends to tame start-up transients, mirroring the
    // classic filtfilt treatment.
    let x = signal.samples();
    let mut buf = Vec::with_capacity(x.len() + 2 * pad);
    let first = x[0];
    let last = x[x.len() - 1];
    buf.extend((1..=pad).rev().map(|i| 2.0 * first - x[i]));
    buf.extend_from_slice(x);
    buf.extend((1..=pad).rev().map(|i| 2.0 * last - x[x.len() - 1 - i]));

    for s in &sections {
        s.filter_in_place(&mut buf);
    }
    buf.reverse();
    for s in &sections {
        s.filter_in_place(&mut buf);
    }
    buf.reverse();

    let out: Vec<f64> = buf[pad..pad + x.len()].to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("band-pass filter output".into()));
    }
    PpgSignal::new(out, fs)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(f: f64, fs: f64, n: usize) -> PpgSignal {
        let s: Vec<f64> =
            (0..n).map(|i| (2.0 * std::f64::consts::PI * f * i as f64 / fs).sin()).collect();
        PpgSignal::new(s, fs).unwrap()
    }

    /// Steady-state amplitude ratio measured away from the edges.
    fn amplitude_ratio(filtered: &PpgSignal, original: &PpgSignal) -> f64 {
        let n = filtered.len();
        let core = n / 4..3 * n / 4;
        let peak = |s: &PpgSignal| {
            s.samples()[core.clone()].iter().fold(0.0f64, |m, &v| m.max(v.abs()))
        };
        peak(filtered) / peak(original)
    }

    #[test]
    fn passband_tone_survives() {
        let x = sine(1.5, 30.0, 1800);
        let y = butterworth_bandpass(&x, 0.75, 3.0, 2).unwrap();
        let ratio = amplitude_ratio(&y, &x);
        assert!((0.9..=1.0 + 1e-9).contains(&ratio), "1.5 Hz gain {ratio}");
    }

    #[test]
    fn stopband_tone_is_attenuated() {
        let x = sine(0.2, 30.0, 1800);
        let y = butterworth_bandpass(&x, 0.75, 3.0, 2).unwrap();
        let ratio = amplitude_ratio(&y, &x);
        let db = 20.0 * ratio.log10();
        assert!(db <= -20.0, "0.2 Hz leakage is only {db:.1} dB");
    }

    #[test]
    fn dc_is_removed_exactly() {
        let x = PpgSignal::new(vec![5.0; 600], 30.0).unwrap();
        let y = butterworth_bandpass(&x, 0.75, 3.0, 2).unwrap();
        let peak = y.samples().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        assert!(peak < 1e-8, "constant input leaks {peak} through the band-pass");
    }

    #[test]
    fn zero_phase_in_the_passband() {
        // Forward-backward filtering must not delay a pass-band tone:
        // the filtered signal stays in phase with the input.
        let fs = 30.0;
        let x = sine(1.5, fs, 1800);
        let y = butterworth_bandpass(&x, 0.75, 3.0, 2).unwrap();
        let core = 450..1350;
        let mut dot = 0.0;
        let mut nx = 0.0;
        let mut ny = 0.0;
        for i in core {
            dot += x.samples()[i] * y.samples()[i];
            nx += x.samples()[i] * x.samples()[i];
            ny += y.samples()[i] * y.samples()[i];
        }
        let cosine = dot / (nx.sqrt() * ny.sqrt());
        assert!(cosine > 0.999, "phase drift: cosine similarity {cosine}");
    }

    #[test]
    fn cascade_gain_is_unity_at_centre() {
        let sections = design_bandpass(2, 0.75, 3.0, 30.0);
        // Geometric centre of the pre-warped band edges, mapped back to Hz.
        let fs = 30.0;
        let warp = |f: f64| 2.0 * fs * (std::f64::consts::PI * f / fs).tan();
        let w0 = (warp(0.75) * warp(3.0)).sqrt();
        let f0 = fs / std::f64::consts::PI * (w0 / (2.0 * fs)).atan();
        let gain: f64 = sections.iter().map(|s| s.gain_at(f0, fs)).product();
        assert!((gain - 1.0).abs() < 1e-9, "centre gain {gain}");
    }

    #[test]
    fn rejects_bad_parameters() {
        let x = sine(1.5, 30.0, 600);
        assert!(butterworth_bandpass(&x, 3.0, 0.75, 2).is_err(), "inverted band");
        assert!(butterworth_bandpass(&x, 0.75, 15.0, 2).is_err(), "edge at Nyquist");
        assert!(butterworth_bandpass(&x, 0.75, 3.0, 0).is_err(), "zero order");
        let short = PpgSignal::new(vec![0.0, 1.0, 0.0, 1.0], 30.0).unwrap();
        assert!(butterworth_bandpass(&short, 0.75, 3.0, 2).is_err(), "too short");
    }

    #[test]
    fn mixed_tones_keep_only_the_band() {
        // 0.2 Hz drift + 1.5 Hz pulse + 5 Hz flicker: only the pulse stays.
        let fs = 30.0;
        let n = 1800;
        let mix: Vec<f64> = (0..n)
            .map(|i| {
                let t = i as f64 / fs;
                let w = 2.0 * std::f64::consts::PI;
                3.0 * (w * 0.2 * t).sin() + 1.0 * (w * 1.5 * t).sin() + 2.0 * (w * 5.0 * t).sin()
            })
            .collect();
        let x = PpgSignal::new(mix, fs).unwrap();
        let y = butterworth_bandpass(&x, 0.75, 3.0, 2).unwrap();
        let reference = sine(1.5, fs, n);
        let core = n / 4..3 * n / 4;
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in core {
            let d = y.samples()[i] - reference.samples()[i];
            err += d * d;
            norm += reference.samples()[i] * reference.samples()[i];
        }
        let rel = (err / norm).sqrt();
        assert!(rel < 0.15, "band extraction error {rel}");
    }
}
