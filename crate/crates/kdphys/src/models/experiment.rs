//! Desk-scale experiments on synthetic data: the distillation benchmark and
//! the loss-weight ablation grids.

use super::{
    evaluate_student, train_student, train_teacher, Sample, TeacherNet, TrainConfig, TrainLog,
};
use crate::dataio::{frame_diff, prepare_label, synth_video, SynthConfig};
use crate::error::{Error, Result};
use crate::signal::{HrOptions, MetricReport};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Synthetic train/validation/test splits with known ground truth.
#[derive(Debug, Clone)]
pub struct Benchmark {
    pub train: Vec<Sample>,
    pub val: Vec<Sample>,
    pub test: Vec<Sample>,
}

/// Generate pulsatile clips with per-sequence heart rates, difference them,
/// and pair each with its derivative-domain label.
///
/// `frames` counts the differenced clip; the rendered video has one more
/// frame and must span at least ten seconds at `fps`.
pub fn make_benchmark(
    seed: u64,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    frames: usize,
    hw: usize,
    fps: f64,
) -> Result<Benchmark> {
    let total = n_train + n_val + n_test;
    if total == 0 {
        return Err(Error::Parameter("benchmark needs at least one sequence".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(total);
    for _ in 0..total {
        let cfg = SynthConfig {
            hr_hz: rng.gen_range(0.9..2.3),
            pulse_amp: 0.01,
            noise_sd: 0.002,
            illum_drift_amp: 0.005,
            seed: rng.gen(),
            ..SynthConfig::default()
        };
        let (seq, ppg) = synth_video(&cfg, frames + 1, hw, hw, fps)?;
        let clip = frame_diff(&seq)?;
        let label = prepare_label(&ppg)?.samples().to_vec();
        samples.push(Sample::new(clip, label, fps)?);
    }
    let test = samples.split_off(n_train + n_val);
    let val = samples.split_off(n_train);
    Ok(Benchmark { train: samples, val, test })
}

/// One seed's distilled-versus-plain comparison.
#[derive(Debug, Clone, Copy)]
pub struct KdSeedOutcome {
    pub seed: u64,
    /// Test heart-rate MAE of the student trained with feature distillation.
    pub distilled_mae: f64,
    /// Same student trained with the feature term weighted to zero.
    pub plain_mae: f64,
}

/// Distillation benchmark over several student seeds against one teacher.
#[derive(Debug, Clone)]
pub struct KdBenchmarkReport {
    pub outcomes: Vec<KdSeedOutcome>,
    pub median_distilled_mae: f64,
    pub median_plain_mae: f64,
    pub teacher_log: TrainLog,
}

/// Train one teacher, then for every seed train a distilled student and a
/// feature-loss-free twin with otherwise identical settings, and compare
/// their test heart-rate MAEs.
pub fn kd_benchmark(
    cfg: &TrainConfig,
    seeds: &[u64],
    bench: &Benchmark,
) -> Result<KdBenchmarkReport> {
    if seeds.is_empty() {
        return Err(Error::Parameter("the benchmark needs at least one student seed".into()));
    }
    let (teacher, teacher_log) = train_teacher(&bench.train, &bench.val, cfg)?;
    let hr = HrOptions::default();
    let mut outcomes = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let kd_cfg = TrainConfig { seed, ..*cfg };
        let (kd_net, _) = train_student(&bench.train, &kd_cfg, Some(&teacher))?;
        let plain_cfg = TrainConfig { beta: 0.0, ..kd_cfg };
        let (plain_net, _) = train_student(&bench.train, &plain_cfg, Some(&teacher))?;
        outcomes.push(KdSeedOutcome {
            seed,
            distilled_mae: evaluate_student(&kd_net, &bench.test, &hr)?.mae,
            plain_mae: evaluate_student(&plain_net, &bench.test, &hr)?.mae,
        });
    }
    Ok(KdBenchmarkReport {
        median_distilled_mae: median(outcomes.iter().map(|o| o.distilled_mae)),
        median_plain_mae: median(outcomes.iter().map(|o| o.plain_mae)),
        outcomes,
        teacher_log,
    })
}

fn median(values: impl Iterator<Item = f64>) -> f64 {
    let mut xs: Vec<f64> = values.collect();
    xs.sort_by(|a, b| a.partial_cmp(b).expect("maes are finite"));
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        0.5 * (xs[n / 2 - 1] + xs[n / 2])
    }
}

/// One ablation setting and the test metrics it reached.
#[derive(Debug, Clone)]
pub struct AblationRow {
    pub label: String,
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
    pub report: MetricReport,
}

/// Sweep the shape/temporal blend of the signal loss.
pub fn alpha_ablation(
    cfg: &TrainConfig,
    bench: &Benchmark,
    teacher: Option<&TeacherNet>,
    alphas: &[f64],
) -> Result<Vec<AblationRow>> {
    if alphas.is_empty() {
        return Err(Error::Parameter("the sweep needs at least one blend value".into()));
    }
    let hr = HrOptions::default();
    alphas
        .iter()
        .map(|&alpha| {
            let run = TrainConfig { alpha, ..*cfg };
            let (net, _) = train_student(&bench.train, &run, teacher)?;
            Ok(AblationRow {
                label: format!("alpha={alpha}"),
                alpha,
                beta: run.beta,
                eta: run.eta,
                report: evaluate_student(&net, &bench.test, &hr)?,
            })
        })
        .collect()
}

/// Sweep (feature weight, signal weight) pairs for distilled students.
pub fn loss_weight_grid(
    cfg: &TrainConfig,
    bench: &Benchmark,
    teacher: &TeacherNet,
    grid: &[(f64, f64)],
) -> Result<Vec<AblationRow>> {
    if grid.is_empty() {
        return Err(Error::Parameter("the sweep needs at least one weight pair".into()));
    }
    let hr = HrOptions::default();
    grid.iter()
        .map(|&(beta, eta)| {
            let run = TrainConfig { beta, eta, ..*cfg };
            let (net, _) = train_student(&bench.train, &run, Some(teacher))?;
            Ok(AblationRow {
                label: format!("beta={beta},eta={eta}"),
                alpha: run.alpha,
                beta,
                eta,
                report: evaluate_student(&net, &bench.test, &hr)?,
            })
        })
        .collect()
}
