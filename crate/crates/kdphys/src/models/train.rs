//! Training loops: supervised teacher pre-training and attention-guided
//! student distillation, both bitwise deterministic for a given seed.

use super::{
    Bound, HeadKind, StudentConfig, StudentNet, TeacherConfig, TeacherNet, TsmConfig, Weights,
    INPUT_CHANNELS, STAGE_CHANNELS,
};
use crate::diffcore::adam::{adam_step, AdamConfig, AdamState};
use crate::diffcore::{Graph, Tensor, TensorId};
use crate::distill::{afd_loss, total_loss, FeaturePair, SEWeights};
use crate::error::{Error, Result};
use crate::losses::{dilate, mse, DilateOptions};
use crate::signal::{estimate_hr, metrics_with_signals, HrOptions, HrSeries, MetricReport, PpgSignal};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Squeeze ratio of the distillation gates.
const SE_REDUCTION: usize = 2;

/// Gate weights come from a stream derived from the main seed, so the
/// student's own draws are identical with and without a teacher.
const GATE_SEED_OFFSET: u64 = 0x5e;

/// One training example: a frame-difference clip with its per-frame target.
#[derive(Debug, Clone)]
pub struct Sample {
    /// (T, 3, H, W) normalised frame differences.
    pub clip: Tensor,
    /// Length-T pulse target in the same derivative domain.
    pub label: Vec<f64>,
    /// Frame rate of the source video, used to interpret predictions.
    pub fps: f64,
}

impl Sample {
    pub fn new(clip: Tensor, label: Vec<f64>, fps: f64) -> Result<Self> {
        if clip.shape.len() != 4 || clip.shape[1] != INPUT_CHANNELS {
            return Err(Error::Dimension(format!(
                "clips are (T, 3, H, W), got {:?}",
                clip.shape
            )));
        }
        if clip.shape[0] != label.len() {
            return Err(Error::Dimension(format!(
                "clip has {} frames but the label has {} samples",
                clip.shape[0],
                label.len()
            )));
        }
        if label.iter().any(|v| !v.is_finite()) {
            return Err(Error::Parameter("labels must be finite".into()));
        }
        if !(fps.is_finite() && fps > 0.0) {
            return Err(Error::Parameter(format!("frame rate must be positive, got {fps}")));
        }
        Ok(Sample { clip, label, fps })
    }
}

/// Hyper-parameters shared by both training stages.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Shape/temporal blend inside the signal loss.
    pub alpha: f64,
    /// Weight of the feature-distillation term.
    pub beta: f64,
    /// Weight of the signal term.
    pub eta: f64,
    /// Soft-DTW smoothing.
    pub gamma: f64,
    /// Scale applied inside the feature loss itself.
    pub lambda_afd: f64,
    pub lr: f64,
    pub batch: usize,
    pub seq_len: usize,
    pub epochs: usize,
    /// Epochs without validation improvement before the teacher stops.
    pub patience: usize,
    pub seed: u64,
    pub input_hw: usize,
    pub tsm: TsmConfig,
    pub head: HeadKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            alpha: 0.5,
            beta: 10.0,
            eta: 10.0,
            gamma: 0.01,
            lambda_afd: 1.0,
            lr: 1e-3,
            batch: 4,
            seq_len: 80,
            epochs: 30,
            patience: 10,
            seed: 7,
            input_hw: 16,
            tsm: TsmConfig::default(),
            head: HeadKind::Deconv,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("beta", self.beta), ("eta", self.eta), ("lambda_afd", self.lambda_afd)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
            }
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Parameter(format!("lr must be positive, got {}", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::Parameter(format!("alpha must lie in [0,1], got {}", self.alpha)));
        }
        if !(self.gamma.is_finite() && self.gamma > 0.0) {
            return Err(Error::Parameter(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.batch == 0 || self.epochs == 0 || self.patience == 0 {
            return Err(Error::Parameter("batch, epochs and patience must be at least 1".into()));
        }
        Ok(())
    }

    fn student_config(&self) -> StudentConfig {
        StudentConfig {
            tsm: self.tsm,
            head: self.head,
            seq_len: self.seq_len,
            input_hw: self.input_hw,
        }
    }
}

/// Losses recorded after each epoch. `signal_loss` and `feature_loss` are
/// the weighted contributions that sum (up to averaging) to `train_loss`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub signal_loss: f64,
    pub feature_loss: f64,
    pub val_loss: Option<f64>,
}

/// Full per-epoch history of one training run.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose weights were kept (teacher early stopping only).
    pub best_epoch: Option<usize>,
}

impl TrainLog {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,signal_loss,feature_loss,val_loss\n");
        for e in &self.epochs {
            let val = e.val_loss.map(|v| v.to_string()).unwrap_or_default();
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.train_loss, e.signal_loss, e.feature_loss, val
            ));
        }
        out
    }
}

fn validate_dataset(what: &str, samples: &[Sample], cfg: &TrainConfig) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::Training(format!("{what} set is empty")));
    }
    let expect = [cfg.seq_len, INPUT_CHANNELS, cfg.input_hw, cfg.input_hw];
    for (i, s) in samples.iter().enumerate() {
        if s.clip.shape != expect {
            return Err(Error::Parameter(format!(
                "{what} sequence {i} is shaped {:?}, the run is configured for {expect:?}",
                s.clip.shape
            )));
        }
    }
    Ok(())
}

/// Adds the epoch to training aborts so the diagnostics say when, not just
/// what, went wrong.
fn step_error(epoch: usize, err: Error) -> Error {
    match err {
        Error::NonFinite(what) => {
            Error::Training(format!("epoch {epoch}: {what} produced a non-finite value"))
        }
        Error::Training(msg) => Error::Training(format!("epoch {epoch}: {msg}")),
        other => other,
    }
}

/// Adam over one named weight store.
struct Optimiser {
    states: Vec<AdamState>,
    cfg: AdamConfig,
}

impl Optimiser {
    fn new(weights: &Weights, lr: f64) -> Self {
        let states = weights.entries().iter().map(|(_, t)| AdamState::new(t.numel())).collect();
        Optimiser { states, cfg: AdamConfig::with_lr(lr) }
    }

    fn step(&mut self, g: &Graph, bound: &Bound, weights: &mut Weights) -> Result<()> {
        for (((_, id), state), tensor) in
            bound.pairs().iter().zip(&mut self.states).zip(weights.tensors_mut())
        {
            let grad = g
                .grad(*id)
                .ok_or_else(|| Error::Training("a parameter received no gradient".into()))?;
            adam_step(&mut tensor.data, grad, state, &self.cfg)?;
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Supervised teacher pre-training: per-frame mean squared error, Adam, and
/// early stopping on validation loss with the best weights restored.
pub fn train_teacher(
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
) -> Result<(TeacherNet, TrainLog)> {
    cfg.validate()?;
    validate_dataset("training", train, cfg)?;
    validate_dataset("validation", val, cfg)?;
    let tcfg = TeacherConfig { seq_len: cfg.seq_len, input_hw: cfg.input_hw };
    let mut net = TeacherNet::init(tcfg, cfg.seed)?;
    let mut opt = Optimiser::new(net.weights(), cfg.lr);
    let mut log = TrainLog::default();
    let mut best = (f64::INFINITY, net.weights().clone(), 0usize);
    let mut stale = 0usize;
    for epoch in 1..=cfg.epochs {
        let mut total = 0.0;
        for batch in train.chunks(cfg.batch) {
            total += teacher_step(&mut net, &mut opt, batch).map_err(|e| step_error(epoch, e))?;
        }
        let train_loss = total / train.chunks(cfg.batch).len() as f64;
        let val_loss = teacher_eval(&net, val)?;
        log.epochs.push(EpochLog {
            epoch,
            train_loss,
            signal_loss: train_loss,
            feature_loss: 0.0,
            val_loss: Some(val_loss),
        });
        if val_loss < best.0 {
            best = (val_loss, net.weights().clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= cfg.patience {
                break;
            }
        }
    }
    *net.weights_mut() = best.1;
    log.best_epoch = Some(best.2);
    Ok((net, log))
}

fn teacher_step(net: &mut TeacherNet, opt: &mut Optimiser, batch: &[Sample]) -> Result<f64> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g)?;
    let mut acc: Option<TensorId> = None;
    for sample in batch {
        let input = g.constant(sample.clip.data.clone(), sample.clip.shape.clone())?;
        let fwd = net.forward(&mut g, input, &bound)?;
        let l = mse(&mut g, fwd.output, &sample.label)?;
        acc = Some(match acc {
            Some(a) => g.add(a, l)?,
            None => l,
        });
    }
    let loss = g.scale(acc.expect("batches are non-empty"), 1.0 / batch.len() as f64)?;
    let value = g.value(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became {value}")));
    }
    g.backward(loss)?;
    opt.step(&g, &bound, net.weights_mut())?;
    Ok(value)
}

fn teacher_eval(net: &TeacherNet, val: &[Sample]) -> Result<f64> {
    let mut total = 0.0;
    for sample in val {
        let mut g = Graph::new();
        let input = g.constant(sample.clip.data.clone(), sample.clip.shape.clone())?;
        let bound = net.bind(&mut g)?;
        let fwd = net.forward(&mut g, input, &bound)?;
        let l = mse(&mut g, fwd.output, &sample.label)?;
        total += g.value(l);
    }
    Ok(total / val.len() as f64)
}

// ---------------------------------------------------------------------------
// Student
// ---------------------------------------------------------------------------

/// Train the student, optionally distilling from a frozen teacher.
///
/// With a teacher, each stage's feature map is pulled towards the teacher's
/// (channel-weighted by jointly trained squeeze-excitation gates) while the
/// output tracks the label under the shape/temporal signal loss; without
/// one, only the signal term remains. The teacher itself never changes: its
/// features enter the graph as constants.
pub fn train_student(
    train: &[Sample],
    cfg: &TrainConfig,
    teacher: Option<&TeacherNet>,
) -> Result<(StudentNet, TrainLog)> {
    cfg.validate()?;
    validate_dataset("training", train, cfg)?;
    let mut net = StudentNet::init(cfg.student_config(), cfg.seed)?;
    let hints: Option<Vec<Vec<Tensor>>> = match teacher {
        Some(t) => {
            if t.cfg.seq_len != cfg.seq_len || t.cfg.input_hw != cfg.input_hw {
                return Err(Error::Architecture(format!(
                    "teacher expects {}-frame {}x{} clips, the run is configured for {}-frame {}x{}",
                    t.cfg.seq_len,
                    t.cfg.input_hw,
                    t.cfg.input_hw,
                    cfg.seq_len,
                    cfg.input_hw,
                    cfg.input_hw
                )));
            }
            let per_sample = train
                .iter()
                .map(|s| t.predict_with_features(&s.clip).map(|(_, f)| f))
                .collect::<Result<Vec<_>>>()?;
            Some(per_sample)
        }
        None => None,
    };
    let mut gates = Weights::new();
    if teacher.is_some() {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_add(GATE_SEED_OFFSET));
        for (l, &c) in STAGE_CHANNELS.iter().enumerate() {
            let hidden = c / SE_REDUCTION;
            gates.draw(&mut rng, &format!("se{}.w1", l + 1), vec![c, hidden], c);
            gates.draw(&mut rng, &format!("se{}.w2", l + 1), vec![hidden, c], hidden);
        }
    }
    let mut opt = Optimiser::new(net.weights(), cfg.lr);
    let mut gate_opt = Optimiser::new(&gates, cfg.lr);
    let opts = DilateOptions { alpha: cfg.alpha, gamma: cfg.gamma, znorm: false };
    let mut log = TrainLog::default();
    for epoch in 1..=cfg.epochs {
        let (mut total, mut signal, mut feature) = (0.0, 0.0, 0.0);
        let mut offset = 0;
        for batch in train.chunks(cfg.batch) {
            let batch_hints = hints.as_ref().map(|h| &h[offset..offset + batch.len()]);
            let (t, s, f) =
                student_step(&mut net, &mut opt, &mut gates, &mut gate_opt, batch, batch_hints, cfg, &opts)
                    .map_err(|e| step_error(epoch, e))?;
            total += t;
            signal += s;
            feature += f;
            offset += batch.len();
        }
        let n = train.chunks(cfg.batch).len() as f64;
        log.epochs.push(EpochLog {
            epoch,
            train_loss: total / n,
            signal_loss: signal / n,
            feature_loss: feature / n,
            val_loss: None,
        });
    }
    Ok((net, log))
}

#[allow(clippy::too_many_arguments)]
fn student_step(
    net: &mut StudentNet,
    opt: &mut Optimiser,
    gates: &mut Weights,
    gate_opt: &mut Optimiser,
    batch: &[Sample],
    hints: Option<&[Vec<Tensor>]>,
    cfg: &TrainConfig,
    opts: &DilateOptions,
) -> Result<(f64, f64, f64)> {
    let mut g = Graph::new();
    let bound = net.bind(&mut g)?;
    let gate_bound = gates.bind(&mut g)?;
    let mut acc: Option<TensorId> = None;
    let (mut signal_value, mut feature_value) = (0.0, 0.0);
    for (k, sample) in batch.iter().enumerate() {
        let input = g.constant(sample.clip.data.clone(), sample.clip.shape.clone())?;
        let fwd = net.forward(&mut g, input, &bound)?;
        let dl = dilate(&mut g, fwd.output, &sample.label, opts)?;
        signal_value += cfg.eta * g.value(dl.total);
        let loss = match hints {
            Some(h) => {
                let feats = &h[k];
                if feats.len() != fwd.stage_features.len() {
                    return Err(Error::Architecture(format!(
                        "teacher supplies {} stage features, the student has {}",
                        feats.len(),
                        fwd.stage_features.len()
                    )));
                }
                let mut pairs = Vec::with_capacity(feats.len());
                let mut se = Vec::with_capacity(feats.len());
                for (l, (hint, &guided)) in feats.iter().zip(&fwd.stage_features).enumerate() {
                    let hint_id = g.constant(hint.data.clone(), hint.shape.clone())?;
                    pairs.push(FeaturePair::new(&g, hint_id, guided, l + 1)?);
                    se.push(SEWeights::from_ids(
                        &g,
                        gate_bound.id(&format!("se{}.w1", l + 1)),
                        gate_bound.id(&format!("se{}.w2", l + 1)),
                    )?);
                }
                let afd = afd_loss(&mut g, &pairs, &se, cfg.lambda_afd)?;
                feature_value += cfg.beta * g.value(afd);
                total_loss(&mut g, afd, dl.total, cfg.beta, cfg.eta)?
            }
            None => g.scale(dl.total, cfg.eta)?,
        };
        acc = Some(match acc {
            Some(a) => g.add(a, loss)?,
            None => loss,
        });
    }
    let inv = 1.0 / batch.len() as f64;
    let loss = g.scale(acc.expect("batches are non-empty"), inv)?;
    let value = g.value(loss);
    if !value.is_finite() {
        return Err(Error::Training(format!("loss became {value}")));
    }
    g.backward(loss)?;
    opt.step(&g, &bound, net.weights_mut())?;
    if hints.is_some() {
        gate_opt.step(&g, &gate_bound, gates)?;
    }
    Ok((value, signal_value * inv, feature_value * inv))
}

// ---------------------------------------------------------------------------
// Evaluation
// ---------------------------------------------------------------------------

/// Heart-rate agreement between student predictions and labels over a test
/// set: every sequence contributes its windowed estimates to one report, and
/// the concatenated pulse traces set the signal-quality figure.
pub fn evaluate_student(
    net: &StudentNet,
    test: &[Sample],
    hr: &HrOptions,
) -> Result<MetricReport> {
    if test.is_empty() {
        return Err(Error::Parameter("evaluation needs at least one sequence".into()));
    }
    let mut pred_hr = Vec::new();
    let mut truth_hr = Vec::new();
    let mut pred_trace = Vec::new();
    let mut truth_trace = Vec::new();
    let mut meta = (hr.window_seconds, 0.0, 0.0);
    for sample in test {
        let pred = net.predict(&sample.clip)?;
        let pred_series = estimate_hr(&PpgSignal::new(pred.clone(), sample.fps)?, hr)?;
        let truth_series = estimate_hr(&PpgSignal::new(sample.label.clone(), sample.fps)?, hr)?;
        meta = (pred_series.window_seconds, pred_series.fs_source, pred_series.bin_bpm);
        pred_hr.extend_from_slice(&pred_series.values);
        truth_hr.extend_from_slice(&truth_series.values);
        pred_trace.extend(pred);
        truth_trace.extend_from_slice(&sample.label);
    }
    let pred = HrSeries::new(pred_hr, meta.0, meta.1, meta.2)?;
    let truth = HrSeries::new(truth_hr, meta.0, meta.1, meta.2)?;
    let fps = test[0].fps;
    metrics_with_signals(
        &pred,
        &truth,
        &PpgSignal::new(pred_trace, fps)?,
        &PpgSignal::new(truth_trace, fps)?,
    )
}
