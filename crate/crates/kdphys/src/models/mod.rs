//! Pulse-extraction networks: a lightweight 2-D student with temporal-shift
//! blocks and a 3-D convolutional teacher, plus their shared building blocks.

mod experiment;
mod train;

pub use experiment::{
    alpha_ablation, kd_benchmark, loss_weight_grid, make_benchmark, AblationRow, Benchmark,
    KdBenchmarkReport, KdSeedOutcome,
};
pub use train::{
    evaluate_student, train_student, train_teacher, EpochLog, Sample, TrainConfig, TrainLog,
};

use crate::dataio::{read_checkpoint, write_checkpoint, CheckpointHeader, TensorEntry};
use crate::diffcore::{Graph, NormKind, NormOptions, NormStats, Tensor, TensorId};
use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::path::Path;

/// Feature channels produced by the six convolution stages of both networks.
pub const STAGE_CHANNELS: [usize; 6] = [4, 8, 8, 16, 16, 8];

/// Input colour channels (frame-difference clips keep RGB).
pub const INPUT_CHANNELS: usize = 3;

// ---------------------------------------------------------------------------
// Named parameter store
// ---------------------------------------------------------------------------

/// Ordered, named collection of host-side parameter tensors.
///
/// The entry order is fixed at initialisation and doubles as the checkpoint
/// manifest order, so serialising and re-reading a network is lossless.
#[derive(Debug, Clone, Default)]
pub struct Weights {
    entries: Vec<(String, Tensor)>,
}

impl Weights {
    pub fn new() -> Self {
        Self::default()
    }

    fn insert(&mut self, name: &str, tensor: Tensor) {
        debug_assert!(self.get(name).is_none(), "duplicate weight name {name}");
        self.entries.push((name.to_string(), tensor));
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Overwrite one tensor's values, keeping its shape.
    pub fn set(&mut self, name: &str, data: Vec<f64>) -> Result<()> {
        let entry = self
            .entries
            .iter_mut()
            .find(|(n, _)| n == name)
            .ok_or_else(|| Error::Architecture(format!("no parameter named {name}")))?;
        if data.len() != entry.1.numel() {
            return Err(Error::Dimension(format!(
                "{name} holds {} values, got {}",
                entry.1.numel(),
                data.len()
            )));
        }
        entry.1.data = data;
        Ok(())
    }

    pub fn entries(&self) -> &[(String, Tensor)] {
        &self.entries
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.numel()).sum()
    }

    /// All values concatenated in manifest order.
    pub fn flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.total_len());
        for (_, t) in &self.entries {
            out.extend_from_slice(&t.data);
        }
        out
    }

    /// Replace every tensor's values from a manifest-order blob.
    pub fn load_flat(&mut self, blob: &[f64]) -> Result<()> {
        if blob.len() != self.total_len() {
            return Err(Error::Dimension(format!(
                "weight blob holds {} values, the network wants {}",
                blob.len(),
                self.total_len()
            )));
        }
        let mut offset = 0;
        for (_, t) in &mut self.entries {
            let n = t.numel();
            t.data.copy_from_slice(&blob[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    pub(crate) fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.entries.iter_mut().map(|(_, t)| t)
    }

    /// Insert every tensor into a graph as a trainable parameter.
    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        let mut pairs = Vec::with_capacity(self.entries.len());
        for (name, t) in &self.entries {
            let id = g.param(t.data.clone(), t.shape.clone())?;
            pairs.push((name.clone(), id));
        }
        Ok(Bound { pairs })
    }

    pub fn manifest(&self) -> Vec<TensorEntry> {
        self.entries
            .iter()
            .map(|(name, t)| TensorEntry { name: name.clone(), shape: t.shape.clone() })
            .collect()
    }

    fn draw(&mut self, rng: &mut impl Rng, name: &str, shape: Vec<usize>, fan_in: usize) {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| rng.gen_range(-bound..bound)).collect();
        self.insert(name, Tensor::new(data, shape).expect("init shapes are consistent"));
    }

    fn fill(&mut self, name: &str, shape: Vec<usize>, value: f64) {
        let n: usize = shape.iter().product();
        self.insert(name, Tensor::new(vec![value; n], shape).expect("init shapes are consistent"));
    }
}

/// Graph ids for one binding of a [`Weights`] store.
#[derive(Debug, Clone)]
pub struct Bound {
    pairs: Vec<(String, TensorId)>,
}

impl Bound {
    /// Look up a parameter's node id. Panics on an unknown name, which can
    /// only happen through a programming error in the network code itself.
    pub fn id(&self, name: &str) -> TensorId {
        self.pairs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
            .unwrap_or_else(|| panic!("no bound parameter named {name}"))
    }

    pub fn pairs(&self) -> &[(String, TensorId)] {
        &self.pairs
    }
}

// ---------------------------------------------------------------------------
// Temporal-shift blocks
// ---------------------------------------------------------------------------

/// Which temporal-shift block wraps each convolution stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum TsmVariant {
    /// Plain partial channel shift.
    Tsm1,
    /// Average-pools the feature map before shifting at reduction stages.
    Tsm2,
    /// Temporal deconvolution plus batch norm before the shift.
    Tsm3,
}

/// Shift settings shared by every stage of a network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TsmConfig {
    pub variant: TsmVariant,
    /// Channels are split into `1/fold_div` shifted left, `1/fold_div`
    /// shifted right, and the remainder left in place.
    pub fold_div: usize,
}

impl Default for TsmConfig {
    fn default() -> Self {
        TsmConfig { variant: TsmVariant::Tsm1, fold_div: 3 }
    }
}

impl TsmConfig {
    pub fn with_variant(variant: TsmVariant) -> Self {
        TsmConfig { variant, ..Self::default() }
    }
}

/// Split a channel count into (left, right, static) shift group sizes.
///
/// Both moving groups take `floor(channels / fold_div)` channels; whatever
/// remains stays put.
pub fn shift_split(channels: usize, fold_div: usize) -> Result<(usize, usize, usize)> {
    if fold_div < 2 {
        return Err(Error::Parameter(format!("fold divisor must be at least 2, got {fold_div}")));
    }
    if channels < fold_div {
        return Err(Error::Parameter(format!(
            "temporal shift needs at least fold_div = {fold_div} channels, got {channels}"
        )));
    }
    let part = channels / fold_div;
    Ok((part, part, channels - 2 * part))
}

/// Learned pieces of the third shift variant, bound in some graph.
#[derive(Debug, Clone)]
pub struct Tsm3Params {
    /// (C, C, 3, 1, 1) temporal deconvolution kernel.
    pub deconv_w: TensorId,
    pub deconv_b: TensorId,
    pub gamma: TensorId,
    pub beta: TensorId,
    pub stats: NormStats,
}

/// Apply one temporal-shift block to a (T, C, H, W) feature map.
///
/// `pool_to` shrinks the spatial extent first (the second variant's pooled
/// shift; harmless for the others). The third variant additionally runs a
/// per-channel temporal deconvolution and batch norm before shifting.
pub fn tsm_block(
    g: &mut Graph,
    x: TensorId,
    cfg: &TsmConfig,
    pool_to: Option<(usize, usize)>,
    tsm3: Option<&Tsm3Params>,
) -> Result<TensorId> {
    let xs = g.shape(x).to_vec();
    if xs.len() != 4 {
        return Err(Error::Dimension(format!("temporal-shift block wants (T, C, H, W), got {xs:?}")));
    }
    if xs[0] < 2 {
        return Err(Error::Parameter(format!(
            "temporal shift needs at least 2 frames, got {}",
            xs[0]
        )));
    }
    let (left, right, _) = shift_split(xs[1], cfg.fold_div)?;
    let mut cur = x;
    if let Some(hw) = pool_to {
        cur = g.adaptive_avg_pool2d(cur, hw)?;
    }
    if cfg.variant == TsmVariant::Tsm3 {
        let p = tsm3.ok_or_else(|| {
            Error::Architecture("the third shift variant needs deconvolution parameters".into())
        })?;
        cur = g.permute(cur, &[1, 0, 2, 3])?;
        cur = g.conv_transpose3d(cur, p.deconv_w, Some(p.deconv_b), (1, 1, 1), (1, 0, 0))?;
        let opts = NormOptions {
            kind: NormKind::Batch,
            channel_axis: 0,
            eps: 1e-5,
            stats: p.stats.clone(),
        };
        cur = g.norm_layer(cur, p.gamma, p.beta, &opts)?;
        cur = g.permute(cur, &[1, 0, 2, 3])?;
    }
    g.temporal_shift(cur, left, right)
}

// ---------------------------------------------------------------------------
// Attention masks
// ---------------------------------------------------------------------------

/// Soft spatial attention for (T, C, H, W) maps: 1x1 conv, sigmoid, recentre
/// the scores to mean 1 over space, then scale the features.
///
/// The mask stays inside (0, 2) and averages exactly 1 per frame, so it
/// redistributes energy without changing the overall scale.
pub fn attention_mask_2d(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let s = g.conv2d(x, w, Some(b), (1, 1), (0, 0))?;
    let s = g.sigmoid(s)?;
    let mean = g.reduce_mean(s, &[2, 3], true)?;
    let centred = g.sub(s, mean)?;
    let mask = g.shift(centred, 1.0)?;
    g.mul(x, mask)
}

/// The same attention for (C, T, H, W) maps, normalised over the two
/// trailing spatial axes.
pub fn attention_mask_3d(g: &mut Graph, x: TensorId, w: TensorId, b: TensorId) -> Result<TensorId> {
    let s = g.conv3d(x, w, Some(b), (1, 1, 1), (0, 0, 0))?;
    let s = g.sigmoid(s)?;
    let mean = g.reduce_mean(s, &[2, 3], true)?;
    let centred = g.sub(s, mean)?;
    let mask = g.shift(centred, 1.0)?;
    g.mul(x, mask)
}

// ---------------------------------------------------------------------------
// Student network
// ---------------------------------------------------------------------------

/// How the student collapses its last feature map to one value per frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum HeadKind {
    /// Deconvolution, global average pool, 1x1 projection.
    Deconv,
    /// Flatten plus two dense layers (the heavier ablation head).
    Dense,
}

/// Student hyper-parameters; serialised verbatim into checkpoints.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StudentConfig {
    pub tsm: TsmConfig,
    pub head: HeadKind,
    /// Frames per clip; forward passes insist on exactly this many.
    pub seq_len: usize,
    /// Square input resolution (16, 32 or 64).
    pub input_hw: usize,
}

impl Default for StudentConfig {
    fn default() -> Self {
        StudentConfig {
            tsm: TsmConfig::default(),
            head: HeadKind::Deconv,
            seq_len: 80,
            input_hw: 16,
        }
    }
}

impl StudentConfig {
    fn validate(&self) -> Result<()> {
        if !matches!(self.input_hw, 16 | 32 | 64) {
            return Err(Error::Parameter(format!(
                "input resolution must be 16, 32 or 64, got {}",
                self.input_hw
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Parameter(format!(
                "clips need at least 2 frames, got {}",
                self.seq_len
            )));
        }
        shift_split(STAGE_CHANNELS.iter().copied().min().unwrap(), self.tsm.fold_div)?;
        Ok(())
    }

    /// Spatial size entering each stage, halving after stages 2 and 4.
    fn stage_hw(&self, stage: usize) -> usize {
        match stage {
            0 | 1 => self.input_hw,
            2 | 3 => self.input_hw / 2,
            _ => self.input_hw / 4,
        }
    }
}

/// Lightweight frame-difference-to-pulse network built from six
/// temporal-shift convolution stages and a small head.
#[derive(Debug, Clone)]
pub struct StudentNet {
    pub cfg: StudentConfig,
    weights: Weights,
}

/// One student forward pass: the per-frame pulse estimate plus each stage's
/// masked feature map, in order, for feature distillation.
#[derive(Debug, Clone)]
pub struct StudentForward {
    pub output: TensorId,
    pub stage_features: Vec<TensorId>,
}

impl StudentNet {
    /// Fresh network with uniform +-1/sqrt(fan_in) weights drawn from a
    /// seeded generator, so equal seeds give bitwise-equal parameters.
    pub fn init(cfg: StudentConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        let mut in_c = INPUT_CHANNELS;
        for (i, &out_c) in STAGE_CHANNELS.iter().enumerate() {
            let stage = i + 1;
            if cfg.tsm.variant == TsmVariant::Tsm3 {
                w.draw(
                    &mut rng,
                    &format!("stage{stage}.shift.deconv.w"),
                    vec![in_c, in_c, 3, 1, 1],
                    in_c * 3,
                );
                w.draw(&mut rng, &format!("stage{stage}.shift.deconv.b"), vec![in_c], in_c * 3);
                w.fill(&format!("stage{stage}.shift.norm.gamma"), vec![in_c], 1.0);
                w.fill(&format!("stage{stage}.shift.norm.beta"), vec![in_c], 0.0);
            }
            let fan_in = in_c * 9;
            w.draw(&mut rng, &format!("stage{stage}.conv.w"), vec![out_c, in_c, 3, 3], fan_in);
            w.draw(&mut rng, &format!("stage{stage}.conv.b"), vec![out_c], fan_in);
            w.draw(&mut rng, &format!("stage{stage}.mask.w"), vec![1, out_c, 1, 1], out_c);
            w.draw(&mut rng, &format!("stage{stage}.mask.b"), vec![1], out_c);
            in_c = out_c;
        }
        match cfg.head {
            HeadKind::Deconv => {
                w.draw(&mut rng, "head.deconv.w", vec![8, 8, 3, 3], 8 * 9);
                w.draw(&mut rng, "head.deconv.b", vec![8], 8 * 9);
                w.draw(&mut rng, "head.out.w", vec![1, 8, 1, 1], 8);
                w.draw(&mut rng, "head.out.b", vec![1], 8);
            }
            HeadKind::Dense => {
                let flat = 8 * (cfg.input_hw / 4) * (cfg.input_hw / 4);
                w.draw(&mut rng, "head.fc1.w", vec![flat, 128], flat);
                w.draw(&mut rng, "head.fc1.b", vec![128], flat);
                w.draw(&mut rng, "head.fc2.w", vec![128, 1], 128);
                w.draw(&mut rng, "head.fc2.b", vec![1], 128);
            }
        }
        Ok(StudentNet { cfg, weights: w })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.total_len()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.weights.bind(g)
    }

    /// Run the network on a bound (T, 3, H, W) clip.
    pub fn forward(&self, g: &mut Graph, input: TensorId, bound: &Bound) -> Result<StudentForward> {
        let expect = [self.cfg.seq_len, INPUT_CHANNELS, self.cfg.input_hw, self.cfg.input_hw];
        let got = g.shape(input).to_vec();
        if got != expect {
            return Err(Error::Parameter(format!(
                "student configured for clips shaped {expect:?}, got {got:?}"
            )));
        }
        let mut cur = input;
        let mut features = Vec::with_capacity(STAGE_CHANNELS.len());
        for i in 0..STAGE_CHANNELS.len() {
            let stage = i + 1;
            let hw = self.cfg.stage_hw(i);
            let pool_to = (i == 2 || i == 4).then_some((hw, hw));
            let tsm3 = (self.cfg.tsm.variant == TsmVariant::Tsm3).then(|| Tsm3Params {
                deconv_w: bound.id(&format!("stage{stage}.shift.deconv.w")),
                deconv_b: bound.id(&format!("stage{stage}.shift.deconv.b")),
                gamma: bound.id(&format!("stage{stage}.shift.norm.gamma")),
                beta: bound.id(&format!("stage{stage}.shift.norm.beta")),
                stats: NormStats::FromBatch,
            });
            cur = tsm_block(g, cur, &self.cfg.tsm, pool_to, tsm3.as_ref())?;
            cur = g.conv2d(
                cur,
                bound.id(&format!("stage{stage}.conv.w")),
                Some(bound.id(&format!("stage{stage}.conv.b"))),
                (1, 1),
                (1, 1),
            )?;
            cur = g.relu(cur)?;
            cur = attention_mask_2d(
                g,
                cur,
                bound.id(&format!("stage{stage}.mask.w")),
                bound.id(&format!("stage{stage}.mask.b")),
            )?;
            features.push(cur);
        }
        let output = match self.cfg.head {
            HeadKind::Deconv => {
                let x = g.conv_transpose2d(
                    cur,
                    bound.id("head.deconv.w"),
                    Some(bound.id("head.deconv.b")),
                    (1, 1),
                    (0, 0),
                )?;
                let x = g.relu(x)?;
                let x = g.adaptive_avg_pool2d(x, (1, 1))?;
                let x = g.conv2d(x, bound.id("head.out.w"), Some(bound.id("head.out.b")), (1, 1), (0, 0))?;
                g.reshape(x, &[self.cfg.seq_len])?
            }
            HeadKind::Dense => {
                let flat = 8 * (self.cfg.input_hw / 4) * (self.cfg.input_hw / 4);
                let x = g.reshape(cur, &[self.cfg.seq_len, flat])?;
                let x = g.matmul(x, bound.id("head.fc1.w"))?;
                let x = g.add(x, bound.id("head.fc1.b"))?;
                let x = g.relu(x)?;
                let x = g.matmul(x, bound.id("head.fc2.w"))?;
                let x = g.add(x, bound.id("head.fc2.b"))?;
                g.reshape(x, &[self.cfg.seq_len])?
            }
        };
        Ok(StudentForward { output, stage_features: features })
    }

    /// Forward-only convenience: one clip in, per-frame estimates out.
    pub fn predict(&self, clip: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let input = g.constant(clip.data.clone(), clip.shape.clone())?;
        let bound = self.bind(&mut g)?;
        let fwd = self.forward(&mut g, input, &bound)?;
        Ok(g.data(fwd.output).to_vec())
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        let header = CheckpointHeader {
            architecture: architecture_json("student", &self.cfg)?,
            seed,
            epoch,
            tensors: self.weights.manifest(),
        };
        write_checkpoint(path, &header, &self.weights.flat())
    }

    /// Read a checkpoint back, returning the network plus its recorded seed
    /// and epoch.
    pub fn load(path: &Path) -> Result<(Self, u64, usize)> {
        let (header, blob) = read_checkpoint(path)?;
        let cfg: StudentConfig = parse_architecture("student", &header.architecture)?;
        let mut net = StudentNet::init(cfg, header.seed)?;
        check_manifest(&header.tensors, &net.weights)?;
        net.weights.load_flat(&blob)?;
        Ok((net, header.seed, header.epoch))
    }
}

// ---------------------------------------------------------------------------
// Teacher network
// ---------------------------------------------------------------------------

/// Teacher hyper-parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TeacherConfig {
    pub seq_len: usize,
    pub input_hw: usize,
}

impl Default for TeacherConfig {
    fn default() -> Self {
        TeacherConfig { seq_len: 80, input_hw: 16 }
    }
}

impl TeacherConfig {
    fn validate(&self) -> Result<()> {
        if !matches!(self.input_hw, 16 | 32 | 64) {
            return Err(Error::Parameter(format!(
                "input resolution must be 16, 32 or 64, got {}",
                self.input_hw
            )));
        }
        if self.seq_len < 2 {
            return Err(Error::Parameter(format!(
                "clips need at least 2 frames, got {}",
                self.seq_len
            )));
        }
        Ok(())
    }
}

/// 3-D convolutional teacher producing the same stage-feature geometry as
/// the student, but with full spatio-temporal kernels.
#[derive(Debug, Clone)]
pub struct TeacherNet {
    pub cfg: TeacherConfig,
    weights: Weights,
}

/// One teacher forward pass; stage features are (C, T, H, W).
#[derive(Debug, Clone)]
pub struct TeacherForward {
    pub output: TensorId,
    pub stage_features: Vec<TensorId>,
}

impl TeacherNet {
    pub fn init(cfg: TeacherConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w = Weights::new();
        let mut in_c = INPUT_CHANNELS;
        for (i, &out_c) in STAGE_CHANNELS.iter().enumerate() {
            let stage = i + 1;
            if stage == 5 {
                // Temporal deconvolution stage: kernel (3, 1, 1).
                let fan_in = out_c * 3;
                w.draw(&mut rng, &format!("stage{stage}.conv.w"), vec![in_c, out_c, 3, 1, 1], fan_in);
                w.draw(&mut rng, &format!("stage{stage}.conv.b"), vec![out_c], fan_in);
            } else {
                let fan_in = in_c * 27;
                w.draw(&mut rng, &format!("stage{stage}.conv.w"), vec![out_c, in_c, 3, 3, 3], fan_in);
                w.draw(&mut rng, &format!("stage{stage}.conv.b"), vec![out_c], fan_in);
            }
            w.draw(&mut rng, &format!("stage{stage}.mask.w"), vec![1, out_c, 1, 1, 1], out_c);
            w.draw(&mut rng, &format!("stage{stage}.mask.b"), vec![1], out_c);
            in_c = out_c;
        }
        w.draw(&mut rng, "head.out.w", vec![1, 8, 1, 1, 1], 8);
        w.draw(&mut rng, "head.out.b", vec![1], 8);
        Ok(TeacherNet { cfg, weights: w })
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn weights_mut(&mut self) -> &mut Weights {
        &mut self.weights
    }

    pub fn param_count(&self) -> usize {
        self.weights.total_len()
    }

    pub fn bind(&self, g: &mut Graph) -> Result<Bound> {
        self.weights.bind(g)
    }

    /// Run the network on a bound (T, 3, H, W) clip.
    pub fn forward(&self, g: &mut Graph, input: TensorId, bound: &Bound) -> Result<TeacherForward> {
        let expect = [self.cfg.seq_len, INPUT_CHANNELS, self.cfg.input_hw, self.cfg.input_hw];
        let got = g.shape(input).to_vec();
        if got != expect {
            return Err(Error::Parameter(format!(
                "teacher configured for clips shaped {expect:?}, got {got:?}"
            )));
        }
        let t = self.cfg.seq_len;
        let mut cur = g.permute(input, &[1, 0, 2, 3])?;
        let mut features = Vec::with_capacity(STAGE_CHANNELS.len());
        for i in 0..STAGE_CHANNELS.len() {
            let stage = i + 1;
            if stage == 3 {
                cur = g.adaptive_avg_pool3d(cur, (t, self.cfg.input_hw / 2, self.cfg.input_hw / 2))?;
            } else if stage == 5 {
                cur = g.adaptive_avg_pool3d(cur, (t, self.cfg.input_hw / 4, self.cfg.input_hw / 4))?;
            }
            let w = bound.id(&format!("stage{stage}.conv.w"));
            let b = bound.id(&format!("stage{stage}.conv.b"));
            cur = if stage == 5 {
                g.conv_transpose3d(cur, w, Some(b), (1, 1, 1), (1, 0, 0))?
            } else {
                g.conv3d(cur, w, Some(b), (1, 1, 1), (1, 1, 1))?
            };
            cur = g.relu(cur)?;
            cur = attention_mask_3d(
                g,
                cur,
                bound.id(&format!("stage{stage}.mask.w")),
                bound.id(&format!("stage{stage}.mask.b")),
            )?;
            features.push(cur);
        }
        let x = g.adaptive_avg_pool3d(cur, (t, 1, 1))?;
        let x = g.conv3d(x, bound.id("head.out.w"), Some(bound.id("head.out.b")), (1, 1, 1), (0, 0, 0))?;
        let output = g.reshape(x, &[t])?;
        Ok(TeacherForward { output, stage_features: features })
    }

    /// Forward-only convenience returning the per-frame estimate and each
    /// stage feature as host tensors (used to freeze teacher hints).
    pub fn predict_with_features(&self, clip: &Tensor) -> Result<(Vec<f64>, Vec<Tensor>)> {
        let mut g = Graph::new();
        let input = g.constant(clip.data.clone(), clip.shape.clone())?;
        let bound = self.bind(&mut g)?;
        let fwd = self.forward(&mut g, input, &bound)?;
        let features = fwd
            .stage_features
            .iter()
            .map(|&id| Tensor::new(g.data(id).to_vec(), g.shape(id).to_vec()))
            .collect::<Result<Vec<_>>>()?;
        Ok((g.data(fwd.output).to_vec(), features))
    }

    pub fn save(&self, path: &Path, seed: u64, epoch: usize) -> Result<()> {
        let header = CheckpointHeader {
            architecture: architecture_json("teacher", &self.cfg)?,
            seed,
            epoch,
            tensors: self.weights.manifest(),
        };
        write_checkpoint(path, &header, &self.weights.flat())
    }

    pub fn load(path: &Path) -> Result<(Self, u64, usize)> {
        let (header, blob) = read_checkpoint(path)?;
        let cfg: TeacherConfig = parse_architecture("teacher", &header.architecture)?;
        let mut net = TeacherNet::init(cfg, header.seed)?;
        check_manifest(&header.tensors, &net.weights)?;
        net.weights.load_flat(&blob)?;
        Ok((net, header.seed, header.epoch))
    }
}

// ---------------------------------------------------------------------------
// Checkpoint plumbing shared by both networks
// ---------------------------------------------------------------------------

fn architecture_json<C: Serialize>(kind: &str, cfg: &C) -> Result<serde_json::Value> {
    Ok(serde_json::json!({ "kind": kind, "config": serde_json::to_value(cfg).map_err(|e| {
        Error::Architecture(format!("config serialisation: {e}"))
    })? }))
}

fn parse_architecture<C: for<'de> Deserialize<'de>>(
    kind: &str,
    value: &serde_json::Value,
) -> Result<C> {
    let got = value.get("kind").and_then(|k| k.as_str()).unwrap_or("unknown");
    if got != kind {
        return Err(Error::Architecture(format!("checkpoint holds a {got} network, wanted {kind}")));
    }
    let cfg = value
        .get("config")
        .ok_or_else(|| Error::Architecture("checkpoint architecture lacks a config".into()))?;
    serde_json::from_value(cfg.clone())
        .map_err(|e| Error::Architecture(format!("checkpoint config does not parse: {e}")))
}

fn check_manifest(stored: &[TensorEntry], expected: &Weights) -> Result<()> {
    let want = expected.manifest();
    if stored != want.as_slice() {
        return Err(Error::Architecture(
            "checkpoint tensor manifest does not match the declared architecture".into(),
        ));
    }
    Ok(())
}
