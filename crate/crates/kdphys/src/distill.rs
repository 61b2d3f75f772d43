//! Attention-guided feature distillation: squeeze-excitation channel
//! weighting, teacher/student feature alignment, and the combined training
//! objective.

use crate::diffcore::{Graph, TensorId};
use crate::error::{Error, Result};
use rand::Rng;

/// Squeeze-excitation gate parameters living in a graph.
#[derive(Debug, Clone, Copy)]
pub struct SEWeights {
    /// (channels, channels / reduction)
    pub w1: TensorId,
    /// (channels / reduction, channels)
    pub w2: TensorId,
    pub channels: usize,
    pub reduction: usize,
}

impl SEWeights {
    /// Fresh trainable gate weights, uniform in +-1/sqrt(fan_in).
    pub fn init(g: &mut Graph, channels: usize, reduction: usize, rng: &mut impl Rng) -> Result<Self> {
        if reduction == 0 || channels == 0 || channels % reduction != 0 {
            return Err(Error::Parameter(format!(
                "channel count {channels} must be a positive multiple of the reduction ratio {reduction}"
            )));
        }
        let hidden = channels / reduction;
        let mut draw = |fan_in: usize, len: usize| -> Vec<f64> {
            let bound = 1.0 / (fan_in as f64).sqrt();
            (0..len).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        let w1 = g.param(draw(channels, channels * hidden), vec![channels, hidden])?;
        let w2 = g.param(draw(hidden, hidden * channels), vec![hidden, channels])?;
        Ok(SEWeights { w1, w2, channels, reduction })
    }

    /// Wrap existing nodes, deriving the ratio from their shapes.
    pub fn from_ids(g: &Graph, w1: TensorId, w2: TensorId) -> Result<Self> {
        let s1 = g.shape(w1).to_vec();
        let s2 = g.shape(w2).to_vec();
        match (s1.as_slice(), s2.as_slice()) {
            ([c, h], [h2, c2]) if c == c2 && h == h2 && *h > 0 && c % h == 0 => {
                Ok(SEWeights { w1, w2, channels: *c, reduction: c / h })
            }
            _ => Err(Error::Parameter(format!(
                "gate weights {s1:?} / {s2:?} do not form a (C, C/r) x (C/r, C) pair"
            ))),
        }
    }
}

/// Global mean over every non-channel axis: the "squeeze" step. Output has
/// shape (C,).
pub fn channel_squeeze(g: &mut Graph, feature: TensorId, channel_axis: usize) -> Result<TensorId> {
    let rank = g.shape(feature).len();
    if channel_axis >= rank {
        return Err(Error::Dimension(format!(
            "channel axis {channel_axis} out of range for rank-{rank} feature"
        )));
    }
    let others: Vec<usize> = (0..rank).filter(|&a| a != channel_axis).collect();
    if others.is_empty() {
        return Ok(feature);
    }
    g.reduce_mean(feature, &others, false)
}

/// Per-channel importance in (0,1): squeeze, then a two-layer gate
/// sigmoid(relu(squeezed * w1) * w2).
pub fn se_attention(
    g: &mut Graph,
    feature: TensorId,
    channel_axis: usize,
    weights: &SEWeights,
) -> Result<TensorId> {
    let c = g.shape(feature)[channel_axis];
    if c != weights.channels {
        return Err(Error::Architecture(format!(
            "feature has {c} channels, the gate was built for {}",
            weights.channels
        )));
    }
    let squeezed = channel_squeeze(g, feature, channel_axis)?;
    let row = g.reshape(squeezed, &[1, c])?;
    let hidden = g.matmul(row, weights.w1)?;
    let hidden = g.relu(hidden)?;
    let logits = g.matmul(hidden, weights.w2)?;
    let gated = g.sigmoid(logits)?;
    g.reshape(gated, &[c])
}

/// One teacher/student feature correspondence. The teacher ("hint") tensor
/// is laid out (channels, time, height, width); the student ("guided")
/// tensor is (frames, channels, height, width).
#[derive(Debug, Clone, Copy)]
pub struct FeaturePair {
    pub hint: TensorId,
    pub guided: TensorId,
    /// Stage number, 1-6.
    pub layer_index: usize,
}

impl FeaturePair {
    pub fn new(g: &Graph, hint: TensorId, guided: TensorId, layer_index: usize) -> Result<Self> {
        if !(1..=6).contains(&layer_index) {
            return Err(Error::Parameter(format!(
                "layer index {layer_index} outside the six distillation stages"
            )));
        }
        for (name, id) in [("hint", hint), ("guided", guided)] {
            let rank = g.shape(id).len();
            if rank != 4 {
                return Err(Error::Dimension(format!(
                    "{name} feature must be rank 4, got rank {rank}"
                )));
            }
        }
        Ok(FeaturePair { hint, guided, layer_index })
    }
}

/// Bring both features of a pair to an identical (C, T, H, W) shape: the
/// student tensor's frame axis is moved into the time slot, and whichever
/// tensor has the larger spatial map is average-pooled down to the smaller.
pub fn align_features(g: &mut Graph, pair: &FeaturePair) -> Result<(TensorId, TensorId)> {
    let hs = g.shape(pair.hint).to_vec(); // (C, T, H, W)
    let gs = g.shape(pair.guided).to_vec(); // (T, C, H, W)
    if hs[0] != gs[1] {
        return Err(Error::Architecture(format!(
            "stage {}: teacher has {} channels, student {}",
            pair.layer_index, hs[0], gs[1]
        )));
    }
    if hs[1] != gs[0] {
        return Err(Error::Architecture(format!(
            "stage {}: teacher spans {} time steps, student {} frames",
            pair.layer_index, hs[1], gs[0]
        )));
    }
    let guided = g.permute(pair.guided, &[1, 0, 2, 3])?;
    let target = (hs[2].min(gs[2]), hs[3].min(gs[3]));
    let fit = |g: &mut Graph, id: TensorId| -> Result<TensorId> {
        let s = g.shape(id).to_vec();
        if (s[2], s[3]) == target {
            Ok(id)
        } else {
            g.adaptive_avg_pool2d(id, target)
        }
    };
    Ok((fit(g, pair.hint)?, fit(g, guided)?))
}

/// Weighted feature-matching loss over all distillation stages:
/// lambda * sum over layers and channels of rho_c * mean((hint - guided)^2)
/// with rho computed from the teacher feature, so no gradient reaches the
/// teacher. The per-channel mean (rather than a raw squared norm) keeps
/// stages of different sizes comparable.
pub fn afd_loss(
    g: &mut Graph,
    pairs: &[FeaturePair],
    gates: &[SEWeights],
    lambda_afd: f64,
) -> Result<TensorId> {
    if pairs.is_empty() {
        return Err(Error::Parameter("distillation needs at least one feature pair".into()));
    }
    if gates.len() != pairs.len() {
        return Err(Error::Parameter(format!(
            "{} feature pairs but {} gates",
            pairs.len(),
            gates.len()
        )));
    }
    if !lambda_afd.is_finite() || lambda_afd < 0.0 {
        return Err(Error::Parameter(format!("lambda must be finite and >= 0, got {lambda_afd}")));
    }
    let mut total = None;
    for (pair, gate) in pairs.iter().zip(gates) {
        let (hint, guided) = align_features(g, pair)?;
        let rho = se_attention(g, hint, 0, gate)?;
        let c = g.shape(hint)[0];
        let rho = g.reshape(rho, &[c, 1, 1, 1])?;
        let residual = g.sub(hint, guided)?;
        let squared = g.mul(residual, residual)?;
        let per_channel = g.reduce_mean(squared, &[1, 2, 3], true)?;
        let weighted = g.mul(per_channel, rho)?;
        let stage = g.sum_all(weighted)?;
        total = Some(match total {
            None => stage,
            Some(acc) => g.add(acc, stage)?,
        });
    }
    g.scale(total.expect("pairs checked non-empty"), lambda_afd)
}

/// Combined objective `beta * afd + eta * dilate`.
pub fn total_loss(
    g: &mut Graph,
    afd: TensorId,
    dilate: TensorId,
    beta: f64,
    eta: f64,
) -> Result<TensorId> {
    for (name, v) in [("beta", beta), ("eta", eta)] {
        if !v.is_finite() || v < 0.0 {
            return Err(Error::Parameter(format!("{name} must be finite and >= 0, got {v}")));
        }
    }
    for (name, id) in [("feature loss", afd), ("alignment loss", dilate)] {
        if g.shape(id).iter().product::<usize>() != 1 {
            return Err(Error::Dimension(format!(
                "{name} must be scalar, got shape {:?}",
                g.shape(id)
            )));
        }
    }
    let a = g.scale(afd, beta)?;
    let d = g.scale(dilate, eta)?;
    g.add(a, d)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffcore::check::grad_check;
    use crate::losses::{dilate, DilateOptions};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn zero_gate(g: &mut Graph, c: usize, r: usize) -> SEWeights {
        let hidden = c / r;
        let w1 = g.param(vec![0.0; c * hidden], vec![c, hidden]).unwrap();
        let w2 = g.param(vec![0.0; hidden * c], vec![hidden, c]).unwrap();
        SEWeights::from_ids(g, w1, w2).unwrap()
    }

    #[test]
    fn zero_weights_gate_at_one_half() {
        let mut g = Graph::new();
        let feature = g
            .constant((0..16).map(|i| i as f64 * 0.3 - 1.0).collect(), vec![4, 2, 2, 1])
            .unwrap();
        let gate = zero_gate(&mut g, 4, 2);
        let rho = se_attention(&mut g, feature, 0, &gate).unwrap();
        assert_eq!(g.shape(rho), &[4]);
        assert!(g.data(rho).iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn squeeze_of_constant_feature_returns_the_constant() {
        let mut g = Graph::new();
        let feature = g.constant(vec![0.75; 24], vec![2, 3, 2, 2]).unwrap();
        let s = channel_squeeze(&mut g, feature, 1).unwrap();
        assert_eq!(g.shape(s), &[3]);
        assert!(g.data(s).iter().all(|&v| (v - 0.75).abs() < 1e-15));
    }

    #[test]
    fn attention_stays_inside_the_open_unit_interval() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let feature = g
            .constant((0..32).map(|i| (i as f64 * 0.37).sin() * 5.0).collect(), vec![4, 2, 2, 2])
            .unwrap();
        let gate = SEWeights::init(&mut g, 4, 2, &mut rng).unwrap();
        let rho = se_attention(&mut g, feature, 0, &gate).unwrap();
        assert!(g.data(rho).iter().all(|&v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn gate_rejects_indivisible_channels() {
        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(SEWeights::init(&mut g, 5, 2, &mut rng).is_err());
        assert!(SEWeights::init(&mut g, 4, 0, &mut rng).is_err());
    }

    #[test]
    fn se_gradients_match_finite_differences() {
        let c = 2;
        let feature: Vec<f64> = (0..8).map(|i| (i as f64 * 0.9).cos()).collect();
        let build = |theta: &[f64]| -> crate::error::Result<(Graph, TensorId, [TensorId; 2])> {
            let mut g = Graph::new();
            let f = g.constant(feature.clone(), vec![c, 2, 2, 1])?;
            let w1 = g.param(theta[..2].to_vec(), vec![c, 1])?;
            let w2 = g.param(theta[2..].to_vec(), vec![1, c])?;
            let gate = SEWeights::from_ids(&g, w1, w2)?;
            let rho = se_attention(&mut g, f, 0, &gate)?;
            let loss = g.sum_all(rho)?;
            Ok((g, loss, [w1, w2]))
        };
        let theta = vec![0.4, -0.3, 0.8, 0.2];
        let (mut g, loss, [w1, w2]) = build(&theta).unwrap();
        g.backward(loss).unwrap();
        let mut grad = g.grad(w1).unwrap().to_vec();
        grad.extend_from_slice(g.grad(w2).unwrap());
        let report = grad_check(
            &theta,
            &grad,
            |t| build(t).map(|(g, l, _)| g.value(l)),
            4,
            1e-5,
            11,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-6, "worst rel err {}", report.max_rel_err);
    }

    #[test]
    fn alignment_permutes_and_pools_to_the_smaller_map() {
        let mut g = Graph::new();
        let hint = g.constant(vec![0.1; 4 * 8 * 3 * 3], vec![4, 8, 3, 3]).unwrap();
        let guided = g
            .constant((0..4 * 8 * 36).map(|i| i as f64).collect(), vec![8, 4, 6, 6])
            .unwrap();
        let pair = FeaturePair::new(&g, hint, guided, 2).unwrap();
        let (h2, g2) = align_features(&mut g, &pair).unwrap();
        assert_eq!(g.shape(h2), &[4, 8, 3, 3]);
        assert_eq!(g.shape(g2), &[4, 8, 3, 3]);
    }

    #[test]
    fn alignment_preserves_per_channel_means() {
        let mut g = Graph::new();
        let hint = g.constant(vec![0.0; 2 * 2 * 2 * 2], vec![2, 2, 2, 2]).unwrap();
        let guided = g
            .constant((0..2 * 2 * 16).map(|i| (i as f64 * 0.21).sin()).collect(), vec![2, 2, 4, 4])
            .unwrap();
        let pair = FeaturePair::new(&g, hint, guided, 1).unwrap();
        let (_, aligned) = align_features(&mut g, &pair).unwrap();
        let before = {
            let p = g.permute(guided, &[1, 0, 2, 3]).unwrap();
            channel_squeeze(&mut g, p, 0).unwrap()
        };
        let after = channel_squeeze(&mut g, aligned, 0).unwrap();
        for (a, b) in g.data(before).iter().zip(g.data(after)) {
            assert!((a - b).abs() < 1e-12, "channel mean drifted: {a} vs {b}");
        }
    }

    #[test]
    fn equal_shapes_round_trip_bitwise() {
        let mut g = Graph::new();
        let values: Vec<f64> = (0..16).map(|i| (i as f64).exp().fract()).collect();
        let guided = g.constant(values.clone(), vec![2, 2, 2, 2]).unwrap();
        let hint = g.constant(vec![0.0; 16], vec![2, 2, 2, 2]).unwrap();
        let pair = FeaturePair::new(&g, hint, guided, 3).unwrap();
        let (_, aligned) = align_features(&mut g, &pair).unwrap();
        let back = g.permute(aligned, &[1, 0, 2, 3]).unwrap();
        let bits = |xs: &[f64]| xs.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(g.data(back)), bits(&values));
    }

    #[test]
    fn mismatches_are_architecture_errors() {
        let mut g = Graph::new();
        let hint = g.constant(vec![0.0; 4 * 2 * 2 * 2], vec![4, 2, 2, 2]).unwrap();
        let wrong_c = g.constant(vec![0.0; 2 * 3 * 2 * 2], vec![2, 3, 2, 2]).unwrap();
        let pair = FeaturePair::new(&g, hint, wrong_c, 1).unwrap();
        assert!(matches!(align_features(&mut g, &pair), Err(Error::Architecture(_))));
        let wrong_t = g.constant(vec![0.0; 3 * 4 * 2 * 2], vec![3, 4, 2, 2]).unwrap();
        let pair = FeaturePair::new(&g, hint, wrong_t, 1).unwrap();
        assert!(matches!(align_features(&mut g, &pair), Err(Error::Architecture(_))));
    }

    #[test]
    fn matching_features_cost_nothing() {
        let mut g = Graph::new();
        let values: Vec<f64> = (0..8).map(|i| i as f64 * 0.1).collect();
        let hint = g.constant(values.clone(), vec![2, 2, 2, 1]).unwrap();
        // Student stores the same values in (T, C, H, W) order.
        let mut transposed = vec![0.0; 8];
        for c in 0..2 {
            for t in 0..2 {
                for h in 0..2 {
                    transposed[((t * 2 + c) * 2 + h)] = values[(c * 2 + t) * 2 + h];
                }
            }
        }
        let guided = g.param(transposed, vec![2, 2, 2, 1]).unwrap();
        let pair = FeaturePair::new(&g, hint, guided, 1).unwrap();
        let gate = zero_gate(&mut g, 2, 2);
        let loss = afd_loss(&mut g, &[pair], &[gate], 1.0).unwrap();
        assert_eq!(g.value(loss), 0.0);
    }

    #[test]
    fn single_element_formula_matches_hand_value() {
        // rho = 0.5 (zero gate), residual^2 = 4 over one element, lambda = 10.
        let mut g = Graph::new();
        let hint = g.constant(vec![3.0], vec![1, 1, 1, 1]).unwrap();
        let guided = g.param(vec![1.0], vec![1, 1, 1, 1]).unwrap();
        let pair = FeaturePair::new(&g, hint, guided, 1).unwrap();
        let gate = zero_gate(&mut g, 1, 1);
        let loss = afd_loss(&mut g, &[pair], &[gate], 10.0).unwrap();
        assert!((g.value(loss) - 20.0).abs() < 1e-12);
    }

    #[test]
    fn loss_is_linear_in_lambda() {
        let mut g = Graph::new();
        let hint = g
            .constant((0..16).map(|i| (i as f64 * 0.4).sin()).collect(), vec![2, 2, 2, 2])
            .unwrap();
        let guided = g.param(vec![0.1; 16], vec![2, 2, 2, 2]).unwrap();
        let gate = zero_gate(&mut g, 2, 2);
        let pair = FeaturePair::new(&g, hint, guided, 1).unwrap();
        let once = afd_loss(&mut g, &[pair], &[gate], 1.0).unwrap();
        let twice = afd_loss(&mut g, &[pair], &[gate], 2.0).unwrap();
        assert!((2.0 * g.value(once) - g.value(twice)).abs() < 1e-12);
        assert!(g.value(once) > 0.0);
    }

    #[test]
    fn empty_pair_list_is_rejected() {
        let mut g = Graph::new();
        assert!(afd_loss(&mut g, &[], &[], 1.0).is_err());
    }

    #[test]
    fn teacher_features_receive_no_gradient() {
        let mut g = Graph::new();
        let hint = g
            .constant((0..8).map(|i| i as f64 * 0.2 - 0.5).collect(), vec![2, 2, 1, 2])
            .unwrap();
        let guided = g.param(vec![0.3; 8], vec![2, 2, 1, 2]).unwrap();
        let gate = zero_gate(&mut g, 2, 2);
        let pair = FeaturePair::new(&g, hint, guided, 4).unwrap();
        let loss = afd_loss(&mut g, &[pair], &[gate], 1.0).unwrap();
        g.backward(loss).unwrap();
        assert!(g.grad(hint).is_none(), "teacher features must stay frozen");
        assert!(g.grad(guided).is_some());
        assert!(g.grad(gate.w1).is_some(), "gate weights train with the student");
    }

    #[test]
    fn endpoints_of_the_combined_objective() {
        let mut g = Graph::new();
        let afd = g.scalar_const(3.0).unwrap();
        let dil = g.scalar_const(5.0).unwrap();
        let pure_alignment = total_loss(&mut g, afd, dil, 0.0, 1.0).unwrap();
        assert_eq!(g.value(pure_alignment), 5.0);
        let pure_features = total_loss(&mut g, afd, dil, 1.0, 0.0).unwrap();
        assert_eq!(g.value(pure_features), 3.0);
        let both = total_loss(&mut g, afd, dil, 10.0, 10.0).unwrap();
        assert_eq!(g.value(both), 80.0);
        assert!(total_loss(&mut g, afd, dil, -1.0, 1.0).is_err());
    }

    #[test]
    fn combined_gradient_matches_finite_differences() {
        // Two student feature stages plus a predicted sequence, all trained
        // under beta * feature-loss + eta * alignment-loss.
        let truth: Vec<f64> = (0..6).map(|i| (i as f64 * 1.1).sin()).collect();
        let hint1: Vec<f64> = (0..8).map(|i| (i as f64 * 0.7).cos()).collect();
        let hint2: Vec<f64> = (0..4).map(|i| 0.2 * i as f64 - 0.3).collect();
        let build = |theta: &[f64]| -> crate::error::Result<(Graph, TensorId, Vec<TensorId>)> {
            let mut g = Graph::new();
            let h1 = g.constant(hint1.clone(), vec![2, 2, 2, 1])?;
            let h2 = g.constant(hint2.clone(), vec![2, 2, 1, 1])?;
            let g1 = g.param(theta[..8].to_vec(), vec![2, 2, 2, 1])?;
            let g2 = g.param(theta[8..12].to_vec(), vec![2, 2, 1, 1])?;
            let w1 = g.param(theta[12..14].to_vec(), vec![2, 1])?;
            let w2 = g.param(theta[14..16].to_vec(), vec![1, 2])?;
            let pred = g.param(theta[16..22].to_vec(), vec![6])?;
            let gate = SEWeights::from_ids(&g, w1, w2)?;
            let pairs = [
                FeaturePair::new(&g, h1, g1, 1)?,
                FeaturePair::new(&g, h2, g2, 2)?,
            ];
            let afd = afd_loss(&mut g, &pairs, &[gate, gate], 1.0)?;
            let dil = dilate(&mut g, pred, &truth, &DilateOptions { gamma: 0.1, ..DilateOptions::default() })?;
            let loss = total_loss(&mut g, afd, dil.total, 10.0, 10.0)?;
            Ok((g, loss, vec![g1, g2, w1, w2, pred]))
        };
        let theta: Vec<f64> = (0..22).map(|i| 0.13 * (i as f64 * 0.83).sin() + 0.05).collect();
        let (mut g, loss, params) = build(&theta).unwrap();
        g.backward(loss).unwrap();
        let grad: Vec<f64> =
            params.iter().flat_map(|&p| g.grad(p).unwrap().to_vec()).collect();
        let report = grad_check(
            &theta,
            &grad,
            |t| build(t).map(|(g, l, _)| g.value(l)),
            22,
            1e-5,
            5,
        )
        .unwrap();
        assert!(report.max_rel_err < 1e-4, "worst rel err {}", report.max_rel_err);
    }
}
