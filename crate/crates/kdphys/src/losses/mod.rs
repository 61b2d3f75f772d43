//! Differentiable sequence losses.
//!
//! The centrepiece is the DILATE pair: a soft-DTW *shape* term computed by
//! the classic dynamic program over smoothed minima, and a *temporal* term
//! `<E, Omega>` where `E` is the Gibbs expectation of warp-path membership.
//! `E` equals the derivative of soft-DTW with respect to the cost matrix, so
//! it is built by unrolling the DP's backward recurrence as graph nodes —
//! differentiating through that construction yields the temporal gradient
//! (a Hessian-vector product of soft-DTW) with no hand-derived second-order
//! code. Everything is verified against brute-force path enumeration in
//! [`oracle`].

pub mod oracle;

use crate::diffcore::{Graph, TensorId};
use crate::error::{Error, Result};

/// Pairwise alignment costs between a predicted and a reference sequence,
/// plus the fixed temporal penalty matrix and the smoothing parameter.
pub struct AlignmentCost {
    /// Graph node holding the k x k matrix of squared differences; rows
    /// index the prediction, columns the reference.
    pub delta: TensorId,
    /// Omega(h, j) = (h - j)^2 / k^2, symmetric with a zero diagonal.
    pub omega: Vec<f64>,
    pub gamma: f64,
    pub k: usize,
}

/// The temporal penalty matrix Omega(h, j) = (h - j)^2 / k^2.
pub fn omega_matrix(k: usize) -> Vec<f64> {
    let kk = (k * k) as f64;
    let mut omega = vec![0.0; k * k];
    for h in 0..k {
        for j in 0..k {
            let d = h as f64 - j as f64;
            omega[h * k + j] = d * d / kk;
        }
    }
    omega
}

/// Build the squared-difference cost matrix delta(h, j) = (pred_h - truth_j)^2
/// as a graph node differentiable w.r.t. `pred` (a rank-1 node of length k).
pub fn cost_matrix(
    g: &mut Graph,
    pred: TensorId,
    truth: &[f64],
    gamma: f64,
) -> Result<AlignmentCost> {
    if gamma <= 0.0 {
        return Err(Error::Parameter(format!("gamma must be positive, got {gamma}")));
    }
    let shape = g.shape(pred).to_vec();
    if shape.len() != 1 {
        return Err(Error::Dimension(format!("pred must be rank 1, got {shape:?}")));
    }
    let k = shape[0];
    if truth.len() != k {
        return Err(Error::Parameter(format!(
            "length mismatch: pred has {k} samples, truth has {}",
            truth.len()
        )));
    }
    if k < 2 {
        return Err(Error::Parameter(format!("alignment needs k >= 2 samples, got {k}")));
    }
    let pred_col = g.reshape(pred, &[k, 1])?;
    let truth_row = g.constant(truth.to_vec(), vec![k])?;
    let diff = g.sub(pred_col, truth_row)?; // (k,1) - (k,) broadcasts to (k,k)
    let delta = g.mul(diff, diff)?;
    Ok(AlignmentCost { delta, omega: omega_matrix(k), gamma, k })
}

/// The forward DP table: r(h,j) = delta(h,j) + softmin(r(h-1,j-1), r(h-1,j), r(h,j-1)).
struct DpTables {
    /// Scalar node per cell of the accumulated-cost table R.
    r: Vec<TensorId>,
    /// Scalar node per cell of delta.
    cells: Vec<TensorId>,
    k: usize,
}

fn build_r(g: &mut Graph, cost: &AlignmentCost) -> Result<DpTables> {
    let k = cost.k;
    let mut cells = Vec::with_capacity(k * k);
    for at in 0..k * k {
        cells.push(g.index(cost.delta, at)?);
    }
    let mut r: Vec<TensorId> = vec![0; k * k];
    r[0] = cells[0];
    for j in 1..k {
        r[j] = g.add(r[j - 1], cells[j])?;
    }
    for i in 1..k {
        r[i * k] = g.add(r[(i - 1) * k], cells[i * k])?;
    }
    for i in 1..k {
        for j in 1..k {
            let sm = g.softmin3(
                r[(i - 1) * k + (j - 1)],
                r[(i - 1) * k + j],
                r[i * k + (j - 1)],
                cost.gamma,
            )?;
            r[i * k + j] = g.add(cells[i * k + j], sm)?;
        }
    }
    Ok(DpTables { r, cells, k })
}

/// Gibbs expectation of path membership per cell, E = d(softDTW)/d(delta),
/// built as graph nodes by the reverse recurrence
/// `E(i,j) = sum over successors s of E(s) * exp((R(s) - delta(s) - R(i,j)) / gamma)`.
/// Every exponent is <= 0 (softmin lower-bounds each of its arguments), so
/// the construction is stable for arbitrarily small gamma.
fn build_e(g: &mut Graph, t: &DpTables, gamma: f64) -> Result<Vec<TensorId>> {
    let k = t.k;
    let mut e: Vec<TensorId> = vec![0; k * k];
    e[k * k - 1] = g.scalar_const(1.0)?;
    let inv_gamma = 1.0 / gamma;
    for i in (0..k).rev() {
        for j in (0..k).rev() {
            if i == k - 1 && j == k - 1 {
                continue;
            }
            let mut acc: Option<TensorId> = None;
            for (si, sj) in [(i + 1, j), (i, j + 1), (i + 1, j + 1)] {
                if si >= k || sj >= k {
                    continue;
                }
                let s = si * k + sj;
                let here = i * k + j;
                let up = g.sub(t.r[s], t.cells[s])?;
                let gap = g.sub(up, t.r[here])?;
                let scaled = g.scale(gap, inv_gamma)?;
                let w = g.exp(scaled)?;
                let term = g.mul(w, e[s])?;
                acc = Some(match acc {
                    Some(a) => g.add(a, term)?,
                    None => term,
                });
            }
            e[i * k + j] = acc.expect("every non-terminal cell has a successor");
        }
    }
    Ok(e)
}

/// Soft-DTW shape dissimilarity: `-gamma * ln(sum over paths of exp(-cost/gamma))`.
pub fn soft_dtw(g: &mut Graph, cost: &AlignmentCost) -> Result<TensorId> {
    let t = build_r(g, cost)?;
    Ok(t.r[cost.k * cost.k - 1])
}

/// Gibbs-smoothed temporal dissimilarity `<E, Omega>`: the expected temporal
/// spread of the alignment under the soft-DTW path distribution.
pub fn temporal_term(g: &mut Graph, cost: &AlignmentCost) -> Result<TensorId> {
    let t = build_r(g, cost)?;
    let e = build_e(g, &t, cost.gamma)?;
    dot_with_omega(g, &e, &cost.omega)
}

fn dot_with_omega(g: &mut Graph, e: &[TensorId], omega: &[f64]) -> Result<TensorId> {
    let mut acc: Option<TensorId> = None;
    for (idx, &w) in omega.iter().enumerate() {
        if w == 0.0 {
            continue; // the diagonal contributes exactly nothing
        }
        let term = g.scale(e[idx], w)?;
        acc = Some(match acc {
            Some(a) => g.add(a, term)?,
            None => term,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => g.scalar_const(0.0),
    }
}

#[derive(Debug, Clone)]
pub struct DilateOptions {
    /// Blend between shape (alpha) and temporal (1 - alpha) terms.
    pub alpha: f64,
    /// Soft-DTW smoothing parameter.
    pub gamma: f64,
    /// Z-normalise both sequences before computing costs. Off by default:
    /// the data pipeline already normalises its signals, so applying it here
    /// is an explicit opt-in.
    pub znorm: bool,
}

impl Default for DilateOptions {
    fn default() -> Self {
        DilateOptions { alpha: 0.5, gamma: 0.01, znorm: false }
    }
}

/// The blended loss plus its two constituents (all scalar nodes).
pub struct DilateLoss {
    pub total: TensorId,
    pub shape: TensorId,
    pub temporal: TensorId,
}

/// DILATE: `alpha * L_shape + (1 - alpha) * L_temporal`, differentiable
/// w.r.t. the rank-1 prediction node.
pub fn dilate(
    g: &mut Graph,
    pred: TensorId,
    truth: &[f64],
    opts: &DilateOptions,
) -> Result<DilateLoss> {
    if !(0.0..=1.0).contains(&opts.alpha) {
        return Err(Error::Parameter(format!("alpha must lie in [0,1], got {}", opts.alpha)));
    }
    let pred = if opts.znorm { znorm_node(g, pred)? } else { pred };
    let truth_owned;
    let truth_ref: &[f64] = if opts.znorm {
        truth_owned = znorm_slice(truth)?;
        &truth_owned
    } else {
        truth
    };
    let cost = cost_matrix(g, pred, truth_ref, opts.gamma)?;
    let t = build_r(g, &cost)?;
    let shape = t.r[cost.k * cost.k - 1];
    let e = build_e(g, &t, cost.gamma)?;
    let temporal = dot_with_omega(g, &e, &cost.omega)?;
    let a = g.scale(shape, opts.alpha)?;
    let b = g.scale(temporal, 1.0 - opts.alpha)?;
    let total = g.add(a, b)?;
    Ok(DilateLoss { total, shape, temporal })
}

/// Mean squared error between a rank-1 prediction node and a reference slice.
pub fn mse(g: &mut Graph, pred: TensorId, truth: &[f64]) -> Result<TensorId> {
    let shape = g.shape(pred).to_vec();
    if shape.len() != 1 || shape[0] != truth.len() {
        return Err(Error::Parameter(format!(
            "mse length mismatch: pred {shape:?} vs truth {}",
            truth.len()
        )));
    }
    let t = g.constant(truth.to_vec(), vec![truth.len()])?;
    let d = g.sub(pred, t)?;
    let sq = g.mul(d, d)?;
    g.mean_all(sq)
}

/// Graph-side z-normalisation (population standard deviation).
fn znorm_node(g: &mut Graph, x: TensorId) -> Result<TensorId> {
    let m = g.mean_all(x)?;
    let centered = g.sub(x, m)?;
    let sq = g.mul(centered, centered)?;
    let var = g.mean_all(sq)?;
    let sd = g.sqrt(var)?;
    g.div(centered, sd)
}

fn znorm_slice(x: &[f64]) -> Result<Vec<f64>> {
    let n = x.len() as f64;
    let mean = x.iter().sum::<f64>() / n;
    let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    if var == 0.0 {
        return Err(Error::DegenerateSignal("cannot z-normalise a constant sequence".into()));
    }
    let sd = var.sqrt();
    Ok(x.iter().map(|v| (v - mean) / sd).collect())
}
