//! Finite-difference verification of reverse-mode gradients.
//!
//! The checker treats the differentiated code as a black box: it asks for the
//! analytic gradient once, then probes randomly chosen coordinates with
//! central differences and compares relative errors.

use crate::error::{Error, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Outcome of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub probes: usize,
    pub max_rel_err: f64,
    /// Coordinate where the worst disagreement occurred.
    pub worst_index: usize,
}

/// Relative error with an absolute floor so near-zero pairs compare sanely.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Compare an analytic gradient against central finite differences.
///
/// `eval` maps a parameter vector to a scalar loss; `grad` is the full
/// analytic gradient at `theta`. `probes` coordinates are sampled (without
/// replacement when possible) from a seeded generator.
pub fn grad_check<E>(
    theta: &[f64],
    grad: &[f64],
    mut eval: E,
    probes: usize,
    h: f64,
    seed: u64,
) -> Result<GradCheckReport>
where
    E: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != theta.len() {
        return Err(Error::Dimension(format!(
            "gradient has {} entries for {} parameters",
            grad.len(),
            theta.len()
        )));
    }
    if theta.is_empty() || probes == 0 {
        return Err(Error::Parameter("nothing to probe".into()));
    }
    if h <= 0.0 {
        return Err(Error::Parameter(format!("step size must be positive, got {h}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut order: Vec<usize> = (0..theta.len()).collect();
    // Fisher-Yates; take a prefix when there are more coordinates than probes.
    for i in (1..order.len()).rev() {
        let j = rng.gen_range(0..=i);
        order.swap(i, j);
    }
    let picks: Vec<usize> = if probes <= order.len() {
        order[..probes].to_vec()
    } else {
        (0..probes).map(|i| order[i % order.len()]).collect()
    };
    let mut work = theta.to_vec();
    let mut report = GradCheckReport { probes: picks.len(), max_rel_err: 0.0, worst_index: 0 };
    for &i in &picks {
        let orig = work[i];
        work[i] = orig + h;
        let up = eval(&work)?;
        work[i] = orig - h;
        let down = eval(&work)?;
        work[i] = orig;
        let fd = (up - down) / (2.0 * h);
        let e = rel_err(grad[i], fd);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}
