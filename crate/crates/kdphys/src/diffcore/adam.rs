//! Adam optimizer with bias-corrected moment estimates.

use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        AdamConfig { lr, ..Default::default() }
    }

    fn validate(&self) -> Result<()> {
        if self.lr <= 0.0
            || !(0.0..1.0).contains(&self.beta1)
            || !(0.0..1.0).contains(&self.beta2)
            || self.eps <= 0.0
        {
            return Err(Error::Parameter(format!(
                "invalid Adam config: lr {}, beta1 {}, beta2 {}, eps {}",
                self.lr, self.beta1, self.beta2, self.eps
            )));
        }
        Ok(())
    }
}

/// First/second moment buffers for one parameter tensor.
#[derive(Debug, Clone)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        AdamState { m: vec![0.0; len], v: vec![0.0; len], t: 0 }
    }

    pub fn step_count(&self) -> u64 {
        self.t
    }
}

/// One in-place Adam update of `params` from `grads`.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    cfg.validate()?;
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::Dimension(format!(
            "adam buffers disagree: {} params, {} grads, {} state entries",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    if grads.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite("adam gradient input".into()));
    }
    state.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(state.t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(state.t as i32);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = cfg.beta1 * state.m[i] + (1.0 - cfg.beta1) * g;
        state.v[i] = cfg.beta2 * state.v[i] + (1.0 - cfg.beta2) * g * g;
        let mhat = state.m[i] / bc1;
        let vhat = state.v[i] / bc2;
        params[i] -= cfg.lr * mhat / (vhat.sqrt() + cfg.eps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn first_step_moves_by_roughly_lr() {
        // With bias correction the first update is lr * g / (|g| + eps).
        let mut p = vec![1.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.1);
        adam_step(&mut p, &[2.0], &mut st, &cfg).unwrap();
        assert!((p[0] - 0.9).abs() < 1e-6, "expected ~0.9, got {}", p[0]);
    }

    #[test]
    fn drives_quadratic_to_zero() {
        // f(theta) = theta^2, grad = 2 theta, 200 steps from theta = 1.
        let mut theta = vec![1.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig::with_lr(0.1);
        for _ in 0..200 {
            let g = vec![2.0 * theta[0]];
            adam_step(&mut theta, &g, &mut st, &cfg).unwrap();
        }
        assert!(theta[0].abs() < 1e-2, "did not converge: theta = {}", theta[0]);
    }

    #[test]
    fn rejects_mismatched_buffers() {
        let mut p = vec![0.0; 2];
        let mut st = AdamState::new(2);
        let err = adam_step(&mut p, &[1.0], &mut st, &AdamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn rejects_non_finite_gradients() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let err = adam_step(&mut p, &[f64::NAN], &mut st, &AdamConfig::default());
        assert!(err.is_err());
    }

    #[test]
    fn rejects_bad_hyperparameters() {
        let mut p = vec![0.0];
        let mut st = AdamState::new(1);
        let cfg = AdamConfig { lr: -1.0, ..Default::default() };
        assert!(adam_step(&mut p, &[1.0], &mut st, &cfg).is_err());
    }
}
