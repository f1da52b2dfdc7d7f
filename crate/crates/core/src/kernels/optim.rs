use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kernels::params::ParamStore;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub beta2: f64,
    pub eps: f64,
    /// Decoupled weight decay, applied as `p -= lr * weight_decay * p`.
    pub weight_decay: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct AdamState {
    pub step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

/// One Adam update with bias correction. `grads` is aligned with the
/// store's entry order. Nothing is modified if any gradient is non-finite.
pub fn adam_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    state: &mut AdamState,
    lr: f64,
    beta1: f64,
    cfg: &AdamConfig,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(Error::ShapeMismatch {
            op: "adam_step",
            left: vec![params.len()],
            right: vec![grads.len()],
        });
    }
    for ((name, t), g) in params.iter().zip(grads) {
        if g.len() != t.len() {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                left: t.shape.clone(),
                right: vec![g.len()],
            });
        }
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.clone()));
        }
    }
    if state.m.is_empty() {
        state.m = grads.iter().map(|g| vec![0.0; g.len()]).collect();
        state.v = state.m.clone();
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for (i, ((_, p), g)) in params.iter_mut().zip(grads).enumerate() {
        let (m, v) = (&mut state.m[i], &mut state.v[i]);
        for j in 0..g.len() {
            m[j] = beta1 * m[j] + (1.0 - beta1) * g[j];
            v[j] = cfg.beta2 * v[j] + (1.0 - cfg.beta2) * g[j] * g[j];
            let mhat = m[j] / bc1;
            let vhat = v[j] / bc2;
            p.data[j] -= lr * cfg.weight_decay * p.data[j];
            p.data[j] -= lr * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OneCycle {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_final: f64,
    pub beta_high: f64,
    pub beta_low: f64,
    /// Fraction of steps spent rising to `lr_max`.
    pub warmup_fraction: f64,
}

impl Default for OneCycle {
    fn default() -> Self {
        OneCycle {
            lr_start: 3e-4,
            lr_max: 3e-3,
            lr_final: 3e-6,
            beta_high: 0.95,
            beta_low: 0.85,
            warmup_fraction: 0.4,
        }
    }
}

/// Piecewise-linear one-cycle schedule, returns `(lr, beta1)`.
pub fn lr_schedule(step: usize, total_steps: usize, cfg: &OneCycle) -> (f64, f64) {
    let lerp = |a: f64, b: f64, t: f64| a + (b - a) * t.clamp(0.0, 1.0);
    if total_steps == 0 {
        return (cfg.lr_start, cfg.beta_high);
    }
    let s = step.min(total_steps) as f64;
    let peak = cfg.warmup_fraction * total_steps as f64;
    if s <= peak {
        let t = if peak > 0.0 { s / peak } else { 1.0 };
        (lerp(cfg.lr_start, cfg.lr_max, t), lerp(cfg.beta_high, cfg.beta_low, t))
    } else {
        let t = (s - peak) / (total_steps as f64 - peak);
        (lerp(cfg.lr_max, cfg.lr_final, t), lerp(cfg.beta_low, cfg.beta_high, t))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kernels::tensor::Tensor;

    fn scalar_store(v: f64) -> ParamStore {
        let mut s = ParamStore::new();
        s.insert("p", Tensor::scalar(v));
        s
    }

    const NO_DECAY: AdamConfig = AdamConfig {
        beta2: 0.999,
        eps: 1e-8,
        weight_decay: 0.0,
    };

    #[test]
    fn zero_gradient_leaves_params() {
        let mut s = scalar_store(1.5);
        let mut st = AdamState::default();
        adam_step(&mut s, &[vec![0.0]], &mut st, 0.1, 0.9, &NO_DECAY).unwrap();
        assert_eq!(s.get("p").unwrap().item(), 1.5);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::default();
        adam_step(&mut s, &[vec![1.0]], &mut st, 0.1, 0.9, &NO_DECAY).unwrap();
        // m_hat = 1, v_hat = 1: step = 0.1 / (1 + 1e-8)
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((s.get("p").unwrap().item() - want).abs() < 1e-15);
    }

    #[test]
    fn deterministic_bitwise() {
        let run = || {
            let mut s = scalar_store(0.3);
            let mut st = AdamState::default();
            for _ in 0..2 {
                adam_step(&mut s, &[vec![0.7]], &mut st, 0.01, 0.9, &AdamConfig::default()).unwrap();
            }
            s.get("p").unwrap().item().to_bits()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn non_finite_gradient_names_parameter() {
        let mut s = scalar_store(1.0);
        let mut st = AdamState::default();
        let err = adam_step(&mut s, &[vec![f64::NAN]], &mut st, 0.1, 0.9, &NO_DECAY).unwrap_err();
        assert!(matches!(err, Error::NonFiniteGradient(ref n) if n == "p"));
        assert_eq!(s.get("p").unwrap().item(), 1.0);
    }

    #[test]
    fn one_cycle_anchor_points() {
        let cfg = OneCycle::default();
        let (lr, b) = lr_schedule(0, 1000, &cfg);
        assert!((lr - 3e-4).abs() < 1e-15 && (b - 0.95).abs() < 1e-15);
        let (lr, b) = lr_schedule(400, 1000, &cfg);
        assert!((lr - 3e-3).abs() < 1e-15 && (b - 0.85).abs() < 1e-15);
        let (lr, b) = lr_schedule(1000, 1000, &cfg);
        assert!((lr - 3e-6).abs() < 1e-15 && (b - 0.95).abs() < 1e-15);
        let (lr, _) = lr_schedule(200, 1000, &cfg);
        assert!((lr - 0.5 * (3e-4 + 3e-3)).abs() < 1e-15);
    }
}
