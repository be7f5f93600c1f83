use serde::{Deserialize, Serialize};

use super::tensor::Parameter;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// One bias-corrected Adam update at step `t` (1-based); gradients are zeroed afterwards.
///
/// Every gradient is checked before any parameter moves, so a non-finite
/// gradient leaves the whole set untouched.
pub fn adam_step<'a, I>(params: I, cfg: &AdamConfig, t: usize) -> Result<()>
where
    I: IntoIterator<Item = &'a mut Parameter>,
{
    if t < 1 {
        return Err(Error::Usage("Adam step counter starts at 1".into()));
    }
    let mut params: Vec<&mut Parameter> = params.into_iter().collect();
    if params.iter().any(|p| !p.grad.all_finite()) {
        return Err(Error::NonFinite {
            what: "gradient".into(),
            step: t,
        });
    }
    let bc1 = 1.0 - cfg.beta1.powi(t as i32);
    let bc2 = 1.0 - cfg.beta2.powi(t as i32);
    for p in params.iter_mut() {
        let Parameter { value, grad, m, v } = &mut **p;
        for (((x, &g), mi), vi) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            *mi = cfg.beta1 * *mi + (1.0 - cfg.beta1) * g;
            *vi = cfg.beta2 * *vi + (1.0 - cfg.beta2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *x -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
        grad.fill(0.0);
    }
    Ok(())
}

/// Adam with its own step counter.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub config: AdamConfig,
    pub t: usize,
}

impl Adam {
    pub fn new(config: AdamConfig) -> Self {
        Adam { config, t: 0 }
    }

    pub fn step<'a, I>(&mut self, params: I) -> Result<()>
    where
        I: IntoIterator<Item = &'a mut Parameter>,
    {
        self.t += 1;
        adam_step(params, &self.config, self.t)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn zero_gradient_changes_nothing() {
        let mut p = Parameter::new(Tensor::filled(&[3], 0.7));
        let before = p.clone();
        adam_step([&mut p], &AdamConfig::default(), 1).unwrap();
        assert_eq!(p, before);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut p = Parameter::new(Tensor::filled(&[4], 2.0));
        p.grad.fill(1.0);
        let cfg = AdamConfig::default();
        adam_step([&mut p], &cfg, 1).unwrap();
        for &x in p.value.data() {
            // m_hat = 1, v_hat = 1 -> delta = -lr / (1 + eps)
            assert!((x - (2.0 - cfg.lr / (1.0 + cfg.eps))).abs() < 1e-15);
        }
        assert_eq!(p.grad.max_abs(), 0.0);
    }

    #[test]
    fn two_steps_on_quadratic_match_hand_trace() {
        // f(x) = x^2, x0 = 1, lr 0.1.
        let cfg = AdamConfig {
            lr: 0.1,
            ..AdamConfig::default()
        };
        let mut p = Parameter::new(Tensor::scalar(1.0));
        p.grad.data_mut()[0] = 2.0;
        adam_step([&mut p], &cfg, 1).unwrap();
        // m = 0.2, v = 0.004; m_hat = 2, v_hat = 4 -> x = 1 - 0.1 * 2 / (2 + 1e-8)
        let x1 = 1.0 - 0.1 * 2.0 / (2.0 + 1e-8);
        assert!((p.value.data()[0] - x1).abs() < 1e-15);
        p.grad.data_mut()[0] = 2.0 * x1;
        adam_step([&mut p], &cfg, 2).unwrap();
        let g2 = 2.0 * x1;
        let m2 = 0.9 * 0.2 + 0.1 * g2;
        let v2 = 0.999 * 0.004 + 0.001 * g2 * g2;
        let m_hat = m2 / (1.0 - 0.81);
        let v_hat = v2 / (1.0 - 0.999f64.powi(2));
        let x2 = x1 - 0.1 * m_hat / (v_hat.sqrt() + 1e-8);
        assert!((p.value.data()[0] - x2).abs() < 1e-14);
    }

    #[test]
    fn non_finite_gradient_aborts() {
        let mut p = Parameter::new(Tensor::filled(&[2], 1.0));
        p.grad.data_mut()[1] = f64::NAN;
        let err = adam_step([&mut p], &AdamConfig::default(), 3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { step: 3, .. }));
        assert_eq!(p.value.data(), &[1.0, 1.0]);
    }
}
