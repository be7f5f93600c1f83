use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` before taking logs.
pub const BCE_EPS: f64 = 1e-7;

fn bce_term(p: f64, y: f64, n: f64) -> (f64, f64) {
    let lo = BCE_EPS;
    let hi = 1.0 - BCE_EPS;
    let clamped = p.clamp(lo, hi);
    let loss = -(y * clamped.ln() + (1.0 - y) * (1.0 - clamped).ln());
    let grad = if p > lo && p < hi {
        (-y / clamped + (1.0 - y) / (1.0 - clamped)) / n
    } else {
        0.0
    };
    (loss / n, grad)
}

fn check_label(y: f64) -> Result<()> {
    if y == 0.0 || y == 1.0 {
        Ok(())
    } else {
        Err(Error::Input(format!("binary label must be 0 or 1, got {y}")))
    }
}

/// Mean binary cross-entropy over all entries, with its gradient in `pred`.
pub fn bce_loss(pred: &Tensor, label: &Tensor) -> Result<(f64, Tensor)> {
    pred.check_same_shape(label)?;
    let labels: Vec<Option<f64>> = label.data().iter().map(|&y| Some(y)).collect();
    bce_loss_subset(pred, &labels)
}

/// Mean BCE over the entries whose label is `Some`; the rest get zero gradient.
/// With nothing included the loss is zero.
pub fn bce_loss_subset(pred: &Tensor, labels: &[Option<f64>]) -> Result<(f64, Tensor)> {
    if labels.len() != pred.len() {
        return Err(Error::Config(format!(
            "{} labels for {} predictions",
            labels.len(),
            pred.len()
        )));
    }
    let n = labels.iter().filter(|l| l.is_some()).count();
    let mut grad = Tensor::zeros(pred.shape());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let mut loss = 0.0;
    for ((&p, label), g) in pred.data().iter().zip(labels).zip(grad.data_mut()) {
        if let Some(y) = *label {
            check_label(y)?;
            let (l, d) = bce_term(p, y, n as f64);
            loss += l;
            *g = d;
        }
    }
    Ok((loss, grad))
}

/// Mean Huber loss with the quadratic/linear transition at `|d| = 1`.
pub fn smooth_l1(pred: &Tensor, target: &Tensor) -> Result<(f64, Tensor)> {
    pred.check_same_shape(target)?;
    let n = pred.len();
    let mut grad = Tensor::zeros(pred.shape());
    if n == 0 {
        return Ok((0.0, grad));
    }
    let inv = 1.0 / n as f64;
    let mut loss = 0.0;
    for ((&p, &t), g) in pred.data().iter().zip(target.data()).zip(grad.data_mut()) {
        let d = p - t;
        if d.abs() < 1.0 {
            loss += 0.5 * d * d;
            *g = d * inv;
        } else {
            loss += d.abs() - 0.5;
            *g = d.signum() * inv;
        }
    }
    Ok((loss * inv, grad))
}
