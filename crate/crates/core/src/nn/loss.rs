//! Binary focal loss on logits.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_GAMMA: f32 = 2.0;
pub const DEFAULT_ALPHA: f32 = 0.25;

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Per-sample focal loss `-a_t (1 - p_t)^gamma ln(p_t)` and its derivative with
/// respect to each logit. `a_t` is `alpha` for positives and `1 - alpha` for
/// negatives; `p_t` is the sigmoid probability of the true class.
pub fn focal_loss_per_sample(
    logits: &[f32],
    labels: &[f32],
    gamma: f32,
    alpha: f32,
) -> Result<(Vec<f32>, Vec<f32>)> {
    if logits.is_empty() {
        return Err(Error::Empty("focal loss over an empty batch".into()));
    }
    if logits.len() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logits but {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let gamma = gamma as f64;
    let mut losses = Vec::with_capacity(logits.len());
    let mut grads = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        let (sign, a_t) = match y {
            v if v == 1.0 => (1.0f64, alpha as f64),
            v if v == 0.0 => (-1.0f64, 1.0 - alpha as f64),
            other => return Err(Error::Data(format!("focal loss label must be 0 or 1, got {other}"))),
        };
        let zt = sign * z as f64;
        let log_pt = -softplus(-zt);
        let pt = log_pt.exp();
        let one_minus = (-softplus(zt)).exp();
        let focus = one_minus.powf(gamma);
        losses.push((-a_t * focus * log_pt) as f32);
        grads.push((sign * a_t * focus * (gamma * pt * log_pt - one_minus)) as f32);
    }
    if losses.iter().chain(&grads).any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("focal loss".into()));
    }
    Ok((losses, grads))
}

/// Mean focal loss over the batch and its gradient with respect to the logits.
pub fn focal_loss(logits: &Tensor, labels: &Tensor, gamma: f32, alpha: f32) -> Result<(f32, Tensor)> {
    let (losses, grads) = focal_loss_per_sample(logits.data(), labels.data(), gamma, alpha)?;
    let n = losses.len() as f64;
    let mean = losses.iter().map(|&l| l as f64).sum::<f64>() / n;
    let grad = grads.iter().map(|&g| (g as f64 / n) as f32).collect();
    Ok((mean as f32, Tensor::new(logits.shape().to_vec(), grad)?))
}
