use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Max-subtracted softmax of one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

fn log_softmax_at(logits: &[f64], target: usize) -> f64 {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits[target] - lse
}

pub(crate) fn check_targets(targets: &[usize], classes: usize) -> Result<()> {
    match targets.iter().find(|&&t| t >= classes) {
        Some(&target) => Err(Error::Target { target, classes }),
        None => Ok(()),
    }
}

/// Mean softmax cross-entropy over a `[N, C]` logit batch.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> Result<f64> {
    let classes = logits.sample_len();
    if logits.batch() != targets.len() {
        return Err(Error::Shape { expected: vec![targets.len(), classes], found: logits.shape().to_vec() });
    }
    check_targets(targets, classes)?;
    if targets.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = targets.iter().enumerate().map(|(n, &t)| -log_softmax_at(logits.sample(n), t)).sum();
    // -log p is never negative mathematically; clamp rounding noise.
    Ok((total / targets.len() as f64).max(0.0))
}

/// Gradient of [`cross_entropy`] with respect to the logits.
pub(crate) fn cross_entropy_grad(logits: &Tensor, targets: &[usize]) -> Vec<f64> {
    let classes = logits.sample_len();
    let scale = 1.0 / targets.len() as f64;
    let mut grad = Vec::with_capacity(logits.len());
    for (n, &t) in targets.iter().enumerate() {
        let p = softmax(logits.sample(n));
        for (c, pc) in p.into_iter().enumerate() {
            let y = if c == t { 1.0 } else { 0.0 };
            grad.push((pc - y) * scale);
        }
    }
    debug_assert_eq!(grad.len(), targets.len() * classes);
    grad
}
