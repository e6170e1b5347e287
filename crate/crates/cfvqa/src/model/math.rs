//! Small numeric helpers shared across the model.

use ndarray::Array1;

pub(crate) fn softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp = scores.mapv(|s| (s - max).exp());
    let total = exp.sum();
    exp / total
}

pub(crate) fn log_softmax(scores: &Array1<f64>) -> Array1<f64> {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = scores.mapv(|s| (s - max).exp()).sum().ln() + max;
    scores.mapv(|s| s - lse)
}

/// Gradient of a scalar through `p = softmax(scores)` given `dL/dp`.
pub(crate) fn softmax_backward(probs: &Array1<f64>, grad_probs: &Array1<f64>) -> Array1<f64> {
    let dot = probs.dot(grad_probs);
    Array1::from_shape_fn(probs.len(), |i| probs[i] * (grad_probs[i] - dot))
}

/// Gradient of a scalar through `lp = log_softmax(scores)` given `dL/dlp`.
pub(crate) fn log_softmax_backward(
    probs: &Array1<f64>,
    grad_log_probs: &Array1<f64>,
) -> Array1<f64> {
    let total: f64 = grad_log_probs.sum();
    Array1::from_shape_fn(probs.len(), |i| grad_log_probs[i] - probs[i] * total)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}
