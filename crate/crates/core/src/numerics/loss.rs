use super::Tensor;
use crate::error::{Error, Result};

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// `-log softmax(logits)[target]` and its gradient `softmax - onehot`.
pub fn softmax_cross_entropy(logits: &Tensor, target: usize) -> Result<(f64, Tensor)> {
    logits.expect_ndim("softmax_cross_entropy", "logits", 1)?;
    let k = logits.len();
    if target >= k {
        return Err(Error::ClassIndex {
            index: target,
            num_classes: k,
        });
    }
    let z = logits.data();
    let m = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = z.iter().map(|&v| (v - m).exp()).sum::<f64>().ln() + m;
    let loss = log_sum - z[target];
    let mut grad = softmax(z);
    grad[target] -= 1.0;
    Ok((loss, Tensor::from_vec(&[k], grad)?))
}

/// Class-weighted binary cross-entropy on logits, averaged over classes.
///
/// The weight of class `i` scales both its positive and its negative term.
pub fn weighted_bce(logits: &Tensor, targets: &[bool], class_weights: &Tensor) -> Result<(f64, Tensor)> {
    const OP: &str = "weighted_bce";
    logits.expect_ndim(OP, "logits", 1)?;
    let k = logits.len();
    if targets.len() != k {
        return Err(Error::shape(OP, "targets", k, targets.len()));
    }
    class_weights.expect_shape(OP, "class weights", &[k])?;
    if let Some(w) = class_weights.data().iter().find(|&&w| !(w > 0.0)) {
        return Err(Error::InvalidArgument(format!("{OP}: class weight {w} is not positive")));
    }
    let kf = k as f64;
    let mut loss = 0.0;
    let mut grad = Vec::with_capacity(k);
    for ((&z, &y), &w) in logits.data().iter().zip(targets).zip(class_weights.data()) {
        let y = if y { 1.0 } else { 0.0 };
        // log(1 + e^z) - z*y, rewritten to avoid overflow
        let bce = z.max(0.0) - z * y + (-z.abs()).exp().ln_1p();
        loss += w * bce;
        grad.push(w * (sigmoid(z) - y) / kf);
    }
    Ok((loss / kf, Tensor::from_vec(&[k], grad)?))
}
