use ndarray::{Array2, NdFloat};

use crate::error::{shape_err, Error, Result};
use crate::segnet::LogitMap;
use crate::teacher::IGNORE_INDEX;

/// Reliability-weighted cross-entropy averaged over all `H·W` pixels, with its logit gradient.
///
/// Pixels labelled [`IGNORE_INDEX`] contribute nothing. The gradient at a pixel
/// is `w · (softmax − onehot) / (H·W)`.
pub fn weighted_ce_loss<T: NdFloat>(
    logits: &LogitMap<T>,
    labels: &Array2<u8>,
    weights: &Array2<f32>,
) -> Result<(T, LogitMap<T>)> {
    let (h, w) = (logits.height(), logits.width());
    if labels.dim() != (h, w) || weights.dim() != (h, w) {
        return Err(shape_err!(
            "logits {h}x{w}, labels {:?}, weights {:?}",
            labels.dim(),
            weights.dim()
        ));
    }
    logits.check_finite("student logits")?;
    let nc = logits.channels();
    let scale = T::one() / T::from(h * w).unwrap();
    let mut grad = LogitMap::<T>::zeros(h, w, nc);
    let mut loss = T::zero();
    let probs = logits.softmax();
    for (p, row) in logits.matrix().outer_iter().enumerate() {
        let (y, x) = (p / w, p % w);
        let label = labels[[y, x]];
        let weight = T::from(weights[[y, x]]).unwrap();
        if label == IGNORE_INDEX || weight == T::zero() {
            continue;
        }
        let label = label as usize;
        if label >= nc {
            return Err(Error::Data(format!("label {label} outside {nc} classes")));
        }
        let max = row.fold(T::neg_infinity(), |m, &v| m.max(v));
        let lse = row.fold(T::zero(), |acc, &v| acc + (v - max).exp()).ln() + max;
        loss += weight * (lse - row[label]);
        let mut g = grad.pixel_mut(y, x);
        g.assign(&probs.pixel(y, x));
        g[label] -= T::one();
        g.mapv_inplace(|v| v * weight * scale);
    }
    Ok((loss * scale, grad))
}

/// Unweighted cross-entropy averaged over the non-ignored pixels.
pub fn mean_ce_loss<T: NdFloat>(logits: &LogitMap<T>, labels: &Array2<u8>) -> Result<(T, LogitMap<T>)> {
    let valid = labels.iter().filter(|&&l| l != IGNORE_INDEX).count();
    let ones = Array2::<f32>::ones(labels.dim());
    let (loss, mut grad) = weighted_ce_loss(logits, labels, &ones)?;
    if valid == 0 {
        return Ok((T::zero(), grad));
    }
    let rescale = T::from(labels.len() as f64 / valid as f64).unwrap();
    grad.matrix_mut().mapv_inplace(|v| v * rescale);
    Ok((loss * rescale, grad))
}

/// Polynomial decay `base · (1 − iter/max_iter)^power`.
pub fn poly_lr(base: f64, iter: u64, max_iter: u64, power: f64) -> Result<f64> {
    if iter > max_iter {
        return Err(Error::Range(format!("iteration {iter} beyond schedule length {max_iter}")));
    }
    if max_iter == 0 {
        return Ok(base);
    }
    Ok(base * (1.0 - iter as f64 / max_iter as f64).powf(power))
}
