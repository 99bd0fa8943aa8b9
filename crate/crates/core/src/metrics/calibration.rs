//! Expected calibration error for binary probability maps.

use alloc::vec;

use super::Mask;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// ECE with `n_bins` equal-width confidence bins over `[0.5, 1]`.
///
/// Each pixel predicts foreground iff `p >= 0.5`, with confidence
/// `max(p, 1 - p)`. The error is `sum_b |b|/N * |acc(b) - conf(b)|`; empty
/// bins contribute nothing.
pub fn ece(prob: &Tensor, gt: &Mask, n_bins: usize) -> Result<f64> {
    if n_bins == 0 {
        return Err(Error::invalid("ece", "n_bins must be >= 1"));
    }
    let (h, w) = prob.plane_dims()?;
    if (h, w) != (gt.height(), gt.width()) {
        return Err(Error::ShapeMismatch {
            op: "ece",
            left: prob.shape().to_vec(),
            right: vec![gt.height(), gt.width()],
        });
    }
    let mut count = vec![0usize; n_bins];
    let mut correct = vec![0usize; n_bins];
    let mut conf_sum = vec![0.0; n_bins];
    for (&p, &y) in prob.data().iter().zip(gt.data()) {
        let fg = p >= 0.5;
        let conf = if fg { p } else { 1.0 - p };
        let bin = (((conf - 0.5) * 2.0 * n_bins as f64) as usize).min(n_bins - 1);
        count[bin] += 1;
        conf_sum[bin] += conf;
        if fg == y {
            correct[bin] += 1;
        }
    }
    let n = prob.numel() as f64;
    let mut total = 0.0;
    for b in 0..n_bins {
        if count[b] == 0 {
            continue;
        }
        let m = count[b] as f64;
        let acc = correct[b] as f64 / m;
        let conf = conf_sum[b] / m;
        total += m / n * (acc - conf).abs();
    }
    Ok(total)
}
