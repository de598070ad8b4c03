//! Saliency evaluation metrics: mean absolute error and the maximum
//! F-measure over a sweep of 255 binarization thresholds.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Beta-squared weighting in the F-measure, emphasizing precision.
pub const FMEASURE_BETA2: f32 = 0.3;

fn check_pair(pred: &Tensor, gt: &Tensor) -> Result<()> {
    if pred.shape() != gt.shape() {
        return Err(Error::ShapeMismatch(format!(
            "metric inputs {} vs {}",
            pred.shape(),
            gt.shape()
        )));
    }
    if pred.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "prediction values must lie in [0, 1]".into(),
        ));
    }
    if gt.data().iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::InvalidArgument(
            "ground-truth values must lie in [0, 1]".into(),
        ));
    }
    Ok(())
}

/// Mean absolute error between a prediction and a ground-truth map, both
/// in [0, 1], accumulated in f64.
pub fn mae(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let sum: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(&p, &g)| (p as f64 - g as f64).abs())
        .sum();
    Ok(sum / pred.data().len() as f64)
}

/// Maximum F-measure over the thresholds `k/256` for `k` in `1..=255`.
/// The ground truth is binarized at 0.5.
///
/// Counting uses a 256-bin histogram over `floor(s * 256)`; because 256
/// is a power of two the product is exact in f32, so bin membership
/// reproduces the comparison `s >= k/256` without any edge cases.
pub fn max_fmeasure(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    check_pair(pred, gt)?;
    let mut hist_all = [0u64; 256];
    let mut hist_pos = [0u64; 256];
    let mut positives = 0u64;
    for (&s, &g) in pred.data().iter().zip(gt.data()) {
        let bin = ((s * 256.0) as usize).min(255);
        hist_all[bin] += 1;
        if g >= 0.5 {
            hist_pos[bin] += 1;
            positives += 1;
        }
    }
    let mut best = 0f32;
    let mut predicted = 0u64;
    let mut true_pos = 0u64;
    // Sweep thresholds from high to low, accumulating suffix counts.
    for k in (1..=255usize).rev() {
        predicted += hist_all[k];
        true_pos += hist_pos[k];
        let precision = true_pos as f32 / (predicted as f32 + 1e-8);
        let recall = true_pos as f32 / (positives as f32 + 1e-8);
        let f = (1.0 + FMEASURE_BETA2) * precision * recall
            / (FMEASURE_BETA2 * precision + recall + 1e-8);
        best = best.max(f);
    }
    Ok(best as f64)
}
