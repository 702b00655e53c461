//! One-pass evaluation metrics over a tracked sequence.

use crate::error::{Error, Result};
use crate::tensor::Real;
use crate::tracker::PixBox;

/// Summary statistics for one sequence (or a pooled set of frames).
#[derive(Clone, Copy, Debug)]
pub struct EvalReport {
    pub mean_iou: Real,
    /// Mean over thresholds {0.00, 0.01, .., 1.00} of the fraction of frames
    /// whose IoU is strictly above the threshold.
    pub success_auc: Real,
    /// Fraction of frames whose center error is strictly below `k` pixels.
    pub precision: Real,
    pub n_frames: usize,
}

/// Per-frame IoUs between predictions and ground truth.
pub fn frame_ious(results: &[PixBox], gt: &[PixBox]) -> Result<Vec<Real>> {
    if results.len() != gt.len() {
        return Err(Error::Sequence(format!(
            "evaluate: {} results vs {} ground-truth frames",
            results.len(),
            gt.len()
        )));
    }
    Ok(results.iter().zip(gt).map(|(r, g)| r.iou(g)).collect())
}

/// Success AUC over the fixed 101-point threshold grid. Strict `>` at every
/// threshold, so perfect tracking lands on 100/101, not 1.
pub fn success_auc(ious: &[Real]) -> Real {
    if ious.is_empty() {
        return 0.0;
    }
    let mut acc = 0.0;
    for t in 0..=100 {
        let thr = t as Real / 100.0;
        let hits = ious.iter().filter(|&&v| v > thr).count();
        acc += hits as Real / ious.len() as Real;
    }
    acc / 101.0
}

/// Fraction of frames with center error strictly under `k` pixels.
pub fn precision_at(results: &[PixBox], gt: &[PixBox], k: Real) -> Result<Real> {
    if results.len() != gt.len() {
        return Err(Error::Sequence(format!(
            "evaluate: {} results vs {} ground-truth frames",
            results.len(),
            gt.len()
        )));
    }
    if results.is_empty() {
        return Ok(0.0);
    }
    let hits = results
        .iter()
        .zip(gt)
        .filter(|(r, g)| r.center_distance(g) < k)
        .count();
    Ok(hits as Real / results.len() as Real)
}

/// Full one-pass report. `k` is the precision radius in pixels.
pub fn evaluate(results: &[PixBox], gt: &[PixBox], k: Real) -> Result<EvalReport> {
    let ious = frame_ious(results, gt)?;
    if ious.is_empty() {
        return Err(Error::Sequence("evaluate: empty sequence".into()));
    }
    let mean_iou = ious.iter().sum::<Real>() / ious.len() as Real;
    Ok(EvalReport {
        mean_iou,
        success_auc: success_auc(&ious),
        precision: precision_at(results, gt, k)?,
        n_frames: ious.len(),
    })
}
