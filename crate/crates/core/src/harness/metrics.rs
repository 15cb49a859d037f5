//! Point-forecast error metrics on the original case-count scale.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSet {
    pub mae: f64,
    pub rmse: f64,
    pub pcc: f64,
    /// Set when either vector had zero variance and `pcc` was reported as 0.
    pub pcc_degenerate: bool,
}

/// MAE, RMSE and Pearson correlation over the flattened vectors.
///
/// # Panics
/// When the lengths differ or the inputs are empty.
pub fn compute(pred: &[f64], target: &[f64]) -> MetricSet {
    assert_eq!(pred.len(), target.len(), "metric inputs differ in length");
    assert!(!pred.is_empty(), "metrics of an empty set");
    let n = pred.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let e = p - t;
        abs += e.abs();
        sq += e * e;
    }
    let mp = pred.iter().sum::<f64>() / n;
    let mt = target.iter().sum::<f64>() / n;
    let (mut cov, mut vp, mut vt) = (0.0, 0.0, 0.0);
    for (p, t) in pred.iter().zip(target) {
        let (dp, dt) = (p - mp, t - mt);
        cov += dp * dt;
        vp += dp * dp;
        vt += dt * dt;
    }
    let denom = (vp * vt).sqrt();
    let degenerate = denom.is_nan() || denom <= 0.0 || denom.is_infinite();
    MetricSet {
        mae: abs / n,
        rmse: (sq / n).sqrt(),
        pcc: if degenerate { 0.0 } else { (cov / denom).clamp(-1.0, 1.0) },
        pcc_degenerate: degenerate,
    }
}
