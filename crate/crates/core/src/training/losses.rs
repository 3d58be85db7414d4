//! Scalar loss definitions and the loss report.

use serde::{Deserialize, Serialize};

use crate::autograd::{focal_term, DICE_EPS};
use crate::error::{shape_err, Result};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;
/// Weight of the mask term.
pub const MASK_WEIGHT: f64 = 3.0;

/// Summed focal loss divided by `normalizer` (at least 1).
pub fn focal_loss(pred: &[f64], target: &[f64], alpha: f64, gamma: f64, normalizer: usize) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err(format!("focal loss: {} predictions, {} targets", pred.len(), target.len())));
    }
    let sum: f64 = pred.iter().zip(target).map(|(&p, &t)| focal_term(p, t, alpha, gamma)).sum();
    Ok(sum / normalizer.max(1) as f64)
}

/// `1 − (2Σpq + ε) / (Σp² + Σq² + ε)`.
pub fn dice_loss(pred: &[f64], target: &[f64]) -> Result<f64> {
    if pred.len() != target.len() {
        return Err(shape_err(format!("dice loss: {} predictions, {} targets", pred.len(), target.len())));
    }
    let inter: f64 = pred.iter().zip(target).map(|(p, q)| p * q).sum();
    let pp: f64 = pred.iter().map(|p| p * p).sum();
    let qq: f64 = target.iter().map(|q| q * q).sum();
    Ok(1.0 - (2.0 * inter + DICE_EPS) / (pp + qq + DICE_EPS))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub class: f64,
    pub mask: f64,
    pub grid: f64,
    pub lambda: f64,
    pub total: f64,
}

impl LossReport {
    pub fn new(class: f64, mask: f64, grid: f64, lambda: f64) -> Self {
        Self {
            class,
            mask,
            grid,
            lambda,
            total: class + lambda * mask + grid,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.class, self.mask, self.grid, self.total].iter().all(|v| v.is_finite())
    }

    /// Component-wise mean.
    pub fn mean(reports: &[LossReport]) -> LossReport {
        let n = reports.len().max(1) as f64;
        let s = |f: fn(&LossReport) -> f64| reports.iter().map(f).sum::<f64>() / n;
        LossReport {
            class: s(|r| r.class),
            mask: s(|r| r.mask),
            grid: s(|r| r.grid),
            lambda: reports.first().map_or(MASK_WEIGHT, |r| r.lambda),
            total: s(|r| r.total),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn focal_single_element() {
        let l = focal_loss(&[0.5], &[1.0], 0.25, 2.0, 1).unwrap();
        assert!((l - 0.25 * 0.25 * 2f64.ln()).abs() < 1e-15);
        assert!(focal_loss(&[1.0, 0.0], &[1.0, 0.0], 0.25, 2.0, 1).unwrap() < 1e-6);
    }

    #[test]
    fn dice_examples() {
        assert!(dice_loss(&[1.0, 0.0, 1.0], &[1.0, 0.0, 1.0]).unwrap().abs() < 1e-6);
        assert!((dice_loss(&[0.0, 1.0], &[1.0, 0.0]).unwrap() - 1.0).abs() < 1e-6);
        let l = dice_loss(&[0.5; 4], &[1.0, 1.0, 0.0, 0.0]).unwrap();
        assert!((l - 1.0 / 3.0).abs() < 1e-6);
    }

    #[test]
    fn total_uses_lambda() {
        let r = LossReport::new(1.0, 2.0, 0.5, 3.0);
        assert_eq!(r.total, 7.5);
    }
}
