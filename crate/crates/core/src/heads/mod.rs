//! Classification and IoU regression heads on top of the fused features.

pub mod classifier;
pub mod regressor;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use classifier::Classifier;
pub use regressor::{IouFeatures, Modulation, Regressor};

/// Input pixels per cell of the low and high feature maps.
pub const LOW_STRIDE: f64 = 8.0;
pub const HIGH_STRIDE: f64 = 16.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HeadConfig {
    /// Spatial size of the target filter.
    pub filter_size: usize,
    /// Bilinear samples per pooled cell side.
    pub pool_samples: usize,
    pub optimizer_steps: usize,
    pub iou_pool_low: usize,
    pub iou_pool_high: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        HeadConfig {
            filter_size: 4,
            pool_samples: 2,
            optimizer_steps: 5,
            iou_pool_low: 5,
            iou_pool_high: 3,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.filter_size == 0 || self.pool_samples == 0 || self.iou_pool_low == 0 || self.iou_pool_high == 0 {
            return Err(Error::Config("head pooling sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Spread of the label Gaussian in cells.
pub fn label_sigma(target_w: f64, target_h: f64, stride: f64) -> f64 {
    (0.25 * (target_w * target_h).sqrt() / stride).max(1.0)
}

/// Gaussian score target `[1, 1, rows, cols]` centered on `center` (input pixels).
///
/// Cell `(i, j)` sits at input position `((j + 0.5) * stride, (i + 0.5) * stride)`.
pub fn make_label(center: (f64, f64), target: (f64, f64), rows: usize, cols: usize, stride: f64) -> Tensor {
    let sigma = label_sigma(target.0, target.1, stride);
    let cx = center.0 / stride - 0.5;
    let cy = center.1 / stride - 0.5;
    Tensor::from_fn(&[1, 1, rows, cols], |k| {
        let (i, j) = ((k / cols) as f64, (k % cols) as f64);
        (-((j - cx).powi(2) + (i - cy).powi(2)) / (2.0 * sigma * sigma)).exp()
    })
}

/// Input-pixel center of a score-map cell.
pub fn cell_center(row: usize, col: usize, stride: f64) -> (f64, f64) {
    ((col as f64 + 0.5) * stride, (row as f64 + 0.5) * stride)
}

/// Index of the largest score, or `None` when the map is flat.
pub fn argmax(scores: &[f64]) -> Option<usize> {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    let flat = scores.iter().all(|&s| s == scores[best]);
    (!scores.is_empty() && !flat).then_some(best)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn label_peak_and_symmetry() {
        let center = cell_center(3, 5, 8.0);
        let z = make_label(center, (16.0, 16.0), 8, 10, 8.0);
        let z = z.data();
        assert_eq!(z[3 * 10 + 5], 1.0);
        assert_eq!(z[3 * 10 + 3], z[3 * 10 + 7]);
        assert_eq!(z[2 * 10 + 5], z[4 * 10 + 5]);
        assert!(z.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn sigma_floor() {
        assert_eq!(label_sigma(8.0, 8.0, 8.0), 1.0);
        assert_eq!(label_sigma(64.0, 64.0, 8.0), 2.0);
    }

    #[test]
    fn argmax_flat_and_scaled() {
        assert_eq!(argmax(&[0.0; 4]), None);
        let s = [0.1, 0.5, -0.2, 0.4];
        assert_eq!(argmax(&s), Some(1));
        let scaled: Vec<f64> = s.iter().map(|v| v * 3.7).collect();
        assert_eq!(argmax(&scaled), Some(1));
    }
}
