//! Target classifier: a filter pooled from the reference features, refined by a few
//! steepest-descent steps on the hinged score loss, then correlated with test features.

use rand::Rng;

use crate::autodiff::{Graph, Padding, ParamGroup, ParamStore, Tensor, Var};
use crate::error::Result;
use crate::loss::HINGE_THRESHOLD;
use crate::nn::{Conv, Init};

use super::{HeadConfig, LOW_STRIDE};

/// Used when the curvature along the gradient vanishes.
pub const FALLBACK_STEP: f64 = 0.1;
pub const STEP_EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct Classifier {
    pub feat: Conv,
    pub filter_size: usize,
    pub pool_samples: usize,
    pub steps: usize,
}

/// Hinge mask and effective target of a score map: the residual of cell `i` is
/// `mask_i * (s_i - target_i)`.
pub fn frozen_mask(scores: &[f64], label: &[f64]) -> (Vec<f64>, Vec<f64>) {
    scores
        .iter()
        .zip(label)
        .map(|(&s, &z)| {
            if z > HINGE_THRESHOLD {
                (1.0, z)
            } else if s > 0.0 {
                (1.0, 0.0)
            } else {
                (0.0, 0.0)
            }
        })
        .unzip()
}

/// Mean squared masked residual.
pub fn masked_loss(scores: &[f64], mask: &[f64], target: &[f64]) -> f64 {
    let n = scores.len().max(1) as f64;
    scores
        .iter()
        .zip(mask)
        .zip(target)
        .map(|((s, m), t)| (m * (s - t)).powi(2))
        .sum::<f64>()
        / n
}

impl Classifier {
    /// The feature conv starts small enough that a pooled filter scores O(1): feature
    /// rms near `1 / sqrt(C k^2)` for unit-scale inputs.
    pub fn new<R: Rng>(store: &mut ParamStore, channels: usize, cfg: &HeadConfig, rng: &mut R) -> Self {
        let std = 1.0 / (3.0 * channels as f64 * cfg.filter_size as f64);
        Classifier {
            feat: Conv::new(
                store,
                "cls.feat",
                channels,
                channels,
                3,
                1,
                true,
                Init::Std(std),
                ParamGroup::Classifier,
                rng,
            ),
            filter_size: cfg.filter_size,
            pool_samples: cfg.pool_samples,
            steps: cfg.optimizer_steps,
        }
    }

    /// Classification features for a batch of fused low-level maps.
    pub fn features(&self, g: &mut Graph, store: &ParamStore, k_low: Var) -> Result<Var> {
        self.feat.forward(g, store, k_low)
    }

    /// Region-pooled filter `[1, C, k, k]` of a single reference map.
    pub fn init_filter(&self, g: &mut Graph, feat: Var, bbox: Var) -> Result<Var> {
        g.region_pool(feat, bbox, self.filter_size, self.pool_samples, 1.0 / LOW_STRIDE)
    }

    pub fn classify(&self, g: &mut Graph, feat: Var, filter: Var) -> Result<Var> {
        g.conv2d(feat, filter, None, 1, Padding::preserving(self.filter_size))
    }

    /// One steepest-descent step with the hinge mask frozen at the current scores.
    ///
    /// With residuals `r = m (s - z') / sqrt(N)` the step along `g = J^T r` of length
    /// `|g|^2 / |J g|^2` is the exact minimizer of the frozen-mask loss, which is
    /// quadratic in the filter.
    pub fn descent_step(&self, g: &mut Graph, feat: Var, filter: Var, label: &Tensor) -> Result<Var> {
        let k = self.filter_size;
        let s = self.classify(g, feat, filter)?;
        let n = label.len() as f64;
        let (mask, target) = frozen_mask(g.value(s).data(), label.data());
        let shape = g.shape(s).to_vec();
        // rho = m^2 (s - z') / N, the residual already weighted by its Jacobian factor
        let m_over_n = g.input(Tensor::new(&shape, mask.iter().map(|m| m / n).collect())?);
        let tgt = g.input(Tensor::new(&shape, target)?);
        let diff = g.sub(s, tgt)?;
        let rho = g.mul(diff, m_over_n)?;
        let grad = g.conv2d_weight_grad(feat, rho, k, k, Padding::preserving(k))?;
        let gg = g.dot(grad, grad)?;
        let jg = self.classify(g, feat, grad)?;
        let m_over_sqrt_n = g.input(Tensor::new(&shape, mask.iter().map(|m| m / n.sqrt()).collect())?);
        let jg = g.mul(jg, m_over_sqrt_n)?;
        let jj = g.dot(jg, jg)?;
        let alpha = if g.value(jj).item() < STEP_EPS {
            g.input(Tensor::scalar(FALLBACK_STEP))
        } else {
            let den = g.add_const(jj, STEP_EPS);
            g.div_scalar(gg, den)?
        };
        let delta = g.scale_by(alpha, grad)?;
        g.sub(filter, delta)
    }

    pub fn optimize_filter(&self, g: &mut Graph, feat: Var, filter: Var, label: &Tensor, steps: usize) -> Result<Var> {
        let mut f = filter;
        for _ in 0..steps {
            f = self.descent_step(g, feat, f, label)?;
        }
        Ok(f)
    }
}
