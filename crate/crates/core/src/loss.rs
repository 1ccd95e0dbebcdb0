//! Training objective: hinged classification MSE plus IoU regression MSE.

use serde::Serialize;

use crate::autodiff::{Graph, Tensor, Var};
use crate::error::{Error, Result};

/// Labels above this value are treated as target cells.
pub const HINGE_THRESHOLD: f64 = 0.05;

/// `s - z` on target cells, `max(0, s)` on background cells.
pub fn hinge_residual(s: f64, z: f64) -> f64 {
    if z > HINGE_THRESHOLD {
        s - z
    } else {
        s.max(0.0)
    }
}

pub fn classification_loss(scores: &[f64], labels: &[f64]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape(format!(
            "{} scores vs {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = scores.iter().zip(labels).map(|(&s, &z)| hinge_residual(s, z).powi(2)).sum();
    Ok(total / scores.len() as f64)
}

pub fn bbox_loss(predicted: &[f64], target: &[f64]) -> Result<f64> {
    if predicted.len() != target.len() {
        return Err(Error::shape(format!(
            "{} predictions vs {} targets",
            predicted.len(),
            target.len()
        )));
    }
    if predicted.is_empty() {
        return Ok(0.0);
    }
    let total: f64 = predicted.iter().zip(target).map(|(p, t)| (p - t).powi(2)).sum();
    Ok(total / predicted.len() as f64)
}

pub fn total_loss(l_cls: f64, l_b: f64, beta: f64) -> f64 {
    beta * l_cls + l_b
}

/// Loss components of one step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossReport {
    pub total: f64,
    pub cls: f64,
    pub bbox: f64,
    pub beta: f64,
}

impl LossReport {
    pub fn new(cls: f64, bbox: f64, beta: f64) -> Self {
        LossReport {
            total: total_loss(cls, bbox, beta),
            cls,
            bbox,
            beta,
        }
    }

    pub fn is_finite(&self) -> bool {
        self.total.is_finite() && self.cls.is_finite() && self.bbox.is_finite()
    }
}

/// Graph form of the IoU regression loss over a `[N]` or `[N, 1]` prediction.
pub fn bbox_loss_graph(g: &mut Graph, predicted: Var, target: &[f64]) -> Result<Var> {
    if g.value(predicted).len() != target.len() {
        return Err(Error::shape("prediction and target counts differ"));
    }
    let t = g.input(Tensor::new(g.shape(predicted), target.to_vec())?);
    let d = g.sub(predicted, t)?;
    let sq = g.mul(d, d)?;
    Ok(g.mean(sq))
}

/// `beta * l_cls + l_b` on the graph.
pub fn total_loss_graph(g: &mut Graph, l_cls: Var, l_b: Var, beta: f64) -> Result<Var> {
    let c = g.scale(l_cls, beta);
    g.add(c, l_b)
}
