//! Training objectives and their analytic gradients.
//!
//! Every loss returns its value together with the gradient with respect to
//! the prediction it scores, so the model backward pass can consume them
//! directly.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{binarize, DensityMap, Grid, Mask, ProbabilityMap};

/// Probability clamp used by the cross-entropy.
pub const BCE_EPS: f64 = 1e-7;

/// Default threshold for binarizing segmenter probabilities.
pub const DEFAULT_TAU_MASK: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_d: f64,
    pub lambda_s: f64,
    pub lambda_c: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            lambda_d: 1.0,
            lambda_s: 0.5,
            lambda_c: 0.5,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("lambda_d", self.lambda_d),
            ("lambda_s", self.lambda_s),
            ("lambda_c", self.lambda_c),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::InvalidArgument(format!("weights.{name} = {v}")));
            }
        }
        Ok(())
    }
}

/// A scalar loss and its gradient with respect to the scored prediction.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Grid<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub l_den: f64,
    pub l_seg: f64,
    pub l_con: f64,
    pub total: f64,
    pub grad_density: DensityMap,
    pub grad_mask: ProbabilityMap,
}

/// Mean squared error between predicted and target density.
pub fn loss_den(pred: &DensityMap, target: &DensityMap) -> Result<LossGrad> {
    pred.check_shape(target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let d = p - t;
            value += d * d;
            2.0 * d / n
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        grad: Grid::from_vec(pred.width(), pred.height(), grad)?,
    })
}

/// Mean two-term binary cross-entropy. Probabilities are clamped to
/// `[BCE_EPS, 1 - BCE_EPS]`; the gradient is zero where the clamp is active.
pub fn loss_seg(pred: &ProbabilityMap, target: &Mask) -> Result<LossGrad> {
    pred.check_shape(target)?;
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| {
            let q = p.clamp(BCE_EPS, 1.0 - BCE_EPS);
            let clamped = q != p;
            if t {
                value -= q.ln();
                if clamped {
                    0.0
                } else {
                    -1.0 / (q * n)
                }
            } else {
                value -= (1.0 - q).ln();
                if clamped {
                    0.0
                } else {
                    1.0 / ((1.0 - q) * n)
                }
            }
        })
        .collect();
    Ok(LossGrad {
        value: value / n,
        grad: Grid::from_vec(pred.width(), pred.height(), grad)?,
    })
}

/// Literal context metric on binarized grids:
/// `-|B(ŷ) ∩ B(m̂)| / |B(ŷ)|`, zero when `B(ŷ)` is empty.
pub fn con_metric(pred: &DensityMap, mask_prob: &ProbabilityMap, tau_pred: f64, tau_mask: f64) -> Result<f64> {
    pred.check_shape(mask_prob)?;
    let by = binarize(pred, tau_pred);
    let bm = binarize(mask_prob, tau_mask);
    let denom = by.count();
    if denom == 0 {
        return Ok(0.0);
    }
    let inter = by.data().iter().zip(bm.data()).filter(|(&a, &b)| a && b).count();
    Ok(-(inter as f64) / denom as f64)
}

/// Differentiable context loss: the negated fraction of predicted density
/// mass that lies inside `B(m̂)`. The mask is treated as a constant, so only
/// the density receives a gradient. Zero (with zero gradient) when the
/// prediction carries no mass.
pub fn loss_con(pred: &DensityMap, mask_prob: &ProbabilityMap, tau_mask: f64) -> Result<LossGrad> {
    pred.check_shape(mask_prob)?;
    let inside = binarize(mask_prob, tau_mask);
    let total: f64 = pred.sum();
    if total <= 0.0 {
        return Ok(LossGrad {
            value: 0.0,
            grad: Grid::zeros(pred.width(), pred.height()),
        });
    }
    let captured: f64 = pred
        .data()
        .iter()
        .zip(inside.data())
        .filter(|(_, &b)| b)
        .map(|(&v, _)| v)
        .sum();
    let ratio = captured / total;
    // d(-captured/total)/dŷ_j = (ratio - b_j) / total
    let grad = inside
        .data()
        .iter()
        .map(|&b| (ratio - if b { 1.0 } else { 0.0 }) / total)
        .collect();
    Ok(LossGrad {
        value: -ratio,
        grad: Grid::from_vec(pred.width(), pred.height(), grad)?,
    })
}

/// Weighted joint objective. Terms with a zero weight are skipped entirely,
/// so they contribute exactly zero value and zero gradient.
pub fn total_loss(
    pred: &DensityMap,
    target: &DensityMap,
    mask_prob: &ProbabilityMap,
    mask_target: &Mask,
    weights: &LossWeights,
    tau_mask: f64,
) -> Result<LossReport> {
    pred.check_shape(target)?;
    pred.check_shape(mask_prob)?;
    pred.check_shape(mask_target)?;
    let (w, h) = (pred.width(), pred.height());
    let mut grad_density = Grid::zeros(w, h);
    let mut grad_mask = Grid::zeros(w, h);

    let mut l_den = 0.0;
    if weights.lambda_d > 0.0 {
        let lg = loss_den(pred, target)?;
        l_den = lg.value;
        axpy(&mut grad_density, weights.lambda_d, &lg.grad);
    }
    let mut l_seg = 0.0;
    if weights.lambda_s > 0.0 {
        let lg = loss_seg(mask_prob, mask_target)?;
        l_seg = lg.value;
        axpy(&mut grad_mask, weights.lambda_s, &lg.grad);
    }
    let mut l_con = 0.0;
    if weights.lambda_c > 0.0 {
        let lg = loss_con(pred, mask_prob, tau_mask)?;
        l_con = lg.value;
        axpy(&mut grad_density, weights.lambda_c, &lg.grad);
    }
    Ok(LossReport {
        l_den,
        l_seg,
        l_con,
        total: weights.lambda_d * l_den + weights.lambda_s * l_seg + weights.lambda_c * l_con,
        grad_density,
        grad_mask,
    })
}

fn axpy(acc: &mut Grid<f64>, scale: f64, g: &Grid<f64>) {
    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
        *a += scale * b;
    }
}
