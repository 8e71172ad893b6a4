//! Adaptive Wing loss, its masked form, PAF mean squared error and the
//! weighted hybrid of the two, each with an analytic gradient with respect
//! to the prediction.
//!
//! All reductions are means over every element (batch included).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AwingParams {
    pub omega: f64,
    pub theta: f64,
    pub epsilon: f64,
    pub alpha: f64,
}

impl Default for AwingParams {
    fn default() -> Self {
        AwingParams {
            omega: 14.0,
            theta: 0.5,
            epsilon: 1.0,
            alpha: 2.1,
        }
    }
}

impl AwingParams {
    pub fn new(omega: f64, theta: f64, epsilon: f64, alpha: f64) -> Result<Self> {
        let p = AwingParams {
            omega,
            theta,
            epsilon,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    /// `alpha > 1` keeps the exponent `alpha - gt` positive for `gt` in [0, 1].
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::Config(format!("awing {name} must be positive, got {v}")))
            }
        };
        positive("omega", self.omega)?;
        positive("theta", self.theta)?;
        positive("epsilon", self.epsilon)?;
        if !(self.alpha > 1.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("awing alpha must exceed 1, got {}", self.alpha)));
        }
        Ok(())
    }

    /// Linear-branch slope `A` and offset `C` for a given target value.
    pub fn constants(&self, gt: f64) -> (f64, f64) {
        let p = self.alpha - gt;
        let ratio = self.theta / self.epsilon;
        let rp = ratio.powf(p);
        let a = self.omega * (1.0 / (1.0 + rp)) * p * ratio.powf(p - 1.0) * (1.0 / self.epsilon);
        let c = self.theta * a - self.omega * (1.0 + rp).ln();
        (a, c)
    }

    /// Loss for an absolute error `d >= 0`.
    pub fn value(&self, d: f64, gt: f64) -> f64 {
        if d <= self.theta {
            self.omega * (1.0 + (d / self.epsilon).powf(self.alpha - gt)).ln()
        } else {
            let (a, c) = self.constants(gt);
            a * d - c
        }
    }

    /// Derivative of [`AwingParams::value`] with respect to `d`.
    pub fn slope(&self, d: f64, gt: f64) -> f64 {
        if d <= self.theta {
            if d <= 0.0 {
                return 0.0;
            }
            let p = self.alpha - gt;
            let r = d / self.epsilon;
            self.omega * p * r.powf(p - 1.0) / self.epsilon / (1.0 + r.powf(p))
        } else {
            self.constants(gt).0
        }
    }
}

/// Weights of the hybrid objective and the mask amplification.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HybridWeights {
    pub heatmap: f64,
    pub paf: f64,
    pub mask: f64,
}

impl Default for HybridWeights {
    fn default() -> Self {
        HybridWeights {
            heatmap: 1.0,
            paf: 1.0,
            mask: 10.0,
        }
    }
}

impl HybridWeights {
    pub fn validate(&self) -> Result<()> {
        if self.heatmap < 0.0 || self.paf < 0.0 || self.mask < 0.0 {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.heatmap + self.paf > 0.0) {
            return Err(Error::Config("heatmap and PAF weights cannot both be zero".into()));
        }
        Ok(())
    }
}

fn same_len(what: &str, a: usize, b: usize) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {a} vs {b} elements")))
    }
}

/// Element-wise Adaptive Wing loss.
pub fn awing(pred: &[f64], gt: &[f64], p: &AwingParams) -> Result<Vec<f64>> {
    same_len("awing", pred.len(), gt.len())?;
    Ok(pred
        .iter()
        .zip(gt)
        .map(|(&y, &t)| p.value((y - t).abs(), t))
        .collect())
}

pub fn awing_mean(pred: &[f64], gt: &[f64], p: &AwingParams) -> Result<f64> {
    let l = awing(pred, gt, p)?;
    Ok(l.iter().sum::<f64>() / l.len().max(1) as f64)
}

/// `mean(L * (w_mask * mask + 1))` and its gradient with respect to `pred`.
pub fn masked_awing_grad(
    pred: &[f64],
    gt: &[f64],
    mask: &[f64],
    p: &AwingParams,
    w_mask: f64,
) -> Result<(f64, Vec<f64>)> {
    same_len("masked awing prediction/target", pred.len(), gt.len())?;
    same_len("masked awing mask", pred.len(), mask.len())?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(pred.len());
    for i in 0..pred.len() {
        let diff = pred[i] - gt[i];
        let d = diff.abs();
        let weight = w_mask * mask[i] + 1.0;
        total += p.value(d, gt[i]) * weight;
        grad.push(p.slope(d, gt[i]) * diff.signum() * weight / n);
    }
    Ok((total / n, grad))
}

pub fn masked_awing(pred: &[f64], gt: &[f64], mask: &[f64], p: &AwingParams, w_mask: f64) -> Result<f64> {
    masked_awing_grad(pred, gt, mask, p, w_mask).map(|(v, _)| v)
}

/// Mean squared error with gradient.
pub fn mse_grad(pred: &[f64], gt: &[f64]) -> Result<(f64, Vec<f64>)> {
    same_len("mse", pred.len(), gt.len())?;
    let n = pred.len().max(1) as f64;
    let mut total = 0.0;
    let grad = pred
        .iter()
        .zip(gt)
        .map(|(&y, &t)| {
            let d = y - t;
            total += d * d;
            2.0 * d / n
        })
        .collect();
    Ok((total / n, grad))
}

/// PAF regression loss: mean squared error over all `2E` channels.
pub fn paf_mse(pred: &[f64], gt: &[f64]) -> Result<f64> {
    mse_grad(pred, gt).map(|(v, _)| v)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeatmapLoss {
    MaskedAwing,
    Mse,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossComponents {
    /// Unweighted heatmap term (masked AWing, or MSE for the comparison run).
    pub heatmap: f64,
    pub paf: f64,
    pub total: f64,
}

#[derive(Debug, Clone)]
pub struct HybridLoss {
    pub components: LossComponents,
    pub grad_heatmaps: Tensor,
    pub grad_paf: Tensor,
}

/// `W1 * heatmap_loss + W2 * paf_mse` with gradients for both heads.
#[allow(clippy::too_many_arguments)]
pub fn hybrid_loss(
    pred_hm: &Tensor,
    gt_hm: &Tensor,
    mask: &Tensor,
    pred_paf: &Tensor,
    gt_paf: &Tensor,
    weights: &HybridWeights,
    awing: &AwingParams,
    heatmap_loss: HeatmapLoss,
) -> Result<HybridLoss> {
    if pred_hm.shape() != gt_hm.shape() || pred_hm.shape() != mask.shape() {
        return Err(Error::Shape(format!(
            "heatmaps {:?}, targets {:?}, mask {:?}",
            pred_hm.shape(),
            gt_hm.shape(),
            mask.shape()
        )));
    }
    if pred_paf.shape() != gt_paf.shape() {
        return Err(Error::Shape(format!(
            "paf {:?} vs target {:?}",
            pred_paf.shape(),
            gt_paf.shape()
        )));
    }
    let (hm, ghm) = match heatmap_loss {
        HeatmapLoss::MaskedAwing => {
            masked_awing_grad(pred_hm.data(), gt_hm.data(), mask.data(), awing, weights.mask)?
        }
        HeatmapLoss::Mse => mse_grad(pred_hm.data(), gt_hm.data())?,
    };
    let (paf, gpaf) = mse_grad(pred_paf.data(), gt_paf.data())?;
    let scale = |g: Vec<f64>, k: f64| g.into_iter().map(|v| v * k).collect::<Vec<_>>();
    Ok(HybridLoss {
        components: LossComponents {
            heatmap: hm,
            paf,
            total: weights.heatmap * hm + weights.paf * paf,
        },
        grad_heatmaps: Tensor::from_vec(pred_hm.shape(), scale(ghm, weights.heatmap)),
        grad_paf: Tensor::from_vec(pred_paf.shape(), scale(gpaf, weights.paf)),
    })
}
