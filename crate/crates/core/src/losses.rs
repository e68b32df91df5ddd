//! Reconstruction, classification and equivariance losses and their
//! curriculum-weighted sum.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::networks::PerceptualNet;

/// Keeps the square root differentiable at zero while returning exactly zero
/// for identical inputs.
const NORM_EPS: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub weak: f64,
    pub equivariance: f64,
    /// Last epoch (1-based) on which the equivariance term is off.
    pub curriculum_epoch: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            weak: 1.0,
            equivariance: 1.0,
            curriculum_epoch: 0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, w) in [
            ("perceptual", self.perceptual),
            ("weak", self.weak),
            ("equivariance", self.equivariance),
        ] {
            if !(w >= 0.0) || !w.is_finite() {
                return Err(Error::Config(format!("loss weight {name} = {w} must be a nonnegative real")));
            }
        }
        Ok(())
    }

    pub fn equivariance_active(&self, epoch: usize) -> bool {
        epoch > self.curriculum_epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EquivarianceReduction {
    /// Mean of squared coordinate errors over samples, keypoints and axes.
    #[default]
    Squared,
    /// Mean over samples of the euclidean norm of the stacked coordinate error.
    Root,
}

/// Per-layer L2 norm of the feature difference, summed over layers and
/// averaged over the batch.
pub fn perceptual_loss(net: &PerceptualNet, target: &Tensor, recon: &Tensor) -> Result<Tensor> {
    if target.dims() != recon.dims() {
        return Err(Error::shape(format!(
            "target {:?} and reconstruction {:?} differ",
            target.dims(),
            recon.dims()
        )));
    }
    let ft = net.forward(&target.detach())?;
    let fr = net.forward(recon)?;
    feature_distance(&ft, &fr)
}

/// The reduction used by [`perceptual_loss`], applied to precomputed features.
pub fn feature_distance(a: &[Tensor], b: &[Tensor]) -> Result<Tensor> {
    if a.len() != b.len() || a.is_empty() {
        return Err(Error::shape("feature lists must be non-empty and of equal length"));
    }
    let mut total: Option<Tensor> = None;
    for (x, y) in a.iter().zip(b) {
        if x.dims() != y.dims() {
            return Err(Error::shape(format!("feature shapes {:?} and {:?} differ", x.dims(), y.dims())));
        }
        let batch = x.dim(0)?;
        let sq = (x - y)?.sqr()?.reshape((batch, ()))?.sum(1)?;
        let norm = ((sq + NORM_EPS)?.sqrt()? - NORM_EPS.sqrt())?;
        total = Some(match total {
            Some(t) => (t + norm)?,
            None => norm,
        });
    }
    Ok(total.expect("non-empty").mean_all()?)
}

/// Cross-entropy of `(B, C)` logits against class indices, averaged over the batch.
pub fn weak_loss(logits: &Tensor, labels: &[usize]) -> Result<Tensor> {
    let (b, c) = logits.dims2()?;
    if labels.len() != b {
        return Err(Error::shape(format!("{} labels for a batch of {b}", labels.len())));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::invalid(format!("label {bad} out of range for {c} classes")));
    }
    let idx = Tensor::from_vec(labels.iter().map(|&l| l as u32).collect::<Vec<_>>(), (b, 1), logits.device())?;
    let log_probs = candle_nn::ops::log_softmax(logits, 1)?;
    Ok(log_probs.gather(&idx, 1)?.neg()?.mean_all()?)
}

/// `(N, K, 2)` predictions against detached `(N, K, 2)` pseudo-labels.
pub fn equivariance_loss(pred: &Tensor, labels: &Tensor, reduction: EquivarianceReduction) -> Result<Tensor> {
    if pred.dims() != labels.dims() || pred.rank() != 3 || pred.dim(2)? != 2 {
        return Err(Error::shape(format!(
            "equivariance loss needs matching (N, K, 2) tensors, got {:?} and {:?}",
            pred.dims(),
            labels.dims()
        )));
    }
    if pred.dim(0)? == 0 {
        return Err(Error::invalid("equivariance batch is empty"));
    }
    let diff = (pred - labels.detach())?;
    match reduction {
        EquivarianceReduction::Squared => Ok(diff.sqr()?.mean_all()?),
        EquivarianceReduction::Root => {
            let n = diff.dim(0)?;
            let sq = diff.sqr()?.reshape((n, ()))?.sum(1)?;
            Ok(((sq + NORM_EPS)?.sqrt()? - NORM_EPS.sqrt())?.mean_all()?)
        }
    }
}

/// Scalar loss terms for one step. `equivariance` is `None` while the term is inactive.
#[derive(Debug, Clone, Default)]
pub struct LossComponents {
    pub perceptual: Option<Tensor>,
    pub weak: Option<Tensor>,
    pub equivariance: Option<Tensor>,
}

/// `w_p·L_perc + w_w·L_w + w_v·L_v·[epoch > n]`. Terms with zero weight or no
/// value are left out of the graph entirely.
pub fn total_loss(c: &LossComponents, w: &LossWeights, epoch: usize) -> Result<Tensor> {
    let mut terms = Vec::with_capacity(3);
    for (name, value, weight, active) in [
        ("perceptual", &c.perceptual, w.perceptual, true),
        ("weak", &c.weak, w.weak, true),
        ("equivariance", &c.equivariance, w.equivariance, w.equivariance_active(epoch)),
    ] {
        let Some(v) = value else { continue };
        if !active || weight == 0.0 {
            continue;
        }
        let scalar = v.to_dtype(DType::F32)?.to_scalar::<f32>()?;
        if !scalar.is_finite() {
            return Err(Error::NonFiniteLoss { component: name });
        }
        terms.push(if weight == 1.0 { v.clone() } else { (v * weight)? });
    }
    let mut iter = terms.into_iter();
    let Some(first) = iter.next() else {
        return Err(Error::Config("every loss term is disabled".into()));
    };
    iter.try_fold(first, |acc, t| Ok((acc + t)?))
}

/// [`total_loss`] on plain numbers.
pub fn total_loss_value(perceptual: f64, weak: f64, equivariance: f64, w: &LossWeights, epoch: usize) -> f64 {
    let base = w.perceptual * perceptual + w.weak * weak;
    if w.equivariance_active(epoch) {
        base + w.equivariance * equivariance
    } else {
        base
    }
}
