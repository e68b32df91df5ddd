use candle_core::Tensor;

use super::encoder::MultiScaleFeatures;
use super::layers::{BatchNorm, Builder, Conv2d, Linear, Mode};
use super::profile::ScaleProfile;
use crate::error::{Error, Result};
use crate::tensor_ops;

/// One reduction branch: 1×1 projection, bilinear upsampling to the heatmap
/// size, then normalization and ReLU.
///
/// Projection and bilinear upsampling are both linear and bilinear weights
/// sum to one, so projecting first is the same map as upsampling first.
#[derive(Debug, Clone)]
struct Branch {
    proj: Conv2d,
    bn: BatchNorm,
}

/// Part-pooled classifier over the first `K_w` keypoint heatmaps.
#[derive(Debug, Clone)]
pub struct WeakHead {
    branches: Vec<Branch>,
    classifier: Linear,
    weak_parts: usize,
    heatmap_size: usize,
    base_width: usize,
}

impl WeakHead {
    pub fn new(
        b: &mut Builder,
        profile: &ScaleProfile,
        parts: usize,
        weak_parts: usize,
        classes: usize,
    ) -> Result<Self> {
        if weak_parts == 0 || weak_parts >= parts {
            return Err(Error::Config(format!(
                "weak parts must satisfy 0 < K_w < K (K_w = {weak_parts}, K = {parts})"
            )));
        }
        if classes < 2 {
            return Err(Error::Config("classification needs at least two classes".into()));
        }
        let mut branches = Vec::new();
        for (level, &width) in profile.encoder_widths.iter().enumerate() {
            let mut bb = b.pp(&format!("branch{}", level + 1));
            branches.push(Branch {
                proj: Conv2d::new(&mut bb.pp("proj"), width, profile.weak_width, 1, 1, false)?,
                bn: BatchNorm::new(&mut bb.pp("bn"), profile.weak_width)?,
            });
        }
        let base_width = 4 * profile.weak_width;
        Ok(Self {
            branches,
            classifier: Linear::new(&mut b.pp("classifier"), weak_parts * base_width, classes)?,
            weak_parts,
            heatmap_size: profile.heatmap_size,
            base_width,
        })
    }

    pub fn weak_parts(&self) -> usize {
        self.weak_parts
    }

    /// Concatenated base feature `C`, shape `(B, 4·width, S, S)`.
    pub fn base_features(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<Tensor> {
        let s = self.heatmap_size;
        let mut parts = Vec::with_capacity(4);
        for (branch, block) in self.branches.iter().zip(&features.blocks) {
            let y = tensor_ops::resize_bilinear(&branch.proj.forward(block)?, s, s)?;
            parts.push(branch.bn.forward(&y, mode)?.relu()?);
        }
        Ok(Tensor::cat(&parts, 1)?)
    }

    /// `h_k = Σ_ij H_k(i, j) · C(i, j)` for the first `K_w` maps: `(B, K_w, D)`.
    pub fn pool(&self, base: &Tensor, normalized: &Tensor) -> Result<Tensor> {
        part_pool(base, normalized, self.weak_parts)
    }

    pub fn forward(&self, features: &MultiScaleFeatures, normalized: &Tensor, mode: Mode) -> Result<Tensor> {
        let base = self.base_features(features, mode)?;
        let pooled = self.pool(&base, normalized)?;
        let b = pooled.dim(0)?;
        self.classifier
            .forward(&pooled.reshape((b, self.weak_parts * self.base_width))?)
    }
}

/// Attention-weighted pooling of `base (B, D, S, S)` by the first `weak_parts`
/// channels of `normalized (B, K, S, S)`.
pub fn part_pool(base: &Tensor, normalized: &Tensor, weak_parts: usize) -> Result<Tensor> {
    let (b, d, h, w) = base.dims4()?;
    let (hb, k, hh, hw) = normalized.dims4()?;
    if weak_parts > k {
        return Err(Error::invalid(format!("K_w = {weak_parts} exceeds K = {k}")));
    }
    if (hb, hh, hw) != (b, h, w) {
        return Err(Error::shape(format!(
            "heatmaps ({hb}, ·, {hh}, {hw}) do not match base features ({b}, ·, {h}, {w})"
        )));
    }
    let maps = normalized.narrow(1, 0, weak_parts)?.reshape((b, weak_parts, h * w))?;
    let feats = base.reshape((b, d, h * w))?.transpose(1, 2)?.contiguous()?;
    Ok(maps.contiguous()?.matmul(&feats)?)
}
