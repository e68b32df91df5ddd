use candle_core::Tensor;

use super::encoder::MultiScaleFeatures;
use super::layers::{Builder, Conv2d, ConvBlock, Mode};
use super::profile::ScaleProfile;
use crate::error::Result;
use crate::tensor_ops;

/// Bilinear ×2 followed by a 1×1 projection (no activation).
#[derive(Debug, Clone)]
struct UpsampleBlock {
    proj: ConvBlock,
}

impl UpsampleBlock {
    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (_, _, h, w) = x.dims4()?;
        self.proj
            .forward_linear(&tensor_ops::resize_bilinear(x, 2 * h, 2 * w)?, mode)
    }
}

/// 1×1 block, 3×3 conv to `K` maps, then bilinear upsampling to the heatmap size.
#[derive(Debug, Clone)]
struct PredictBlock {
    hidden: ConvBlock,
    out: Conv2d,
}

impl PredictBlock {
    fn forward(&self, x: &Tensor, size: usize, mode: Mode) -> Result<Tensor> {
        let y = self.out.forward(&self.hidden.forward(x, mode)?)?;
        tensor_ops::resize_bilinear(&y, size, size)
    }
}

/// Feature-pyramid keypoint head: top-down lateral merges with one heatmap
/// prediction per level, summed into the final logits.
#[derive(Debug, Clone)]
pub struct KeypointHead {
    laterals: Vec<ConvBlock>,
    upsamples: Vec<UpsampleBlock>,
    predicts: Vec<PredictBlock>,
    parts: usize,
    heatmap_size: usize,
}

impl KeypointHead {
    pub fn new(b: &mut Builder, profile: &ScaleProfile, parts: usize) -> Result<Self> {
        let lw = profile.lateral_width;
        let mut laterals = Vec::new();
        let mut upsamples = Vec::new();
        let mut predicts = Vec::new();
        for level in 0..4 {
            let name = format!("level{}", level + 1);
            let mut lb = b.pp(&name);
            laterals.push(ConvBlock::new(&mut lb.pp("lateral"), profile.encoder_widths[level], lw, 1, 1)?);
            predicts.push(PredictBlock {
                hidden: ConvBlock::new(&mut lb.pp("predict.hidden"), lw, lw, 1, 1)?,
                out: Conv2d::new(&mut lb.pp("predict.out"), lw, parts, 3, 1, true)?,
            });
            // The shallowest level has nothing left to feed.
            if level > 0 {
                upsamples.push(UpsampleBlock {
                    proj: ConvBlock::new(&mut lb.pp("upsample"), lw, lw, 1, 1)?,
                });
            }
        }
        Ok(Self {
            laterals,
            upsamples,
            predicts,
            parts,
            heatmap_size: profile.heatmap_size,
        })
    }

    pub fn parts(&self) -> usize {
        self.parts
    }

    /// Per-level `(B, K, S, S)` predictions, shallowest level first.
    pub fn forward_levels(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<[Tensor; 4]> {
        let mut predictions: Vec<Option<Tensor>> = vec![None, None, None, None];
        let mut top_down: Option<Tensor> = None;
        for level in (0..4).rev() {
            let mut merged = self.laterals[level].forward(&features.blocks[level], mode)?;
            if let Some(up) = &top_down {
                merged = (merged + up)?;
            }
            predictions[level] = Some(self.predicts[level].forward(&merged, self.heatmap_size, mode)?);
            if level > 0 {
                top_down = Some(self.upsamples[level - 1].forward(&merged, mode)?);
            }
        }
        let predictions: Vec<Tensor> = predictions.into_iter().map(|p| p.expect("all levels predicted")).collect();
        Ok(predictions.try_into().expect("four levels"))
    }

    /// Final `(B, K, S, S)` logits: the sum of the per-level predictions.
    pub fn forward(&self, features: &MultiScaleFeatures, mode: Mode) -> Result<Tensor> {
        let [a, b, c, d] = self.forward_levels(features, mode)?;
        Ok((((a + b)? + c)? + d)?)
    }
}
