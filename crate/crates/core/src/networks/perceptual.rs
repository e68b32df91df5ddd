use candle_core::Tensor;

use super::layers::{Builder, Conv2d};
use super::profile::ScaleProfile;
use crate::error::{Error, Result};

/// Fixed convolutional feature extractor for the reconstruction loss.
///
/// Four stages of `3×3 conv + ReLU` groups, each closed by 2×2 average
/// pooling; the pooled activations of the configured stages are the
/// features, optionally preceded by the input pixels. Weights are registered
/// as frozen and never receive updates.
#[derive(Debug, Clone)]
pub struct PerceptualNet {
    stages: Vec<Vec<Conv2d>>,
    layers: Vec<usize>,
    pixels: bool,
}

impl PerceptualNet {
    pub fn new(b: &mut Builder, profile: &ScaleProfile, layers: &[usize], pixels: bool) -> Result<Self> {
        if layers.is_empty() || layers.iter().any(|&l| l >= 4) {
            return Err(Error::Config(format!(
                "perceptual layers must be a non-empty subset of 0..4, got {layers:?}"
            )));
        }
        let mut frozen = b.frozen();
        let mut cin = 3;
        let mut stages = Vec::with_capacity(4);
        for (s, (&width, &convs)) in profile
            .perceptual_widths
            .iter()
            .zip(&profile.perceptual_convs)
            .enumerate()
        {
            let mut convs_out = Vec::with_capacity(convs);
            for c in 0..convs {
                convs_out.push(Conv2d::new(
                    &mut frozen.pp(&format!("stage{}.conv{}", s + 1, c + 1)),
                    cin,
                    width,
                    3,
                    1,
                    true,
                )?);
                cin = width;
            }
            stages.push(convs_out);
        }
        let mut layers = layers.to_vec();
        layers.sort_unstable();
        layers.dedup();
        Ok(Self { stages, layers, pixels })
    }

    pub fn layer_count(&self) -> usize {
        self.layers.len() + usize::from(self.pixels)
    }

    pub fn layers(&self) -> &[usize] {
        &self.layers
    }

    /// Features of `(B, 3, S, S)` images, one tensor per configured layer.
    pub fn forward(&self, images: &Tensor) -> Result<Vec<Tensor>> {
        let last = *self.layers.last().expect("non-empty layer set");
        let mut x = images.affine(2.0, -1.0)?;
        let mut out = Vec::with_capacity(self.layer_count());
        if self.pixels {
            out.push(images.clone());
        }
        for (s, stage) in self.stages.iter().enumerate().take(last + 1) {
            for conv in stage {
                x = conv.forward(&x)?.relu()?;
            }
            x = x.avg_pool2d(2)?;
            if self.layers.contains(&s) {
                out.push(x.clone());
            }
        }
        Ok(out)
    }
}
