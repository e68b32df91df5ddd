use candle_core::Tensor;

use super::layers::{Builder, Conv2d, ConvBlock, Mode};
use super::profile::ScaleProfile;
use crate::error::{Error, Result};
use crate::tensor_ops;

/// Gaussian widths injected at the five decoder resolutions, coarse to fine.
pub const DEFAULT_DECODER_SIGMAS: [f64; 5] = [0.1, 0.1, 0.01, 0.01, 0.001];

/// Reconstructs an image from source appearance and target keypoints.
///
/// Each stage doubles the resolution (nearest neighbour), concatenates the
/// keypoint Gaussians rendered at that resolution and applies a conv block.
#[derive(Debug, Clone)]
pub struct Decoder {
    stages: Vec<ConvBlock>,
    to_rgb: Conv2d,
    sigmas: [f64; 5],
    sizes: [usize; 5],
    parts: usize,
    appearance_channels: usize,
}

impl Decoder {
    pub fn new(b: &mut Builder, profile: &ScaleProfile, parts: usize, sigmas: [f64; 5]) -> Result<Self> {
        if let Some(s) = sigmas.iter().find(|s| !(**s > 0.0)) {
            return Err(Error::Config(format!("decoder sigma {s} must be positive")));
        }
        let mut cin = profile.encoder_widths[3];
        let mut stages = Vec::with_capacity(5);
        for (i, &width) in profile.decoder_widths.iter().enumerate() {
            stages.push(ConvBlock::new(&mut b.pp(&format!("stage{}", i + 1)), cin + parts, width, 3, 1)?);
            cin = width;
        }
        Ok(Self {
            stages,
            to_rgb: Conv2d::new(&mut b.pp("to_rgb"), cin, 3, 1, 1, true)?,
            sigmas,
            sizes: profile.decoder_sizes(),
            parts,
            appearance_channels: profile.encoder_widths[3],
        })
    }

    pub fn sigmas(&self) -> [f64; 5] {
        self.sigmas
    }

    /// Input channel count of each conv stage (decoder width + parts).
    pub fn stage_input_channels(&self) -> Vec<usize> {
        let mut cin = self.appearance_channels;
        self.stages
            .iter()
            .map(|s| {
                let c = cin + self.parts;
                cin = s.out_channels();
                c
            })
            .collect()
    }

    /// Per-stage outputs followed by the RGB image.
    pub fn forward_stages(&self, appearance: &Tensor, kps: &Tensor, mode: Mode) -> Result<(Vec<Tensor>, Tensor)> {
        let (b, k, two) = kps.dims3()?;
        if k != self.parts || two != 2 {
            return Err(Error::shape(format!(
                "decoder expects ({b}, {}, 2) keypoints, got ({b}, {k}, {two})",
                self.parts
            )));
        }
        let (ab, ac, _, _) = appearance.dims4()?;
        if ab != b || ac != self.appearance_channels {
            return Err(Error::shape(format!(
                "appearance must be ({b}, {}, ·, ·), got ({ab}, {ac}, ·, ·)",
                self.appearance_channels
            )));
        }
        let mut x = appearance.clone();
        let mut outputs = Vec::with_capacity(5);
        for ((stage, &sigma), &size) in self.stages.iter().zip(&self.sigmas).zip(&self.sizes) {
            x = tensor_ops::upsample_nearest(&x, 2)?;
            let bottleneck = tensor_ops::render_gaussian(kps, sigma, size, size)?;
            x = stage.forward(&Tensor::cat(&[&x, &bottleneck], 1)?, mode)?;
            outputs.push(x.clone());
        }
        // Offset so an untrained decoder starts at mid-gray.
        let rgb = (self.to_rgb.forward(&x)? + 0.5)?;
        Ok((outputs, rgb))
    }

    pub fn forward(&self, appearance: &Tensor, kps: &Tensor, mode: Mode) -> Result<Tensor> {
        Ok(self.forward_stages(appearance, kps, mode)?.1)
    }
}
