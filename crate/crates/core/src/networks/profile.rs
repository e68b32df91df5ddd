use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ProfileName {
    Full,
    Desk,
}

/// Layer widths and resolutions of every sub-network.
///
/// Both profiles share all stride relationships: the encoder emits blocks at
/// strides 4/8/16/32, the heatmap is half the image size, and the decoder
/// doubles resolution five times from the deepest block.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScaleProfile {
    pub name: ProfileName,
    pub image_size: usize,
    pub heatmap_size: usize,
    pub stem_width: usize,
    pub stem_kernel: usize,
    pub encoder_widths: [usize; 4],
    pub encoder_blocks: [usize; 4],
    /// Residual bottleneck blocks (1×1, 3×3, 1×1) instead of basic blocks.
    pub bottleneck: bool,
    pub lateral_width: usize,
    pub decoder_widths: [usize; 5],
    pub weak_width: usize,
    pub perceptual_widths: [usize; 4],
    pub perceptual_convs: [usize; 4],
}

impl ScaleProfile {
    /// ResNet-50 encoder at 128×128 with the appendix head/decoder widths.
    pub fn full() -> Self {
        Self {
            name: ProfileName::Full,
            image_size: 128,
            heatmap_size: 64,
            stem_width: 64,
            stem_kernel: 7,
            encoder_widths: [256, 512, 1024, 2048],
            encoder_blocks: [3, 4, 6, 3],
            bottleneck: true,
            lateral_width: 256,
            decoder_widths: [1024, 512, 256, 128, 64],
            weak_width: 256,
            perceptual_widths: [64, 128, 256, 512],
            perceptual_convs: [2, 2, 3, 3],
        }
    }

    /// Narrow variant at 64×64 for CPU-scale runs.
    pub fn desk() -> Self {
        Self {
            name: ProfileName::Desk,
            image_size: 64,
            heatmap_size: 32,
            stem_width: 16,
            stem_kernel: 3,
            encoder_widths: [16, 32, 64, 128],
            encoder_blocks: [1, 1, 1, 1],
            bottleneck: false,
            lateral_width: 32,
            decoder_widths: [64, 32, 16, 16, 8],
            weak_width: 32,
            perceptual_widths: [8, 16, 32, 32],
            perceptual_convs: [1, 1, 1, 1],
        }
    }

    pub fn by_name(name: ProfileName) -> Self {
        match name {
            ProfileName::Full => Self::full(),
            ProfileName::Desk => Self::desk(),
        }
    }

    /// Spatial size of encoder block `level` (0-based, stride `4 · 2^level`).
    pub fn feature_size(&self, level: usize) -> usize {
        self.image_size / (4 << level)
    }

    /// Output sizes of the five decoder stages.
    pub fn decoder_sizes(&self) -> [usize; 5] {
        let base = self.feature_size(3);
        [base * 2, base * 4, base * 8, base * 16, base * 32]
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size % 32 != 0 || self.image_size < 32 {
            return Err(Error::Config(format!(
                "image size {} must be a positive multiple of 32",
                self.image_size
            )));
        }
        if self.heatmap_size * 2 != self.image_size {
            return Err(Error::Config("heatmap size must be half the image size".into()));
        }
        if self.decoder_sizes()[4] != self.image_size {
            return Err(Error::Config("decoder must end at the image size".into()));
        }
        Ok(())
    }
}
