use candle_core::Tensor;

use super::layers::{Builder, ConvBlock, Mode};
use super::profile::ScaleProfile;
use crate::error::{Error, Result};

/// Encoder blocks `C1..C4` at strides 4, 8, 16 and 32.
#[derive(Debug, Clone)]
pub struct MultiScaleFeatures {
    pub blocks: [Tensor; 4],
}

impl MultiScaleFeatures {
    pub fn deepest(&self) -> &Tensor {
        &self.blocks[3]
    }

    pub fn detach(&self) -> Self {
        Self {
            blocks: self.blocks.clone().map(|t| t.detach()),
        }
    }
}

#[derive(Debug, Clone)]
enum Residual {
    Basic {
        first: ConvBlock,
        second: ConvBlock,
    },
    Bottleneck {
        reduce: ConvBlock,
        spatial: ConvBlock,
        expand: ConvBlock,
    },
}

#[derive(Debug, Clone)]
struct ResidualBlock {
    body: Residual,
    shortcut: Option<ConvBlock>,
}

impl ResidualBlock {
    fn new(b: &mut Builder, cin: usize, cout: usize, stride: usize, bottleneck: bool) -> Result<Self> {
        let body = if bottleneck {
            let mid = cout / 4;
            Residual::Bottleneck {
                reduce: ConvBlock::new(&mut b.pp("reduce"), cin, mid, 1, 1)?,
                spatial: ConvBlock::new(&mut b.pp("spatial"), mid, mid, 3, stride)?,
                expand: ConvBlock::new(&mut b.pp("expand"), mid, cout, 1, 1)?,
            }
        } else {
            Residual::Basic {
                first: ConvBlock::new(&mut b.pp("first"), cin, cout, 3, stride)?,
                second: ConvBlock::new(&mut b.pp("second"), cout, cout, 3, 1)?,
            }
        };
        let shortcut = if stride != 1 || cin != cout {
            Some(ConvBlock::new(&mut b.pp("shortcut"), cin, cout, 1, stride)?)
        } else {
            None
        };
        Ok(Self { body, shortcut })
    }

    fn forward(&self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let y = match &self.body {
            Residual::Basic { first, second } => second.forward_linear(&first.forward(x, mode)?, mode)?,
            Residual::Bottleneck { reduce, spatial, expand } => {
                expand.forward_linear(&spatial.forward(&reduce.forward(x, mode)?, mode)?, mode)?
            }
        };
        let skip = match &self.shortcut {
            Some(s) => s.forward_linear(x, mode)?,
            None => x.clone(),
        };
        Ok((y + skip)?.relu()?)
    }
}

/// Residual encoder shared by every head.
#[derive(Debug, Clone)]
pub struct Encoder {
    stem: ConvBlock,
    stages: Vec<Vec<ResidualBlock>>,
    image_size: usize,
}

impl Encoder {
    pub fn new(b: &mut Builder, profile: &ScaleProfile) -> Result<Self> {
        let stem = ConvBlock::new(&mut b.pp("stem"), 3, profile.stem_width, profile.stem_kernel, 2)?;
        let mut cin = profile.stem_width;
        let mut stages = Vec::with_capacity(4);
        for (level, (&width, &count)) in profile
            .encoder_widths
            .iter()
            .zip(&profile.encoder_blocks)
            .enumerate()
        {
            let mut stage_builder = b.pp(&format!("stage{}", level + 1));
            let mut blocks = Vec::with_capacity(count);
            for i in 0..count {
                let stride = if i == 0 { 2 } else { 1 };
                blocks.push(ResidualBlock::new(
                    &mut stage_builder.pp(&format!("block{i}")),
                    cin,
                    width,
                    stride,
                    profile.bottleneck,
                )?);
                cin = width;
            }
            stages.push(blocks);
        }
        Ok(Self {
            stem,
            stages,
            image_size: profile.image_size,
        })
    }

    /// Images are `(B, 3, S, S)` in `[0, 1]`.
    pub fn forward(&self, images: &Tensor, mode: Mode) -> Result<MultiScaleFeatures> {
        let (_, c, h, w) = images.dims4()?;
        if c != 3 || h != self.image_size || w != self.image_size {
            return Err(Error::shape(format!(
                "encoder expects 3×{s}×{s} images, got {c}×{h}×{w}",
                s = self.image_size
            )));
        }
        let mut x = self.stem.forward(&images.affine(2.0, -1.0)?, mode)?;
        let mut outputs = Vec::with_capacity(4);
        for stage in &self.stages {
            for block in stage {
                x = block.forward(&x, mode)?;
            }
            outputs.push(x.clone());
        }
        let blocks: [Tensor; 4] = outputs.try_into().expect("four encoder stages");
        Ok(MultiScaleFeatures { blocks })
    }
}
