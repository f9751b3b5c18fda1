use super::config::EncoderConfig;
use super::layers::{Builder, ConvBn, SepConvBn};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{activation, add, concat_channels, Activation, BnMode, Tensor};

pub const LBEV_CHANNELS: usize = 3;
pub const C_REGION_CHANNELS: usize = 1;

/// `relu(x + bn(sep(relu(bn(sep(x))))))`.
pub struct ResidualBlock<T: Real> {
    pub first: SepConvBn<T>,
    pub second: SepConvBn<T>,
}

impl<T: Real> ResidualBlock<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.second.forward(&self.first.forward(x, mode)?, mode)?;
        Ok(activation(&add(x, &y)?, Activation::Relu))
    }
}

/// One downsampling step of both branches followed by fusion.
pub struct Stage<T: Real> {
    pub l_conv: ConvBn<T>,
    pub c_conv: ConvBn<T>,
    pub blocks: Vec<ResidualBlock<T>>,
}

pub struct Encoder<T: Real> {
    pub stages: Vec<Stage<T>>,
}

/// Index of the stage whose fused output feeds the decoder skip.
pub const LOW_LEVEL_STAGE: usize = 1;

impl<T: Real> Encoder<T> {
    pub(crate) fn build(b: &mut Builder<'_, T>, cfg: &EncoderConfig) -> Result<Self> {
        let mut b = b.scope("encoder");
        let mut stages = Vec::new();
        let (mut l_in, mut c_in) = (LBEV_CHANNELS, C_REGION_CHANNELS);
        for (i, sc) in cfg.effective_stages().iter().enumerate() {
            let mut s = b.scope(&format!("stage{i}"));
            let l_conv = ConvBn::build(&mut s, "l_conv", l_in, sc.l_out_channels, 3, 2, 1, true)?;
            let c_conv = ConvBn::build(&mut s, "c_conv", c_in, sc.c_out_channels, 3, 2, 1, true)?;
            let fused = sc.fused_channels();
            let mut blocks = Vec::new();
            for r in 0..sc.residual_blocks {
                let mut rb = s.scope(&format!("residual{r}"));
                blocks.push(ResidualBlock {
                    first: SepConvBn::build(&mut rb, "sep1", fused, fused, true)?,
                    second: SepConvBn::build(&mut rb, "sep2", fused, fused, false)?,
                });
            }
            stages.push(Stage { l_conv, c_conv, blocks });
            l_in = fused;
            c_in = sc.c_out_channels;
        }
        Ok(Self { stages })
    }

    /// Returns the final fused map and the stride-4 fused map.
    pub fn forward(&self, lbev: &Tensor<T>, c_region: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Tensor<T>)> {
        if lbev.rank() != 4 || c_region.rank() != 4 || lbev.shape()[0] != c_region.shape()[0] || lbev.shape()[2..] != c_region.shape()[2..] {
            return Err(Error::shape(
                "encode",
                format!("lbev {:?} and c_region {:?} must share batch and spatial size", lbev.shape(), c_region.shape()),
            ));
        }
        let (mut l, mut c) = (lbev.clone(), c_region.clone());
        let mut low = None;
        for (i, stage) in self.stages.iter().enumerate() {
            let l_out = stage.l_conv.forward(&l, mode)?;
            c = stage.c_conv.forward(&c, mode)?;
            let mut fused = concat_channels(&[&l_out, &c])?;
            for block in &stage.blocks {
                fused = block.forward(&fused, mode)?;
            }
            if i == LOW_LEVEL_STAGE {
                low = Some(fused.clone());
            }
            l = fused;
        }
        Ok((l, low.expect("encoder has a low-level stage")))
    }
}
