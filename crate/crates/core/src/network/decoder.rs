use super::config::ModelConfig;
use super::encoder::LBEV_CHANNELS;
use super::layers::{BiasConv, Builder, ConvBn, SepConvBn};
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{bilinear_upsample, concat_channels, BnMode, Tensor};

/// Two-step upsampling decoder: first fused with reduced low-level encoder
/// features, then with a 1x1 projection of the raw LIDAR view.
pub struct Decoder<T: Real> {
    pub low_reduce: ConvBn<T>,
    pub refine: [SepConvBn<T>; 2],
    pub image_skip: ConvBn<T>,
    pub fuse: ConvBn<T>,
    pub classifier: BiasConv<T>,
}

impl<T: Real> Decoder<T> {
    pub(crate) fn build(b: &mut Builder<'_, T>, cfg: &ModelConfig, low_channels: usize) -> Result<Self> {
        let mut b = b.scope("decoder");
        let d = cfg.decoder_channels;
        let low_reduce = ConvBn::build(&mut b, "low_reduce", low_channels, cfg.low_level_channels, 1, 1, 1, true)?;
        let first = SepConvBn::build(&mut b, "refine0", cfg.hidden_channels + cfg.low_level_channels, d, true)?;
        let second = SepConvBn::build(&mut b, "refine1", d, d, true)?;
        let image_skip = ConvBn::build(&mut b, "image_skip", LBEV_CHANNELS, cfg.image_skip_channels, 1, 1, 1, true)?;
        let fuse = ConvBn::build(&mut b, "fuse", d + cfg.image_skip_channels, d, 3, 1, 1, true)?;
        let classifier = BiasConv::build(&mut b, "classifier", d, cfg.num_classes, 1)?;
        Ok(Self { low_reduce, refine: [first, second], image_skip, fuse, classifier })
    }

    pub fn forward(&self, h: &Tensor<T>, low: &Tensor<T>, lbev: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        if h.rank() != 4 || low.rank() != 4 || lbev.rank() != 4 || h.shape()[0] != low.shape()[0] || h.shape()[0] != lbev.shape()[0] {
            return Err(Error::shape(
                "decode",
                format!("features {:?}, low {:?}, lbev {:?}", h.shape(), low.shape(), lbev.shape()),
            ));
        }
        let (lh, lw) = (low.shape()[2], low.shape()[3]);
        let (s_h, s_w) = (lbev.shape()[2], lbev.shape()[3]);
        let up = bilinear_upsample(h, lh, lw)?;
        let low = self.low_reduce.forward(low, mode)?;
        let mut x = concat_channels(&[&up, &low])?;
        for r in &self.refine {
            x = r.forward(&x, mode)?;
        }
        let up = bilinear_upsample(&x, s_h, s_w)?;
        let skip = self.image_skip.forward(lbev, mode)?;
        let x = self.fuse.forward(&concat_channels(&[&up, &skip])?, mode)?;
        self.classifier.forward(&x)
    }
}
