use super::config::ModelConfig;
use super::layers::{BiasConv, Builder, ConvBn};
use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::{bilinear_resize, concat_channels, global_average_pool, BnMode, Tensor};

/// Atrous spatial pyramid pooling: a 1x1 branch, three dilated 3x3
/// branches and an image-level branch, concatenated and projected.
pub struct Aspp<T: Real> {
    pub pointwise: ConvBn<T>,
    pub dilated: Vec<ConvBn<T>>,
    /// Applied to the globally pooled map.
    pub image_level: BiasConv<T>,
    pub project: ConvBn<T>,
}

impl<T: Real> Aspp<T> {
    pub(crate) fn build(b: &mut Builder<'_, T>, cfg: &ModelConfig, cin: usize) -> Result<Self> {
        let mut b = b.scope("aspp");
        let a = cfg.aspp_channels;
        let pointwise = ConvBn::build(&mut b, "conv1x1", cin, a, 1, 1, 1, true)?;
        let dilated = cfg
            .aspp_rates
            .iter()
            .map(|&r| ConvBn::build(&mut b, &format!("atrous{r}"), cin, a, 3, 1, r, true))
            .collect::<Result<_>>()?;
        let image_level = BiasConv::build(&mut b, "image_level", cin, a, 1)?;
        let project = ConvBn::build(&mut b, "project", 5 * a, cfg.hidden_channels, 1, 1, 1, true)?;
        Ok(Self { pointwise, dilated, image_level, project })
    }

    pub fn image_level_features(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let (h, w) = (x.shape()[2], x.shape()[3]);
        let pooled = self.image_level.forward(&global_average_pool(x)?)?;
        bilinear_resize(&pooled, h, w)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let mut branches = vec![self.pointwise.forward(x, mode)?];
        for d in &self.dilated {
            branches.push(d.forward(x, mode)?);
        }
        branches.push(self.image_level_features(x)?);
        let refs: Vec<&Tensor<T>> = branches.iter().collect();
        self.project.forward(&concat_channels(&refs)?, mode)
    }

    /// Raw convolution responses of the 1x1 and dilated branches, before
    /// normalization.
    pub fn branch_responses(&self, x: &Tensor<T>) -> Result<Vec<Tensor<T>>> {
        let mut out = vec![self.pointwise.conv(x)?];
        for d in &self.dilated {
            out.push(d.conv(x)?);
        }
        Ok(out)
    }
}
