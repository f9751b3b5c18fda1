use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::Result;
use crate::scalar::Real;
use crate::tensor::{
    activation, add_channel_bias, batch_norm, conv2d, depthwise_separable_conv, Activation, BnMode, ParamStore,
    RunningStats, Tensor,
};

/// Registers named parameters under a path prefix.
pub(crate) struct Builder<'a, T: Real> {
    pub store: &'a mut ParamStore<T>,
    pub rng: &'a mut ChaCha8Rng,
    pub prefix: String,
}

impl<T: Real> Builder<'_, T> {
    pub fn scope(&mut self, name: &str) -> Builder<'_, T> {
        Builder { store: self.store, rng: self.rng, prefix: format!("{}/{name}", self.prefix) }
    }

    fn name(&self, leaf: &str) -> String {
        format!("{}/{leaf}", self.prefix)
    }

    /// He-normal initialization with the given fan-in.
    pub fn he(&mut self, leaf: &str, shape: &[usize], fan_in: usize) -> Result<Tensor<T>> {
        let std = (2.0 / fan_in.max(1) as f64).sqrt();
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        let data = (0..n).map(|_| T::of(dist.sample(self.rng))).collect();
        self.store.register(&self.name(leaf), shape, data)
    }

    pub fn full(&mut self, leaf: &str, shape: &[usize], value: f64) -> Result<Tensor<T>> {
        let n = shape.iter().product();
        self.store.register(&self.name(leaf), shape, vec![T::of(value); n])
    }

    pub fn batch_norm(&mut self, channels: usize) -> Result<BatchNorm<T>> {
        let mut s = self.scope("bn");
        let scale = s.full("scale", &[channels], 1.0)?;
        let shift = s.full("shift", &[channels], 0.0)?;
        let stats = RunningStats::new(channels)?;
        s.store.register_buffer(&s.name("running_mean"), stats.mean.clone())?;
        s.store.register_buffer(&s.name("running_var"), stats.var.clone())?;
        Ok(BatchNorm { scale, shift, stats })
    }
}

pub struct BatchNorm<T: Real> {
    pub scale: Tensor<T>,
    pub shift: Tensor<T>,
    pub stats: RunningStats<T>,
}

impl<T: Real> BatchNorm<T> {
    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        batch_norm(x, &self.scale, &self.shift, mode, &self.stats)
    }
}

/// Convolution, batch norm, optional ReLU.
pub struct ConvBn<T: Real> {
    pub kernel: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub stride: usize,
    pub dilation: usize,
    pub relu: bool,
}

impl<T: Real> ConvBn<T> {
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn build(
        b: &mut Builder<'_, T>,
        name: &str,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        dilation: usize,
        relu: bool,
    ) -> Result<Self> {
        let mut s = b.scope(name);
        let kernel = s.he("kernel", &[cout, cin, k, k], cin * k * k)?;
        let bn = s.batch_norm(cout)?;
        Ok(Self { kernel, bn, stride, dilation, relu })
    }

    pub fn conv(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.kernel, self.stride, self.dilation)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&self.conv(x)?, mode)?;
        Ok(if self.relu { activation(&y, Activation::Relu) } else { y })
    }
}

/// Depthwise-separable convolution, batch norm, optional ReLU.
pub struct SepConvBn<T: Real> {
    pub depth: Tensor<T>,
    pub point: Tensor<T>,
    pub bn: BatchNorm<T>,
    pub relu: bool,
}

impl<T: Real> SepConvBn<T> {
    pub(crate) fn build(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, relu: bool) -> Result<Self> {
        let mut s = b.scope(name);
        let depth = s.he("depthwise", &[cin, 1, 3, 3], 9)?;
        let point = s.he("pointwise", &[cout, cin, 1, 1], cin)?;
        let bn = s.batch_norm(cout)?;
        Ok(Self { depth, point, bn, relu })
    }

    pub fn forward(&self, x: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        let y = self.bn.forward(&depthwise_separable_conv(x, &self.depth, &self.point, 1)?, mode)?;
        Ok(if self.relu { activation(&y, Activation::Relu) } else { y })
    }
}

/// Plain convolution with a per-channel bias.
pub struct BiasConv<T: Real> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
}

impl<T: Real> BiasConv<T> {
    pub(crate) fn build(b: &mut Builder<'_, T>, name: &str, cin: usize, cout: usize, k: usize) -> Result<Self> {
        let mut s = b.scope(name);
        let kernel = s.he("kernel", &[cout, cin, k, k], cin * k * k)?;
        let bias = s.full("bias", &[cout], 0.0)?;
        Ok(Self { kernel, bias })
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        add_channel_bias(&conv2d(x, &self.kernel, 1, 1)?, &self.bias)
    }
}
