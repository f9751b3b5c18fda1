use super::ops::dims4;
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Real;

pub const BN_EPSILON: f64 = 1e-5;
/// Weight of the previous running value in the exponential moving average.
pub const BN_MOMENTUM: f64 = 0.9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BnMode {
    /// Normalize with batch statistics and update the running averages.
    Train,
    /// Normalize with the running averages.
    Infer,
}

/// Running mean/variance buffers of one batch-norm layer.
#[derive(Debug, Clone)]
pub struct RunningStats<T: Real> {
    pub mean: Tensor<T>,
    pub var: Tensor<T>,
}

impl<T: Real> RunningStats<T> {
    pub fn new(channels: usize) -> Result<Self> {
        Ok(Self {
            mean: Tensor::zeros(&[channels])?,
            var: Tensor::full(&[channels], T::one())?,
        })
    }
}

pub fn batch_norm<T: Real>(
    input: &Tensor<T>,
    scale: &Tensor<T>,
    shift: &Tensor<T>,
    mode: BnMode,
    running: &RunningStats<T>,
) -> Result<Tensor<T>> {
    let (n, c, h, w) = dims4(input, "batch_norm")?;
    for (name, t) in [("scale", scale), ("shift", shift), ("running mean", &running.mean), ("running var", &running.var)] {
        if t.numel() != c {
            return Err(Error::shape(
                "batch_norm",
                format!("{name} has {} entries for {c} channels", t.numel()),
            ));
        }
    }
    let hw = h * w;
    let count = n * hw;
    if count == 0 {
        return Err(Error::invalid("batch_norm", "empty batch"));
    }
    let eps = T::of(BN_EPSILON);
    let m = T::from_usize(count).unwrap();
    let idx = move |s: usize, ch: usize| (s * c + ch) * hw;

    let (mean, var) = match mode {
        BnMode::Train => {
            let x = input.data();
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for ch in 0..c {
                let mut acc = T::zero();
                for s in 0..n {
                    acc += x[idx(s, ch)..idx(s, ch) + hw].iter().fold(T::zero(), |a, &v| a + v);
                }
                let mu = acc / m;
                let mut sq = T::zero();
                for s in 0..n {
                    sq += x[idx(s, ch)..idx(s, ch) + hw].iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
                }
                mean[ch] = mu;
                var[ch] = sq / m;
            }
            let keep = T::of(BN_MOMENTUM);
            let blend = T::one() - keep;
            running.mean.update_data(|rm| {
                rm.iter_mut().zip(&mean).for_each(|(r, &b)| *r = keep * *r + blend * b)
            });
            running.var.update_data(|rv| {
                rv.iter_mut().zip(&var).for_each(|(r, &b)| *r = keep * *r + blend * b)
            });
            (mean, var)
        }
        BnMode::Infer => (running.mean.to_vec(), running.var.to_vec()),
    };
    let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();

    let mut xhat = vec![T::zero(); n * c * hw];
    let mut out = vec![T::zero(); n * c * hw];
    {
        let x = input.data();
        let (sc, sh) = (scale.data(), shift.data());
        for s in 0..n {
            for ch in 0..c {
                for i in idx(s, ch)..idx(s, ch) + hw {
                    let xh = (x[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = sc[ch] * xh + sh[ch];
                }
            }
        }
    }

    let scale_c = scale.clone();
    let parents = vec![input.clone(), scale.clone(), shift.clone()];
    Ok(Tensor::from_op(vec![n, c, h, w], out, parents, move |g| {
        let sc = scale_c.data();
        let mut gx = vec![T::zero(); n * c * hw];
        let mut gscale = vec![T::zero(); c];
        let mut gshift = vec![T::zero(); c];
        for ch in 0..c {
            let mut sum_g = T::zero();
            let mut sum_gx = T::zero();
            for s in 0..n {
                for i in idx(s, ch)..idx(s, ch) + hw {
                    sum_g += g[i];
                    sum_gx += g[i] * xhat[i];
                }
            }
            gshift[ch] = sum_g;
            gscale[ch] = sum_gx;
            let k = sc[ch] * inv_std[ch];
            match mode {
                BnMode::Train => {
                    // d xhat = g * scale; projected onto the batch-statistics
                    // constraint (zero mean, unit variance of xhat).
                    for s in 0..n {
                        for i in idx(s, ch)..idx(s, ch) + hw {
                            gx[i] = k * (g[i] - sum_g / m - xhat[i] * sum_gx / m);
                        }
                    }
                }
                BnMode::Infer => {
                    for s in 0..n {
                        for i in idx(s, ch)..idx(s, ch) + hw {
                            gx[i] = k * g[i];
                        }
                    }
                }
            }
        }
        vec![Some(gx), Some(gscale), Some(gshift)]
    }))
}
