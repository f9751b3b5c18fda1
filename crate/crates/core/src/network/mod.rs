//! The FusionLane segmentation network.

mod aspp;
mod config;
mod convlstm;
mod decoder;
mod encoder;
mod layers;

use std::sync::atomic::{AtomicU64, Ordering};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use aspp::Aspp;
pub use config::{EncoderConfig, ModelConfig, ModelMode, StageConfig};
pub use convlstm::{ConvLstmCell, HiddenState, GATES};
pub use decoder::Decoder;
pub use encoder::{Encoder, ResidualBlock, Stage, C_REGION_CHANNELS, LBEV_CHANNELS, LOW_LEVEL_STAGE};
pub use layers::{BatchNorm, BiasConv, ConvBn, SepConvBn};

use crate::bev::C_REGION_CLASSES;
use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::scalar::Real;
use crate::tensor::{no_grad, BnMode, ParamStore, Tensor};
use layers::Builder;

/// One time step of network input, batched.
#[derive(Clone)]
pub struct FrameInput<T: Real> {
    /// N x 3 x S x S, byte values scaled to [0, 1].
    pub lbev: Tensor<T>,
    /// N x 1 x S x S, class index divided by 6.
    pub c_region: Tensor<T>,
}

impl<T: Real> FrameInput<T> {
    /// Stacks same-sized samples; also returns their ground truth in
    /// N, H, W order.
    pub fn from_samples(samples: &[&Sample]) -> Result<(Self, Vec<u8>)> {
        let first = samples.first().ok_or_else(|| Error::invalid("frame input", "empty batch"))?;
        let (h, w) = (first.height(), first.width());
        if samples.iter().any(|s| (s.height(), s.width()) != (h, w)) {
            return Err(Error::shape("frame input", "samples differ in size"));
        }
        let n = samples.len();
        let hw = h * w;
        let mut lbev = vec![T::zero(); n * 3 * hw];
        let mut creg = vec![T::zero(); n * hw];
        let mut target = Vec::with_capacity(n * hw);
        let byte = T::of(1.0 / 255.0);
        let cls = T::of(1.0 / C_REGION_CLASSES as f64);
        for (k, s) in samples.iter().enumerate() {
            for p in 0..hw {
                for ch in 0..3 {
                    lbev[(k * 3 + ch) * hw + p] = T::of(s.lbev.data[p * 3 + ch] as f64) * byte;
                }
                creg[k * hw + p] = T::of(s.c_region.data[p] as f64) * cls;
            }
            target.extend_from_slice(&s.gt.data);
        }
        Ok((
            Self { lbev: Tensor::new(&[n, 3, h, w], lbev)?, c_region: Tensor::new(&[n, 1, h, w], creg)? },
            target,
        ))
    }
}

static NEXT_SEQUENCE: AtomicU64 = AtomicU64::new(0);

pub struct Model<T: Real> {
    config: ModelConfig,
    store: ParamStore<T>,
    pub encoder: Encoder<T>,
    pub aspp: Aspp<T>,
    /// Stacked recurrent cells; empty in `without_lstm` mode.
    pub lstm: Vec<ConvLstmCell<T>>,
    pub decoder: Decoder<T>,
}

impl<T: Real> Model<T> {
    /// Builds a randomly initialized model; `seed` fixes every initial value.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = Builder { store: &mut store, rng: &mut rng, prefix: String::new() };
        let mut root = b.scope("fusionlane");
        let encoder = Encoder::build(&mut root, &config.encoder)?;
        let stages = config.encoder.effective_stages();
        let aspp = Aspp::build(&mut root, &config, config.encoder.output_channels())?;
        let lstm = match config.mode {
            ModelMode::FusionLane => {
                let hs = ModelConfig::high_size(config.input_size);
                (0..config.lstm_layers)
                    .map(|l| {
                        ConvLstmCell::build(
                            &mut root,
                            &format!("lstm{l}"),
                            config.hidden_channels,
                            config.hidden_channels,
                            config.lstm_kernel,
                            hs,
                            config.cell_tanh,
                        )
                    })
                    .collect::<Result<_>>()?
            }
            ModelMode::WithoutLstm => Vec::new(),
        };
        let decoder = Decoder::build(&mut root, &config, stages[LOW_LEVEL_STAGE].fused_channels())?;
        Ok(Self { config, store, encoder, aspp, lstm, decoder })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn encode(&self, lbev: &Tensor<T>, c_region: &Tensor<T>, mode: BnMode) -> Result<(Tensor<T>, Tensor<T>)> {
        self.encoder.forward(lbev, c_region, mode)
    }

    pub fn aspp_forward(&self, high: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.aspp.forward(high, mode)
    }

    pub fn decode(&self, h: &Tensor<T>, low: &Tensor<T>, lbev: &Tensor<T>, mode: BnMode) -> Result<Tensor<T>> {
        self.decoder.forward(h, low, lbev, mode)
    }

    /// Logits for every frame. Recurrent state starts at zero and is carried
    /// through the frames in order.
    pub fn forward_sequence(&self, frames: &[FrameInput<T>], mode: BnMode) -> Result<Vec<Tensor<T>>> {
        let seq_id = NEXT_SEQUENCE.fetch_add(1, Ordering::Relaxed);
        let mut states: Vec<HiddenState<T>> = Vec::new();
        let mut out = Vec::with_capacity(frames.len());
        for frame in frames {
            let (high, low) = self.encode(&frame.lbev, &frame.c_region, mode)?;
            let mut x = self.aspp_forward(&high, mode)?;
            for (l, cell) in self.lstm.iter().enumerate() {
                if states.len() <= l {
                    let s = x.shape();
                    states.push(HiddenState::zeros(s[0], cell.hidden_channels(), s[2], s[3], seq_id)?);
                }
                let (h, next) = cell.step(&x, &states[l])?;
                states[l] = next;
                x = h;
            }
            out.push(self.decode(&x, &low, &frame.lbev, mode)?);
        }
        Ok(out)
    }

    /// Per-frame class maps (N, H, W order) using running batch-norm
    /// statistics and no gradient recording.
    pub fn predict_sequence(&self, frames: &[FrameInput<T>]) -> Result<Vec<Vec<u8>>> {
        let _guard = no_grad();
        self.forward_sequence(frames, BnMode::Infer)?.iter().map(argmax_classes).collect()
    }
}

/// Channel argmax of an N x K x H x W tensor; ties go to the lower class.
pub fn argmax_classes<T: Real>(logits: &Tensor<T>) -> Result<Vec<u8>> {
    if logits.rank() != 4 {
        return Err(Error::shape("argmax", format!("expected rank 4, got {:?}", logits.shape())));
    }
    let s = logits.shape();
    let (n, k, hw) = (s[0], s[1], s[2] * s[3]);
    let z = logits.data();
    let mut out = Vec::with_capacity(n * hw);
    for b in 0..n {
        for p in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if z[(b * k + c) * hw + p] > z[(b * k + best) * hw + p] {
                    best = c;
                }
            }
            out.push(best as u8);
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::testutil::random_vec;
    use crate::tensor::{hadamard, sum};
    use rand::Rng;

    fn random_input<T: Real>(rng: &mut ChaCha8Rng, n: usize, s: usize) -> FrameInput<T> {
        let lb: Vec<T> = (0..n * 3 * s * s).map(|_| T::of(rng.random_range(0.0..1.0))).collect();
        let cr: Vec<T> = (0..n * s * s).map(|_| T::of(rng.random_range(0..6) as f64 / 6.0)).collect();
        FrameInput { lbev: Tensor::new(&[n, 3, s, s], lb).unwrap(), c_region: Tensor::new(&[n, 1, s, s], cr).unwrap() }
    }

    fn max_abs_diff<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
        a.data().iter().zip(b.data().iter()).map(|(x, y)| (*x - *y).abs().as_f64()).fold(0.0, f64::max)
    }

    #[test]
    fn toy_shape_chain() {
        let model = Model::<f32>::new(ModelConfig::toy(33), 1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random_input::<f32>(&mut rng, 2, 33);
        let (high, low) = model.encode(&x.lbev, &x.c_region, BnMode::Train).unwrap();
        assert_eq!(high.shape(), &[2, 32, 3, 3]);
        assert_eq!(low.shape(), &[2, 16, 9, 9]);
        let a = model.aspp_forward(&high, BnMode::Train).unwrap();
        assert_eq!(a.shape(), &[2, 8, 3, 3]);
        let logits = model.forward_sequence(&[x], BnMode::Train).unwrap();
        assert_eq!(logits[0].shape(), &[2, 7, 33, 33]);
    }

    #[test]
    fn scaled_shape_chain_at_400() {
        let model = Model::<f32>::new(ModelConfig::scaled(1.0 / 16.0), 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_input::<f32>(&mut rng, 1, 400);
        let _g = no_grad();
        let (high, low) = model.encode(&x.lbev, &x.c_region, BnMode::Train).unwrap();
        assert_eq!(&high.shape()[2..], &[25, 25]);
        assert_eq!(&low.shape()[2..], &[100, 100]);
        assert_eq!(high.shape()[1], model.config().encoder.output_channels());
    }

    #[test]
    fn encoder_rejects_branch_mismatch() {
        let model = Model::<f32>::new(ModelConfig::toy(16), 1).unwrap();
        let l = Tensor::zeros(&[1, 3, 16, 16]).unwrap();
        let c = Tensor::zeros(&[1, 1, 15, 16]).unwrap();
        assert!(model.encode(&l, &c, BnMode::Train).is_err());
    }

    #[test]
    fn c_branch_is_wired() {
        let model = Model::<f64>::new(ModelConfig::toy(32), 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random_input::<f64>(&mut rng, 1, 32);
        let (a, _) = model.encode(&x.lbev, &x.c_region, BnMode::Train).unwrap();
        let zero = Tensor::zeros(x.c_region.shape()).unwrap();
        let (b, _) = model.encode(&x.lbev, &zero, BnMode::Train).unwrap();
        assert!(max_abs_diff(&a, &b) > 0.0);
    }

    #[test]
    fn lbev_skip_is_wired() {
        let model = Model::<f64>::new(ModelConfig::toy(32), 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random_input::<f64>(&mut rng, 1, 32);
        let (high, low) = model.encode(&x.lbev, &x.c_region, BnMode::Train).unwrap();
        let h = model.aspp_forward(&high, BnMode::Train).unwrap();
        let a = model.decode(&h, &low, &x.lbev, BnMode::Train).unwrap();
        let b = model.decode(&h, &low, &Tensor::zeros(x.lbev.shape()).unwrap(), BnMode::Train).unwrap();
        assert!(max_abs_diff(&a, &b) > 0.0);
        assert!(a.is_finite());
    }

    #[test]
    fn image_level_branch_of_constant_input() {
        let model = Model::<f64>::new(ModelConfig::toy(32), 5).unwrap();
        let c = model.config().encoder.output_channels();
        let x = Tensor::full(&[1, c, 4, 4], 0.7).unwrap();
        let img = model.aspp.image_level_features(&x).unwrap();
        let direct = model.aspp.image_level.forward(&Tensor::full(&[1, c, 1, 1], 0.7).unwrap()).unwrap();
        let d = direct.to_vec();
        for (i, v) in img.data().iter().enumerate() {
            assert!((v - d[i / 16]).abs() < 1e-12);
        }
    }

    #[test]
    fn atrous_impulse_response() {
        let mut cfg = ModelConfig::toy(32);
        cfg.aspp_rates = [6, 12, 18];
        let model = Model::<f64>::new(cfg, 6).unwrap();
        let c = model.config().encoder.output_channels();
        let size = 41;
        let mut data = vec![0.0; c * size * size];
        data[20 * size + 20] = 1.0;
        let x = Tensor::new(&[1, c, size, size], data).unwrap();
        let responses = model.aspp.branch_responses(&x).unwrap();
        let nz = |t: &Tensor<f64>, r: usize, col: usize| (0..t.shape()[1]).any(|o| t.data()[(o * size + r) * size + col] != 0.0);
        for (b, rate) in [6usize, 12, 18].into_iter().enumerate() {
            let t = &responses[b + 1];
            for (dr, dc) in [(0i64, 0i64), (1, 0), (-1, 0), (0, 1), (0, -1), (1, 1), (-1, -1)] {
                let (r, col) = ((20 + dr * rate as i64) as usize, (20 + dc * rate as i64) as usize);
                assert!(nz(t, r, col), "rate {rate} offset ({dr},{dc})");
            }
            assert!(!nz(t, 20 + rate / 2, 20), "rate {rate} responds between taps");
        }
        // The 1x1 branch only sees the impulse itself.
        assert!(nz(&responses[0], 20, 20) && !nz(&responses[0], 21, 20));
    }

    #[test]
    fn bypass_equivalence_for_single_frame() {
        let model = Model::<f64>::new(ModelConfig::toy(32).with_mode(ModelMode::WithoutLstm), 7).unwrap();
        assert!(model.lstm.is_empty());
        assert!(model.store().params().all(|(n, _)| !n.contains("lstm")));
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = random_input::<f64>(&mut rng, 1, 32);
        let seq = model.forward_sequence(std::slice::from_ref(&x), BnMode::Infer).unwrap();
        let (high, low) = model.encode(&x.lbev, &x.c_region, BnMode::Infer).unwrap();
        let h = model.aspp_forward(&high, BnMode::Infer).unwrap();
        let direct = model.decode(&h, &low, &x.lbev, BnMode::Infer).unwrap();
        assert_eq!(seq[0].to_vec(), direct.to_vec());
    }

    #[test]
    fn frame_order_matters_only_with_memory() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let frames: Vec<FrameInput<f64>> = (0..3).map(|_| random_input(&mut rng, 1, 32)).collect();
        let rev: Vec<FrameInput<f64>> = frames.iter().rev().cloned().collect();
        for (mode, differs) in [(ModelMode::FusionLane, true), (ModelMode::WithoutLstm, false)] {
            let model = Model::<f64>::new(ModelConfig::toy(32).with_mode(mode), 8).unwrap();
            let a = model.forward_sequence(&frames, BnMode::Infer).unwrap();
            let b = model.forward_sequence(&rev, BnMode::Infer).unwrap();
            // Frame 2 of the forward pass and frame 0 of the reversed pass see the same input.
            let d = max_abs_diff(&a[2], &b[0]);
            assert_eq!(d > 1e-12, differs, "{mode}: {d}");
        }
    }

    #[test]
    fn repeated_frame_is_finite() {
        let model = Model::<f32>::new(ModelConfig::toy(32), 9).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_input::<f32>(&mut rng, 1, 32);
        let out = model.forward_sequence(&vec![x; 4], BnMode::Train).unwrap();
        assert_eq!(out.len(), 4);
        assert!(out[3].is_finite());
        assert_eq!(out[3].shape(), &[1, 7, 32, 32]);
        let labels = model.predict_sequence(&[random_input(&mut rng, 1, 32)]).unwrap();
        assert!(labels[0].iter().all(|&v| v < 7));
    }

    #[test]
    fn every_parameter_receives_a_gradient() {
        let model = Model::<f64>::new(ModelConfig::toy(16), 10).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let frames: Vec<FrameInput<f64>> = (0..2).map(|_| random_input(&mut rng, 1, 16)).collect();
        let out = model.forward_sequence(&frames, BnMode::Train).unwrap();
        let probe = Tensor::new(out[1].shape(), random_vec(&mut rng, out[1].numel())).unwrap();
        sum(&hadamard(&out[1], &probe).unwrap()).backward().unwrap();
        for (name, p) in model.store().params() {
            assert!(p.grad().is_some(), "{name}");
        }
    }

    #[test]
    fn frame_input_scaling() {
        use crate::bev::{LabelMap, LbevImage};
        let mut lbev = LbevImage::zeros(0, 2, 2);
        lbev.set(1, 0, 2, 255);
        let c = LabelMap::new(2, 2, vec![0, 5, 3, 0]).unwrap();
        let gt = LabelMap::new(2, 2, vec![6, 5, 3, 0]).unwrap();
        let s = Sample::new(0, lbev, c, gt).unwrap();
        let (x, target) = FrameInput::<f64>::from_samples(&[&s, &s]).unwrap();
        assert_eq!(x.lbev.shape(), &[2, 3, 2, 2]);
        assert_eq!(x.lbev.data()[2 * 4 + 2], 1.0);
        assert!((x.c_region.data()[1] - 5.0 / 6.0).abs() < 1e-12);
        assert!((x.c_region.data()[2] - 0.5).abs() < 1e-12);
        assert_eq!(target, vec![6, 5, 3, 0, 6, 5, 3, 0]);
    }

    #[test]
    fn argmax_ties_and_values() {
        let t = Tensor::<f32>::new(&[1, 3, 1, 2], vec![0.0, 1.0, 0.0, 2.0, 0.0, 2.0]).unwrap();
        assert_eq!(argmax_classes(&t).unwrap(), vec![0, 1]);
    }
}
