//! Sequence training loop, class weighting, evaluation and training logs.

use std::fmt::{self, Write as _};
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::NUM_CLASSES;
use crate::checkpoint::{encode_records, model_records};
use crate::dataset::{random_crop_sequence, SequenceSample};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::network::{FrameInput, Model, ModelConfig, ModelMode};
use crate::scalar::Real;
use crate::tensor::{add, scale, weighted_cross_entropy, BnMode, OptimizerKind, Tensor};

pub const WEIGHT_MIN: f64 = 0.1;
pub const WEIGHT_MAX: f64 = 10.0;

#[derive(Debug, Clone, PartialEq)]
pub enum ClassWeights {
    /// Median-frequency weights from the training labels.
    Auto,
    Fixed(Vec<f64>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizerChoice {
    Adam,
    Momentum,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LossFrames {
    /// Mean of the per-frame losses.
    All,
    Last,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Preset {
    /// The full architecture scaled by `width_multiplier`.
    Full,
    /// The tiny architecture of [`ModelConfig::toy`].
    Toy,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub time_step: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub epochs: usize,
    pub class_weights: ClassWeights,
    pub optimizer: OptimizerChoice,
    pub momentum: f64,
    pub seed: u64,
    pub crop: usize,
    pub mode: ModelMode,
    pub preset: Preset,
    pub width_multiplier: f64,
    pub lstm_layers: usize,
    pub cell_tanh: bool,
    pub frame_size: usize,
    pub loss_frames: LossFrames,
    pub validate: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            time_step: 4,
            batch_size: 2,
            learning_rate: 1e-4,
            lr_decay: 0.95,
            epochs: 30,
            class_weights: ClassWeights::Auto,
            optimizer: OptimizerChoice::Adam,
            momentum: 0.9,
            seed: 0,
            crop: 321,
            mode: ModelMode::FusionLane,
            preset: Preset::Full,
            width_multiplier: 1.0,
            lstm_layers: 1,
            cell_tanh: false,
            frame_size: 400,
            loss_frames: LossFrames::All,
            validate: true,
        }
    }
}

fn parse_num<V: FromStr>(key: &str, v: &str) -> Result<V> {
    v.parse().map_err(|_| Error::Config(format!("`{key}`: cannot parse `{v}`")))
}

fn parse_bool(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(Error::Config(format!("`{key}`: expected true or false, got `{v}`"))),
    }
}

impl TrainConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a
    /// comment; unknown keys are errors.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("line {}: expected `key = value`", lineno + 1)))?;
            cfg.set(k.trim(), v.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "time_step" => self.time_step = parse_num(key, v)?,
            "batch_size" => self.batch_size = parse_num(key, v)?,
            "learning_rate" => self.learning_rate = parse_num(key, v)?,
            "lr_decay" => self.lr_decay = parse_num(key, v)?,
            "epochs" => self.epochs = parse_num(key, v)?,
            "class_weights" => {
                self.class_weights = if v == "auto" {
                    ClassWeights::Auto
                } else {
                    ClassWeights::Fixed(
                        v.split(|c: char| c == ',' || c.is_whitespace())
                            .filter(|s| !s.is_empty())
                            .map(|s| parse_num(key, s))
                            .collect::<Result<_>>()?,
                    )
                }
            }
            "optimizer" => {
                self.optimizer = match v {
                    "adam" => OptimizerChoice::Adam,
                    "momentum" => OptimizerChoice::Momentum,
                    _ => return Err(Error::Config(format!("`optimizer`: expected adam or momentum, got `{v}`"))),
                }
            }
            "momentum" => self.momentum = parse_num(key, v)?,
            "seed" => self.seed = parse_num(key, v)?,
            "crop" => self.crop = parse_num(key, v)?,
            "mode" => self.mode = v.parse()?,
            "preset" => {
                self.preset = match v {
                    "full" => Preset::Full,
                    "toy" => Preset::Toy,
                    _ => return Err(Error::Config(format!("`preset`: expected full or toy, got `{v}`"))),
                }
            }
            "width_multiplier" => self.width_multiplier = parse_num(key, v)?,
            "lstm_layers" => self.lstm_layers = parse_num(key, v)?,
            "cell_tanh" => self.cell_tanh = parse_bool(key, v)?,
            "frame_size" => self.frame_size = parse_num(key, v)?,
            "loss_frames" => {
                self.loss_frames = match v {
                    "all" => LossFrames::All,
                    "last" => LossFrames::Last,
                    _ => return Err(Error::Config(format!("`loss_frames`: expected all or last, got `{v}`"))),
                }
            }
            "validate" => self.validate = parse_bool(key, v)?,
            _ => return Err(Error::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::Config(msg.to_string())) };
        check(self.time_step >= 1, "time_step must be at least 1")?;
        check(self.batch_size >= 1, "batch_size must be at least 1")?;
        check(self.learning_rate > 0.0 && self.learning_rate.is_finite(), "learning_rate must be positive")?;
        check(self.lr_decay > 0.0 && self.lr_decay <= 1.0, "lr_decay must be in (0, 1]")?;
        check(self.crop >= 1 && self.frame_size >= 1, "crop and frame_size must be positive")?;
        check(self.width_multiplier > 0.0, "width_multiplier must be positive")?;
        check((0.0..1.0).contains(&self.momentum), "momentum must be in [0, 1)")?;
        if let ClassWeights::Fixed(w) = &self.class_weights {
            check(w.len() == NUM_CLASSES, "class_weights needs 7 values or `auto`")?;
            check(w.iter().all(|&x| x > 0.0 && x.is_finite()), "class_weights must be positive")?;
        }
        Ok(())
    }

    /// Spatial size the network sees during training.
    pub fn input_size(&self) -> usize {
        self.crop.min(self.frame_size)
    }

    pub fn model_config(&self) -> ModelConfig {
        let base = match self.preset {
            Preset::Full => ModelConfig::scaled(self.width_multiplier),
            Preset::Toy => ModelConfig::toy(self.input_size()),
        };
        ModelConfig {
            input_size: self.input_size(),
            lstm_layers: self.lstm_layers,
            cell_tanh: self.cell_tanh,
            mode: self.mode,
            ..base
        }
    }

    pub fn optimizer_kind(&self) -> OptimizerKind {
        match self.optimizer {
            OptimizerChoice::Adam => OptimizerKind::adam(),
            OptimizerChoice::Momentum => OptimizerKind::Momentum { mu: self.momentum },
        }
    }
}

impl fmt::Display for TrainConfig {
    /// The same `key = value` form accepted by [`TrainConfig::parse`].
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "time_step = {}", self.time_step)?;
        writeln!(f, "batch_size = {}", self.batch_size)?;
        writeln!(f, "learning_rate = {}", self.learning_rate)?;
        writeln!(f, "lr_decay = {}", self.lr_decay)?;
        writeln!(f, "epochs = {}", self.epochs)?;
        match &self.class_weights {
            ClassWeights::Auto => writeln!(f, "class_weights = auto")?,
            ClassWeights::Fixed(w) => {
                let s: Vec<String> = w.iter().map(|v| v.to_string()).collect();
                writeln!(f, "class_weights = {}", s.join(", "))?
            }
        }
        let opt = match self.optimizer {
            OptimizerChoice::Adam => "adam",
            OptimizerChoice::Momentum => "momentum",
        };
        writeln!(f, "optimizer = {opt}")?;
        writeln!(f, "momentum = {}", self.momentum)?;
        writeln!(f, "seed = {}", self.seed)?;
        writeln!(f, "crop = {}", self.crop)?;
        writeln!(f, "mode = {}", self.mode)?;
        writeln!(f, "preset = {}", if self.preset == Preset::Toy { "toy" } else { "full" })?;
        writeln!(f, "width_multiplier = {}", self.width_multiplier)?;
        writeln!(f, "lstm_layers = {}", self.lstm_layers)?;
        writeln!(f, "cell_tanh = {}", self.cell_tanh)?;
        writeln!(f, "frame_size = {}", self.frame_size)?;
        writeln!(f, "loss_frames = {}", if self.loss_frames == LossFrames::All { "all" } else { "last" })?;
        writeln!(f, "validate = {}", self.validate)
    }
}

/// Median-frequency class weights, clamped to `[0.1, 10]`. The median is
/// taken over the classes that occur; absent classes get the maximum.
pub fn compute_class_weights<'a>(labels: impl IntoIterator<Item = &'a [u8]>) -> Result<Vec<f64>> {
    let mut counts = [0u64; NUM_CLASSES];
    for map in labels {
        for &v in map {
            *counts.get_mut(v as usize).ok_or(Error::LabelOutOfRange { value: v, classes: NUM_CLASSES as u8 })? += 1;
        }
    }
    class_weights_from_counts(&counts)
}

pub fn class_weights_from_counts(counts: &[u64]) -> Result<Vec<f64>> {
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(Error::invalid("class weights", "no labelled pixels"));
    }
    let mut freqs: Vec<f64> = counts.iter().filter(|&&c| c > 0).map(|&c| c as f64 / total as f64).collect();
    freqs.sort_by(f64::total_cmp);
    let m = freqs.len();
    let median = if m % 2 == 1 { freqs[m / 2] } else { (freqs[m / 2 - 1] + freqs[m / 2]) / 2.0 };
    Ok(counts
        .iter()
        .map(|&c| if c == 0 { WEIGHT_MAX } else { (median / (c as f64 / total as f64)).clamp(WEIGHT_MIN, WEIGHT_MAX) })
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_miou: Option<f64>,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub epochs: Vec<EpochRecord>,
}

impl TrainLog {
    /// CSV with header `epoch,loss,val_miou,lr,seconds`.
    pub fn to_csv(&self) -> String {
        self.render(true)
    }

    /// The CSV without the wall-clock column; identical across runs with
    /// the same seed.
    pub fn to_csv_without_timing(&self) -> String {
        self.render(false)
    }

    fn render(&self, timing: bool) -> String {
        let mut out = String::from(if timing { "epoch,loss,val_miou,lr,seconds\n" } else { "epoch,loss,val_miou,lr\n" });
        for r in &self.epochs {
            let miou = r.val_miou.map_or_else(|| "NA".to_string(), |m| format!("{m:.17e}"));
            write!(out, "{},{:.17e},{miou},{:.17e}", r.epoch, r.loss, r.lr).unwrap();
            if timing {
                write!(out, ",{:.3}", r.seconds).unwrap();
            }
            out.push('\n');
        }
        out
    }

    pub fn final_loss(&self) -> Option<f64> {
        self.epochs.last().map(|r| r.loss)
    }
}

pub struct TrainOutcome {
    pub log: TrainLog,
    /// Encoded checkpoint of the epoch with the best validation MIOU, or of
    /// the last epoch when validation is off.
    pub best_checkpoint: Vec<u8>,
    pub best_epoch: usize,
    pub class_weights: Vec<f64>,
}

/// Stacks frame `t` of every sequence in the batch.
pub fn batch_frames<T: Real>(batch: &[SequenceSample]) -> Result<Vec<(FrameInput<T>, Vec<u8>)>> {
    let steps = batch.first().map_or(0, |s| s.len());
    if batch.iter().any(|s| s.len() != steps) {
        return Err(Error::shape("batch", "sequences differ in length"));
    }
    (0..steps)
        .map(|t| {
            let frames: Vec<&_> = batch.iter().map(|s| s.frames[t].as_ref()).collect();
            FrameInput::from_samples(&frames)
        })
        .collect()
}

/// Confusion matrix over every frame of every sequence, predicted with
/// running batch-norm statistics.
pub fn evaluate<T: Real>(model: &Model<T>, sequences: &[SequenceSample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.config().num_classes);
    for batch in sequences.chunks(batch_size.max(1)) {
        let frames = batch_frames::<T>(batch)?;
        let inputs: Vec<FrameInput<T>> = frames.iter().map(|(x, _)| x.clone()).collect();
        let preds = model.predict_sequence(&inputs)?;
        for (pred, (_, target)) in preds.iter().zip(&frames) {
            cm.accumulate_slices(pred, target)?;
        }
    }
    Ok(cm)
}

/// Mean weighted cross-entropy of one batch of sequences.
pub fn sequence_loss<T: Real>(
    model: &Model<T>,
    batch: &[SequenceSample],
    weights: &[T],
    loss_frames: LossFrames,
) -> Result<Tensor<T>> {
    let frames = batch_frames::<T>(batch)?;
    let inputs: Vec<FrameInput<T>> = frames.iter().map(|(x, _)| x.clone()).collect();
    let logits = model.forward_sequence(&inputs, BnMode::Train)?;
    let used: Vec<usize> = match loss_frames {
        LossFrames::All => (0..logits.len()).collect(),
        LossFrames::Last => vec![logits.len() - 1],
    };
    let mut total: Option<Tensor<T>> = None;
    for &t in &used {
        let l = weighted_cross_entropy(&logits[t], &frames[t].1, weights)?;
        total = Some(match total {
            Some(acc) => add(&acc, &l)?,
            None => l,
        });
    }
    let total = total.ok_or_else(|| Error::invalid("sequence_loss", "empty sequence"))?;
    Ok(scale(&total, T::of(1.0 / used.len() as f64)))
}

/// Trains `model` in place. Called after every epoch with its record.
pub fn train<T: Real>(
    model: &mut Model<T>,
    train_set: &[SequenceSample],
    validation_set: &[SequenceSample],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Dataset("no training sequences".into()));
    }
    if let Some(bad) = train_set.iter().find(|s| s.len() != cfg.time_step) {
        return Err(Error::Dataset(format!("sequence of length {} with time_step {}", bad.len(), cfg.time_step)));
    }
    let class_weights = match &cfg.class_weights {
        ClassWeights::Fixed(w) => w.clone(),
        ClassWeights::Auto => {
            compute_class_weights(train_set.iter().flat_map(|s| s.frames.iter().map(|f| f.gt.data.as_slice())))?
        }
    };
    let weights: Vec<T> = class_weights.iter().map(|&w| T::of(w)).collect();
    let kind = cfg.optimizer_kind();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut lr = cfg.learning_rate;
    let mut log = TrainLog::default();
    let mut best: Option<(f64, usize, Vec<u8>)> = None;
    let mut recent: Vec<f64> = Vec::new();

    for epoch in 1..=cfg.epochs {
        let start = Instant::now();
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch = chunk
                .iter()
                .map(|&i| {
                    let seq = &train_set[i];
                    let size = seq.frames[0].height().min(seq.frames[0].width());
                    let crop_seed: u64 = rng.random();
                    if cfg.crop < size {
                        random_crop_sequence(seq, cfg.crop, crop_seed).map(|(s, _)| s)
                    } else {
                        Ok(seq.clone())
                    }
                })
                .collect::<Result<Vec<_>>>()?;
            let loss = sequence_loss(model, &batch, &weights, cfg.loss_frames)?;
            let value = loss.item()?.as_f64();
            recent.push(value);
            if recent.len() > 10 {
                recent.remove(0);
            }
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss { epoch, batch: b, loss: value, recent });
            }
            loss.backward()?;
            model.store_mut().optimizer_step(kind, lr)?;
            loss_sum += value;
            batches += 1;
        }
        let val_miou = if cfg.validate && !validation_set.is_empty() {
            Some(evaluate(model, validation_set, cfg.batch_size)?.miou()?)
        } else {
            None
        };
        let record = EpochRecord { epoch, loss: loss_sum / batches as f64, val_miou, lr, seconds: start.elapsed().as_secs_f64() };
        on_epoch(&record);
        log.epochs.push(record);
        let score = val_miou.unwrap_or(f64::NEG_INFINITY);
        if best.as_ref().is_none_or(|(s, _, _)| score > *s || val_miou.is_none()) {
            best = Some((score, epoch, encode_records(&model_records(model, true))));
        }
        lr *= cfg.lr_decay;
    }
    let (_, best_epoch, best_checkpoint) = match best {
        Some(b) => b,
        None => (f64::NEG_INFINITY, 0, encode_records(&model_records(model, true))),
    };
    Ok(TrainOutcome { log, best_checkpoint, best_epoch, class_weights })
}
