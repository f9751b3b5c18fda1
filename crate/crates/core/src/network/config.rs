use std::fmt;
use std::str::FromStr;

use crate::bev::NUM_CLASSES;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ModelMode {
    #[default]
    FusionLane,
    /// ASPP output goes straight to the decoder; no recurrent cell.
    WithoutLstm,
}

impl fmt::Display for ModelMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelMode::FusionLane => "fusionlane",
            ModelMode::WithoutLstm => "without_lstm",
        })
    }
}

impl FromStr for ModelMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fusionlane" => Ok(ModelMode::FusionLane),
            "without_lstm" => Ok(ModelMode::WithoutLstm),
            other => Err(Error::Config(format!("unknown mode `{other}` (fusionlane|without_lstm)"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StageConfig {
    pub l_out_channels: usize,
    pub c_out_channels: usize,
    pub residual_blocks: usize,
}

impl StageConfig {
    pub fn fused_channels(&self) -> usize {
        self.l_out_channels + self.c_out_channels
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderConfig {
    pub stages: Vec<StageConfig>,
    pub width_multiplier: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        let stage = |l, c, b| StageConfig { l_out_channels: l, c_out_channels: c, residual_blocks: b };
        Self {
            stages: vec![stage(48, 16, 1), stage(96, 32, 2), stage(192, 64, 4), stage(768, 256, 1)],
            width_multiplier: 1.0,
        }
    }
}

impl EncoderConfig {
    /// Stage widths after applying the multiplier. The C-branch width is
    /// scaled and rounded; the L-branch keeps exactly three times that.
    pub fn effective_stages(&self) -> Vec<StageConfig> {
        self.stages
            .iter()
            .map(|s| {
                let c = ((s.c_out_channels as f64 * self.width_multiplier).round() as usize).max(1);
                StageConfig { l_out_channels: 3 * c, c_out_channels: c, residual_blocks: s.residual_blocks }
            })
            .collect()
    }

    pub fn output_channels(&self) -> usize {
        self.effective_stages().last().map_or(0, StageConfig::fused_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.len() != 4 {
            return Err(Error::Config(format!("encoder needs 4 stages, got {}", self.stages.len())));
        }
        if !(self.width_multiplier > 0.0 && self.width_multiplier.is_finite()) {
            return Err(Error::Config("width_multiplier must be positive".into()));
        }
        for (i, s) in self.stages.iter().enumerate() {
            if s.c_out_channels == 0 || s.c_out_channels * 3 != s.l_out_channels {
                return Err(Error::Config(format!(
                    "stage {i}: L width {} must be three times C width {}",
                    s.l_out_channels, s.c_out_channels
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub aspp_channels: usize,
    pub aspp_rates: [usize; 3],
    /// ASPP projection width, also the recurrent cell width.
    pub hidden_channels: usize,
    pub lstm_layers: usize,
    pub lstm_kernel: usize,
    /// `H = o * tanh(C)` instead of `H = o * C`.
    pub cell_tanh: bool,
    pub low_level_channels: usize,
    pub decoder_channels: usize,
    pub image_skip_channels: usize,
    pub num_classes: usize,
    /// Spatial size the peephole weights are allocated for.
    pub input_size: usize,
    pub mode: ModelMode,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            aspp_channels: 256,
            aspp_rates: [6, 12, 18],
            hidden_channels: 64,
            lstm_layers: 1,
            lstm_kernel: 3,
            cell_tanh: false,
            low_level_channels: 48,
            decoder_channels: 64,
            image_skip_channels: 8,
            num_classes: NUM_CLASSES,
            input_size: 321,
            mode: ModelMode::FusionLane,
        }
    }
}

impl ModelConfig {
    /// Full architecture with every width scaled by `width_multiplier`.
    pub fn scaled(width_multiplier: f64) -> Self {
        let s = |v: usize| ((v as f64 * width_multiplier).round() as usize).max(1);
        let d = Self::default();
        Self {
            encoder: EncoderConfig { width_multiplier, ..d.encoder },
            aspp_channels: s(d.aspp_channels),
            hidden_channels: s(d.hidden_channels),
            low_level_channels: s(d.low_level_channels),
            decoder_channels: s(d.decoder_channels),
            image_skip_channels: s(d.image_skip_channels),
            ..d
        }
    }

    /// A few-thousand-parameter model for small synthetic frames.
    pub fn toy(input_size: usize) -> Self {
        let stage = |c, b| StageConfig { l_out_channels: 3 * c, c_out_channels: c, residual_blocks: b };
        Self {
            encoder: EncoderConfig {
                stages: vec![stage(2, 1), stage(4, 1), stage(4, 1), stage(8, 1)],
                width_multiplier: 1.0,
            },
            aspp_channels: 8,
            aspp_rates: [1, 2, 3],
            hidden_channels: 8,
            low_level_channels: 4,
            decoder_channels: 8,
            image_skip_channels: 4,
            input_size,
            ..Self::default()
        }
    }

    pub fn with_mode(mut self, mode: ModelMode) -> Self {
        self.mode = mode;
        self
    }

    /// Spatial size of the encoder output for an `s x s` input.
    pub fn high_size(s: usize) -> usize {
        (0..4).fold(s, |v, _| v.div_ceil(2))
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        let positive = [
            ("aspp_channels", self.aspp_channels),
            ("hidden_channels", self.hidden_channels),
            ("lstm_kernel", self.lstm_kernel),
            ("low_level_channels", self.low_level_channels),
            ("decoder_channels", self.decoder_channels),
            ("image_skip_channels", self.image_skip_channels),
            ("num_classes", self.num_classes),
            ("input_size", self.input_size),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.aspp_rates.contains(&0) {
            return Err(Error::Config("ASPP rates must be positive".into()));
        }
        if self.mode == ModelMode::FusionLane && self.lstm_layers == 0 {
            return Err(Error::Config("fusionlane mode needs at least one LSTM layer".into()));
        }
        Ok(())
    }

    /// Flat numeric form for checkpoints.
    pub fn to_records(&self) -> Vec<(String, Vec<f64>)> {
        let mut out = Vec::new();
        for (i, s) in self.encoder.stages.iter().enumerate() {
            out.push((
                format!("encoder/stage{i}"),
                vec![s.l_out_channels as f64, s.c_out_channels as f64, s.residual_blocks as f64],
            ));
        }
        let u = |v: usize| vec![v as f64];
        out.extend([
            ("width_multiplier".to_string(), vec![self.encoder.width_multiplier]),
            ("aspp_channels".to_string(), u(self.aspp_channels)),
            ("aspp_rates".to_string(), self.aspp_rates.iter().map(|&r| r as f64).collect()),
            ("hidden_channels".to_string(), u(self.hidden_channels)),
            ("lstm_layers".to_string(), u(self.lstm_layers)),
            ("lstm_kernel".to_string(), u(self.lstm_kernel)),
            ("cell_tanh".to_string(), u(self.cell_tanh as usize)),
            ("low_level_channels".to_string(), u(self.low_level_channels)),
            ("decoder_channels".to_string(), u(self.decoder_channels)),
            ("image_skip_channels".to_string(), u(self.image_skip_channels)),
            ("num_classes".to_string(), u(self.num_classes)),
            ("input_size".to_string(), u(self.input_size)),
            ("mode".to_string(), u(matches!(self.mode, ModelMode::WithoutLstm) as usize)),
        ]);
        out
    }

    pub fn from_records(get: impl Fn(&str) -> Option<Vec<f64>>) -> Result<Self> {
        let need = |k: &str| get(k).ok_or_else(|| Error::Config(format!("missing model config `{k}`")));
        let one = |k: &str| -> Result<usize> {
            let v = need(k)?;
            match v.as_slice() {
                [x] if *x >= 0.0 && x.fract() == 0.0 => Ok(*x as usize),
                _ => Err(Error::Config(format!("bad value for `{k}`: {v:?}"))),
            }
        };
        let mut stages = Vec::new();
        for i in 0..4 {
            let v = need(&format!("encoder/stage{i}"))?;
            if v.len() != 3 {
                return Err(Error::Config(format!("bad stage {i} record")));
            }
            stages.push(StageConfig {
                l_out_channels: v[0] as usize,
                c_out_channels: v[1] as usize,
                residual_blocks: v[2] as usize,
            });
        }
        let rates = need("aspp_rates")?;
        if rates.len() != 3 {
            return Err(Error::Config("aspp_rates needs 3 values".into()));
        }
        let cfg = Self {
            encoder: EncoderConfig { stages, width_multiplier: need("width_multiplier")?[0] },
            aspp_channels: one("aspp_channels")?,
            aspp_rates: [rates[0] as usize, rates[1] as usize, rates[2] as usize],
            hidden_channels: one("hidden_channels")?,
            lstm_layers: one("lstm_layers")?,
            lstm_kernel: one("lstm_kernel")?,
            cell_tanh: one("cell_tanh")? != 0,
            low_level_channels: one("low_level_channels")?,
            decoder_channels: one("decoder_channels")?,
            image_skip_channels: one("image_skip_channels")?,
            num_classes: one("num_classes")?,
            input_size: one("input_size")?,
            mode: if one("mode")? == 0 { ModelMode::FusionLane } else { ModelMode::WithoutLstm },
        };
        cfg.validate()?;
        Ok(cfg)
    }
}
