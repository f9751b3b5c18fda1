//! Procedural scenes for smoke tests and small training experiments.
//!
//! A scene is a grid of square cells. Each cell is Background or holds one
//! object of class 1..=6 drawn as a square inset by `margin` pixels. The
//! layout stays fixed over the frames of a scene; only sensor noise
//! changes, and objects may be hidden from both inputs for single frames
//! while the ground truth keeps them.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{LabelMap, LbevImage, NUM_CLASSES};
use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticConfig {
    pub size: usize,
    pub cell: usize,
    pub margin: usize,
    pub frames_per_scene: usize,
    /// Chance that a cell is empty.
    pub background_prob: f64,
    /// Chance, per object and frame, that the object is missing from the
    /// inputs.
    pub occlusion_prob: f64,
    /// Uniform noise amplitude on LBEV bytes.
    pub noise: u8,
    /// Classes an object may take, drawn uniformly.
    pub lane_classes: Vec<u8>,
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            size: 32,
            cell: 16,
            margin: 2,
            frames_per_scene: 4,
            background_prob: 0.3,
            occlusion_prob: 0.0,
            noise: 8,
            lane_classes: (1..NUM_CLASSES as u8).collect(),
        }
    }
}

/// Mean LBEV bytes (intensity, height, spread) for a class.
pub fn class_signature(class: u8) -> [u8; 3] {
    match class {
        0 => [25, 90, 5],
        6 => [60 + 25 * 6, 190, 40],
        k => [60 + 25 * k, 100, 15],
    }
}

fn noisy(rng: &mut ChaCha8Rng, v: u8, amp: u8) -> u8 {
    if amp == 0 {
        return v;
    }
    let d = rng.random_range(-(amp as i16)..=amp as i16);
    (v as i16 + d).clamp(0, 255) as u8
}

/// One scene as `frames_per_scene` samples with ids `first_id..`.
pub fn synthetic_scene(cfg: &SyntheticConfig, first_id: u64, rng: &mut ChaCha8Rng) -> Result<Vec<Sample>> {
    if cfg.cell == 0 || cfg.size == 0 || !cfg.size.is_multiple_of(cfg.cell) || 2 * cfg.margin >= cfg.cell {
        return Err(Error::invalid("synthetic_scene", format!("size {} / cell {} / margin {}", cfg.size, cfg.cell, cfg.margin)));
    }
    if cfg.lane_classes.is_empty() || cfg.lane_classes.iter().any(|&c| c == 0 || c as usize >= NUM_CLASSES) {
        return Err(Error::invalid("synthetic_scene", format!("lane classes {:?}", cfg.lane_classes)));
    }
    let n = cfg.size / cfg.cell;
    let layout: Vec<u8> = (0..n * n)
        .map(|_| if rng.random_bool(cfg.background_prob) { 0 } else { cfg.lane_classes[rng.random_range(0..cfg.lane_classes.len())] })
        .collect();
    let class_at = |r: usize, c: usize| -> (usize, u8) {
        let idx = (r / cfg.cell) * n + c / cfg.cell;
        let (ir, ic) = (r % cfg.cell, c % cfg.cell);
        let inside = ir >= cfg.margin && ir < cfg.cell - cfg.margin && ic >= cfg.margin && ic < cfg.cell - cfg.margin;
        (idx, if inside { layout[idx] } else { 0 })
    };
    let mut frames = Vec::with_capacity(cfg.frames_per_scene);
    for t in 0..cfg.frames_per_scene {
        let id = first_id + t as u64;
        let hidden: Vec<bool> = (0..n * n).map(|_| cfg.occlusion_prob > 0.0 && rng.random_bool(cfg.occlusion_prob)).collect();
        let mut lbev = LbevImage::zeros(id, cfg.size, cfg.size);
        let mut creg = LabelMap::filled(cfg.size, cfg.size, 0);
        let mut gt = LabelMap::filled(cfg.size, cfg.size, 0);
        for r in 0..cfg.size {
            for c in 0..cfg.size {
                let (cell, truth) = class_at(r, c);
                gt.set(r, c, truth);
                let seen = if hidden[cell] { 0 } else { truth };
                let sig = class_signature(seen);
                for (ch, &v) in sig.iter().enumerate() {
                    lbev.set(r, c, ch, noisy(rng, v, cfg.noise));
                }
                creg.set(r, c, if seen == 6 { 0 } else { seen });
            }
        }
        frames.push(Sample::new(id, lbev, creg, gt)?);
    }
    Ok(frames)
}

/// `scenes` independent scenes. Ids skip one value between scenes so that
/// temporal windows never span two scenes.
pub fn synthetic_dataset(cfg: &SyntheticConfig, scenes: usize, seed: u64) -> Result<Vec<Sample>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(scenes * cfg.frames_per_scene);
    for s in 0..scenes {
        let first = 1 + (s * (cfg.frames_per_scene + 1)) as u64;
        out.extend(synthetic_scene(cfg, first, &mut rng)?);
    }
    Ok(out)
}
