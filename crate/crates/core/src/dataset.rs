//! Aligned LIDAR/camera/label samples, rotation augmentation, temporal
//! windows and training crops.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::bev::{LabelMap, LbevImage, C_REGION_CLASSES, GRID_SIZE, NUM_CLASSES};
use crate::error::{Error, Result};

/// Frames held out for testing.
pub const TEST_IDS: RangeInclusive<u64> = 81..=148;
pub const MAX_ROTATION_DEG: i32 = 20;

pub const LBEV_DIR: &str = "lbev";
pub const CREGION_DIR: &str = "cregion";
pub const GT_DIR: &str = "gt";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub frame_id: u64,
    /// 0 for original frames.
    pub rotation_deg: i32,
    pub lbev: LbevImage,
    /// Camera-derived classes 0..6.
    pub c_region: LabelMap,
    /// Ground truth classes 0..7.
    pub gt: LabelMap,
}

impl Sample {
    pub fn new(frame_id: u64, lbev: LbevImage, c_region: LabelMap, gt: LabelMap) -> Result<Self> {
        let s = Self { frame_id, rotation_deg: 0, lbev, c_region, gt };
        s.validate()?;
        Ok(s)
    }

    pub fn height(&self) -> usize {
        self.lbev.height
    }

    pub fn width(&self) -> usize {
        self.lbev.width
    }

    pub fn validate(&self) -> Result<()> {
        let (h, w) = (self.lbev.height, self.lbev.width);
        for (name, m) in [("c_region", &self.c_region), ("gt", &self.gt)] {
            if (m.height, m.width) != (h, w) {
                return Err(Error::Dataset(format!(
                    "frame {}: {name} is {}x{}, lbev is {h}x{w}",
                    self.frame_id, m.height, m.width
                )));
            }
        }
        self.c_region.validate(C_REGION_CLASSES)?;
        self.gt.validate(NUM_CLASSES)
    }

    /// File stem: `0081` or `0081_r+05`.
    pub fn key(&self) -> String {
        sample_key(self.frame_id, self.rotation_deg)
    }

    pub fn save(&self, root: &Path) -> Result<()> {
        let name = format!("{}.png", self.key());
        self.lbev.save_png(&root.join(LBEV_DIR).join(&name))?;
        self.c_region.save_png(&root.join(CREGION_DIR).join(&name))?;
        self.gt.save_png(&root.join(GT_DIR).join(&name))
    }
}

pub fn sample_key(frame_id: u64, rotation_deg: i32) -> String {
    if rotation_deg == 0 {
        format!("{frame_id:04}")
    } else {
        format!("{frame_id:04}_r{rotation_deg:+03}")
    }
}

/// Inverse of [`sample_key`].
pub fn parse_sample_key(stem: &str) -> Option<(u64, i32)> {
    let (id, rot) = match stem.split_once("_r") {
        Some((id, rot)) => (id, rot.parse::<i32>().ok()?),
        None => (stem, 0),
    };
    if id.is_empty() || !id.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    Some((id.parse().ok()?, rot))
}

fn list_keys(dir: &Path) -> Result<BTreeMap<(u64, i32), PathBuf>> {
    let mut out = BTreeMap::new();
    if !dir.exists() {
        return Ok(out);
    }
    for entry in fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("png") {
            continue;
        }
        if let Some(key) = path.file_stem().and_then(|s| s.to_str()).and_then(parse_sample_key) {
            out.insert(key, path);
        }
    }
    Ok(out)
}

fn check_size(path: &Path, h: usize, w: usize, size: usize) -> Result<()> {
    if (h, w) != (size, size) {
        return Err(Error::Dataset(format!("{} is {h}x{w}, expected {size}x{size}", path.display())));
    }
    Ok(())
}

/// Loads full-size (400 x 400) samples from `root/{lbev,cregion,gt}`.
pub fn load_dataset(root: &Path) -> Result<Vec<Sample>> {
    load_dataset_sized(root, GRID_SIZE)
}

/// Like [`load_dataset`] with a configurable square frame size.
pub fn load_dataset_sized(root: &Path, frame_size: usize) -> Result<Vec<Sample>> {
    load_impl(root, frame_size, true)
}

/// Loads LBEV and C-Region rasters only; `gt` is filled with Background
/// unless a ground-truth file happens to exist.
pub fn load_inputs(root: &Path, frame_size: usize) -> Result<Vec<Sample>> {
    load_impl(root, frame_size, false)
}

fn load_impl(root: &Path, size: usize, require_gt: bool) -> Result<Vec<Sample>> {
    let lbev = list_keys(&root.join(LBEV_DIR))?;
    let creg = list_keys(&root.join(CREGION_DIR))?;
    let gt = list_keys(&root.join(GT_DIR))?;
    let mut all: BTreeSet<(u64, i32)> = lbev.keys().chain(creg.keys()).copied().collect();
    if require_gt {
        all.extend(gt.keys().copied());
    }
    let mut missing = Vec::new();
    for key in &all {
        let mut dirs = Vec::new();
        if !lbev.contains_key(key) {
            dirs.push(LBEV_DIR);
        }
        if !creg.contains_key(key) {
            dirs.push(CREGION_DIR);
        }
        if require_gt && !gt.contains_key(key) {
            dirs.push(GT_DIR);
        }
        if !dirs.is_empty() {
            missing.push(format!("{} (missing {})", sample_key(key.0, key.1), dirs.join(", ")));
        }
    }
    if !missing.is_empty() {
        return Err(Error::Dataset(format!("incomplete samples: {}", missing.join("; "))));
    }
    let mut out = Vec::with_capacity(all.len());
    for key in all {
        let (frame_id, rotation_deg) = key;
        let lpath = &lbev[&key];
        let img = LbevImage::load_png(lpath, frame_id)?;
        check_size(lpath, img.height, img.width, size)?;
        let cpath = &creg[&key];
        let c_region = LabelMap::load_png(cpath)?;
        check_size(cpath, c_region.height, c_region.width, size)?;
        let gt_map = match gt.get(&key) {
            Some(p) => {
                let m = LabelMap::load_png(p)?;
                check_size(p, m.height, m.width, size)?;
                m
            }
            None => LabelMap::filled(size, size, 0),
        };
        let sample = Sample { frame_id, rotation_deg, lbev: img, c_region, gt: gt_map };
        sample.validate().map_err(|e| Error::Dataset(format!("{}: {e}", sample.key())))?;
        out.push(sample);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct Rotation {
    cos: f64,
    sin: f64,
}

impl Rotation {
    fn degrees(deg: f64) -> Self {
        // Quarter turns are exact so that four of them compose to identity.
        let quarter = deg / 90.0;
        if quarter.fract() == 0.0 {
            let (cos, sin) = match (quarter as i64).rem_euclid(4) {
                0 => (1.0, 0.0),
                1 => (0.0, 1.0),
                2 => (-1.0, 0.0),
                _ => (0.0, -1.0),
            };
            return Self { cos, sin };
        }
        let r = deg.to_radians();
        Self { cos: r.cos(), sin: r.sin() }
    }

    /// Source coordinates `(x, y)` for output pixel `(row, col)`. Positive
    /// angles turn the picture counterclockwise as displayed.
    fn source(&self, row: usize, col: usize, h: usize, w: usize) -> (f64, f64) {
        let (cx, cy) = ((w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0);
        let (dx, dy) = (col as f64 - cx, row as f64 - cy);
        (cx + self.cos * dx - self.sin * dy, cy + self.sin * dx + self.cos * dy)
    }
}

fn rotate_labels(map: &LabelMap, rot: Rotation) -> LabelMap {
    let (h, w) = (map.height, map.width);
    let mut out = LabelMap::filled(h, w, 0);
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = rot.source(r, c, h, w);
            let (x, y) = (sx.round(), sy.round());
            if x >= 0.0 && y >= 0.0 && (x as usize) < w && (y as usize) < h {
                out.set(r, c, map.get(y as usize, x as usize));
            }
        }
    }
    out
}

fn rotate_lbev(img: &LbevImage, rot: Rotation) -> LbevImage {
    let (h, w) = (img.height, img.width);
    let mut out = LbevImage::zeros(img.frame_id, h, w);
    let at = |x: i64, y: i64, ch: usize| -> f64 {
        if x < 0 || y < 0 || x >= w as i64 || y >= h as i64 {
            0.0
        } else {
            img.get(y as usize, x as usize, ch) as f64
        }
    };
    for r in 0..h {
        for c in 0..w {
            let (sx, sy) = rot.source(r, c, h, w);
            if sx <= -1.0 || sy <= -1.0 || sx >= w as f64 || sy >= h as f64 {
                continue;
            }
            let (x0, y0) = (sx.floor(), sy.floor());
            let (fx, fy) = (sx - x0, sy - y0);
            let (x0, y0) = (x0 as i64, y0 as i64);
            for ch in 0..3 {
                let top = at(x0, y0, ch) * (1.0 - fx) + at(x0 + 1, y0, ch) * fx;
                let bot = at(x0, y0 + 1, ch) * (1.0 - fx) + at(x0 + 1, y0 + 1, ch) * fx;
                out.set(r, c, ch, (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8);
            }
        }
    }
    out
}

/// Rotation by an arbitrary angle; used for the augmentation protocol and
/// by tests that need angles outside it.
pub(crate) fn rotate_any(sample: &Sample, degrees: f64) -> Sample {
    let rot = Rotation::degrees(degrees);
    Sample {
        frame_id: sample.frame_id,
        rotation_deg: sample.rotation_deg + degrees.round() as i32,
        lbev: rotate_lbev(&sample.lbev, rot),
        c_region: rotate_labels(&sample.c_region, rot),
        gt: rotate_labels(&sample.gt, rot),
    }
}

/// Rotates about the image center: bilinear for LBEV, nearest-neighbor for
/// label maps, zero fill outside the source.
pub fn rotate_augment(sample: &Sample, degrees: i32) -> Result<Sample> {
    if degrees == 0 || degrees.abs() > MAX_ROTATION_DEG {
        return Err(Error::invalid("rotate_augment", format!("angle {degrees} not in [-20, 20] \\ {{0}}")));
    }
    Ok(rotate_any(sample, degrees as f64))
}

/// The 40 augmentation angles, in output order.
pub fn augmentation_angles() -> impl Iterator<Item = i32> {
    (1..=MAX_ROTATION_DEG).flat_map(|d| [d, -d])
}

/// Forty rotated copies (+-1 .. +-20 degrees) of every input sample.
pub fn expand_training_set(samples: &[Sample]) -> Result<Vec<Sample>> {
    let mut out = Vec::with_capacity(samples.len() * 40);
    for s in samples {
        for deg in augmentation_angles() {
            out.push(rotate_augment(s, deg)?);
        }
    }
    Ok(out)
}

/// Indices into a sample list.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub validation: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    /// Originals outside `test_ids` form validation; their rotated copies
    /// form training. When no rotated copies exist the originals are also
    /// used for training. Anything derived from a test id other than the
    /// original frame is dropped.
    pub fn from_samples(samples: &[Sample], test_ids: &RangeInclusive<u64>) -> Self {
        let mut split = DatasetSplit::default();
        for (i, s) in samples.iter().enumerate() {
            match (test_ids.contains(&s.frame_id), s.rotation_deg == 0) {
                (true, true) => split.test.push(i),
                (true, false) => {}
                (false, true) => split.validation.push(i),
                (false, false) => split.train.push(i),
            }
        }
        if split.train.is_empty() {
            split.train = split.validation.clone();
        }
        split
    }

    /// Text form: `[train]`, `[validation]`, `[test]` sections with one
    /// sample key per line.
    pub fn to_text(&self, samples: &[Sample]) -> String {
        let mut out = String::new();
        for (name, idx) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            writeln!(out, "[{name}]").unwrap();
            for &i in idx {
                writeln!(out, "{}", samples[i].key()).unwrap();
            }
        }
        out
    }

    pub fn from_text(text: &str, samples: &[Sample]) -> Result<Self> {
        let index: BTreeMap<String, usize> = samples.iter().enumerate().map(|(i, s)| (s.key(), i)).collect();
        let mut split = DatasetSplit::default();
        let mut current: Option<&mut Vec<usize>> = None;
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            match line {
                "[train]" => current = Some(&mut split.train),
                "[validation]" => current = Some(&mut split.validation),
                "[test]" => current = Some(&mut split.test),
                key => {
                    let list = current
                        .as_deref_mut()
                        .ok_or_else(|| Error::Dataset(format!("split line {}: id before any section", lineno + 1)))?;
                    let i = index
                        .get(key)
                        .ok_or_else(|| Error::Dataset(format!("split line {}: unknown sample `{key}`", lineno + 1)))?;
                    list.push(*i);
                }
            }
        }
        Ok(split)
    }
}

/// Consecutive frames sharing one rotation angle.
#[derive(Debug, Clone)]
pub struct SequenceSample {
    pub frames: Vec<Arc<Sample>>,
    pub rotation_deg: i32,
}

impl SequenceSample {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn frame_ids(&self) -> Vec<u64> {
        self.frames.iter().map(|f| f.frame_id).collect()
    }
}

/// Stride-1 windows of `time_step` consecutive ids within each rotation
/// angle. Windows spanning an id gap are skipped. Output is ordered by
/// angle, then first id.
pub fn make_sequences(samples: &[Arc<Sample>], time_step: usize) -> Result<Vec<SequenceSample>> {
    if time_step == 0 {
        return Err(Error::invalid("make_sequences", "time_step must be at least 1"));
    }
    let mut groups: BTreeMap<i32, Vec<Arc<Sample>>> = BTreeMap::new();
    for s in samples {
        groups.entry(s.rotation_deg).or_default().push(s.clone());
    }
    let mut out = Vec::new();
    for (rotation_deg, mut frames) in groups {
        frames.sort_by_key(|f| f.frame_id);
        frames.dedup_by_key(|f| f.frame_id);
        for win in frames.windows(time_step) {
            if win.windows(2).all(|p| p[1].frame_id == p[0].frame_id + 1) {
                out.push(SequenceSample { frames: win.to_vec(), rotation_deg });
            }
        }
    }
    Ok(out)
}

pub fn crop_sample(s: &Sample, top: usize, left: usize, size: usize) -> Result<Sample> {
    if top + size > s.height() || left + size > s.width() {
        return Err(Error::invalid(
            "crop",
            format!("{size}x{size} at ({top}, {left}) exceeds {}x{}", s.height(), s.width()),
        ));
    }
    let mut lbev = LbevImage::zeros(s.frame_id, size, size);
    let mut c_region = LabelMap::filled(size, size, 0);
    let mut gt = LabelMap::filled(size, size, 0);
    for r in 0..size {
        let src = ((top + r) * s.width() + left) * 3;
        lbev.data[r * size * 3..(r + 1) * size * 3].copy_from_slice(&s.lbev.data[src..src + size * 3]);
        let src = (top + r) * s.width() + left;
        c_region.data[r * size..(r + 1) * size].copy_from_slice(&s.c_region.data[src..src + size]);
        gt.data[r * size..(r + 1) * size].copy_from_slice(&s.gt.data[src..src + size]);
    }
    Ok(Sample { frame_id: s.frame_id, rotation_deg: s.rotation_deg, lbev, c_region, gt })
}

/// Crops every frame at one offset drawn from `seed`. Returns the crop and
/// its `(top, left)` offset.
pub fn random_crop_sequence(seq: &SequenceSample, size: usize, seed: u64) -> Result<(SequenceSample, (usize, usize))> {
    let first = seq.frames.first().ok_or_else(|| Error::invalid("random_crop_sequence", "empty sequence"))?;
    let (h, w) = (first.height(), first.width());
    if size == 0 || size > h || size > w {
        return Err(Error::invalid("random_crop_sequence", format!("crop {size} does not fit {h}x{w}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let top = rng.random_range(0..=h - size);
    let left = rng.random_range(0..=w - size);
    let frames = seq
        .frames
        .iter()
        .map(|f| crop_sample(f, top, left, size).map(Arc::new))
        .collect::<Result<_>>()?;
    Ok((SequenceSample { frames, rotation_deg: seq.rotation_deg }, (top, left)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};

    fn block_sample(id: u64, size: usize, seed: u64) -> Sample {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let block = 8;
        let nb = size.div_ceil(block);
        let classes: Vec<u8> = (0..nb * nb).map(|_| rng.random_range(0..7)).collect();
        let mut gt = LabelMap::filled(size, size, 0);
        let mut lbev = LbevImage::zeros(id, size, size);
        for r in 0..size {
            for c in 0..size {
                let k = classes[(r / block) * nb + c / block];
                gt.set(r, c, k);
                for ch in 0..3 {
                    lbev.set(r, c, ch, rng.random());
                }
            }
        }
        let c_region = LabelMap::new(size, size, gt.data.iter().map(|&k| if k == 6 { 0 } else { k }).collect()).unwrap();
        Sample::new(id, lbev, c_region, gt).unwrap()
    }

    #[test]
    fn keys_round_trip() {
        assert_eq!(sample_key(81, 0), "0081");
        assert_eq!(sample_key(7, 5), "0007_r+05");
        assert_eq!(sample_key(7, -20), "0007_r-20");
        for (id, rot) in [(0, 0), (81, 5), (123456, -20)] {
            assert_eq!(parse_sample_key(&sample_key(id, rot)), Some((id, rot)));
        }
        assert_eq!(parse_sample_key("abc"), None);
    }

    #[test]
    fn empty_directory_loads_nothing() {
        let dir = tempfile::tempdir().unwrap();
        assert!(load_dataset(dir.path()).unwrap().is_empty());
    }

    #[test]
    fn loads_triples_in_id_order() {
        let dir = tempfile::tempdir().unwrap();
        for id in [3, 1, 2] {
            block_sample(id, 16, id).save(dir.path()).unwrap();
        }
        let samples = load_dataset_sized(dir.path(), 16).unwrap();
        assert_eq!(samples.iter().map(|s| s.frame_id).collect::<Vec<_>>(), vec![1, 2, 3]);
        assert_eq!(samples[1], block_sample(2, 16, 2));
        assert!(load_dataset(dir.path()).is_err(), "wrong size is rejected");
    }

    #[test]
    fn missing_counterpart_names_id() {
        let dir = tempfile::tempdir().unwrap();
        for id in [1, 2] {
            block_sample(id, 16, id).save(dir.path()).unwrap();
        }
        fs::remove_file(dir.path().join("cregion/0002.png")).unwrap();
        let err = load_dataset_sized(dir.path(), 16).unwrap_err().to_string();
        assert!(err.contains("0002") && err.contains("cregion"), "{err}");
        assert!(!err.contains("0001"));
    }

    #[test]
    fn out_of_range_labels_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let mut s = block_sample(1, 16, 1);
        s.c_region.data[0] = 6;
        s.save(dir.path()).unwrap();
        assert!(load_dataset_sized(dir.path(), 16).is_err());
    }

    #[test]
    fn inputs_load_without_ground_truth() {
        let dir = tempfile::tempdir().unwrap();
        block_sample(4, 16, 4).save(dir.path()).unwrap();
        fs::remove_dir_all(dir.path().join(GT_DIR)).unwrap();
        let s = load_inputs(dir.path(), 16).unwrap();
        assert_eq!(s.len(), 1);
        assert!(s[0].gt.data.iter().all(|&v| v == 0));
    }

    #[test]
    fn rotation_angle_contract() {
        let s = block_sample(1, 16, 1);
        assert!(rotate_augment(&s, 0).is_err());
        assert!(rotate_augment(&s, 21).is_err());
        assert!(rotate_augment(&s, -21).is_err());
        let r = rotate_augment(&s, -20).unwrap();
        assert_eq!((r.frame_id, r.rotation_deg), (1, -20));
    }

    #[test]
    fn one_degree_round_trip_recovers_labels() {
        let s = block_sample(1, 400, 7);
        let back = rotate_any(&rotate_augment(&s, 1).unwrap(), -1.0);
        let same = back.gt.data.iter().zip(&s.gt.data).filter(|(a, b)| a == b).count();
        let frac = same as f64 / s.gt.data.len() as f64;
        assert!(frac >= 0.97, "recovered {frac}");
    }

    #[test]
    fn four_quarter_turns_are_identity() {
        for size in [16, 17] {
            let s = block_sample(1, size, 3);
            let mut r = s.clone();
            for _ in 0..4 {
                r = rotate_any(&r, 90.0);
            }
            assert_eq!(r.lbev, s.lbev);
            assert_eq!(r.gt, s.gt);
            assert_eq!(r.c_region, s.c_region);
        }
    }

    #[test]
    fn nearest_neighbor_never_invents_classes() {
        let mut s = block_sample(1, 40, 2);
        s.gt.data.iter_mut().for_each(|v| *v = if *v % 2 == 0 { 0 } else { 2 });
        for deg in augmentation_angles() {
            let r = rotate_augment(&s, deg).unwrap();
            assert!(r.gt.data.iter().all(|&v| v == 0 || v == 2));
        }
    }

    #[test]
    fn expansion_gives_forty_distinct_angles() {
        let s = block_sample(5, 8, 5);
        let out = expand_training_set(std::slice::from_ref(&s)).unwrap();
        assert_eq!(out.len(), 40);
        let angles: BTreeSet<i32> = out.iter().map(|s| s.rotation_deg).collect();
        assert_eq!(angles.len(), 40);
        assert!(angles.iter().all(|&a| a != 0 && a.abs() <= 20));
        assert!(out.iter().all(|o| o.frame_id == 5));
    }

    fn arcs(ids: &[u64], rot: i32) -> Vec<Arc<Sample>> {
        ids.iter()
            .map(|&id| {
                let mut s = block_sample(id, 8, id);
                s.rotation_deg = rot;
                Arc::new(s)
            })
            .collect()
    }

    #[test]
    fn sequence_windows() {
        let seven = arcs(&[1, 2, 3, 4, 5, 6, 7], 0);
        assert_eq!(make_sequences(&seven, 4).unwrap().len(), 4);
        assert_eq!(make_sequences(&seven, 1).unwrap().len(), 7);
        let gap = arcs(&[1, 2, 4, 5], 0);
        let seqs = make_sequences(&gap, 2).unwrap();
        let ids: Vec<Vec<u64>> = seqs.iter().map(|s| s.frame_ids()).collect();
        assert_eq!(ids, vec![vec![1, 2], vec![4, 5]]);
        assert!(make_sequences(&gap, 0).is_err());
    }

    #[test]
    fn sequences_never_mix_angles() {
        let mut all = arcs(&[1, 2, 3], 0);
        all.extend(arcs(&[1, 2, 3], 5));
        all.extend(arcs(&[2, 3], -5));
        let seqs = make_sequences(&all, 2).unwrap();
        assert_eq!(seqs.len(), 5);
        for s in &seqs {
            assert!(s.frames.iter().all(|f| f.rotation_deg == s.rotation_deg));
        }
    }

    #[test]
    fn crop_alignment_and_determinism() {
        let seq = SequenceSample { frames: arcs(&[1, 2], 0), rotation_deg: 0 };
        let (a, off) = random_crop_sequence(&seq, 5, 42).unwrap();
        let (b, off2) = random_crop_sequence(&seq, 5, 42).unwrap();
        assert_eq!(off, off2);
        assert_eq!(a.frames[1].gt, b.frames[1].gt);
        let (dr, dc) = off;
        for (crop, orig) in a.frames.iter().zip(&seq.frames) {
            for r in 0..5 {
                for c in 0..5 {
                    assert_eq!(crop.gt.get(r, c), orig.gt.get(r + dr, c + dc));
                    assert_eq!(crop.c_region.get(r, c), orig.c_region.get(r + dr, c + dc));
                    assert_eq!(crop.lbev.get(r, c, 2), orig.lbev.get(r + dr, c + dc, 2));
                }
            }
        }
        let (full, off) = random_crop_sequence(&seq, 8, 1).unwrap();
        assert_eq!(off, (0, 0));
        assert_eq!(*full.frames[0], *seq.frames[0]);
        assert!(random_crop_sequence(&seq, 9, 1).is_err());
    }

    #[test]
    fn split_keeps_test_ids_out() {
        let mut samples: Vec<Sample> = Vec::new();
        for id in [80, 81, 148, 149] {
            let s = block_sample(id, 8, id);
            samples.push(s.clone());
            samples.push(rotate_augment(&s, 3).unwrap());
        }
        let split = DatasetSplit::from_samples(&samples, &TEST_IDS);
        let ids = |idx: &[usize]| idx.iter().map(|&i| samples[i].frame_id).collect::<Vec<_>>();
        assert_eq!(ids(&split.test), vec![81, 148]);
        assert_eq!(ids(&split.validation), vec![80, 149]);
        assert_eq!(ids(&split.train), vec![80, 149]);
        assert!(split.train.iter().all(|&i| samples[i].rotation_deg != 0));

        let text = split.to_text(&samples);
        assert!(text.contains("[test]\n0081\n0148\n"));
        assert_eq!(DatasetSplit::from_text(&text, &samples).unwrap(), split);
        assert!(DatasetSplit::from_text("0001\n", &samples).is_err());
    }

    proptest! {
        #[test]
        fn windows_are_consecutive(ids in proptest::collection::btree_set(0u64..40, 0..20), t in 1usize..5) {
            let ids: Vec<u64> = ids.into_iter().collect();
            let seqs = make_sequences(&arcs(&ids, 0), t).unwrap();
            let expected = ids.iter().filter(|&&s| (0..t as u64).all(|k| ids.contains(&(s + k)))).count();
            prop_assert_eq!(seqs.len(), expected);
            for s in seqs {
                prop_assert_eq!(s.len(), t);
                let f = s.frame_ids();
                prop_assert!(f.windows(2).all(|p| p[1] == p[0] + 1));
            }
        }
    }
}
