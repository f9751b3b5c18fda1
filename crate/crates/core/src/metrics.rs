//! Confusion-matrix based segmentation scores.

use std::fmt::Write as _;

use crate::bev::{LabelMap, CLASS_NAMES, NUM_CLASSES};
use crate::error::{Error, Result};

/// `counts[i][j]`: pixels of true class `i` predicted as class `j`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
}

impl Default for ConfusionMatrix {
    fn default() -> Self {
        Self::new(NUM_CLASSES)
    }
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self { classes, counts: vec![0; classes * classes] }
    }

    /// Builds from a row-major square count table.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let k = rows.len();
        if rows.iter().any(|r| r.len() != k) {
            return Err(Error::shape("confusion matrix", "count table is not square"));
        }
        Ok(Self { classes: k, counts: rows.concat() })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn count(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Pixels whose true class is `i`.
    pub fn row_total(&self, i: usize) -> u64 {
        self.counts[i * self.classes..(i + 1) * self.classes].iter().sum()
    }

    /// Pixels predicted as class `j`.
    pub fn col_total(&self, j: usize) -> u64 {
        (0..self.classes).map(|i| self.count(i, j)).sum()
    }

    pub fn add_pair(&mut self, truth: u8, pred: u8) -> Result<()> {
        let k = self.classes;
        for v in [truth, pred] {
            if v as usize >= k {
                return Err(Error::LabelOutOfRange { value: v, classes: k as u8 });
            }
        }
        self.counts[truth as usize * k + pred as usize] += 1;
        Ok(())
    }

    pub fn accumulate_slices(&mut self, pred: &[u8], gt: &[u8]) -> Result<()> {
        if pred.len() != gt.len() {
            return Err(Error::shape("accumulate", format!("{} predictions for {} labels", pred.len(), gt.len())));
        }
        pred.iter().zip(gt).try_for_each(|(&p, &t)| self.add_pair(t, p))
    }

    pub fn accumulate(&mut self, pred: &LabelMap, gt: &LabelMap) -> Result<()> {
        if (pred.height, pred.width) != (gt.height, gt.width) {
            return Err(Error::shape(
                "accumulate",
                format!("prediction {}x{} vs ground truth {}x{}", pred.height, pred.width, gt.height, gt.width),
            ));
        }
        self.accumulate_slices(&pred.data, &gt.data)
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::shape("merge", "class counts differ"));
        }
        self.counts.iter_mut().zip(&other.counts).for_each(|(a, b)| *a += b);
        Ok(())
    }

    pub fn pixel_accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::invalid("pixel_accuracy", "empty confusion matrix"));
        }
        let trace: u64 = (0..self.classes).map(|i| self.count(i, i)).sum();
        Ok(trace as f64 / total as f64)
    }

    /// Intersection over union per class; `None` for classes absent from
    /// both ground truth and prediction.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.classes)
            .map(|i| {
                let nii = self.count(i, i);
                let denom = self.row_total(i) + self.col_total(i) - nii;
                (denom > 0).then(|| nii as f64 / denom as f64)
            })
            .collect()
    }

    /// Mean IOU over classes with a defined IOU.
    pub fn miou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::invalid("miou", "empty confusion matrix"));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// `metric,value` rows: one per class IOU, then MIOU and PixelAccuracy.
    /// Undefined IOUs are written as `NA`.
    pub fn report_csv(&self) -> Result<String> {
        let mut out = String::from("metric,value\n");
        for (i, iou) in self.iou_per_class().into_iter().enumerate() {
            let name = CLASS_NAMES.get(i).map(|s| s.to_string()).unwrap_or_else(|| format!("Class {i}"));
            match iou {
                Some(v) => writeln!(out, "{name},{v:.6}").unwrap(),
                None => writeln!(out, "{name},NA").unwrap(),
            }
        }
        writeln!(out, "MIOU,{:.6}", self.miou()?).unwrap();
        writeln!(out, "PixelAccuracy,{:.6}", self.pixel_accuracy()?).unwrap();
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::{prop_assert, prop_assert_eq, proptest};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_class() -> ConfusionMatrix {
        ConfusionMatrix::from_counts(&[vec![3, 1], vec![2, 4]]).unwrap()
    }

    #[test]
    fn hand_computed_two_class_values() {
        let cm = two_class();
        assert!((cm.pixel_accuracy().unwrap() - 0.7).abs() < 1e-12);
        let iou = cm.iou_per_class();
        assert!((iou[0].unwrap() - 0.5).abs() < 1e-12);
        assert!((iou[1].unwrap() - 4.0 / 7.0).abs() < 1e-12);
        assert!((cm.miou().unwrap() - (0.5 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn perfect_prediction() {
        let gt = LabelMap::new(2, 4, vec![0, 1, 2, 3, 4, 5, 6, 0]).unwrap();
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&gt, &gt).unwrap();
        assert_eq!(cm.pixel_accuracy().unwrap(), 1.0);
        assert_eq!(cm.miou().unwrap(), 1.0);
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(cm.count(i, j) > 0, i == j && cm.row_total(i) > 0);
            }
        }
    }

    #[test]
    fn single_class_degenerate() {
        let m = LabelMap::filled(3, 3, 0);
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&m, &m).unwrap();
        let iou = cm.iou_per_class();
        assert_eq!(iou[0], Some(1.0));
        assert!(iou[1..].iter().all(Option::is_none));
        assert_eq!(cm.miou().unwrap(), 1.0);
    }

    #[test]
    fn empty_matrix_is_an_error() {
        let cm = ConfusionMatrix::default();
        assert!(cm.pixel_accuracy().is_err());
        assert!(cm.miou().is_err());
    }

    #[test]
    fn shape_mismatch_and_range() {
        let mut cm = ConfusionMatrix::default();
        assert!(cm.accumulate(&LabelMap::filled(2, 2, 0), &LabelMap::filled(2, 3, 0)).is_err());
        assert!(cm.accumulate(&LabelMap::filled(1, 1, 7), &LabelMap::filled(1, 1, 0)).is_err());
    }

    #[test]
    fn matches_counting_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pred: Vec<u8> = (0..100).map(|_| rng.random_range(0..7)).collect();
        let gt: Vec<u8> = (0..100).map(|_| rng.random_range(0..7)).collect();
        let mut cm = ConfusionMatrix::default();
        cm.accumulate(&LabelMap::new(10, 10, pred.clone()).unwrap(), &LabelMap::new(10, 10, gt.clone()).unwrap())
            .unwrap();
        let mut oracle = [[0u64; 7]; 7];
        for k in 0..100 {
            oracle[gt[k] as usize][pred[k] as usize] += 1;
        }
        for i in 0..7 {
            for j in 0..7 {
                assert_eq!(cm.count(i, j), oracle[i][j]);
            }
        }
        assert_eq!(cm.total(), 100);
    }

    #[test]
    fn uniform_random_accuracy_is_one_over_k() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 100_000;
        let gt: Vec<u8> = (0..n).map(|i| (i % 7) as u8).collect();
        let pred: Vec<u8> = (0..n).map(|_| rng.random_range(0..7)).collect();
        let mut cm = ConfusionMatrix::default();
        cm.accumulate_slices(&pred, &gt).unwrap();
        assert!((cm.pixel_accuracy().unwrap() - 1.0 / 7.0).abs() < 0.05);
    }

    #[test]
    fn high_accuracy_low_miou_dissociation() {
        // Background dominates; every rare class is mispredicted as background.
        let mut rows = vec![vec![0u64; 7]; 7];
        rows[0][0] = 95_000;
        for (k, row) in rows.iter_mut().enumerate().skip(1) {
            row[0] = 700;
            row[k] = 100;
        }
        let cm = ConfusionMatrix::from_counts(&rows).unwrap();
        assert!(cm.pixel_accuracy().unwrap() > 0.9);
        assert!(cm.miou().unwrap() < 0.4);
    }

    #[test]
    fn csv_report_rows() {
        let csv = two_class().report_csv().unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        assert_eq!(lines[0], "metric,value");
        assert_eq!(lines[1], "Background,0.500000");
        assert_eq!(lines[3], "MIOU,0.535714");
        assert_eq!(lines[4], "PixelAccuracy,0.700000");
    }

    proptest! {
        #[test]
        fn order_does_not_matter(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mk = |rng: &mut ChaCha8Rng| LabelMap::new(4, 4, (0..16).map(|_| rng.random_range(0..7)).collect()).unwrap();
            let (pa, ga, pb, gb) = (mk(&mut rng), mk(&mut rng), mk(&mut rng), mk(&mut rng));
            let mut ab = ConfusionMatrix::default();
            ab.accumulate(&pa, &ga).unwrap();
            ab.accumulate(&pb, &gb).unwrap();
            let mut ba = ConfusionMatrix::default();
            ba.accumulate(&pb, &gb).unwrap();
            ba.accumulate(&pa, &ga).unwrap();
            prop_assert_eq!(&ab, &ba);
            let mut merged = ConfusionMatrix::default();
            let mut b_only = ConfusionMatrix::default();
            b_only.accumulate(&pb, &gb).unwrap();
            merged.accumulate(&pa, &ga).unwrap();
            merged.merge(&b_only).unwrap();
            prop_assert_eq!(merged, ab);
        }

        #[test]
        fn relabeling_permutes_iou(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let pred: Vec<u8> = (0..200).map(|_| rng.random_range(0..7)).collect();
            let gt: Vec<u8> = (0..200).map(|_| rng.random_range(0..7)).collect();
            let mut perm: Vec<u8> = (0..7).collect();
            use rand::seq::SliceRandom;
            perm.shuffle(&mut rng);
            let mut a = ConfusionMatrix::default();
            a.accumulate_slices(&pred, &gt).unwrap();
            let mut b = ConfusionMatrix::default();
            let map = |v: &Vec<u8>| v.iter().map(|&x| perm[x as usize]).collect::<Vec<u8>>();
            b.accumulate_slices(&map(&pred), &map(&gt)).unwrap();
            let (ia, ib) = (a.iou_per_class(), b.iou_per_class());
            for k in 0..7 {
                prop_assert_eq!(ia[k], ib[perm[k] as usize]);
            }
            prop_assert!((a.miou().unwrap() - b.miou().unwrap()).abs() < 1e-12);
            let m = a.miou().unwrap();
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }
}
