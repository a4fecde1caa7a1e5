//! Segmentation scoring: pixel accuracy, mean class accuracy and mean
//! IoU from an accumulated confusion matrix. Rows are ground truth,
//! columns are predictions. Classes that never occur are excluded from
//! the class means.

use crate::error::{Error, Result};
use crate::image::LabelMap;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    pub n_classes: usize,
    counts: Vec<u64>,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Scores {
    pub pixel_acc: f64,
    pub class_acc: f64,
    pub miou: f64,
}

impl ConfusionMatrix {
    pub fn new(n_classes: usize) -> Self {
        ConfusionMatrix {
            n_classes,
            counts: vec![0; n_classes * n_classes],
        }
    }

    #[inline]
    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.n_classes + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Accumulate one prediction/ground-truth pair. Pixels whose ground
    /// truth equals `ignore_label` are skipped.
    pub fn accumulate(
        &mut self,
        pred: &LabelMap,
        gt: &LabelMap,
        ignore_label: Option<u8>,
    ) -> Result<()> {
        if pred.h != gt.h || pred.w != gt.w {
            return Err(Error::Dimension(format!(
                "prediction is {}x{}, ground truth is {}x{}",
                pred.h, pred.w, gt.h, gt.w
            )));
        }
        for (i, (&p, &g)) in pred.data.iter().zip(&gt.data).enumerate() {
            if Some(g) == ignore_label {
                continue;
            }
            if g as usize >= self.n_classes {
                return Err(Error::Data(format!(
                    "ground-truth label {g} at pixel {i} exceeds {} classes",
                    self.n_classes
                )));
            }
            if p as usize >= self.n_classes {
                return Err(Error::Data(format!(
                    "predicted label {p} at pixel {i} exceeds {} classes",
                    self.n_classes
                )));
            }
            self.counts[g as usize * self.n_classes + p as usize] += 1;
        }
        Ok(())
    }

    /// Elementwise merge of independently accumulated matrices.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if self.n_classes != other.n_classes {
            return Err(Error::Dimension(format!(
                "cannot merge {}-class and {}-class matrices",
                self.n_classes, other.n_classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Pixel accuracy, mean class accuracy and mean IoU.
    pub fn scores(&self) -> Result<Scores> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data(
                "scores are undefined on an empty confusion matrix".into(),
            ));
        }
        let n = self.n_classes;
        let mut trace = 0u64;
        let mut acc_sum = 0.0;
        let mut acc_classes = 0usize;
        let mut iou_sum = 0.0;
        let mut iou_classes = 0usize;
        for c in 0..n {
            let diag = self.count(c, c);
            trace += diag;
            let row: u64 = (0..n).map(|j| self.count(c, j)).sum();
            let col: u64 = (0..n).map(|i| self.count(i, c)).sum();
            if row > 0 {
                acc_sum += diag as f64 / row as f64;
                acc_classes += 1;
            }
            let denom = row + col - diag;
            if denom > 0 {
                iou_sum += diag as f64 / denom as f64;
                iou_classes += 1;
            }
        }
        Ok(Scores {
            pixel_acc: trace as f64 / total as f64,
            class_acc: acc_sum / acc_classes.max(1) as f64,
            miou: iou_sum / iou_classes.max(1) as f64,
        })
    }
}

impl Scores {
    pub fn csv_line(&self) -> String {
        format!("{},{},{}", self.pixel_acc, self.class_acc, self.miou)
    }

    pub fn table(&self) -> String {
        format!(
            "pixel accuracy : {:.6}\nclass accuracy : {:.6}\nmean IoU       : {:.6}",
            self.pixel_acc, self.class_acc, self.miou
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(h: usize, w: usize, data: &[u8]) -> LabelMap {
        LabelMap {
            h,
            w,
            data: data.to_vec(),
        }
    }

    #[test]
    fn perfect_prediction_is_diagonal() {
        let gt = labels(2, 2, &[0, 1, 2, 1]);
        let mut cm = ConfusionMatrix::new(3);
        cm.accumulate(&gt, &gt, None).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_eq!(cm.count(i, j), 0);
                }
            }
        }
        let s = cm.scores().unwrap();
        assert_eq!(s.pixel_acc, 1.0);
        assert_eq!(s.class_acc, 1.0);
        assert_eq!(s.miou, 1.0);
    }

    #[test]
    fn all_ignored_leaves_matrix_unchanged() {
        let gt = labels(1, 4, &[9, 9, 9, 9]);
        let pred = labels(1, 4, &[0, 1, 0, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt, Some(9)).unwrap();
        assert_eq!(cm.total(), 0);
        assert!(cm.scores().is_err());
    }

    #[test]
    fn hand_counted_two_class_case() {
        let gt = labels(1, 4, &[0, 0, 1, 1]);
        let pred = labels(1, 4, &[0, 1, 1, 1]);
        let mut cm = ConfusionMatrix::new(2);
        cm.accumulate(&pred, &gt, None).unwrap();
        assert_eq!(
            [cm.count(0, 0), cm.count(0, 1), cm.count(1, 0), cm.count(1, 1)],
            [1, 1, 0, 2]
        );
    }

    #[test]
    fn hand_computed_scores() {
        // cm = [[3, 1], [2, 4]]
        let mut cm = ConfusionMatrix::new(2);
        let gt = labels(1, 10, &[0, 0, 0, 0, 1, 1, 1, 1, 1, 1]);
        let pred = labels(1, 10, &[0, 0, 0, 1, 0, 0, 1, 1, 1, 1]);
        cm.accumulate(&pred, &gt, None).unwrap();
        assert_eq!(cm.count(0, 0), 3);
        assert_eq!(cm.count(0, 1), 1);
        assert_eq!(cm.count(1, 0), 2);
        assert_eq!(cm.count(1, 1), 4);
        let s = cm.scores().unwrap();
        assert!((s.pixel_acc - 0.7).abs() < 1e-12);
        assert!((s.class_acc - (0.75 + 4.0 / 6.0) / 2.0).abs() < 1e-12);
        assert!((s.miou - (3.0 / 6.0 + 4.0 / 7.0) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn single_class_fully_correct() {
        let gt = labels(1, 5, &[2, 2, 2, 2, 2]);
        let mut cm = ConfusionMatrix::new(4);
        cm.accumulate(&gt, &gt, None).unwrap();
        let s = cm.scores().unwrap();
        assert_eq!(s.miou, 1.0);
        assert_eq!(s.class_acc, 1.0);
    }

    #[test]
    fn out_of_range_label_names_pixel() {
        let gt = labels(1, 3, &[0, 5, 0]);
        let pred = labels(1, 3, &[0, 0, 0]);
        let mut cm = ConfusionMatrix::new(2);
        let err = cm.accumulate(&pred, &gt, None).unwrap_err();
        assert!(err.to_string().contains("pixel 1"), "{err}");
    }

    #[test]
    fn sharded_accumulation_matches_concatenation() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mk = |rng: &mut ChaCha8Rng| {
            let data: Vec<u8> = (0..64).map(|_| rng.gen_range(0..4)).collect();
            labels(8, 8, &data)
        };
        let pairs: Vec<(LabelMap, LabelMap)> =
            (0..6).map(|_| (mk(&mut rng), mk(&mut rng))).collect();
        let mut whole = ConfusionMatrix::new(4);
        for (p, g) in &pairs {
            whole.accumulate(p, g, None).unwrap();
        }
        let mut merged = ConfusionMatrix::new(4);
        for chunk in pairs.chunks(2) {
            let mut shard = ConfusionMatrix::new(4);
            for (p, g) in chunk {
                shard.accumulate(p, g, None).unwrap();
            }
            merged.merge(&shard).unwrap();
        }
        assert_eq!(whole, merged);
        assert_eq!(whole.scores().unwrap(), merged.scores().unwrap());
    }

    #[test]
    fn permuting_classes_preserves_pixel_acc_and_miou() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let pred_data: Vec<u8> = (0..256).map(|_| rng.gen_range(0..4)).collect();
        let gt_data: Vec<u8> = (0..256).map(|_| rng.gen_range(0..4)).collect();
        let perm = [2u8, 0, 3, 1];
        let mut a = ConfusionMatrix::new(4);
        a.accumulate(&labels(16, 16, &pred_data), &labels(16, 16, &gt_data), None)
            .unwrap();
        let pp: Vec<u8> = pred_data.iter().map(|&v| perm[v as usize]).collect();
        let pg: Vec<u8> = gt_data.iter().map(|&v| perm[v as usize]).collect();
        let mut b = ConfusionMatrix::new(4);
        b.accumulate(&labels(16, 16, &pp), &labels(16, 16, &pg), None)
            .unwrap();
        let sa = a.scores().unwrap();
        let sb = b.scores().unwrap();
        assert!((sa.pixel_acc - sb.pixel_acc).abs() < 1e-12);
        assert!((sa.miou - sb.miou).abs() < 1e-12);
        assert!((sa.class_acc - sb.class_acc).abs() < 1e-12);
    }

    #[test]
    fn scores_stay_in_unit_interval() {
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        for _ in 0..50 {
            let n = rng.gen_range(2..6);
            let pred: Vec<u8> = (0..100).map(|_| rng.gen_range(0..n) as u8).collect();
            let gt: Vec<u8> = (0..100).map(|_| rng.gen_range(0..n) as u8).collect();
            let mut cm = ConfusionMatrix::new(n);
            cm.accumulate(&labels(10, 10, &pred), &labels(10, 10, &gt), None)
                .unwrap();
            let s = cm.scores().unwrap();
            for v in [s.pixel_acc, s.class_acc, s.miou] {
                assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
