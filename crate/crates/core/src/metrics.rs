//! Confusion-matrix bookkeeping and intersection-over-union scores.

use crate::error::{Error, Result};

/// A `k x k` confusion matrix indexed `[ground_truth][prediction]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Confusion {
    k: usize,
    counts: Vec<u64>,
}

impl Confusion {
    pub fn new(k: usize) -> Result<Self> {
        if k == 0 {
            return Err(Error::Config("confusion matrix needs k >= 1".into()));
        }
        Ok(Self {
            k,
            counts: vec![0; k * k],
        })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn count(&self, gt: usize, pred: usize) -> u64 {
        self.counts[gt * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    /// Adds one prediction/ground-truth pair.
    pub fn record(&mut self, gt: usize, pred: usize) -> Result<()> {
        if gt >= self.k || pred >= self.k {
            return Err(Error::Data(format!(
                "class out of range: gt={gt}, pred={pred}, k={}",
                self.k
            )));
        }
        self.counts[gt * self.k + pred] += 1;
        Ok(())
    }

    /// Adds a batch of paired label slices.
    pub fn accumulate(&mut self, gt: &[usize], pred: &[usize]) -> Result<()> {
        if gt.len() != pred.len() {
            return Err(Error::Structure(format!(
                "label slices differ in length: {} vs {}",
                gt.len(),
                pred.len()
            )));
        }
        for (&g, &p) in gt.iter().zip(pred) {
            self.record(g, p)?;
        }
        Ok(())
    }

    /// Pools the counts of another matrix of the same size into this one.
    pub fn merge(&mut self, other: &Confusion) -> Result<()> {
        if self.k != other.k {
            return Err(Error::Structure(format!(
                "cannot merge confusion matrices of sizes {} and {}",
                self.k, other.k
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    /// Per-class `TP / (TP + FP + FN)`. A class absent from both ground truth
    /// and predictions has no defined score and yields `None`.
    pub fn iou_per_class(&self) -> Vec<Option<f64>> {
        (0..self.k)
            .map(|c| {
                let tp = self.count(c, c);
                let fp: u64 = (0..self.k).filter(|&g| g != c).map(|g| self.count(g, c)).sum();
                let fn_: u64 = (0..self.k).filter(|&p| p != c).map(|p| self.count(c, p)).sum();
                let denom = tp + fp + fn_;
                if denom == 0 {
                    None
                } else {
                    Some(tp as f64 / denom as f64)
                }
            })
            .collect()
    }

    /// Mean IoU over the classes that have a defined score. Errors when the
    /// matrix is empty (every class undefined).
    pub fn mean_iou(&self) -> Result<f64> {
        let defined: Vec<f64> = self.iou_per_class().into_iter().flatten().collect();
        if defined.is_empty() {
            return Err(Error::Data(
                "mean IoU undefined: no class appears in ground truth or predictions".into(),
            ));
        }
        Ok(defined.iter().sum::<f64>() / defined.len() as f64)
    }

    /// Overall fraction of correct predictions.
    pub fn accuracy(&self) -> Result<f64> {
        let total = self.total();
        if total == 0 {
            return Err(Error::Data("accuracy undefined on an empty matrix".into()));
        }
        let correct: u64 = (0..self.k).map(|c| self.count(c, c)).sum();
        Ok(correct as f64 / total as f64)
    }

    /// Two-line CSV report: a header of class ids and one row of per-class
    /// IoU values, blank where undefined.
    pub fn iou_csv(&self) -> String {
        let header: Vec<String> = (0..self.k).map(|c| format!("class_{c}")).collect();
        let row: Vec<String> = self
            .iou_per_class()
            .iter()
            .map(|v| match v {
                Some(x) => format!("{x:.6}"),
                None => String::new(),
            })
            .collect();
        format!("{}\n{}\n", header.join(","), row.join(","))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_two_class_case() {
        let mut m = Confusion::new(2).unwrap();
        m.accumulate(&[0, 1, 1, 1], &[0, 0, 1, 1]).unwrap();
        assert_eq!(m.count(0, 0), 1);
        assert_eq!(m.count(1, 0), 1);
        assert_eq!(m.count(1, 1), 2);
        assert_eq!(m.count(0, 1), 0);
        let iou = m.iou_per_class();
        assert_abs_diff_eq!(iou[0].unwrap(), 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(iou[1].unwrap(), 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.mean_iou().unwrap(), 7.0 / 12.0, epsilon = 1e-12);
        assert_abs_diff_eq!(m.accuracy().unwrap(), 0.75, epsilon = 1e-12);
    }

    #[test]
    fn absent_class_is_excluded_from_the_mean() {
        let mut m = Confusion::new(3).unwrap();
        m.accumulate(&[0, 0, 1], &[0, 1, 1]).unwrap();
        let iou = m.iou_per_class();
        assert!(iou[2].is_none());
        // class 0: tp=1, fn=1, fp=0 -> 1/2; class 1: tp=1, fp=1 -> 1/2.
        assert_abs_diff_eq!(m.mean_iou().unwrap(), 0.5, epsilon = 1e-12);
    }

    #[test]
    fn predicted_only_class_scores_zero_not_none() {
        let mut m = Confusion::new(3).unwrap();
        // Class 2 never occurs in ground truth but is predicted once.
        m.accumulate(&[0, 0], &[0, 2]).unwrap();
        let iou = m.iou_per_class();
        assert_eq!(iou[2], Some(0.0));
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let mut m = Confusion::new(4).unwrap();
        m.accumulate(&[0, 1, 2, 3, 2, 1], &[0, 1, 2, 3, 2, 1]).unwrap();
        assert_abs_diff_eq!(m.mean_iou().unwrap(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn empty_matrix_errors() {
        let m = Confusion::new(4).unwrap();
        assert!(m.mean_iou().is_err());
        assert!(m.accuracy().is_err());
        assert!(Confusion::new(0).is_err());
    }

    #[test]
    fn out_of_range_labels_error() {
        let mut m = Confusion::new(2).unwrap();
        assert!(m.record(2, 0).is_err());
        assert!(m.record(0, 5).is_err());
        assert!(m.accumulate(&[0], &[0, 1]).is_err());
    }

    #[test]
    fn merge_equals_joint_accumulation() {
        let gt_a = [0usize, 1, 2, 1];
        let pr_a = [0usize, 1, 1, 1];
        let gt_b = [2usize, 2, 0];
        let pr_b = [2usize, 0, 0];
        let mut joint = Confusion::new(3).unwrap();
        joint.accumulate(&gt_a, &pr_a).unwrap();
        joint.accumulate(&gt_b, &pr_b).unwrap();
        let mut left = Confusion::new(3).unwrap();
        left.accumulate(&gt_a, &pr_a).unwrap();
        let mut right = Confusion::new(3).unwrap();
        right.accumulate(&gt_b, &pr_b).unwrap();
        left.merge(&right).unwrap();
        assert_eq!(left, joint);

        assert!(left.merge(&Confusion::new(2).unwrap()).is_err());
    }

    #[test]
    fn csv_report_has_blank_cells_for_undefined_classes() {
        let mut m = Confusion::new(3).unwrap();
        m.accumulate(&[0, 1], &[0, 1]).unwrap();
        let csv = m.iou_csv();
        assert_eq!(csv, "class_0,class_1,class_2\n1.000000,1.000000,\n");
    }

    proptest! {
        // Relabeling classes by a permutation permutes the per-class scores
        // and leaves the mean unchanged.
        #[test]
        fn prop_permutation_equivariance(
            pairs in proptest::collection::vec((0usize..4, 0usize..4), 1..200),
            rot in 0usize..4,
        ) {
            let perm: Vec<usize> = (0..4).map(|c| (c + rot) % 4).collect();
            let mut base = Confusion::new(4).unwrap();
            let mut mapped = Confusion::new(4).unwrap();
            for &(g, p) in &pairs {
                base.record(g, p).unwrap();
                mapped.record(perm[g], perm[p]).unwrap();
            }
            let iou_base = base.iou_per_class();
            let iou_mapped = mapped.iou_per_class();
            for c in 0..4 {
                prop_assert_eq!(iou_base[c], iou_mapped[perm[c]]);
            }
            // The mean sums the same values in permuted order, so allow for
            // rounding differences in the last ulp.
            match (base.mean_iou().ok(), mapped.mean_iou().ok()) {
                (Some(a), Some(b)) => prop_assert!((a - b).abs() < 1e-12),
                (a, b) => prop_assert_eq!(a, b),
            }
        }

        // Every defined IoU lies in [0, 1].
        #[test]
        fn prop_iou_bounded(
            pairs in proptest::collection::vec((0usize..5, 0usize..5), 0..300),
        ) {
            let mut m = Confusion::new(5).unwrap();
            for &(g, p) in &pairs {
                m.record(g, p).unwrap();
            }
            for v in m.iou_per_class().into_iter().flatten() {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }
    }
}
