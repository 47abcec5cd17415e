use std::fmt;

/// Confusion-matrix summary of one evaluation.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    /// `None` for classes absent from both prediction and ground truth.
    pub per_class_iou: Vec<Option<f64>>,
    /// `None` when no voxel was evaluable.
    pub miou: Option<f64>,
    /// `confusion[truth][pred]`.
    pub confusion: Vec<Vec<u64>>,
    pub evaluated: usize,
    pub loss: Option<f64>,
    pub step: usize,
    pub wall_seconds: f64,
}

impl EvalReport {
    pub fn has_evaluable_voxels(&self) -> bool {
        self.evaluated > 0
    }

    pub fn accuracy(&self) -> Option<f64> {
        if self.evaluated == 0 {
            return None;
        }
        let hits: u64 = (0..self.confusion.len()).map(|c| self.confusion[c][c]).sum();
        Some(hits as f64 / self.evaluated as f64)
    }

    /// `miou` or 0 when nothing was evaluable.
    pub fn miou_or_zero(&self) -> f64 {
        self.miou.unwrap_or(0.0)
    }
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "step {}", self.step)?;
        if let Some(l) = self.loss {
            write!(f, " loss {l:.6}")?;
        }
        match self.miou {
            None => write!(f, " no evaluable voxels"),
            Some(m) => {
                write!(f, " mIoU {m:.4} over {} voxels; per-class", self.evaluated)?;
                for iou in &self.per_class_iou {
                    match iou {
                        Some(v) => write!(f, " {v:.4}")?,
                        None => write!(f, " -")?,
                    }
                }
                Ok(())
            }
        }
    }
}

/// `IoU_c = TP/(TP+FP+FN)` over voxels whose truth is not `ignore_label`;
/// the mean skips classes absent from both prediction and truth. Labels
/// outside `0..num_classes` are counted as ignored.
pub fn miou(pred: &[i64], truth: &[i64], num_classes: usize, ignore_label: i64) -> EvalReport {
    let mut confusion = vec![vec![0u64; num_classes]; num_classes];
    let mut evaluated = 0;
    let valid = |l: i64| l >= 0 && (l as usize) < num_classes;
    for (&p, &t) in pred.iter().zip(truth) {
        if t == ignore_label || !valid(t) || !valid(p) {
            continue;
        }
        confusion[t as usize][p as usize] += 1;
        evaluated += 1;
    }
    let per_class_iou: Vec<Option<f64>> = (0..num_classes)
        .map(|c| {
            let tp = confusion[c][c];
            let fn_: u64 = confusion[c].iter().sum::<u64>() - tp;
            let fp: u64 = (0..num_classes).map(|t| confusion[t][c]).sum::<u64>() - tp;
            let denom = tp + fp + fn_;
            (denom > 0).then(|| tp as f64 / denom as f64)
        })
        .collect();
    let present: Vec<f64> = per_class_iou.iter().flatten().copied().collect();
    let miou = (evaluated > 0 && !present.is_empty()).then(|| present.iter().sum::<f64>() / present.len() as f64);
    EvalReport {
        per_class_iou,
        miou,
        confusion,
        evaluated,
        loss: None,
        step: 0,
        wall_seconds: 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn perfect_prediction() {
        let t = [0, 1, 2, 2, 1];
        assert_eq!(miou(&t, &t, 3, -1).miou, Some(1.0));
    }

    #[test]
    fn hand_counted_example() {
        let r = miou(&[0, 0, 1, 1], &[0, 1, 1, 1], 2, -1);
        assert_eq!(r.per_class_iou, vec![Some(0.5), Some(2.0 / 3.0)]);
        assert!((r.miou.unwrap() - 0.583_333_333_333_333_4).abs() < 1e-12);
        assert_eq!(r.confusion, vec![vec![1, 0], vec![1, 2]]);
    }

    #[test]
    fn all_ignored_is_flagged() {
        let r = miou(&[0, 1], &[-1, -1], 2, -1);
        assert_eq!(r.miou, None);
        assert!(!r.has_evaluable_voxels());
        assert!(r.to_string().contains("no evaluable voxels"));
    }

    #[test]
    fn absent_classes_are_skipped() {
        let r = miou(&[0, 0], &[0, 0], 4, -1);
        assert_eq!(r.per_class_iou, vec![Some(1.0), None, None, None]);
        assert_eq!(r.miou, Some(1.0));
    }

    proptest! {
        #[test]
        fn invariant_under_voxel_permutation(
            pairs in proptest::collection::vec((0i64..4, -1i64..4), 1..60),
            rot in 0usize..60,
        ) {
            let (p, t): (Vec<i64>, Vec<i64>) = pairs.iter().copied().unzip();
            let mut idx: Vec<usize> = (0..p.len()).collect();
            idx.rotate_left(rot % p.len());
            idx.reverse();
            let pp: Vec<i64> = idx.iter().map(|&i| p[i]).collect();
            let tt: Vec<i64> = idx.iter().map(|&i| t[i]).collect();
            let a = miou(&p, &t, 4, -1);
            let b = miou(&pp, &tt, 4, -1);
            prop_assert_eq!(a.confusion, b.confusion);
            prop_assert_eq!(a.miou, b.miou);
        }
    }
}
