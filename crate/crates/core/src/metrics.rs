//! Confusion-matrix metrics, ROC curve, and AUC.
//!
//! Strabismus is the positive class throughout. A score greater than or
//! equal to the threshold predicts positive. AUC is computed twice by
//! independent methods (trapezoidal integral of the curve and the
//! Mann-Whitney rank statistic); the two must agree to within 1e-12, which
//! the test suite enforces on random inputs.

use crate::error::{Error, Result};

/// Binary ground-truth label.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Label {
    Strabismus,
    Normal,
}

impl Label {
    pub fn is_positive(self) -> bool {
        self == Label::Strabismus
    }
}

/// The four-way partition of an evaluated sample set.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ConfusionCounts {
    pub tp: u64,
    pub tn: u64,
    pub fp: u64,
    pub fn_: u64,
}

impl ConfusionCounts {
    pub fn new(tp: u64, tn: u64, fp: u64, fn_: u64) -> ConfusionCounts {
        ConfusionCounts { tp, tn, fp, fn_ }
    }

    pub fn total(&self) -> u64 {
        self.tp + self.tn + self.fp + self.fn_
    }
}

/// Counts predictions at a fixed threshold; `score >= threshold` is a
/// positive prediction.
pub fn confusion(scores: &[f64], labels: &[Label], threshold: f64) -> Result<ConfusionCounts> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let mut c = ConfusionCounts::default();
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted_positive = s >= threshold;
        match (predicted_positive, l.is_positive()) {
            (true, true) => c.tp += 1,
            (false, false) => c.tn += 1,
            (true, false) => c.fp += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    Ok(c)
}

/// Sensitivity, specificity, and accuracy; `None` where the denominator is
/// zero (the metric is undefined, not 0).
pub fn se_sp_acc(c: &ConfusionCounts) -> (Option<f64>, Option<f64>, Option<f64>) {
    let ratio = |num: u64, den: u64| {
        if den == 0 {
            None
        } else {
            Some(num as f64 / den as f64)
        }
    };
    let se = ratio(c.tp, c.tp + c.fn_);
    let sp = ratio(c.tn, c.tn + c.fp);
    let acc = ratio(c.tp + c.tn, c.total());
    (se, sp, acc)
}

/// ROC curve: `(FPR, TPR)` points from (0,0) to (1,1), one step per distinct
/// score value (ties collapse into a single diagonal segment), plus the
/// threshold that produced each point.
#[derive(Clone, Debug, PartialEq)]
pub struct RocCurve {
    pub points: Vec<(f64, f64)>,
    pub thresholds: Vec<f64>,
}

/// Sweeps thresholds over the distinct scores in descending order.
pub fn roc_curve(scores: &[f64], labels: &[Label]) -> Result<RocCurve> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let npos = labels.iter().filter(|l| l.is_positive()).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Argument(
            "ROC needs at least one sample of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).expect("finite scores"));

    let mut points = vec![(0.0, 0.0)];
    let mut thresholds = vec![f64::INFINITY];
    let (mut tp, mut fp) = (0u64, 0u64);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        // consume the whole tied group before emitting a point
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            if labels[order[j]].is_positive() {
                tp += 1;
            } else {
                fp += 1;
            }
            j += 1;
        }
        points.push((fp as f64 / nneg as f64, tp as f64 / npos as f64));
        thresholds.push(s);
        i = j;
    }
    Ok(RocCurve { points, thresholds })
}

/// Area under the curve by trapezoidal integration.
pub fn auc(curve: &RocCurve) -> f64 {
    let mut area = 0.0;
    for w in curve.points.windows(2) {
        let (x0, y0) = w[0];
        let (x1, y1) = w[1];
        area += (x1 - x0) * (y0 + y1) / 2.0;
    }
    area
}

/// AUC as the Mann-Whitney statistic: the probability that a random
/// positive outscores a random negative, ties counting one half. Average
/// ranks over tied groups make this exact. Serves as the independent oracle
/// for [`auc`].
pub fn auc_rank(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Argument(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    let npos = labels.iter().filter(|l| l.is_positive()).count();
    let nneg = labels.len() - npos;
    if npos == 0 || nneg == 0 {
        return Err(Error::Argument(
            "AUC needs at least one sample of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("finite scores"));
    // 1-based ranks, tied groups averaged
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let mut j = i;
        while j < order.len() && scores[order[j]] == s {
            j += 1;
        }
        let avg_rank = (i + 1 + j) as f64 / 2.0; // mean of ranks i+1 ..= j
        for &ix in &order[i..j] {
            if labels[ix].is_positive() {
                rank_sum_pos += avg_rank;
            }
        }
        i = j;
    }
    let n_pos = npos as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Ok(u / (n_pos * nneg as f64))
}

/// One evaluation summary; metrics are `None` when undefined.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub counts: ConfusionCounts,
    pub se: Option<f64>,
    pub sp: Option<f64>,
    pub acc: Option<f64>,
    pub auc: Option<f64>,
}

impl MetricReport {
    pub fn from_counts(counts: ConfusionCounts, auc: Option<f64>) -> MetricReport {
        let (se, sp, acc) = se_sp_acc(&counts);
        MetricReport { counts, se, sp, acc, auc }
    }

    pub const CSV_HEADER: &'static str = "TP,TN,FP,FN,Se,Sp,Acc,AUC";

    /// One CSV row matching [`MetricReport::CSV_HEADER`]; metrics display
    /// with 4 decimals, undefined ones as NA.
    pub fn csv_row(&self) -> String {
        let fmt = |v: Option<f64>| match v {
            Some(x) => format!("{x:.4}"),
            None => "NA".to_string(),
        };
        format!(
            "{},{},{},{},{},{},{},{}",
            self.counts.tp,
            self.counts.tn,
            self.counts.fp,
            self.counts.fn_,
            fmt(self.se),
            fmt(self.sp),
            fmt(self.acc),
            fmt(self.auc)
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn pos() -> Label {
        Label::Strabismus
    }
    fn neg() -> Label {
        Label::Normal
    }

    #[test]
    fn confusion_all_positive() {
        let scores = vec![1.0; 5];
        let labels = vec![pos(); 5];
        let c = confusion(&scores, &labels, 0.5).unwrap();
        assert_eq!(c, ConfusionCounts::new(5, 0, 0, 0));
    }

    #[test]
    fn confusion_high_threshold_predicts_all_negative() {
        let scores = vec![0.2, 0.9, 0.6];
        let labels = vec![pos(), neg(), pos()];
        let c = confusion(&scores, &labels, 1.5).unwrap();
        assert_eq!(c, ConfusionCounts::new(0, 1, 0, 2));
        assert_eq!(c.total(), 3);
    }

    #[test]
    fn confusion_hand_counted_six_samples() {
        let scores = vec![0.9, 0.8, 0.6, 0.4, 0.3, 0.1];
        let labels = vec![pos(), neg(), pos(), pos(), neg(), neg()];
        let c = confusion(&scores, &labels, 0.5).unwrap();
        // predicted positive: 0.9 (pos), 0.8 (neg), 0.6 (pos)
        assert_eq!(c, ConfusionCounts::new(2, 2, 1, 1));
    }

    #[test]
    fn confusion_rejects_length_mismatch() {
        assert!(confusion(&[0.5], &[], 0.5).is_err());
    }

    #[test]
    fn published_counts_follow_definition_formulas() {
        let c = ConfusionCounts::new(452, 1685, 121, 18);
        let (se, sp, acc) = se_sp_acc(&c);
        assert!((se.unwrap() - 0.9617).abs() < 5e-5);
        assert!((sp.unwrap() - 0.9330).abs() < 5e-5);
        assert!((acc.unwrap() - 0.9389).abs() < 5e-5);
    }

    #[test]
    fn perfect_counts_give_ones() {
        let (se, sp, acc) = se_sp_acc(&ConfusionCounts::new(1, 1, 0, 0));
        assert_eq!((se, sp, acc), (Some(1.0), Some(1.0), Some(1.0)));
    }

    #[test]
    fn zero_denominators_are_undefined_not_zero() {
        let (se, sp, acc) = se_sp_acc(&ConfusionCounts::new(0, 3, 1, 0));
        assert_eq!(se, None);
        assert!(sp.is_some());
        assert!(acc.is_some());
        let (_, _, acc) = se_sp_acc(&ConfusionCounts::default());
        assert_eq!(acc, None);
    }

    #[test]
    fn accuracy_is_prevalence_weighted_mix_of_se_and_sp() {
        let c = ConfusionCounts::new(40, 30, 10, 20);
        let (se, sp, acc) = se_sp_acc(&c);
        let npos = (c.tp + c.fn_) as f64;
        let nneg = (c.tn + c.fp) as f64;
        let mix = (se.unwrap() * npos + sp.unwrap() * nneg) / (npos + nneg);
        assert!((acc.unwrap() - mix).abs() < 1e-12);
    }

    #[test]
    fn roc_perfect_separation_hits_top_left() {
        let scores = vec![0.9, 0.8, 0.2, 0.1];
        let labels = vec![pos(), pos(), neg(), neg()];
        let curve = roc_curve(&scores, &labels).unwrap();
        assert!(curve.points.contains(&(0.0, 1.0)));
        assert_eq!(curve.points.first(), Some(&(0.0, 0.0)));
        assert_eq!(curve.points.last(), Some(&(1.0, 1.0)));
        assert_eq!(auc(&curve), 1.0);
    }

    #[test]
    fn roc_all_tied_is_the_diagonal() {
        let scores = vec![0.5; 4];
        let labels = vec![pos(), neg(), pos(), neg()];
        let curve = roc_curve(&scores, &labels).unwrap();
        assert_eq!(curve.points, vec![(0.0, 0.0), (1.0, 1.0)]);
        assert_eq!(auc(&curve), 0.5);
        assert_eq!(auc_rank(&scores, &labels).unwrap(), 0.5);
    }

    #[test]
    fn roc_hand_swept_five_points() {
        // descending sweep: t=0.9 -> (0, 1/2); t=0.7 -> (1/3, 1/2);
        // t=0.5 -> (1/3, 1); t=0.3 -> (2/3, 1); t=0.1 -> (1, 1)
        let scores = vec![0.9, 0.7, 0.5, 0.3, 0.1];
        let labels = vec![pos(), neg(), pos(), neg(), neg()];
        let curve = roc_curve(&scores, &labels).unwrap();
        let expect = [
            (0.0, 0.0),
            (0.0, 0.5),
            (1.0 / 3.0, 0.5),
            (1.0 / 3.0, 1.0),
            (2.0 / 3.0, 1.0),
            (1.0, 1.0),
        ];
        assert_eq!(curve.points.len(), expect.len());
        for (got, want) in curve.points.iter().zip(&expect) {
            assert!((got.0 - want.0).abs() < 1e-12 && (got.1 - want.1).abs() < 1e-12);
        }
        assert!((auc(&curve) - auc_rank(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn roc_is_monotone() {
        let mut rng = crate::rng::seeded(31);
        for _ in 0..50 {
            let n = 2 + rng.gen_range(0..40);
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 8.0).round() / 8.0).collect();
            let mut labels: Vec<Label> =
                (0..n).map(|_| if rng.gen::<bool>() { pos() } else { neg() }).collect();
            labels[0] = pos();
            labels[n - 1] = neg();
            let curve = roc_curve(&scores, &labels).unwrap();
            for w in curve.points.windows(2) {
                assert!(w[1].0 >= w[0].0 - 1e-15);
                assert!(w[1].1 >= w[0].1 - 1e-15);
            }
            for &(x, y) in &curve.points {
                assert!((0.0..=1.0).contains(&x) && (0.0..=1.0).contains(&y));
            }
        }
    }

    #[test]
    fn single_class_input_is_rejected() {
        let scores = vec![0.1, 0.9];
        assert!(roc_curve(&scores, &[pos(), pos()]).is_err());
        assert!(auc_rank(&scores, &[neg(), neg()]).is_err());
    }

    #[test]
    fn trapezoid_and_rank_auc_agree_with_ties() {
        let mut rng = crate::rng::seeded(32);
        for _ in 0..200 {
            let n = 2 + rng.gen_range(0..60);
            // quantized scores force ties
            let scores: Vec<f64> = (0..n).map(|_| (rng.gen::<f64>() * 6.0).round() / 6.0).collect();
            let mut labels: Vec<Label> =
                (0..n).map(|_| if rng.gen::<bool>() { pos() } else { neg() }).collect();
            labels[0] = pos();
            labels[n - 1] = neg();
            let a1 = auc(&roc_curve(&scores, &labels).unwrap());
            let a2 = auc_rank(&scores, &labels).unwrap();
            assert!((a1 - a2).abs() < 1e-12, "trapezoid {a1} vs rank {a2}");
        }
    }

    #[test]
    fn increasing_transform_leaves_curve_unchanged() {
        let mut rng = crate::rng::seeded(33);
        for _ in 0..50 {
            let n = 4 + rng.gen_range(0..30);
            let scores: Vec<f64> = (0..n).map(|_| rng.gen::<f64>() * 4.0 - 2.0).collect();
            let mut labels: Vec<Label> =
                (0..n).map(|_| if rng.gen::<bool>() { pos() } else { neg() }).collect();
            labels[0] = pos();
            labels[n - 1] = neg();
            let transformed: Vec<f64> = scores.iter().map(|&s| (0.7 * s).exp()).collect();
            let c1 = roc_curve(&scores, &labels).unwrap();
            let c2 = roc_curve(&transformed, &labels).unwrap();
            assert_eq!(c1.points, c2.points);
            assert!((auc(&c1) - auc(&c2)).abs() < 1e-15);
        }
    }

    #[test]
    fn csv_row_shape() {
        let report = MetricReport::from_counts(ConfusionCounts::new(452, 1685, 121, 18), Some(0.98652));
        assert_eq!(MetricReport::CSV_HEADER, "TP,TN,FP,FN,Se,Sp,Acc,AUC");
        assert_eq!(report.csv_row(), "452,1685,121,18,0.9617,0.9330,0.9389,0.9865");
    }
}
