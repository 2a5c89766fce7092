//! Binary-classification metrics, ROC curves, fold aggregation and
//! clinical subgroup selection. The positive class (label 1) is injury present.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::harness::ManifestRow;

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const ROC_GRID_POINTS: usize = 101;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub roc_auc: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub specificity: f64,
    pub accuracy: f64,
    pub n_samples: usize,
    pub n_positive: usize,
    pub threshold: f64,
}

/// Metric names in table order.
pub const METRIC_NAMES: [&str; 6] = ["roc_auc", "f1", "precision", "recall", "specificity", "accuracy"];

impl MetricsRecord {
    pub fn values(&self) -> [f64; 6] {
        [self.roc_auc, self.f1, self.precision, self.recall, self.specificity, self.accuracy]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AggregateRecord {
    /// In [`METRIC_NAMES`] order.
    pub mean: [f64; 6],
    /// Sample standard deviation (n − 1).
    pub std: [f64; 6],
    pub folds: usize,
}

impl AggregateRecord {
    pub fn roc_auc_mean(&self) -> f64 {
        self.mean[0]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocPoint {
    pub fpr: f64,
    pub tpr: f64,
}

fn class_counts(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::validation(format!("{} scores for {} labels", scores.len(), labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::validation(format!("label {l} is not binary")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::validation("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    Ok((pos, labels.len() - pos))
}

fn require_both(pos: usize, neg: usize) -> Result<()> {
    if pos == 0 || neg == 0 {
        return Err(Error::validation(format!("ROC needs both classes, got {pos} positive and {neg} negative")));
    }
    Ok(())
}

/// Rank-based (Mann–Whitney) AUC; tied scores share their average rank,
/// which credits positive/negative ties with 0.5.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // twice the rank sum keeps average ranks integral
    let mut rank_sum2: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j+1, average (i + j + 2) / 2
        let avg2 = (i + j + 2) as u64;
        let tied_pos = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u64;
        rank_sum2 += avg2 * tied_pos;
        i = j + 1;
    }
    let (p, n) = (pos as u64, neg as u64);
    let u2 = rank_sum2 - p * (p + 1);
    Ok(u2 as f64 / (2 * p * n) as f64)
}

/// ROC points with one threshold per distinct score, highest first.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<RocPoint>> {
    let (pos, neg) = class_counts(scores, labels)?;
    require_both(pos, neg)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![RocPoint { fpr: 0.0, tpr: 0.0 }];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push(RocPoint { fpr: fp as f64 / neg as f64, tpr: tp as f64 / pos as f64 });
    }
    Ok(points)
}

pub fn trapezoid_area(curve: &[RocPoint]) -> f64 {
    curve.windows(2).map(|w| (w[1].fpr - w[0].fpr) * (w[0].tpr + w[1].tpr) / 2.0).sum()
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Thresholded metrics: positive iff `score ≥ threshold`.
///
/// Undefined ratios (empty denominators) are reported as 0. `roc_auc` is NaN
/// when only one class is present.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<MetricsRecord> {
    let (pos, neg) = class_counts(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fnc) = (0, 0, 0, 0);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fnc += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fnc);
    let f1 = if precision + recall == 0.0 { 0.0 } else { 2.0 * precision * recall / (precision + recall) };
    let roc_auc = if pos > 0 && neg > 0 { roc_auc(scores, labels)? } else { f64::NAN };
    Ok(MetricsRecord {
        roc_auc,
        f1,
        precision,
        recall,
        specificity: ratio(tn, tn + fp),
        accuracy: ratio(tp + tn, scores.len()),
        n_samples: scores.len(),
        n_positive: pos,
        threshold,
    })
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn aggregate_folds(records: &[MetricsRecord]) -> Result<AggregateRecord> {
    if records.len() < 2 {
        return Err(Error::validation(format!("aggregation needs at least 2 folds, got {}", records.len())));
    }
    let mut mean = [0.0; 6];
    let mut std = [0.0; 6];
    for m in 0..6 {
        let col: Vec<f64> = records.iter().map(|r| r.values()[m]).collect();
        let (mu, sd) = mean_std(&col);
        mean[m] = mu;
        std[m] = sd;
    }
    Ok(AggregateRecord { mean, std, folds: records.len() })
}

/// Mean ± std TPR on a fixed FPR grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RocBand {
    pub fpr: Vec<f64>,
    pub tpr_mean: Vec<f64>,
    pub tpr_std: Vec<f64>,
    /// `mean − std`, clipped to [0, 1].
    pub lower: Vec<f64>,
    /// `mean + std`, clipped to [0, 1].
    pub upper: Vec<f64>,
}

/// TPR of a step/segment curve at `x`. On vertical segments the highest TPR
/// reached at that FPR is used.
pub fn interpolate_tpr(curve: &[RocPoint], x: f64) -> f64 {
    let mut best: Option<f64> = None;
    for w in curve.windows(2) {
        let (a, b) = (w[0], w[1]);
        if a.fpr <= x && x <= b.fpr {
            let y =
                if b.fpr == a.fpr { b.tpr.max(a.tpr) } else { a.tpr + (x - a.fpr) / (b.fpr - a.fpr) * (b.tpr - a.tpr) };
            best = Some(best.map_or(y, |v: f64| v.max(y)));
        }
    }
    best.unwrap_or_else(|| curve.last().map_or(0.0, |p| p.tpr))
}

pub fn roc_band(curves: &[Vec<RocPoint>]) -> Result<RocBand> {
    if curves.len() < 2 {
        return Err(Error::validation(format!("ROC band needs at least 2 curves, got {}", curves.len())));
    }
    let fpr: Vec<f64> = (0..ROC_GRID_POINTS).map(|i| i as f64 / (ROC_GRID_POINTS - 1) as f64).collect();
    let mut band = RocBand {
        fpr: fpr.clone(),
        tpr_mean: Vec::with_capacity(fpr.len()),
        tpr_std: Vec::with_capacity(fpr.len()),
        lower: Vec::with_capacity(fpr.len()),
        upper: Vec::with_capacity(fpr.len()),
    };
    for &x in &fpr {
        let ys: Vec<f64> = curves.iter().map(|c| interpolate_tpr(c, x)).collect();
        let (mean, std) = mean_std(&ys);
        band.tpr_mean.push(mean);
        band.tpr_std.push(std);
        band.lower.push((mean - std).clamp(0.0, 1.0));
        band.upper.push((mean + std).clamp(0.0, 1.0));
    }
    Ok(band)
}

pub enum Subgroup {
    /// nodule_size_cm ≤ limit
    MaxNoduleCm(f64),
    /// months_post_sbrt ≤ limit
    MaxMonthsPost(f64),
    Custom(Box<dyn Fn(&ManifestRow) -> bool>),
}

impl Subgroup {
    pub fn small_nodules() -> Self {
        Subgroup::MaxNoduleCm(2.5)
    }

    pub fn early_followup() -> Self {
        Subgroup::MaxMonthsPost(3.0)
    }
}

/// Stable-order subset of `rows` matching `predicate`.
pub fn subgroup_filter(rows: &[ManifestRow], predicate: &Subgroup) -> Result<Vec<ManifestRow>> {
    let field = |r: &ManifestRow, column: &str| -> Result<f64> {
        let v = match column {
            "nodule_size_cm" => r.nodule_size_cm,
            _ => r.months_post_sbrt,
        };
        v.ok_or_else(|| Error::validation(format!("manifest column {column} is missing for scan {}", r.scan_id)))
    };
    let mut out = Vec::new();
    for r in rows {
        let keep = match predicate {
            Subgroup::MaxNoduleCm(limit) => field(r, "nodule_size_cm")? <= *limit,
            Subgroup::MaxMonthsPost(limit) => field(r, "months_post_sbrt")? <= *limit,
            Subgroup::Custom(f) => f(r),
        };
        if keep {
            out.push(r.clone());
        }
    }
    Ok(out)
}

/// Evaluation entry point for a subgroup; refuses empty selections.
pub fn subgroup_metrics(
    rows: &[ManifestRow],
    scores: &[f64],
    predicate: &Subgroup,
    threshold: f64,
) -> Result<MetricsRecord> {
    if rows.len() != scores.len() {
        return Err(Error::validation("one score per manifest row is required"));
    }
    let keep = subgroup_filter(rows, predicate)?;
    if keep.is_empty() {
        return Err(Error::validation("no samples in subgroup"));
    }
    let ids: std::collections::HashSet<&str> = keep.iter().map(|r| r.scan_id.as_str()).collect();
    let (mut s, mut l) = (Vec::new(), Vec::new());
    for (r, &score) in rows.iter().zip(scores) {
        if ids.contains(r.scan_id.as_str()) {
            s.push(score);
            l.push(r.label);
        }
    }
    confusion_metrics(&s, &l, threshold)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn brute_auc(scores: &[f64], labels: &[u8]) -> f64 {
        let mut credit2 = 0u64;
        let (mut p, mut n) = (0u64, 0u64);
        for (i, &li) in labels.iter().enumerate() {
            if li == 1 {
                p += 1;
            } else {
                n += 1;
            }
            for (j, &lj) in labels.iter().enumerate() {
                if li == 1 && lj == 0 {
                    credit2 += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        std::cmp::Ordering::Greater => 2,
                        std::cmp::Ordering::Equal => 1,
                        std::cmp::Ordering::Less => 0,
                    };
                }
            }
        }
        credit2 as f64 / (2 * p * n) as f64
    }

    #[test]
    fn auc_examples() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert_eq!(roc_auc(&s, &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&s, &[0, 0, 1, 1]).unwrap(), 0.0);
        let s = [0.6, 0.4, 0.6, 0.4];
        let l = [1, 0, 0, 1];
        assert_eq!(brute_auc(&s, &l), 0.5);
        assert_eq!(roc_auc(&s, &l).unwrap(), 0.5);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn curve_examples() {
        let c = roc_curve(&[0.9, 0.8, 0.3, 0.2], &[1, 1, 0, 0]).unwrap();
        let pts: Vec<(f64, f64)> = c.iter().map(|p| (p.fpr, p.tpr)).collect();
        assert_eq!(pts, vec![(0.0, 0.0), (0.0, 0.5), (0.0, 1.0), (0.5, 1.0), (1.0, 1.0)]);
        let c = roc_curve(&[0.5; 4], &[1, 0, 1, 0]).unwrap();
        assert_eq!(c.len(), 2);
        assert_eq!(trapezoid_area(&c), 0.5);
        assert!(roc_curve(&[0.5], &[0]).is_err());
    }

    #[test]
    fn confusion_hand_case() {
        // TP=3 FP=1 FN=1 TN=3
        let scores = [0.9, 0.8, 0.7, 0.6, 0.4, 0.3, 0.2, 0.1];
        let labels = [1, 1, 1, 0, 1, 0, 0, 0];
        let m = confusion_metrics(&scores, &labels, 0.5).unwrap();
        for v in [m.precision, m.recall, m.specificity, m.accuracy, m.f1] {
            assert!((v - 0.75).abs() < 1e-12);
        }
        let m = confusion_metrics(&[0.9, 0.1], &[1, 0], 0.5).unwrap();
        assert!(m.values().iter().all(|&v| v == 1.0));
        let m = confusion_metrics(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((m.precision, m.f1), (0.0, 0.0));
    }

    #[test]
    fn threshold_extremes() {
        let scores = [0.1, 0.4, 0.35, 0.8];
        let labels = [0, 1, 0, 1];
        assert_eq!(confusion_metrics(&scores, &labels, 0.0).unwrap().recall, 1.0);
        assert_eq!(confusion_metrics(&scores, &labels, 0.81).unwrap().specificity, 1.0);
    }

    fn rec(auc: f64) -> MetricsRecord {
        MetricsRecord {
            roc_auc: auc,
            f1: 0.5,
            precision: 0.5,
            recall: 0.5,
            specificity: 0.5,
            accuracy: 0.5,
            n_samples: 10,
            n_positive: 5,
            threshold: 0.5,
        }
    }

    #[test]
    fn aggregation() {
        let a = aggregate_folds(&[0.7, 0.8, 0.9, 0.6, 0.75].map(rec)).unwrap();
        assert!((a.mean[0] - 0.75).abs() < 1e-12);
        assert!((a.std[0] - 0.111_803_398_874_989_5).abs() < 1e-12);
        let same = aggregate_folds(&[rec(0.6), rec(0.6), rec(0.6)]).unwrap();
        assert_eq!(same.std, [0.0; 6]);
        assert!(aggregate_folds(&[rec(0.6)]).is_err());
    }

    #[test]
    fn band_examples() {
        let curve = roc_curve(&[0.9, 0.7, 0.4, 0.2, 0.1], &[1, 0, 1, 1, 0]).unwrap();
        let band = roc_band(&vec![curve.clone(); 5]).unwrap();
        assert!(band.tpr_std.iter().all(|&s| s == 0.0));
        assert_eq!(band.fpr.len(), 101);
        assert_eq!(*band.fpr.last().unwrap(), 1.0);
        assert_eq!(*band.tpr_mean.last().unwrap(), 1.0);

        let diagonal = vec![RocPoint { fpr: 0.0, tpr: 0.0 }, RocPoint { fpr: 1.0, tpr: 1.0 }];
        let perfect =
            vec![RocPoint { fpr: 0.0, tpr: 0.0 }, RocPoint { fpr: 0.0, tpr: 1.0 }, RocPoint { fpr: 1.0, tpr: 1.0 }];
        let band = roc_band(&[diagonal, perfect]).unwrap();
        for (x, m) in band.fpr.iter().zip(&band.tpr_mean) {
            assert!((m - (x + 1.0) / 2.0).abs() < 1e-12);
        }
        assert!(band.lower.iter().chain(&band.upper).all(|v| (0.0..=1.0).contains(v)));
        assert!(roc_band(&[curve]).is_err());
    }

    fn row(id: &str, size: Option<f64>, months: Option<f64>) -> ManifestRow {
        ManifestRow {
            patient_id: "p".into(),
            scan_id: id.into(),
            volume_path: format!("{id}.meta.json").into(),
            label: 1,
            nodule_size_cm: size,
            months_post_sbrt: months,
        }
    }

    #[test]
    fn subgroups() {
        let rows = vec![row("a", Some(2.0), Some(1.0)), row("b", Some(3.0), Some(4.0)), row("c", Some(2.5), Some(3.0))];
        let ids = |v: Vec<ManifestRow>| v.into_iter().map(|r| r.scan_id).collect::<Vec<_>>();
        assert_eq!(ids(subgroup_filter(&rows, &Subgroup::small_nodules()).unwrap()), ["a", "c"]);
        assert_eq!(ids(subgroup_filter(&rows, &Subgroup::early_followup()).unwrap()), ["a", "c"]);
        let custom = Subgroup::Custom(Box::new(|r| r.scan_id == "b"));
        assert_eq!(ids(subgroup_filter(&rows, &custom).unwrap()), ["b"]);

        let missing = vec![row("a", None, Some(1.0))];
        let err = subgroup_filter(&missing, &Subgroup::small_nodules()).unwrap_err();
        assert!(err.to_string().contains("nodule_size_cm"));

        let err = subgroup_metrics(&rows, &[0.1, 0.2, 0.3], &Subgroup::MaxNoduleCm(1.0), 0.5).unwrap_err();
        assert!(err.to_string().contains("no samples in subgroup"));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn instance() -> impl Strategy<Value = (Vec<f64>, Vec<u8>)> {
            (2usize..=12)
                .prop_flat_map(|n| {
                    (
                        proptest::collection::vec((0u8..6).prop_map(|k| f64::from(k) / 5.0), n),
                        proptest::collection::vec(0u8..=1, n),
                    )
                })
                .prop_filter("both classes", |(_, l)| l.contains(&0) && l.contains(&1))
        }

        proptest! {
            #[test]
            fn rank_auc_equals_brute_force((s, l) in instance()) {
                prop_assert_eq!(roc_auc(&s, &l).unwrap(), brute_auc(&s, &l));
            }

            #[test]
            fn trapezoid_equals_auc((s, l) in instance()) {
                let c = roc_curve(&s, &l).unwrap();
                prop_assert!((trapezoid_area(&c) - roc_auc(&s, &l).unwrap()).abs() < 1e-9);
                prop_assert!(c.windows(2).all(|w| w[1].fpr >= w[0].fpr && w[1].tpr >= w[0].tpr));
                prop_assert_eq!(*c.last().unwrap(), RocPoint { fpr: 1.0, tpr: 1.0 });
            }

            #[test]
            fn auc_complement((s, l) in instance()) {
                let flipped: Vec<u8> = l.iter().map(|&x| 1 - x).collect();
                let sum = roc_auc(&s, &l).unwrap() + roc_auc(&s, &flipped).unwrap();
                prop_assert!((sum - 1.0).abs() < 1e-12);
            }

            #[test]
            fn auc_monotone_invariant((s, l) in instance()) {
                let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() - 7.0).collect();
                prop_assert_eq!(roc_auc(&s, &l).unwrap(), roc_auc(&t, &l).unwrap());
            }
        }
    }
}
