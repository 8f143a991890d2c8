use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Binary classification metrics at threshold 0.5 plus threshold-free AUC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub accuracy: f64,
    pub f1: f64,
    /// `None` when only one class is present.
    pub auc: Option<f64>,
    /// `(fpr, tpr)` from `(0, 0)` to `(1, 1)`; empty when AUC is undefined.
    pub roc: Vec<(f64, f64)>,
    pub confusion: Confusion,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }

    pub fn accuracy(&self) -> f64 {
        (self.tp + self.tn) as f64 / self.total() as f64
    }

    /// `2tp / (2tp + fp + fn)`; 0 when there are no positives at all.
    pub fn f1(&self) -> f64 {
        let denom = 2 * self.tp + self.fp + self.fn_;
        if denom == 0 {
            0.0
        } else {
            2.0 * self.tp as f64 / denom as f64
        }
    }
}

impl MetricReport {
    pub fn auc(&self) -> Result<f64> {
        self.auc.ok_or(Error::AucUndefined)
    }
}

pub const DECISION_THRESHOLD: f64 = 0.5;

/// `scores` are positive-class probabilities; `labels` are 0/1.
pub fn compute_metrics(scores: &[f64], labels: &[u8]) -> Result<MetricReport> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            context: "scores vs labels".into(),
            expected: labels.len(),
            found: scores.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::config("no scores to evaluate"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::NonFinite("scores".into()));
    }
    let mut confusion = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= DECISION_THRESHOLD, y == 1) {
            (true, true) => confusion.tp += 1,
            (true, false) => confusion.fp += 1,
            (false, false) => confusion.tn += 1,
            (false, true) => confusion.fn_ += 1,
        }
    }
    let n_pos = labels.iter().filter(|&&y| y == 1).count();
    let n_neg = labels.len() - n_pos;
    let (auc, roc) = if n_pos == 0 || n_neg == 0 {
        (None, Vec::new())
    } else {
        (
            Some(rank_auc(scores, labels, n_pos, n_neg)),
            roc_curve(scores, labels, n_pos, n_neg),
        )
    };
    Ok(MetricReport {
        accuracy: confusion.accuracy(),
        f1: confusion.f1(),
        auc,
        roc,
        confusion,
    })
}

fn sorted_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    order
}

/// Mann-Whitney statistic with mid-ranks for ties, normalised by `P·N`.
/// Ranks are kept doubled so every quantity stays an exact integer.
fn rank_auc(scores: &[f64], labels: &[u8], n_pos: usize, n_neg: usize) -> f64 {
    let order = sorted_order(scores);
    let mut doubled_rank_sum: u128 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1, mid-rank doubled = i + j + 2
        let doubled = (i + j + 2) as u128;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as u128;
        doubled_rank_sum += doubled * pos_in_group;
        i = j + 1;
    }
    let p = n_pos as u128;
    let doubled_u = doubled_rank_sum - p * (p + 1);
    doubled_u as f64 / (2.0 * n_pos as f64 * n_neg as f64)
}

/// One ROC point per distinct threshold, sweeping from the highest score down.
fn roc_curve(scores: &[f64], labels: &[u8], n_pos: usize, n_neg: usize) -> Vec<(f64, f64)> {
    let mut order = sorted_order(scores);
    order.reverse();
    let mut roc = vec![(0.0, 0.0)];
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
        roc.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
    }
    roc
}

/// Trapezoidal area under a ROC polyline.
pub fn trapezoid_area(roc: &[(f64, f64)]) -> f64 {
    roc.windows(2)
        .map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0)
        .sum()
}
