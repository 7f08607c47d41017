//! Threshold metrics and rank-based AUC.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Absent when the labels contain a single class.
    pub auc: Option<f64>,
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
    pub threshold: f64,
    pub n: usize,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Positive prediction iff `p ≥ threshold`; zero denominators give 0.
pub fn evaluate(p: &[f64], y: &[u8], threshold: f64) -> Result<EvalResult> {
    if p.is_empty() {
        return Err(Error::InvalidArgument("cannot evaluate an empty prediction set".into()));
    }
    if p.len() != y.len() {
        return Err(Error::InvalidArgument("predictions and labels differ in length".into()));
    }
    let (mut tp, mut fp, mut tn, mut fn_) = (0, 0, 0, 0);
    for (&pi, &yi) in p.iter().zip(y) {
        match (pi >= threshold, yi == 1) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let precision = ratio(tp, tp + fp);
    let recall = ratio(tp, tp + fn_);
    let f1 = if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    };
    Ok(EvalResult {
        accuracy: ratio(tp + tn, p.len()),
        precision,
        recall,
        f1,
        auc: auc_roc(p, y).ok(),
        tp,
        fp,
        tn,
        fn_,
        threshold,
        n: p.len(),
    })
}

/// Mann–Whitney AUC: `(concordant + ½·tied) / (n_pos · n_neg)`, computed
/// from mid-ranks in `O(n log n)`.
pub fn auc_roc(p: &[f64], y: &[u8]) -> Result<f64> {
    if p.len() != y.len() {
        return Err(Error::InvalidArgument("predictions and labels differ in length".into()));
    }
    let n_pos = y.iter().filter(|&&l| l == 1).count();
    let n_neg = y.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::AucUndefined);
    }
    let mut order: Vec<usize> = (0..p.len()).collect();
    order.sort_by(|&a, &b| p[a].total_cmp(&p[b]));
    // Twice the rank sum of positives, so tied mid-ranks stay integral.
    let mut rank2_pos: u64 = 0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && p[order[j + 1]] == p[order[i]] {
            j += 1;
        }
        // Ranks i+1..=j+1 share the mid-rank (i + j + 2) / 2.
        let mid2 = (i + j + 2) as u64;
        let pos_in_group = order[i..=j].iter().filter(|&&k| y[k] == 1).count() as u64;
        rank2_pos += mid2 * pos_in_group;
        i = j + 1;
    }
    let u2 = rank2_pos - (n_pos * (n_pos + 1)) as u64;
    Ok(u2 as f64 / 2.0 / (n_pos * n_neg) as f64)
}

/// Metrics over a threshold grid, for inspection rather than headline numbers.
pub fn threshold_sweep(p: &[f64], y: &[u8], thresholds: &[f64]) -> Result<Vec<EvalResult>> {
    thresholds.iter().map(|&t| evaluate(p, y, t)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs_auc(p: &[f64], y: &[u8]) -> f64 {
        let mut score = 0.0;
        let mut pairs = 0.0;
        for i in 0..p.len() {
            for j in 0..p.len() {
                if y[i] == 1 && y[j] == 0 {
                    pairs += 1.0;
                    if p[i] > p[j] {
                        score += 1.0;
                    } else if p[i] == p[j] {
                        score += 0.5;
                    }
                }
            }
        }
        score / pairs
    }

    #[test]
    fn perfect_ranking() {
        let r = evaluate(&[0.9, 0.8, 0.2, 0.1], &[1, 1, 0, 0], 0.5).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1, r.auc), (1.0, 1.0, 1.0, 1.0, Some(1.0)));
    }

    #[test]
    fn all_negative_predictions() {
        let r = evaluate(&[0.1, 0.2, 0.3], &[1, 0, 1], 0.5).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (0.0, 0.0, 0.0));
        assert_eq!(r.tp + r.fp + r.tn + r.fn_, 3);
    }

    #[test]
    fn mixed_counts() {
        let p = [0.9, 0.4, 0.6, 0.1];
        let y = [1, 1, 0, 0];
        let r = evaluate(&p, &y, 0.5).unwrap();
        assert_eq!((r.tp, r.fn_, r.fp, r.tn), (1, 1, 1, 1));
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (0.5, 0.5, 0.5, 0.5));
        assert_eq!(pairs_auc(&p, &y), 0.75);
        assert_eq!(auc_roc(&p, &y).unwrap(), 0.75);
    }

    #[test]
    fn ties_and_degenerate_inputs() {
        assert_eq!(auc_roc(&[0.3; 4], &[1, 0, 1, 0]).unwrap(), 0.5);
        assert!(matches!(auc_roc(&[0.1, 0.2], &[1, 1]), Err(Error::AucUndefined)));
        assert!(evaluate(&[], &[], 0.5).is_err());
        let r = evaluate(&[0.2, 0.9], &[0, 0], 0.5).unwrap();
        assert_eq!(r.auc, None);
    }
}
