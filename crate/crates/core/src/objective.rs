//! Classifier head and the training objective: adaptive class weights,
//! per-event weighted cross-entropy with optional hard-example mining,
//! temporal consistency of trend embeddings, and ℓ2 regularization.

use serde::{Deserialize, Serialize};

use crate::clustering::PseudoEvent;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::params::ModelParams;
use crate::tape::{self, sigmoid, Mat};
use crate::windowing::WindowSequence;

/// Where class counts `n_c` are taken from.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightScope {
    #[default]
    Event,
    Global,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveConfig {
    pub lambda_tc: f64,
    pub lambda_reg: f64,
    pub epsilon: f64,
    /// Use `max(sim, 0)` in the consistency term.
    pub tc_clamp: bool,
    /// Fraction of training terms kept by hard-example mining; 1.0 disables it.
    pub mining_rho: f64,
    pub mining_warmup_epochs: usize,
    pub weights_scope: WeightScope,
    /// When false every class weight is 1.
    pub adaptive_weights: bool,
}

impl Default for ObjectiveConfig {
    fn default() -> Self {
        Self {
            lambda_tc: 0.1,
            lambda_reg: 1e-4,
            epsilon: 1.0,
            tc_clamp: false,
            mining_rho: 1.0,
            mining_warmup_epochs: 2,
            weights_scope: WeightScope::Event,
            adaptive_weights: true,
        }
    }
}

impl ObjectiveConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_tc >= 0.0) {
            return Err(Error::config("loss.lambda_tc", "must be non-negative"));
        }
        if !(self.lambda_reg >= 0.0) {
            return Err(Error::config("loss.lambda_reg", "must be non-negative"));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::config("loss.epsilon", "must be positive"));
        }
        if !(self.mining_rho > 0.0 && self.mining_rho <= 1.0) {
            return Err(Error::config("mining.rho", "must lie in (0, 1]"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub n0: usize,
    pub n1: usize,
}

impl ClassCounts {
    pub fn add(&mut self, label: u8) {
        if label == 1 {
            self.n1 += 1;
        } else {
            self.n0 += 1;
        }
    }
}

/// Training-split class counts over `members`.
pub fn train_counts(members: &[usize], ds: &Dataset) -> ClassCounts {
    let mut c = ClassCounts::default();
    for &i in members {
        if ds.split(i) == Split::Train {
            c.add(ds.posts[i].label);
        }
    }
    c
}

/// `w_c = n̄ / (n_c + ε)` with `n̄ = (n_0 + n_1) / 2`.
pub fn class_weights(counts: ClassCounts, epsilon: f64) -> (f64, f64) {
    let mean = (counts.n0 + counts.n1) as f64 / 2.0;
    (mean / (counts.n0 as f64 + epsilon), mean / (counts.n1 as f64 + epsilon))
}

pub fn event_class_weights(event: &PseudoEvent, ds: &Dataset, epsilon: f64) -> (f64, f64) {
    class_weights(train_counts(&event.member_indices, ds), epsilon)
}

/// Per-post and per-event probabilities read from trend embeddings.
#[derive(Clone, Debug, PartialEq)]
pub struct Probabilities {
    /// `p_i` from the last window containing post `i`; `None` for posts in no event.
    pub per_post: Vec<Option<f64>>,
    /// `p_E` from each event's final window, in event order.
    pub per_event: Vec<f64>,
}

pub fn classifier_logit(params: &ModelParams, hidden: &[f64]) -> f64 {
    let w = params.get("clf.W_c");
    let b = params.get("clf.b_c")[[0, 0]];
    w.row(0).iter().zip(hidden).map(|(a, x)| a * x).sum::<f64>() + b
}

/// For each event member, the 0-based position of the last window holding it.
pub fn readout_windows(event: &PseudoEvent, windows: &WindowSequence) -> Result<Vec<(usize, usize)>> {
    event
        .member_indices
        .iter()
        .map(|&post| {
            windows
                .last_window_of(post)
                .map(|w| (post, w))
                .ok_or_else(|| {
                    Error::InvalidArgument(format!(
                        "post {post} of event {} is not covered by any window",
                        event.event_id
                    ))
                })
        })
        .collect()
}

/// `p_i = σ(W_c T_{w(i)} + b_c)` where `w(i)` is the last window covering post `i`.
pub fn post_probabilities(
    n_posts: usize,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    hidden: &[Vec<Vec<f64>>],
    params: &ModelParams,
) -> Result<Probabilities> {
    let mut per_post = vec![None; n_posts];
    let mut per_event = Vec::with_capacity(events.len());
    for ((event, seq), states) in events.iter().zip(windows).zip(hidden) {
        let probs: Vec<f64> = states.iter().map(|h| sigmoid(classifier_logit(params, h))).collect();
        for (post, w) in readout_windows(event, seq)? {
            per_post[post] = Some(probs[w]);
        }
        per_event.push(*probs.last().ok_or_else(|| {
            Error::InvalidArgument(format!("event {} has no windows", event.event_id))
        })?);
    }
    Ok(Probabilities { per_post, per_event })
}

/// Marks the `⌈ρ·n⌉` largest values; ties go to the earlier key.
pub fn mining_mask(values: &[f64], keys: &[usize], rho: f64) -> Vec<bool> {
    let n = values.len();
    if rho >= 1.0 {
        return vec![true; n];
    }
    let k = ((rho * n as f64).ceil() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        values[b]
            .total_cmp(&values[a])
            .then(keys[a].cmp(&keys[b]))
            .then(a.cmp(&b))
    });
    let mut mask = vec![false; n];
    for &i in &order[..k] {
        mask[i] = true;
    }
    mask
}

/// One weighted cross-entropy contribution.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CeTerm {
    pub post: usize,
    pub label: u8,
    pub weight: f64,
    pub prob: f64,
}

impl CeTerm {
    pub fn value(&self) -> f64 {
        tape::bce(self.prob, self.label, self.weight)
    }
}

/// Sum of weighted cross-entropy terms, optionally restricted to the hardest.
pub fn ce_loss(terms: &[CeTerm], mining_rho: Option<f64>) -> Result<f64> {
    if terms.is_empty() {
        return Err(Error::Dataset("no training posts contribute to the loss".into()));
    }
    let values: Vec<f64> = terms.iter().map(CeTerm::value).collect();
    let keys: Vec<usize> = terms.iter().map(|t| t.post).collect();
    let mask = mining_mask(&values, &keys, mining_rho.unwrap_or(1.0));
    Ok(values.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| v).sum())
}

/// Temporal consistency summed over events; each matrix holds one event's
/// trend embeddings row by row.
pub fn tc_loss(states: &[Mat], clamp: bool) -> f64 {
    states.iter().map(|s| tape::temporal_consistency(s, clamp)).sum()
}

pub fn total_loss(ce: f64, tc: f64, reg_sq: f64, lambda_tc: f64, lambda_reg: f64) -> f64 {
    ce + lambda_tc * tc + lambda_reg * reg_sq
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EventLoss {
    pub event_id: usize,
    pub ce: f64,
    pub tc: f64,
    pub w0: f64,
    pub w1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LossReport {
    pub per_event: Vec<EventLoss>,
    pub ce: f64,
    pub tc: f64,
    /// `‖Θ‖₂²`, before scaling by λ_reg.
    pub reg: f64,
    pub total: f64,
    pub probabilities: Vec<Option<f64>>,
    /// Whether each post's term entered the (mined) cross-entropy.
    pub mined: Vec<bool>,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn weight_examples() {
        let (w0, w1) = class_weights(ClassCounts { n0: 50, n1: 50 }, 1e-8);
        assert!((w0 - 1.0).abs() < 1e-9 && (w1 - 1.0).abs() < 1e-9);
        let (w0, w1) = class_weights(ClassCounts { n0: 80, n1: 20 }, 1e-12);
        assert!((w0 - 0.625).abs() < 1e-12 && (w1 - 2.5).abs() < 1e-12);
        let (_, w1) = class_weights(ClassCounts { n0: 10, n1: 0 }, 1.0);
        assert_eq!(w1, 5.0);
    }

    fn term(post: usize, label: u8, prob: f64) -> CeTerm {
        CeTerm { post, label, weight: 1.0, prob }
    }

    #[test]
    fn ce_examples() {
        let perfect = [term(0, 1, 1.0 - 1e-12), term(1, 0, 1e-12), term(2, 1, 1.0)];
        assert!(ce_loss(&perfect, None).unwrap() < 1e-9 * 3.0);
        let half = ce_loss(&[term(0, 1, 0.5)], None).unwrap();
        assert!((half - std::f64::consts::LN_2).abs() < 1e-15);
        assert!(ce_loss(&[], None).is_err());
    }

    #[test]
    fn mining_keeps_the_hardest() {
        let values = [0.1, 0.9, 0.2, 0.8];
        let keys = [0, 1, 2, 3];
        assert_eq!(mining_mask(&values, &keys, 0.5), vec![false, true, false, true]);
        let kept: f64 = values
            .iter()
            .zip(mining_mask(&values, &keys, 0.5))
            .filter(|(_, m)| *m)
            .map(|(v, _)| v)
            .sum();
        assert!((kept - 1.7).abs() < 1e-12);
        // Ties broken by the smaller key.
        assert_eq!(mining_mask(&[1.0, 1.0, 1.0], &[5, 2, 9], 0.3), vec![false, true, false]);
        // ρ = 1 keeps everything.
        let terms: Vec<CeTerm> = (0..5).map(|i| term(i, (i % 2) as u8, 0.3)).collect();
        assert_eq!(ce_loss(&terms, Some(1.0)).unwrap(), ce_loss(&terms, None).unwrap());
    }

    #[test]
    fn total_examples() {
        assert_eq!(total_loss(1.3, 7.0, 9.0, 0.0, 0.0), 1.3);
        assert_eq!(total_loss(1.3, 0.0, 0.0, 0.1, 0.5), 1.3);
        assert!((total_loss(1.0, -4.0, 2.0, 0.1, 0.01) - 0.62).abs() < 1e-12);
    }

    #[test]
    fn tc_examples() {
        use ndarray::array;
        assert_eq!(tc_loss(&[array![[1.0, 0.0], [2.0, 0.0]]], false), 1.0);
        assert_eq!(tc_loss(&[array![[1.0, 0.0], [-1.0, 0.0]]], false), -4.0);
        assert_eq!(tc_loss(&[array![[0.2, 0.1], [0.2, 0.1]]], false), 0.0);
    }
}
