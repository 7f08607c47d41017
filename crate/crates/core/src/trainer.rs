//! Optimizers, the epoch loop, early stopping and training history.

use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoEvent;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalResult};
use crate::model::{backward, forward, ForwardPass, Gradients, ModelConfig};
use crate::params::{ModelDims, ModelParams};
use crate::windowing::WindowSequence;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum OptimizerKind {
    Sgd,
    Adam { beta1: f64, beta2: f64, eps: f64 },
}

impl Default for OptimizerKind {
    fn default() -> Self {
        OptimizerKind::Adam {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Validation metric monitored for early stopping.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StopMetric {
    #[default]
    F1,
    Auc,
    Accuracy,
}

impl StopMetric {
    pub fn read(self, r: &EvalResult) -> Option<f64> {
        match self {
            StopMetric::F1 => Some(r.f1),
            StopMetric::Auc => r.auc,
            StopMetric::Accuracy => Some(r.accuracy),
        }
    }
}

impl FromStr for StopMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "f1" => Ok(StopMetric::F1),
            "auc" => Ok(StopMetric::Auc),
            "accuracy" => Ok(StopMetric::Accuracy),
            _ => Err(Error::config("train.early_stop_metric", format!("unknown metric `{s}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub dims: ModelDims,
    pub model: ModelConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub seed: u64,
    pub grad_clip_norm: Option<f64>,
    /// Epochs without strict improvement before stopping; 0 disables.
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub optimizer: OptimizerKind,
    /// Events per optimizer step; 0 means one full-batch step per epoch.
    pub batch_events: usize,
    pub threshold: f64,
}

impl TrainConfig {
    pub fn new(dims: ModelDims) -> Self {
        Self {
            dims,
            model: ModelConfig {
                attention: crate::fusion::AttentionConfig {
                    heads: dims.heads,
                    ..Default::default()
                },
                ..Default::default()
            },
            learning_rate: 1e-3,
            epochs: 30,
            seed: 0,
            grad_clip_norm: Some(5.0),
            early_stop_patience: 5,
            early_stop_metric: StopMetric::F1,
            optimizer: OptimizerKind::default(),
            batch_events: 0,
            threshold: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.dims.validate()?;
        if self.model.attention.heads != self.dims.heads {
            return Err(Error::config("model.heads", "attention heads disagree with model dims"));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("train.learning_rate", "must be a finite non-negative number"));
        }
        if self.epochs == 0 {
            return Err(Error::config("train.epochs", "must be at least 1"));
        }
        if let Some(c) = self.grad_clip_norm {
            if !(c > 0.0) {
                return Err(Error::config("train.grad_clip_norm", "must be positive"));
            }
        }
        if let OptimizerKind::Adam { beta1, beta2, eps } = self.optimizer {
            if !(0.0..1.0).contains(&beta1) || !(0.0..1.0).contains(&beta2) || !(eps > 0.0) {
                return Err(Error::config("train.optimizer", "adam needs β1, β2 in [0, 1) and ε > 0"));
            }
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return Err(Error::config("eval.threshold", "must lie in [0, 1]"));
        }
        if !(self.model.trend.beta >= 0.0 && self.model.trend.beta <= 1.0) {
            return Err(Error::config("trend.beta", "must lie in [0, 1]"));
        }
        if !(self.model.trend.alpha >= 0.0) {
            return Err(Error::config("trend.alpha", "must be non-negative"));
        }
        self.model.objective.validate()
    }
}

/// First-order optimizer state.
#[derive(Clone, Debug)]
pub struct Optimizer {
    kind: OptimizerKind,
    lr: f64,
    step: i32,
    m: Option<Gradients>,
    v: Option<Gradients>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, lr: f64) -> Self {
        Self {
            kind,
            lr,
            step: 0,
            m: None,
            v: None,
        }
    }

    pub fn step(&mut self, params: &mut ModelParams, grads: &Gradients) {
        match self.kind {
            OptimizerKind::Sgd => {
                for (name, p) in params.iter_mut() {
                    p.scaled_add(-self.lr, grads.get(name));
                }
            }
            OptimizerKind::Adam { beta1, beta2, eps } => {
                self.step += 1;
                let m = self.m.get_or_insert_with(|| Gradients::zeros_like(params));
                let v = self.v.get_or_insert_with(|| Gradients::zeros_like(params));
                let c1 = 1.0 - beta1.powi(self.step);
                let c2 = 1.0 - beta2.powi(self.step);
                for (name, p) in params.iter_mut() {
                    let g = grads.get(name);
                    let m = m.get_mut(name);
                    let v = v.get_mut(name);
                    ndarray::Zip::from(p)
                        .and(m)
                        .and(v)
                        .and(g)
                        .for_each(|p, m, v, &g| {
                            *m = beta1 * *m + (1.0 - beta1) * g;
                            *v = beta2 * *v + (1.0 - beta2) * g * g;
                            let mhat = *m / c1;
                            let vhat = *v / c2;
                            *p -= self.lr * mhat / (vhat.sqrt() + eps);
                        });
                }
            }
        }
    }
}

/// Rescales `grads` so its global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_global_norm(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm {
        grads.scale(max_norm / norm);
    }
    norm
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub tc: f64,
    pub reg: f64,
    pub total: f64,
    pub grad_norm: f64,
    pub val_accuracy: Option<f64>,
    pub val_precision: Option<f64>,
    pub val_recall: Option<f64>,
    pub val_f1: Option<f64>,
    pub val_auc: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned; `None` means the final ones.
    pub best_epoch: Option<usize>,
}

impl History {
    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let mut w = csv::Writer::from_path(path)
            .map_err(|e| Error::format("history.csv", e.to_string()))?;
        for r in &self.epochs {
            w.serialize(r).map_err(|e| Error::format("history.csv", e.to_string()))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn read_csv(path: impl AsRef<Path>) -> Result<Self> {
        let mut r = csv::Reader::from_path(path.as_ref())
            .map_err(|e| Error::format("history.csv", e.to_string()))?;
        let epochs = r
            .deserialize()
            .collect::<std::result::Result<Vec<EpochRecord>, _>>()
            .map_err(|e| Error::format("history.csv", e.to_string()))?;
        Ok(Self { epochs, best_epoch: None })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub history: History,
}

/// Metrics over the posts of `split` (all covered posts when `split` is `None`).
pub fn evaluate_split(ds: &Dataset, probs: &[Option<f64>], split: Option<Split>, threshold: f64) -> Result<EvalResult> {
    let (p, y): (Vec<f64>, Vec<u8>) = (0..ds.len())
        .filter(|&i| split.is_none_or(|s| ds.split(i) == s))
        .filter_map(|i| probs[i].map(|p| (p, ds.posts[i].label)))
        .unzip();
    if p.is_empty() {
        let name = split.map_or("all", Split::as_str);
        return Err(Error::Dataset(format!("split `{name}` has no posts to evaluate")));
    }
    evaluate(&p, &y, threshold)
}

fn mining_active(cfg: &TrainConfig, epoch: usize) -> bool {
    cfg.model.objective.mining_rho < 1.0 && epoch > cfg.model.objective.mining_warmup_epochs
}

fn diverged(epoch: usize, reason: String, last_good: &ModelParams) -> Error {
    Error::Diverged {
        epoch,
        reason,
        last_good: Box::new(last_good.clone()),
    }
}

/// One optimizer step on a subset of events; returns the pre-step pass.
fn step_on(
    ds: &Dataset,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    params: &mut ModelParams,
    cfg: &TrainConfig,
    opt: &mut Optimizer,
    epoch: usize,
    reuse: Option<ForwardPass>,
) -> Result<(ForwardPass, f64)> {
    let fp = match reuse {
        Some(fp) => fp,
        None => forward(ds, events, windows, params, &cfg.model, mining_active(cfg, epoch))?,
    };
    if !fp.report.total.is_finite() {
        return Err(diverged(epoch, "total loss is not finite".into(), params));
    }
    let mut grads = match backward(&fp) {
        Ok(g) => g,
        Err(Error::NonFiniteGradient(name)) => {
            return Err(diverged(epoch, format!("non-finite gradient for `{name}`"), params))
        }
        Err(e) => return Err(e),
    };
    let norm = match cfg.grad_clip_norm {
        Some(c) => clip_global_norm(&mut grads, c),
        None => grads.global_norm(),
    };
    let before = params.clone();
    opt.step(params, &grads);
    if !params.is_finite() {
        *params = before;
        return Err(diverged(epoch, "parameters became non-finite".into(), params));
    }
    Ok((fp, norm))
}

pub fn train(
    ds: &Dataset,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    init: ModelParams,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    train_with(ds, events, windows, init, cfg, |_| {})
}

/// Trains from `init`, calling `on_epoch` after each epoch.
pub fn train_with(
    ds: &Dataset,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    init: ModelParams,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainOutcome> {
    cfg.validate()?;
    init.check_dims(&cfg.dims)?;
    if events.len() != windows.len() {
        return Err(Error::InvalidArgument("one window sequence per event required".into()));
    }
    let covered_train = events
        .iter()
        .flat_map(|e| &e.member_indices)
        .any(|&i| ds.split(i) == Split::Train);
    if !covered_train {
        return Err(Error::Dataset("no training posts contribute to the loss".into()));
    }
    let has_val = (0..ds.len()).any(|i| ds.split(i) == Split::Val);

    let mut params = init;
    let mut opt = Optimizer::new(cfg.optimizer, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x005e_ed0f_e7e7);
    let mut history = History::default();
    let mut best: Option<(f64, usize, ModelParams)> = None;
    let mut stale = 0;
    // Forward pass without mining at the current parameters, left over from
    // the previous epoch's validation.
    let mut cached: Option<ForwardPass> = None;

    for epoch in 1..=cfg.epochs {
        // Loss terms are reported at the parameters the epoch started from.
        let reg = params.sq_norm();
        let (ce, tc, grad_norm) = if cfg.batch_events == 0 || cfg.batch_events >= events.len() {
            let reuse = cached.take().filter(|_| !mining_active(cfg, epoch));
            let (fp, norm) = step_on(ds, events, windows, &mut params, cfg, &mut opt, epoch, reuse)?;
            (fp.report.ce, fp.report.tc, norm)
        } else {
            cached = None;
            let mut order: Vec<usize> = (0..events.len()).collect();
            order.shuffle(&mut rng);
            let (mut ce, mut tc, mut norm2) = (0.0, 0.0, 0.0f64);
            for chunk in order.chunks(cfg.batch_events) {
                let mut idx = chunk.to_vec();
                idx.sort_unstable();
                let ev: Vec<PseudoEvent> = idx.iter().map(|&k| events[k].clone()).collect();
                let ws: Vec<WindowSequence> = idx.iter().map(|&k| windows[k].clone()).collect();
                let (fp, norm) = step_on(ds, &ev, &ws, &mut params, cfg, &mut opt, epoch, None)?;
                ce += fp.report.ce;
                tc += fp.report.tc;
                norm2 = norm2.max(norm);
            }
            (ce, tc, norm2)
        };
        let obj = &cfg.model.objective;
        let mut record = EpochRecord {
            epoch,
            ce,
            tc,
            reg,
            total: ce + obj.lambda_tc * tc + obj.lambda_reg * reg,
            grad_norm,
            val_accuracy: None,
            val_precision: None,
            val_recall: None,
            val_f1: None,
            val_auc: None,
        };

        let mut stop = false;
        if has_val {
            let fp = forward(ds, events, windows, &params, &cfg.model, false)?;
            {
                if let Ok(r) = evaluate_split(ds, fp.probabilities(), Some(Split::Val), cfg.threshold) {
                    record.val_accuracy = Some(r.accuracy);
                    record.val_precision = Some(r.precision);
                    record.val_recall = Some(r.recall);
                    record.val_f1 = Some(r.f1);
                    record.val_auc = r.auc;
                    if let Some(m) = cfg.early_stop_metric.read(&r) {
                        if best.as_ref().is_none_or(|(b, _, _)| m > *b) {
                            best = Some((m, epoch, params.clone()));
                            stale = 0;
                        } else {
                            stale += 1;
                        }
                    } else {
                        stale += 1;
                    }
                    stop = cfg.early_stop_patience > 0 && stale >= cfg.early_stop_patience;
                }
            }
            cached = Some(fp);
        }
        on_epoch(&record);
        history.epochs.push(record);
        if stop {
            break;
        }
    }

    if let Some((_, epoch, p)) = best {
        history.best_epoch = Some(epoch);
        params = p;
    }
    Ok(TrainOutcome { params, history })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 }
    }

    #[test]
    fn adam_with_zero_gradient_is_a_no_op() {
        let mut p = ModelParams::init(dims(), 3).unwrap();
        let before = p.clone();
        let g = Gradients::zeros_like(&p);
        let mut opt = Optimizer::new(OptimizerKind::default(), 0.1);
        for _ in 0..3 {
            opt.step(&mut p, &g);
        }
        assert_eq!(p, before);
    }

    #[test]
    fn sgd_moves_against_the_gradient() {
        let mut p = ModelParams::zeros(dims()).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("clf.b_c")[[0, 0]] = 2.0;
        Optimizer::new(OptimizerKind::Sgd, 0.5).step(&mut p, &g);
        assert_eq!(p.get("clf.b_c")[[0, 0]], -1.0);
    }

    #[test]
    fn first_adam_step_has_magnitude_lr() {
        let mut p = ModelParams::zeros(dims()).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("clf.b_c")[[0, 0]] = 0.3;
        Optimizer::new(OptimizerKind::default(), 0.01).step(&mut p, &g);
        assert!((p.get("clf.b_c")[[0, 0]] + 0.01).abs() < 1e-9);
    }

    #[test]
    fn clipping_caps_global_norm() {
        let p = ModelParams::zeros(dims()).unwrap();
        let mut g = Gradients::zeros_like(&p);
        g.get_mut("clf.b_c")[[0, 0]] = 3.0;
        g.get_mut("clf.W_c")[[0, 0]] = 4.0;
        assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
        assert!((g.global_norm() - 1.0).abs() < 1e-12);
        assert_eq!(clip_global_norm(&mut g, 2.0), g.global_norm());
    }

    #[test]
    fn config_rejects_bad_values() {
        let mut c = TrainConfig::new(ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 });
        assert!(c.validate().is_ok());
        c.epochs = 0;
        assert!(c.validate().unwrap_err().is_config());
        c.epochs = 1;
        c.learning_rate = -1.0;
        assert!(c.validate().unwrap_err().is_config());
    }
}
