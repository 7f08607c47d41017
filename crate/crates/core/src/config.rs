//! Run configuration: every module's settings under dotted keys.
//!
//! A config file is a JSON object. Keys may be written flat
//! (`{"train.epochs": 5}`) or nested (`{"train": {"epochs": 5}}`); both
//! forms flatten to the same dotted keys. Unknown keys are rejected.

use std::fs;
use std::path::Path;

use indexmap::IndexMap;
use serde::de::DeserializeOwned;
use serde::Serialize;
use serde_json::{json, Map, Value};

use crate::clustering::Linkage;
use crate::dataset::SplitFractions;
use crate::error::{Error, Result};
use crate::fusion::{AttentionConfig, AttentionScale, AttentionScope};
use crate::model::ModelConfig;
use crate::objective::{ObjectiveConfig, WeightScope};
use crate::params::ModelDims;
use crate::trainer::{OptimizerKind, StopMetric, TrainConfig};
use crate::trend::TrendConfig;
use crate::windowing::{window_presets, DatasetKind};

/// Every recognised key with a one-line description.
pub const KEYS: &[(&str, &str)] = &[
    ("seed", "master seed for splits, initialization and batching (alias: init.seed)"),
    ("window.preset", "fakeddit | ind | covid; supplies span and stride when they are null"),
    ("window.span_secs", "window span in seconds, null to use the preset"),
    ("window.stride_secs", "window stride in seconds, null for span/2 or the preset"),
    ("model.d", "model width d"),
    ("model.heads", "attention heads H; must divide d"),
    ("attention.scope", "window | post"),
    ("attention.scale", "head (divide by sqrt(d/H)) | model (divide by sqrt(d))"),
    ("trend.alpha", "temporal decay rate per second"),
    ("trend.beta", "momentum smoothing in [0, 1]"),
    ("loss.lambda_tc", "temporal-consistency weight"),
    ("loss.lambda_reg", "l2 regularization weight"),
    ("loss.epsilon", "class-weight smoothing"),
    ("loss.tc_clamp", "use max(sim, 0) in the consistency term"),
    ("mining.rho", "fraction of training terms kept by hard-example mining; 1.0 disables"),
    ("mining.warmup_epochs", "epochs run without mining"),
    ("weights.scope", "event | global class counts"),
    ("weights.adaptive", "false forces w_0 = w_1 = 1"),
    ("train.learning_rate", "step size"),
    ("train.epochs", "maximum number of epochs"),
    ("train.optimizer", "adam | sgd"),
    ("train.adam_beta1", "Adam first-moment decay"),
    ("train.adam_beta2", "Adam second-moment decay"),
    ("train.adam_eps", "Adam denominator guard"),
    ("train.grad_clip_norm", "global gradient-norm cap, null disables"),
    ("train.early_stop_patience", "epochs without validation improvement before stopping; 0 disables"),
    ("train.early_stop_metric", "f1 | auc | accuracy"),
    ("train.batch_events", "pseudo-events per optimizer step; 0 for full batch"),
    ("cluster.num_clusters", "number of pseudo-events; 0 picks ceil(N/10)"),
    ("cluster.linkage", "average | complete | single"),
    ("cluster.group_key", "manifest field that defines events directly, null to cluster"),
    ("split.train", "training fraction"),
    ("split.val", "validation fraction"),
    ("split.test", "test fraction"),
    ("eval.threshold", "decision threshold for accuracy, precision, recall and F1"),
];

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub window_preset: DatasetKind,
    pub span_secs: Option<i64>,
    pub stride_secs: Option<i64>,
    pub d: usize,
    pub heads: usize,
    pub attention_scope: AttentionScope,
    pub attention_scale: AttentionScale,
    pub trend: TrendConfig,
    pub objective: ObjectiveConfig,
    pub learning_rate: f64,
    pub epochs: usize,
    pub optimizer: String,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub grad_clip_norm: Option<f64>,
    pub early_stop_patience: usize,
    pub early_stop_metric: StopMetric,
    pub batch_events: usize,
    pub num_clusters: usize,
    pub linkage: Linkage,
    pub group_key: Option<String>,
    pub split: SplitFractions,
    pub threshold: f64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            window_preset: DatasetKind::Fakeddit,
            span_secs: None,
            stride_secs: None,
            d: 32,
            heads: 4,
            attention_scope: AttentionScope::Window,
            attention_scale: AttentionScale::Head,
            trend: TrendConfig::default(),
            objective: ObjectiveConfig::default(),
            learning_rate: 1e-3,
            epochs: 30,
            optimizer: "adam".into(),
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip_norm: Some(5.0),
            early_stop_patience: 5,
            early_stop_metric: StopMetric::F1,
            batch_events: 1,
            num_clusters: 0,
            linkage: Linkage::Average,
            group_key: None,
            split: SplitFractions::default(),
            threshold: 0.5,
        }
    }
}

fn flatten_into(prefix: &str, obj: &Map<String, Value>, out: &mut IndexMap<String, Value>) {
    for (k, v) in obj {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        match v {
            Value::Object(inner) => flatten_into(&key, inner, out),
            other => {
                out.insert(key, other.clone());
            }
        }
    }
}

fn num(key: &str, v: &Value) -> Result<f64> {
    v.as_f64()
        .filter(|x| x.is_finite())
        .ok_or_else(|| Error::config(key, format!("expected a number, got {v}")))
}

fn count(key: &str, v: &Value) -> Result<usize> {
    v.as_u64()
        .map(|x| x as usize)
        .ok_or_else(|| Error::config(key, format!("expected a non-negative integer, got {v}")))
}

fn int(key: &str, v: &Value) -> Result<i64> {
    v.as_i64().ok_or_else(|| Error::config(key, format!("expected an integer, got {v}")))
}

fn flag(key: &str, v: &Value) -> Result<bool> {
    v.as_bool().ok_or_else(|| Error::config(key, format!("expected true or false, got {v}")))
}

fn choice<T: DeserializeOwned>(key: &str, v: &Value) -> Result<T> {
    serde_json::from_value(v.clone()).map_err(|_| Error::config(key, format!("unrecognised value {v}")))
}

fn nullable<T>(key: &str, v: &Value, f: impl Fn(&str, &Value) -> Result<T>) -> Result<Option<T>> {
    if v.is_null() {
        Ok(None)
    } else {
        f(key, v).map(Some)
    }
}

fn to_value<T: Serialize>(x: T) -> Value {
    serde_json::to_value(x).expect("config values serialize")
}

impl RunConfig {
    pub fn from_file(path: impl AsRef<Path>) -> Result<Self> {
        let mut cfg = Self::default();
        cfg.merge_file(path)?;
        Ok(cfg)
    }

    pub fn merge_file(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let value: Value = serde_json::from_str(&text)
            .map_err(|e| Error::config(path.display().to_string(), format!("invalid JSON: {e}")))?;
        self.merge_json(&value)
    }

    pub fn merge_json(&mut self, value: &Value) -> Result<()> {
        let Value::Object(obj) = value else {
            return Err(Error::config("<root>", "config must be a JSON object"));
        };
        let mut flat = IndexMap::new();
        flatten_into("", obj, &mut flat);
        for (k, v) in &flat {
            self.set(k, v)?;
        }
        Ok(())
    }

    /// Applies a `key=value` override; the value is parsed as JSON and falls
    /// back to a plain string.
    pub fn apply_override(&mut self, assignment: &str) -> Result<()> {
        let (key, raw) = assignment
            .split_once('=')
            .ok_or_else(|| Error::config(assignment, "override must look like key=value"))?;
        let key = key.trim();
        let value = serde_json::from_str(raw.trim()).unwrap_or_else(|_| Value::String(raw.trim().to_string()));
        self.set(key, &value)
    }

    pub fn set(&mut self, key: &str, v: &Value) -> Result<()> {
        match key {
            "seed" | "init.seed" => self.seed = v.as_u64().ok_or_else(|| Error::config(key, "expected a non-negative integer"))?,
            "window.preset" => self.window_preset = choice(key, v)?,
            "window.span_secs" => self.span_secs = nullable(key, v, int)?,
            "window.stride_secs" => self.stride_secs = nullable(key, v, int)?,
            "model.d" => self.d = count(key, v)?,
            "model.heads" => self.heads = count(key, v)?,
            "attention.scope" => self.attention_scope = choice(key, v)?,
            "attention.scale" => self.attention_scale = choice(key, v)?,
            "trend.alpha" => self.trend.alpha = num(key, v)?,
            "trend.beta" => self.trend.beta = num(key, v)?,
            "loss.lambda_tc" => self.objective.lambda_tc = num(key, v)?,
            "loss.lambda_reg" => self.objective.lambda_reg = num(key, v)?,
            "loss.epsilon" => self.objective.epsilon = num(key, v)?,
            "loss.tc_clamp" => self.objective.tc_clamp = flag(key, v)?,
            "mining.rho" => self.objective.mining_rho = num(key, v)?,
            "mining.warmup_epochs" => self.objective.mining_warmup_epochs = count(key, v)?,
            "weights.scope" => self.objective.weights_scope = choice::<WeightScope>(key, v)?,
            "weights.adaptive" => self.objective.adaptive_weights = flag(key, v)?,
            "train.learning_rate" => self.learning_rate = num(key, v)?,
            "train.epochs" => self.epochs = count(key, v)?,
            "train.optimizer" => {
                let s = v.as_str().ok_or_else(|| Error::config(key, "expected a string"))?;
                if s != "adam" && s != "sgd" {
                    return Err(Error::config(key, format!("unknown optimizer `{s}`")));
                }
                self.optimizer = s.to_string();
            }
            "train.adam_beta1" => self.adam_beta1 = num(key, v)?,
            "train.adam_beta2" => self.adam_beta2 = num(key, v)?,
            "train.adam_eps" => self.adam_eps = num(key, v)?,
            "train.grad_clip_norm" => self.grad_clip_norm = nullable(key, v, num)?,
            "train.early_stop_patience" => self.early_stop_patience = count(key, v)?,
            "train.early_stop_metric" => self.early_stop_metric = choice(key, v)?,
            "train.batch_events" => self.batch_events = count(key, v)?,
            "cluster.num_clusters" => self.num_clusters = count(key, v)?,
            "cluster.linkage" => self.linkage = choice(key, v)?,
            "cluster.group_key" => {
                self.group_key = nullable(key, v, |k, v| {
                    v.as_str().map(str::to_string).ok_or_else(|| Error::config(k, "expected a string"))
                })?
            }
            "split.train" => self.split.train = num(key, v)?,
            "split.val" => self.split.val = num(key, v)?,
            "split.test" => self.split.test = num(key, v)?,
            "eval.threshold" => self.threshold = num(key, v)?,
            other => return Err(Error::config(other, "unknown configuration key")),
        }
        Ok(())
    }

    /// Current value of every key, in documentation order.
    pub fn to_dotted(&self) -> IndexMap<String, Value> {
        KEYS.iter()
            .map(|&(k, _)| {
                let v = match k {
                    "seed" => json!(self.seed),
                    "window.preset" => to_value(self.window_preset),
                    "window.span_secs" => json!(self.span_secs),
                    "window.stride_secs" => json!(self.stride_secs),
                    "model.d" => json!(self.d),
                    "model.heads" => json!(self.heads),
                    "attention.scope" => to_value(self.attention_scope),
                    "attention.scale" => to_value(self.attention_scale),
                    "trend.alpha" => json!(self.trend.alpha),
                    "trend.beta" => json!(self.trend.beta),
                    "loss.lambda_tc" => json!(self.objective.lambda_tc),
                    "loss.lambda_reg" => json!(self.objective.lambda_reg),
                    "loss.epsilon" => json!(self.objective.epsilon),
                    "loss.tc_clamp" => json!(self.objective.tc_clamp),
                    "mining.rho" => json!(self.objective.mining_rho),
                    "mining.warmup_epochs" => json!(self.objective.mining_warmup_epochs),
                    "weights.scope" => to_value(self.objective.weights_scope),
                    "weights.adaptive" => json!(self.objective.adaptive_weights),
                    "train.learning_rate" => json!(self.learning_rate),
                    "train.epochs" => json!(self.epochs),
                    "train.optimizer" => json!(self.optimizer),
                    "train.adam_beta1" => json!(self.adam_beta1),
                    "train.adam_beta2" => json!(self.adam_beta2),
                    "train.adam_eps" => json!(self.adam_eps),
                    "train.grad_clip_norm" => json!(self.grad_clip_norm),
                    "train.early_stop_patience" => json!(self.early_stop_patience),
                    "train.early_stop_metric" => to_value(self.early_stop_metric),
                    "train.batch_events" => json!(self.batch_events),
                    "cluster.num_clusters" => json!(self.num_clusters),
                    "cluster.linkage" => to_value(self.linkage),
                    "cluster.group_key" => json!(self.group_key),
                    "split.train" => json!(self.split.train),
                    "split.val" => json!(self.split.val),
                    "split.test" => json!(self.split.test),
                    "eval.threshold" => json!(self.threshold),
                    _ => unreachable!("every documented key has a value"),
                };
                (k.to_string(), v)
            })
            .collect()
    }

    pub fn to_json(&self) -> String {
        let map: Map<String, Value> = self.to_dotted().into_iter().collect();
        serde_json::to_string_pretty(&Value::Object(map)).expect("config serializes")
    }

    /// `(span, stride)` after applying the preset.
    pub fn window(&self) -> Result<(i64, i64)> {
        let (p_span, p_stride) = window_presets(self.window_preset);
        let (span, stride) = match (self.span_secs, self.stride_secs) {
            (None, None) => (p_span, p_stride),
            (Some(s), None) => (s, s / 2),
            (None, Some(t)) => (p_span, t),
            (Some(s), Some(t)) => (s, t),
        };
        if span <= 0 {
            return Err(Error::config("window.span_secs", "must be positive"));
        }
        if stride <= 0 {
            return Err(Error::config("window.stride_secs", "must be positive"));
        }
        Ok((span, stride))
    }

    pub fn num_clusters_for(&self, n_posts: usize) -> usize {
        if self.num_clusters == 0 {
            n_posts.div_ceil(10).max(1)
        } else {
            self.num_clusters
        }
    }

    pub fn dims(&self, d_text: usize, d_img: usize) -> ModelDims {
        ModelDims { d: self.d, heads: self.heads, d_text, d_img }
    }

    pub fn train_config(&self, d_text: usize, d_img: usize) -> Result<TrainConfig> {
        self.validate()?;
        let dims = self.dims(d_text, d_img);
        let optimizer = match self.optimizer.as_str() {
            "sgd" => OptimizerKind::Sgd,
            _ => OptimizerKind::Adam {
                beta1: self.adam_beta1,
                beta2: self.adam_beta2,
                eps: self.adam_eps,
            },
        };
        let cfg = TrainConfig {
            dims,
            model: ModelConfig {
                attention: AttentionConfig {
                    heads: self.heads,
                    scope: self.attention_scope,
                    scale: self.attention_scale,
                },
                trend: self.trend,
                objective: self.objective,
            },
            learning_rate: self.learning_rate,
            epochs: self.epochs,
            seed: self.seed,
            grad_clip_norm: self.grad_clip_norm,
            early_stop_patience: self.early_stop_patience,
            early_stop_metric: self.early_stop_metric,
            optimizer,
            batch_events: self.batch_events,
            threshold: self.threshold,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    /// Checks that do not depend on the dataset.
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 {
            return Err(Error::config("model.d", "must be positive"));
        }
        if self.heads == 0 || !self.d.is_multiple_of(self.heads) {
            return Err(Error::config("model.heads", format!("must divide model.d = {}", self.d)));
        }
        self.window()?;
        let SplitFractions { train, val, test } = self.split;
        if !(train > 0.0 && val > 0.0 && test > 0.0) {
            return Err(Error::config("split", "fractions must be positive"));
        }
        if (train + val + test - 1.0).abs() > 1e-9 {
            return Err(Error::config("split", "fractions must sum to 1"));
        }
        if let Some(k) = &self.group_key {
            if k.is_empty() {
                return Err(Error::config("cluster.group_key", "must not be empty"));
            }
        }
        self.objective.validate()
    }
}

/// Text block listing every key and its default, for `--help`.
pub fn describe_defaults() -> String {
    let defaults = RunConfig::default().to_dotted();
    let width = KEYS.iter().map(|(k, _)| k.len()).max().unwrap_or(0);
    let mut out = String::from("Configuration keys (JSON file via --config, or --set key=value):\n");
    for (k, doc) in KEYS {
        out.push_str(&format!("  {k:<width$}  {:<12} {doc}\n", defaults[*k].to_string()));
    }
    out
}
