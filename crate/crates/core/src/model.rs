//! End-to-end forward pass over pseudo-events and its exact reverse pass.
//!
//! Each event is recorded on its own tape, so events can be processed in
//! parallel. Gradients are reduced in event order, which keeps results
//! bitwise reproducible regardless of scheduling.

use indexmap::IndexMap;
use ndarray::{Array2, Axis};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::clustering::PseudoEvent;
use crate::dataset::{Dataset, Split};
use crate::error::{Error, Result};
use crate::fusion::{affine_rows, fuse_graph, AttentionConfig, FusionGraph, FusionVars};
use crate::objective::{
    class_weights, mining_mask, readout_windows, train_counts, ClassCounts, CeTerm, EventLoss,
    LossReport, ObjectiveConfig, WeightScope,
};
use crate::params::{BoundParams, ModelParams};
use crate::tape::{BceTerm, Mat, Tape, Var};
use crate::trend::{decay_weights, lstm_graph, trend_features_graph, LstmVars, TrendConfig, TrendState};
use crate::windowing::WindowSequence;

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub attention: AttentionConfig,
    pub trend: TrendConfig,
    pub objective: ObjectiveConfig,
}

/// Intermediates of one window inside an [`EventPass`].
#[derive(Clone, Debug)]
pub struct WindowGraph {
    pub fusion: FusionGraph,
    pub aggregate: Var,
    pub decay: Vec<f64>,
}

/// The recorded computation for one pseudo-event.
pub struct EventPass {
    pub event_id: usize,
    tape: Tape,
    bound: BoundParams,
    pub windows: Vec<WindowGraph>,
    pub states: Var,
    pub probs: Var,
    pub tc: Var,
    loss: Option<Var>,
    /// `(post, window position)` of each member's readout.
    pub readout: Vec<(usize, usize)>,
    pub trend: TrendState,
    pub ce: f64,
    pub weights: (f64, f64),
}

impl EventPass {
    pub fn tape(&self) -> &Tape {
        &self.tape
    }

    pub fn value(&self, v: Var) -> &Mat {
        self.tape.value(v)
    }

    /// Probability read out of the event's final window.
    pub fn event_probability(&self) -> f64 {
        let p = self.tape.value(self.probs);
        p[[p.nrows() - 1, 0]]
    }
}

pub struct ForwardPass {
    pub events: Vec<EventPass>,
    pub report: LossReport,
    lambda_reg: f64,
    params: ModelParams,
}

impl ForwardPass {
    pub fn probabilities(&self) -> &[Option<f64>] {
        &self.report.probabilities
    }

    pub fn trend_states(&self) -> Vec<&TrendState> {
        self.events.iter().map(|e| &e.trend).collect()
    }
}

/// Gradient table keyed by parameter name, in parameter order.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    tensors: IndexMap<String, Mat>,
}

impl Gradients {
    pub fn zeros_like(params: &ModelParams) -> Self {
        Self {
            tensors: params
                .iter()
                .map(|(n, t)| (n.to_string(), Array2::zeros(t.dim())))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> &Mat {
        &self.tensors[name]
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors.get_mut(name).expect("known parameter")
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn global_norm(&self) -> f64 {
        self.tensors
            .values()
            .flat_map(|t| t.iter())
            .map(|x| x * x)
            .sum::<f64>()
            .sqrt()
    }

    pub fn scale(&mut self, k: f64) {
        for t in self.tensors.values_mut() {
            t.mapv_inplace(|x| x * k);
        }
    }
}

/// Builds an event's tape up to the per-window probabilities and the
/// consistency term. The cross-entropy node is added once class weights and
/// the mining mask are known.
fn build_event(
    ds: &Dataset,
    event: &PseudoEvent,
    seq: &WindowSequence,
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<EventPass> {
    if seq.is_empty() {
        return Err(Error::InvalidArgument("event has no windows".into()));
    }
    let readout = readout_windows(event, seq)?;
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = FusionVars::from_bound(&bound);
    let lstm = LstmVars::from_bound(&bound);

    let members = &event.member_indices;
    let local: std::collections::HashMap<usize, usize> =
        members.iter().enumerate().map(|(r, &p)| (p, r)).collect();
    let text_in = tape.leaf(ds.text_matrix().select(Axis(0), members));
    let img_in = tape.leaf(ds.image_matrix().select(Axis(0), members));
    let text_all = affine_rows(&mut tape, text_in, fv.text_enc);
    let img_all = affine_rows(&mut tape, img_in, fv.img_enc);

    let mut windows = Vec::with_capacity(seq.len());
    let mut aggregates = Vec::with_capacity(seq.len());
    for w in &seq.windows {
        let rows: Vec<usize> = w
            .members
            .iter()
            .map(|p| {
                local.get(p).copied().ok_or_else(|| {
                    Error::InvalidArgument(format!("window {} holds post {p} outside the event", w.index))
                })
            })
            .collect::<Result<_>>()?;
        let t = tape.gather_rows(text_all, &rows);
        let i = tape.gather_rows(img_all, &rows);
        let fusion = fuse_graph(&mut tape, t, i, &fv, &cfg.attention)?;
        let ts: Vec<i64> = w.members.iter().map(|&p| ds.posts[p].timestamp).collect();
        let decay = decay_weights(&ts, w.t_max_local, cfg.trend.alpha);
        let aggregate = tape.weighted_sum_rows(fusion.fused, &decay);
        aggregates.push(aggregate);
        windows.push(WindowGraph { fusion, aggregate, decay });
    }

    let (features, momenta) = trend_features_graph(&mut tape, &aggregates, cfg.trend.beta);
    let lstm_out = lstm_graph(&mut tape, &features, &lstm)?;
    let states = lstm_out.states.expect("at least one window");
    let logits = tape.matmul_t(states, bound.var("clf.W_c"));
    let logits = tape.add_row(logits, bound.var("clf.b_c"));
    let probs = tape.sigmoid(logits);
    let tc = tape.temporal_consistency(states, cfg.objective.tc_clamp);

    let d = params.dims.d;
    let row = |tape: &Tape, v: Var| tape.value(v).row(0).to_vec();
    let trend = TrendState {
        aggregates: aggregates.iter().map(|&v| row(&tape, v)).collect(),
        shifts: features.iter().map(|&f| tape.value(f).row(0).to_vec()[d..2 * d].to_vec()).collect(),
        momenta: momenta.iter().map(|&m| tape.scalar_value(m)).collect(),
        hidden: lstm_out.hidden.iter().map(|&v| row(&tape, v)).collect(),
        cells: lstm_out.cells.iter().map(|&v| row(&tape, v)).collect(),
    };

    Ok(EventPass {
        event_id: event.event_id,
        tape,
        bound,
        windows,
        states,
        probs,
        tc,
        loss: None,
        readout,
        trend,
        ce: 0.0,
        weights: (1.0, 1.0),
    })
}

/// Runs the full pipeline and assembles the loss. `mining` enables hard-example
/// mining (when the configured fraction is below 1).
pub fn forward(
    ds: &Dataset,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    params: &ModelParams,
    cfg: &ModelConfig,
    mining: bool,
) -> Result<ForwardPass> {
    if events.len() != windows.len() {
        return Err(Error::InvalidArgument("one window sequence per event required".into()));
    }
    if (ds.d_text, ds.d_img) != (params.dims.d_text, params.dims.d_img) {
        return Err(Error::Shape {
            name: "fusion.W_text/fusion.W_img".into(),
            expected: (params.dims.d_text, params.dims.d_img),
            found: (ds.d_text, ds.d_img),
        });
    }
    cfg.objective.validate()?;

    let mut passes: Vec<EventPass> = events
        .par_iter()
        .zip(windows.par_iter())
        .map(|(e, w)| build_event(ds, e, w, params, cfg).map_err(|err| err.in_event(e.event_id)))
        .collect::<Result<_>>()?;

    // Class weights and cross-entropy terms.
    let obj = &cfg.objective;
    let global_counts = {
        let mut c = ClassCounts::default();
        for i in ds.split_indices(Split::Train) {
            c.add(ds.posts[i].label);
        }
        c
    };
    let mut terms: Vec<(usize, usize, CeTerm)> = Vec::new();
    for (k, (pass, event)) in passes.iter_mut().zip(events).enumerate() {
        pass.weights = if !obj.adaptive_weights {
            (1.0, 1.0)
        } else {
            let counts = match obj.weights_scope {
                WeightScope::Event => train_counts(&event.member_indices, ds),
                WeightScope::Global => global_counts,
            };
            class_weights(counts, obj.epsilon)
        };
        let probs = pass.tape.value(pass.probs);
        for &(post, w) in &pass.readout {
            if ds.split(post) != Split::Train {
                continue;
            }
            let label = ds.posts[post].label;
            let weight = if label == 1 { pass.weights.1 } else { pass.weights.0 };
            terms.push((k, w, CeTerm { post, label, weight, prob: probs[[w, 0]] }));
        }
    }
    let values: Vec<f64> = terms.iter().map(|(_, _, t)| t.value()).collect();
    let keys: Vec<usize> = terms.iter().map(|(_, _, t)| t.post).collect();
    let rho = if mining { obj.mining_rho } else { 1.0 };
    let mask = mining_mask(&values, &keys, rho);

    let mut per_event_terms: Vec<Vec<BceTerm>> = vec![Vec::new(); passes.len()];
    let mut mined = vec![false; ds.len()];
    for ((k, w, t), &keep) in terms.iter().zip(&mask) {
        if keep {
            per_event_terms[*k].push(BceTerm { row: *w, label: t.label, weight: t.weight });
            mined[t.post] = true;
        }
    }

    passes
        .par_iter_mut()
        .zip(per_event_terms.into_par_iter())
        .for_each(|(pass, bce_terms)| {
            let ce = pass.tape.weighted_bce(pass.probs, bce_terms);
            let tc = pass.tape.scale(pass.tc, obj.lambda_tc);
            let loss = pass.tape.add(ce, tc);
            pass.ce = pass.tape.scalar_value(ce);
            pass.loss = Some(loss);
        });

    let mut probabilities = vec![None; ds.len()];
    let mut per_event = Vec::with_capacity(passes.len());
    let (mut ce, mut tc) = (0.0, 0.0);
    for &k in &reduction_order(&passes) {
        let pass = &passes[k];
        let probs = pass.tape.value(pass.probs);
        for &(post, w) in &pass.readout {
            probabilities[post] = Some(probs[[w, 0]]);
        }
        let tc_e = pass.tape.scalar_value(pass.tc);
        ce += pass.ce;
        tc += tc_e;
        per_event.push(EventLoss {
            event_id: pass.event_id,
            ce: pass.ce,
            tc: tc_e,
            w0: pass.weights.0,
            w1: pass.weights.1,
        });
    }
    let reg = params.sq_norm();
    let total = ce + obj.lambda_tc * tc + obj.lambda_reg * reg;
    Ok(ForwardPass {
        events: passes,
        report: LossReport {
            per_event,
            ce,
            tc,
            reg,
            total,
            probabilities,
            mined,
        },
        lambda_reg: obj.lambda_reg,
        params: params.clone(),
    })
}

/// Event positions by ascending event id; sums over events follow this
/// order so results do not depend on how events are listed.
fn reduction_order(passes: &[EventPass]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..passes.len()).collect();
    order.sort_by_key(|&k| passes[k].event_id);
    order
}

/// Exact gradients of the total loss for every parameter.
pub fn backward(fp: &ForwardPass) -> Result<Gradients> {
    let per_event: Vec<Vec<(usize, Mat)>> = fp
        .events
        .par_iter()
        .map(|pass| {
            let root = pass.loss.expect("forward assembles every event loss");
            let adj = pass.tape.backward(root);
            pass.bound
                .iter()
                .enumerate()
                .filter_map(|(k, (_, v))| adj.get(v).map(|g| (k, g.clone())))
                .collect()
        })
        .collect();

    let mut grads = Gradients::zeros_like(&fp.params);
    for e in reduction_order(&fp.events) {
        for (k, g) in &per_event[e] {
            let k = *k;
            let (_, slot) = grads.tensors.get_index_mut(k).expect("same parameter order");
            *slot += g;
        }
    }
    if fp.lambda_reg != 0.0 {
        for ((_, g), (_, p)) in grads.tensors.iter_mut().zip(fp.params.iter()) {
            g.scaled_add(2.0 * fp.lambda_reg, p);
        }
    }
    for (name, g) in grads.iter() {
        if g.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFiniteGradient(name.to_string()));
        }
    }
    Ok(grads)
}

/// Total loss only, for finite-difference checks.
pub fn total_loss_value(
    ds: &Dataset,
    events: &[PseudoEvent],
    windows: &[WindowSequence],
    params: &ModelParams,
    cfg: &ModelConfig,
) -> Result<f64> {
    Ok(forward(ds, events, windows, params, cfg, false)?.report.total)
}
