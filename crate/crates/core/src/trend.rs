//! Window aggregation with recency decay, semantic-shift and momentum
//! features, and the per-event LSTM that turns them into trend embeddings.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fusion::{stack_rows, FusedPost};
use crate::params::{BoundParams, ModelParams};
use crate::tape::{Mat, Tape, Var};
use crate::windowing::{Window, DAY};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrendConfig {
    /// Decay rate in 1/seconds.
    pub alpha: f64,
    pub beta: f64,
}

impl Default for TrendConfig {
    fn default() -> Self {
        Self {
            alpha: 1.0 / (2 * DAY) as f64,
            beta: 0.9,
        }
    }
}

/// Normalized decay weights `λ_i / Σλ`, with `λ_i = exp(−α (t_max − t_i))`.
pub fn decay_weights(timestamps: &[i64], t_max: i64, alpha: f64) -> Vec<f64> {
    let raw: Vec<f64> = timestamps
        .iter()
        .map(|&t| (-alpha * (t_max - t) as f64).exp())
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|l| l / total).collect()
}

#[derive(Clone, Copy, Debug)]
pub struct LstmVars {
    pub w: [Var; 4],
    pub u: [Var; 4],
    pub b: [Var; 4],
}

impl LstmVars {
    pub fn from_bound(b: &BoundParams) -> Self {
        let gate = |prefix: &str| {
            ["i", "f", "o", "c"].map(|g| b.var(&format!("lstm.{prefix}_{g}")))
        };
        Self {
            w: gate("W"),
            u: gate("U"),
            b: gate("b"),
        }
    }
}

/// Feature rows `[L_t ; Δ_t ; M_t]` for a sequence of `1 × d` aggregates.
/// Returns the feature vars and the momentum vars.
pub fn trend_features_graph(tape: &mut Tape, aggregates: &[Var], beta: f64) -> (Vec<Var>, Vec<Var>) {
    let mut features = Vec::with_capacity(aggregates.len());
    let mut momenta = Vec::with_capacity(aggregates.len());
    let Some(&first) = aggregates.first() else {
        return (features, momenta);
    };
    let d = tape.value(first).ncols();
    let zero_shift = tape.leaf(Array2::zeros((1, d)));
    let mut momentum = tape.scalar(0.0);
    for (t, &l) in aggregates.iter().enumerate() {
        let shift = if t == 0 {
            zero_shift
        } else {
            let diff = tape.sub(l, aggregates[t - 1]);
            let mag = tape.norm(diff);
            let decayed = tape.scale(momentum, beta);
            let fresh = tape.scale(mag, 1.0 - beta);
            momentum = tape.add(decayed, fresh);
            diff
        };
        momenta.push(momentum);
        features.push(tape.concat_cols(&[l, shift, momentum]));
    }
    (features, momenta)
}

/// One LSTM pass from zero state; returns hidden states `T_1..T_n` as a
/// single `n × d` node plus the per-step hidden and cell nodes.
pub fn lstm_graph(tape: &mut Tape, features: &[Var], lstm: &LstmVars) -> Result<LstmGraph> {
    let d = tape.value(lstm.u[0]).nrows();
    let input = 2 * d + 1;
    let mut hidden = tape.leaf(Array2::zeros((1, d)));
    let mut cell = tape.leaf(Array2::zeros((1, d)));
    let mut hs = Vec::with_capacity(features.len());
    let mut cs = Vec::with_capacity(features.len());
    for &x in features {
        let width = tape.value(x).ncols();
        if width != input {
            return Err(Error::InvalidArgument(format!(
                "LSTM feature length {width}, expected 2d+1 = {input}"
            )));
        }
        let mut pre = [hidden; 4];
        for g in 0..4 {
            let wx = tape.matmul_t(x, lstm.w[g]);
            let uh = tape.matmul_t(hidden, lstm.u[g]);
            let s = tape.add(wx, uh);
            pre[g] = tape.add(s, lstm.b[g]);
        }
        let i = tape.sigmoid(pre[0]);
        let f = tape.sigmoid(pre[1]);
        let o = tape.sigmoid(pre[2]);
        let cand = tape.tanh(pre[3]);
        let kept = tape.mul(f, cell);
        let written = tape.mul(i, cand);
        cell = tape.add(kept, written);
        let squashed = tape.tanh(cell);
        hidden = tape.mul(o, squashed);
        hs.push(hidden);
        cs.push(cell);
    }
    let states = match hs.len() {
        0 => None,
        1 => Some(hs[0]),
        _ => Some(tape.concat_rows(&hs)),
    };
    Ok(LstmGraph { states, hidden: hs, cells: cs })
}

#[derive(Clone, Debug)]
pub struct LstmGraph {
    /// `n × d` stack of hidden states, absent for an empty sequence.
    pub states: Option<Var>,
    pub hidden: Vec<Var>,
    pub cells: Vec<Var>,
}

/// Recency-weighted mean of the fused embeddings of one window.
pub fn aggregate_window(fused: &[FusedPost], window: &Window, timestamps: &[i64], alpha: f64) -> Result<Vec<f64>> {
    if fused.is_empty() {
        return Err(Error::InvalidArgument(format!("window {} is empty", window.index)));
    }
    if timestamps.len() != fused.len() {
        return Err(Error::InvalidArgument("one timestamp per fused post required".into()));
    }
    let w = decay_weights(timestamps, window.t_max_local, alpha);
    let d = fused[0].fused.len();
    let mut out = vec![0.0; d];
    for (post, wi) in fused.iter().zip(&w) {
        for (o, x) in out.iter_mut().zip(&post.fused) {
            *o += wi * x;
        }
    }
    Ok(out)
}

/// Per-window shift, momentum and concatenated LSTM input.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendFeature {
    pub shift: Vec<f64>,
    pub momentum: f64,
    pub input: Vec<f64>,
}

pub fn trend_features(aggregates: &[Vec<f64>], beta: f64) -> Vec<TrendFeature> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = aggregates
        .iter()
        .map(|l| tape.leaf(stack_rows(std::slice::from_ref(l))))
        .collect();
    let (features, momenta) = trend_features_graph(&mut tape, &vars, beta);
    let d = aggregates.first().map_or(0, Vec::len);
    features
        .iter()
        .zip(&momenta)
        .map(|(&f, &m)| {
            let input = tape.value(f).row(0).to_vec();
            TrendFeature {
                shift: input[d..2 * d].to_vec(),
                momentum: tape.scalar_value(m),
                input,
            }
        })
        .collect()
}

/// Hidden and cell states per step.
#[derive(Clone, Debug, PartialEq)]
pub struct LstmOutput {
    pub hidden: Vec<Vec<f64>>,
    pub cells: Vec<Vec<f64>>,
}

pub fn run_lstm(features: &[Vec<f64>], params: &ModelParams) -> Result<LstmOutput> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let lstm = LstmVars::from_bound(&bound);
    let xs: Vec<Var> = features
        .iter()
        .map(|f| tape.leaf(stack_rows(std::slice::from_ref(f))))
        .collect();
    let g = lstm_graph(&mut tape, &xs, &lstm)?;
    let rows = |vs: &[Var]| vs.iter().map(|&v| tape.value(v).row(0).to_vec()).collect();
    Ok(LstmOutput {
        hidden: rows(&g.hidden),
        cells: rows(&g.cells),
    })
}

/// Values of every trend quantity for one event, one entry per window.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrendState {
    pub aggregates: Vec<Vec<f64>>,
    pub shifts: Vec<Vec<f64>>,
    pub momenta: Vec<f64>,
    pub hidden: Vec<Vec<f64>>,
    pub cells: Vec<Vec<f64>>,
}

impl TrendState {
    pub fn hidden_matrix(&self) -> Mat {
        stack_rows(&self.hidden)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ModelDims;

    fn fused(values: &[&[f64]]) -> Vec<FusedPost> {
        values
            .iter()
            .enumerate()
            .map(|(i, v)| FusedPost {
                window_index: 1,
                post_index: i,
                text: vec![],
                image: vec![],
                c_ti: vec![],
                c_it: vec![],
                gate: vec![],
                fused: v.to_vec(),
            })
            .collect()
    }

    fn window(ts: &[i64]) -> Window {
        Window {
            index: 1,
            start: 0,
            end: 1000,
            members: (0..ts.len()).collect(),
            t_max_local: *ts.iter().max().unwrap(),
        }
    }

    #[test]
    fn aggregation_examples() {
        let f = fused(&[&[1.0, 0.0], &[3.0, 6.0]]);
        let ts = [0, 10];
        let mean = aggregate_window(&f, &window(&ts), &ts, 0.0).unwrap();
        assert_eq!(mean, vec![2.0, 3.0]);

        let alpha = std::f64::consts::LN_2 / 10.0;
        let weighted = aggregate_window(&f, &window(&ts), &ts, alpha).unwrap();
        let expect = [1.0 / 3.0 + 2.0, 4.0];
        for (a, b) in weighted.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }

        let single = fused(&[&[0.7, -0.2]]);
        assert_eq!(aggregate_window(&single, &window(&[5]), &[5], 1.0).unwrap(), vec![0.7, -0.2]);
        assert!(aggregate_window(&[], &window(&[5]), &[], 1.0).is_err());
    }

    #[test]
    fn momentum_recurrence() {
        let constant = vec![vec![0.5, 0.5]; 4];
        for f in trend_features(&constant, 0.7) {
            assert_eq!(f.momentum, 0.0);
            assert!(f.shift.iter().all(|&x| x == 0.0));
        }
        // ‖Δ‖ = (0, 2, 0) with β = 0.5 → M = (0, 1, 0.5).
        let seq = vec![vec![0.0, 0.0], vec![2.0, 0.0], vec![2.0, 0.0]];
        let f = trend_features(&seq, 0.5);
        let m: Vec<f64> = f.iter().map(|x| x.momentum).collect();
        assert_eq!(m, vec![0.0, 1.0, 0.5]);
        assert_eq!(f[1].input, vec![2.0, 0.0, 2.0, 0.0, 1.0]);
        let frozen = trend_features(&seq, 1.0);
        assert!(frozen.iter().all(|x| x.momentum == 0.0));
        assert!(trend_features(&[], 0.5).is_empty());
    }

    #[test]
    fn zero_lstm_stays_at_rest() {
        let dims = ModelDims { d: 3, heads: 1, d_text: 1, d_img: 1 };
        let p = ModelParams::zeros(dims).unwrap();
        let xs = vec![vec![0.3; 7], vec![-1.0; 7], vec![2.0; 7]];
        let out = run_lstm(&xs, &p).unwrap();
        assert!(out.hidden.iter().flatten().all(|&x| x == 0.0));
        assert!(run_lstm(&[], &p).unwrap().hidden.is_empty());
        assert!(run_lstm(&[vec![0.0; 6]], &p).is_err());
    }

    #[test]
    fn saturated_gates_single_step() {
        let dims = ModelDims { d: 2, heads: 1, d_text: 1, d_img: 1 };
        let mut p = ModelParams::random_uniform(dims, 0.5, 3).unwrap();
        p.get_mut("lstm.b_f").fill(-40.0);
        p.get_mut("lstm.b_i").fill(40.0);
        p.get_mut("lstm.W_o").fill(0.0);
        p.get_mut("lstm.b_o").fill(0.0);
        let x = vec![0.2, -0.1, 0.4, 0.3, 0.05];
        let out = run_lstm(std::slice::from_ref(&x), &p).unwrap();
        // Direct cell equations at saturation: c = tanh(W_c x + b_c), T = 0.5 tanh(c).
        let wc = p.get("lstm.W_c");
        let bc = p.get("lstm.b_c");
        for k in 0..2 {
            let pre: f64 = (0..5).map(|j| wc[[k, j]] * x[j]).sum::<f64>() + bc[[0, k]];
            let c = pre.tanh();
            assert!((out.cells[0][k] - c).abs() < 1e-6);
            assert!((out.hidden[0][k] - 0.5 * c.tanh()).abs() < 1e-6);
        }
    }
}
