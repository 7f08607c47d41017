//! Reverse-mode differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation in evaluation order. Values are computed
//! eagerly when a node is pushed; [`Tape::backward`] walks the nodes in reverse
//! and accumulates adjoints. Only the operations the detector needs are
//! provided, including two fused loss nodes (weighted binary cross-entropy and
//! the temporal-consistency sum) whose adjoints are written out by hand.

use ndarray::{s, Array2, Axis};

pub type Mat = Array2<f64>;

/// Probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-12;

/// Norms below this are treated as zero by the cosine similarity.
pub const COSINE_GUARD: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One weighted cross-entropy term: `(row of the probability column, label, weight)`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BceTerm {
    pub row: usize,
    pub label: u8,
    pub weight: f64,
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    GatherRows(Var, Vec<usize>),
    WeightedSumRows(Var, Vec<f64>),
    Norm(Var),
    WeightedBce(Var, Vec<BceTerm>),
    TemporalConsistency(Var, bool),
}

struct Node {
    value: Mat,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
pub struct Adjoints {
    grads: Vec<Option<Mat>>,
}

impl Adjoints {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads[v.0].as_ref()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP)
}

/// Weighted binary cross-entropy of a single probability, after clamping.
pub fn bce(p: f64, label: u8, weight: f64) -> f64 {
    let p = clamp_prob(p);
    if label == 1 {
        -weight * p.ln()
    } else {
        -weight * (1.0 - p).ln()
    }
}

/// Cosine similarity with the zero-norm guard.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na < COSINE_GUARD || nb < COSINE_GUARD {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    dot / (na * nb)
}

/// `Σ_t ‖s_t − s_{t−1}‖² · sim(s_t, s_{t−1})` over consecutive rows.
pub fn temporal_consistency(states: &Mat, clamp: bool) -> f64 {
    let mut acc = 0.0;
    for t in 1..states.nrows() {
        let a = states.row(t);
        let b = states.row(t - 1);
        let (a, b) = (a.as_slice().unwrap(), b.as_slice().unwrap());
        let mut sim = cosine(a, b);
        if clamp {
            sim = sim.max(0.0);
        }
        let sq: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
        acc += sq * sim;
    }
    acc
}

fn scalar(x: f64) -> Mat {
    Array2::from_elem((1, 1), x)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    fn push(&mut self, value: Mat, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters both enter as leaves; only the adjoints the
    /// caller reads back distinguish them.
    pub fn leaf(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.leaf(scalar(x))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a · bᵀ`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(&self.value(b).t());
        self.push(v, Op::MatMulT(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    /// Adds the `1 × c` row `b` to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::AddRow(a, b))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a) * k;
        self.push(v, Op::Scale(a, k))
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| 1.0 - x);
        self.push(v, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let mut v = self.value(a).clone();
        for mut row in v.rows_mut() {
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            row.mapv_inplace(|x| (x - max).exp());
            let sum = row.sum();
            row.mapv_inplace(|x| x / sum);
        }
        self.push(v, Op::SoftmaxRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("row counts must agree");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(0), &views).expect("column counts must agree");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::SliceCols(a, start))
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Var {
        let v = self.value(a).select(Axis(0), rows);
        self.push(v, Op::GatherRows(a, rows.to_vec()))
    }

    /// `Σ_r w_r · a_r` as a `1 × c` row.
    pub fn weighted_sum_rows(&mut self, a: Var, weights: &[f64]) -> Var {
        let src = self.value(a);
        assert_eq!(src.nrows(), weights.len());
        let mut v = Array2::zeros((1, src.ncols()));
        for (row, &w) in src.rows().into_iter().zip(weights) {
            v.row_mut(0).scaled_add(w, &row);
        }
        self.push(v, Op::WeightedSumRows(a, weights.to_vec()))
    }

    /// Frobenius norm as a `1 × 1` node.
    pub fn norm(&mut self, a: Var) -> Var {
        let n = self.value(a).iter().map(|x| x * x).sum::<f64>().sqrt();
        self.push(scalar(n), Op::Norm(a))
    }

    /// `−Σ w [y ln p + (1−y) ln(1−p)]` over the selected rows of a probability column.
    pub fn weighted_bce(&mut self, probs: Var, terms: Vec<BceTerm>) -> Var {
        let p = self.value(probs);
        let total: f64 = terms
            .iter()
            .map(|t| bce(p[[t.row, 0]], t.label, t.weight))
            .sum();
        self.push(scalar(total), Op::WeightedBce(probs, terms))
    }

    pub fn temporal_consistency(&mut self, states: Var, clamp: bool) -> Var {
        let v = temporal_consistency(self.value(states), clamp);
        self.push(scalar(v), Op::TemporalConsistency(states, clamp))
    }

    /// Accumulates adjoints of the scalar `root` into every node that feeds it.
    pub fn backward(&self, root: Var) -> Adjoints {
        let mut grads: Vec<Option<Mat>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.dim()));

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let ga = g.dot(&self.value(*b).t());
                    let gb = self.value(*a).t().dot(&g);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::MatMulT(a, b) => {
                    let ga = g.dot(self.value(*b));
                    let gb = g.t().dot(self.value(*a));
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *b, -&g);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let ga = &g * self.value(*b);
                    let gb = &g * self.value(*a);
                    accumulate(&mut grads, *a, ga);
                    accumulate(&mut grads, *b, gb);
                }
                Op::AddRow(a, b) => {
                    let gb = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    accumulate(&mut grads, *b, gb);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Scale(a, k) => accumulate(&mut grads, *a, &g * *k),
                Op::OneMinus(a) => accumulate(&mut grads, *a, -&g),
                Op::Sigmoid(a) => {
                    let ga = &g * &node.value.mapv(|s| s * (1.0 - s));
                    accumulate(&mut grads, *a, ga);
                }
                Op::Tanh(a) => {
                    let ga = &g * &node.value.mapv(|t| 1.0 - t * t);
                    accumulate(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = Array2::zeros(y.dim());
                    for ((yr, gr), mut out) in y.rows().into_iter().zip(g.rows()).zip(ga.rows_mut()) {
                        let inner = yr.dot(&gr);
                        out.assign(&(&yr * &(&gr - inner)));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let w = self.value(p).ncols();
                        accumulate(&mut grads, p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let h = self.value(p).nrows();
                        accumulate(&mut grads, p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    accumulate(&mut grads, *a, ga);
                }
                Op::GatherRows(a, rows) => {
                    let mut ga = Array2::zeros(self.value(*a).dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut dst = ga.row_mut(r);
                        dst += &g.row(k);
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedSumRows(a, weights) => {
                    let src = self.value(*a);
                    let mut ga = Array2::zeros(src.dim());
                    for (mut row, &w) in ga.rows_mut().into_iter().zip(weights) {
                        row.scaled_add(w, &g.row(0));
                    }
                    accumulate(&mut grads, *a, ga);
                }
                Op::Norm(a) => {
                    let n = node.value[[0, 0]];
                    let ga = if n > 0.0 {
                        self.value(*a) * (g[[0, 0]] / n)
                    } else {
                        Array2::zeros(self.value(*a).dim())
                    };
                    accumulate(&mut grads, *a, ga);
                }
                Op::WeightedBce(probs, terms) => {
                    let p = self.value(*probs);
                    let mut ga = Array2::zeros(p.dim());
                    for t in terms {
                        let pr = p[[t.row, 0]];
                        if pr < PROB_CLAMP || pr > 1.0 - PROB_CLAMP {
                            continue;
                        }
                        let d = if t.label == 1 { -1.0 / pr } else { 1.0 / (1.0 - pr) };
                        ga[[t.row, 0]] += g[[0, 0]] * t.weight * d;
                    }
                    accumulate(&mut grads, *probs, ga);
                }
                Op::TemporalConsistency(states, clamp) => {
                    let ga = temporal_consistency_grad(self.value(*states), *clamp) * g[[0, 0]];
                    accumulate(&mut grads, *states, ga);
                }
            }
            grads[idx] = Some(g);
        }
        Adjoints { grads }
    }
}

fn accumulate(grads: &mut [Option<Mat>], v: Var, g: Mat) {
    match &mut grads[v.0] {
        Some(existing) => *existing += &g,
        slot @ None => *slot = Some(g),
    }
}

fn temporal_consistency_grad(states: &Mat, clamp: bool) -> Mat {
    let mut out = Array2::zeros(states.dim());
    for t in 1..states.nrows() {
        let a = states.row(t);
        let b = states.row(t - 1);
        let na = a.dot(&a).sqrt();
        let nb = b.dot(&b).sqrt();
        if na < COSINE_GUARD || nb < COSINE_GUARD {
            continue;
        }
        let sim = a.dot(&b) / (na * nb);
        if clamp && sim < 0.0 {
            continue;
        }
        let diff = &a - &b;
        let sq = diff.dot(&diff);
        // d sim / da = b/(|a||b|) − sim·a/|a|², symmetric for b.
        let dsim_a = &b / (na * nb) - &a * (sim / (na * na));
        let dsim_b = &a / (na * nb) - &b * (sim / (nb * nb));
        let ga = &diff * (2.0 * sim) + dsim_a * sq;
        let gb = &diff * (-2.0 * sim) + dsim_b * sq;
        let mut ra = out.row_mut(t);
        ra += &ga;
        let mut rb = out.row_mut(t - 1);
        rb += &gb;
    }
    out
}
