//! Text/image encoders, intra- and cross-modal multi-head attention, and the
//! soft gate that fuses both attention directions into one embedding per post.
//!
//! Everything is built on a [`Tape`] so the same code serves inference and
//! gradient computation; the plain-matrix functions here wrap a throwaway tape.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};
use crate::params::{BoundParams, ModelParams};
use crate::tape::{Mat, Tape, Var};
use crate::windowing::Window;

/// Which posts form the attention sequence.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScope {
    /// All posts of the current window attend to each other.
    #[default]
    Window,
    /// Each post attends only to itself.
    Post,
}

/// Divisor inside the softmax: `√(d/H)` per head or `√d`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionScale {
    #[default]
    Head,
    Model,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub scope: AttentionScope,
    pub scale: AttentionScale,
}

impl Default for AttentionConfig {
    fn default() -> Self {
        Self {
            heads: 4,
            scope: Default::default(),
            scale: Default::default(),
        }
    }
}

impl AttentionConfig {
    fn divisor(&self, d: usize) -> f64 {
        match self.scale {
            AttentionScale::Head => ((d / self.heads) as f64).sqrt(),
            AttentionScale::Model => (d as f64).sqrt(),
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct AttnVars {
    pub w_q: Var,
    pub w_k: Var,
    pub w_v: Var,
    pub w_o: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct AffineVars {
    pub w: Var,
    pub b: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct FusionVars {
    pub text_enc: AffineVars,
    pub img_enc: AffineVars,
    pub self_text: AttnVars,
    pub out_text: AffineVars,
    pub self_img: AttnVars,
    pub out_img: AffineVars,
    pub cross_ti: AttnVars,
    pub out_ti: AffineVars,
    pub cross_it: AttnVars,
    pub out_it: AffineVars,
    pub gate: AffineVars,
}

impl FusionVars {
    pub fn from_bound(b: &BoundParams) -> Self {
        let attn = |block: &str| AttnVars {
            w_q: b.var(&format!("fusion.{block}.W_Q")),
            w_k: b.var(&format!("fusion.{block}.W_K")),
            w_v: b.var(&format!("fusion.{block}.W_V")),
            w_o: b.var(&format!("fusion.{block}.W_O")),
        };
        let out = |suffix: &str| AffineVars {
            w: b.var(&format!("fusion.W_o_{suffix}")),
            b: b.var(&format!("fusion.b_o_{suffix}")),
        };
        Self {
            text_enc: AffineVars { w: b.var("fusion.W_text"), b: b.var("fusion.b_text") },
            img_enc: AffineVars { w: b.var("fusion.W_img"), b: b.var("fusion.b_img") },
            self_text: attn("attn_text"),
            out_text: out("text"),
            self_img: attn("attn_img"),
            out_img: out("img"),
            cross_ti: attn("cross_ti"),
            out_ti: out("ti"),
            cross_it: attn("cross_it"),
            out_it: out("it"),
            gate: AffineVars { w: b.var("fusion.W_g"), b: b.var("fusion.b_g") },
        }
    }
}

/// Row-wise affine map `x Wᵀ + b`.
pub fn affine_rows(tape: &mut Tape, x: Var, a: AffineVars) -> Var {
    let xw = tape.matmul_t(x, a.w);
    tape.add_row(xw, a.b)
}

/// Multi-head attention; returns the output and each head's attention weights.
pub fn mh_attention_graph(
    tape: &mut Tape,
    q: Var,
    k: Var,
    v: Var,
    block: AttnVars,
    cfg: &AttentionConfig,
) -> Result<(Var, Vec<Var>)> {
    if tape.value(k).nrows() == 0 {
        return Err(Error::InvalidArgument("attention needs at least one key".into()));
    }
    let d = tape.value(block.w_o).nrows();
    let d_head = d / cfg.heads;
    let divisor = cfg.divisor(d);

    let qp = tape.matmul(q, block.w_q);
    let kp = tape.matmul(k, block.w_k);
    let vp = tape.matmul(v, block.w_v);
    let mut heads = Vec::with_capacity(cfg.heads);
    let mut weights = Vec::with_capacity(cfg.heads);
    for h in 0..cfg.heads {
        let qh = tape.slice_cols(qp, h * d_head, d_head);
        let kh = tape.slice_cols(kp, h * d_head, d_head);
        let vh = tape.slice_cols(vp, h * d_head, d_head);
        let scores = tape.matmul_t(qh, kh);
        let scaled = tape.scale(scores, 1.0 / divisor);
        let attn = tape.softmax_rows(scaled);
        heads.push(tape.matmul(attn, vh));
        weights.push(attn);
    }
    let concat = if heads.len() == 1 { heads[0] } else { tape.concat_cols(&heads) };
    Ok((tape.matmul(concat, block.w_o), weights))
}

/// Runs `block` over the rows of `q`/`k`/`v` according to the attention scope.
fn scoped_attention(
    tape: &mut Tape,
    q: Var,
    kv: Var,
    block: AttnVars,
    cfg: &AttentionConfig,
    weights: &mut Vec<Var>,
) -> Result<Var> {
    match cfg.scope {
        AttentionScope::Window => {
            let (out, w) = mh_attention_graph(tape, q, kv, kv, block, cfg)?;
            weights.extend(w);
            Ok(out)
        }
        AttentionScope::Post => {
            let n = tape.value(q).nrows();
            let mut rows = Vec::with_capacity(n);
            for r in 0..n {
                let qr = tape.gather_rows(q, &[r]);
                let kr = tape.gather_rows(kv, &[r]);
                let (out, w) = mh_attention_graph(tape, qr, kr, kr, block, cfg)?;
                weights.extend(w);
                rows.push(out);
            }
            Ok(if rows.len() == 1 { rows[0] } else { tape.concat_rows(&rows) })
        }
    }
}

/// Tape handles for every intermediate of one window's fusion.
#[derive(Clone, Debug)]
pub struct FusionGraph {
    pub text: Var,
    pub image: Var,
    pub h_text: Var,
    pub h_img: Var,
    pub c_ti: Var,
    pub c_it: Var,
    pub gate: Var,
    pub fused: Var,
    pub attention_weights: Vec<Var>,
}

/// Fuses already-encoded rows `text` / `image` (one row per window post).
pub fn fuse_graph(tape: &mut Tape, text: Var, image: Var, fv: &FusionVars, cfg: &AttentionConfig) -> Result<FusionGraph> {
    let mut attention_weights = Vec::new();
    let sa_text = scoped_attention(tape, text, text, fv.self_text, cfg, &mut attention_weights)?;
    let h_text = affine_rows(tape, sa_text, fv.out_text);
    let sa_img = scoped_attention(tape, image, image, fv.self_img, cfg, &mut attention_weights)?;
    let h_img = affine_rows(tape, sa_img, fv.out_img);

    let x_ti = scoped_attention(tape, h_text, h_img, fv.cross_ti, cfg, &mut attention_weights)?;
    let c_ti = affine_rows(tape, x_ti, fv.out_ti);
    let x_it = scoped_attention(tape, h_img, h_text, fv.cross_it, cfg, &mut attention_weights)?;
    let c_it = affine_rows(tape, x_it, fv.out_it);

    let both = tape.concat_cols(&[c_ti, c_it]);
    let g = affine_rows(tape, both, fv.gate);
    let gate = tape.sigmoid(g);
    let keep_ti = tape.mul(gate, c_ti);
    let rest = tape.one_minus(gate);
    let keep_it = tape.mul(rest, c_it);
    let fused = tape.add(keep_ti, keep_it);
    Ok(FusionGraph {
        text,
        image,
        h_text,
        h_img,
        c_ti,
        c_it,
        gate,
        fused,
        attention_weights,
    })
}

fn check_input_dims(ds: &Dataset, params: &ModelParams) -> Result<()> {
    let expect = (params.dims.d_text, params.dims.d_img);
    if (ds.d_text, ds.d_img) != expect {
        return Err(Error::Shape {
            name: "fusion.W_text/fusion.W_img".into(),
            expected: expect,
            found: (ds.d_text, ds.d_img),
        });
    }
    Ok(())
}

/// Projects the text and image embeddings of `indices` into model space.
pub fn encode(ds: &Dataset, params: &ModelParams, indices: &[usize]) -> Result<(Mat, Mat)> {
    check_input_dims(ds, params)?;
    if let Some(&bad) = indices.iter().find(|&&i| i >= ds.len()) {
        return Err(Error::InvalidArgument(format!("post index {bad} out of range")));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = FusionVars::from_bound(&bound);
    let text_in = tape.leaf(ds.text_matrix().select(ndarray::Axis(0), indices));
    let img_in = tape.leaf(ds.image_matrix().select(ndarray::Axis(0), indices));
    let t = affine_rows(&mut tape, text_in, fv.text_enc);
    let i = affine_rows(&mut tape, img_in, fv.img_enc);
    Ok((tape.value(t).clone(), tape.value(i).clone()))
}

/// Owned weights of one attention block.
#[derive(Clone, Debug)]
pub struct AttentionBlock {
    pub w_q: Mat,
    pub w_k: Mat,
    pub w_v: Mat,
    pub w_o: Mat,
}

impl AttentionBlock {
    /// Reads block `name` (e.g. `"attn_text"`) out of a parameter set.
    pub fn from_params(params: &ModelParams, name: &str) -> Self {
        let get = |m: &str| params.get(&format!("fusion.{name}.{m}")).clone();
        Self {
            w_q: get("W_Q"),
            w_k: get("W_K"),
            w_v: get("W_V"),
            w_o: get("W_O"),
        }
    }
}

#[derive(Clone, Debug)]
pub struct AttentionOutput {
    pub output: Mat,
    /// One `n_q × n_k` row-stochastic matrix per head.
    pub weights: Vec<Mat>,
}

pub fn mh_attention(q: &Mat, k: &Mat, v: &Mat, block: &AttentionBlock, cfg: &AttentionConfig) -> Result<AttentionOutput> {
    let d = block.w_o.nrows();
    if cfg.heads == 0 || !d.is_multiple_of(cfg.heads) {
        return Err(Error::InvalidArgument(format!("{} heads do not divide d = {d}", cfg.heads)));
    }
    if k.nrows() != v.nrows() {
        return Err(Error::InvalidArgument("keys and values differ in length".into()));
    }
    let mut tape = Tape::new();
    let (qv, kv, vv) = (tape.leaf(q.clone()), tape.leaf(k.clone()), tape.leaf(v.clone()));
    let vars = AttnVars {
        w_q: tape.leaf(block.w_q.clone()),
        w_k: tape.leaf(block.w_k.clone()),
        w_v: tape.leaf(block.w_v.clone()),
        w_o: tape.leaf(block.w_o.clone()),
    };
    let (out, weights) = mh_attention_graph(&mut tape, qv, kv, vv, vars, cfg)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        weights: weights.iter().map(|&w| tape.value(w).clone()).collect(),
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct FusedPost {
    pub window_index: usize,
    pub post_index: usize,
    pub text: Vec<f64>,
    pub image: Vec<f64>,
    pub c_ti: Vec<f64>,
    pub c_it: Vec<f64>,
    pub gate: Vec<f64>,
    pub fused: Vec<f64>,
}

/// Fuses every member of `window`, in member order.
pub fn fuse_window(ds: &Dataset, params: &ModelParams, window: &Window, cfg: &AttentionConfig) -> Result<Vec<FusedPost>> {
    check_input_dims(ds, params)?;
    if window.members.is_empty() {
        return Err(Error::InvalidArgument(format!("window {} is empty", window.index)));
    }
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape);
    let fv = FusionVars::from_bound(&bound);
    let text_in = tape.leaf(ds.text_matrix().select(ndarray::Axis(0), &window.members));
    let img_in = tape.leaf(ds.image_matrix().select(ndarray::Axis(0), &window.members));
    let t = affine_rows(&mut tape, text_in, fv.text_enc);
    let i = affine_rows(&mut tape, img_in, fv.img_enc);
    let g = fuse_graph(&mut tape, t, i, &fv, cfg)?;
    let row = |v: Var, r: usize| tape.value(v).row(r).to_vec();
    Ok(window
        .members
        .iter()
        .enumerate()
        .map(|(r, &post)| FusedPost {
            window_index: window.index,
            post_index: post,
            text: row(g.text, r),
            image: row(g.image, r),
            c_ti: row(g.c_ti, r),
            c_it: row(g.c_it, r),
            gate: row(g.gate, r),
            fused: row(g.fused, r),
        })
        .collect())
}

/// Stacks rows into a matrix; all rows must share a length.
pub fn stack_rows(rows: &[Vec<f64>]) -> Mat {
    let cols = rows.first().map_or(0, Vec::len);
    Array2::from_shape_fn((rows.len(), cols), |(r, c)| rows[r][c])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Post;
    use crate::params::ModelDims;
    use ndarray::array;
    use serde_json::Map;

    fn cfg(heads: usize) -> AttentionConfig {
        AttentionConfig { heads, scope: AttentionScope::Window, scale: AttentionScale::Head }
    }

    fn block(d: usize, seed: u64) -> AttentionBlock {
        let p = ModelParams::random_uniform(ModelDims { d, heads: 1, d_text: 1, d_img: 1 }, 1.0, seed).unwrap();
        AttentionBlock::from_params(&p, "attn_text")
    }

    fn toy_ds(n: usize) -> Dataset {
        let posts = (0..n)
            .map(|i| Post {
                id: i.to_string(),
                label: (i % 2) as u8,
                timestamp: i as i64,
                has_image: i != 1,
                extra: Map::new(),
            })
            .collect();
        let text = Array2::from_shape_fn((n, 3), |(i, j)| (i as f64 + 1.0) * 0.3 - j as f64 * 0.2);
        let image = Array2::from_shape_fn((n, 2), |(i, j)| (i * j) as f64 * 0.1 + 0.5);
        Dataset::new(posts, text, image).unwrap()
    }

    #[test]
    fn single_key_attention_ignores_query() {
        let b = block(4, 3);
        let k = array![[0.1, -0.2, 0.3, 0.4]];
        let q1 = array![[1.0, 2.0, 3.0, 4.0], [-5.0, 0.0, 0.0, 1.0]];
        let out = mh_attention(&q1, &k, &k, &b, &cfg(2)).unwrap();
        let expected = k.dot(&b.w_v).dot(&b.w_o);
        for r in 0..2 {
            for c in 0..4 {
                assert!((out.output[[r, c]] - expected[[0, c]]).abs() < 1e-12);
            }
        }
        assert!(out.weights.iter().all(|w| w.iter().all(|&x| x == 1.0)));
    }

    #[test]
    fn identical_keys_give_identical_rows() {
        let b = block(4, 5);
        let k = array![[0.5, 0.1, -0.3, 0.2], [0.5, 0.1, -0.3, 0.2], [0.5, 0.1, -0.3, 0.2]];
        let v = array![[1.0, 0.0, 0.0, 0.0], [0.0, 1.0, 0.0, 0.0], [0.0, 0.0, 1.0, 1.0]];
        let q = array![[1.0, 2.0, 3.0, 4.0], [-1.0, 0.5, 0.0, 2.0]];
        let out = mh_attention(&q, &k, &v, &b, &cfg(2)).unwrap().output;
        for c in 0..4 {
            assert!((out[[0, c]] - out[[1, c]]).abs() < 1e-12);
        }
    }

    #[test]
    fn zero_query_key_projections_average_values() {
        let d = 3;
        let b = AttentionBlock {
            w_q: Array2::zeros((d, d)),
            w_k: Array2::zeros((d, d)),
            w_v: Array2::eye(d),
            w_o: Array2::eye(d),
        };
        let v = array![[1.0, 2.0, 3.0], [4.0, 0.0, -1.0], [1.0, 1.0, 1.0], [2.0, -3.0, 5.0]];
        let q = array![[7.0, -1.0, 0.0]];
        let out = mh_attention(&q, &v, &v, &b, &cfg(1)).unwrap().output;
        // Direct formula: uniform softmax over 4 keys → column mean of V.
        let mean = [2.0, 0.0, 2.0];
        for c in 0..3 {
            assert!((out[[0, c]] - mean[c]).abs() < 1e-12);
        }
    }

    #[test]
    fn empty_keys_rejected() {
        let b = block(2, 0);
        let empty = Array2::zeros((0, 2));
        assert!(mh_attention(&array![[1.0, 0.0]], &empty, &empty, &b, &cfg(1)).is_err());
    }

    #[test]
    fn encoders() {
        let ds = toy_ds(3);
        let dims = ModelDims { d: 2, heads: 1, d_text: 3, d_img: 2 };
        let mut p = ModelParams::random_uniform(dims, 1.0, 1).unwrap();
        p.get_mut("fusion.W_text").fill(0.0);
        *p.get_mut("fusion.b_text") = array![[0.25, -4.0]];
        let (t, i) = encode(&ds, &p, &[0, 1, 2]).unwrap();
        assert!(t.rows().into_iter().all(|r| r[0] == 0.25 && r[1] == -4.0));
        // Post 1 has no image: its row is exactly the bias.
        assert_eq!(i.row(1).to_vec(), p.get("fusion.b_img").row(0).to_vec());

        let dims = ModelDims { d: 3, heads: 1, d_text: 3, d_img: 2 };
        let mut p = ModelParams::zeros(dims).unwrap();
        *p.get_mut("fusion.W_text") = Array2::eye(3);
        let (t, _) = encode(&ds, &p, &[2]).unwrap();
        assert_eq!(t.row(0).to_vec(), ds.text_vec(2).to_vec());
        assert!(encode(&ds, &ModelParams::zeros(ModelDims { d_text: 4, ..dims }).unwrap(), &[0]).is_err());
    }

    fn window_of(ds: &Dataset) -> Window {
        Window {
            index: 1,
            start: 0,
            end: 100,
            members: (0..ds.len()).collect(),
            t_max_local: ds.len() as i64 - 1,
        }
    }

    #[test]
    fn saturated_gate_selects_text_to_image() {
        let ds = toy_ds(3);
        let dims = ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 };
        let mut p = ModelParams::random_uniform(dims, 0.5, 9).unwrap();
        p.get_mut("fusion.W_g").fill(0.0);
        p.get_mut("fusion.b_g").fill(40.0);
        let fused = fuse_window(&ds, &p, &window_of(&ds), &cfg(2)).unwrap();
        for f in &fused {
            for (pv, cv) in f.fused.iter().zip(&f.c_ti) {
                assert!((pv - cv).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn equal_directions_fix_the_fused_point() {
        // Shared cross blocks and identical modality inputs force C_TI = C_IT.
        let ds = toy_ds(3);
        let dims = ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 };
        let mut p = ModelParams::random_uniform(dims, 0.5, 4).unwrap();
        for m in ["W_Q", "W_K", "W_V", "W_O"] {
            let v = p.get(&format!("fusion.cross_ti.{m}")).clone();
            *p.get_mut(&format!("fusion.cross_it.{m}")) = v;
            let v = p.get(&format!("fusion.attn_text.{m}")).clone();
            *p.get_mut(&format!("fusion.attn_img.{m}")) = v;
        }
        for (a, b) in [("W_o_it", "W_o_ti"), ("b_o_it", "b_o_ti"), ("W_o_img", "W_o_text"), ("b_o_img", "b_o_text")] {
            let v = p.get(&format!("fusion.{b}")).clone();
            *p.get_mut(&format!("fusion.{a}")) = v;
        }
        p.get_mut("fusion.W_text").fill(0.0);
        p.get_mut("fusion.W_img").fill(0.0);
        let bt = p.get("fusion.b_text").clone();
        *p.get_mut("fusion.b_img") = bt;
        let fused = fuse_window(&ds, &p, &window_of(&ds), &cfg(2)).unwrap();
        for f in &fused {
            for ((pv, a), b) in f.fused.iter().zip(&f.c_ti).zip(&f.c_it) {
                assert!((a - b).abs() < 1e-12);
                assert!((pv - a).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn single_post_window_is_finite_and_deterministic() {
        let ds = toy_ds(1);
        let dims = ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 };
        let p = ModelParams::init(dims, 2).unwrap();
        let a = fuse_window(&ds, &p, &window_of(&ds), &cfg(2)).unwrap();
        let b = fuse_window(&ds, &p, &window_of(&ds), &cfg(2)).unwrap();
        assert_eq!(a, b);
        assert!(a[0].fused.iter().all(|x| x.is_finite()));
    }

    #[test]
    fn post_scope_equals_window_scope_on_singletons() {
        let ds = toy_ds(1);
        let dims = ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 };
        let p = ModelParams::init(dims, 8).unwrap();
        let a = fuse_window(&ds, &p, &window_of(&ds), &cfg(2)).unwrap();
        let post_cfg = AttentionConfig { scope: AttentionScope::Post, ..cfg(2) };
        let b = fuse_window(&ds, &p, &window_of(&ds), &post_cfg).unwrap();
        assert_eq!(a, b);
    }
}
