//! Named trainable tensors and the binary checkpoint format.
//!
//! A checkpoint is one line of JSON header terminated by `\n`,
//!
//! ```text
//! {"format_version":1,"d":32,"H":4,"names":[{"name":"fusion.W_text","shape":[32,768]},...]}
//! ```
//!
//! followed by every tensor's entries as little-endian `f64`, row-major, in
//! header order.

use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tape::{Mat, Tape, Var};

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub d: usize,
    pub heads: usize,
    pub d_text: usize,
    pub d_img: usize,
}

impl ModelDims {
    pub fn validate(&self) -> Result<()> {
        if self.d == 0 || self.heads == 0 {
            return Err(Error::config("model.d", "model width and head count must be positive"));
        }
        if !self.d.is_multiple_of(self.heads) {
            return Err(Error::config(
                "model.heads",
                format!("{} heads do not divide d = {}", self.heads, self.d),
            ));
        }
        Ok(())
    }

    /// Every tensor name with its shape, in checkpoint order.
    pub fn layout(&self) -> Vec<(String, (usize, usize))> {
        let ModelDims { d, d_text, d_img, .. } = *self;
        let mut out: Vec<(String, (usize, usize))> = vec![
            ("fusion.W_text".into(), (d, d_text)),
            ("fusion.b_text".into(), (1, d)),
            ("fusion.W_img".into(), (d, d_img)),
            ("fusion.b_img".into(), (1, d)),
        ];
        for (block, out_suffix) in ATTENTION_BLOCKS {
            for m in ["W_Q", "W_K", "W_V", "W_O"] {
                out.push((format!("fusion.{block}.{m}"), (d, d)));
            }
            out.push((format!("fusion.W_o_{out_suffix}"), (d, d)));
            out.push((format!("fusion.b_o_{out_suffix}"), (1, d)));
        }
        out.push(("fusion.W_g".into(), (d, 2 * d)));
        out.push(("fusion.b_g".into(), (1, d)));
        for gate in LSTM_GATES {
            out.push((format!("lstm.W_{gate}"), (d, 2 * d + 1)));
        }
        for gate in LSTM_GATES {
            out.push((format!("lstm.U_{gate}"), (d, d)));
        }
        for gate in LSTM_GATES {
            out.push((format!("lstm.b_{gate}"), (1, d)));
        }
        out.push(("clf.W_c".into(), (1, d)));
        out.push(("clf.b_c".into(), (1, 1)));
        out
    }
}

/// Attention blocks and the suffix of the affine map applied to their output.
pub const ATTENTION_BLOCKS: [(&str, &str); 4] = [
    ("attn_text", "text"),
    ("attn_img", "img"),
    ("cross_ti", "ti"),
    ("cross_it", "it"),
];

pub const LSTM_GATES: [&str; 4] = ["i", "f", "o", "c"];

#[derive(Clone, Debug, PartialEq)]
pub struct ModelParams {
    pub dims: ModelDims,
    tensors: IndexMap<String, Mat>,
}

fn is_bias(name: &str) -> bool {
    name.rsplit('.').next().is_some_and(|s| s.starts_with('b'))
}

impl ModelParams {
    pub fn zeros(dims: ModelDims) -> Result<Self> {
        dims.validate()?;
        let tensors = dims
            .layout()
            .into_iter()
            .map(|(name, shape)| (name, Array2::zeros(shape)))
            .collect();
        Ok(Self { dims, tensors })
    }

    /// Glorot-uniform matrices, zero biases.
    pub fn init(dims: ModelDims, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (name, t) in p.tensors.iter_mut() {
            if is_bias(name) {
                continue;
            }
            let (r, c) = t.dim();
            let limit = (6.0 / (r + c) as f64).sqrt();
            t.mapv_inplace(|_| rng.random_range(-limit..limit));
        }
        Ok(p)
    }

    /// Every entry, biases included, uniform in `[-scale, scale)`.
    pub fn random_uniform(dims: ModelDims, scale: f64, seed: u64) -> Result<Self> {
        let mut p = Self::zeros(dims)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for t in p.tensors.values_mut() {
            t.mapv_inplace(|_| rng.random_range(-scale..scale));
        }
        Ok(p)
    }

    pub fn get(&self, name: &str) -> &Mat {
        self.tensors
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Mat {
        self.tensors
            .get_mut(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Mat> {
        self.tensors.get(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Mat)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Mat)> {
        self.tensors.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    /// `‖Θ‖₂²` over every trainable entry.
    pub fn sq_norm(&self) -> f64 {
        self.tensors.values().flat_map(|t| t.iter()).map(|x| x * x).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.tensors.values().all(|t| t.iter().all(|x| x.is_finite()))
    }

    /// Pushes every tensor onto `tape` as a leaf.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let vars = self
            .tensors
            .iter()
            .map(|(name, t)| (name.clone(), tape.leaf(t.clone())))
            .collect();
        BoundParams { vars }
    }

    /// Errors naming the first tensor whose shape disagrees with `dims`.
    pub fn check_dims(&self, dims: &ModelDims) -> Result<()> {
        for (name, shape) in dims.layout() {
            match self.tensors.get(&name) {
                None => {
                    return Err(Error::format("checkpoint", format!("missing tensor `{name}`")));
                }
                Some(t) if t.dim() != shape => {
                    return Err(Error::Shape {
                        name,
                        expected: shape,
                        found: t.dim(),
                    });
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}

/// Tape handles for every parameter, in checkpoint order.
pub struct BoundParams {
    vars: IndexMap<String, Var>,
}

impl BoundParams {
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter `{name}`"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, Var)> {
        self.vars.iter().map(|(k, v)| (k.as_str(), *v))
    }
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: [usize; 2],
}

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    format_version: u32,
    d: usize,
    #[serde(rename = "H")]
    heads: usize,
    names: Vec<TensorEntry>,
}

pub fn checkpoint_bytes(params: &ModelParams) -> Vec<u8> {
    let header = CheckpointHeader {
        format_version: CHECKPOINT_VERSION,
        d: params.dims.d,
        heads: params.dims.heads,
        names: params
            .tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: [t.nrows(), t.ncols()],
            })
            .collect(),
    };
    let mut out = serde_json::to_vec(&header).expect("serializable");
    out.push(b'\n');
    for t in params.tensors.values() {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn save_checkpoint(params: &ModelParams, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint_bytes(params))
        .map_err(|e| Error::io(path, e))
}

pub fn parse_checkpoint(bytes: &[u8]) -> Result<ModelParams> {
    let nl = bytes
        .iter()
        .position(|&b| b == b'\n')
        .ok_or_else(|| Error::format("checkpoint", "missing header terminator"))?;
    let header: CheckpointHeader = serde_json::from_slice(&bytes[..nl])
        .map_err(|e| Error::format("checkpoint header", e.to_string()))?;
    if header.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            "checkpoint",
            format!("unsupported format_version {}", header.format_version),
        ));
    }
    let body = &bytes[nl + 1..];
    let total: usize = header.names.iter().map(|e| e.shape[0] * e.shape[1]).sum();
    if body.len() != total * 8 {
        return Err(Error::format(
            "checkpoint",
            format!("expected {} data bytes, found {}", total * 8, body.len()),
        ));
    }

    let d_text = header
        .names
        .iter()
        .find(|e| e.name == "fusion.W_text")
        .map(|e| e.shape[1])
        .ok_or_else(|| Error::format("checkpoint", "missing tensor `fusion.W_text`"))?;
    let d_img = header
        .names
        .iter()
        .find(|e| e.name == "fusion.W_img")
        .map(|e| e.shape[1])
        .ok_or_else(|| Error::format("checkpoint", "missing tensor `fusion.W_img`"))?;
    let dims = ModelDims {
        d: header.d,
        heads: header.heads,
        d_text,
        d_img,
    };

    let mut tensors = IndexMap::with_capacity(header.names.len());
    let mut values = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
    for e in header.names {
        let n = e.shape[0] * e.shape[1];
        let data: Vec<f64> = values.by_ref().take(n).collect();
        let t = Array2::from_shape_vec((e.shape[0], e.shape[1]), data).expect("length checked");
        tensors.insert(e.name, t);
    }
    let params = ModelParams { dims, tensors };
    params.check_dims(&dims)?;
    if params.tensors.len() != dims.layout().len() {
        return Err(Error::format("checkpoint", "unexpected extra tensors"));
    }
    Ok(params)
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ModelParams> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_checkpoint(&bytes)
}

/// Loads a checkpoint and checks every tensor against the expected dimensions.
pub fn load_checkpoint_for(path: impl AsRef<Path>, dims: &ModelDims) -> Result<ModelParams> {
    let params = load_checkpoint(path)?;
    params.check_dims(dims)?;
    if params.dims.heads != dims.heads {
        return Err(Error::config(
            "model.heads",
            format!("checkpoint has {} heads, config has {}", params.dims.heads, dims.heads),
        ));
    }
    Ok(params)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dims() -> ModelDims {
        ModelDims { d: 4, heads: 2, d_text: 6, d_img: 5 }
    }

    #[test]
    fn layout_names_and_bias_init() {
        let p = ModelParams::init(dims(), 1).unwrap();
        assert_eq!(p.get("fusion.W_text").dim(), (4, 6));
        assert_eq!(p.get("fusion.W_g").dim(), (4, 8));
        assert_eq!(p.get("lstm.W_f").dim(), (4, 9));
        assert_eq!(p.get("clf.b_c").dim(), (1, 1));
        assert!(p.get("lstm.b_f").iter().all(|&x| x == 0.0));
        assert!(p.get("fusion.W_o_it").iter().any(|&x| x != 0.0));
        let limit = (6.0f64 / 10.0).sqrt();
        assert!(p.get("fusion.W_text").iter().all(|x| x.abs() <= limit));
    }

    #[test]
    fn heads_must_divide_width() {
        let bad = ModelDims { d: 6, heads: 4, d_text: 2, d_img: 2 };
        assert!(ModelParams::zeros(bad).is_err());
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let p = ModelParams::random_uniform(dims(), 3.0, 7).unwrap();
        let q = parse_checkpoint(&checkpoint_bytes(&p)).unwrap();
        assert_eq!(p, q);
        for ((_, a), (_, b)) in p.iter().zip(q.iter()) {
            for (x, y) in a.iter().zip(b.iter()) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn truncated_checkpoint_fails() {
        let bytes = checkpoint_bytes(&ModelParams::init(dims(), 0).unwrap());
        let err = parse_checkpoint(&bytes[..bytes.len() - 3]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
        let err = parse_checkpoint(&bytes[..10]).unwrap_err();
        assert!(matches!(err, Error::Format { .. }));
    }

    #[test]
    fn wrong_width_names_tensor() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.bin");
        save_checkpoint(&ModelParams::init(dims(), 0).unwrap(), &path).unwrap();
        let other = ModelDims { d: 8, ..dims() };
        match load_checkpoint_for(&path, &other).unwrap_err() {
            Error::Shape { name, .. } => assert_eq!(name, "fusion.W_text"),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn version_mismatch_fails() {
        let bytes = checkpoint_bytes(&ModelParams::zeros(dims()).unwrap());
        let s = String::from_utf8_lossy(&bytes).replacen("\"format_version\":1", "\"format_version\":9", 1);
        let mut patched = s.as_bytes().to_vec();
        patched.truncate(s.find('\n').unwrap() + 1);
        patched.extend_from_slice(&bytes[bytes.iter().position(|&b| b == b'\n').unwrap() + 1..]);
        assert!(parse_checkpoint(&patched).unwrap_err().to_string().contains("format_version 9"));
    }
}
