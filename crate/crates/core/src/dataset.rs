//! On-disk embedding datasets and the in-memory post model.
//!
//! A dataset directory holds four files:
//!
//! * `meta.json`: `{"n_posts", "d_text", "d_img", "format_version": 1}`
//! * `manifest.jsonl`: one `{"id", "label", "timestamp", "has_image"}` object per post
//! * `text.f32`: `n_posts × d_text` little-endian `f32`, row-major, no header
//! * `image.f32` (optional): `n_posts × d_img`, same layout
//!
//! Row `k` of both matrices belongs to manifest line `k`. Absent images are
//! held as zero rows; if `image.f32` is missing entirely every post is
//! treated as image-absent.

use std::collections::HashSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView1};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::error::{Error, Result};

pub const FORMAT_VERSION: u32 = 1;
pub const DEFAULT_D_TEXT: usize = 768;
pub const DEFAULT_D_IMG: usize = 2048;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

/// Post metadata. The embeddings live in the owning [`Dataset`]'s matrices.
#[derive(Clone, Debug, PartialEq)]
pub struct Post {
    pub id: String,
    pub label: u8,
    pub timestamp: i64,
    pub has_image: bool,
    /// Manifest fields beyond the four required ones, kept for grouping keys.
    pub extra: Map<String, Value>,
}

#[derive(Clone, Debug)]
pub struct Dataset {
    pub posts: Vec<Post>,
    pub d_text: usize,
    pub d_img: usize,
    text: Array2<f64>,
    image: Array2<f64>,
    splits: Vec<Split>,
}

#[derive(Debug, Serialize, Deserialize)]
struct Meta {
    n_posts: usize,
    d_text: usize,
    d_img: usize,
    format_version: u32,
}

#[derive(Debug, Serialize, Deserialize)]
struct ManifestLine {
    id: String,
    label: i64,
    timestamp: i64,
    has_image: bool,
    #[serde(flatten)]
    extra: Map<String, Value>,
}

impl Dataset {
    /// Builds a dataset from in-memory parts, applying the same validation as
    /// [`load_dataset`]. Image rows of image-absent posts are zeroed.
    pub fn new(
        posts: Vec<Post>,
        text: Array2<f64>,
        mut image: Array2<f64>,
    ) -> Result<Self> {
        let n = posts.len();
        if text.nrows() != n || image.nrows() != n {
            return Err(Error::Dataset(format!(
                "row-count mismatch: {n} posts, {} text rows, {} image rows",
                text.nrows(),
                image.nrows()
            )));
        }
        let (d_text, d_img) = (text.ncols(), image.ncols());
        if d_text == 0 || d_img == 0 {
            return Err(Error::Dataset("embedding dimensions must be positive".into()));
        }
        let mut seen = HashSet::with_capacity(n);
        for (k, post) in posts.iter().enumerate() {
            if post.label > 1 {
                return Err(Error::Dataset(format!(
                    "post {k} (`{}`): label {} outside {{0,1}}",
                    post.id, post.label
                )));
            }
            if post.timestamp < 0 {
                return Err(Error::Dataset(format!("post {k}: negative timestamp")));
            }
            if !seen.insert(post.id.as_str()) {
                return Err(Error::Dataset(format!("duplicate id `{}`", post.id)));
            }
            if !post.has_image {
                image.row_mut(k).fill(0.0);
            }
        }
        check_finite("text.f32", &text)?;
        check_finite("image.f32", &image)?;
        Ok(Self {
            splits: vec![Split::Train; n],
            posts,
            d_text,
            d_img,
            text,
            image,
        })
    }

    pub fn len(&self) -> usize {
        self.posts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.posts.is_empty()
    }

    pub fn text_vec(&self, i: usize) -> ArrayView1<'_, f64> {
        self.text.row(i)
    }

    pub fn image_vec(&self, i: usize) -> ArrayView1<'_, f64> {
        self.image.row(i)
    }

    pub fn text_matrix(&self) -> &Array2<f64> {
        &self.text
    }

    pub fn image_matrix(&self) -> &Array2<f64> {
        &self.image
    }

    pub fn labels(&self) -> Vec<u8> {
        self.posts.iter().map(|p| p.label).collect()
    }

    pub fn split(&self, i: usize) -> Split {
        self.splits[i]
    }

    pub fn splits(&self) -> &[Split] {
        &self.splits
    }

    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.splits[i] == split).collect()
    }

    pub fn with_splits(mut self, splits: Vec<Split>) -> Result<Self> {
        if splits.len() != self.len() {
            return Err(Error::Dataset("split assignment must cover every post".into()));
        }
        self.splits = splits;
        Ok(self)
    }

    /// SHA-256 over the ordered post ids, used to tie persisted run
    /// artifacts to the dataset they were computed on.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for p in &self.posts {
            h.update(p.id.as_bytes());
            h.update([0u8]);
        }
        h.update(self.d_text.to_le_bytes());
        h.update(self.d_img.to_le_bytes());
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

fn check_finite(name: &str, m: &Array2<f64>) -> Result<()> {
    for ((row, col), v) in m.indexed_iter() {
        if !v.is_finite() {
            return Err(Error::NonFinite {
                matrix: name.to_string(),
                row,
                col,
            });
        }
    }
    Ok(())
}

fn read_f32_matrix(path: &Path, rows: usize, cols: usize) -> Result<Array2<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let expected = rows * cols * 4;
    if bytes.len() != expected {
        return Err(Error::Dataset(format!(
            "{}: expected {expected} bytes ({rows} rows × {cols} × 4), found {}",
            path.display(),
            bytes.len()
        )));
    }
    let data: Vec<f64> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(Array2::from_shape_vec((rows, cols), data).expect("length checked"))
}

fn write_f32_matrix(path: &Path, m: &Array2<f64>) -> Result<()> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for v in m.iter() {
        w.write_all(&(*v as f32).to_le_bytes())
            .map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn load_dataset(dir: impl AsRef<Path>) -> Result<Dataset> {
    let dir = dir.as_ref();
    let meta_path = dir.join("meta.json");
    let meta_raw = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: Meta = serde_json::from_str(&meta_raw)
        .map_err(|e| Error::format("meta.json header", e.to_string()))?;
    if meta.format_version != FORMAT_VERSION {
        return Err(Error::format(
            "meta.json header",
            format!("unsupported format_version {}", meta.format_version),
        ));
    }
    if meta.d_text == 0 || meta.d_img == 0 {
        return Err(Error::format("meta.json header", "dimensions must be positive"));
    }

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::open(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut posts = Vec::with_capacity(meta.n_posts);
    for (lineno, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(&manifest_path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let m: ManifestLine = serde_json::from_str(&line).map_err(|e| {
            Error::format("manifest.jsonl", format!("line {}: {e}", lineno + 1))
        })?;
        if !(0..=1).contains(&m.label) {
            return Err(Error::Dataset(format!(
                "manifest line {}: label {} outside {{0,1}}",
                lineno + 1,
                m.label
            )));
        }
        posts.push(Post {
            id: m.id,
            label: m.label as u8,
            timestamp: m.timestamp,
            has_image: m.has_image,
            extra: m.extra,
        });
    }
    if posts.len() != meta.n_posts {
        return Err(Error::Dataset(format!(
            "row-count mismatch: meta.json declares {} posts, manifest has {}",
            meta.n_posts,
            posts.len()
        )));
    }

    let text = read_f32_matrix(&dir.join("text.f32"), meta.n_posts, meta.d_text)?;
    let image_path = dir.join("image.f32");
    let image = if image_path.exists() {
        read_f32_matrix(&image_path, meta.n_posts, meta.d_img)?
    } else {
        for p in &mut posts {
            p.has_image = false;
        }
        Array2::zeros((meta.n_posts, meta.d_img))
    };
    // Image rows flagged absent are ignored on read, including any NaNs they hold.
    let mut image = image;
    for (k, p) in posts.iter().enumerate() {
        if !p.has_image {
            image.row_mut(k).fill(0.0);
        }
    }
    Dataset::new(posts, text, image)
}

pub fn write_dataset(ds: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        n_posts: ds.len(),
        d_text: ds.d_text,
        d_img: ds.d_img,
        format_version: FORMAT_VERSION,
    };
    let meta_path = dir.join("meta.json");
    fs::write(&meta_path, serde_json::to_string(&meta).expect("serializable"))
        .map_err(|e| Error::io(&meta_path, e))?;

    let manifest_path = dir.join("manifest.jsonl");
    let file = fs::File::create(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let mut w = BufWriter::new(file);
    for p in &ds.posts {
        let line = ManifestLine {
            id: p.id.clone(),
            label: p.label as i64,
            timestamp: p.timestamp,
            has_image: p.has_image,
            extra: p.extra.clone(),
        };
        let s = serde_json::to_string(&line).expect("serializable");
        writeln!(w, "{s}").map_err(|e| Error::io(&manifest_path, e))?;
    }
    w.flush().map_err(|e| Error::io(&manifest_path, e))?;

    write_f32_matrix(&dir.join("text.f32"), &ds.text)?;
    write_f32_matrix(&dir.join("image.f32"), &ds.image)
}

/// Split fractions as `(train, val, test)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitFractions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitFractions {
    fn default() -> Self {
        Self {
            train: 0.8,
            val: 0.1,
            test: 0.1,
        }
    }
}

/// Split sizes `(train, val, test)` for `n` posts: validation and test take
/// `⌊f·n⌋`, training takes the remainder.
pub fn split_sizes(n: usize, fractions: SplitFractions) -> (usize, usize, usize) {
    let val = (fractions.val * n as f64).floor() as usize;
    let test = (fractions.test * n as f64).floor() as usize;
    (n - val - test, val, test)
}

pub fn assign_splits(ds: Dataset, fractions: SplitFractions, seed: u64) -> Result<Dataset> {
    let SplitFractions { train, val, test } = fractions;
    if !(train > 0.0 && val > 0.0 && test > 0.0) {
        return Err(Error::InvalidArgument("split fractions must be positive".into()));
    }
    if (train + val + test - 1.0).abs() > 1e-9 {
        return Err(Error::InvalidArgument("split fractions must sum to 1".into()));
    }
    if ds.is_empty() {
        return Err(Error::Dataset("cannot split an empty dataset".into()));
    }
    let n = ds.len();
    let (_, n_val, n_test) = split_sizes(n, fractions);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut splits = vec![Split::Train; n];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    for &i in &order[n_val..n_val + n_test] {
        splits[i] = Split::Test;
    }
    ds.with_splits(splits)
}
