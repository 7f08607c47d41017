//! Synthetic datasets with planted events, class signal, drift and
//! cross-modal conflict.
//!
//! Geometry: coordinate 0 of both modalities is the class direction `u`.
//! Event centroids live in the remaining coordinates, so the class signal is
//! shared across events. Noise is standard normal.

use std::fs;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use serde_json::Map;

use crate::dataset::{write_dataset, Dataset, Post};
use crate::error::{Error, Result};
use crate::windowing::DAY;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub n_events: usize,
    /// Inclusive `[min, max]` posts per event.
    pub posts_per_event: [usize; 2],
    pub d_text: usize,
    pub d_img: usize,
    /// `P(y = 1)`.
    pub imbalance: f64,
    /// Class-separation margin μ along `u`.
    pub margin: f64,
    /// Centroid shift per window index.
    pub drift: f64,
    /// Probability that the image carries the opposite class direction.
    pub modality_conflict: f64,
    pub missing_image: f64,
    /// Standard deviation of event-centroid coordinates.
    pub centroid_scale: f64,
    /// Window span the timestamps are laid out for.
    pub window_span_secs: i64,
    pub start_time: i64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            n_events: 10,
            posts_per_event: [30, 60],
            d_text: 16,
            d_img: 16,
            imbalance: 0.2,
            margin: 2.0,
            drift: 0.0,
            modality_conflict: 0.0,
            missing_image: 0.0,
            centroid_scale: 0.5,
            window_span_secs: 4 * DAY,
            start_time: 1_600_000_000,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |k: &str, m: &str| Err(Error::config(format!("spec.{k}"), m));
        if self.n_events == 0 {
            return err("n_events", "must be at least 1");
        }
        let [lo, hi] = self.posts_per_event;
        if hi < 1 || lo < 1 || lo > hi {
            return err("posts_per_event", "needs 1 ≤ min ≤ max");
        }
        if self.d_text < 2 || self.d_img < 1 {
            return err("d_text", "need d_text ≥ 2 and d_img ≥ 1");
        }
        if !(self.imbalance > 0.0 && self.imbalance < 1.0) {
            return err("imbalance", "must lie in (0, 1)");
        }
        if !(self.margin >= 0.0 && self.margin.is_finite()) {
            return err("margin", "must be a finite non-negative number");
        }
        if !(self.drift >= 0.0 && self.drift.is_finite()) {
            return err("drift", "must be a finite non-negative number");
        }
        for (k, p) in [("modality_conflict", self.modality_conflict), ("missing_image", self.missing_image)] {
            if !(0.0..=1.0).contains(&p) {
                return err(k, "must lie in [0, 1]");
            }
        }
        if !(self.centroid_scale >= 0.0 && self.centroid_scale.is_finite()) {
            return err("centroid_scale", "must be a finite non-negative number");
        }
        if self.window_span_secs < 2 {
            return err("window_span_secs", "must be at least 2");
        }
        if self.start_time < 0 {
            return err("start_time", "must be non-negative");
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthEvent {
    pub event: usize,
    pub members: Vec<usize>,
    pub positives: usize,
}

/// Generative facts recorded next to a synthetic dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub spec: SynthSpec,
    /// Index of the class direction in both modalities.
    pub class_axis: usize,
    pub events: Vec<GroundTruthEvent>,
    pub event_of: Vec<usize>,
    pub conflict: Vec<bool>,
    pub n_positive: usize,
}

struct EventDraw {
    posts: Vec<Post>,
    text: Vec<Vec<f64>>,
    image: Vec<Vec<f64>>,
    conflict: Vec<bool>,
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn normal_vec(rng: &mut ChaCha8Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| scale * gauss(rng)).collect()
}

/// A random unit vector with a zero class coordinate.
fn off_axis_direction(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    let mut v = normal_vec(rng, n, 1.0);
    v[0] = 0.0;
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
    v
}

/// Splits `n` into `parts` near-equal counts.
fn spread(n: usize, parts: usize) -> Vec<usize> {
    (0..parts).map(|k| n / parts + usize::from(k < n % parts)).collect()
}

fn draw_event(spec: &SynthSpec, event: usize) -> EventDraw {
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    rng.set_stream(event as u64 + 1);
    let [lo, hi] = spec.posts_per_event;
    let n = rng.random_range(lo..=hi);

    let mut text_centroid = normal_vec(&mut rng, spec.d_text, spec.centroid_scale);
    text_centroid[0] = 0.0;
    let mut img_centroid = normal_vec(&mut rng, spec.d_img, spec.centroid_scale);
    img_centroid[0] = 0.0;
    let drift_dir = off_axis_direction(&mut rng, spec.d_text);

    // Posts fill consecutive half-span slots so that every window (two
    // adjacent slots) holds a bounded number of them.
    let stride = spec.window_span_secs / 2;
    let per_slot = rng.random_range(3..=6usize);
    let slots = n.div_ceil(per_slot).max(1);
    let counts = spread(n, slots);
    let event_start = spec.start_time + rng.random_range(0..30 * DAY);

    let mut posts = Vec::with_capacity(n);
    let mut text = Vec::with_capacity(n);
    let mut image = Vec::with_capacity(n);
    let mut conflict = Vec::with_capacity(n);
    for (slot, &count) in counts.iter().enumerate() {
        let slot_start = event_start + slot as i64 * stride;
        let mut offsets: Vec<i64> = (0..count).map(|_| rng.random_range(0..stride)).collect();
        offsets.sort_unstable();
        if slot == 0 {
            offsets[0] = 0;
        }
        for off in offsets {
            let j = posts.len();
            let label = u8::from(rng.random_bool(spec.imbalance));
            let mut t = text_centroid.clone();
            for (x, dx) in t.iter_mut().zip(&drift_dir) {
                *x += spec.drift * slot as f64 * dx;
            }
            t[0] += f64::from(label) * spec.margin;
            for x in t.iter_mut() {
                *x += gauss(&mut rng);
            }

            let flipped = rng.random_bool(spec.modality_conflict);
            let has_image = !rng.random_bool(spec.missing_image);
            let img_label = if flipped { 1 - label } else { label };
            let mut v = img_centroid.clone();
            v[0] += f64::from(img_label) * spec.margin;
            for x in v.iter_mut() {
                *x += gauss(&mut rng);
            }
            if !has_image {
                v.iter_mut().for_each(|x| *x = 0.0);
            }

            posts.push(Post {
                id: format!("e{event:03}_p{j:04}"),
                label,
                timestamp: slot_start + off,
                has_image,
                extra: Map::new(),
            });
            text.push(t);
            image.push(v);
            conflict.push(flipped);
        }
    }
    EventDraw { posts, text, image, conflict }
}

fn to_matrix(rows: &[Vec<f64>], cols: usize) -> Array2<f64> {
    let flat: Vec<f64> = rows.iter().flatten().copied().collect();
    Array2::from_shape_vec((rows.len(), cols), flat).expect("rows have equal width")
}

/// Draws a dataset in memory. Deterministic in `spec.seed`.
pub fn generate(spec: &SynthSpec) -> Result<(Dataset, GroundTruth)> {
    spec.validate()?;
    let draws: Vec<EventDraw> = (0..spec.n_events)
        .into_par_iter()
        .map(|e| draw_event(spec, e))
        .collect();

    let mut posts = Vec::new();
    let mut text = Vec::new();
    let mut image = Vec::new();
    let mut conflict = Vec::new();
    let mut event_of = Vec::new();
    let mut events = Vec::new();
    for (e, d) in draws.into_iter().enumerate() {
        let start = posts.len();
        let positives = d.posts.iter().filter(|p| p.label == 1).count();
        event_of.extend(std::iter::repeat_n(e, d.posts.len()));
        posts.extend(d.posts);
        text.extend(d.text);
        image.extend(d.image);
        conflict.extend(d.conflict);
        events.push(GroundTruthEvent {
            event: e,
            members: (start..posts.len()).collect(),
            positives,
        });
    }
    // Match the precision of the on-disk format so that a written and
    // reloaded dataset equals the in-memory one.
    let round = |m: Array2<f64>| m.mapv(|x| x as f32 as f64);
    let n_positive = posts.iter().filter(|p| p.label == 1).count();
    let ds = Dataset::new(posts, round(to_matrix(&text, spec.d_text)), round(to_matrix(&image, spec.d_img)))?;
    let truth = GroundTruth {
        spec: spec.clone(),
        class_axis: 0,
        events,
        event_of,
        conflict,
        n_positive,
    };
    Ok((ds, truth))
}

/// Writes the dataset files plus `ground_truth.json` into `dir`.
pub fn generate_to(spec: &SynthSpec, dir: impl AsRef<Path>) -> Result<GroundTruth> {
    let dir = dir.as_ref();
    let (ds, truth) = generate(spec)?;
    write_dataset(&ds, dir)?;
    let path = dir.join("ground_truth.json");
    let json = serde_json::to_string_pretty(&truth).map_err(|e| Error::format("ground truth", e.to_string()))?;
    fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
    Ok(truth)
}

pub fn read_spec(path: impl AsRef<Path>) -> Result<SynthSpec> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::config("spec", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn slot_spread_is_balanced() {
        assert_eq!(spread(10, 3), vec![4, 3, 3]);
        assert_eq!(spread(5, 5), vec![1; 5]);
    }

    #[test]
    fn rejects_infeasible_specs() {
        for bad in [
            SynthSpec { posts_per_event: [0, 0], ..Default::default() },
            SynthSpec { posts_per_event: [5, 2], ..Default::default() },
            SynthSpec { imbalance: 1.0, ..Default::default() },
            SynthSpec { modality_conflict: 1.5, ..Default::default() },
            SynthSpec { n_events: 0, ..Default::default() },
        ] {
            assert!(generate(&bad).unwrap_err().is_config());
        }
    }

    #[test]
    fn deterministic_and_sized() {
        let spec = SynthSpec { n_events: 3, posts_per_event: [5, 9], ..Default::default() };
        let (a, ta) = generate(&spec).unwrap();
        let (b, tb) = generate(&spec).unwrap();
        assert_eq!(a.text_matrix(), b.text_matrix());
        assert_eq!(ta, tb);
        assert_eq!(ta.events.len(), 3);
        assert!(ta.events.iter().all(|e| (5..=9).contains(&e.members.len())));
    }

    #[test]
    fn missing_images_are_zero() {
        let spec = SynthSpec { missing_image: 1.0, n_events: 2, ..Default::default() };
        let (ds, _) = generate(&spec).unwrap();
        assert!(ds.posts.iter().all(|p| !p.has_image));
        assert!(ds.image_matrix().iter().all(|&x| x == 0.0));
    }
}
