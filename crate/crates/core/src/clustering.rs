//! Pseudo-event construction by agglomerative clustering of text embeddings.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::Dataset;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Linkage {
    #[default]
    Average,
    Complete,
    Single,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "average" => Ok(Linkage::Average),
            "complete" => Ok(Linkage::Complete),
            "single" => Ok(Linkage::Single),
            other => Err(Error::config("cluster.linkage", format!("unknown linkage `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PseudoEvent {
    pub event_id: usize,
    /// Post indices sorted by timestamp, ties by manifest order.
    #[serde(rename = "members")]
    pub member_indices: Vec<usize>,
}

impl PseudoEvent {
    pub fn new(event_id: usize, mut members: Vec<usize>, ds: &Dataset) -> Self {
        sort_by_time(&mut members, ds);
        Self {
            event_id,
            member_indices: members,
        }
    }

    pub fn len(&self) -> usize {
        self.member_indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.member_indices.is_empty()
    }
}

pub(crate) fn sort_by_time(members: &mut [usize], ds: &Dataset) {
    members.sort_by_key(|&i| (ds.posts[i].timestamp, i));
}

/// `1 − cos(a, b)`; any zero-norm vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    1.0 - dot / (na * nb)
}

/// Condensed-free square distance matrix, stored row-major.
struct DistMatrix {
    n: usize,
    d: Vec<f64>,
}

impl DistMatrix {
    fn from_vectors(vectors: &[Vec<f64>]) -> Self {
        let n = vectors.len();
        let mut d = vec![0.0; n * n];
        d.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for (j, slot) in row.iter_mut().enumerate() {
                if i != j {
                    *slot = cosine_distance(&vectors[i], &vectors[j]);
                }
            }
        });
        Self { n, d }
    }

    fn get(&self, i: usize, j: usize) -> f64 {
        self.d[i * self.n + j]
    }

    fn set(&mut self, i: usize, j: usize, v: f64) {
        self.d[i * self.n + j] = v;
        self.d[j * self.n + i] = v;
    }
}

/// Agglomerative clustering into `num_clusters` groups.
///
/// Clusters are identified by the smallest original index they contain.
/// Each step merges the pair with minimum linkage distance, ties going to
/// the lexicographically smallest `(id, id)` pair. Returns member lists in
/// ascending order of cluster id.
pub fn agglomerate(vectors: &[Vec<f64>], num_clusters: usize, linkage: Linkage) -> Result<Vec<Vec<usize>>> {
    let n = vectors.len();
    if num_clusters < 1 {
        return Err(Error::InvalidArgument("num_clusters must be at least 1".into()));
    }
    if num_clusters > n {
        return Err(Error::InvalidArgument(format!(
            "num_clusters {num_clusters} exceeds the number of posts {n}"
        )));
    }
    let mut dist = DistMatrix::from_vectors(vectors);
    let mut active = vec![true; n];
    let mut size = vec![1usize; n];
    let mut members: Vec<Vec<usize>> = (0..n).map(|i| vec![i]).collect();

    // nn[i]: nearest active j > i, with its distance; ties to the smallest j.
    let mut nn = vec![usize::MAX; n];
    let mut nn_dist = vec![f64::INFINITY; n];
    let refresh = |i: usize, dist: &DistMatrix, active: &[bool], nn: &mut [usize], nn_dist: &mut [f64]| {
        nn[i] = usize::MAX;
        nn_dist[i] = f64::INFINITY;
        for j in i + 1..n {
            if active[j] {
                let dj = dist.get(i, j);
                if dj < nn_dist[i] {
                    nn_dist[i] = dj;
                    nn[i] = j;
                }
            }
        }
    };
    for i in 0..n {
        refresh(i, &dist, &active, &mut nn, &mut nn_dist);
    }

    let mut remaining = n;
    while remaining > num_clusters {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if !active[i] || nn[i] == usize::MAX {
                continue;
            }
            let cand = (nn_dist[i], i, nn[i]);
            best = match best {
                None => Some(cand),
                Some(b) if cand.0 < b.0 => Some(cand),
                keep => keep,
            };
        }
        let (_, a, b) = best.expect("at least two active clusters");

        for k in 0..n {
            if !active[k] || k == a || k == b {
                continue;
            }
            let (da, db) = (dist.get(a, k), dist.get(b, k));
            let merged = match linkage {
                Linkage::Single => da.min(db),
                Linkage::Complete => da.max(db),
                Linkage::Average => {
                    (size[a] as f64 * da + size[b] as f64 * db) / (size[a] + size[b]) as f64
                }
            };
            dist.set(a, k, merged);
        }
        active[b] = false;
        size[a] += size[b];
        let moved = std::mem::take(&mut members[b]);
        members[a].extend(moved);
        remaining -= 1;

        refresh(a, &dist, &active, &mut nn, &mut nn_dist);
        for i in 0..a {
            if !active[i] {
                continue;
            }
            if nn[i] == a || nn[i] == b {
                refresh(i, &dist, &active, &mut nn, &mut nn_dist);
            } else {
                let da = dist.get(i, a);
                if da < nn_dist[i] || (da == nn_dist[i] && a < nn[i]) {
                    nn_dist[i] = da;
                    nn[i] = a;
                }
            }
        }
        for i in a + 1..b {
            if active[i] && nn[i] == b {
                refresh(i, &dist, &active, &mut nn, &mut nn_dist);
            }
        }
    }

    Ok((0..n)
        .filter(|&i| active[i])
        .map(|i| {
            let mut m = std::mem::take(&mut members[i]);
            m.sort_unstable();
            m
        })
        .collect())
}

/// Groups posts into pseudo-events using only the text embeddings.
pub fn cluster_events(ds: &Dataset, num_clusters: usize, linkage: Linkage) -> Result<Vec<PseudoEvent>> {
    let vectors: Vec<Vec<f64>> = (0..ds.len()).map(|i| ds.text_vec(i).to_vec()).collect();
    let groups = agglomerate(&vectors, num_clusters, linkage)?;
    Ok(groups
        .into_iter()
        .enumerate()
        .map(|(id, members)| PseudoEvent::new(id, members, ds))
        .collect())
}

/// One event per distinct value of a manifest field, in order of first appearance.
pub fn pass_through_events(ds: &Dataset, key: &str) -> Result<Vec<PseudoEvent>> {
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, post) in ds.posts.iter().enumerate() {
        let value = post.extra.get(key).ok_or_else(|| {
            Error::Dataset(format!("post `{}` has no `{key}` field", post.id))
        })?;
        let k = match value {
            serde_json::Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        groups
            .entry(k.clone())
            .or_insert_with(|| {
                order.push(k);
                Vec::new()
            })
            .push(i);
    }
    Ok(order
        .into_iter()
        .enumerate()
        .map(|(id, k)| PseudoEvent::new(id, groups.remove(&k).unwrap(), ds))
        .collect())
}

pub fn write_events(events: &[PseudoEvent], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(events).expect("serializable");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_events(path: impl AsRef<Path>) -> Result<Vec<PseudoEvent>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format("events.json", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Post;
    use ndarray::Array2;
    use serde_json::{Map, Value};

    fn ds_from(vectors: &[[f64; 2]]) -> Dataset {
        let n = vectors.len();
        let posts = (0..n)
            .map(|i| Post {
                id: format!("p{i}"),
                label: 0,
                timestamp: (n - i) as i64,
                has_image: false,
                extra: Map::new(),
            })
            .collect();
        let text = Array2::from_shape_fn((n, 2), |(i, j)| vectors[i][j]);
        Dataset::new(posts, text, Array2::zeros((n, 1))).unwrap()
    }

    #[test]
    fn two_direction_groups_for_all_linkages() {
        let ds = ds_from(&[[1.0, 0.0], [0.99, 0.14], [0.0, 1.0], [0.14, 0.99]]);
        for linkage in [Linkage::Average, Linkage::Complete, Linkage::Single] {
            let ev = cluster_events(&ds, 2, linkage).unwrap();
            let mut sets: Vec<Vec<usize>> = ev
                .iter()
                .map(|e| {
                    let mut m = e.member_indices.clone();
                    m.sort();
                    m
                })
                .collect();
            sets.sort();
            assert_eq!(sets, vec![vec![0, 1], vec![2, 3]], "{linkage:?}");
        }
    }

    #[test]
    fn extreme_cluster_counts() {
        let ds = ds_from(&[[1.0, 0.0], [0.5, 0.5], [0.0, 1.0]]);
        assert_eq!(cluster_events(&ds, 3, Linkage::Average).unwrap().len(), 3);
        let one = cluster_events(&ds, 1, Linkage::Average).unwrap();
        assert_eq!(one.len(), 1);
        // Members come out in timestamp order (timestamps descend with index here).
        assert_eq!(one[0].member_indices, vec![2, 1, 0]);
        assert!(cluster_events(&ds, 0, Linkage::Average).is_err());
        assert!(cluster_events(&ds, 4, Linkage::Average).is_err());
    }

    #[test]
    fn zero_vectors_are_distance_one() {
        assert_eq!(cosine_distance(&[0.0, 0.0], &[1.0, 0.0]), 1.0);
        assert_eq!(cosine_distance(&[0.0, 0.0], &[0.0, 0.0]), 1.0);
        assert!(cosine_distance(&[2.0, 0.0], &[1.0, 0.0]).abs() < 1e-15);
    }

    #[test]
    fn pass_through_groups_by_key() {
        let mut ds = ds_from(&[[1.0, 0.0]; 5]);
        for (p, k) in ds.posts.iter_mut().zip(["a", "a", "b", "b", "b"]) {
            p.extra.insert("topic".into(), Value::from(k));
        }
        let ev = pass_through_events(&ds, "topic").unwrap();
        assert_eq!(ev.iter().map(|e| e.len()).collect::<Vec<_>>(), vec![2, 3]);
        assert!(pass_through_events(&ds, "missing").is_err());
    }

    #[test]
    fn events_json_shape() {
        let ev = vec![PseudoEvent { event_id: 0, member_indices: vec![2, 0] }];
        let v: Value = serde_json::to_value(&ev).unwrap();
        assert_eq!(v, serde_json::json!([{"event_id": 0, "members": [2, 0]}]));
    }
}
