//! Overlapping fixed-span time windows within a pseudo-event.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::clustering::{sort_by_time, PseudoEvent};
use crate::dataset::Dataset;
use crate::error::{Error, Result};

pub const DAY: i64 = 86_400;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Window {
    /// 1-based, contiguous after empty windows are dropped.
    pub index: usize,
    pub start: i64,
    /// Exclusive.
    pub end: i64,
    pub members: Vec<usize>,
    /// Latest member timestamp; the reference point for recency decay.
    pub t_max_local: i64,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSequence {
    pub event_id: usize,
    pub windows: Vec<Window>,
}

impl WindowSequence {
    pub fn len(&self) -> usize {
        self.windows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.windows.is_empty()
    }

    /// For each event member, the position (0-based) of the last window containing it.
    pub fn last_window_of(&self, post: usize) -> Option<usize> {
        self.windows.iter().rposition(|w| w.members.contains(&post))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetKind {
    Fakeddit,
    Ind,
    Covid,
}

impl std::str::FromStr for DatasetKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fakeddit" => Ok(DatasetKind::Fakeddit),
            "ind" => Ok(DatasetKind::Ind),
            "covid" => Ok(DatasetKind::Covid),
            other => Err(Error::config("window.preset", format!("unknown preset `{other}`"))),
        }
    }
}

/// `(span, stride)` in seconds for each benchmark's windowing scheme.
pub fn window_presets(kind: DatasetKind) -> (i64, i64) {
    match kind {
        DatasetKind::Fakeddit => (4 * DAY, 2 * DAY),
        DatasetKind::Ind => (2 * DAY, DAY),
        DatasetKind::Covid => (7 * DAY, 7 * DAY / 2),
    }
}

/// Windows `[T0 + k·stride, T0 + k·stride + span)` from the earliest member
/// until one covers the latest member. Empty windows are dropped.
pub fn segment_event(event: &PseudoEvent, ds: &Dataset, span_secs: i64, stride_secs: i64) -> Result<WindowSequence> {
    if span_secs <= 0 || stride_secs <= 0 {
        return Err(Error::InvalidArgument("window span and stride must be positive".into()));
    }
    if stride_secs > span_secs {
        return Err(Error::InvalidArgument("window stride must not exceed the span".into()));
    }
    if event.is_empty() {
        return Err(Error::InvalidArgument(format!("event {} is empty", event.event_id)));
    }
    let mut members = event.member_indices.clone();
    sort_by_time(&mut members, ds);
    let ts: Vec<i64> = members.iter().map(|&i| ds.posts[i].timestamp).collect();
    let t0 = ts[0];
    let t_last = *ts.last().unwrap();

    let mut windows = Vec::new();
    let mut lo = 0usize;
    let mut start = t0;
    loop {
        let end = start + span_secs;
        while lo < ts.len() && ts[lo] < start {
            lo += 1;
        }
        let hi = lo + ts[lo..].partition_point(|&t| t < end);
        if hi > lo {
            windows.push(Window {
                index: windows.len() + 1,
                start,
                end,
                members: members[lo..hi].to_vec(),
                t_max_local: ts[hi - 1],
            });
        }
        if end > t_last {
            break;
        }
        if hi == lo {
            // Empty: jump straight to the first window reaching ts[lo].
            let k = (ts[lo] - span_secs - start) / stride_secs + 1;
            start += k * stride_secs;
        } else {
            start += stride_secs;
        }
    }
    Ok(WindowSequence {
        event_id: event.event_id,
        windows,
    })
}

pub fn segment_all(events: &[PseudoEvent], ds: &Dataset, span_secs: i64, stride_secs: i64) -> Result<Vec<WindowSequence>> {
    events
        .iter()
        .map(|e| segment_event(e, ds, span_secs, stride_secs).map_err(|err| err.in_event(e.event_id)))
        .collect()
}

pub fn write_windows(seqs: &[WindowSequence], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let json = serde_json::to_string_pretty(seqs).expect("serializable");
    fs::write(path, json).map_err(|e| Error::io(path, e))
}

pub fn read_windows(path: impl AsRef<Path>) -> Result<Vec<WindowSequence>> {
    let path = path.as_ref();
    let raw = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&raw).map_err(|e| Error::format("windows.json", e.to_string()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::Post;
    use ndarray::Array2;
    use serde_json::Map;

    fn ds_with_times(ts: &[i64]) -> Dataset {
        let posts = ts
            .iter()
            .enumerate()
            .map(|(i, &t)| Post {
                id: i.to_string(),
                label: 0,
                timestamp: t,
                has_image: false,
                extra: Map::new(),
            })
            .collect();
        Dataset::new(posts, Array2::ones((ts.len(), 2)), Array2::zeros((ts.len(), 2))).unwrap()
    }

    fn whole(ds: &Dataset) -> PseudoEvent {
        PseudoEvent::new(0, (0..ds.len()).collect(), ds)
    }

    fn brute_force(ts: &[i64], span: i64, stride: i64) -> Vec<Vec<usize>> {
        let mut order: Vec<usize> = (0..ts.len()).collect();
        order.sort_by_key(|&i| (ts[i], i));
        let t0 = ts[order[0]];
        let t_last = ts[*order.last().unwrap()];
        let mut out = Vec::new();
        let mut k = 0;
        loop {
            let s = t0 + k * stride;
            let m: Vec<usize> = order.iter().copied().filter(|&i| ts[i] >= s && ts[i] < s + span).collect();
            if !m.is_empty() {
                out.push(m);
            }
            if s + span > t_last {
                return out;
            }
            k += 1;
        }
    }

    #[test]
    fn five_days_span_four_stride_two() {
        let ds = ds_with_times(&[0, DAY, 2 * DAY, 3 * DAY, 4 * DAY]);
        let seq = segment_event(&whole(&ds), &ds, 4 * DAY, 2 * DAY).unwrap();
        let got: Vec<_> = seq.windows.iter().map(|w| (w.start, w.end, w.members.clone())).collect();
        assert_eq!(
            got,
            vec![(0, 4 * DAY, vec![0, 1, 2, 3]), (2 * DAY, 6 * DAY, vec![2, 3, 4])]
        );
        assert_eq!(seq.windows[1].index, 2);
        assert_eq!(seq.windows[1].t_max_local, 4 * DAY);
    }

    #[test]
    fn single_post_and_gap() {
        let ds = ds_with_times(&[500]);
        let seq = segment_event(&whole(&ds), &ds, 4 * DAY, 2 * DAY).unwrap();
        assert_eq!(seq.len(), 1);

        let ds = ds_with_times(&[0, 100 * DAY]);
        let seq = segment_event(&whole(&ds), &ds, 4 * DAY, 2 * DAY).unwrap();
        assert_eq!(seq.len(), 2);
        assert_eq!(seq.windows[0].members, vec![0]);
        assert_eq!(seq.windows[1].members, vec![1]);
        assert!(seq.windows[1].start <= 100 * DAY && seq.windows[1].end > 100 * DAY);
        assert_eq!(seq.windows[1].start, 98 * DAY);
    }

    #[test]
    fn matches_brute_force_enumeration() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        for _ in 0..200 {
            let n = rng.random_range(1..15);
            let ts: Vec<i64> = (0..n).map(|_| rng.random_range(0..40)).collect();
            let span = rng.random_range(1..10);
            let stride = rng.random_range(1..=span);
            let ds = ds_with_times(&ts);
            let seq = segment_event(&whole(&ds), &ds, span, stride).unwrap();
            let got: Vec<Vec<usize>> = seq.windows.iter().map(|w| w.members.clone()).collect();
            assert_eq!(got, brute_force(&ts, span, stride), "ts={ts:?} span={span} stride={stride}");
        }
    }

    #[test]
    fn rejects_bad_parameters() {
        let ds = ds_with_times(&[0, 1]);
        let e = whole(&ds);
        assert!(segment_event(&e, &ds, 0, 1).is_err());
        assert!(segment_event(&e, &ds, 2, 3).is_err());
        assert!(segment_event(&e, &ds, 2, -1).is_err());
    }

    #[test]
    fn presets() {
        assert_eq!(window_presets(DatasetKind::Fakeddit), (4 * DAY, 2 * DAY));
        assert_eq!(window_presets(DatasetKind::Covid), (7 * DAY, 302_400));
        assert_eq!(window_presets(DatasetKind::Ind), (2 * DAY, DAY));
        assert!("weekly".parse::<DatasetKind>().is_err());
    }
}
