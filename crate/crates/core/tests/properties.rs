//! Invariants checked over generated inputs.

use ecatch::clustering::{agglomerate, Linkage, PseudoEvent};
use ecatch::dataset::{load_dataset, write_dataset, Dataset, Post};
use ecatch::metrics::{auc_roc, evaluate};
use ecatch::objective::{ce_loss, class_weights, mining_mask, ClassCounts, CeTerm};
use ecatch::tape::{temporal_consistency, Tape};
use ecatch::trend::decay_weights;
use ecatch::windowing::segment_event;
use ndarray::Array2;
use proptest::prelude::*;
use serde_json::Map;

fn dataset_from(ts: &[i64], labels: &[u8], text: Vec<f64>, image: Vec<f64>, d_text: usize, d_img: usize) -> Dataset {
    let posts = ts
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&t, &l))| Post { id: format!("x{i}"), label: l, timestamp: t, has_image: true, extra: Map::new() })
        .collect();
    let n = ts.len();
    Dataset::new(
        posts,
        Array2::from_shape_vec((n, d_text), text).unwrap(),
        Array2::from_shape_vec((n, d_img), image).unwrap(),
    )
    .unwrap()
}

fn timed(ts: &[i64]) -> Dataset {
    let n = ts.len();
    dataset_from(ts, &vec![0; n], vec![1.0; n], vec![1.0; n], 1, 1)
}

fn vectors(n: std::ops::RangeInclusive<usize>, d: usize) -> impl Strategy<Value = Vec<Vec<f64>>> {
    prop::collection::vec(prop::collection::vec(-5.0f64..5.0, d), n)
}

fn linkage() -> impl Strategy<Value = Linkage> {
    prop_oneof![Just(Linkage::Single), Just(Linkage::Complete), Just(Linkage::Average)]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn dataset_round_trips_through_disk(
        n in 1usize..12,
        d_text in 1usize..5,
        d_img in 1usize..4,
        seed in any::<u32>(),
    ) {
        // f32-representable values survive the f32 storage exactly.
        let val = |i: usize| f64::from(((seed as usize + i * 7919) % 2001) as f32 / 100.0 - 10.0);
        let ts: Vec<i64> = (0..n).map(|i| (seed as i64 % 1000) + i as i64 * 61).collect();
        let labels: Vec<u8> = (0..n).map(|i| ((seed as usize + i) % 2) as u8).collect();
        let ds = dataset_from(&ts, &labels, (0..n * d_text).map(val).collect(), (0..n * d_img).map(|i| val(i + 3)).collect(), d_text, d_img);
        let dir = tempfile::tempdir().unwrap();
        write_dataset(&ds, dir.path()).unwrap();
        let back = load_dataset(dir.path()).unwrap();
        prop_assert_eq!(back.text_matrix(), ds.text_matrix());
        prop_assert_eq!(back.image_matrix(), ds.image_matrix());
        prop_assert_eq!(back.labels(), ds.labels());
        prop_assert_eq!(back.fingerprint(), ds.fingerprint());
    }

    #[test]
    fn clustering_partitions_into_k_groups(vs in vectors(1..=14, 3), k in 1usize..15, l in linkage()) {
        let k = k.min(vs.len());
        let groups = agglomerate(&vs, k, l).unwrap();
        prop_assert_eq!(groups.len(), k);
        let mut all: Vec<usize> = groups.iter().flatten().copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..vs.len()).collect::<Vec<_>>());
        prop_assert!(groups.iter().all(|g| !g.is_empty()));
    }

    #[test]
    fn clustering_ignores_positive_rescaling(vs in vectors(2..=10, 3), k in 1usize..10, l in linkage(), scales in prop::collection::vec(0.5f64..8.0, 10)) {
        let k = k.min(vs.len());
        // Powers of two rescale exactly, so distances are bit-identical.
        let scaled: Vec<Vec<f64>> = vs.iter().zip(&scales).map(|(v, s)| {
            let f = 2f64.powi(s.log2().round() as i32);
            v.iter().map(|x| x * f).collect()
        }).collect();
        prop_assert_eq!(agglomerate(&vs, k, l).unwrap(), agglomerate(&scaled, k, l).unwrap());
    }

    #[test]
    fn windows_match_a_brute_force_scan(
        mut ts in prop::collection::vec(0i64..2000, 1..30),
        span in 1i64..300,
        stride_frac in 0.05f64..1.0,
    ) {
        let stride = ((span as f64 * stride_frac).ceil() as i64).clamp(1, span);
        ts.sort_unstable();
        let ds = timed(&ts);
        let ev = PseudoEvent::new(0, (0..ts.len()).collect(), &ds);
        let seq = segment_event(&ev, &ds, span, stride).unwrap();

        let (t0, t_last) = (ts[0], *ts.last().unwrap());
        let mut expected = Vec::new();
        let mut start = t0;
        loop {
            let m: Vec<usize> = (0..ts.len()).filter(|&i| ts[i] >= start && ts[i] < start + span).collect();
            if !m.is_empty() {
                expected.push((start, m));
            }
            if start + span > t_last {
                break;
            }
            start += stride;
        }
        let got: Vec<(i64, Vec<usize>)> = seq.windows.iter().map(|w| (w.start, w.members.clone())).collect();
        prop_assert_eq!(got, expected);
        for (k, w) in seq.windows.iter().enumerate() {
            prop_assert_eq!(w.index, k + 1);
            prop_assert_eq!(w.t_max_local, w.members.iter().map(|&i| ts[i]).max().unwrap());
        }
        for i in 0..ts.len() {
            prop_assert!(seq.last_window_of(i).is_some());
        }
    }

    #[test]
    fn decay_weights_are_a_recency_ordered_distribution(ts in prop::collection::vec(0i64..10_000, 1..20), alpha in 0.0f64..0.01) {
        let t_max = *ts.iter().max().unwrap();
        let w = decay_weights(&ts, t_max, alpha);
        prop_assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        for i in 0..ts.len() {
            for j in 0..ts.len() {
                if ts[i] >= ts[j] {
                    prop_assert!(w[i] >= w[j]);
                }
            }
        }
    }

    #[test]
    fn softmax_rows_are_distributions(vals in prop::collection::vec(-30.0f64..30.0, 12)) {
        let mut tape = Tape::new();
        let x = tape.leaf(Array2::from_shape_vec((3, 4), vals).unwrap());
        let s = tape.softmax_rows(x);
        for row in tape.value(s).rows() {
            prop_assert!((row.sum() - 1.0).abs() < 1e-12);
            prop_assert!(row.iter().all(|&p| p >= 0.0));
        }
    }

    #[test]
    fn auc_ignores_order_and_monotone_maps(
        pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 2..40),
        rot in any::<prop::sample::Index>(),
    ) {
        let (p, y): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
        prop_assume!(y.contains(&0) && y.contains(&1));
        let base = auc_roc(&p, &y).unwrap();
        let k = rot.index(p.len());
        let (mut p2, mut y2) = (p.clone(), y.clone());
        p2.rotate_left(k);
        y2.rotate_left(k);
        prop_assert!((auc_roc(&p2, &y2).unwrap() - base).abs() < 1e-12);
        let mapped: Vec<f64> = p.iter().map(|x| x.powi(3) * 5.0 - 2.0).collect();
        prop_assert!((auc_roc(&mapped, &y).unwrap() - base).abs() < 1e-12);
        prop_assert!((0.0..=1.0).contains(&base));
    }

    #[test]
    fn confusion_counts_add_up(pairs in prop::collection::vec((0.0f64..1.0, 0u8..2), 1..40), thr in 0.0f64..1.0) {
        let (p, y): (Vec<f64>, Vec<u8>) = pairs.iter().copied().unzip();
        let r = evaluate(&p, &y, thr).unwrap();
        prop_assert_eq!(r.tp + r.fp + r.tn + r.fn_, p.len());
        prop_assert_eq!(r.tp + r.fn_, y.iter().filter(|&&l| l == 1).count());
        for m in [r.accuracy, r.precision, r.recall, r.f1] {
            prop_assert!((0.0..=1.0).contains(&m));
        }
    }

    #[test]
    fn mining_keeps_the_hardest_fraction(vals in prop::collection::vec(0.0f64..10.0, 1..30), rho in 0.01f64..1.0) {
        let keys: Vec<usize> = (0..vals.len()).collect();
        prop_assert!(mining_mask(&vals, &keys, 1.0).iter().all(|&m| m));
        let mask = mining_mask(&vals, &keys, rho);
        let k = (rho * vals.len() as f64).ceil() as usize;
        prop_assert_eq!(mask.iter().filter(|&&m| m).count(), k);
        let kept_min = vals.iter().zip(&mask).filter(|(_, &m)| m).map(|(v, _)| *v).fold(f64::INFINITY, f64::min);
        prop_assert!(vals.iter().zip(&mask).filter(|(_, &m)| !m).all(|(v, _)| *v <= kept_min));
    }

    #[test]
    fn cross_entropy_scales_with_weights(
        terms in prop::collection::vec((0.01f64..0.99, 0u8..2, 0.1f64..3.0), 1..20),
        k in 0.1f64..10.0,
    ) {
        let mk = |s: f64| -> Vec<CeTerm> {
            terms.iter().enumerate().map(|(i, &(prob, label, w))| CeTerm { post: i, label, weight: w * s, prob }).collect()
        };
        let a = ce_loss(&mk(1.0), None).unwrap();
        let b = ce_loss(&mk(k), None).unwrap();
        prop_assert!((b - k * a).abs() <= 1e-9 * b.abs().max(1.0));
    }

    #[test]
    fn class_weights_balance_the_classes(n0 in 0usize..200, n1 in 0usize..200, eps in 1e-9f64..1.0) {
        let (w0, w1) = class_weights(ClassCounts { n0, n1 }, eps);
        let mean = (n0 + n1) as f64 / 2.0;
        prop_assert!((w0 * (n0 as f64 + eps) - mean).abs() < 1e-9 * mean.max(1.0));
        prop_assert!((w1 * (n1 as f64 + eps) - mean).abs() < 1e-9 * mean.max(1.0));
        if n0 < n1 {
            prop_assert!(w0 > w1);
        }
    }

    #[test]
    fn temporal_consistency_is_rotation_invariant(vals in prop::collection::vec(-2.0f64..2.0, 15), theta in 0.0f64..6.3, clamp in any::<bool>()) {
        let s = Array2::from_shape_vec((5, 3), vals).unwrap();
        let (c, sn) = (theta.cos(), theta.sin());
        let r = ndarray::array![[c, -sn, 0.0], [sn, c, 0.0], [0.0, 0.0, 1.0]];
        let rotated = s.dot(&r.t());
        let a = temporal_consistency(&s, clamp);
        let b = temporal_consistency(&rotated, clamp);
        prop_assert!((a - b).abs() < 1e-9 * a.abs().max(1.0));
        if clamp {
            prop_assert!(a >= 0.0);
        }
    }
}
