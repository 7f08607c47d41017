use ecatch::clustering::cluster_events;
use ecatch::synth::{generate, SynthSpec};
use ecatch::windowing::segment_all;
use ndarray::{Array1, Array2};

/// Solves `a x = b` by Gaussian elimination with partial pivoting.
fn solve(mut a: Array2<f64>, mut b: Array1<f64>) -> Array1<f64> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[[i, col]].abs().total_cmp(&a[[j, col]].abs())).unwrap();
        for k in 0..n {
            a.swap([col, k], [piv, k]);
        }
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[[row, col]] / a[[col, col]];
            for k in col..n {
                a[[row, k]] -= f * a[[col, k]];
            }
            b[row] -= f * b[col];
        }
    }
    let mut x = Array1::zeros(n);
    for row in (0..n).rev() {
        let s: f64 = (row + 1..n).map(|k| a[[row, k]] * x[k]).sum();
        x[row] = (b[row] - s) / a[[row, row]];
    }
    x
}

#[test]
fn wide_margin_is_linearly_separable() {
    let spec = SynthSpec {
        n_events: 8,
        posts_per_event: [40, 60],
        imbalance: 0.5,
        margin: 10.0,
        modality_conflict: 0.0,
        seed: 21,
        ..Default::default()
    };
    let (ds, _) = generate(&spec).unwrap();
    let n = ds.len();
    let d = spec.d_text + 1;
    let x = Array2::from_shape_fn((n, d), |(i, j)| if j < spec.d_text { ds.text_matrix()[[i, j]] } else { 1.0 });
    let y = Array1::from_iter(ds.labels().iter().map(|&l| f64::from(l)));
    let w = solve(x.t().dot(&x), x.t().dot(&y));
    let pred = x.dot(&w);
    let correct = pred.iter().zip(ds.labels()).filter(|(p, l)| u8::from(**p >= 0.5) == *l).count();
    let acc = correct as f64 / n as f64;
    assert!(acc >= 0.99, "probe accuracy {acc}");
}

#[test]
fn positive_count_is_binomial_plausible() {
    for seed in 0..5 {
        let spec = SynthSpec { n_events: 10, posts_per_event: [100, 100], imbalance: 0.2, seed, ..Default::default() };
        let (ds, truth) = generate(&spec).unwrap();
        assert_eq!(ds.len(), 1000);
        let pos = ds.labels().iter().filter(|&&l| l == 1).count();
        assert_eq!(pos, truth.n_positive);
        assert!((158..=243).contains(&pos), "seed {seed}: {pos} positives");
    }
}

#[test]
fn positive_rate_converges_at_ten_thousand_posts() {
    let spec = SynthSpec { n_events: 100, posts_per_event: [100, 100], d_text: 4, d_img: 2, imbalance: 0.3, seed: 3, ..Default::default() };
    let (ds, _) = generate(&spec).unwrap();
    let rate = ds.labels().iter().filter(|&&l| l == 1).count() as f64 / ds.len() as f64;
    assert!((rate - 0.3).abs() <= 0.02, "rate {rate}");
}

#[test]
fn ground_truth_partitions_the_posts() {
    let spec = SynthSpec { n_events: 6, seed: 8, ..Default::default() };
    let (ds, truth) = generate(&spec).unwrap();
    let mut all: Vec<usize> = truth.events.iter().flat_map(|e| e.members.clone()).collect();
    all.sort_unstable();
    assert_eq!(all, (0..ds.len()).collect::<Vec<_>>());
    for e in &truth.events {
        assert!(e.members.iter().all(|&i| truth.event_of[i] == e.event));
    }
}

#[test]
fn missing_images_are_zero_rows() {
    let spec = SynthSpec { missing_image: 0.4, seed: 2, ..Default::default() };
    let (ds, _) = generate(&spec).unwrap();
    let missing: Vec<usize> = (0..ds.len()).filter(|&i| !ds.posts[i].has_image).collect();
    assert!(!missing.is_empty());
    assert!(missing.iter().all(|&i| ds.image_vec(i).iter().all(|&x| x == 0.0)));
}

#[test]
fn preset_windows_hold_a_bounded_number_of_posts() {
    let spec = SynthSpec { seed: 5, ..Default::default() };
    let (ds, truth) = generate(&spec).unwrap();
    let events: Vec<_> = truth
        .events
        .iter()
        .map(|e| ecatch::clustering::PseudoEvent::new(e.event, e.members.clone(), &ds))
        .collect();
    let windows = segment_all(&events, &ds, spec.window_span_secs, spec.window_span_secs / 2).unwrap();
    for w in windows.iter().flat_map(|s| &s.windows) {
        assert!((3..=20).contains(&w.members.len()), "window of {}", w.members.len());
    }
    // Clustering on the generated embeddings runs end to end.
    assert!(!cluster_events(&ds, 10, Default::default()).unwrap().is_empty());
}

#[test]
fn same_seed_same_data() {
    let spec = SynthSpec { drift: 0.5, modality_conflict: 0.1, seed: 17, ..Default::default() };
    let (a, ta) = generate(&spec).unwrap();
    let (b, tb) = generate(&spec).unwrap();
    assert_eq!(a.fingerprint(), b.fingerprint());
    assert_eq!(ta, tb);
    let (c, _) = generate(&SynthSpec { seed: 18, ..spec }).unwrap();
    assert_ne!(a.fingerprint(), c.fingerprint());
}
