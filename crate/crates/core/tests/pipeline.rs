//! Forward, backward and training behaviour of the assembled model.

use ecatch::clustering::{cluster_events, Linkage, PseudoEvent};
use ecatch::dataset::{assign_splits, Dataset, Post, Split, SplitFractions};
use ecatch::fusion::{fuse_window, AttentionConfig};
use ecatch::model::{backward, forward, ModelConfig};
use ecatch::objective::ObjectiveConfig;
use ecatch::params::{ModelDims, ModelParams};
use ecatch::synth::{generate, SynthSpec};
use ecatch::trainer::{train, TrainConfig};
use ecatch::windowing::{segment_all, WindowSequence, DAY};
use ndarray::Array2;
use serde_json::Map;

fn dims() -> ModelDims {
    ModelDims { d: 4, heads: 2, d_text: 3, d_img: 2 }
}

fn model_config(objective: ObjectiveConfig) -> ModelConfig {
    ModelConfig {
        attention: AttentionConfig { heads: 2, ..Default::default() },
        objective,
        ..Default::default()
    }
}

fn post(i: usize, label: u8, t: i64) -> Post {
    Post { id: format!("p{i}"), label, timestamp: t, has_image: true, extra: Map::new() }
}

/// Eight posts over four days in two events, all in the training split.
fn fixture() -> (Dataset, Vec<PseudoEvent>, Vec<WindowSequence>) {
    let labels = [1, 0, 0, 1, 1, 1, 0, 0];
    let posts = (0..8).map(|i| post(i, labels[i], i as i64 * DAY / 2)).collect();
    let text = Array2::from_shape_fn((8, 3), |(i, j)| ((i * 3 + j) as f64 * 0.37).sin());
    let image = Array2::from_shape_fn((8, 2), |(i, j)| ((i * 2 + j) as f64 * 0.71).cos());
    let ds = Dataset::new(posts, text, image).unwrap();
    let events = vec![PseudoEvent::new(0, vec![0, 2, 4, 6], &ds), PseudoEvent::new(1, vec![1, 3, 5, 7], &ds)];
    let windows = segment_all(&events, &ds, 2 * DAY, DAY).unwrap();
    (ds, events, windows)
}

#[test]
fn zero_parameters_give_one_half_and_ln2_loss() {
    let (ds, events, windows) = fixture();
    let params = ModelParams::zeros(dims()).unwrap();
    let cfg = model_config(ObjectiveConfig::default());
    let fp = forward(&ds, &events, &windows, &params, &cfg, false).unwrap();
    assert!(fp.probabilities().iter().all(|p| *p == Some(0.5)));
    // Each train post contributes w_{y}·ln 2, with weights taken per event.
    let expected: f64 = fp
        .report
        .per_event
        .iter()
        .zip(&events)
        .map(|(e, ev)| {
            ev.member_indices
                .iter()
                .map(|&i| if ds.posts[i].label == 1 { e.w1 } else { e.w0 })
                .sum::<f64>()
        })
        .sum::<f64>()
        * std::f64::consts::LN_2;
    assert!((fp.report.ce - expected).abs() < 1e-12, "{} vs {expected}", fp.report.ce);
    assert_eq!(fp.report.tc, 0.0);
    assert_eq!(fp.report.reg, 0.0);
}

#[test]
fn duplicating_an_event_adds_its_loss() {
    let (ds, events, windows) = fixture();
    let params = ModelParams::random_uniform(dims(), 0.5, 4).unwrap();
    let cfg = model_config(ObjectiveConfig { adaptive_weights: false, ..Default::default() });
    let base = forward(&ds, &events, &windows, &params, &cfg, false).unwrap();
    let mut ev = events.clone();
    let mut ws = windows.clone();
    let mut dup = events[1].clone();
    dup.event_id = 2;
    ev.push(dup);
    ws.push(windows[1].clone());
    let doubled = forward(&ds, &ev, &ws, &params, &cfg, false).unwrap();
    let e1 = &base.report.per_event[1];
    let expected = base.report.total + e1.ce + cfg.objective.lambda_tc * e1.tc;
    assert!((doubled.report.total - expected).abs() < 1e-12);
}

#[test]
fn single_post_collapses_to_one_lstm_step() {
    let ds = Dataset::new(
        vec![post(0, 1, 0)],
        Array2::from_shape_vec((1, 3), vec![0.3, -0.8, 0.5]).unwrap(),
        Array2::from_shape_vec((1, 2), vec![1.1, -0.2]).unwrap(),
    )
    .unwrap();
    let events = vec![PseudoEvent::new(0, vec![0], &ds)];
    let windows = segment_all(&events, &ds, 2 * DAY, DAY).unwrap();
    let params = ModelParams::random_uniform(dims(), 0.7, 9).unwrap();
    let cfg = model_config(ObjectiveConfig::default());
    let fp = forward(&ds, &events, &windows, &params, &cfg, false).unwrap();

    // Independent evaluation of σ(W_c · LSTM₁([P, 0, 0]) + b_c).
    let p = fuse_window(&ds, &params, &windows[0].windows[0], &cfg.attention).unwrap()[0].fused.clone();
    let d = p.len();
    let mut x = p.clone();
    x.extend(std::iter::repeat_n(0.0, d + 1));
    let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
    let gate = |g: &str| -> Vec<f64> {
        let w = params.get(&format!("lstm.W_{g}"));
        let b = params.get(&format!("lstm.b_{g}"));
        (0..d).map(|r| (0..x.len()).map(|c| w[[r, c]] * x[c]).sum::<f64>() + b[[0, r]]).collect()
    };
    let (i, o, c) = (gate("i"), gate("o"), gate("c"));
    let h: Vec<f64> = (0..d).map(|k| sig(o[k]) * (sig(i[k]) * c[k].tanh()).tanh()).collect();
    let wc = params.get("clf.W_c");
    let logit = (0..d).map(|k| wc[[0, k]] * h[k]).sum::<f64>() + params.get("clf.b_c")[[0, 0]];
    let got = fp.probabilities()[0].unwrap();
    assert!((got - sig(logit)).abs() < 1e-12, "{got} vs {}", sig(logit));
}

#[test]
fn regularization_only_gradient_is_two_lambda_theta() {
    let (ds, events, windows) = fixture();
    // No training posts: the cross-entropy is empty.
    let splits = vec![Split::Val; ds.len()];
    let ds = ds.with_splits(splits).unwrap();
    let params = ModelParams::random_uniform(dims(), 1.0, 2).unwrap();
    let cfg = model_config(ObjectiveConfig { lambda_tc: 0.0, lambda_reg: 0.3, ..Default::default() });
    let g = backward(&forward(&ds, &events, &windows, &params, &cfg, false).unwrap()).unwrap();
    for (name, t) in params.iter() {
        assert_eq!(g.get(name), &(t * 0.6), "{name}");
    }
}

#[test]
fn single_window_events_get_no_consistency_gradient() {
    let (ds, events, _) = fixture();
    let ds = ds.with_splits(vec![Split::Val; 8]).unwrap();
    // A span covering every post leaves one window per event.
    let windows = segment_all(&events, &ds, 10 * DAY, 5 * DAY).unwrap();
    assert!(windows.iter().all(|w| w.len() == 1));
    let params = ModelParams::random_uniform(dims(), 1.0, 5).unwrap();
    let cfg = model_config(ObjectiveConfig { lambda_tc: 1.0, lambda_reg: 0.0, ..Default::default() });
    let g = backward(&forward(&ds, &events, &windows, &params, &cfg, false).unwrap()).unwrap();
    assert!(g.iter().all(|(_, t)| t.iter().all(|&x| x == 0.0)));
}

fn separable_setup() -> (Dataset, Vec<PseudoEvent>, Vec<WindowSequence>, TrainConfig) {
    let spec = SynthSpec { n_events: 4, posts_per_event: [20, 20], d_text: 8, d_img: 8, imbalance: 0.5, margin: 5.0, seed: 1, ..Default::default() };
    let (ds, _) = generate(&spec).unwrap();
    let ds = assign_splits(ds, SplitFractions::default(), 0).unwrap();
    let events = cluster_events(&ds, 8, Linkage::Average).unwrap();
    let windows = segment_all(&events, &ds, 4 * DAY, 2 * DAY).unwrap();
    let mut cfg = TrainConfig::new(ModelDims { d: 8, heads: 4, d_text: 8, d_img: 8 });
    cfg.model.attention.heads = 4;
    (ds, events, windows, cfg)
}

#[test]
fn zero_learning_rate_leaves_parameters_unchanged() {
    let (ds, events, windows, mut cfg) = separable_setup();
    cfg.learning_rate = 0.0;
    cfg.epochs = 3;
    cfg.early_stop_patience = 0;
    let init = ModelParams::init(cfg.dims, 0).unwrap();
    let out = train(&ds, &events, &windows, init.clone(), &cfg).unwrap();
    assert_eq!(out.params, init);
    assert_eq!(out.history.epochs.len(), 3);
}

#[test]
fn training_is_bitwise_reproducible() {
    let (ds, events, windows, mut cfg) = separable_setup();
    cfg.epochs = 4;
    let run = || train(&ds, &events, &windows, ModelParams::init(cfg.dims, 0).unwrap(), &cfg).unwrap();
    let (a, b) = (run(), run());
    assert_eq!(a.params, b.params);
    assert_eq!(a.history, b.history);
}

#[test]
fn full_batch_loss_decreases_over_first_five_epochs() {
    let (ds, events, windows, mut cfg) = separable_setup();
    cfg.batch_events = 0;
    cfg.epochs = 5;
    cfg.early_stop_patience = 0;
    let out = train(&ds, &events, &windows, ModelParams::init(cfg.dims, 0).unwrap(), &cfg).unwrap();
    let totals: Vec<f64> = out.history.epochs.iter().map(|r| r.total).collect();
    assert!(totals.windows(2).all(|w| w[1] < w[0]), "{totals:?}");
}

#[test]
fn early_stopping_returns_the_best_validation_epoch() {
    let (ds, events, windows, mut cfg) = separable_setup();
    cfg.epochs = 12;
    cfg.early_stop_patience = 2;
    cfg.learning_rate = 0.02;
    let out = train(&ds, &events, &windows, ModelParams::init(cfg.dims, 0).unwrap(), &cfg).unwrap();
    let best = out.history.epochs.iter().filter_map(|r| r.val_f1).fold(f64::NEG_INFINITY, f64::max);
    let fp = forward(&ds, &events, &windows, &out.params, &cfg.model, false).unwrap();
    let f1 = ecatch::trainer::evaluate_split(&ds, fp.probabilities(), Some(Split::Val), 0.5).unwrap().f1;
    assert_eq!(f1, best);
    let best_epoch = out.history.best_epoch.unwrap();
    assert_eq!(out.history.epochs[best_epoch - 1].val_f1, Some(best));
}

#[test]
fn divergence_returns_last_good_parameters() {
    let (ds, events, windows, mut cfg) = separable_setup();
    cfg.optimizer = ecatch::trainer::OptimizerKind::Sgd;
    cfg.learning_rate = 1e300;
    cfg.grad_clip_norm = None;
    let init = ModelParams::init(cfg.dims, 0).unwrap();
    match train(&ds, &events, &windows, init, &cfg) {
        Err(ecatch::Error::Diverged { last_good, .. }) => assert!(last_good.is_finite()),
        other => panic!("expected divergence, got {:?}", other.map(|o| o.history.epochs.len())),
    }
}

#[test]
fn errors_carry_event_context() {
    let (ds, events, mut windows) = fixture();
    // A window member outside its event triggers a per-event failure.
    windows[1].windows[0].members.push(ds.len() + 3);
    let params = ModelParams::zeros(dims()).unwrap();
    let err = forward(&ds, &events, &windows, &params, &model_config(ObjectiveConfig::default()), false)
        .err()
        .expect("out-of-range member must fail");
    assert!(err.to_string().contains("event 1"), "{err}");
}
