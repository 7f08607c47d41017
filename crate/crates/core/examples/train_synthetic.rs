//! End-to-end training on a separable synthetic dataset.
//!
//! Run with: cargo run --release --example train_synthetic

use ecatch::clustering::{cluster_events, Linkage};
use ecatch::dataset::{assign_splits, Split, SplitFractions};
use ecatch::model::forward;
use ecatch::params::{ModelDims, ModelParams};
use ecatch::synth::{generate, SynthSpec};
use ecatch::trainer::{evaluate_split, train_with, TrainConfig};
use ecatch::windowing::segment_all;

fn main() -> ecatch::Result<()> {
    let spec = SynthSpec { n_events: 10, d_text: 16, d_img: 16, imbalance: 0.3, margin: 3.0, seed: 11, ..Default::default() };
    let (ds, _) = generate(&spec)?;
    let ds = assign_splits(ds, SplitFractions::default(), 0)?;
    let events = cluster_events(&ds, ds.len().div_ceil(10), Linkage::Average)?;
    let windows = segment_all(&events, &ds, spec.window_span_secs, spec.window_span_secs / 2)?;
    println!("{} posts, {} pseudo-events", ds.len(), events.len());

    let mut cfg = TrainConfig::new(ModelDims { d: 16, heads: 4, d_text: 16, d_img: 16 });
    cfg.model.attention.heads = 4;
    cfg.epochs = 15;
    let init = ModelParams::init(cfg.dims, 0)?;
    let out = train_with(&ds, &events, &windows, init, &cfg, |r| {
        println!("epoch {:>2}: loss {:>8.3}  val F1 {:.3}", r.epoch, r.total, r.val_f1.unwrap_or(f64::NAN));
    })?;

    let fp = forward(&ds, &events, &windows, &out.params, &cfg.model, false)?;
    let test = evaluate_split(&ds, fp.probabilities(), Some(Split::Test), 0.5)?;
    println!("best epoch {:?}", out.history.best_epoch);
    println!("test: acc {:.3} F1 {:.3} AUC {:.3}", test.accuracy, test.f1, test.auc.unwrap_or(f64::NAN));
    Ok(())
}
