//! Decay-weighted window summaries, trend shifts and momentum, then the LSTM.
//!
//! Run with: cargo run --example trend_encoding

use ecatch::params::{ModelDims, ModelParams};
use ecatch::trend::{decay_weights, run_lstm, trend_features};

fn main() -> ecatch::Result<()> {
    let ts = [0, 3_600, 36_000, 86_000];
    let w = decay_weights(&ts, 86_000, 1e-4);
    println!("decay weights (alpha 1e-4): {:.3?}", w);

    // Three window summaries drifting along one axis, then reversing.
    let aggregates = vec![vec![0.0, 0.1, 0.0, 0.0], vec![0.5, 0.1, 0.0, 0.0], vec![1.2, 0.1, 0.0, 0.0], vec![0.9, 0.1, 0.0, 0.0]];
    let feats = trend_features(&aggregates, 0.5);
    for (k, f) in feats.iter().enumerate() {
        println!("window {}: shift {:+.2?} momentum {:.3}", k + 1, f.shift, f.momentum);
    }

    let params = ModelParams::init(ModelDims { d: 4, heads: 2, d_text: 4, d_img: 4 }, 1)?;
    let inputs: Vec<Vec<f64>> = feats.iter().map(|f| f.input.clone()).collect();
    let out = run_lstm(&inputs, &params)?;
    for (k, h) in out.hidden.iter().enumerate() {
        println!("h_{} = {:+.3?}", k + 1, h);
    }
    Ok(())
}
