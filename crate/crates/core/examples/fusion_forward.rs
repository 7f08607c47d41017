//! Run the cross-modal fusion block on one window and inspect the gate.
//!
//! Run with: cargo run --example fusion_forward

use ecatch::clustering::PseudoEvent;
use ecatch::fusion::{fuse_window, AttentionConfig};
use ecatch::params::{ModelDims, ModelParams};
use ecatch::synth::{generate, SynthSpec};
use ecatch::windowing::{segment_event, DAY};

fn main() -> ecatch::Result<()> {
    let spec = SynthSpec { n_events: 1, posts_per_event: [12, 12], d_text: 8, d_img: 6, missing_image: 0.3, seed: 2, ..Default::default() };
    let (ds, _) = generate(&spec)?;
    let event = PseudoEvent::new(0, (0..ds.len()).collect(), &ds);
    let seq = segment_event(&event, &ds, 4 * DAY, 2 * DAY)?;

    let dims = ModelDims { d: 8, heads: 2, d_text: 8, d_img: 6 };
    let params = ModelParams::init(dims, 0)?;
    let cfg = AttentionConfig { heads: 2, ..Default::default() };

    let window = &seq.windows[0];
    println!("window {} holds {} posts", window.index, window.members.len());
    for post in fuse_window(&ds, &params, window, &cfg)? {
        let mean_gate = post.gate.iter().sum::<f64>() / post.gate.len() as f64;
        let image = if ds.posts[post.post_index].has_image { "image" } else { "no image" };
        println!("  post {:>2} ({image:>8}): mean gate {mean_gate:.3}, |P| = {:.3}", post.post_index, norm(&post.fused));
    }
    Ok(())
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}
