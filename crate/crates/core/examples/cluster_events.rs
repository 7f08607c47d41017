//! Group posts into pseudo-events and compare against the generating events.
//!
//! Run with: cargo run --example cluster_events

use ecatch::clustering::{cluster_events, Linkage};
use ecatch::synth::{generate, SynthSpec};

fn main() -> ecatch::Result<()> {
    let spec = SynthSpec { n_events: 5, posts_per_event: [20, 30], centroid_scale: 2.0, seed: 3, ..Default::default() };
    let (ds, truth) = generate(&spec)?;

    for linkage in [Linkage::Single, Linkage::Complete, Linkage::Average] {
        let events = cluster_events(&ds, spec.n_events, linkage)?;
        // Purity: share of posts whose cluster's majority source event matches their own.
        let mut agree = 0;
        for ev in &events {
            let mut counts = vec![0usize; spec.n_events];
            for &i in &ev.member_indices {
                counts[truth.event_of[i]] += 1;
            }
            agree += counts.iter().max().unwrap();
        }
        let sizes: Vec<usize> = events.iter().map(|e| e.len()).collect();
        println!("{linkage:?}: sizes {sizes:?}, purity {:.3}", agree as f64 / ds.len() as f64);
    }
    Ok(())
}
