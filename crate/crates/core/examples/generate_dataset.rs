//! Generate a synthetic dataset, write it to disk and read it back.
//!
//! Run with: cargo run --example generate_dataset -- /tmp/ecatch-synth

use ecatch::dataset::load_dataset;
use ecatch::synth::{generate_to, SynthSpec};

fn main() -> ecatch::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| std::env::temp_dir().join("ecatch-synth").display().to_string());
    let spec = SynthSpec {
        n_events: 6,
        imbalance: 0.3,
        margin: 3.0,
        missing_image: 0.1,
        seed: 7,
        ..Default::default()
    };
    let _ = std::fs::remove_dir_all(&dir);
    let truth = generate_to(&spec, &dir)?;
    let ds = load_dataset(&dir)?;

    println!("wrote {} posts to {dir}", ds.len());
    println!("positives: {} ({:.1}%)", truth.n_positive, 100.0 * truth.n_positive as f64 / ds.len() as f64);
    for e in &truth.events {
        println!("  event {:>2}: {:>3} posts, {:>2} positive", e.event, e.members.len(), e.positives);
    }
    let missing = ds.posts.iter().filter(|p| !p.has_image).count();
    println!("posts without an image: {missing}");
    println!("fingerprint {}", ds.fingerprint());
    Ok(())
}
