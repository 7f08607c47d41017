//! Segment one event's posts into overlapping time windows.
//!
//! Run with: cargo run --example temporal_windows

use ecatch::clustering::PseudoEvent;
use ecatch::dataset::{Dataset, Post};
use ecatch::windowing::{segment_event, window_presets, DatasetKind};
use ndarray::Array2;

fn main() -> ecatch::Result<()> {
    let hours = [0, 5, 30, 31, 50, 98, 100, 170, 171, 172];
    let posts: Vec<Post> = hours
        .iter()
        .enumerate()
        .map(|(i, h)| Post { id: format!("p{i}"), label: 0, timestamp: h * 3600, has_image: true, extra: Default::default() })
        .collect();
    let n = posts.len();
    let ds = Dataset::new(posts, Array2::zeros((n, 2)), Array2::zeros((n, 2)))?;
    let event = PseudoEvent::new(0, (0..n).collect(), &ds);

    for kind in [DatasetKind::Fakeddit, DatasetKind::Ind, DatasetKind::Covid] {
        let (span, stride) = window_presets(kind);
        let seq = segment_event(&event, &ds, span, stride)?;
        println!("{kind:?}: span {}h, stride {}h", span / 3600, stride / 3600);
        for w in &seq.windows {
            let hrs: Vec<i64> = w.members.iter().map(|&i| ds.posts[i].timestamp / 3600).collect();
            println!("  window {} [{:>3}h, {:>3}h): {hrs:?}", w.index, w.start / 3600, w.end / 3600);
        }
    }
    Ok(())
}
