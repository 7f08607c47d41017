//! The pieces of the training objective on hand-made numbers.
//!
//! Run with: cargo run --example loss_terms

use ecatch::objective::{ce_loss, class_weights, mining_mask, total_loss, CeTerm, ClassCounts};
use ecatch::tape::temporal_consistency;
use ndarray::array;

fn main() -> ecatch::Result<()> {
    let (w0, w1) = class_weights(ClassCounts { n0: 18, n1: 2 }, 1e-6);
    println!("class weights for 18 negatives / 2 positives: w0 = {w0:.3}, w1 = {w1:.3}");

    let probs = [0.1, 0.4, 0.7, 0.2, 0.9];
    let labels = [0u8, 0, 0, 1, 1];
    let terms: Vec<CeTerm> = probs
        .iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (&prob, label))| CeTerm { post: i, label, weight: if label == 1 { w1 } else { w0 }, prob })
        .collect();
    let values: Vec<f64> = terms.iter().map(CeTerm::value).collect();
    println!("per-post terms: {values:.3?}");
    let mask = mining_mask(&values, &(0..5).collect::<Vec<_>>(), 0.4);
    println!("hardest 40%: {mask:?}");
    let ce = ce_loss(&terms, None)?;
    let mined = ce_loss(&terms, Some(0.4))?;
    println!("weighted CE {ce:.3}, mined {mined:.3}");

    let states = array![[1.0, 0.0], [1.5, 0.2], [-0.5, 0.1]];
    let tc = temporal_consistency(&states, false);
    let tc_clamped = temporal_consistency(&states, true);
    println!("temporal consistency {tc:.3} (clamped {tc_clamped:.3})");
    println!("total with lambda_tc 0.1, lambda_reg 1e-4, |theta|^2 = 50: {:.4}", total_loss(mined, tc, 50.0, 0.1, 1e-4));
    Ok(())
}
