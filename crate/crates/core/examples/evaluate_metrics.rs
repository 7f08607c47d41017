//! Threshold metrics, AUC and a threshold sweep on fixed scores.
//!
//! Run with: cargo run --example evaluate_metrics

use ecatch::metrics::{auc_roc, evaluate, threshold_sweep};

fn main() -> ecatch::Result<()> {
    let p = [0.95, 0.80, 0.72, 0.60, 0.55, 0.40, 0.35, 0.20, 0.10, 0.05];
    let y = [1u8, 1, 0, 1, 0, 1, 0, 0, 0, 0];

    let r = evaluate(&p, &y, 0.5)?;
    println!("at 0.5: tp {} fp {} tn {} fn {}", r.tp, r.fp, r.tn, r.fn_);
    println!("accuracy {:.2} precision {:.2} recall {:.2} F1 {:.3}", r.accuracy, r.precision, r.recall, r.f1);
    println!("AUC {:.3}", auc_roc(&p, &y)?);

    for r in threshold_sweep(&p, &y, &[0.1, 0.3, 0.5, 0.7, 0.9])? {
        println!("  threshold {:.1}: precision {:.2} recall {:.2}", r.threshold, r.precision, r.recall);
    }
    Ok(())
}
