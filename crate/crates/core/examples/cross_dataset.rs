//! Train on one synthetic domain and evaluate on a shifted one.
//!
//! Run with: cargo run --release --example cross_dataset

use ecatch::cli::{cmd_crosseval, load_config};
use ecatch::synth::{generate_to, SynthSpec};

fn main() -> ecatch::Result<()> {
    let root = std::env::temp_dir().join("ecatch-crosseval");
    let _ = std::fs::remove_dir_all(&root);
    let source = SynthSpec { n_events: 10, d_text: 16, d_img: 16, imbalance: 0.3, margin: 3.0, seed: 1, ..Default::default() };
    let target = SynthSpec { drift: 0.5, modality_conflict: 0.2, seed: 2, ..source.clone() };
    generate_to(&source, root.join("a"))?;
    generate_to(&target, root.join("b"))?;

    let cfg = load_config(None, &["model.d=16".into(), "train.epochs=10".into()])?;
    let report = cmd_crosseval(&root.join("a"), &root.join("b"), &cfg, None, &root.join("run"), true)?;
    println!("source validation: F1 {:.3} AUC {:?}", report.source_val.f1, report.source_val.auc);
    println!("transfer to B:     F1 {:.3} AUC {:?}", report.transfer.f1, report.transfer.auc);
    Ok(())
}
