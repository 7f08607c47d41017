//! Compare backpropagated gradients with central differences, per tensor.
//!
//! Run with: cargo run --release --example gradient_check

use ecatch::verify::{grad_check_detailed, grad_dims, GRAD_TOLERANCE};

fn main() -> ecatch::Result<()> {
    let errors = grad_check_detailed(0, grad_dims(), None)?;
    for e in &errors {
        let mark = if e.worst < GRAD_TOLERANCE { "ok" } else { "FAIL" };
        println!("{:<24} {:>9.2e}  at {:?}  ({:+.3e} vs {:+.3e}) {mark}", e.name, e.worst, e.coordinate, e.analytic, e.numeric);
    }

    // A deliberately broken gradient is reported against its tensor.
    let broken = grad_check_detailed(0, grad_dims(), Some("fusion.W_g"))?;
    let worst = broken.iter().max_by(|a, b| a.worst.total_cmp(&b.worst)).unwrap();
    println!("\nwith fusion.W_g corrupted: worst {} at {:.2e}", worst.name, worst.worst);
    Ok(())
}
