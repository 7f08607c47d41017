//! Save parameters in the binary checkpoint format and load them back.
//!
//! Run with: cargo run --example checkpoint_roundtrip

use ecatch::params::{checkpoint_bytes, load_checkpoint, load_checkpoint_for, save_checkpoint, ModelDims, ModelParams};

fn main() -> ecatch::Result<()> {
    let dims = ModelDims { d: 8, heads: 2, d_text: 12, d_img: 10 };
    let params = ModelParams::init(dims, 42)?;
    let path = std::env::temp_dir().join("ecatch-example.bin");
    save_checkpoint(&params, &path)?;
    println!("{} tensors, {} scalars, {} bytes", params.len(), params.num_scalars(), checkpoint_bytes(&params).len());

    let back = load_checkpoint(&path)?;
    println!("bitwise equal after reload: {}", back == params);

    let wrong = ModelDims { d: 16, ..dims };
    match load_checkpoint_for(&path, &wrong) {
        Ok(_) => println!("unexpectedly accepted"),
        Err(e) => println!("loading with d = 16 fails: {e}"),
    }
    Ok(())
}
