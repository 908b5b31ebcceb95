//! Writing, reading and rejecting `.glat` tensor files.
//!
//!     cargo run --example tensor_container

use glaclip::tensor::{read_tensor, write_tensor};
use glaclip::{Error, TensorF32};

fn main() -> glaclip::Result<()> {
    let dir = std::env::temp_dir().join("glaclip-tensor-example");
    std::fs::create_dir_all(&dir).map_err(|e| Error::Io {
        path: dir.clone(),
        source: e,
    })?;
    let path = dir.join("eye.glat");

    let t = TensorF32::new(vec![2, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0])?;
    write_tensor(&t, &path)?;
    let back = read_tensor(&path)?;
    println!(
        "wrote {:?} ({} bytes), read back shape {:?}",
        path,
        t.to_bytes().len(),
        back.shape()
    );
    assert_eq!(back, t);

    let mut bytes = t.to_bytes();
    bytes[4] = 7; // version
    match TensorF32::from_bytes(&bytes) {
        Err(e) => println!("patched version -> {e}"),
        Ok(_) => unreachable!(),
    }
    match TensorF32::from_bytes(&t.to_bytes()[..30]) {
        Err(e) => println!("cut short      -> {e}"),
        Ok(_) => unreachable!(),
    }
    Ok(())
}
