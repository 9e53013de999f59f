//! Loads an IDX image/label pair (for example MNIST) and reports its shape
//! and class balance. Without arguments a tiny pair is written to a
//! temporary directory first.
//!
//! cargo run --example idx_dataset -- train-images-idx3-ubyte train-labels-idx1-ubyte

use std::path::PathBuf;

use quantbench::pipeline::load_idx;

fn write_fixture() -> std::io::Result<(PathBuf, PathBuf)> {
    let dir = std::env::temp_dir().join("quantbench-idx-example");
    std::fs::create_dir_all(&dir)?;
    let (n, rows, cols) = (6u32, 4u32, 4u32);
    let mut img = 0x0803u32.to_be_bytes().to_vec();
    for d in [n, rows, cols] {
        img.extend_from_slice(&d.to_be_bytes());
    }
    img.extend((0..n * rows * cols).map(|i| (i * 7 % 256) as u8));
    let mut lab = 0x0801u32.to_be_bytes().to_vec();
    lab.extend_from_slice(&n.to_be_bytes());
    lab.extend((0..n).map(|i| (i % 3) as u8));
    let (ip, lp) = (dir.join("images.idx"), dir.join("labels.idx"));
    std::fs::write(&ip, img)?;
    std::fs::write(&lp, lab)?;
    Ok((ip, lp))
}

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let args: Vec<String> = std::env::args().skip(1).collect();
    let (images, labels) = match args.as_slice() {
        [i, l] => (PathBuf::from(i), PathBuf::from(l)),
        _ => write_fixture()?,
    };
    let set = load_idx(&images, &labels)?;
    println!("{} examples, input shape {:?}, {} classes", set.len(), set.sample_shape(), set.classes);
    for c in 0..set.classes {
        println!("  class {c}: {}", set.labels.iter().filter(|&&l| l == c).count());
    }
    println!("pixel range [{:.3}, {:.3}]", set.inputs.min(), set.inputs.max());
    Ok(())
}
