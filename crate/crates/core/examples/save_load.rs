//! Saves a calibrated model as manifest plus blob, reloads it and checks that
//! quantized logits are bit-identical.

use quantbench::network::{build_toy_resnet, forward, load_model, save_model, Mode};
use quantbench::pipeline::{calibrate_model, make_images, model_hash, CalibrationConfig};

fn main() -> quantbench::Result<()> {
    let dir = std::env::args().nth(1).map(std::path::PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("quantbench-save"));
    let data = make_images(4, 8, 20, 0.5, 0)?;
    let model = calibrate_model(&build_toy_resnet(8, 2, 4)?, &data.inputs, &CalibrationConfig::default())?;
    let path = dir.join("toy.json");
    save_model(&model, &path)?;
    let back = load_model(&path)?;
    let (a, b) = (forward(&model, &data.inputs, Mode::Quantized)?, forward(&back, &data.inputs, Mode::Quantized)?);
    let same = a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits());
    println!("wrote {} and {}", path.display(), path.with_extension("bin").display());
    println!("hash before {}\nhash after  {}", model_hash(&model)?, model_hash(&back)?);
    println!("quantized logits bit-identical: {same}");
    Ok(())
}
