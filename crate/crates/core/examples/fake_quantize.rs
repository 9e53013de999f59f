//! Quantization error of a Gaussian weight matrix across bitwidths and
//! quantizer kinds, next to the uniform-noise estimate Δ²/12.

use quantbench::quantize::{bits_saved_asymmetric, calibrate, finalize_range, quantization_mse, ObserverKind, QuantizerSpec};
use quantbench::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

fn main() -> quantbench::Result<()> {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let (rows, cols) = (16, 256);
    // channel scales spread over a decade, as in trained conv layers
    let mut data = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let n = Normal::new(0.05 * r as f64, 0.1 + 0.06 * r as f64).unwrap();
        data.extend((0..cols).map(|_| n.sample(&mut rng)));
    }
    let w = Tensor::new(vec![rows, cols], data)?;

    println!("bits  asym/tensor   sym/tensor    asym/channel  Δ²/12 (asym/tensor)");
    for bits in 2..=8 {
        let mut row = format!("{bits:>4}");
        for spec in [
            QuantizerSpec::asymmetric(bits),
            QuantizerSpec::symmetric(bits),
            QuantizerSpec::asymmetric(bits).per_channel(0),
        ] {
            let (lo, hi) = calibrate(ObserverKind::MinMax, spec.axis(), std::slice::from_ref(&w))?;
            let st = finalize_range(&lo, &hi, &spec)?;
            row += &format!("  {:.6e}", quantization_mse(&w, &spec, &st)?);
        }
        let spec = QuantizerSpec::asymmetric(bits);
        let st = finalize_range(&Tensor::scalar(w.min()), &Tensor::scalar(w.max()), &spec)?;
        row += &format!("  {:.6e}", st.delta.item().powi(2) / 12.0);
        println!("{row}");
    }
    println!(
        "asymmetric grid saves {:.3} bits on [{:.3}, {:.3}]",
        bits_saved_asymmetric(w.min(), w.max())?,
        w.min(),
        w.max()
    );
    Ok(())
}
