//! Min/max against percentile calibration on heavy-tailed activations.

use quantbench::quantize::{finalize_range_with_bits, quantization_mse, Observer, ObserverKind, QuantizerSpec};
use quantbench::Tensor;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StudentT};

fn main() -> quantbench::Result<()> {
    let dof: f64 = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(2.0);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let t = StudentT::new(dof).unwrap();
    let batches: Vec<Tensor> = (0..10)
        .map(|_| Tensor::vector((0..1000).map(|_| t.sample(&mut rng).max(0.0)).collect()))
        .collect();
    let all = Tensor::vector(batches.iter().flat_map(|b| b.data().to_vec()).collect());

    for kind in [ObserverKind::MinMax, ObserverKind::Percentile(99.9), ObserverKind::Percentile(99.0)] {
        let mut obs = Observer::new(kind, None)?;
        for b in &batches {
            obs.observe(b)?;
        }
        let (lo, hi) = obs.range()?;
        let mut row = format!("{:<18} range [{:.3}, {:.3}]  mse", format!("{kind:?}"), lo.item(), hi.item());
        for bits in [2, 4, 8] {
            let spec = QuantizerSpec::asymmetric(bits);
            let st = finalize_range_with_bits(&lo, &hi, &spec, bits)?;
            row += &format!("  {bits}b {:.2e}", quantization_mse(&all, &spec, &st)?);
        }
        println!("{row}");
    }
    Ok(())
}
