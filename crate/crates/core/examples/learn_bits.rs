//! Learned mixed precision on a 4-layer MLP over Gaussian blobs.

use quantbench::mpq::{constraint_report, evaluate_outcome, learn_bitwidths, mark_learnable, MPQConfig};
use quantbench::network::{build_mlp, init_params, Mode};
use quantbench::pipeline::{calibrate_model, evaluate, make_blobs, train_fp_baseline, CalibrationConfig, TrainConfig};

fn main() -> quantbench::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let data = make_blobs(4, 8, 300, seed)?;
    let mut model = build_mlp(8, &[16, 128, 16], 4)?;
    init_params(&mut model, seed);
    let base = train_fp_baseline(&model, &data, &TrainConfig::default(), seed)?;
    println!("fp holdout accuracy {:.4}", base.holdout_accuracy);

    let mut calibrated = calibrate_model(&base.model, &base.train.inputs, &CalibrationConfig::default())?;
    println!("8-bit accuracy {:.4}", evaluate(&calibrated, &base.holdout, Mode::Quantized)?);
    mark_learnable(&mut calibrated)?;

    let cfg = MPQConfig::default();
    let t = std::time::Instant::now();
    let out = learn_bitwidths(&calibrated, &base.train, &cfg, seed)?;
    println!("search took {:.2?}, snapshot at {:?}", t.elapsed(), out.selected_step);
    for l in out.allocation.weights.iter().chain(&out.allocation.acts) {
        println!("  {:<16} {:>2} bits  ({} elements)", l.site, l.bits, l.elements);
    }
    let r = constraint_report(&out.allocation)?;
    println!(
        "avg weight bits {:.3} (excl. first/last {:.3}), avg act bits {:.3}, meets {}",
        r.avg_w_including, r.avg_w_excluding, r.avg_a_including, out.allocation.meets_constraints
    );
    println!("quantized accuracy {:.4}", evaluate_outcome(&calibrated, &out, &base.holdout)?);
    Ok(())
}
