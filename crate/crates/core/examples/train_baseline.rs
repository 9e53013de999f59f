//! Floating-point baseline on two-arm spirals with the per-epoch loss curve.

use quantbench::network::{build_mlp, init_params};
use quantbench::pipeline::{make_spirals, train_fp_baseline, TrainConfig};

fn main() -> quantbench::Result<()> {
    let epochs = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(60);
    let data = make_spirals(2, 300, 0.1, 0)?;
    let mut model = build_mlp(2, &[64, 64], 2)?;
    init_params(&mut model, 0);
    let cfg = TrainConfig {
        epochs,
        lr: 0.01,
        batch_size: 32,
    };
    let base = train_fp_baseline(&model, &data, &cfg, 0)?;
    for (e, l) in base.epoch_losses.iter().enumerate().step_by((epochs / 10).max(1)) {
        println!("epoch {e:>3}  loss {l:.4}");
    }
    println!("train {:.4}  holdout {:.4}", base.train_accuracy, base.holdout_accuracy);
    Ok(())
}
