//! Accuracy of the toy ResNet under each residual-connection strategy as
//! activation precision drops.

use quantbench::network::{build_toy_resnet, init_params, Mode, ResidualStrategy, SiteKind};
use quantbench::pipeline::{calibrate_model, evaluate, make_images, train_fp_baseline, CalibrationConfig, TrainConfig};

fn main() -> quantbench::Result<()> {
    let seed = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(0);
    let noise = std::env::args().nth(2).and_then(|s| s.parse().ok()).unwrap_or(0.6);
    let data = make_images(4, 8, 500, noise, seed)?;
    let mut model = build_toy_resnet(8, 2, 4)?;
    init_params(&mut model, seed);
    let t = std::time::Instant::now();
    let base = train_fp_baseline(&model, &data, &TrainConfig::default(), seed)?;
    println!("fp holdout {:.4} (train {:.4}) in {:.2?}", base.holdout_accuracy, base.train_accuracy, t.elapsed());
    for strategy in [ResidualStrategy::QuantizeAll, ResidualStrategy::HighPrecisionAdd, ResidualStrategy::UnquantizedSkip] {
        let mut m = base.model.clone();
        m.residual_strategy = strategy;
        let cal = calibrate_model(&m, &base.train.inputs, &CalibrationConfig::default())?;
        let mut row = format!("{strategy:?}:");
        for bits in [2, 3, 4, 8] {
            let mut q = cal.clone();
            q.set_bits_where(Some(SiteKind::Activation), bits)?;
            row += &format!(" {bits}b={:.4}", evaluate(&q, &base.holdout, Mode::Quantized)?);
        }
        println!("{row}");
    }
    Ok(())
}
