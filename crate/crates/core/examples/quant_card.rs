//! Renders the quantization card of a 4-bit MLP in both formats.

use quantbench::network::{build_mlp, Mode};
use quantbench::pipeline::{calibrate_model, evaluate, make_blobs, train_fp_baseline, CalibrationConfig, TrainConfig};
use quantbench::quantcard::{build_card, render_card, CardFormat, CardInputs, CardResults, DataKind};
use quantbench::quantize::ObserverKind;

fn main() -> quantbench::Result<()> {
    let data = make_blobs(4, 8, 200, 0)?;
    let base = train_fp_baseline(&build_mlp(8, &[32, 32], 4)?, &data, &TrainConfig::default(), 0)?;
    let cal = CalibrationConfig {
        budget: 256,
        ..CalibrationConfig::default()
    };
    let mut q = calibrate_model(&base.model, &base.train.inputs, &cal)?;
    q.set_bits_where(None, 4)?;
    let inputs = CardInputs {
        act_observer: Some(ObserverKind::MinMax),
        examples: Some(cal.budget.min(base.train.len())),
        data_kind: Some(DataKind::Unlabeled),
        epoch_fraction: Some(0.0),
        ..CardInputs::default()
    };
    let results = CardResults {
        quantized_accuracy: Some(evaluate(&q, &base.holdout, Mode::Quantized)?),
        seeds: Some(1),
        ..CardResults::default()
    };
    let card = build_card(&q, &inputs, &results)?;
    println!("{}", render_card(&card, CardFormat::Markdown)?);
    println!("{}", render_card(&card, CardFormat::StructuredText)?);
    Ok(())
}
