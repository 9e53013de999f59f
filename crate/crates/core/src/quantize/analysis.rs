//! Quantizer-level error and bit-budget analysis.

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;

use super::fakequant::quantize_tensor;
use super::spec::QuantizerSpec;
use super::state::QuantizerState;

/// Mean squared error between `x` and its fake-quantized value.
pub fn quantization_mse(x: &Tensor, spec: &QuantizerSpec, state: &QuantizerState) -> Result<f64> {
    if spec.symmetric != state.symmetric || spec.axis() != state.axis {
        return Err(QuantError::State("state does not match spec".into()));
    }
    let q = quantize_tensor(x, state)?;
    Ok(q
        .data()
        .iter()
        .zip(x.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        / x.numel() as f64)
}

/// Fractional bits an asymmetric quantizer saves over a symmetric one on a
/// range `[w_min, w_max]`: `log2(2·max(w_max, −w_min) / (w_max − w_min))`.
pub fn bits_saved_asymmetric(w_min: f64, w_max: f64) -> Result<f64> {
    if !(w_max > w_min) {
        return Err(QuantError::InvalidRange(format!(
            "bits_saved needs w_min < w_max, got [{w_min}, {w_max}]"
        )));
    }
    Ok((2.0 * w_max.max(-w_min) / (w_max - w_min)).log2())
}

/// Size-weighted mean of per-layer savings; each entry is `(w_min, w_max, elements)`.
pub fn mean_bits_saved(layers: &[(f64, f64, usize)]) -> Result<f64> {
    let total: usize = layers.iter().map(|l| l.2).sum();
    if total == 0 {
        return Err(QuantError::InvalidRange("no weights".into()));
    }
    let mut acc = 0.0;
    for &(lo, hi, n) in layers {
        acc += bits_saved_asymmetric(lo, hi)? * n as f64;
    }
    Ok(acc / total as f64)
}
