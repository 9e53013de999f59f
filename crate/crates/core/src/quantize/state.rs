use crate::error::{QuantError, Result};
use crate::numcore::Tensor;

use super::spec::QuantizerSpec;

/// Finalized quantizer parameters. Scalars for per-tensor quantizers,
/// vectors (one entry per channel) for per-channel ones.
#[derive(Debug, Clone, PartialEq)]
pub struct QuantizerState {
    pub x_min: Tensor,
    pub x_max: Tensor,
    pub delta: Tensor,
    pub zero_point: Tensor,
    pub bits: u32,
    pub symmetric: bool,
    pub axis: Option<usize>,
}

/// Number of quantization steps, `2^bits - 1`.
pub fn levels(bits: f64) -> f64 {
    bits.exp2() - 1.0
}

/// Integer level bounds `(qmin, qmax)`.
pub fn level_bounds(bits: f64, symmetric: bool) -> (f64, f64) {
    let n = levels(bits);
    if symmetric {
        let q = (n - 1.0) / 2.0;
        (-q, q)
    } else {
        (0.0, n)
    }
}

impl QuantizerState {
    pub fn channels(&self) -> usize {
        self.delta.numel()
    }

    pub fn qbounds(&self) -> (f64, f64) {
        level_bounds(self.bits as f64, self.symmetric)
    }

    /// Channel index of flat element `i` of a tensor with `shape`.
    pub fn channel_for(&self, shape: &[usize], i: usize) -> usize {
        match self.axis {
            None => 0,
            Some(axis) => Tensor::channel_of(shape, axis, i),
        }
    }

    /// Errors when the per-channel extent does not match `shape`.
    pub fn check_applicable(&self, shape: &[usize]) -> Result<()> {
        if let Some(axis) = self.axis {
            if axis >= shape.len() || shape[axis] != self.channels() {
                return Err(QuantError::Dimension {
                    op: "fake_quantize",
                    lhs: shape.to_vec(),
                    rhs: vec![self.channels()],
                });
            }
        }
        Ok(())
    }
}

/// Scalar range finalization; returns `(x_min, x_max, delta, zero_point)`.
pub fn finalize_scalar(lo: f64, hi: f64, bits: u32, symmetric: bool) -> Result<(f64, f64, f64, f64)> {
    if !(lo.is_finite() && hi.is_finite()) {
        return Err(QuantError::InvalidRange(format!("non-finite range [{lo}, {hi}]")));
    }
    if lo > hi {
        return Err(QuantError::InvalidRange(format!("x_min {lo} > x_max {hi}")));
    }
    let (mut lo, mut hi) = (lo, hi);
    if lo == hi {
        let eps = lo.abs().max(1.0) * 1e-8;
        lo -= eps;
        hi += eps;
    }
    // zero must be representable
    lo = lo.min(0.0);
    hi = hi.max(0.0);
    let n = levels(bits as f64);

    if symmetric {
        let m = lo.abs().max(hi.abs());
        return Ok((-m, m, 2.0 * m / n, 0.0));
    }

    if lo == 0.0 {
        return Ok((0.0, hi, hi / n, 0.0));
    }
    if hi == 0.0 {
        return Ok((lo, 0.0, -lo / n, n));
    }
    // Smallest step whose grid, anchored at an integer zero-point, covers [lo, hi].
    let step_for = |z: f64| (-lo / z).max(hi / (n - z));
    let ideal = n * (-lo) / (hi - lo);
    let mut best: Option<(f64, f64)> = None;
    for z in [ideal.floor(), ideal.ceil()] {
        let z = z.clamp(1.0, n - 1.0);
        let d = step_for(z);
        if best.is_none_or(|(_, bd)| d < bd) {
            best = Some((z, d));
        }
    }
    let (z, delta) = best.expect("two candidates");
    Ok((-z * delta, (n - z) * delta, delta, z))
}

/// Turns a raw calibrated range into a usable quantizer state: forces symmetry
/// or nudges an asymmetric range outward so that real zero sits exactly on
/// the integer grid, and guards degenerate (zero-width) ranges.
pub fn finalize_range(x_min_raw: &Tensor, x_max_raw: &Tensor, spec: &QuantizerSpec) -> Result<QuantizerState> {
    finalize_range_with_bits(x_min_raw, x_max_raw, spec, spec.initial_bits())
}

pub fn finalize_range_with_bits(
    x_min_raw: &Tensor,
    x_max_raw: &Tensor,
    spec: &QuantizerSpec,
    bits: u32,
) -> Result<QuantizerState> {
    spec.validate()?;
    if !(2..=32).contains(&bits) {
        return Err(QuantError::Config(format!("bitwidth {bits} outside 2..=32")));
    }
    x_min_raw.expect_same_shape(x_max_raw, "finalize_range")?;
    let axis = spec.axis();
    if axis.is_none() && x_min_raw.numel() != 1 {
        return Err(QuantError::Dimension {
            op: "finalize_range",
            lhs: x_min_raw.shape().to_vec(),
            rhs: vec![],
        });
    }
    let mut cols: [Vec<f64>; 4] = Default::default();
    for (&lo, &hi) in x_min_raw.data().iter().zip(x_max_raw.data()) {
        let (a, b, d, z) = finalize_scalar(lo, hi, bits, spec.symmetric)?;
        for (c, v) in cols.iter_mut().zip([a, b, d, z]) {
            c.push(v);
        }
    }
    let shape = x_min_raw.shape().to_vec();
    let [a, b, d, z] = cols;
    Ok(QuantizerState {
        x_min: Tensor::new(shape.clone(), a)?,
        x_max: Tensor::new(shape.clone(), b)?,
        delta: Tensor::new(shape.clone(), d)?,
        zero_point: Tensor::new(shape, z)?,
        bits,
        symmetric: spec.symmetric,
        axis,
    })
}
