//! Fake quantization: quantize-then-dequantize in real arithmetic,
//! `out = Δ·(clamp(round(x/Δ + z), qmin, qmax) − z)`.
//!
//! Rounding uses the straight-through estimator. When the bitwidth is a
//! graph node the step `Δ(B) = (x_max − x_min)/(2^B − 1)` is recomputed every
//! forward pass and `B` receives the gradient of the full expression. Learned
//! clipping bounds receive boundary-only gradients (one on the saturated side,
//! zero inside the range).

use std::f64::consts::LN_2;

use crate::error::{QuantError, Result};
use crate::numcore::{CustomOp, Graph, NodeId, RoundPolicy, Tensor};

use super::spec::QuantizerSpec;
use super::state::{level_bounds, levels, QuantizerState};

/// Trainable clipping bounds of a per-tensor quantizer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LearnedRange {
    Asymmetric { x_min: NodeId, x_max: NodeId },
    /// Symmetric range `[-m, m]` driven by one scalar `m`.
    Symmetric { x_max: NodeId },
}

/// Graph nodes that replace parts of a finalized state.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct QuantBinding {
    /// Scalar, integer-valued bitwidth node (already projected).
    pub bits: Option<NodeId>,
    pub range: Option<LearnedRange>,
}

/// Saturation class of an element.
const INSIDE: i8 = 0;
const LOW: i8 = -1;
const HIGH: i8 = 1;

#[derive(Debug)]
struct FakeQuantOp {
    region: Vec<i8>,
    /// d out / d B per element, present when the bitwidth is a node.
    d_bits: Option<Vec<f64>>,
    bits_input: Option<usize>,
    range_inputs: Option<(RangeSlots, bool)>,
}

#[derive(Debug, Clone, Copy)]
enum RangeSlots {
    Pair(usize, usize),
    Single(usize),
}

impl CustomOp for FakeQuantOp {
    fn name(&self) -> &'static str {
        "fake_quantize"
    }

    fn backward(&self, upstream: &Tensor, inputs: &[&Tensor], _output: &Tensor) -> Vec<Option<Tensor>> {
        let mut grads: Vec<Option<Tensor>> = vec![None; inputs.len()];
        let up = upstream.data();
        let dx = up
            .iter()
            .zip(&self.region)
            .map(|(&g, &r)| if r == INSIDE { g } else { 0.0 })
            .collect();
        grads[0] = Some(Tensor::new(inputs[0].shape().to_vec(), dx).expect("same shape"));
        if let (Some(slot), Some(db)) = (self.bits_input, &self.d_bits) {
            let g: f64 = up.iter().zip(db).map(|(a, b)| a * b).sum();
            grads[slot] = Some(Tensor::new(inputs[slot].shape().to_vec(), vec![g]).expect("scalar"));
        }
        if let Some((slots, _)) = self.range_inputs {
            let (mut lo, mut hi) = (0.0, 0.0);
            for (&g, &r) in up.iter().zip(&self.region) {
                match r {
                    LOW => lo += g,
                    HIGH => hi += g,
                    _ => {}
                }
            }
            let scalar = |slot: usize, v: f64| Some(Tensor::new(inputs[slot].shape().to_vec(), vec![v]).expect("scalar"));
            match slots {
                RangeSlots::Pair(a, b) => {
                    grads[a] = scalar(a, lo);
                    grads[b] = scalar(b, hi);
                }
                RangeSlots::Single(a) => grads[a] = scalar(a, hi - lo),
            }
        }
        grads
    }
}

/// Per-channel grid parameters for one forward evaluation.
#[derive(Debug, Clone, Copy)]
struct Grid {
    delta: f64,
    zero: f64,
    qmin: f64,
    qmax: f64,
    /// Continuous zero-point `-lo/Δ` and how `z` was clamped (-1 low, 0 free, 1 high).
    zero_cont: f64,
    zero_clamp: i8,
    d_delta_d_bits: f64,
    d_levels_d_bits: f64,
}

impl Grid {
    fn from_range(lo: f64, hi: f64, bits: f64, symmetric: bool, rounding: &mut RoundPolicy) -> Result<Grid> {
        let n = levels(bits);
        let dn = bits.exp2() * LN_2;
        let (qmin, qmax) = level_bounds(bits, symmetric);
        if symmetric {
            let m = lo.abs().max(hi.abs());
            let delta = 2.0 * m / n;
            if !(delta > 0.0 && delta.is_finite()) {
                return Err(QuantError::InvalidRange(format!("symmetric range [-{m}, {m}] has no width")));
            }
            return Ok(Grid {
                delta,
                zero: 0.0,
                qmin,
                qmax,
                zero_cont: 0.0,
                zero_clamp: 0,
                d_delta_d_bits: -delta / n * dn,
                d_levels_d_bits: dn,
            });
        }
        let delta = (hi - lo) / n;
        if !(delta > 0.0 && delta.is_finite()) {
            return Err(QuantError::InvalidRange(format!("range [{lo}, {hi}] has no width")));
        }
        let zero_cont = -lo / delta;
        let zr = rounding.round(zero_cont);
        let zero_clamp = rounding.branch(|| {
            if zr < 0.0 {
                -1
            } else if zr > n {
                1
            } else {
                0
            }
        });
        let zero = match zero_clamp {
            -1 => 0.0,
            1 => n,
            _ => zr,
        };
        Ok(Grid {
            delta,
            zero,
            qmin,
            qmax,
            zero_cont,
            zero_clamp,
            d_delta_d_bits: -delta / n * dn,
            d_levels_d_bits: dn,
        })
    }

    fn from_state(state: &QuantizerState, channel: usize) -> Grid {
        let (qmin, qmax) = state.qbounds();
        Grid {
            delta: state.delta.data()[channel],
            zero: state.zero_point.data()[channel],
            qmin,
            qmax,
            zero_cont: state.zero_point.data()[channel],
            zero_clamp: 0,
            d_delta_d_bits: 0.0,
            d_levels_d_bits: 0.0,
        }
    }

    /// Derivative of the output wrt the bitwidth for one element.
    fn d_out_d_bits(&self, symmetric: bool, u: f64, r: f64, c: f64, region: i8) -> f64 {
        if region == INSIDE {
            return (r - u) * self.d_delta_d_bits;
        }
        let dn = self.d_levels_d_bits;
        let dc = match (symmetric, region) {
            (false, HIGH) => dn,
            (false, _) => 0.0,
            (true, HIGH) => dn / 2.0,
            (true, _) => -dn / 2.0,
        };
        let dz = if symmetric {
            0.0
        } else {
            match self.zero_clamp {
                0 => -(self.zero_cont / self.delta) * self.d_delta_d_bits,
                1 => dn,
                _ => 0.0,
            }
        };
        self.d_delta_d_bits * (c - self.zero) + self.delta * (dc - dz)
    }
}

/// Quantizes a single value on a grid; shared by the graph op and tensor helpers.
#[inline]
pub fn quantize_value(x: f64, delta: f64, zero: f64, qmin: f64, qmax: f64) -> f64 {
    let r = (x / delta + zero).round();
    (r.clamp(qmin, qmax) - zero) * delta
}

/// Static fake quantization with a finalized state.
pub fn fake_quantize(g: &mut Graph, x: NodeId, state: &QuantizerState, spec: &QuantizerSpec) -> Result<NodeId> {
    fake_quantize_bound(g, x, state, spec, &QuantBinding::default())
}

/// Fake quantization where the bitwidth and/or clipping range may be graph nodes.
///
/// Without a range binding, the state's finalized range supplies `x_min`/`x_max`;
/// without a bits binding, the state's bitwidth is used.
pub fn fake_quantize_bound(
    g: &mut Graph,
    x: NodeId,
    state: &QuantizerState,
    spec: &QuantizerSpec,
    binding: &QuantBinding,
) -> Result<NodeId> {
    if state.symmetric != spec.symmetric {
        return Err(QuantError::State("state symmetry does not match spec".into()));
    }
    let shape = g.value(x).shape().to_vec();
    state.check_applicable(&shape)?;
    if binding.range.is_some() && state.axis.is_some() {
        return Err(QuantError::Config("learned ranges require a per-tensor quantizer".into()));
    }

    let bits_value = match binding.bits {
        Some(b) => {
            let v = g.value(b);
            if v.numel() != 1 {
                return Err(QuantError::Contract("bitwidth node must be scalar".into()));
            }
            Some(v.item())
        }
        None => None,
    };
    let range_value = match binding.range {
        Some(LearnedRange::Asymmetric { x_min, x_max }) => {
            Some((g.value(x_min).item(), g.value(x_max).item()))
        }
        Some(LearnedRange::Symmetric { x_max }) => {
            let m = g.value(x_max).item().abs();
            Some((-m, m))
        }
        None => None,
    };

    let channels = state.channels();
    let mut grids = Vec::with_capacity(channels);
    for c in 0..channels {
        let grid = if bits_value.is_none() && range_value.is_none() {
            Grid::from_state(state, c)
        } else {
            let bits = bits_value.unwrap_or(state.bits as f64);
            let (lo, hi) = range_value.unwrap_or((state.x_min.data()[c], state.x_max.data()[c]));
            Grid::from_range(lo, hi, bits, spec.symmetric, g.rounding())?
        };
        grids.push(grid);
    }

    let xv = g.value(x).clone();
    let numel = xv.numel();
    let mut out = Vec::with_capacity(numel);
    let mut region = Vec::with_capacity(numel);
    let mut d_bits = bits_value.map(|_| Vec::with_capacity(numel));
    for (i, &v) in xv.data().iter().enumerate() {
        let grid = &grids[state.channel_for(&shape, i)];
        let u = v / grid.delta + grid.zero;
        let rounding = g.rounding();
        let r = rounding.round(u);
        let reg = rounding.branch(|| {
            if r < grid.qmin {
                LOW
            } else if r > grid.qmax {
                HIGH
            } else {
                INSIDE
            }
        });
        let c = match reg {
            LOW => grid.qmin,
            HIGH => grid.qmax,
            _ => r,
        };
        out.push((c - grid.zero) * grid.delta);
        region.push(reg);
        if let Some(db) = d_bits.as_mut() {
            db.push(grid.d_out_d_bits(spec.symmetric, u, r, c, reg));
        }
    }

    let mut inputs = vec![x];
    let bits_input = binding.bits.map(|b| {
        inputs.push(b);
        inputs.len() - 1
    });
    let range_inputs = binding.range.map(|r| match r {
        LearnedRange::Asymmetric { x_min, x_max } => {
            inputs.push(x_min);
            inputs.push(x_max);
            (RangeSlots::Pair(inputs.len() - 2, inputs.len() - 1), false)
        }
        LearnedRange::Symmetric { x_max } => {
            inputs.push(x_max);
            (RangeSlots::Single(inputs.len() - 1), true)
        }
    });
    let op = FakeQuantOp {
        region,
        d_bits,
        bits_input,
        range_inputs,
    };
    let value = Tensor::new(shape, out)?;
    Ok(g.custom(Box::new(op), inputs, value))
}

/// Fake-quantizes a tensor outside any graph.
pub fn quantize_tensor(x: &Tensor, state: &QuantizerState) -> Result<Tensor> {
    state.check_applicable(x.shape())?;
    let (qmin, qmax) = state.qbounds();
    let data = x
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let c = state.channel_for(x.shape(), i);
            quantize_value(v, state.delta.data()[c], state.zero_point.data()[c], qmin, qmax)
        })
        .collect();
    Tensor::new(x.shape().to_vec(), data)
}
