use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};

/// Initial precision of a learned bitwidth before any optimization step.
pub const LEARNED_BITS_INIT: u32 = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BitSpec {
    Fixed(u32),
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Granularity {
    PerTensor,
    PerChannel { axis: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RangeMode {
    /// Range comes from calibration and stays fixed.
    Static,
    /// Per-tensor clipping bounds are trainable parameters.
    LearnedMinMax,
}

/// Configuration axes of one uniform quantizer.
///
/// Symmetric quantizers use signed levels with zero bias, asymmetric ones use
/// unsigned levels with a zero-point.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct QuantizerSpec {
    pub bits: BitSpec,
    pub symmetric: bool,
    pub granularity: Granularity,
    pub range_mode: RangeMode,
}

impl QuantizerSpec {
    pub fn asymmetric(bits: u32) -> Self {
        QuantizerSpec {
            bits: BitSpec::Fixed(bits),
            symmetric: false,
            granularity: Granularity::PerTensor,
            range_mode: RangeMode::Static,
        }
    }

    pub fn symmetric(bits: u32) -> Self {
        QuantizerSpec {
            symmetric: true,
            ..Self::asymmetric(bits)
        }
    }

    pub fn per_channel(mut self, axis: usize) -> Self {
        self.granularity = Granularity::PerChannel { axis };
        self
    }

    pub fn with_bits(mut self, bits: BitSpec) -> Self {
        self.bits = bits;
        self
    }

    pub fn with_range_mode(mut self, mode: RangeMode) -> Self {
        self.range_mode = mode;
        self
    }

    pub fn signed(&self) -> bool {
        self.symmetric
    }

    pub fn axis(&self) -> Option<usize> {
        match self.granularity {
            Granularity::PerTensor => None,
            Granularity::PerChannel { axis } => Some(axis),
        }
    }

    /// Bitwidth used to finalize a state: the fixed value, or the learned initial value.
    pub fn initial_bits(&self) -> u32 {
        match self.bits {
            BitSpec::Fixed(b) => b,
            BitSpec::Learned => LEARNED_BITS_INIT,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let BitSpec::Fixed(b) = self.bits {
            if !(2..=32).contains(&b) {
                return Err(QuantError::Config(format!("bitwidth {b} outside 2..=32")));
            }
        }
        if self.range_mode == RangeMode::LearnedMinMax && self.granularity != Granularity::PerTensor {
            return Err(QuantError::Config(
                "learned min/max ranges are only supported per-tensor".into(),
            ));
        }
        Ok(())
    }
}

impl fmt::Display for QuantizerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.bits {
            BitSpec::Fixed(b) => write!(f, "{b}-bit")?,
            BitSpec::Learned => write!(f, "learned-bit")?,
        }
        write!(f, " {}", if self.symmetric { "symmetric" } else { "asymmetric" })?;
        match self.granularity {
            Granularity::PerTensor => write!(f, " per-tensor")?,
            Granularity::PerChannel { axis } => write!(f, " per-channel(axis {axis})")?,
        }
        if self.range_mode == RangeMode::LearnedMinMax {
            write!(f, " learned-range")?;
        }
        Ok(())
    }
}
