//! The uniform quantizer family: configuration, calibration observers,
//! range finalization, fake quantization and error analysis.

pub mod analysis;
pub mod fakequant;
pub mod observer;
pub mod spec;
pub mod state;

pub use analysis::{bits_saved_asymmetric, mean_bits_saved, quantization_mse};
pub use fakequant::{fake_quantize, fake_quantize_bound, quantize_tensor, LearnedRange, QuantBinding};
pub use observer::{calibrate, percentile_range, nearest_rank, Observer, ObserverKind, DEFAULT_PERCENTILE};
pub use spec::{BitSpec, Granularity, QuantizerSpec, RangeMode, LEARNED_BITS_INIT};
pub use state::{finalize_range, finalize_range_with_bits, QuantizerState};
