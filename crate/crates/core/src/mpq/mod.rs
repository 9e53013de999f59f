//! Learned mixed-precision allocation.

mod adam;
mod alloc;
mod bits;
mod learner;

pub use adam::{adam_step, AdamConfig, AdamState};
pub use alloc::{
    constraint_report, featuremap_layers, layer_average, max_featuremap_allocation, uniform_max_featuremap_bytes,
    BitwidthAllocation, ConstraintReport, LayerBits,
};
pub use bits::{avg_bits, avg_bits_node, hinge, hinge_penalty, project_bits, project_bits_ste, AllowedBits};
pub use learner::{
    evaluate_outcome, learn_bitwidths, mark_learnable, write_history, HistoryRecord, LabelSource, LossNodes,
    MPQConfig, MpqOutcome, MpqProblem,
};
