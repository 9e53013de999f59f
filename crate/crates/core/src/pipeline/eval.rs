use sha2::{Digest, Sha256};

use crate::error::Result;
use crate::network::{encode_model, forward_batched, Mode, ModelGraph};
use crate::numcore::Tensor;

use super::data::{LabeledSet, Provenance};

const EVAL_BATCH: usize = 256;

/// Top-1 accuracy.
pub fn evaluate(model: &ModelGraph, data: &LabeledSet, mode: Mode) -> Result<f64> {
    let logits = forward_batched(model, &data.inputs, mode, EVAL_BATCH)?;
    let hits = logits
        .argmax_rows()
        .iter()
        .zip(&data.labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(hits as f64 / data.len() as f64)
}

/// SHA-256 over the serialized model.
pub fn model_hash(model: &ModelGraph) -> Result<String> {
    let (manifest, blob) = encode_model(model, "")?;
    let mut h = Sha256::new();
    h.update(serde_json::to_vec(&manifest).map_err(|e| crate::QuantError::Serde(e.to_string()))?);
    h.update(&blob);
    Ok(hex::encode(h.finalize()))
}

/// Labels `inputs` with the argmax of the floating-point model.
pub fn pseudolabel(model: &ModelGraph, inputs: &Tensor) -> Result<LabeledSet> {
    let labels = forward_batched(model, inputs, Mode::FloatingPoint, EVAL_BATCH)?.argmax_rows();
    LabeledSet::new(
        inputs.clone(),
        labels,
        model.classes,
        Provenance::Pseudolabel {
            model_hash: model_hash(model)?,
        },
    )
}
