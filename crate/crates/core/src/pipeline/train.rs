//! Floating-point baseline training.

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::mpq::{adam_step, AdamConfig, AdamState};
use crate::network::{forward_graph, ForwardOptions, Mode, ModelGraph};
use crate::numcore::{Graph, Tensor};
use crate::rng::SeedStreams;

use super::data::{LabeledSet, HOLDOUT_FRACTION};
use super::eval::evaluate;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            lr: 0.01,
            batch_size: 32,
        }
    }
}

impl TrainConfig {
    /// Optimizer steps in one pass over `n` training examples.
    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size.max(1))
    }
}

/// A trained model with the accuracies measured at the end of training.
#[derive(Debug, Clone)]
pub struct Baseline {
    pub model: ModelGraph,
    pub train_accuracy: f64,
    pub holdout_accuracy: f64,
    pub train: LabeledSet,
    pub holdout: LabeledSet,
    pub epoch_losses: Vec<f64>,
}

/// Adam on cross-entropy over a seeded 80/20 split of `data`. The holdout
/// accuracy becomes the model's `baseline_accuracy`.
pub fn train_fp_baseline(model: &ModelGraph, data: &LabeledSet, cfg: &TrainConfig, seed: u64) -> Result<Baseline> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(QuantError::Config(format!("invalid training config {cfg:?}")));
    }
    let (train, holdout) = data.split(HOLDOUT_FRACTION, seed)?;
    let mut params: IndexMap<String, Tensor> = model.params.clone();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut state = AdamState::default();
    let mut rng = SeedStreams::new(seed).stream("batch_order");
    let mut m = model.clone();
    m.quant.clear();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            m.params.clone_from(&params);
            let mut g = Graph::new();
            let x = g.constant(train.inputs.select_rows(chunk));
            let labels: Vec<usize> = chunk.iter().map(|&i| train.labels[i]).collect();
            let out = forward_graph(&mut g, &m, x, &mut ForwardOptions::new(Mode::FloatingPoint).trainable())?;
            let loss = g.cross_entropy(out.logits, &labels)?;
            let lv = g.value(loss).item();
            if !lv.is_finite() {
                return Err(QuantError::Training(format!("non-finite loss in epoch {epoch}")));
            }
            total += lv * chunk.len() as f64;
            g.backward(loss)?;
            let grads = g
                .param_grads()
                .into_iter()
                .filter_map(|(n, t)| t.map(|t| (n, t)))
                .collect();
            adam_step(&mut params, &grads, &mut state, &adam)?;
        }
        epoch_losses.push(total / train.len() as f64);
    }
    m.params = params;
    let train_accuracy = evaluate(&m, &train, Mode::FloatingPoint)?;
    let holdout_accuracy = evaluate(&m, &holdout, Mode::FloatingPoint)?;
    m.baseline_accuracy = Some(holdout_accuracy);
    Ok(Baseline {
        model: m,
        train_accuracy,
        holdout_accuracy,
        train,
        holdout,
        epoch_losses,
    })
}
