//! Calibration passes that finalize every quantizer of a model.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::network::{forward_graph, ForwardOptions, Mode, ModelGraph, SiteKind};
use crate::numcore::{Graph, Tensor};
use crate::quantize::{calibrate, Observer, ObserverKind};
use crate::rng::SeedStreams;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CalibrationConfig {
    pub act_observer: ObserverKind,
    pub weight_observer: ObserverKind,
    /// Maximum number of unlabeled examples read.
    pub budget: usize,
    pub batch_size: usize,
}

impl Default for CalibrationConfig {
    fn default() -> Self {
        CalibrationConfig {
            act_observer: ObserverKind::MinMax,
            weight_observer: ObserverKind::MinMax,
            budget: 1024,
            batch_size: 64,
        }
    }
}

/// Unlabeled calibration examples commonly paired with each observer.
pub fn default_budget(kind: ObserverKind) -> usize {
    match kind {
        ObserverKind::MinMax => 1024,
        ObserverKind::Percentile(_) => 320,
    }
}

/// At most `budget` rows of `inputs`, chosen by the `calibration` stream.
pub fn calibration_sample(inputs: &Tensor, budget: usize, seed: u64) -> Tensor {
    let mut rows: Vec<usize> = (0..inputs.shape()[0]).collect();
    rows.shuffle(&mut SeedStreams::new(seed).stream("calibration"));
    rows.truncate(budget);
    inputs.select_rows(&rows)
}

/// Observes every activation site over floating-point forwards of `inputs`
/// (at most `cfg.budget` rows, split into batches) and finalizes all
/// quantizer states. Weights are calibrated directly from the parameters.
pub fn calibrate_model(model: &ModelGraph, inputs: &Tensor, cfg: &CalibrationConfig) -> Result<ModelGraph> {
    let n = inputs.shape().first().copied().unwrap_or(0).min(cfg.budget);
    if n == 0 || cfg.batch_size == 0 {
        return Err(QuantError::Calibration("calibration needs at least one example".into()));
    }
    let sites = model.sites()?;
    let mut observers: HashMap<String, Observer> = HashMap::new();
    for s in sites.iter().filter(|s| s.kind == SiteKind::Activation) {
        observers.insert(s.name.clone(), Observer::new(cfg.act_observer, s.spec.axis())?);
    }
    let mut start = 0;
    while start < n {
        let end = (start + cfg.batch_size).min(n);
        let rows: Vec<usize> = (start..end).collect();
        let mut first_err: Option<QuantError> = None;
        let mut tap = |name: &str, t: &Tensor| {
            if let Some(o) = observers.get_mut(name) {
                if let Err(e) = o.observe(t) {
                    first_err.get_or_insert(e);
                }
            }
        };
        let mut g = Graph::new();
        let x = g.constant(inputs.select_rows(&rows));
        forward_graph(&mut g, model, x, &mut ForwardOptions::new(Mode::FloatingPoint).with_tap(&mut tap))?;
        if let Some(e) = first_err {
            return Err(e);
        }
        start = end;
    }

    let mut out = model.clone();
    let mut missing = Vec::new();
    for s in &sites {
        let range = match s.kind {
            SiteKind::Weight => {
                let p = s.param.as_deref().unwrap_or(&s.name);
                Some(calibrate(cfg.weight_observer, s.spec.axis(), &[model.param(p)?.clone()])?)
            }
            SiteKind::Activation => match observers.get(&s.name) {
                Some(o) if o.batches() > 0 => Some(o.range()?),
                _ => None,
            },
        };
        match range {
            Some((lo, hi)) => out.set_site_range(s, lo, hi)?,
            None => missing.push(s.name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(QuantError::State(format!("uncalibrated quantizers: {}", missing.join(", "))));
    }
    Ok(out)
}
