//! Post-training search over per-layer bitwidths with frozen weights.
//!
//! Each quantizer marked `Learned` owns a continuous bitwidth `B_cont`
//! that is projected onto the allowed set in the forward pass. The loss is
//! `NLL + λ1·max(avg_w − T_w, 0) + λ2·max(avg_a − T_a, 0)` with size-weighted
//! averages, optimized by Adam together with per-tensor activation ranges.

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use indexmap::IndexMap;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::network::{
    forward_batched, forward_graph, FirstLastPolicy, ForwardOptions, Mode, ModelGraph, SiteInfo, SiteKind, SiteState,
};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::pipeline::{LabeledSet, Provenance};
use crate::quantize::{BitSpec, LearnedRange, QuantBinding};
use crate::rng::SeedStreams;

use super::adam::{adam_step, AdamConfig, AdamState};
use super::alloc::{meets, BitwidthAllocation};
use super::bits::{avg_bits_node, hinge_penalty, project_bits, project_bits_ste, AllowedBits};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelSource {
    GroundTruth,
    /// Argmax labels of the floating-point model.
    Pseudolabels,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MPQConfig {
    pub lambda1: f64,
    pub lambda2: f64,
    pub target_w: f64,
    pub target_a: f64,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Labeled examples the search may read.
    pub samples: usize,
    pub allowed_bits: AllowedBits,
    pub include_first_last_in_avg: bool,
    pub pin_first_last: bool,
    pub label_source: LabelSource,
    pub ema_decay: f64,
    /// Train per-tensor activation clipping ranges alongside the bitwidths.
    pub learn_act_ranges: bool,
}

impl Default for MPQConfig {
    fn default() -> Self {
        MPQConfig {
            lambda1: 1.0,
            lambda2: 1.0,
            target_w: 4.0,
            target_a: 4.0,
            steps: 1500,
            batch_size: 32,
            lr: 0.01,
            samples: 1024,
            allowed_bits: AllowedBits::default(),
            include_first_last_in_avg: true,
            pin_first_last: true,
            label_source: LabelSource::GroundTruth,
            ema_decay: 0.9,
            learn_act_ranges: true,
        }
    }
}

impl MPQConfig {
    pub fn validate(&self) -> Result<()> {
        self.allowed_bits.validate()?;
        let bad = |m: String| Err(QuantError::Config(m));
        if !(self.lambda1 >= 0.0 && self.lambda2 >= 0.0) {
            return bad(format!("penalty weights must be >= 0, got {} and {}", self.lambda1, self.lambda2));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return bad(format!("ema_decay {} outside (0, 1)", self.ema_decay));
        }
        if self.batch_size == 0 || self.samples == 0 {
            return bad("batch_size and samples must be positive".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("learning rate {} must be positive", self.lr));
        }
        Ok(())
    }

    /// Weight budget, or `None` when its penalty is switched off.
    pub fn active_target_w(&self) -> Option<f64> {
        (self.lambda1 > 0.0).then_some(self.target_w)
    }

    pub fn active_target_a(&self) -> Option<f64> {
        (self.lambda2 > 0.0).then_some(self.target_a)
    }
}

/// One optimization step, written as a JSON line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistoryRecord {
    pub step: usize,
    pub loss: f64,
    pub nll: f64,
    pub penalty_w: f64,
    pub penalty_a: f64,
    pub avg_w: f64,
    pub avg_a: f64,
    pub batch_accuracy: f64,
    pub ema_accuracy: f64,
    pub meets_constraints: bool,
}

pub fn write_history(path: impl AsRef<Path>, history: &[HistoryRecord]) -> Result<()> {
    let path = path.as_ref();
    let mut out = Vec::new();
    for r in history {
        serde_json::to_writer(&mut out, r).map_err(|e| QuantError::Serde(e.to_string()))?;
        out.push(b'\n');
    }
    let mut f = fs::File::create(path).map_err(|e| QuantError::io(path, e))?;
    f.write_all(&out).map_err(|e| QuantError::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MpqOutcome {
    pub allocation: BitwidthAllocation,
    /// Learned clipping range per activation site.
    pub ranges: IndexMap<String, (f64, f64)>,
    pub history: Vec<HistoryRecord>,
    /// Step of the returned snapshot; `None` when no step met the constraints.
    pub selected_step: Option<usize>,
    pub samples_used: usize,
    pub label_provenance: Provenance,
}

impl MpqOutcome {
    /// Writes the learned bitwidths and ranges into a calibrated model.
    pub fn apply(&self, model: &mut ModelGraph) -> Result<()> {
        for (site, &(lo, hi)) in &self.ranges {
            let st = model
                .quant
                .get_mut(site)
                .ok_or_else(|| QuantError::State(format!("site `{site}` is not calibrated")))?;
            *st = SiteState::new(st.spec, Tensor::vector(vec![lo]), Tensor::vector(vec![hi]), st.bits())?;
        }
        self.allocation.apply(model)
    }
}

/// Switches every unpinned quantizer to a learned bitwidth, keeping the
/// calibrated ranges.
pub fn mark_learnable(model: &mut ModelGraph) -> Result<()> {
    for l in &mut model.layers {
        for spec in [&mut l.weight_quant, &mut l.act_quant].into_iter().flatten() {
            spec.bits = BitSpec::Learned;
        }
    }
    for s in model.sites()? {
        if let Some(st) = model.quant.get_mut(&s.name) {
            if st.spec != s.spec {
                *st = SiteState::new(s.spec, st.raw_min.clone(), st.raw_max.clone(), s.spec.initial_bits())?;
            }
        }
    }
    Ok(())
}

fn bits_param(site: &str) -> String {
    format!("bits/{site}")
}

fn range_params(site: &str) -> (String, String) {
    (format!("range/{site}/min"), format!("range/{site}/max"))
}

/// Smallest learned clipping width.
const MIN_RANGE_WIDTH: f64 = 1e-6;
const BITS_FLOOR: f64 = 2.0;
const BITS_CEIL: f64 = 32.0;

/// Scalar pieces of one loss evaluation.
#[derive(Debug, Clone, Copy)]
pub struct LossNodes {
    pub loss: NodeId,
    pub nll: NodeId,
    pub penalty_w: NodeId,
    pub penalty_a: NodeId,
    pub avg_w: NodeId,
    pub avg_a: NodeId,
    pub logits: NodeId,
}

/// The search objective over a frozen, calibrated model.
pub struct MpqProblem<'m> {
    model: &'m ModelGraph,
    cfg: MPQConfig,
    sites: Vec<SiteInfo>,
    learnable: Vec<String>,
    ranged: Vec<(String, bool)>,
}

impl<'m> MpqProblem<'m> {
    pub fn new(model: &'m ModelGraph, cfg: &MPQConfig) -> Result<Self> {
        cfg.validate()?;
        let uncal = model.uncalibrated_sites()?;
        if !uncal.is_empty() {
            return Err(QuantError::State(format!("uncalibrated quantizers: {}", uncal.join(", "))));
        }
        let pinned_model = model.first_last_policy == FirstLastPolicy::Pin8Bit;
        if cfg.pin_first_last != pinned_model {
            return Err(QuantError::Config(format!(
                "pin_first_last = {} but the model's first/last policy is {:?}",
                cfg.pin_first_last, model.first_last_policy
            )));
        }
        let sites = model.sites()?;
        let learnable: Vec<String> = sites
            .iter()
            .filter(|s| s.spec.bits == BitSpec::Learned)
            .map(|s| s.name.clone())
            .collect();
        if learnable.is_empty() {
            return Err(QuantError::Config("no quantizer has a learned bitwidth".into()));
        }
        let ranged = if cfg.learn_act_ranges {
            sites
                .iter()
                .filter(|s| s.kind == SiteKind::Activation && s.spec.axis().is_none())
                .map(|s| (s.name.clone(), s.spec.symmetric))
                .collect()
        } else {
            Vec::new()
        };
        Ok(MpqProblem {
            model,
            cfg: cfg.clone(),
            sites,
            learnable,
            ranged,
        })
    }

    pub fn learnable_sites(&self) -> &[String] {
        &self.learnable
    }

    /// `B_cont` at the allowed member nearest 8 and ranges at their calibrated values.
    pub fn initial_params(&self) -> IndexMap<String, Tensor> {
        let b0 = project_bits(crate::quantize::LEARNED_BITS_INIT as f64, &self.cfg.allowed_bits) as f64;
        let mut p = IndexMap::new();
        for s in &self.learnable {
            p.insert(bits_param(s), Tensor::scalar(b0));
        }
        for (s, symmetric) in &self.ranged {
            let st = &self.model.quant[s].state;
            let (lo, hi) = (st.x_min.data()[0], st.x_max.data()[0]);
            let (pmin, pmax) = range_params(s);
            if *symmetric {
                p.insert(pmax, Tensor::scalar(lo.abs().max(hi.abs())));
            } else {
                p.insert(pmin, Tensor::scalar(lo));
                p.insert(pmax, Tensor::scalar(hi));
            }
        }
        p
    }

    /// Keeps `B_cont` in `[2, 32]` and ranges straddling zero with a minimum width.
    pub fn clamp(&self, params: &mut IndexMap<String, Tensor>) {
        for s in &self.learnable {
            if let Some(t) = params.get_mut(&bits_param(s)) {
                t.data_mut()[0] = t.data()[0].clamp(BITS_FLOOR, BITS_CEIL);
            }
        }
        for (s, symmetric) in &self.ranged {
            let (pmin, pmax) = range_params(s);
            if *symmetric {
                let m = &mut params[&pmax].data_mut()[0];
                *m = m.abs().max(MIN_RANGE_WIDTH / 2.0);
                continue;
            }
            let lo = params[&pmin].data()[0].min(0.0);
            let mut hi = params[&pmax].data()[0].max(0.0);
            if hi - lo < MIN_RANGE_WIDTH {
                hi = lo + MIN_RANGE_WIDTH;
            }
            params[&pmin].data_mut()[0] = lo;
            params[&pmax].data_mut()[0] = hi;
        }
    }

    pub fn projected_bits(&self, params: &IndexMap<String, Tensor>) -> IndexMap<String, u32> {
        self.sites
            .iter()
            .map(|s| {
                let b = match params.get(&bits_param(&s.name)) {
                    Some(t) => project_bits(t.item(), &self.cfg.allowed_bits),
                    None => self.model.quant[&s.name].bits(),
                };
                (s.name.clone(), b)
            })
            .collect()
    }

    pub fn ranges(&self, params: &IndexMap<String, Tensor>) -> IndexMap<String, (f64, f64)> {
        self.ranged
            .iter()
            .map(|(s, symmetric)| {
                let (pmin, pmax) = range_params(s);
                let hi = params[&pmax].item();
                let lo = if *symmetric { -hi.abs() } else { params[&pmin].item() };
                (s.clone(), (lo, if *symmetric { hi.abs() } else { hi }))
            })
            .collect()
    }

    pub fn allocation(&self, params: &IndexMap<String, Tensor>) -> Result<BitwidthAllocation> {
        let bits = self.projected_bits(params);
        BitwidthAllocation::from_sites(
            self.model,
            |s| bits.get(s).copied(),
            self.cfg.active_target_w(),
            self.cfg.active_target_a(),
            self.cfg.include_first_last_in_avg,
        )
    }

    /// Builds the full objective on `g` for one batch. Every entry of
    /// `params` becomes a named graph parameter.
    pub fn loss(&self, g: &mut Graph, params: &IndexMap<String, Tensor>, x: &Tensor, labels: &[usize]) -> Result<LossNodes> {
        let mut nodes = HashMap::new();
        for (name, t) in params {
            nodes.insert(name.clone(), g.param(name, t.clone())?);
        }
        let mut bindings: HashMap<String, QuantBinding> = HashMap::new();
        let mut bit_nodes: HashMap<String, NodeId> = HashMap::new();
        for s in &self.learnable {
            let b = project_bits_ste(g, nodes[&bits_param(s)], &self.cfg.allowed_bits);
            bit_nodes.insert(s.clone(), b);
            bindings.entry(s.clone()).or_default().bits = Some(b);
        }
        for (s, symmetric) in &self.ranged {
            let (pmin, pmax) = range_params(s);
            let range = if *symmetric {
                LearnedRange::Symmetric { x_max: nodes[&pmax] }
            } else {
                LearnedRange::Asymmetric {
                    x_min: nodes[&pmin],
                    x_max: nodes[&pmax],
                }
            };
            bindings.entry(s.clone()).or_default().range = Some(range);
        }

        let xn = g.constant(x.clone());
        let out = forward_graph(g, self.model, xn, &mut ForwardOptions::new(Mode::Quantized).with_bindings(&bindings))?;
        let nll = g.cross_entropy(out.logits, labels)?;

        let avg = |kind: SiteKind, g: &mut Graph| -> Result<NodeId> {
            let mut bits = Vec::new();
            let mut sizes = Vec::new();
            for s in self.sites.iter().filter(|s| s.kind == kind) {
                if !self.cfg.include_first_last_in_avg && s.boundary.is_some() {
                    continue;
                }
                let node = match bit_nodes.get(&s.name) {
                    Some(&b) => b,
                    None => g.scalar(self.model.quant[&s.name].bits() as f64),
                };
                bits.push(node);
                sizes.push(s.elements);
            }
            if bits.is_empty() {
                return Ok(g.scalar(0.0));
            }
            avg_bits_node(g, &bits, &sizes)
        };
        let avg_w = avg(SiteKind::Weight, g)?;
        let avg_a = avg(SiteKind::Activation, g)?;
        let penalty_w = hinge_penalty(g, avg_w, self.cfg.target_w, self.cfg.lambda1)?;
        let penalty_a = hinge_penalty(g, avg_a, self.cfg.target_a, self.cfg.lambda2)?;
        let nll_s = g.reshape(nll, &[])?;
        let pw = g.add(nll_s, penalty_w)?;
        let loss = g.add(pw, penalty_a)?;
        Ok(LossNodes {
            loss,
            nll: nll_s,
            penalty_w,
            penalty_a,
            avg_w,
            avg_a,
            logits: out.logits,
        })
    }
}

fn relabel(model: &ModelGraph, data: &LabeledSet, source: LabelSource) -> Result<LabeledSet> {
    match (source, &data.provenance) {
        (LabelSource::Pseudolabels, Provenance::GroundTruth) => crate::pipeline::pseudolabel(model, &data.inputs),
        (LabelSource::GroundTruth, Provenance::Pseudolabel { .. }) => Err(QuantError::Config(
            "label_source = ground_truth but the data carries pseudolabels".into(),
        )),
        _ => Ok(data.clone()),
    }
}

fn accuracy(logits: &Tensor, labels: &[usize]) -> f64 {
    let hits = logits.argmax_rows().iter().zip(labels).filter(|(p, y)| p == y).count();
    hits as f64 / labels.len() as f64
}

/// Runs the bitwidth search. The model must be calibrated with at least one
/// learned bitwidth; its weights are never modified.
pub fn learn_bitwidths(model: &ModelGraph, data: &LabeledSet, cfg: &MPQConfig, seed: u64) -> Result<MpqOutcome> {
    let problem = MpqProblem::new(model, cfg)?;
    let streams = SeedStreams::new(seed);

    let mut rows: Vec<usize> = (0..data.len()).collect();
    rows.shuffle(&mut streams.stream("mpq_samples"));
    rows.truncate(cfg.samples);
    let data = relabel(model, &data.subset(&rows), cfg.label_source)?;
    let n = data.len();

    let mut params = problem.initial_params();
    let adam = AdamConfig::with_lr(cfg.lr);
    let mut adam_state = AdamState::default();
    let mut order_rng = streams.stream("batch_order");
    let mut order: Vec<usize> = Vec::new();

    let mut history = Vec::with_capacity(cfg.steps);
    let mut ema: Option<f64> = None;
    let mut best: Option<(f64, usize, IndexMap<String, Tensor>)> = None;

    for step in 0..cfg.steps {
        let mut batch = Vec::with_capacity(cfg.batch_size);
        while batch.len() < cfg.batch_size.min(n) {
            if order.is_empty() {
                order = (0..n).collect();
                order.shuffle(&mut order_rng);
            }
            batch.push(order.pop().expect("refilled"));
        }
        let x = data.inputs.select_rows(&batch);
        let labels: Vec<usize> = batch.iter().map(|&i| data.labels[i]).collect();

        let mut g = Graph::new();
        let ln = problem.loss(&mut g, &params, &x, &labels)?;
        let loss = g.value(ln.loss).item();
        if !loss.is_finite() {
            return Err(QuantError::Training(format!("non-finite loss at step {step}")));
        }
        let acc = accuracy(g.value(ln.logits), &labels);
        let e = match ema {
            None => acc,
            Some(prev) => cfg.ema_decay * prev + (1.0 - cfg.ema_decay) * acc,
        };
        ema = Some(e);
        let (avg_w, avg_a) = (g.value(ln.avg_w).item(), g.value(ln.avg_a).item());
        let met = meets(avg_w, cfg.active_target_w()) && meets(avg_a, cfg.active_target_a());
        history.push(HistoryRecord {
            step,
            loss,
            nll: g.value(ln.nll).item(),
            penalty_w: g.value(ln.penalty_w).item(),
            penalty_a: g.value(ln.penalty_a).item(),
            avg_w,
            avg_a,
            batch_accuracy: acc,
            ema_accuracy: e,
            meets_constraints: met,
        });
        if met && best.as_ref().is_none_or(|(b, _, _)| e > *b) {
            best = Some((e, step, params.clone()));
        }

        g.backward(ln.loss)?;
        let grads: IndexMap<String, Tensor> = g
            .param_grads()
            .into_iter()
            .filter_map(|(name, grad)| grad.map(|t| (name, t)))
            .collect();
        adam_step(&mut params, &grads, &mut adam_state, &adam)?;
        problem.clamp(&mut params);
    }

    let (selected_step, chosen) = match best {
        Some((_, step, p)) => (Some(step), p),
        None => (None, params),
    };
    let mut allocation = problem.allocation(&chosen)?;
    if selected_step.is_none() {
        allocation.meets_constraints = false;
    }
    Ok(MpqOutcome {
        allocation,
        ranges: problem.ranges(&chosen),
        history,
        selected_step,
        samples_used: n,
        label_provenance: data.provenance.clone(),
    })
}

/// Quantized accuracy of `model` after applying `outcome`.
pub fn evaluate_outcome(model: &ModelGraph, outcome: &MpqOutcome, data: &LabeledSet) -> Result<f64> {
    let mut m = model.clone();
    outcome.apply(&mut m)?;
    let logits = forward_batched(&m, &data.inputs, Mode::Quantized, 256)?;
    Ok(accuracy(&logits, &data.labels))
}
