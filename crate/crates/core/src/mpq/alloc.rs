use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::network::{Boundary, ModelGraph, SiteKind};

use super::bits::avg_bits;

/// One quantizer's bitwidth and the element count that weights it.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerBits {
    pub site: String,
    pub bits: u32,
    pub elements: usize,
    pub boundary: Option<Boundary>,
    pub pinned: bool,
}

/// Per-layer weight and activation bitwidths with the targets they were
/// trained against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BitwidthAllocation {
    pub weights: Vec<LayerBits>,
    pub acts: Vec<LayerBits>,
    /// Average-bit budgets; `None` leaves that component unconstrained.
    pub target_w: Option<f64>,
    pub target_a: Option<f64>,
    pub achieved_w: f64,
    pub achieved_a: f64,
    /// Whether the first/last layers count toward the averages.
    pub include_first_last: bool,
    pub meets_constraints: bool,
}

/// Weighted mean over `layers`, optionally skipping first/last entries.
/// An empty selection averages to 0, as in the search objective.
pub fn layer_average(layers: &[LayerBits], include_first_last: bool) -> Result<f64> {
    let (bits, sizes): (Vec<f64>, Vec<usize>) = layers
        .iter()
        .filter(|l| include_first_last || l.boundary.is_none())
        .map(|l| (l.bits as f64, l.elements))
        .unzip();
    if bits.is_empty() {
        return Ok(0.0);
    }
    avg_bits(&bits, &sizes)
}

impl BitwidthAllocation {
    /// Snapshot of the bitwidths currently configured on a calibrated model.
    pub fn from_model(
        model: &ModelGraph,
        target_w: Option<f64>,
        target_a: Option<f64>,
        include_first_last: bool,
    ) -> Result<Self> {
        Self::from_sites(model, |s| model.site_bits(s), target_w, target_a, include_first_last)
    }

    /// Allocation over the model's sites with bitwidths taken from `bits_of`.
    pub fn from_sites(
        model: &ModelGraph,
        bits_of: impl Fn(&str) -> Option<u32>,
        target_w: Option<f64>,
        target_a: Option<f64>,
        include_first_last: bool,
    ) -> Result<Self> {
        let mut weights = Vec::new();
        let mut acts = Vec::new();
        for s in model.sites()? {
            let bits = bits_of(&s.name)
                .ok_or_else(|| QuantError::State(format!("site `{}` has no bitwidth", s.name)))?;
            let lb = LayerBits {
                site: s.name,
                bits,
                elements: s.elements,
                boundary: s.boundary,
                pinned: s.pinned,
            };
            match s.kind {
                SiteKind::Weight => weights.push(lb),
                SiteKind::Activation => acts.push(lb),
            }
        }
        let mut a = BitwidthAllocation {
            weights,
            acts,
            target_w,
            target_a,
            achieved_w: 0.0,
            achieved_a: 0.0,
            include_first_last,
            meets_constraints: false,
        };
        a.recompute()?;
        Ok(a)
    }

    /// Refreshes the achieved averages and the constraint flag.
    pub fn recompute(&mut self) -> Result<()> {
        self.achieved_w = layer_average(&self.weights, self.include_first_last)?;
        self.achieved_a = layer_average(&self.acts, self.include_first_last)?;
        self.meets_constraints = meets(self.achieved_w, self.target_w) && meets(self.achieved_a, self.target_a);
        Ok(())
    }

    pub fn bits_of(&self, site: &str) -> Option<u32> {
        self.weights.iter().chain(&self.acts).find(|l| l.site == site).map(|l| l.bits)
    }

    /// Writes the bitwidths into a calibrated model.
    pub fn apply(&self, model: &mut ModelGraph) -> Result<()> {
        for l in self.weights.iter().chain(&self.acts) {
            model.set_site_bits(&l.site, l.bits)?;
        }
        Ok(())
    }
}

pub(crate) fn meets(avg: f64, target: Option<f64>) -> bool {
    target.is_none_or(|t| avg <= t)
}

/// Activation bitwidths giving every feature map at most `cap_bytes` bytes
/// per sample: `min(32, floor(cap·8 / elements))`, never below 2.
pub fn max_featuremap_allocation(layers: &[(String, usize)], cap_bytes: usize) -> Result<IndexMap<String, u32>> {
    let mut out = IndexMap::new();
    for (name, elements) in layers {
        let bits = (cap_bytes * 8 / elements.max(&1)).min(32);
        if bits < 2 {
            return Err(QuantError::InfeasibleCap {
                layer: name.clone(),
                elements: *elements,
                cap_bytes,
                needed: (elements * 2).div_ceil(8),
            });
        }
        out.insert(name.clone(), bits as u32);
    }
    Ok(out)
}

/// Activation sites of a model that an allocation may change, with their
/// per-sample element counts.
pub fn featuremap_layers(model: &ModelGraph) -> Result<Vec<(String, usize)>> {
    Ok(model
        .sites()?
        .into_iter()
        .filter(|s| s.kind == SiteKind::Activation && !s.pinned)
        .map(|s| (s.name, s.elements))
        .collect())
}

/// Bytes of the largest feature map when every listed layer uses `bits`.
pub fn uniform_max_featuremap_bytes(layers: &[(String, usize)], bits: u32) -> usize {
    layers
        .iter()
        .map(|(_, e)| (e * bits as usize).div_ceil(8))
        .max()
        .unwrap_or(0)
}

/// Compression summary of an allocation, in the shape of a
/// size / weight bits / feature map / activation bits table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConstraintReport {
    pub avg_w_including: f64,
    pub avg_w_excluding: f64,
    pub avg_a_including: f64,
    pub avg_a_excluding: f64,
    /// `Σ ceil(elements·bits/8)` over weight quantizers.
    pub model_bytes: usize,
    /// Per-sample activation bytes summed over all feature maps.
    pub total_featuremap_bytes: usize,
    pub max_featuremap_bytes: usize,
}

fn bytes(l: &LayerBits) -> usize {
    (l.elements * l.bits as usize).div_ceil(8)
}

pub fn constraint_report(alloc: &BitwidthAllocation) -> Result<ConstraintReport> {
    let excl = |layers: &[LayerBits]| -> Result<f64> {
        if layers.iter().all(|l| l.boundary.is_some()) {
            Ok(f64::NAN)
        } else {
            layer_average(layers, false)
        }
    };
    Ok(ConstraintReport {
        avg_w_including: layer_average(&alloc.weights, true)?,
        avg_w_excluding: excl(&alloc.weights)?,
        avg_a_including: layer_average(&alloc.acts, true)?,
        avg_a_excluding: excl(&alloc.acts)?,
        model_bytes: alloc.weights.iter().map(bytes).sum(),
        total_featuremap_bytes: alloc.acts.iter().map(bytes).sum(),
        max_featuremap_bytes: alloc.acts.iter().map(bytes).max().unwrap_or(0),
    })
}
