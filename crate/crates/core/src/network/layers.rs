use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;
use crate::quantize::{finalize_range_with_bits, BitSpec, QuantizerSpec, QuantizerState};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d {
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    Relu,
    /// Global average pool over the spatial axes, `[n,c,h,w] -> [n,c]`.
    AvgPool,
    Flatten,
    /// Two 3×3 convolutions plus a skip. A stride or channel change turns the
    /// skip into a 1×1 convolution (the downsample branch).
    ResidualBlock {
        in_ch: usize,
        out_ch: usize,
        stride: usize,
    },
}

impl LayerKind {
    pub fn has_weights(&self) -> bool {
        matches!(
            self,
            LayerKind::Conv2d { .. } | LayerKind::Linear { .. } | LayerKind::ResidualBlock { .. }
        )
    }

    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv2d { .. } => "conv2d",
            LayerKind::Linear { .. } => "linear",
            LayerKind::Relu => "relu",
            LayerKind::AvgPool => "avg_pool",
            LayerKind::Flatten => "flatten",
            LayerKind::ResidualBlock { .. } => "residual_block",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerDesc {
    pub name: String,
    #[serde(flatten)]
    pub kind: LayerKind,
    pub weight_quant: Option<QuantizerSpec>,
    pub act_quant: Option<QuantizerSpec>,
    pub layer_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResidualStrategy {
    /// Branch output, skip output and the sum are all requantized.
    QuantizeAll,
    /// The add runs on high-precision inputs; only the sum is requantized.
    HighPrecisionAdd,
    /// The identity stream is never requantized; only the input of each
    /// convolution branch is.
    UnquantizedSkip,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolStrategy {
    HighPrecisionRequant,
    IntegerArithmetic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FirstLastPolicy {
    Quantize,
    Pin8Bit,
}

pub const PINNED_BITS: u32 = 8;
pub const INPUT_SITE: &str = "input.act";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SiteKind {
    Weight,
    Activation,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Boundary {
    First,
    Last,
}

/// A quantizer attachment point.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteInfo {
    pub name: String,
    pub kind: SiteKind,
    /// Effective quantizer settings, with pinning applied.
    pub spec: QuantizerSpec,
    /// Weight elements, or activation elements per sample.
    pub elements: usize,
    pub layer_index: usize,
    pub boundary: Option<Boundary>,
    pub pinned: bool,
    /// Parameter quantized by a weight site.
    pub param: Option<String>,
}

/// Calibrated range and the finalized state derived from it.
#[derive(Debug, Clone, PartialEq)]
pub struct SiteState {
    pub spec: QuantizerSpec,
    pub raw_min: Tensor,
    pub raw_max: Tensor,
    pub state: QuantizerState,
}

impl SiteState {
    pub fn new(spec: QuantizerSpec, raw_min: Tensor, raw_max: Tensor, bits: u32) -> Result<Self> {
        let state = finalize_range_with_bits(&raw_min, &raw_max, &spec, bits)?;
        Ok(SiteState {
            spec,
            raw_min,
            raw_max,
            state,
        })
    }

    pub fn bits(&self) -> u32 {
        self.state.bits
    }
}

/// Which activation quantizers a residual block applies.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct BlockSites {
    pub input: bool,
    pub branch_out: bool,
    pub skip_out: bool,
    pub sum_out: bool,
}

impl BlockSites {
    pub(crate) fn decide(strategy: ResidualStrategy, quantize_skip: bool, downsample: bool, stream_quantized: bool) -> Self {
        match strategy {
            ResidualStrategy::QuantizeAll => BlockSites {
                input: false,
                branch_out: true,
                skip_out: downsample,
                sum_out: true,
            },
            ResidualStrategy::HighPrecisionAdd => BlockSites {
                input: false,
                branch_out: false,
                skip_out: downsample && quantize_skip,
                sum_out: true,
            },
            ResidualStrategy::UnquantizedSkip => BlockSites {
                input: !stream_quantized,
                branch_out: false,
                skip_out: false,
                sum_out: false,
            },
        }
    }
}

pub(crate) fn is_downsample(in_ch: usize, out_ch: usize, stride: usize) -> bool {
    stride != 1 || in_ch != out_ch
}

/// Ordered layer description of a network with its parameters and quantizers.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelGraph {
    pub layers: Vec<LayerDesc>,
    pub residual_strategy: ResidualStrategy,
    /// Also requantize the downsample branch under `HighPrecisionAdd`.
    pub quantize_skip: bool,
    pub pool_strategy: PoolStrategy,
    pub first_last_policy: FirstLastPolicy,
    /// Per-sample input shape, e.g. `[1, 8, 8]` or `[2]`.
    pub input_shape: Vec<usize>,
    pub classes: usize,
    pub params: IndexMap<String, Tensor>,
    pub quant: IndexMap<String, SiteState>,
    pub baseline_accuracy: Option<f64>,
}

fn conv_out(h: usize, k: usize, stride: usize, pad: usize) -> Result<usize> {
    if k > h + 2 * pad || stride == 0 {
        return Err(QuantError::Dimension {
            op: "conv2d",
            lhs: vec![h],
            rhs: vec![k],
        });
    }
    Ok((h + 2 * pad - k) / stride + 1)
}

struct SiteWalker {
    out: Vec<SiteInfo>,
}

impl SiteWalker {
    fn weight(&mut self, layer: &LayerDesc, param: String, shape: &[usize]) {
        if let Some(spec) = layer.weight_quant {
            self.out.push(SiteInfo {
                name: param.clone(),
                kind: SiteKind::Weight,
                spec,
                elements: shape.iter().product(),
                layer_index: layer.layer_index,
                boundary: None,
                pinned: false,
                param: Some(param),
            });
        }
    }

    fn act(&mut self, spec: Option<QuantizerSpec>, name: String, shape: &[usize], layer_index: usize) -> bool {
        match spec {
            Some(spec) => {
                self.out.push(SiteInfo {
                    name,
                    kind: SiteKind::Activation,
                    spec,
                    elements: shape.iter().product(),
                    layer_index,
                    boundary: None,
                    pinned: false,
                    param: None,
                });
                true
            }
            None => false,
        }
    }
}

impl ModelGraph {
    pub fn layer(&self, name: &str) -> Option<&LayerDesc> {
        self.layers.iter().find(|l| l.name == name)
    }

    pub fn param(&self, name: &str) -> Result<&Tensor> {
        self.params
            .get(name)
            .ok_or_else(|| QuantError::State(format!("missing parameter `{name}`")))
    }

    pub fn param_count(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    /// Checks the structural invariants: one input, one classifier output.
    pub fn validate(&self) -> Result<()> {
        let Some(last) = self.layers.last() else {
            return Err(QuantError::Config("model has no layers".into()));
        };
        match last.kind {
            LayerKind::Linear { out_features, .. } if out_features == self.classes => {}
            _ => {
                return Err(QuantError::Config(format!(
                    "last layer `{}` must be a linear classifier with {} outputs",
                    last.name, self.classes
                )))
            }
        }
        if last.act_quant.is_some() {
            return Err(QuantError::Config("logits are never quantized".into()));
        }
        for l in &self.layers {
            if l.weight_quant.is_some() && !l.kind.has_weights() {
                return Err(QuantError::Config(format!("layer `{}` has no weights to quantize", l.name)));
            }
            if l.act_quant.is_some() && l.kind == LayerKind::Flatten {
                return Err(QuantError::Config(format!("layer `{}` has no quantizable output", l.name)));
            }
        }
        let mut names: Vec<&str> = self.layers.iter().map(|l| l.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(QuantError::Config("layer names must be unique".into()));
        }
        Ok(())
    }

    /// Parameter names and shapes in canonical order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for l in &self.layers {
            match l.kind {
                LayerKind::Conv2d {
                    in_ch, out_ch, kernel, ..
                } => {
                    out.push((format!("{}.weight", l.name), vec![out_ch, in_ch, kernel, kernel]));
                    out.push((format!("{}.bias", l.name), vec![out_ch]));
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    out.push((format!("{}.weight", l.name), vec![out_features, in_features]));
                    out.push((format!("{}.bias", l.name), vec![out_features]));
                }
                LayerKind::ResidualBlock { in_ch, out_ch, stride } => {
                    out.push((format!("{}.conv1.weight", l.name), vec![out_ch, in_ch, 3, 3]));
                    out.push((format!("{}.conv1.bias", l.name), vec![out_ch]));
                    out.push((format!("{}.conv2.weight", l.name), vec![out_ch, out_ch, 3, 3]));
                    out.push((format!("{}.conv2.bias", l.name), vec![out_ch]));
                    if is_downsample(in_ch, out_ch, stride) {
                        out.push((format!("{}.skip.weight", l.name), vec![out_ch, in_ch, 1, 1]));
                        out.push((format!("{}.skip.bias", l.name), vec![out_ch]));
                    }
                }
                LayerKind::Relu | LayerKind::AvgPool | LayerKind::Flatten => {}
            }
        }
        out
    }

    /// Every quantizer attachment point in forward order, with first/last
    /// boundaries marked and pinning applied.
    pub fn sites(&self) -> Result<Vec<SiteInfo>> {
        let mut w = SiteWalker { out: Vec::new() };
        let mut shape = self.input_shape.clone();
        let mut stream_q = false;
        if self.first_last_policy == FirstLastPolicy::Quantize {
            let first_act = self.layers.iter().find_map(|l| l.act_quant);
            stream_q = w.act(first_act, INPUT_SITE.to_string(), &shape, 0);
        }
        for l in &self.layers {
            let n = &l.name;
            match l.kind {
                LayerKind::Conv2d {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    padding,
                } => {
                    if shape.len() != 3 || shape[0] != in_ch {
                        return Err(QuantError::Dimension {
                            op: "conv2d",
                            lhs: shape,
                            rhs: vec![in_ch],
                        });
                    }
                    w.weight(l, format!("{n}.weight"), &[out_ch, in_ch, kernel, kernel]);
                    shape = vec![
                        out_ch,
                        conv_out(shape[1], kernel, stride, padding)?,
                        conv_out(shape[2], kernel, stride, padding)?,
                    ];
                    stream_q = w.act(l.act_quant, format!("{n}.act"), &shape, l.layer_index);
                }
                LayerKind::Linear {
                    in_features,
                    out_features,
                } => {
                    if shape.iter().product::<usize>() != in_features || shape.len() != 1 {
                        return Err(QuantError::Dimension {
                            op: "linear",
                            lhs: shape,
                            rhs: vec![in_features],
                        });
                    }
                    w.weight(l, format!("{n}.weight"), &[out_features, in_features]);
                    shape = vec![out_features];
                    stream_q = w.act(l.act_quant, format!("{n}.act"), &shape, l.layer_index);
                }
                LayerKind::Relu => {
                    stream_q |= w.act(l.act_quant, format!("{n}.act"), &shape, l.layer_index);
                }
                LayerKind::Flatten => shape = vec![shape.iter().product()],
                LayerKind::AvgPool => {
                    if shape.len() != 3 {
                        return Err(QuantError::Dimension {
                            op: "avg_pool",
                            lhs: shape,
                            rhs: vec![],
                        });
                    }
                    let observed = match self.pool_strategy {
                        PoolStrategy::HighPrecisionRequant => vec![shape[0]],
                        PoolStrategy::IntegerArithmetic => shape.clone(),
                    };
                    shape = vec![shape[0]];
                    stream_q = w.act(l.act_quant, format!("{n}.act"), &observed, l.layer_index);
                }
                LayerKind::ResidualBlock { in_ch, out_ch, stride } => {
                    if shape.len() != 3 || shape[0] != in_ch {
                        return Err(QuantError::Dimension {
                            op: "residual_block",
                            lhs: shape,
                            rhs: vec![in_ch],
                        });
                    }
                    let down = is_downsample(in_ch, out_ch, stride);
                    let bs = BlockSites::decide(self.residual_strategy, self.quantize_skip, down, stream_q);
                    let aq = l.act_quant;
                    let li = l.layer_index;
                    if bs.input {
                        w.act(aq, format!("{n}.in.act"), &shape, li);
                    }
                    let out_shape = vec![out_ch, conv_out(shape[1], 3, stride, 1)?, conv_out(shape[2], 3, stride, 1)?];
                    w.weight(l, format!("{n}.conv1.weight"), &[out_ch, in_ch, 3, 3]);
                    w.act(aq, format!("{n}.conv1.act"), &out_shape, li);
                    w.weight(l, format!("{n}.conv2.weight"), &[out_ch, out_ch, 3, 3]);
                    if bs.branch_out {
                        w.act(aq, format!("{n}.conv2.act"), &out_shape, li);
                    }
                    if down {
                        w.weight(l, format!("{n}.skip.weight"), &[out_ch, in_ch, 1, 1]);
                        if bs.skip_out {
                            w.act(aq, format!("{n}.skip.act"), &out_shape, li);
                        }
                    }
                    stream_q = bs.sum_out && w.act(aq, format!("{n}.out.act"), &out_shape, li);
                    shape = out_shape;
                }
            }
        }
        let mut sites = w.out;
        mark_boundaries(&mut sites, self.first_last_policy);
        Ok(sites)
    }

    pub fn site(&self, name: &str) -> Result<SiteInfo> {
        self.sites()?
            .into_iter()
            .find(|s| s.name == name)
            .ok_or_else(|| QuantError::Config(format!("unknown quantizer site `{name}`")))
    }

    /// Sets a site's calibrated raw range and finalizes it at the site's
    /// current bitwidth (or its configured one when first calibrated).
    pub fn set_site_range(&mut self, site: &SiteInfo, raw_min: Tensor, raw_max: Tensor) -> Result<()> {
        let bits = match self.quant.get(&site.name) {
            Some(s) if s.spec == site.spec => s.bits(),
            _ => site.spec.initial_bits(),
        };
        let st = SiteState::new(site.spec, raw_min, raw_max, bits)?;
        self.quant.insert(site.name.clone(), st);
        Ok(())
    }

    /// Re-finalizes a calibrated site at a new bitwidth. Pinned sites refuse
    /// any bitwidth other than the pinned one.
    pub fn set_site_bits(&mut self, name: &str, bits: u32) -> Result<()> {
        let info = self.site(name)?;
        if info.pinned && bits != PINNED_BITS {
            return Err(QuantError::Config(format!("site `{name}` is pinned to {PINNED_BITS} bits")));
        }
        let st = self
            .quant
            .get_mut(name)
            .ok_or_else(|| QuantError::State(format!("site `{name}` is not calibrated")))?;
        *st = SiteState::new(st.spec, st.raw_min.clone(), st.raw_max.clone(), bits)?;
        Ok(())
    }

    /// Sets every unpinned site of `kind` (or all kinds) to `bits`.
    pub fn set_bits_where(&mut self, kind: Option<SiteKind>, bits: u32) -> Result<()> {
        for s in self.sites()? {
            if s.pinned || kind.is_some_and(|k| k != s.kind) {
                continue;
            }
            self.set_site_bits(&s.name, bits)?;
        }
        Ok(())
    }

    pub fn site_bits(&self, name: &str) -> Option<u32> {
        self.quant.get(name).map(SiteState::bits)
    }

    /// Names of sites without a finalized state.
    pub fn uncalibrated_sites(&self) -> Result<Vec<String>> {
        Ok(self
            .sites()?
            .into_iter()
            .filter(|s| self.quant.get(&s.name).is_none_or(|st| st.spec != s.spec))
            .map(|s| s.name)
            .collect())
    }

    /// Applies `f` to every configured weight quantizer spec.
    pub fn map_weight_specs(&mut self, f: impl Fn(QuantizerSpec) -> QuantizerSpec) {
        for l in &mut self.layers {
            l.weight_quant = l.weight_quant.map(&f);
        }
        self.quant.clear();
    }

    /// Applies `f` to every configured activation quantizer spec.
    pub fn map_act_specs(&mut self, f: impl Fn(QuantizerSpec) -> QuantizerSpec) {
        for l in &mut self.layers {
            l.act_quant = l.act_quant.map(&f);
        }
        self.quant.clear();
    }

    /// Total parameter bytes at the given per-site bitwidths, with unquantized
    /// parameters (biases) counted at 32 bits.
    pub fn weight_bytes(&self, bits_of: impl Fn(&str) -> Option<u32>) -> usize {
        self.params
            .iter()
            .map(|(name, t)| {
                let b = bits_of(name).unwrap_or(32) as usize;
                (t.numel() * b).div_ceil(8)
            })
            .sum()
    }
}

fn mark_boundaries(sites: &mut [SiteInfo], policy: FirstLastPolicy) {
    let weights: Vec<usize> = (0..sites.len()).filter(|&i| sites[i].kind == SiteKind::Weight).collect();
    let (Some(&first_w), Some(&last_w)) = (weights.first(), weights.last()) else {
        return;
    };
    let first_act = (first_w..sites.len()).find(|&i| sites[i].kind == SiteKind::Activation);
    let last_act = (0..last_w).rev().find(|&i| sites[i].kind == SiteKind::Activation);
    let input = sites.iter().position(|s| s.name == INPUT_SITE);
    let marks = [
        (Some(first_w), Boundary::First),
        (first_act, Boundary::First),
        (input, Boundary::First),
        (Some(last_w), Boundary::Last),
        (last_act, Boundary::Last),
    ];
    for (i, b) in marks {
        if let Some(s) = i.map(|i| &mut sites[i]) {
            s.boundary.get_or_insert(b);
        }
    }
    if policy == FirstLastPolicy::Pin8Bit {
        for s in sites.iter_mut().filter(|s| s.boundary.is_some()) {
            s.pinned = true;
            s.spec.bits = BitSpec::Fixed(PINNED_BITS);
        }
    }
}
