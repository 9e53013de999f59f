use std::collections::HashMap;

use indexmap::IndexMap;

use crate::error::{QuantError, Result};
use crate::numcore::{Graph, NodeId, Tensor};
use crate::quantize::{fake_quantize_bound, QuantBinding};

use super::layers::{
    is_downsample, BlockSites, FirstLastPolicy, LayerKind, ModelGraph, PoolStrategy, ResidualStrategy, INPUT_SITE,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    FloatingPoint,
    Quantized,
}

/// Observer callback invoked with every activation that a quantizer would see.
pub type ActivationTap<'a> = &'a mut dyn FnMut(&str, &Tensor);

pub struct ForwardOptions<'a> {
    pub mode: Mode,
    /// Register weights and biases as graph parameters (for training).
    pub trainable: bool,
    /// Per-site graph nodes overriding bitwidths or clipping ranges.
    pub bindings: Option<&'a HashMap<String, QuantBinding>>,
    pub tap: Option<ActivationTap<'a>>,
}

impl<'a> ForwardOptions<'a> {
    pub fn new(mode: Mode) -> Self {
        ForwardOptions {
            mode,
            trainable: false,
            bindings: None,
            tap: None,
        }
    }

    pub fn trainable(mut self) -> Self {
        self.trainable = true;
        self
    }

    pub fn with_bindings(mut self, bindings: &'a HashMap<String, QuantBinding>) -> Self {
        self.bindings = Some(bindings);
        self
    }

    pub fn with_tap(mut self, tap: ActivationTap<'a>) -> Self {
        self.tap = Some(tap);
        self
    }
}

pub struct ForwardOutput {
    pub logits: NodeId,
    /// Parameter nodes by name, present when built with `trainable`.
    pub params: IndexMap<String, NodeId>,
}

struct Builder<'m, 'o, 'a> {
    model: &'m ModelGraph,
    opts: &'o mut ForwardOptions<'a>,
    params: IndexMap<String, NodeId>,
}

impl Builder<'_, '_, '_> {
    fn quantized(&self) -> bool {
        self.opts.mode == Mode::Quantized
    }

    fn tensor(&mut self, g: &mut Graph, name: &str) -> Result<NodeId> {
        let t = self.model.param(name)?.clone();
        if self.opts.trainable {
            let id = g.param(name, t)?;
            self.params.insert(name.to_string(), id);
            Ok(id)
        } else {
            Ok(g.constant(t))
        }
    }

    fn quantize(&mut self, g: &mut Graph, site: &str, x: NodeId) -> Result<NodeId> {
        let st = self
            .model
            .quant
            .get(site)
            .ok_or_else(|| QuantError::State(format!("quantizer `{site}` is not calibrated")))?;
        let binding = self
            .opts
            .bindings
            .and_then(|b| b.get(site))
            .copied()
            .unwrap_or_default();
        fake_quantize_bound(g, x, &st.state, &st.spec, &binding)
    }

    /// Activation quantizer site; a no-op in floating-point mode.
    fn act(&mut self, g: &mut Graph, site: &str, x: NodeId) -> Result<NodeId> {
        if let Some(tap) = self.opts.tap.as_mut() {
            tap(site, g.value(x));
        }
        if self.quantized() {
            self.quantize(g, site, x)
        } else {
            Ok(x)
        }
    }

    fn weight(&mut self, g: &mut Graph, name: &str, quantized: bool) -> Result<NodeId> {
        let w = self.tensor(g, name)?;
        if quantized && self.quantized() {
            self.quantize(g, name, w)
        } else {
            Ok(w)
        }
    }

    fn conv(&mut self, g: &mut Graph, x: NodeId, prefix: &str, wq: bool, stride: usize, pad: usize) -> Result<NodeId> {
        let w = self.weight(g, &format!("{prefix}.weight"), wq)?;
        let b = self.tensor(g, &format!("{prefix}.bias"))?;
        let y = g.conv2d(x, w, stride, pad)?;
        let shape = g.value(y).shape().to_vec();
        let bb = g.broadcast_axis(b, &shape, 1)?;
        g.add(y, bb)
    }

    fn linear(&mut self, g: &mut Graph, x: NodeId, prefix: &str, wq: bool) -> Result<NodeId> {
        let w = self.weight(g, &format!("{prefix}.weight"), wq)?;
        let b = self.tensor(g, &format!("{prefix}.bias"))?;
        let wt = g.transpose(w)?;
        let y = g.matmul(x, wt)?;
        let shape = g.value(y).shape().to_vec();
        let bb = g.broadcast_axis(b, &shape, 1)?;
        g.add(y, bb)
    }
}

/// Builds the network on `g` starting from input node `x` (`[n, ...input_shape]`).
pub fn forward_graph(g: &mut Graph, model: &ModelGraph, x: NodeId, opts: &mut ForwardOptions) -> Result<ForwardOutput> {
    let expected: Vec<usize> = model.input_shape.clone();
    let got = g.value(x).shape().to_vec();
    if got.len() != expected.len() + 1 || got[1..] != expected[..] {
        return Err(QuantError::Dimension {
            op: "forward",
            lhs: got,
            rhs: expected,
        });
    }
    let mut b = Builder {
        model,
        opts,
        params: IndexMap::new(),
    };
    let mut h = x;
    let mut stream_q = false;
    if model.first_last_policy == FirstLastPolicy::Quantize && model.layers.iter().any(|l| l.act_quant.is_some()) {
        h = b.act(g, INPUT_SITE, h)?;
        stream_q = true;
    }
    for l in &model.layers {
        let n = l.name.as_str();
        let wq = l.weight_quant.is_some();
        let aq = l.act_quant.is_some();
        match l.kind {
            LayerKind::Conv2d { stride, padding, .. } => {
                h = b.conv(g, h, n, wq, stride, padding)?;
                stream_q = aq;
                if aq {
                    h = b.act(g, &format!("{n}.act"), h)?;
                }
            }
            LayerKind::Linear { .. } => {
                h = b.linear(g, h, n, wq)?;
                stream_q = aq;
                if aq {
                    h = b.act(g, &format!("{n}.act"), h)?;
                }
            }
            LayerKind::Relu => {
                h = g.relu(h);
                if aq {
                    h = b.act(g, &format!("{n}.act"), h)?;
                    stream_q = true;
                }
            }
            LayerKind::Flatten => {
                let shape = g.value(h).shape().to_vec();
                let rest: usize = shape[1..].iter().product();
                h = g.reshape(h, &[shape[0], rest])?;
            }
            LayerKind::AvgPool => {
                let site = format!("{n}.act");
                h = match (model.pool_strategy, aq) {
                    (_, false) => g.global_avg_pool(h)?,
                    (PoolStrategy::HighPrecisionRequant, true) => {
                        let m = g.global_avg_pool(h)?;
                        b.act(g, &site, m)?
                    }
                    (PoolStrategy::IntegerArithmetic, true) => {
                        let hq = b.act(g, &site, h)?;
                        let m = g.global_avg_pool(hq)?;
                        // the integer mean lands back on the input grid
                        if b.quantized() {
                            b.quantize(g, &site, m)?
                        } else {
                            m
                        }
                    }
                };
                stream_q = aq;
            }
            LayerKind::ResidualBlock { in_ch, out_ch, stride } => {
                let down = is_downsample(in_ch, out_ch, stride);
                let bs = if aq {
                    BlockSites::decide(model.residual_strategy, model.quantize_skip, down, stream_q)
                } else {
                    BlockSites {
                        input: false,
                        branch_out: false,
                        skip_out: false,
                        sum_out: false,
                    }
                };
                let branch_in = if bs.input {
                    b.act(g, &format!("{n}.in.act"), h)?
                } else {
                    h
                };
                let c1 = b.conv(g, branch_in, &format!("{n}.conv1"), wq, stride, 1)?;
                let mut r1 = g.relu(c1);
                if aq {
                    r1 = b.act(g, &format!("{n}.conv1.act"), r1)?;
                }
                let mut c2 = b.conv(g, r1, &format!("{n}.conv2"), wq, 1, 1)?;
                if bs.branch_out {
                    c2 = b.act(g, &format!("{n}.conv2.act"), c2)?;
                }
                let skip = if down {
                    let s = b.conv(g, h, &format!("{n}.skip"), wq, stride, 0)?;
                    if bs.skip_out {
                        b.act(g, &format!("{n}.skip.act"), s)?
                    } else {
                        s
                    }
                } else {
                    h
                };
                let sum = g.add(c2, skip)?;
                h = g.relu(sum);
                if bs.sum_out {
                    h = b.act(g, &format!("{n}.out.act"), h)?;
                }
                stream_q = bs.sum_out;
                debug_assert!(model.residual_strategy != ResidualStrategy::UnquantizedSkip || !stream_q);
            }
        }
    }
    Ok(ForwardOutput {
        logits: h,
        params: b.params,
    })
}

/// Evaluates the network on a batch and returns the logits.
pub fn forward(model: &ModelGraph, x: &Tensor, mode: Mode) -> Result<Tensor> {
    let mut g = Graph::new();
    let xn = g.constant(x.clone());
    let out = forward_graph(&mut g, model, xn, &mut ForwardOptions::new(mode))?;
    Ok(g.value(out.logits).clone())
}

/// Runs `forward` over `x` in chunks of `batch` rows and concatenates the logits.
pub fn forward_batched(model: &ModelGraph, x: &Tensor, mode: Mode, batch: usize) -> Result<Tensor> {
    let n = x.shape()[0];
    let mut data = Vec::with_capacity(n * model.classes);
    let mut start = 0;
    while start < n {
        let end = (start + batch.max(1)).min(n);
        let rows: Vec<usize> = (start..end).collect();
        data.extend_from_slice(forward(model, &x.select_rows(&rows), mode)?.data());
        start = end;
    }
    Tensor::new(vec![n, model.classes], data)
}
