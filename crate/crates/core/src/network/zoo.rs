//! Desk-scale model builders.

use indexmap::IndexMap;
use rand::Rng;

use crate::error::{QuantError, Result};
use crate::numcore::Tensor;
use crate::quantize::QuantizerSpec;
use crate::rng::SeedStreams;

use super::layers::{FirstLastPolicy, LayerDesc, LayerKind, ModelGraph, PoolStrategy, ResidualStrategy};

/// Weights: asymmetric 8-bit, one range per output channel.
pub fn default_weight_spec() -> QuantizerSpec {
    QuantizerSpec::asymmetric(8).per_channel(0)
}

/// Activations: asymmetric 8-bit, one range per tensor.
pub fn default_act_spec() -> QuantizerSpec {
    QuantizerSpec::asymmetric(8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ToyResNetConfig {
    pub in_channels: usize,
    pub input_hw: usize,
    pub width: usize,
    pub depth_blocks: usize,
    pub classes: usize,
}

impl Default for ToyResNetConfig {
    fn default() -> Self {
        ToyResNetConfig {
            in_channels: 1,
            input_hw: 8,
            width: 8,
            depth_blocks: 2,
            classes: 4,
        }
    }
}

struct Layers(Vec<LayerDesc>);

impl Layers {
    fn push(&mut self, name: &str, kind: LayerKind) {
        let (wq, aq) = match kind {
            LayerKind::Conv2d { .. } => (Some(default_weight_spec()), None),
            LayerKind::Linear { .. } => (Some(default_weight_spec()), None),
            LayerKind::ResidualBlock { .. } => (Some(default_weight_spec()), Some(default_act_spec())),
            LayerKind::Relu | LayerKind::AvgPool => (None, Some(default_act_spec())),
            LayerKind::Flatten => (None, None),
        };
        let layer_index = self.0.len();
        self.0.push(LayerDesc {
            name: name.to_string(),
            kind,
            weight_quant: wq,
            act_quant: aq,
            layer_index,
        });
    }
}

fn model_from(layers: Vec<LayerDesc>, input_shape: Vec<usize>, classes: usize) -> Result<ModelGraph> {
    let mut m = ModelGraph {
        layers,
        residual_strategy: ResidualStrategy::HighPrecisionAdd,
        quantize_skip: false,
        pool_strategy: PoolStrategy::HighPrecisionRequant,
        first_last_policy: FirstLastPolicy::Pin8Bit,
        input_shape,
        classes,
        params: IndexMap::new(),
        quant: IndexMap::new(),
        baseline_accuracy: None,
    };
    m.validate()?;
    m.sites()?;
    init_params(&mut m, 0);
    Ok(m)
}

/// Conv stem, `depth_blocks` residual blocks (every second one halves the
/// resolution and doubles the channels through a 1×1 downsample skip),
/// global average pool and a linear classifier.
pub fn build_toy_resnet(width: usize, depth_blocks: usize, classes: usize) -> Result<ModelGraph> {
    build_toy_resnet_with(ToyResNetConfig {
        width,
        depth_blocks,
        classes,
        ..ToyResNetConfig::default()
    })
}

pub fn build_toy_resnet_with(cfg: ToyResNetConfig) -> Result<ModelGraph> {
    if cfg.width < 4 || cfg.depth_blocks < 1 || cfg.classes < 2 {
        return Err(QuantError::Config(format!(
            "toy resnet needs width >= 4, depth_blocks >= 1 and classes >= 2, got {cfg:?}"
        )));
    }
    let mut l = Layers(Vec::new());
    l.push(
        "stem",
        LayerKind::Conv2d {
            in_ch: cfg.in_channels,
            out_ch: cfg.width,
            kernel: 3,
            stride: 1,
            padding: 1,
        },
    );
    l.push("stem_relu", LayerKind::Relu);
    let mut ch = cfg.width;
    for i in 0..cfg.depth_blocks {
        let (out_ch, stride) = if i % 2 == 1 { (ch * 2, 2) } else { (ch, 1) };
        l.push(
            &format!("block{i}"),
            LayerKind::ResidualBlock {
                in_ch: ch,
                out_ch,
                stride,
            },
        );
        ch = out_ch;
    }
    l.push("pool", LayerKind::AvgPool);
    l.push("flatten", LayerKind::Flatten);
    l.push(
        "fc",
        LayerKind::Linear {
            in_features: ch,
            out_features: cfg.classes,
        },
    );
    model_from(l.0, vec![cfg.in_channels, cfg.input_hw, cfg.input_hw], cfg.classes)
}

/// `inputs -> hidden... -> classes` with a quantized ReLU after every hidden layer.
pub fn build_mlp(inputs: usize, hidden: &[usize], classes: usize) -> Result<ModelGraph> {
    if inputs == 0 || classes < 2 || hidden.contains(&0) {
        return Err(QuantError::Config("mlp dimensions must be positive with >= 2 classes".into()));
    }
    let mut l = Layers(Vec::new());
    let mut prev = inputs;
    for (i, &h) in hidden.iter().enumerate() {
        l.push(
            &format!("fc{}", i + 1),
            LayerKind::Linear {
                in_features: prev,
                out_features: h,
            },
        );
        l.push(&format!("relu{}", i + 1), LayerKind::Relu);
        prev = h;
    }
    l.push(
        &format!("fc{}", hidden.len() + 1),
        LayerKind::Linear {
            in_features: prev,
            out_features: classes,
        },
    );
    model_from(l.0, vec![inputs], classes)
}

/// He-uniform weights, zero biases. The second convolution of every residual
/// branch starts at half scale.
pub fn init_params(model: &mut ModelGraph, seed: u64) {
    let mut rng = SeedStreams::new(seed).stream("init");
    model.params.clear();
    model.quant.clear();
    model.baseline_accuracy = None;
    for (name, shape) in model.param_shapes() {
        let numel: usize = shape.iter().product();
        let data = if name.ends_with(".bias") {
            vec![0.0; numel]
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let mut bound = (6.0 / fan_in as f64).sqrt();
            if name.ends_with("conv2.weight") {
                bound *= 0.5;
            }
            (0..numel).map(|_| rng.gen_range(-bound..bound)).collect()
        };
        model
            .params
            .insert(name, Tensor::new(shape, data).expect("shape matches numel"));
    }
}

