//! Layers, residual and pooling strategies, first/last-layer policy, the
//! quantized forward pass, model builders and persistence.

pub mod forward;
pub mod layers;
pub mod serialize;
pub mod zoo;

pub use forward::{forward, forward_batched, forward_graph, ActivationTap, ForwardOptions, ForwardOutput, Mode};
pub use layers::{
    Boundary, FirstLastPolicy, LayerDesc, LayerKind, ModelGraph, PoolStrategy, ResidualStrategy, SiteInfo, SiteKind,
    SiteState, INPUT_SITE, PINNED_BITS,
};
pub use serialize::{decode_model, encode_model, load_model, parse_manifest, save_model, Manifest, FORMAT_VERSION};
pub use zoo::{build_mlp, build_toy_resnet, build_toy_resnet_with, default_act_spec, default_weight_spec, init_params, ToyResNetConfig};
