#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod cli;
pub mod error;
pub mod mpq;
pub mod network;
pub mod numcore;
pub mod pipeline;
pub mod quantcard;
pub mod quantize;
pub mod rng;

pub use error::{QuantError, Result};
pub use numcore::{Graph, NodeId, Tensor};
