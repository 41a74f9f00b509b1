//! Desk-scale simulator for federated training of dual encoders with
//! distributed cross-correlation optimization (DCCO).
// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod codec;
pub mod data;
pub mod encoder;
pub mod error;
pub mod exec;
pub mod harness;
pub mod optim;
pub mod params;
pub mod probe;
pub mod protocol;
pub mod reduce;
pub mod seed;
pub mod stats;
pub mod tensor;

pub use autodiff::{Graph, Gradients, NodeId};
pub use error::{Error, ErrorClass, Result};
pub use params::{ModelParams, ParamNodes};
pub use tensor::Tensor;
