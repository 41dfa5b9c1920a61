//! Learning differentiable value functions for black-box evaluation metrics.
//!
//! A small network is meta-trained to map adapter parameters `phi` of a
//! frozen base model to the metric they achieve. During finetuning the
//! value function supplies a metric descent direction through antithetic
//! guided evolution strategies, which is added to the surrogate-loss
//! gradient of SGD or Adam.
//!
//! The numeric kernels are generic over [`Scalar`]; the aliases at the crate
//! root fix them to `f64`, which the experiment pipeline uses throughout.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod adapter;
pub mod data;
pub mod error;
pub mod finetune;
pub mod gp;
pub mod harness;
pub mod meta;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracle;
pub mod pretrain;
pub mod scalar;
pub mod seed;
pub mod selfcheck;
pub mod stats;
pub mod task;
pub mod value_fn;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Tensor = nn::Tensor<f64>;
pub type ModelWeights = nn::ModelWeights<f64>;
pub type AdapterParams = adapter::AdapterParams<f64>;
