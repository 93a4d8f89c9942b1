//! Desk-scale federated fine-tuning of tiny decoder-only language models.

// `!(x > 0.0)` is used on purpose so NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autograd;
pub mod checkpoint;
pub mod error;
pub mod fed;
pub mod fedipr;
pub mod gradcheck;
pub mod metrics;
pub mod model;
pub mod optim;
pub mod peft;
pub mod tensor;
pub mod trainers;

pub use autograd::{Graph, Var};
pub use error::{Error, Result};
pub use model::{Batch, Decoding, MiniLM, ModelConfig};
pub use optim::{sgd_step, OptimizerConfig, Sgd};
pub use peft::{attach_lora, attach_prefix, merge_lora, AdapterSet, AdapterSpec, LoraSpec, PrefixSpec, Target};
pub use tensor::{Scalar, Tensor};
