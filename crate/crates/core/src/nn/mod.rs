//! Minimal dense reverse-mode differentiation for small MLPs.

mod checkpoint;
mod mlp;
mod optim;
mod tensor;

pub use checkpoint::{CHECKPOINT_FORMAT, CHECKPOINT_VERSION};
pub use mlp::{
    Activation, Backward, BatchNorm, Dense, ForwardCache, Gradients, MlpSpec, Mode, ModelWeights, Modulation,
    ModulationGrad, OutputActivation, BATCHNORM_EPS, BATCHNORM_MOMENTUM,
};
pub use optim::{sgd_step, AdamConfig, AdamState, SgdState};
pub use tensor::Tensor;
