//! Meta-test optimizers: guided-ES metric steps and the learned optimizer.

pub mod guided_es;
pub mod learned;
pub mod metricopt;

pub use guided_es::{
    covariance_trace, es_direction, orthonormal_basis, sample_perturbation, sample_perturbations, GradientHistory,
    GuidedEsConfig,
};
pub use learned::{
    learned_opt_step, learned_optimizer_spec, loss_learned_optimizer, train_learned_optimizer, unroll, FeatureTracker,
    LearnedTrainConfig, MismatchToy, UnrollTask,
};
pub use metricopt::{BaseOptimizer, MetricOptState, StepInfo};
