//! Desk-scale transformer stack: a target model, three draft families,
//! training with hard or distillation losses, and empirical tau
//! measurement.

pub mod autograd;
pub mod checkpoint;
pub mod corpus;
pub mod infer;
pub mod model;
pub mod tau;
pub mod train;

pub use autograd::{Graph, Scalar, Tensor, Var};
pub use infer::{spire_decode_step, spire_observe, SpireState, StepOut, TargetSession};
pub use model::{
    forward_target, hard_target_loss, memory_vectors, mixed_loss, prune_init, spire_train_forward, streaming_mask,
    ActivationTrace, FeedbackMixWeights, ModelParams, Variant,
};
pub use tau::{measure_tau, measure_tau_report, DraftModel, TauReport};
pub use train::{train, LossKind, TrainConfig};
