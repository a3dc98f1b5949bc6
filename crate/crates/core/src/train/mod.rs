//! Losses, the optimizer and the epoch loop.

mod loss;
mod sgd;
mod trainer;

pub use loss::{bce_loss, soft_jaccard_loss, LossKind, BCE_CLAMP, JACCARD_SMOOTH};
pub use sgd::{sgd_step, SgdConfig};
pub use trainer::{evaluate_model, initial_network, train, train_samples, EpochRecord, TrainConfig, TrainLog};
