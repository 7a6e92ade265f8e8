//! Joint objective, reverse-mode gradients, optimizers and the epoch loop.

mod config;
mod gradcheck;
mod objective;
mod optim;
mod trainer;

pub use crate::model::GradientSet;
pub use config::{hash_pairs, OptimizerKind, TrainConfig, ABLATIONS};
pub use gradcheck::{
    grad_check, relative_error, tiny_config, tiny_grad_check, tiny_instance, GradCheckOptions,
    GradCheckReport, GroupError, TinyInstance, REL_ERROR_FLOOR,
};
pub use objective::{
    backward, exclude_kinks, hinge_loss, kink_signature, loss_and_grad, table_active, total_loss,
    LossBreakdown,
};
pub use optim::{adam_step, sgd_step, AdamState, ADAM_EPS, BETA1, BETA2};
pub use trainer::{
    tensor_fingerprint, Checkpoint, EpochStats, Trainer, CHECKPOINT_FORMAT, CHECKPOINT_VERSION,
};

#[cfg(test)]
mod tests;
