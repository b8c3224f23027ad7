//! Objectives, optimisation, the training loop and checkpoints.

pub mod checkpoint;
pub mod config;
pub mod losses;
pub mod optim;
pub mod trainer;

pub use checkpoint::{config_path, Checkpoint, NamedTensor};
pub use config::TrainConfig;
pub use losses::{
    cls_loss, cycle_loss, d_adv_loss, g_adv_loss, gradient_penalty, gradient_penalty_with, identity_loss,
    total_d_loss, total_g_loss, LossWeights,
};
pub use optim::{adam_step, lr_at, Adam, AdamConfig, AdamState};
pub use trainer::{sample_targets, DLosses, GLosses, LossReport, Trainer, LOG_COLUMNS};
