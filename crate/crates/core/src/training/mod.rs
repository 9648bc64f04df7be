//! Losses, optimizer, learning-rate schedule, metrics, checkpoints, and the
//! training loop.

mod checkpoint;
mod loss;
mod metrics;
mod optim;
mod schedule;
mod trainer;

pub use checkpoint::{Checkpoint, Entry};
pub use loss::{
    class_labels, contribution_reg, contribution_reg_value, task_loss, total_loss, weight_reg, weight_reg_value,
    LossTerms, Penalties, TaskKind,
};
pub use metrics::{average_precision, mae, roc_auc, Metric};
pub use optim::Adam;
pub use schedule::{Direction, Plateau, PlateauStep};
pub use trainer::{evaluate_model, infer_out_dim, predict, restore_model, EpochRecord, Trainer, LOG_HEADER};
