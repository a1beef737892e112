//! Fully connected network with backprop, SGD and a cross-validated learning-rate schedule.

mod backprop;
mod checkpoint;
mod network;
mod train;

pub use backprop::{backward, backward_with_loss, loss, sgd_step, Gradients};
pub use checkpoint::CHECKPOINT_VERSION;
pub use network::{Activation, ActivationTrace, DenseLayer, Network};
pub(crate) use network::argmax_rows;
pub use train::{evaluate, next_learning_rate, train, EpochRecord, StopReason, TrainConfig, TrainHistory};
pub(crate) use train::run_epoch;
