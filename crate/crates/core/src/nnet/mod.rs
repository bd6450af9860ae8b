//! Small dense/convolutional network engine with reverse-mode gradients,
//! three adaptive optimizers and an early-stopping training loop. All
//! training arithmetic is `f64`.

pub mod checkpoint;
pub mod constants;
mod kernels;
pub mod layers;
pub mod loss;
pub mod network;
pub mod optim;
pub mod tensor;
pub mod train;

pub use checkpoint::{decode_checkpoint, encode_checkpoint, load_checkpoint, save_checkpoint, Precision};
pub use layers::{LayerSpec, Padding};
pub use loss::{cross_entropy_smoothed, smoothed_target, target_batch};
pub use network::{Network, NetworkSpec, NodeSpec, SpecBuilder};
pub use optim::{OptimizerConfig, OptimizerRule, OptimizerState};
pub use tensor::{Param, Tensor};
pub use train::{
    evaluate_loss, fit, fit_with_monitor, predict, EarlyStopping, EpochRecord, History, LabeledSet, StopDecision,
    TrainConfig,
};

/// Trainable parameter count of a built network.
pub fn count_parameters(network: &Network) -> usize {
    network.parameter_count()
}

/// Softmax over one logit vector.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    kernels::softmax_rows(logits, logits.len())
}
