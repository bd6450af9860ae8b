//! Fixed hyperparameters of the engine. Optimizer constants follow the
//! usual Keras defaults.

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPSILON: f64 = 1e-7;

pub const ADAGRAD_EPSILON: f64 = 1e-7;

pub const ADADELTA_RHO: f64 = 0.95;
pub const ADADELTA_EPSILON: f64 = 1e-7;

pub const BATCHNORM_MOMENTUM: f64 = 0.99;
pub const BATCHNORM_EPSILON: f64 = 1e-3;

pub const DROPOUT_RATE: f64 = 0.2;

/// Floor applied to probabilities inside the log of the cross-entropy.
pub const LOG_FLOOR: f64 = 1e-12;

pub const DEFAULT_PATIENCE: usize = 30;
pub const LATE_FUSION_MAX_EPOCHS: usize = 500;
pub const HYBRID_MAX_EPOCHS: usize = 200;
