//! Network builders: the 1-D sensor nets, the 2-D MFCC net, the ensemble
//! head and the inception-based hybrid net.

use serde::{Deserialize, Serialize};

use crate::domain::{ConfidenceVector, SensorModality};
use crate::dsp::MODEL_STEPS;
use crate::error::{Error, Result};
use crate::nnet::constants::{DEFAULT_PATIENCE, HYBRID_MAX_EPOCHS, LATE_FUSION_MAX_EPOCHS};
use crate::nnet::{
    LayerSpec, Network, NetworkSpec, OptimizerConfig, OptimizerRule, Padding, SpecBuilder, Tensor, TrainConfig,
};

/// Filters in every 1-D convolution of the sensor and hybrid tails.
pub const CONV_FILTERS: usize = 40;
pub const CONV_KERNEL: usize = 10;
pub const POOL_FACTOR: usize = 10;
pub const HIDDEN_UNITS: usize = 100;
pub const ENSEMBLE_HIDDEN: usize = 20;
/// MFCC tensor fed to the audio net: 39 coefficients × 51 frames × 2 channels.
pub const AMMG_INPUT: [usize; 3] = [39, 51, 2];
pub const AMMG_FILTERS: [usize; 3] = [64, 32, 16];
pub const AMMG_KERNEL: usize = 7;

pub const LATE_FUSION_LEARNING_RATE: f64 = 0.03;
pub const ENSEMBLE_LEARNING_RATE: f64 = 0.01;
pub const HYBRID_LEARNING_RATE: f64 = 0.09;
pub const HYBRID_LABEL_SMOOTHING: f64 = 0.1;
pub const DEFAULT_BATCH_SIZE: usize = 32;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelKind {
    MmgNet { channels: usize },
    AmmgNet,
    EnsembleHead,
    HybridNet,
}

impl ModelKind {
    /// The late-fusion base net for a sensor stream.
    pub fn for_modality(modality: SensorModality) -> Self {
        match modality {
            SensorModality::Audio => ModelKind::AmmgNet,
            m => ModelKind::MmgNet {
                channels: m.channel_count(),
            },
        }
    }

    /// Optimizer, epochs and smoothing used for this kind unless overridden.
    pub fn default_train_config(self, seed: u64) -> TrainConfig {
        let (rule, lr, epochs, smoothing) = match self {
            ModelKind::MmgNet { .. } | ModelKind::AmmgNet => {
                (OptimizerRule::Adagrad, LATE_FUSION_LEARNING_RATE, LATE_FUSION_MAX_EPOCHS, 0.0)
            }
            ModelKind::EnsembleHead => (OptimizerRule::Adam, ENSEMBLE_LEARNING_RATE, LATE_FUSION_MAX_EPOCHS, 0.0),
            ModelKind::HybridNet => (
                OptimizerRule::AdaDelta,
                HYBRID_LEARNING_RATE,
                HYBRID_MAX_EPOCHS,
                HYBRID_LABEL_SMOOTHING,
            ),
        };
        TrainConfig {
            max_epochs: epochs,
            patience: DEFAULT_PATIENCE,
            restore_best: true,
            batch_size: DEFAULT_BATCH_SIZE,
            seed,
            label_smoothing: smoothing,
            optimizer: OptimizerConfig::new(rule, lr),
        }
    }
}

fn conv_block(filters: usize, kernel: usize) -> [LayerSpec; 4] {
    [
        LayerSpec::conv1d(filters, kernel),
        LayerSpec::batch_norm(),
        LayerSpec::ReLU,
        LayerSpec::dropout(),
    ]
}

/// Three convolution stages over `(400, channels)` with two pools by ten,
/// flattened to 160, then a 100-unit hidden layer and the softmax head.
pub fn build_mmg_spec(channels: usize, classes: usize) -> Result<NetworkSpec> {
    if !(3..=4).contains(&channels) {
        return Err(Error::Config(format!("sensor net takes 3 or 4 channels, got {channels}")));
    }
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut layers = Vec::new();
    layers.extend(conv_block(CONV_FILTERS, CONV_KERNEL));
    layers.push(LayerSpec::max_pool1d(POOL_FACTOR));
    layers.extend(conv_block(CONV_FILTERS, CONV_KERNEL));
    layers.push(LayerSpec::max_pool1d(POOL_FACTOR));
    layers.extend(conv_block(CONV_FILTERS, CONV_KERNEL));
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(HIDDEN_UNITS),
        LayerSpec::ReLU,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]);
    Ok(NetworkSpec::sequential(&[MODEL_STEPS, channels], layers))
}

pub fn build_mmg_net(channels: usize, classes: usize, seed: u64) -> Result<Network> {
    Network::new(build_mmg_spec(channels, classes)?, seed)
}

/// 2-D net over the `(39, 51, 2)` MFCC tensor. The first convolution keeps
/// its size; the two after the 2×2 pool are unpadded, which shrinks the
/// flattened width to 7·13·16 = 1456.
pub fn build_ammg_spec(classes: usize) -> Result<NetworkSpec> {
    build_ammg_spec_for(&AMMG_INPUT, classes)
}

/// [`build_ammg_spec`] for another input size (at least 30 × 30 frames).
pub fn build_ammg_spec_for(input: &[usize; 3], classes: usize) -> Result<NetworkSpec> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let k = [AMMG_KERNEL, AMMG_KERNEL];
    let block = |filters, padding| [LayerSpec::conv2d(filters, k, padding), LayerSpec::batch_norm(), LayerSpec::ReLU, LayerSpec::dropout()];
    let mut layers = Vec::new();
    layers.extend(block(AMMG_FILTERS[0], Padding::Same));
    layers.push(LayerSpec::MaxPool2D {
        pool: [2, 2],
        stride: [2, 2],
    });
    layers.extend(block(AMMG_FILTERS[1], Padding::Valid));
    layers.extend(block(AMMG_FILTERS[2], Padding::Valid));
    layers.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(HIDDEN_UNITS),
        LayerSpec::ReLU,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]);
    let spec = NetworkSpec::sequential(input, layers);
    // surface shape errors (input too small) at build time
    Network::new(spec.clone(), 0).map_err(|e| Error::Config(format!("audio net does not fit {input:?}: {e}")))?;
    Ok(spec)
}

pub fn build_ammg_net(classes: usize, seed: u64) -> Result<Network> {
    Network::new(build_ammg_spec(classes)?, seed)
}

/// Concatenates the four base-model confidence vectors and maps them
/// through a 20-unit ReLU layer to a softmax over `classes`.
pub fn build_ensemble_spec(models: usize, classes: usize) -> NetworkSpec {
    let mut b = SpecBuilder::new();
    let inputs: Vec<String> = (0..models).map(|i| b.input(&format!("confidence_{i}"), &[classes])).collect();
    let refs: Vec<&str> = inputs.iter().map(|s| s.as_str()).collect();
    let joined = b.named("concat", LayerSpec::Concat, &refs);
    let out = b.chain(
        &joined,
        [
            LayerSpec::dense(ENSEMBLE_HIDDEN),
            LayerSpec::ReLU,
            LayerSpec::dense(classes),
            LayerSpec::Softmax,
        ],
    );
    b.finish(&out)
}

pub fn build_ensemble_head(models: usize, classes: usize, seed: u64) -> Result<Network> {
    Network::new(build_ensemble_spec(models, classes), seed)
}

/// Branch widths of a dimension-reducing inception block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InceptionBlockSpec {
    /// 1-wide convolution branch.
    pub f1: usize,
    /// Reduction before the 3-wide convolution.
    pub r3: usize,
    pub f3: usize,
    /// Reduction before the 5-wide convolution.
    pub r5: usize,
    pub f5: usize,
    /// 1-wide convolution after the 3-wide max-pool.
    pub fp: usize,
}

impl Default for InceptionBlockSpec {
    /// Shipped widths; with four modality blocks the hybrid net has 944,754
    /// trainable parameters.
    fn default() -> Self {
        InceptionBlockSpec {
            f1: 96,
            r3: 128,
            f3: 160,
            r5: 32,
            f5: 64,
            fp: 64,
        }
    }
}

impl InceptionBlockSpec {
    /// Narrow widths for quick experiments on a single core.
    pub fn compact() -> Self {
        InceptionBlockSpec {
            f1: 8,
            r3: 8,
            f3: 8,
            r5: 4,
            f5: 8,
            fp: 8,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if [self.f1, self.r3, self.f3, self.r5, self.f5, self.fp].contains(&0) {
            return Err(Error::Config(format!("inception widths must be positive: {self:?}")));
        }
        Ok(())
    }

    pub fn out_channels(&self) -> usize {
        self.f1 + self.f3 + self.f5 + self.fp
    }

    /// Trainable parameters for `in_channels` inputs: each convolution has
    /// weights and bias and is followed by a batch norm (scale and shift).
    pub fn parameter_count(&self, in_channels: usize) -> usize {
        let conv = |k: usize, c: usize, f: usize| k * c * f + f + 2 * f;
        conv(1, in_channels, self.f1)
            + conv(1, in_channels, self.r3)
            + conv(3, self.r3, self.f3)
            + conv(1, in_channels, self.r5)
            + conv(5, self.r5, self.f5)
            + conv(1, in_channels, self.fp)
    }
}

fn named_conv(b: &mut SpecBuilder, prefix: &str, branch: &str, from: &str, filters: usize, kernel: usize) -> String {
    let c = b.named(&format!("{prefix}/{branch}_conv"), LayerSpec::conv1d(filters, kernel), &[from]);
    let n = b.named(&format!("{prefix}/{branch}_bn"), LayerSpec::batch_norm(), &[&c]);
    b.named(&format!("{prefix}/{branch}_relu"), LayerSpec::ReLU, &[&n])
}

/// Appends an inception block reading `input` and returns its concat node.
pub fn add_inception_block(b: &mut SpecBuilder, prefix: &str, input: &str, spec: &InceptionBlockSpec) -> Result<String> {
    spec.validate()?;
    let b1 = named_conv(b, prefix, "b1", input, spec.f1, 1);
    let r3 = named_conv(b, prefix, "b3_reduce", input, spec.r3, 1);
    let b3 = named_conv(b, prefix, "b3", &r3, spec.f3, 3);
    let r5 = named_conv(b, prefix, "b5_reduce", input, spec.r5, 1);
    let b5 = named_conv(b, prefix, "b5", &r5, spec.f5, 5);
    let pool = b.named(
        &format!("{prefix}/pool"),
        LayerSpec::MaxPool1D {
            pool: 3,
            stride: 1,
            padding: Padding::Same,
        },
        &[input],
    );
    let bp = named_conv(b, prefix, "pool_proj", &pool, spec.fp, 1);
    Ok(b.named(&format!("{prefix}/concat"), LayerSpec::Concat, &[&b1, &b3, &b5, &bp]))
}

/// A single inception block over `(400, in_channels)` as its own network.
pub fn build_inception_block(spec: &InceptionBlockSpec, in_channels: usize, seed: u64) -> Result<Network> {
    let mut b = SpecBuilder::new();
    let x = b.input("input", &[MODEL_STEPS, in_channels]);
    let out = add_inception_block(&mut b, "inception", &x, spec)?;
    Network::new(b.finish(&out), seed)
}

/// Per-modality inception blocks over `(400, {4, 4, 3, 2})`, concatenated and
/// followed by the two-stage convolution tail, 100 hidden units and softmax.
pub fn build_hybrid_spec(blocks: &[InceptionBlockSpec; 4], classes: usize) -> Result<NetworkSpec> {
    if classes < 2 {
        return Err(Error::Config(format!("need at least 2 classes, got {classes}")));
    }
    let mut b = SpecBuilder::new();
    let mut branches = Vec::new();
    for (m, spec) in SensorModality::ALL.iter().zip(blocks) {
        let x = b.input(m.name(), &[MODEL_STEPS, m.channel_count()]);
        branches.push(add_inception_block(&mut b, m.name(), &x, spec)?);
    }
    let refs: Vec<&str> = branches.iter().map(|s| s.as_str()).collect();
    let joined = b.named("fusion_concat", LayerSpec::Concat, &refs);
    let mut tail = Vec::new();
    tail.extend(conv_block(CONV_FILTERS, CONV_KERNEL));
    tail.push(LayerSpec::max_pool1d(POOL_FACTOR));
    tail.extend(conv_block(CONV_FILTERS, CONV_KERNEL));
    tail.push(LayerSpec::max_pool1d(POOL_FACTOR));
    tail.extend([
        LayerSpec::Flatten,
        LayerSpec::dense(HIDDEN_UNITS),
        LayerSpec::ReLU,
        LayerSpec::dense(classes),
        LayerSpec::Softmax,
    ]);
    let out = b.chain(&joined, tail);
    Ok(b.finish(&out))
}

pub fn build_hybrid_net(blocks: &[InceptionBlockSpec; 4], classes: usize, seed: u64) -> Result<Network> {
    Network::new(build_hybrid_spec(blocks, classes)?, seed)
}

/// Inference on one sample given one flat slice per network input.
pub fn predict(network: &Network, inputs: &[&[f64]]) -> Result<ConfidenceVector> {
    let shapes = network.input_shapes();
    if shapes.len() != inputs.len() {
        return Err(Error::Shape(format!(
            "network takes {} inputs, got {}",
            shapes.len(),
            inputs.len()
        )));
    }
    let tensors = inputs
        .iter()
        .zip(&shapes)
        .map(|(x, s)| Tensor::stack(&[x], s))
        .collect::<Result<Vec<_>>>()?;
    let y = network.forward(&tensors)?;
    ConfidenceVector::new(y.into_data())
}

/// Metadata written beside every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelCard {
    pub kind: ModelKind,
    pub modality: Option<SensorModality>,
    pub input_shapes: Vec<Vec<usize>>,
    pub class_names: Vec<String>,
    pub parameter_count: usize,
    pub train_config: TrainConfig,
    pub best_epoch: usize,
    pub epochs_run: usize,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mmg_shapes_and_first_conv_params() {
        let net = build_mmg_net(3, 9, 0).unwrap();
        let summary = net.summary();
        let flatten = summary.iter().find(|s| s.1 == "flatten").unwrap();
        assert_eq!(flatten.2, vec![160]);
        assert_eq!(summary[1].3, 1240);
        assert_eq!(net.output_shape(), &[9]);
        assert!(matches!(build_mmg_spec(5, 9), Err(Error::Config(_))));
    }

    #[test]
    fn ammg_pool_shape() {
        let net = build_ammg_net(9, 0).unwrap();
        let pool = net.summary().into_iter().find(|s| s.1 == "max_pool2d").unwrap();
        assert_eq!(pool.2, vec![19, 25, 64]);
        assert_eq!(net.input_shapes(), vec![vec![39, 51, 2]]);
    }

    #[test]
    fn ensemble_has_929_parameters() {
        let net = build_ensemble_head(4, 9, 0).unwrap();
        assert_eq!(net.parameter_count(), 929);
    }

    #[test]
    fn inception_block_width_and_count() {
        let spec = InceptionBlockSpec {
            f1: 8,
            r3: 4,
            f3: 8,
            r5: 2,
            f5: 8,
            fp: 8,
        };
        let net = build_inception_block(&spec, 4, 0).unwrap();
        assert_eq!(net.output_shape(), &[400, 32]);
        // b1 4·8+8+16, b3 reduce 4·4+4+8, b3 3·4·8+8+16, b5 reduce 4·2+2+4,
        // b5 5·2·8+8+16, pool proj 4·8+8+16
        let hand = 56 + 28 + 120 + 14 + 104 + 56;
        assert_eq!(net.parameter_count(), hand);
        assert_eq!(spec.parameter_count(4), hand);
    }

    #[test]
    fn hybrid_default_parameter_count() {
        let spec = build_hybrid_spec(&[InceptionBlockSpec::default(); 4], 6).unwrap();
        let net = Network::new(spec, 0).unwrap();
        assert_eq!(net.parameter_count(), 944_754);
        assert_eq!(net.output_shape(), &[6]);
    }
}
