use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::loss::target_batch;
use super::network::{cross_entropy_mean, Network};
use super::optim::{OptimizerConfig, OptimizerState};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use crate::seed::derive_seed;

/// Inference batch size used by [`predict`] and [`evaluate_loss`].
const EVAL_BATCH: usize = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub max_epochs: usize,
    pub patience: usize,
    pub restore_best: bool,
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
    pub label_smoothing: f64,
    pub optimizer: OptimizerConfig,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.max_epochs == 0 || self.patience == 0 || self.batch_size == 0 {
            return Err(Error::Config(
                "max_epochs, patience and batch_size must be at least 1".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config(format!(
                "label_smoothing {} outside [0,1)",
                self.label_smoothing
            )));
        }
        if !(self.optimizer.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// Samples for a network with one or more input streams. Each stream is
/// stored as concatenated per-sample blocks.
#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSet {
    input_shapes: Vec<Vec<usize>>,
    inputs: Vec<Vec<f64>>,
    labels: Vec<usize>,
    classes: usize,
}

impl LabeledSet {
    pub fn new(input_shapes: Vec<Vec<usize>>, classes: usize) -> Self {
        let inputs = vec![Vec::new(); input_shapes.len()];
        LabeledSet {
            input_shapes,
            inputs,
            labels: Vec::new(),
            classes,
        }
    }

    pub fn push(&mut self, streams: &[&[f64]], label: usize) -> Result<()> {
        if streams.len() != self.input_shapes.len() {
            return Err(Error::Shape(format!(
                "sample has {} streams, set expects {}",
                streams.len(),
                self.input_shapes.len()
            )));
        }
        if label >= self.classes {
            return Err(Error::Range(format!("label {label} out of {} classes", self.classes)));
        }
        for (s, shape) in streams.iter().zip(&self.input_shapes) {
            if s.len() != shape.iter().product::<usize>() {
                return Err(Error::Shape(format!(
                    "stream of length {} does not match {shape:?}",
                    s.len()
                )));
            }
        }
        for (buf, s) in self.inputs.iter_mut().zip(streams) {
            buf.extend_from_slice(s);
        }
        self.labels.push(label);
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn input_shapes(&self) -> &[Vec<usize>] {
        &self.input_shapes
    }

    pub fn sample(&self, index: usize, stream: usize) -> &[f64] {
        let n: usize = self.input_shapes[stream].iter().product();
        &self.inputs[stream][index * n..(index + 1) * n]
    }

    /// One batch tensor per stream for the given sample indices.
    pub fn batch(&self, indices: &[usize]) -> Vec<Tensor> {
        (0..self.input_shapes.len())
            .map(|s| {
                let rows: Vec<&[f64]> = indices.iter().map(|&i| self.sample(i, s)).collect();
                Tensor::stack(&rows, &self.input_shapes[s]).expect("samples validated on push")
            })
            .collect()
    }

    pub fn subset(&self, indices: &[usize]) -> LabeledSet {
        let mut out = LabeledSet::new(self.input_shapes.clone(), self.classes);
        for &i in indices {
            for (s, buf) in out.inputs.iter_mut().enumerate() {
                buf.extend_from_slice(self.sample(i, s));
            }
            out.labels.push(self.labels[i]);
        }
        out
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

/// Patience counter on a validation loss that must strictly decrease.
#[derive(Clone, Debug)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    wait: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping {
            patience,
            best: f64::INFINITY,
            best_epoch: 0,
            wait: 0,
        }
    }

    /// Records the loss of 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, loss: f64) -> StopDecision {
        if loss < self.best {
            self.best = loss;
            self.best_epoch = epoch;
            self.wait = 0;
            StopDecision {
                improved: true,
                stop: false,
            }
        } else {
            self.wait += 1;
            StopDecision {
                improved: false,
                stop: self.wait >= self.patience,
            }
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn best_loss(&self) -> f64 {
        self.best
    }
}

fn check_set(network: &Network, set: &LabeledSet, what: &str) -> Result<()> {
    if set.is_empty() {
        return Err(Error::Data(format!("{what} split is empty")));
    }
    if set.input_shapes() != network.input_shapes().as_slice() {
        return Err(Error::Shape(format!(
            "{what} split shapes {:?} do not match network inputs {:?}",
            set.input_shapes(),
            network.input_shapes()
        )));
    }
    if network.output_shape() != [set.classes()] {
        return Err(Error::Shape(format!(
            "network output {:?} does not match {} classes",
            network.output_shape(),
            set.classes()
        )));
    }
    Ok(())
}

/// Trains with mini-batches and early stopping on the validation loss.
pub fn fit(network: &mut Network, train: &LabeledSet, val: &LabeledSet, cfg: &TrainConfig) -> Result<History> {
    check_set(network, val, "validation")?;
    let smoothing = cfg.label_smoothing;
    fit_with_monitor(network, train, cfg, |_, net| evaluate_loss(net, val, smoothing))
}

/// [`fit`] with the per-epoch validation loss supplied by `monitor`.
pub fn fit_with_monitor<F>(network: &mut Network, train: &LabeledSet, cfg: &TrainConfig, mut monitor: F) -> Result<History>
where
    F: FnMut(usize, &Network) -> Result<f64>,
{
    cfg.validate()?;
    check_set(network, train, "training")?;
    let mut optimizer = OptimizerState::new(cfg.optimizer);
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = None;
    let mut epochs = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 1..=cfg.max_epochs {
        let epoch_seed = derive_seed(cfg.seed, epoch as u64);
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(epoch_seed));
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let inputs = train.batch(idx);
            let labels: Vec<usize> = idx.iter().map(|&i| train.labels()[i]).collect();
            let targets = target_batch(&labels, train.classes(), cfg.label_smoothing)?;
            network.forward_train(&inputs, derive_seed(epoch_seed, b as u64 + 1))?;
            total += network.backward_cross_entropy(&targets)? * idx.len() as f64;
            optimizer.step(&mut network.params_mut())?;
        }
        let val_loss = monitor(epoch, network)?;
        epochs.push(EpochRecord {
            epoch,
            train_loss: total / train.len() as f64,
            val_loss,
        });
        let decision = stopper.observe(epoch, val_loss);
        if decision.improved && cfg.restore_best {
            best = Some(network.snapshot());
        }
        if decision.stop {
            stopped_early = epoch < cfg.max_epochs;
            break;
        }
    }
    if let Some(snapshot) = best {
        network.restore(&snapshot)?;
    }
    Ok(History {
        epochs,
        best_epoch: stopper.best_epoch(),
        best_val_loss: stopper.best_loss(),
        stopped_early,
    })
}

/// Softmax outputs for every sample, in order.
pub fn predict(network: &Network, set: &LabeledSet) -> Result<Vec<Vec<f64>>> {
    let k = network.output_shape().iter().product::<usize>();
    let mut out = Vec::with_capacity(set.len());
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let y = network.forward(&set.batch(idx))?;
        out.extend(y.data().chunks_exact(k).map(|r| r.to_vec()));
    }
    Ok(out)
}

/// Mean smoothed cross-entropy of the inference-mode network on `set`.
pub fn evaluate_loss(network: &Network, set: &LabeledSet, smoothing: f64) -> Result<f64> {
    let mut total = 0.0;
    let all: Vec<usize> = (0..set.len()).collect();
    for idx in all.chunks(EVAL_BATCH) {
        let y = network.forward(&set.batch(idx))?;
        let labels: Vec<usize> = idx.iter().map(|&i| set.labels()[i]).collect();
        let t = target_batch(&labels, set.classes(), smoothing)?;
        total += cross_entropy_mean(&y, &t) * idx.len() as f64;
    }
    Ok(total / set.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stops_thirty_epochs_after_best() {
        let mut es = EarlyStopping::new(30);
        let mut stopped = None;
        for epoch in 1..=100 {
            let loss = if epoch <= 7 { 10.0 - epoch as f64 } else { 3.0 };
            if es.observe(epoch, loss).stop {
                stopped = Some(epoch);
                break;
            }
        }
        assert_eq!(stopped, Some(37));
        assert_eq!(es.best_epoch(), 7);
    }

    #[test]
    fn push_validates_shapes_and_labels() {
        let mut set = LabeledSet::new(vec![vec![2]], 3);
        assert!(set.push(&[&[1.0, 2.0]], 1).is_ok());
        assert!(matches!(set.push(&[&[1.0]], 1), Err(Error::Shape(_))));
        assert!(matches!(set.push(&[&[1.0, 2.0]], 3), Err(Error::Range(_))));
        assert_eq!(set.batch(&[0, 0])[0].shape(), &[2, 2]);
    }
}
