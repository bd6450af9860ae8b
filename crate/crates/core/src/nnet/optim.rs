use serde::{Deserialize, Serialize};

use super::constants::{
    ADADELTA_EPSILON, ADADELTA_RHO, ADAGRAD_EPSILON, ADAM_BETA1, ADAM_BETA2, ADAM_EPSILON,
};
use super::tensor::Param;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerRule {
    Adagrad,
    Adam,
    #[serde(rename = "adadelta")]
    AdaDelta,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub rule: OptimizerRule,
    pub learning_rate: f64,
}

impl OptimizerConfig {
    pub fn new(rule: OptimizerRule, learning_rate: f64) -> Self {
        OptimizerConfig { rule, learning_rate }
    }
}

/// Per-parameter accumulators of one update rule. Slots are allocated on
/// the first step and start at zero.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    steps: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig) -> Self {
        OptimizerState {
            config,
            steps: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn config(&self) -> OptimizerConfig {
        self.config
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    /// Adagrad's squared-gradient sum, Adam's first moment or AdaDelta's
    /// squared-gradient average for parameter `i`.
    pub fn first_slot(&self, i: usize) -> Option<&[f64]> {
        self.first.get(i).map(|v| v.as_slice())
    }

    /// Adam's second moment or AdaDelta's squared-update average.
    pub fn second_slot(&self, i: usize) -> Option<&[f64]> {
        self.second.get(i).map(|v| v.as_slice())
    }

    /// Applies one update using each parameter's stored gradient.
    pub fn step(&mut self, params: &mut [&mut Param]) -> Result<()> {
        let mut values: Vec<&mut [f64]> = Vec::with_capacity(params.len());
        let mut grads: Vec<&[f64]> = Vec::with_capacity(params.len());
        for p in params.iter_mut() {
            let Param { value, grad } = &mut **p;
            values.push(value.data_mut());
            grads.push(grad.data());
        }
        self.step_raw(&mut values, &grads)
    }

    /// Applies one update to flat parameter/gradient slices.
    pub fn step_raw(&mut self, values: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if values.len() != grads.len() {
            return Err(Error::Shape(format!(
                "{} parameters but {} gradients",
                values.len(),
                grads.len()
            )));
        }
        for (i, (v, g)) in values.iter().zip(grads).enumerate() {
            if v.len() != g.len() {
                return Err(Error::Shape(format!(
                    "parameter {i} has {} values but {} gradients",
                    v.len(),
                    g.len()
                )));
            }
        }
        if self.first.is_empty() {
            self.first = values.iter().map(|v| vec![0.0; v.len()]).collect();
            self.second = values.iter().map(|v| vec![0.0; v.len()]).collect();
        } else if self.first.len() != values.len()
            || self.first.iter().zip(values.iter()).any(|(a, v)| a.len() != v.len())
        {
            return Err(Error::Shape("parameters changed shape between steps".into()));
        }
        self.steps += 1;
        let lr = self.config.learning_rate;
        match self.config.rule {
            OptimizerRule::Adagrad => {
                for ((w, g), acc) in values.iter_mut().zip(grads).zip(&mut self.first) {
                    for ((w, g), a) in w.iter_mut().zip(*g).zip(acc.iter_mut()) {
                        *a += g * g;
                        *w -= lr * g / (*a + ADAGRAD_EPSILON).sqrt();
                    }
                }
            }
            OptimizerRule::Adam => {
                let t = self.steps as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for (((w, g), m), v) in values.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, g), m), v) in w.iter_mut().zip(*g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        let m_hat = *m / c1;
                        let v_hat = *v / c2;
                        *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPSILON);
                    }
                }
            }
            OptimizerRule::AdaDelta => {
                for (((w, g), eg), ed) in values.iter_mut().zip(grads).zip(&mut self.first).zip(&mut self.second) {
                    for (((w, g), eg), ed) in w.iter_mut().zip(*g).zip(eg.iter_mut()).zip(ed.iter_mut()) {
                        *eg = ADADELTA_RHO * *eg + (1.0 - ADADELTA_RHO) * g * g;
                        let delta = -(*ed + ADADELTA_EPSILON).sqrt() / (*eg + ADADELTA_EPSILON).sqrt() * g;
                        *ed = ADADELTA_RHO * *ed + (1.0 - ADADELTA_RHO) * delta * delta;
                        *w += lr * delta;
                    }
                }
            }
        }
        Ok(())
    }
}
