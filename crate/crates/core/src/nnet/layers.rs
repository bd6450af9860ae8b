use serde::{Deserialize, Serialize};

use super::constants::{BATCHNORM_EPSILON, BATCHNORM_MOMENTUM, DROPOUT_RATE};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Padding {
    Same,
    Valid,
}

/// One layer of a network graph. Shapes exclude the batch axis and are
/// channels-last: `(T, C)` for sequences and `(H, W, C)` for images.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Input {
        shape: Vec<usize>,
    },
    #[serde(rename = "conv1d")]
    Conv1D {
        filters: usize,
        kernel: usize,
        padding: Padding,
    },
    #[serde(rename = "conv2d")]
    Conv2D {
        filters: usize,
        kernel: [usize; 2],
        padding: Padding,
    },
    #[serde(rename = "max_pool1d")]
    MaxPool1D {
        pool: usize,
        stride: usize,
        padding: Padding,
    },
    #[serde(rename = "max_pool2d")]
    MaxPool2D {
        pool: [usize; 2],
        stride: [usize; 2],
    },
    BatchNorm {
        momentum: f64,
        epsilon: f64,
    },
    Dropout {
        rate: f64,
    },
    Dense {
        units: usize,
    },
    #[serde(rename = "relu")]
    ReLU,
    Flatten,
    Softmax,
    Concat,
}

impl LayerSpec {
    pub fn conv1d(filters: usize, kernel: usize) -> Self {
        LayerSpec::Conv1D {
            filters,
            kernel,
            padding: Padding::Same,
        }
    }

    pub fn conv2d(filters: usize, kernel: [usize; 2], padding: Padding) -> Self {
        LayerSpec::Conv2D {
            filters,
            kernel,
            padding,
        }
    }

    /// Non-overlapping pooling by `factor`.
    pub fn max_pool1d(factor: usize) -> Self {
        LayerSpec::MaxPool1D {
            pool: factor,
            stride: factor,
            padding: Padding::Valid,
        }
    }

    pub fn batch_norm() -> Self {
        LayerSpec::BatchNorm {
            momentum: BATCHNORM_MOMENTUM,
            epsilon: BATCHNORM_EPSILON,
        }
    }

    pub fn dropout() -> Self {
        LayerSpec::Dropout { rate: DROPOUT_RATE }
    }

    pub fn dense(units: usize) -> Self {
        LayerSpec::Dense { units }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerSpec::Input { .. } => "input",
            LayerSpec::Conv1D { .. } => "conv1d",
            LayerSpec::Conv2D { .. } => "conv2d",
            LayerSpec::MaxPool1D { .. } => "max_pool1d",
            LayerSpec::MaxPool2D { .. } => "max_pool2d",
            LayerSpec::BatchNorm { .. } => "batch_norm",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::ReLU => "relu",
            LayerSpec::Flatten => "flatten",
            LayerSpec::Softmax => "softmax",
            LayerSpec::Concat => "concat",
        }
    }

    /// Checks hyperparameter ranges.
    pub fn validate(&self) -> Result<()> {
        let positive = |name: &str, v: usize| {
            if v == 0 {
                Err(Error::Config(format!("{} {name} must be positive", self.kind_name())))
            } else {
                Ok(())
            }
        };
        match self {
            LayerSpec::Input { shape } => {
                if shape.is_empty() || shape.contains(&0) {
                    return Err(Error::Config(format!("input shape {shape:?} must be non-empty and positive")));
                }
            }
            LayerSpec::Conv1D { filters, kernel, .. } => {
                positive("filters", *filters)?;
                positive("kernel", *kernel)?;
            }
            LayerSpec::Conv2D { filters, kernel, .. } => {
                positive("filters", *filters)?;
                positive("kernel", kernel[0])?;
                positive("kernel", kernel[1])?;
            }
            LayerSpec::MaxPool1D { pool, stride, .. } => {
                positive("pool", *pool)?;
                positive("stride", *stride)?;
            }
            LayerSpec::MaxPool2D { pool, stride } => {
                for v in pool.iter().chain(stride) {
                    positive("pool/stride", *v)?;
                }
            }
            LayerSpec::BatchNorm { momentum, epsilon } => {
                if !(0.0..1.0).contains(momentum) || *epsilon <= 0.0 {
                    return Err(Error::Config(format!(
                        "batch_norm needs momentum in [0,1) and epsilon > 0, got {momentum}, {epsilon}"
                    )));
                }
            }
            LayerSpec::Dropout { rate } => {
                if !(0.0..1.0).contains(rate) {
                    return Err(Error::Config(format!("dropout rate {rate} outside [0,1)")));
                }
            }
            LayerSpec::Dense { units } => positive("units", *units)?,
            LayerSpec::ReLU | LayerSpec::Flatten | LayerSpec::Softmax | LayerSpec::Concat => {}
        }
        Ok(())
    }

    /// Output sample shape for the given input sample shapes.
    pub fn output_shape(&self, inputs: &[&[usize]]) -> Result<Vec<usize>> {
        let arity_err = |n: usize| {
            Error::Shape(format!(
                "{} expects {n} input(s), got {}",
                self.kind_name(),
                inputs.len()
            ))
        };
        match self {
            LayerSpec::Input { shape } => {
                if !inputs.is_empty() {
                    return Err(arity_err(0));
                }
                Ok(shape.clone())
            }
            LayerSpec::Concat => {
                let first = inputs.first().ok_or_else(|| arity_err(1))?;
                let rank = first.len();
                let mut last = 0;
                for s in inputs {
                    if s.len() != rank || s[..rank - 1] != first[..rank - 1] {
                        return Err(Error::Shape(format!(
                            "concat inputs {inputs:?} differ outside the last axis"
                        )));
                    }
                    last += s[rank - 1];
                }
                let mut out = first.to_vec();
                out[rank - 1] = last;
                Ok(out)
            }
            _ => {
                if inputs.len() != 1 {
                    return Err(arity_err(1));
                }
                self.single_output_shape(inputs[0])
            }
        }
    }

    fn single_output_shape(&self, x: &[usize]) -> Result<Vec<usize>> {
        let rank_err = |want: usize| {
            Error::Shape(format!(
                "{} expects a rank-{want} sample, got {x:?}",
                self.kind_name()
            ))
        };
        match self {
            LayerSpec::Conv1D { filters, kernel, padding } => {
                let [t, _] = x else { return Err(rank_err(2)) };
                match padding {
                    Padding::Same => Ok(vec![*t, *filters]),
                    Padding::Valid if kernel <= t => Ok(vec![t + 1 - kernel, *filters]),
                    Padding::Valid => Err(Error::Shape(format!("kernel {kernel} longer than input {t}"))),
                }
            }
            LayerSpec::Conv2D { filters, kernel, padding } => {
                let [h, w, _] = x else { return Err(rank_err(3)) };
                match padding {
                    Padding::Same => Ok(vec![*h, *w, *filters]),
                    Padding::Valid if kernel[0] <= *h && kernel[1] <= *w => {
                        Ok(vec![h + 1 - kernel[0], w + 1 - kernel[1], *filters])
                    }
                    Padding::Valid => Err(Error::Shape(format!("kernel {kernel:?} larger than input {x:?}"))),
                }
            }
            LayerSpec::MaxPool1D { pool, stride, padding } => {
                let [t, c] = x else { return Err(rank_err(2)) };
                match padding {
                    Padding::Same => Ok(vec![t.div_ceil(*stride), *c]),
                    Padding::Valid => {
                        if pool > t || (t - pool) % stride != 0 {
                            return Err(Error::Shape(format!(
                                "pool {pool} with stride {stride} does not tile length {t}"
                            )));
                        }
                        Ok(vec![(t - pool) / stride + 1, *c])
                    }
                }
            }
            LayerSpec::MaxPool2D { pool, stride } => {
                let [h, w, c] = x else { return Err(rank_err(3)) };
                if pool[0] > *h || pool[1] > *w {
                    return Err(Error::Shape(format!("pool {pool:?} larger than input {x:?}")));
                }
                Ok(vec![(h - pool[0]) / stride[0] + 1, (w - pool[1]) / stride[1] + 1, *c])
            }
            LayerSpec::Dense { units } => {
                let [_] = x else { return Err(rank_err(1)) };
                Ok(vec![*units])
            }
            LayerSpec::Flatten => Ok(vec![x.iter().product()]),
            LayerSpec::BatchNorm { .. } | LayerSpec::Dropout { .. } | LayerSpec::ReLU | LayerSpec::Softmax => {
                Ok(x.to_vec())
            }
            LayerSpec::Input { .. } | LayerSpec::Concat => unreachable!("handled by output_shape"),
        }
    }

    /// Shapes of the trainable tensors for an input of shape `x`.
    pub fn param_shapes(&self, x: &[usize]) -> Vec<Vec<usize>> {
        let channels = x.last().copied().unwrap_or(0);
        match self {
            LayerSpec::Conv1D { filters, kernel, .. } => {
                vec![vec![*kernel, channels, *filters], vec![*filters]]
            }
            LayerSpec::Conv2D { filters, kernel, .. } => {
                vec![vec![kernel[0], kernel[1], channels, *filters], vec![*filters]]
            }
            LayerSpec::BatchNorm { .. } => vec![vec![channels], vec![channels]],
            LayerSpec::Dense { units } => vec![vec![channels, *units], vec![*units]],
            _ => Vec::new(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pool_factor_ten_shape_ledger() {
        let pool = LayerSpec::max_pool1d(10);
        assert_eq!(pool.output_shape(&[&[400, 40]]).unwrap(), vec![40, 40]);
        assert_eq!(pool.output_shape(&[&[40, 40]]).unwrap(), vec![4, 40]);
        assert!(matches!(pool.output_shape(&[&[45, 40]]), Err(Error::Shape(_))));
    }

    #[test]
    fn conv_param_shapes() {
        let conv = LayerSpec::conv1d(40, 10);
        let shapes = conv.param_shapes(&[400, 4]);
        let count: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(count, 1640);
        let dense = LayerSpec::dense(3);
        let count: usize = dense.param_shapes(&[2]).iter().map(|s| s.iter().product::<usize>()).sum();
        assert_eq!(count, 9);
    }

    #[test]
    fn concat_joins_last_axis() {
        let out = LayerSpec::Concat.output_shape(&[&[400, 4], &[400, 3]]).unwrap();
        assert_eq!(out, vec![400, 7]);
        assert!(LayerSpec::Concat.output_shape(&[&[400, 4], &[300, 3]]).is_err());
    }

    #[test]
    fn validation_rejects_bad_hyperparameters() {
        assert!(LayerSpec::Dropout { rate: 1.0 }.validate().is_err());
        assert!(LayerSpec::dense(0).validate().is_err());
        assert!(LayerSpec::dropout().validate().is_ok());
    }

    #[test]
    fn serde_tags_are_stable() {
        let json = serde_json::to_string(&LayerSpec::conv1d(40, 10)).unwrap();
        assert_eq!(json, r#"{"kind":"conv1d","filters":40,"kernel":10,"padding":"same"}"#);
        let back: LayerSpec = serde_json::from_str(&json).unwrap();
        assert_eq!(back, LayerSpec::conv1d(40, 10));
        assert_eq!(serde_json::to_string(&LayerSpec::ReLU).unwrap(), r#"{"kind":"relu"}"#);
    }
}
