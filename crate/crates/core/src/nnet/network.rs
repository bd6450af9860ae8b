use std::collections::HashMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::constants::LOG_FLOOR;
use super::kernels::{self, BatchNormTrace, ConvGeom, PoolGeom};
use super::layers::{LayerSpec, Padding};
use super::tensor::{Param, Tensor};
use crate::error::{Error, Result};

/// A named node of the graph and the names of the nodes it reads.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub name: String,
    pub layer: LayerSpec,
    #[serde(default)]
    pub inputs: Vec<String>,
}

/// Directed acyclic layer graph in topological order. Network inputs are the
/// `Input` nodes in the order they appear.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub nodes: Vec<NodeSpec>,
    pub output: String,
}

impl NetworkSpec {
    /// A single chain of layers behind one input.
    pub fn sequential(input_shape: &[usize], layers: impl IntoIterator<Item = LayerSpec>) -> Self {
        let mut b = SpecBuilder::new();
        let x = b.input("input", input_shape);
        let out = b.chain(&x, layers);
        b.finish(&out)
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.nodes
            .iter()
            .filter_map(|n| match &n.layer {
                LayerSpec::Input { shape } => Some(shape.clone()),
                _ => None,
            })
            .collect()
    }
}

/// Incrementally assembles a [`NetworkSpec`], naming nodes `kind_index`
/// unless a name is given.
#[derive(Clone, Debug, Default)]
pub struct SpecBuilder {
    nodes: Vec<NodeSpec>,
}

impl SpecBuilder {
    pub fn new() -> Self {
        SpecBuilder::default()
    }

    pub fn input(&mut self, name: &str, shape: &[usize]) -> String {
        self.named(name, LayerSpec::Input { shape: shape.to_vec() }, &[])
    }

    pub fn layer(&mut self, layer: LayerSpec, inputs: &[&str]) -> String {
        let name = format!("{}_{}", layer.kind_name(), self.nodes.len());
        self.named(&name, layer, inputs)
    }

    pub fn named(&mut self, name: &str, layer: LayerSpec, inputs: &[&str]) -> String {
        self.nodes.push(NodeSpec {
            name: name.to_string(),
            layer,
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        });
        name.to_string()
    }

    /// Appends `layers` one after another starting at `from`; returns the last name.
    pub fn chain(&mut self, from: &str, layers: impl IntoIterator<Item = LayerSpec>) -> String {
        let mut last = from.to_string();
        for layer in layers {
            last = self.layer(layer, &[&last]);
        }
        last
    }

    pub fn finish(self, output: &str) -> NetworkSpec {
        NetworkSpec {
            nodes: self.nodes,
            output: output.to_string(),
        }
    }
}

#[derive(Clone, Debug)]
enum NodeKind {
    Stateless,
    Conv {
        geom: ConvGeom,
        kernel: Param,
        bias: Param,
    },
    Pool {
        geom: PoolGeom,
    },
    BatchNorm {
        gamma: Param,
        beta: Param,
        mean: Vec<f64>,
        var: Vec<f64>,
        momentum: f64,
        epsilon: f64,
    },
    Dense {
        weight: Param,
        bias: Param,
    },
}

#[derive(Clone, Debug)]
struct Node {
    name: String,
    layer: LayerSpec,
    inputs: Vec<usize>,
    in_shapes: Vec<Vec<usize>>,
    out_shape: Vec<usize>,
    kind: NodeKind,
}

#[derive(Clone, Debug)]
enum Aux {
    None,
    Pool(Vec<u32>),
    BatchNorm(BatchNormTrace),
    Dropout(Vec<f64>),
}

#[derive(Clone, Debug)]
struct Trace {
    outputs: Vec<Tensor>,
    aux: Vec<Aux>,
}

/// A built network: parameters, batch-norm running statistics and the
/// record of the last training-mode forward pass.
#[derive(Clone, Debug)]
pub struct Network {
    spec: NetworkSpec,
    nodes: Vec<Node>,
    inputs: Vec<usize>,
    output: usize,
    trace: Option<Trace>,
    track_input_grads: bool,
    input_grads: Vec<Tensor>,
}

fn glorot(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-limit..limit)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape product matches")
}

impl Network {
    /// Resolves the graph, infers shapes and draws Glorot-uniform weights
    /// (zero biases, unit batch-norm scale) from `seed`.
    pub fn new(spec: NetworkSpec, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut index: HashMap<&str, usize> = HashMap::new();
        let mut nodes: Vec<Node> = Vec::with_capacity(spec.nodes.len());
        let mut inputs = Vec::new();
        for (i, ns) in spec.nodes.iter().enumerate() {
            ns.layer.validate()?;
            if index.insert(ns.name.as_str(), i).is_some() {
                return Err(Error::Config(format!("duplicate node name {:?}", ns.name)));
            }
            let mut ins = Vec::with_capacity(ns.inputs.len());
            for name in &ns.inputs {
                match index.get(name.as_str()) {
                    Some(&j) if j < i => ins.push(j),
                    _ => {
                        return Err(Error::Config(format!(
                            "node {:?} reads {name:?}, which is not an earlier node",
                            ns.name
                        )))
                    }
                }
            }
            let in_shapes: Vec<Vec<usize>> = ins.iter().map(|&j| nodes[j].out_shape.clone()).collect();
            let refs: Vec<&[usize]> = in_shapes.iter().map(|s| s.as_slice()).collect();
            let out_shape = ns.layer.output_shape(&refs)?;
            let kind = Self::init_kind(&ns.layer, &in_shapes, &mut rng);
            if matches!(ns.layer, LayerSpec::Input { .. }) {
                inputs.push(i);
            }
            nodes.push(Node {
                name: ns.name.clone(),
                layer: ns.layer.clone(),
                inputs: ins,
                in_shapes,
                out_shape,
                kind,
            });
        }
        let output = *index
            .get(spec.output.as_str())
            .ok_or_else(|| Error::Config(format!("output node {:?} not found", spec.output)))?;
        if inputs.is_empty() {
            return Err(Error::Config("network has no input node".into()));
        }
        Ok(Network {
            spec,
            nodes,
            inputs,
            output,
            trace: None,
            track_input_grads: false,
            input_grads: Vec::new(),
        })
    }

    fn init_kind(layer: &LayerSpec, in_shapes: &[Vec<usize>], rng: &mut ChaCha8Rng) -> NodeKind {
        let x = in_shapes.first().map(|s| s.as_slice()).unwrap_or(&[]);
        let shapes = layer.param_shapes(x);
        match *layer {
            LayerSpec::Conv1D { filters, kernel, padding } => {
                let geom = ConvGeom::new(1, x[0], x[1], 1, kernel, filters, padding == Padding::Same);
                NodeKind::Conv {
                    geom,
                    kernel: Param::new(glorot(rng, &shapes[0], kernel * x[1], kernel * filters)),
                    bias: Param::new(Tensor::zeros(&shapes[1])),
                }
            }
            LayerSpec::Conv2D { filters, kernel, padding } => {
                let geom = ConvGeom::new(x[0], x[1], x[2], kernel[0], kernel[1], filters, padding == Padding::Same);
                let field = kernel[0] * kernel[1];
                NodeKind::Conv {
                    geom,
                    kernel: Param::new(glorot(rng, &shapes[0], field * x[2], field * filters)),
                    bias: Param::new(Tensor::zeros(&shapes[1])),
                }
            }
            LayerSpec::MaxPool1D { pool, stride, padding } => NodeKind::Pool {
                geom: PoolGeom::new(1, x[0], x[1], 1, pool, 1, stride, padding == Padding::Same),
            },
            LayerSpec::MaxPool2D { pool, stride } => NodeKind::Pool {
                geom: PoolGeom::new(x[0], x[1], x[2], pool[0], pool[1], stride[0], stride[1], false),
            },
            LayerSpec::BatchNorm { momentum, epsilon } => {
                let c = *x.last().expect("validated rank");
                NodeKind::BatchNorm {
                    gamma: Param::new(Tensor::full(&[c], 1.0)),
                    beta: Param::new(Tensor::zeros(&[c])),
                    mean: vec![0.0; c],
                    var: vec![1.0; c],
                    momentum,
                    epsilon,
                }
            }
            LayerSpec::Dense { units } => NodeKind::Dense {
                weight: Param::new(glorot(rng, &shapes[0], x[0], units)),
                bias: Param::new(Tensor::zeros(&shapes[1])),
            },
            _ => NodeKind::Stateless,
        }
    }

    pub fn spec(&self) -> &NetworkSpec {
        &self.spec
    }

    pub fn input_shapes(&self) -> Vec<Vec<usize>> {
        self.inputs.iter().map(|&i| self.nodes[i].out_shape.clone()).collect()
    }

    pub fn output_shape(&self) -> &[usize] {
        &self.nodes[self.output].out_shape
    }

    /// `(name, kind, output shape, trainable parameter count)` per node.
    pub fn summary(&self) -> Vec<(String, &'static str, Vec<usize>, usize)> {
        self.nodes
            .iter()
            .map(|n| {
                let count = n.layer.param_shapes(n.in_shapes.first().map(|s| s.as_slice()).unwrap_or(&[]));
                let count = count.iter().map(|s| s.iter().product::<usize>()).sum();
                (n.name.clone(), n.layer.kind_name(), n.out_shape.clone(), count)
            })
            .collect()
    }

    /// Trainable element count; batch-norm running statistics excluded.
    pub fn parameter_count(&self) -> usize {
        self.params().iter().map(|p| p.value.len()).sum()
    }

    pub fn params(&self) -> Vec<&Param> {
        let mut out = Vec::new();
        for n in &self.nodes {
            match &n.kind {
                NodeKind::Conv { kernel, bias, .. } => out.extend([kernel, bias]),
                NodeKind::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                NodeKind::Dense { weight, bias } => out.extend([weight, bias]),
                NodeKind::Stateless | NodeKind::Pool { .. } => {}
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Param> {
        let mut out = Vec::new();
        for n in &mut self.nodes {
            match &mut n.kind {
                NodeKind::Conv { kernel, bias, .. } => out.extend([kernel, bias]),
                NodeKind::BatchNorm { gamma, beta, .. } => out.extend([gamma, beta]),
                NodeKind::Dense { weight, bias } => out.extend([weight, bias]),
                NodeKind::Stateless | NodeKind::Pool { .. } => {}
            }
        }
        out
    }

    /// Every persistent tensor (parameters and running statistics) with a
    /// `node/role` name, in a fixed order.
    pub fn state_tensors(&self) -> Vec<(String, Tensor)> {
        let mut out = Vec::new();
        for n in &self.nodes {
            let name = |role: &str| format!("{}/{role}", n.name);
            match &n.kind {
                NodeKind::Conv { kernel, bias, .. } => {
                    out.push((name("kernel"), kernel.value.clone()));
                    out.push((name("bias"), bias.value.clone()));
                }
                NodeKind::BatchNorm { gamma, beta, mean, var, .. } => {
                    out.push((name("gamma"), gamma.value.clone()));
                    out.push((name("beta"), beta.value.clone()));
                    out.push((name("moving_mean"), Tensor::new(vec![mean.len()], mean.clone()).expect("1-d")));
                    out.push((name("moving_variance"), Tensor::new(vec![var.len()], var.clone()).expect("1-d")));
                }
                NodeKind::Dense { weight, bias } => {
                    out.push((name("weight"), weight.value.clone()));
                    out.push((name("bias"), bias.value.clone()));
                }
                NodeKind::Stateless | NodeKind::Pool { .. } => {}
            }
        }
        out
    }

    fn state_slots(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = Vec::new();
        for n in &mut self.nodes {
            let name = |role: &str| format!("{}/{role}", n.name);
            match &mut n.kind {
                NodeKind::Conv { kernel, bias, .. } => {
                    out.push((name("kernel"), kernel.value.data_mut()));
                    out.push((name("bias"), bias.value.data_mut()));
                }
                NodeKind::BatchNorm { gamma, beta, mean, var, .. } => {
                    out.push((name("gamma"), gamma.value.data_mut()));
                    out.push((name("beta"), beta.value.data_mut()));
                    out.push((name("moving_mean"), mean.as_mut_slice()));
                    out.push((name("moving_variance"), var.as_mut_slice()));
                }
                NodeKind::Dense { weight, bias } => {
                    out.push((name("weight"), weight.value.data_mut()));
                    out.push((name("bias"), bias.value.data_mut()));
                }
                NodeKind::Stateless | NodeKind::Pool { .. } => {}
            }
        }
        out
    }

    /// Overwrites all persistent tensors; names and lengths must match
    /// [`Network::state_tensors`].
    pub fn load_state(&mut self, tensors: &[(String, Tensor)]) -> Result<()> {
        let slots = self.state_slots();
        if slots.len() != tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} state tensors, got {}",
                slots.len(),
                tensors.len()
            )));
        }
        for ((name, slot), (tname, t)) in slots.into_iter().zip(tensors) {
            if &name != tname || slot.len() != t.len() {
                return Err(Error::Shape(format!(
                    "state tensor {tname:?} ({} values) does not fit {name:?} ({} values)",
                    t.len(),
                    slot.len()
                )));
            }
            slot.copy_from_slice(t.data());
        }
        Ok(())
    }

    /// Copy of all persistent values, for restoring the best epoch.
    pub fn snapshot(&self) -> Vec<Vec<f64>> {
        self.state_tensors().into_iter().map(|(_, t)| t.into_data()).collect()
    }

    pub fn restore(&mut self, snapshot: &[Vec<f64>]) -> Result<()> {
        let slots = self.state_slots();
        if slots.len() != snapshot.len() {
            return Err(Error::Shape("snapshot does not match network".into()));
        }
        for ((name, slot), values) in slots.into_iter().zip(snapshot) {
            if slot.len() != values.len() {
                return Err(Error::Shape(format!("snapshot length mismatch at {name}")));
            }
            slot.copy_from_slice(values);
        }
        Ok(())
    }

    /// Also record gradients with respect to the network inputs on backward.
    pub fn set_track_input_grads(&mut self, on: bool) {
        self.track_input_grads = on;
    }

    /// Input gradients from the last backward pass when tracking is on.
    pub fn input_grads(&self) -> &[Tensor] {
        &self.input_grads
    }

    fn check_inputs(&self, inputs: &[Tensor]) -> Result<usize> {
        if inputs.len() != self.inputs.len() {
            return Err(Error::Shape(format!(
                "network takes {} inputs, got {}",
                self.inputs.len(),
                inputs.len()
            )));
        }
        let batch = inputs[0].batch();
        for (t, &i) in inputs.iter().zip(&self.inputs) {
            if t.sample_shape() != self.nodes[i].out_shape.as_slice() || t.batch() != batch {
                return Err(Error::Shape(format!(
                    "input {:?} expects [{batch}] + {:?}, got {:?}",
                    self.nodes[i].name,
                    self.nodes[i].out_shape,
                    t.shape()
                )));
            }
        }
        if batch == 0 {
            return Err(Error::Shape("empty batch".into()));
        }
        Ok(batch)
    }

    fn run(&self, inputs: &[Tensor], train_seed: Option<u64>) -> Result<Trace> {
        let batch = self.check_inputs(inputs)?;
        let mut outputs: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        let mut aux = Vec::with_capacity(self.nodes.len());
        let mut next_input = 0;
        for (i, node) in self.nodes.iter().enumerate() {
            let x = node.inputs.first().map(|&j| outputs[j].data());
            let mut a = Aux::None;
            let data: Vec<f64> = match (&node.layer, &node.kind) {
                (LayerSpec::Input { .. }, _) => {
                    next_input += 1;
                    inputs[next_input - 1].data().to_vec()
                }
                (_, NodeKind::Conv { geom, kernel, bias }) => {
                    kernels::conv_forward(geom, x.unwrap(), kernel.value.data(), bias.value.data())
                }
                (_, NodeKind::Pool { geom }) => {
                    let (y, arg) = kernels::pool_forward(geom, x.unwrap());
                    if train_seed.is_some() {
                        a = Aux::Pool(arg);
                    }
                    y
                }
                (_, NodeKind::BatchNorm { gamma, beta, mean, var, epsilon, .. }) => {
                    let c = gamma.value.len();
                    if train_seed.is_some() {
                        let (y, t) = kernels::batchnorm_train(x.unwrap(), c, gamma.value.data(), beta.value.data(), *epsilon);
                        a = Aux::BatchNorm(t);
                        y
                    } else {
                        kernels::batchnorm_infer(x.unwrap(), c, gamma.value.data(), beta.value.data(), mean, var, *epsilon)
                    }
                }
                (_, NodeKind::Dense { weight, bias }) => {
                    kernels::dense_forward(x.unwrap(), node.in_shapes[0][0], weight.value.data(), bias.value.data())
                }
                (LayerSpec::Dropout { rate }, _) => match train_seed {
                    Some(seed) if *rate > 0.0 => {
                        let mut rng = ChaCha8Rng::seed_from_u64(seed);
                        rng.set_stream(i as u64);
                        let keep = 1.0 / (1.0 - rate);
                        let x = x.unwrap();
                        let mask: Vec<f64> = (0..x.len())
                            .map(|_| if rng.random::<f64>() < *rate { 0.0 } else { keep })
                            .collect();
                        let y = x.iter().zip(&mask).map(|(v, m)| v * m).collect();
                        a = Aux::Dropout(mask);
                        y
                    }
                    _ => x.unwrap().to_vec(),
                },
                (LayerSpec::ReLU, _) => x.unwrap().iter().map(|v| v.max(0.0)).collect(),
                (LayerSpec::Flatten, _) => x.unwrap().to_vec(),
                (LayerSpec::Softmax, _) => {
                    kernels::softmax_rows(x.unwrap(), *node.out_shape.last().unwrap())
                }
                (LayerSpec::Concat, _) => {
                    let widths: Vec<usize> = node.in_shapes.iter().map(|s| *s.last().unwrap()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = batch * node.out_shape.iter().product::<usize>() / total;
                    let mut y = Vec::with_capacity(rows * total);
                    for r in 0..rows {
                        for (&j, &w) in node.inputs.iter().zip(&widths) {
                            y.extend_from_slice(&outputs[j].data()[r * w..(r + 1) * w]);
                        }
                    }
                    y
                }
                (layer, kind) => unreachable!("{} with {kind:?}", layer.kind_name()),
            };
            let mut shape = vec![batch];
            shape.extend_from_slice(&node.out_shape);
            outputs.push(Tensor::new(shape, data)?);
            aux.push(a);
        }
        Ok(Trace { outputs, aux })
    }

    /// Inference pass: batch-norm uses running statistics, dropout is off.
    pub fn forward(&self, inputs: &[Tensor]) -> Result<Tensor> {
        let mut trace = self.run(inputs, None)?;
        Ok(trace.outputs.swap_remove(self.output))
    }

    /// Training pass: batch statistics (running averages updated), dropout
    /// masks drawn from `seed`. The trace is kept for [`Network::backward`].
    pub fn forward_train(&mut self, inputs: &[Tensor], seed: u64) -> Result<Tensor> {
        let trace = self.run(inputs, Some(seed))?;
        for (node, a) in self.nodes.iter_mut().zip(&trace.aux) {
            if let (NodeKind::BatchNorm { mean, var, momentum, .. }, Aux::BatchNorm(t)) = (&mut node.kind, a) {
                for c in 0..mean.len() {
                    mean[c] = *momentum * mean[c] + (1.0 - *momentum) * t.mean[c];
                    var[c] = *momentum * var[c] + (1.0 - *momentum) * t.var[c];
                }
            }
        }
        let out = trace.outputs[self.output].clone();
        self.trace = Some(trace);
        Ok(out)
    }

    /// Branch taken by every ReLU unit (active or not) and every max-pool
    /// window (argmax) in the last training pass. Two evaluations with equal
    /// patterns lie on the same linear piece of those layers, which is what
    /// finite-difference gradient checks need.
    pub fn branch_pattern(&self) -> Option<Vec<u32>> {
        let trace = self.trace.as_ref()?;
        let mut pattern = Vec::new();
        for (node, a) in self.nodes.iter().zip(&trace.aux) {
            match (&node.layer, a) {
                (LayerSpec::ReLU, _) => {
                    pattern.extend(trace.outputs[node.inputs[0]].data().iter().map(|&v| u32::from(v > 0.0)))
                }
                (_, Aux::Pool(arg)) => pattern.extend_from_slice(arg),
                _ => {}
            }
        }
        Some(pattern)
    }

    /// Back-propagates `output_grad` (gradient of the loss with respect to
    /// the network output) and overwrites every parameter gradient.
    pub fn backward(&mut self, output_grad: &Tensor) -> Result<()> {
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::State("backward called before forward_train".into()))?;
        let result = if output_grad.shape() != trace.outputs[self.output].shape() {
            Err(Error::Shape(format!(
                "output gradient {:?} does not match output {:?}",
                output_grad.shape(),
                trace.outputs[self.output].shape()
            )))
        } else {
            self.backprop(&trace, self.output, output_grad.data().to_vec());
            Ok(())
        };
        self.trace = Some(trace);
        result
    }

    /// Mean cross-entropy of the softmax output against `targets` and its
    /// backward pass, fused as `(p − t) / batch` at the softmax input.
    pub fn backward_cross_entropy(&mut self, targets: &Tensor) -> Result<f64> {
        if self.nodes[self.output].layer != LayerSpec::Softmax {
            return Err(Error::State("cross-entropy backward needs a softmax output".into()));
        }
        let trace = self
            .trace
            .take()
            .ok_or_else(|| Error::State("backward called before forward_train".into()))?;
        let probs = &trace.outputs[self.output];
        if targets.shape() != probs.shape() {
            let err = Error::Shape(format!(
                "targets {:?} do not match output {:?}",
                targets.shape(),
                probs.shape()
            ));
            self.trace = Some(trace);
            return Err(err);
        }
        let batch = probs.batch() as f64;
        let loss = cross_entropy_mean(probs, targets);
        let grad: Vec<f64> = probs
            .data()
            .iter()
            .zip(targets.data())
            .map(|(p, t)| (p - t) / batch)
            .collect();
        let softmax_input = self.nodes[self.output].inputs[0];
        self.backprop(&trace, softmax_input, grad);
        self.trace = Some(trace);
        Ok(loss)
    }

    fn backprop(&mut self, trace: &Trace, start: usize, seed_grad: Vec<f64>) {
        for p in self.params_mut() {
            p.grad.fill(0.0);
        }
        let is_input: Vec<bool> = self.nodes.iter().map(|n| matches!(n.layer, LayerSpec::Input { .. })).collect();
        let track = self.track_input_grads;
        if track {
            self.input_grads = self.inputs.iter().map(|&i| Tensor::zeros(trace.outputs[i].shape())).collect();
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[start] = Some(seed_grad);
        for i in (0..=start).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &mut self.nodes[i];
            if is_input[i] {
                if track {
                    let k = self.inputs.iter().position(|&j| j == i).expect("input node");
                    self.input_grads[k].data_mut().copy_from_slice(&dy);
                }
                continue;
            }
            let need: Vec<bool> = node.inputs.iter().map(|&j| track || !is_input[j]).collect();
            if !need.iter().any(|&b| b) && !matches!(node.kind, NodeKind::Conv { .. } | NodeKind::Dense { .. } | NodeKind::BatchNorm { .. }) {
                continue;
            }
            let x = node.inputs.first().map(|&j| trace.outputs[j].data());
            let dxs: Vec<Option<Vec<f64>>> = match (&node.layer, &mut node.kind, &trace.aux[i]) {
                (_, NodeKind::Conv { geom, kernel, bias }, _) => {
                    let g = kernels::conv_backward(geom, x.unwrap(), kernel.value.data(), &dy, need[0]);
                    kernel.grad.data_mut().copy_from_slice(&g.kernel);
                    bias.grad.data_mut().copy_from_slice(&g.bias);
                    vec![g.input]
                }
                (_, NodeKind::Pool { geom }, Aux::Pool(arg)) => vec![Some(kernels::pool_backward(geom, &dy, arg))],
                (_, NodeKind::BatchNorm { gamma, beta, .. }, Aux::BatchNorm(t)) => {
                    let c = gamma.value.len();
                    let (dx, dg, db) = kernels::batchnorm_backward(&dy, t, gamma.value.data(), c);
                    gamma.grad.data_mut().copy_from_slice(&dg);
                    beta.grad.data_mut().copy_from_slice(&db);
                    vec![Some(dx)]
                }
                (_, NodeKind::Dense { weight, bias }, _) => {
                    let (dw, db, dx) = kernels::dense_backward(
                        x.unwrap(),
                        node.in_shapes[0][0],
                        weight.value.data(),
                        &dy,
                        bias.value.len(),
                        need[0],
                    );
                    weight.grad.data_mut().copy_from_slice(&dw);
                    bias.grad.data_mut().copy_from_slice(&db);
                    vec![dx]
                }
                (LayerSpec::Dropout { .. }, _, Aux::Dropout(mask)) => {
                    vec![Some(dy.iter().zip(mask).map(|(d, m)| d * m).collect())]
                }
                (LayerSpec::Dropout { .. } | LayerSpec::Flatten, _, _) => vec![Some(dy)],
                (LayerSpec::ReLU, _, _) => vec![Some(
                    dy.iter()
                        .zip(x.unwrap())
                        .map(|(d, v)| if *v > 0.0 { *d } else { 0.0 })
                        .collect(),
                )],
                (LayerSpec::Softmax, _, _) => {
                    let p = trace.outputs[i].data();
                    let k = *node.out_shape.last().unwrap();
                    let mut dx = vec![0.0; dy.len()];
                    for ((pr, dr), xr) in p.chunks_exact(k).zip(dy.chunks_exact(k)).zip(dx.chunks_exact_mut(k)) {
                        let dot: f64 = pr.iter().zip(dr).map(|(a, b)| a * b).sum();
                        for c in 0..k {
                            xr[c] = pr[c] * (dr[c] - dot);
                        }
                    }
                    vec![Some(dx)]
                }
                (LayerSpec::Concat, _, _) => {
                    let widths: Vec<usize> = node.in_shapes.iter().map(|s| *s.last().unwrap()).collect();
                    let total: usize = widths.iter().sum();
                    let rows = dy.len() / total;
                    let mut parts: Vec<Vec<f64>> = widths.iter().map(|w| Vec::with_capacity(rows * w)).collect();
                    for r in 0..rows {
                        let mut off = r * total;
                        for (part, &w) in parts.iter_mut().zip(&widths) {
                            part.extend_from_slice(&dy[off..off + w]);
                            off += w;
                        }
                    }
                    parts.into_iter().map(Some).collect()
                }
                (layer, kind, _) => unreachable!("no backward for {} with {kind:?}", layer.kind_name()),
            };
            let input_ids = node.inputs.clone();
            for ((j, dx), needed) in input_ids.into_iter().zip(dxs).zip(need) {
                let Some(dx) = dx else { continue };
                if !needed {
                    continue;
                }
                match &mut grads[j] {
                    Some(acc) => acc.iter_mut().zip(&dx).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(dx),
                }
            }
        }
    }
}

/// Mean over the batch of `−Σ t·log(max(p, floor))`.
pub(crate) fn cross_entropy_mean(probs: &Tensor, targets: &Tensor) -> f64 {
    let k = *probs.shape().last().unwrap_or(&1);
    let batch = probs.len() / k;
    let total: f64 = probs
        .data()
        .chunks_exact(k)
        .zip(targets.data().chunks_exact(k))
        .map(|(p, t)| -p.iter().zip(t).map(|(p, t)| t * p.max(LOG_FLOOR).ln()).sum::<f64>())
        .sum();
    total / batch as f64
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn backward_before_forward_is_a_state_error() {
        let spec = NetworkSpec::sequential(&[2], [LayerSpec::dense(3)]);
        let mut net = Network::new(spec, 1).unwrap();
        let g = Tensor::zeros(&[1, 3]);
        assert!(matches!(net.backward(&g), Err(Error::State(_))));
    }

    #[test]
    fn dense_gradient_matches_closed_form() {
        // L = ½‖xW + b − y‖², dL/dW = xᵀ(ŷ − y)
        let spec = NetworkSpec::sequential(&[2], [LayerSpec::dense(1)]);
        let mut net = Network::new(spec, 3).unwrap();
        let x = tensor(&[1, 2], vec![0.5, -2.0]);
        let y_hat = net.forward_train(&[x.clone()], 0).unwrap();
        let target = 0.25;
        let r = y_hat.data()[0] - target;
        net.backward(&tensor(&[1, 1], vec![r])).unwrap();
        let params = net.params();
        assert!((params[0].grad.data()[0] - 0.5 * r).abs() < 1e-15);
        assert!((params[0].grad.data()[1] + 2.0 * r).abs() < 1e-15);
        assert!((params[1].grad.data()[0] - r).abs() < 1e-15);
    }

    #[test]
    fn zero_loss_gradient_is_zero() {
        let spec = NetworkSpec::sequential(&[3], [LayerSpec::dense(4), LayerSpec::ReLU, LayerSpec::dense(2)]);
        let mut net = Network::new(spec, 5).unwrap();
        net.forward_train(&[tensor(&[2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0])], 0).unwrap();
        net.backward(&Tensor::zeros(&[2, 2])).unwrap();
        assert!(net.params().iter().all(|p| p.grad.data().iter().all(|g| *g == 0.0)));
    }

    #[test]
    fn inference_is_repeatable_and_leaves_running_stats() {
        let spec = NetworkSpec::sequential(
            &[8, 2],
            [LayerSpec::conv1d(3, 3), LayerSpec::batch_norm(), LayerSpec::dropout(), LayerSpec::Flatten, LayerSpec::dense(2), LayerSpec::Softmax],
        );
        let net = Network::new(spec, 9).unwrap();
        let x = tensor(&[1, 8, 2], (0..16).map(|v| v as f64 * 0.1).collect());
        let a = net.forward(&[x.clone()]).unwrap();
        let b = net.forward(&[x]).unwrap();
        assert_eq!(a, b);
        assert!((a.data().iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn delta_kernel_conv_is_identity() {
        let spec = NetworkSpec::sequential(&[6, 1], [LayerSpec::Conv1D { filters: 1, kernel: 3, padding: Padding::Same }]);
        let mut net = Network::new(spec, 0).unwrap();
        let tensors: Vec<(String, Tensor)> = net
            .state_tensors()
            .into_iter()
            .map(|(n, t)| {
                let data = if n.ends_with("kernel") { vec![0.0, 1.0, 0.0] } else { vec![0.0] };
                (n, Tensor::new(t.shape().to_vec(), data).unwrap())
            })
            .collect();
        net.load_state(&tensors).unwrap();
        let x = tensor(&[1, 6, 1], vec![1.0, -2.0, 3.0, 0.5, 4.0, -1.0]);
        assert_eq!(net.forward(&[x.clone()]).unwrap().data(), x.data());
    }

    #[test]
    fn unknown_input_name_is_rejected() {
        let spec = NetworkSpec {
            nodes: vec![
                NodeSpec { name: "x".into(), layer: LayerSpec::Input { shape: vec![2] }, inputs: vec![] },
                NodeSpec { name: "d".into(), layer: LayerSpec::dense(2), inputs: vec!["y".into()] },
            ],
            output: "d".into(),
        };
        assert!(matches!(Network::new(spec, 0), Err(Error::Config(_))));
    }

    #[test]
    fn branch_pattern_records_relu_signs_and_pool_argmax() {
        let spec = NetworkSpec::sequential(&[4, 1], [LayerSpec::ReLU, LayerSpec::max_pool1d(2)]);
        let mut net = Network::new(spec, 0).unwrap();
        assert!(net.branch_pattern().is_none());
        net.forward_train(&[tensor(&[1, 4, 1], vec![-1.0, 2.0, 3.0, 0.5])], 0).unwrap();
        assert_eq!(net.branch_pattern().unwrap(), vec![0, 1, 1, 1, 1, 2]);
    }
}
