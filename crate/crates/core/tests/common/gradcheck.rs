//! Central finite-difference oracle for network gradients.

use mmgfuse_core::nnet::{Network, Tensor};
use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const STEP: f64 = 1e-5;
/// Analytic gradient norms at or below this mark a tensor whose true
/// gradient is identically zero (a bias feeding batch normalisation).
pub const ZERO_GRAD_NORM: f64 = 1e-12;
/// Bound on finite differences of such tensors; their value is pure
/// rounding noise, observed near 1e-10.
pub const ZERO_GRAD_ABS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct GradCheck {
    /// Worst relative error over tensors with a nonzero gradient.
    pub max_rel_err: f64,
    pub worst: String,
    /// Worst finite difference over tensors with an identically zero gradient.
    pub max_zero_abs: f64,
    /// Coordinates compared.
    pub coordinates: usize,
    /// Coordinates whose ±STEP evaluations took different ReLU or max-pool
    /// branches; central differences are not a derivative there.
    pub skipped: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err <= tol && self.max_zero_abs <= ZERO_GRAD_ABS
    }

    pub fn merge(&mut self, other: &GradCheck) {
        if other.max_rel_err >= self.max_rel_err {
            self.max_rel_err = other.max_rel_err;
            self.worst = other.worst.clone();
        }
        self.max_zero_abs = self.max_zero_abs.max(other.max_zero_abs);
        self.coordinates += other.coordinates;
        self.skipped += other.skipped;
    }
}

fn loss(net: &mut Network, inputs: &[Tensor], proj: &Tensor, seed: u64) -> (f64, Vec<u32>) {
    let y = net.forward_train(inputs, seed).expect("forward");
    let l = y.data().iter().zip(proj.data()).map(|(a, b)| a * b).sum();
    (l, net.branch_pattern().expect("trace"))
}

#[derive(Clone, Copy)]
enum Target {
    Param(usize),
    Input(usize),
}

impl Target {
    fn get(self, net: &Network, xs: &[Tensor], j: usize) -> f64 {
        match self {
            Target::Param(k) => net.params()[k].value.data()[j],
            Target::Input(s) => xs[s].data()[j],
        }
    }

    fn set(self, net: &mut Network, xs: &mut [Tensor], j: usize, v: f64) {
        match self {
            Target::Param(k) => net.params_mut()[k].value.data_mut()[j] = v,
            Target::Input(s) => xs[s].data_mut()[j] = v,
        }
    }
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn sample_coords(rng: &mut ChaCha8Rng, len: usize, per_tensor: usize) -> Vec<usize> {
    if len <= per_tensor {
        (0..len).collect()
    } else {
        sample(rng, len, per_tensor).into_vec()
    }
}

/// Checks parameter and input gradients of `L = Σ r ⊙ net(x)` for a random
/// projection `r`, at up to `per_tensor` distinct coordinates per tensor.
pub fn check_network(net: &mut Network, inputs: &[Tensor], seed: u64, per_tensor: usize) -> GradCheck {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dropout_seed = seed ^ 0x5eed;
    let batch = inputs[0].batch();
    let mut out_shape = vec![batch];
    out_shape.extend_from_slice(net.output_shape());
    let n_out: usize = out_shape.iter().product();
    let proj = Tensor::new(out_shape, (0..n_out).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();

    net.set_track_input_grads(true);
    let (_, base) = loss(net, inputs, &proj, dropout_seed);
    net.backward(&proj).unwrap();
    let param_grads: Vec<Vec<f64>> = net.params().iter().map(|p| p.grad.data().to_vec()).collect();
    let input_grads: Vec<Vec<f64>> = net.input_grads().iter().map(|t| t.data().to_vec()).collect();
    let names: Vec<String> = net
        .state_tensors()
        .into_iter()
        .map(|(n, _)| n)
        .filter(|n| !n.ends_with("moving_mean") && !n.ends_with("moving_variance"))
        .collect();

    let mut report = GradCheck::default();
    let mut record = |name: String, full: &[f64], a: Vec<f64>, n: Vec<f64>, skipped: usize| {
        report.coordinates += a.len();
        report.skipped += skipped;
        if a.is_empty() {
            return;
        }
        if norm(full) <= ZERO_GRAD_NORM {
            report.max_zero_abs = n.iter().fold(report.max_zero_abs, |m, v| m.max(v.abs()));
            return;
        }
        let diff: Vec<f64> = a.iter().zip(&n).map(|(x, y)| x - y).collect();
        let scale = norm(&a).max(norm(&n));
        let e = if scale == 0.0 { 0.0 } else { norm(&diff) / scale };
        if e >= report.max_rel_err {
            report.max_rel_err = e;
            report.worst = name;
        }
    };

    let mut xs: Vec<Tensor> = inputs.to_vec();
    let mut slots: Vec<(String, Target)> = names.into_iter().enumerate().map(|(k, n)| (n, Target::Param(k))).collect();
    slots.extend((0..input_grads.len()).map(|s| (format!("input{s}"), Target::Input(s))));
    for (name, target) in slots {
        let grad = match target {
            Target::Param(k) => &param_grads[k],
            Target::Input(s) => &input_grads[s],
        };
        let (mut analytic, mut numeric, mut skipped) = (Vec::new(), Vec::new(), 0);
        for j in sample_coords(&mut rng, grad.len(), per_tensor) {
            let orig = target.get(net, &xs, j);
            let mut eval = |d: f64| {
                target.set(net, &mut xs, j, orig + d);
                loss(net, &xs, &proj, dropout_seed)
            };
            let (up, p_up) = eval(STEP);
            let (down, p_down) = eval(-STEP);
            target.set(net, &mut xs, j, orig);
            if p_up == base && p_down == base {
                analytic.push(grad[j]);
                numeric.push((up - down) / (2.0 * STEP));
            } else {
                skipped += 1;
            }
        }
        record(name, grad, analytic, numeric, skipped);
    }
    net.set_track_input_grads(false);
    report
}

/// Uniform random batch matching the network inputs.
pub fn random_inputs(net: &Network, batch: usize, rng: &mut ChaCha8Rng) -> Vec<Tensor> {
    net.input_shapes()
        .iter()
        .map(|s| {
            let mut shape = vec![batch];
            shape.extend_from_slice(s);
            let n: usize = shape.iter().product();
            Tensor::new(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
        })
        .collect()
}
