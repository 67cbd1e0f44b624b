//! Feed-forward networks with hand-written reverse mode.
//!
//! A network with architecture `(n_0, …, n_L)` evaluates
//! `z^1 = W^1 x + b^1`, `z^ℓ = W^ℓ σ(z^{ℓ-1}) + b^ℓ`; the last layer is affine.
//! Inputs are batched: rows are samples.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::{matmul, matmul_nt, matmul_tn, Matrix};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NnError {
    #[error("invalid architecture {arch:?}: need at least two widths, all >= 1")]
    InvalidArchitecture { arch: Vec<usize> },
    #[error("{what}: expected {expected} columns, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("parameter vector has length {got}, network has {expected} parameters")]
    ParamCount { expected: usize, got: usize },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    #[inline]
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative at the pre-activation `z`; ReLU uses 0 at the kink.
    #[inline]
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InitScheme {
    /// `W ~ Normal(0, 2/n_in)`
    He,
    /// `W ~ Uniform(±√(6/(n_in+n_out)))`
    Xavier,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    arch: Vec<usize>,
    /// `weights[ℓ]` is `n_{ℓ+1} × n_ℓ`.
    pub weights: Vec<Matrix>,
    pub biases: Vec<Vec<f64>>,
    pub activation: Activation,
}

/// Gradients laid out exactly like the owning [`Mlp`]'s parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientSet {
    pub dweights: Vec<Matrix>,
    pub dbiases: Vec<Vec<f64>>,
}

impl GradientSet {
    /// Parameter-order slices (W then b per layer), matching [`Mlp::param_slices_mut`].
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::with_capacity(2 * self.dweights.len());
        for (w, b) in self.dweights.iter().zip(&self.dbiases) {
            out.push(w.data());
            out.push(b.as_slice());
        }
        out
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.slices().concat()
    }
}

fn validate_arch(arch: &[usize]) -> Result<(), NnError> {
    if arch.len() < 2 || arch.iter().any(|&w| w == 0) {
        return Err(NnError::InvalidArchitecture { arch: arch.to_vec() });
    }
    Ok(())
}

/// Seeded constructor; see [`Mlp::init`].
pub fn init_mlp(arch: &[usize], activation: Activation, scheme: InitScheme, seed: u64) -> Result<Mlp, NnError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Mlp::init(arch, activation, scheme, &mut rng)
}

/// Values of one forward pass kept for the backward pass.
pub struct ForwardCache {
    input: Matrix,
    /// pre-activations `z^1 … z^{L-1}` of hidden layers
    pre: Vec<Matrix>,
    /// `σ(z^ℓ)` for hidden layers
    post: Vec<Matrix>,
    pub output: Matrix,
}

impl ForwardCache {
    pub fn pre_activations(&self) -> &[Matrix] {
        &self.pre
    }
}

impl Mlp {
    pub fn init<R: Rng + ?Sized>(
        arch: &[usize],
        activation: Activation,
        scheme: InitScheme,
        rng: &mut R,
    ) -> Result<Mlp, NnError> {
        validate_arch(arch)?;
        let mut weights = Vec::with_capacity(arch.len() - 1);
        let mut biases = Vec::with_capacity(arch.len() - 1);
        for pair in arch.windows(2) {
            let (n_in, n_out) = (pair[0], pair[1]);
            let data: Vec<f64> = match scheme {
                InitScheme::He => {
                    let dist = Normal::new(0.0, (2.0 / n_in as f64).sqrt()).expect("positive std");
                    (0..n_in * n_out).map(|_| dist.sample(rng)).collect()
                }
                InitScheme::Xavier => {
                    let a = (6.0 / (n_in + n_out) as f64).sqrt();
                    let dist = Uniform::new_inclusive(-a, a).expect("finite bounds");
                    (0..n_in * n_out).map(|_| dist.sample(rng)).collect()
                }
            };
            weights.push(Matrix::from_vec(n_out, n_in, data).expect("sized above"));
            biases.push(vec![0.0; n_out]);
        }
        Ok(Mlp {
            arch: arch.to_vec(),
            weights,
            biases,
            activation,
        })
    }

    /// Network with every parameter zero.
    pub fn zeros(arch: &[usize], activation: Activation) -> Result<Mlp, NnError> {
        validate_arch(arch)?;
        Ok(Mlp {
            arch: arch.to_vec(),
            weights: arch.windows(2).map(|p| Matrix::zeros(p[1], p[0])).collect(),
            biases: arch.windows(2).map(|p| vec![0.0; p[1]]).collect(),
            activation,
        })
    }

    /// Assembles a network from explicit layers; shapes must chain.
    pub fn from_layers(layers: Vec<(Matrix, Vec<f64>)>, activation: Activation) -> Result<Mlp, NnError> {
        let first = layers
            .first()
            .ok_or(NnError::InvalidArchitecture { arch: vec![] })?;
        let mut arch = vec![first.0.cols()];
        for (w, b) in &layers {
            let prev = *arch.last().unwrap();
            if w.cols() != prev {
                return Err(NnError::ShapeMismatch {
                    what: "layer input",
                    expected: prev,
                    got: w.cols(),
                });
            }
            if b.len() != w.rows() {
                return Err(NnError::ShapeMismatch {
                    what: "bias length",
                    expected: w.rows(),
                    got: b.len(),
                });
            }
            arch.push(w.rows());
        }
        validate_arch(&arch)?;
        let (weights, biases) = layers.into_iter().unzip();
        Ok(Mlp {
            arch,
            weights,
            biases,
            activation,
        })
    }

    pub fn arch(&self) -> &[usize] {
        &self.arch
    }

    pub fn input_dim(&self) -> usize {
        self.arch[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.arch.last().unwrap()
    }

    pub fn num_layers(&self) -> usize {
        self.weights.len()
    }

    pub fn num_params(&self) -> usize {
        self.arch.windows(2).map(|p| p[0] * p[1] + p[1]).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.weights.iter().all(Matrix::is_finite) && self.biases.iter().flatten().all(|v| v.is_finite())
    }

    /// Mutable parameter slices in storage order: `W^1, b^1, W^2, b^2, …`.
    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::with_capacity(2 * self.weights.len());
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            out.push(w.data_mut());
            out.push(b.as_mut_slice());
        }
        out
    }

    /// All parameters flattened in storage order.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w.data());
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<(), NnError> {
        if values.len() != self.num_params() {
            return Err(NnError::ParamCount {
                expected: self.num_params(),
                got: values.len(),
            });
        }
        let mut offset = 0;
        for slot in self.param_slices_mut() {
            let n = slot.len();
            slot.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    fn check_input(&self, x: &Matrix) -> Result<(), NnError> {
        if x.cols() != self.input_dim() {
            return Err(NnError::ShapeMismatch {
                what: "network input",
                expected: self.input_dim(),
                got: x.cols(),
            });
        }
        Ok(())
    }

    fn affine(&self, layer: usize, x: &Matrix) -> Matrix {
        let mut z = matmul_nt(x, &self.weights[layer]).expect("layer shapes chain");
        let b = &self.biases[layer];
        for i in 0..z.rows() {
            for (v, bi) in z.row_mut(i).iter_mut().zip(b) {
                *v += bi;
            }
        }
        z
    }

    fn activate(&self, z: &Matrix) -> Matrix {
        let act = self.activation;
        let data = z.data().iter().map(|&v| act.apply(v)).collect();
        Matrix::from_vec(z.rows(), z.cols(), data).expect("same shape")
    }

    /// Batched evaluation: `x` is `batch × n_0`, result is `batch × n_L`.
    pub fn forward(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut h = self.affine(0, x);
        for l in 1..=last {
            let a = self.activate(&h);
            h = self.affine(l, &a);
        }
        Ok(h)
    }

    /// Outputs of the last hidden layer, `σ(z^{L-1})`; for a single-layer
    /// network this is the input itself.
    pub fn hidden_features(&self, x: &Matrix) -> Result<Matrix, NnError> {
        self.check_input(x)?;
        let mut a = x.clone();
        for l in 0..self.num_layers() - 1 {
            let z = self.affine(l, &a);
            a = self.activate(&z);
        }
        Ok(a)
    }

    pub fn forward_cached(&self, x: &Matrix) -> Result<ForwardCache, NnError> {
        self.check_input(x)?;
        let last = self.num_layers() - 1;
        let mut pre = Vec::with_capacity(last);
        let mut post = Vec::with_capacity(last);
        let mut z = self.affine(0, x);
        for l in 1..=last {
            let a = self.activate(&z);
            let next = self.affine(l, &a);
            pre.push(z);
            post.push(a);
            z = next;
        }
        Ok(ForwardCache {
            input: x.clone(),
            pre,
            post,
            output: z,
        })
    }

    /// Reverse-mode gradients of `Σ ⟨upstream, output⟩` from a cached forward pass.
    pub fn backward_cached(&self, cache: &ForwardCache, upstream: &Matrix) -> Result<GradientSet, NnError> {
        if upstream.cols() != self.output_dim() || upstream.rows() != cache.output.rows() {
            return Err(NnError::ShapeMismatch {
                what: "upstream gradient",
                expected: self.output_dim(),
                got: upstream.cols(),
            });
        }
        let n_layers = self.num_layers();
        let mut dweights = vec![Matrix::zeros(0, 0); n_layers];
        let mut dbiases = vec![Vec::new(); n_layers];
        let mut delta = upstream.clone();
        for l in (0..n_layers).rev() {
            let a_prev = if l == 0 { &cache.input } else { &cache.post[l - 1] };
            dweights[l] = matmul_tn(&delta, a_prev).expect("cached shapes");
            let mut db = vec![0.0; delta.cols()];
            for i in 0..delta.rows() {
                for (acc, v) in db.iter_mut().zip(delta.row(i)) {
                    *acc += v;
                }
            }
            dbiases[l] = db;
            if l > 0 {
                let mut back = matmul(&delta, &self.weights[l]).expect("cached shapes");
                let z = &cache.pre[l - 1];
                let act = self.activation;
                for (g, &zv) in back.data_mut().iter_mut().zip(z.data()) {
                    *g *= act.derivative(zv);
                }
                delta = back;
            }
        }
        Ok(GradientSet { dweights, dbiases })
    }

    pub fn backward(&self, x: &Matrix, upstream: &Matrix) -> Result<GradientSet, NnError> {
        let cache = self.forward_cached(x)?;
        self.backward_cached(&cache, upstream)
    }
}

/// Largest relative discrepancy between analytic and central-difference
/// gradients of `½‖forward(x)‖²`, measured as `|g − ĝ| / max(1, |g|)`.
pub fn gradcheck(net: &Mlp, x: &Matrix, epsilon: f64) -> Result<f64, NnError> {
    let cache = net.forward_cached(x)?;
    let analytic = net.backward_cached(&cache, &cache.output)?.flatten();
    let loss = |m: &Mlp| -> f64 { 0.5 * m.forward(x).expect("checked").frobenius_norm_sq() };

    let base = net.params_flat();
    let mut probe = net.clone();
    let mut worst = 0.0_f64;
    let mut theta = base.clone();
    for (i, &g) in analytic.iter().enumerate() {
        theta[i] = base[i] + epsilon;
        probe.set_params_flat(&theta)?;
        let plus = loss(&probe);
        theta[i] = base[i] - epsilon;
        probe.set_params_flat(&theta)?;
        let minus = loss(&probe);
        theta[i] = base[i];
        let numeric = (plus - minus) / (2.0 * epsilon);
        worst = worst.max((g - numeric).abs() / g.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_net(w1: f64, b1: f64, w2: f64, b2: f64) -> Mlp {
        Mlp::from_layers(
            vec![
                (Matrix::from_rows(&[[w1]]), vec![b1]),
                (Matrix::from_rows(&[[w2]]), vec![b2]),
            ],
            Activation::Relu,
        )
        .unwrap()
    }

    #[test]
    fn parameter_count_of_branch_architecture() {
        let net = init_mlp(&[1, 500, 51], Activation::Relu, InitScheme::He, 7).unwrap();
        assert_eq!(net.num_params(), 500 + 500 + 500 * 51 + 51);
        assert_eq!(net.params_flat().len(), 500 + 500 + 500 * 51 + 51);
    }

    #[test]
    fn trunk_layer_shapes() {
        let net = init_mlp(&[2, 50, 50, 50, 50], Activation::Relu, InitScheme::He, 0).unwrap();
        let shapes: Vec<_> = net.weights.iter().map(Matrix::shape).collect();
        assert_eq!(shapes, vec![(50, 2), (50, 50), (50, 50), (50, 50)]);
        assert!(net.biases.iter().flatten().all(|&b| b == 0.0));
    }

    #[test]
    fn init_is_deterministic_per_seed() {
        let a = init_mlp(&[3, 8, 4], Activation::Tanh, InitScheme::Xavier, 11).unwrap();
        let b = init_mlp(&[3, 8, 4], Activation::Tanh, InitScheme::Xavier, 11).unwrap();
        let c = init_mlp(&[3, 8, 4], Activation::Tanh, InitScheme::Xavier, 12).unwrap();
        assert_eq!(a.params_flat(), b.params_flat());
        assert_ne!(a.params_flat(), c.params_flat());
    }

    #[test]
    fn xavier_bounds_hold() {
        let net = init_mlp(&[10, 30], Activation::Tanh, InitScheme::Xavier, 3).unwrap();
        let a = (6.0_f64 / 40.0).sqrt();
        assert!(net.weights[0].data().iter().all(|w| w.abs() <= a));
    }

    #[test]
    fn invalid_architectures_rejected() {
        assert!(init_mlp(&[4], Activation::Relu, InitScheme::He, 0).is_err());
        assert!(init_mlp(&[], Activation::Relu, InitScheme::He, 0).is_err());
        assert!(init_mlp(&[2, 0, 1], Activation::Relu, InitScheme::He, 0).is_err());
    }

    #[test]
    fn forward_hand_evaluation() {
        let net = scalar_net(2.0, -1.0, 3.0, 0.5);
        let out = net.forward(&Matrix::from_rows(&[[1.0], [0.0]])).unwrap();
        assert_eq!(out[(0, 0)], 3.5);
        assert_eq!(out[(1, 0)], 0.5);

        let zero = Mlp::zeros(&[3, 5, 2], Activation::Tanh).unwrap();
        let out = zero.forward(&Matrix::filled(4, 3, 1.3)).unwrap();
        assert_eq!(out, Matrix::zeros(4, 2));
        assert!(zero.forward(&Matrix::zeros(1, 2)).is_err());
    }

    #[test]
    fn linear_layer_gradient_by_hand() {
        let net = Mlp::from_layers(vec![(Matrix::from_rows(&[[1.7]]), vec![-0.3])], Activation::Relu).unwrap();
        let x = Matrix::from_rows(&[[2.5]]);
        let g = net.backward(&x, &Matrix::from_rows(&[[0.8]])).unwrap();
        assert!((g.dweights[0][(0, 0)] - 0.8 * 2.5).abs() < 1e-15);
        assert!((g.dbiases[0][0] - 0.8).abs() < 1e-15);

        let g = net.backward(&x, &Matrix::zeros(1, 1)).unwrap();
        assert!(g.flatten().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn relu_gradient_is_zero_at_kink() {
        // z¹ = 0 exactly at x = 0.5
        let net = scalar_net(2.0, -1.0, 3.0, 0.0);
        let g = net.backward(&Matrix::from_rows(&[[0.5]]), &Matrix::from_rows(&[[1.0]])).unwrap();
        assert_eq!(g.dweights[0][(0, 0)], 0.0);
        assert_eq!(g.dbiases[0][0], 0.0);
    }

    #[test]
    fn gradcheck_tanh_and_zero_networks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let net = Mlp::init(&[3, 7, 5, 2], Activation::Tanh, InitScheme::Xavier, &mut rng).unwrap();
        let x = Matrix::from_fn(4, 3, |i, j| ((i * 3 + j) as f64 * 0.37).sin());
        assert!(gradcheck(&net, &x, 1e-6).unwrap() <= 1e-6);

        let zero = Mlp::zeros(&[2, 3, 1], Activation::Relu).unwrap();
        assert_eq!(gradcheck(&zero, &Matrix::filled(2, 2, 0.3), 1e-6).unwrap(), 0.0);
    }

    #[test]
    fn doubling_last_layer_doubles_output() {
        let net = init_mlp(&[2, 6, 3], Activation::Relu, InitScheme::He, 9).unwrap();
        let mut doubled = net.clone();
        let last = doubled.num_layers() - 1;
        doubled.weights[last] = doubled.weights[last].scale(2.0);
        doubled.biases[last].iter_mut().for_each(|b| *b *= 2.0);
        let x = Matrix::from_fn(5, 2, |i, j| i as f64 - j as f64 * 0.7);
        let y = net.forward(&x).unwrap();
        assert_eq!(doubled.forward(&x).unwrap(), y.scale(2.0));
    }

    #[test]
    fn hidden_features_feed_last_layer() {
        let net = init_mlp(&[2, 6, 4, 3], Activation::Tanh, InitScheme::Xavier, 1).unwrap();
        let x = Matrix::from_fn(3, 2, |i, j| 0.1 * (i + j) as f64);
        let h = net.hidden_features(&x).unwrap();
        let mut out = matmul_nt(&h, &net.weights[2]).unwrap();
        for i in 0..out.rows() {
            for (v, b) in out.row_mut(i).iter_mut().zip(&net.biases[2]) {
                *v += b;
            }
        }
        assert_eq!(out, net.forward(&x).unwrap());
    }
}
