//! Fixed-topology multilayer perceptrons with hand-written reverse mode.
//!
//! Every hidden layer is `relu(x W + b)`; the output layer is either affine or
//! `bound * tanh(x W + b)`. Weights are stored `(fan_in, fan_out)` so a batch
//! laid out one sample per row goes through a layer as a single `x * W`.
//!
//! The cache returned by [`Mlp::forward`] holds every layer's post-activation
//! output; that is enough for the backward pass since `relu'(z) = [h > 0]` and
//! `d(B tanh z)/dz = B (1 - (y / B)^2)`.

use crate::error::{Error, Result};
use crate::numerics::matrix::{affine, matmul_nt, matmul_tn, Matrix};
use crate::rng::SeededRng;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OutputActivation {
    Identity,
    /// `bound * tanh(z)`
    TanhScaled(f64),
}

/// Layer sizes of a ReLU network.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpSpec {
    pub input_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub output_dim: usize,
    pub output_activation: OutputActivation,
}

impl MlpSpec {
    pub fn new(
        input_dim: usize,
        hidden_dims: Vec<usize>,
        output_dim: usize,
        output_activation: OutputActivation,
    ) -> Self {
        Self {
            input_dim,
            hidden_dims,
            output_dim,
            output_activation,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.output_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Config(format!("all layer dims must be >= 1: {self:?}")));
        }
        if let OutputActivation::TanhScaled(b) = self.output_activation {
            if !(b > 0.0 && b.is_finite()) {
                return Err(Error::Config(format!("tanh bound must be positive, got {b}")));
            }
        }
        Ok(())
    }

    /// `(fan_in, fan_out)` for each layer, input to output.
    pub fn layer_shapes(&self) -> Vec<(usize, usize)> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.input_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.output_dim);
        dims.windows(2).map(|w| (w[0], w[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

/// Parameters of one network, ordered input to output. Gradients and Adam
/// moments use the same type.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub layers: Vec<Dense>,
}

pub type ParamGrads = MlpParams;

impl MlpParams {
    pub fn zeros_like(shapes: &[(usize, usize)]) -> Self {
        Self {
            layers: shapes
                .iter()
                .map(|&(i, o)| Dense {
                    weight: Matrix::zeros(i, o),
                    bias: vec![0.0; o],
                })
                .collect(),
        }
    }

    pub fn shapes(&self) -> Vec<(usize, usize)> {
        self.layers.iter().map(|l| l.weight.shape()).collect()
    }

    pub fn num_params(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weight.data().len() + l.bias.len())
            .sum()
    }

    /// Flat parameter slices in canonical order (W0, b0, W1, b1, ...).
    pub fn slices(&self) -> impl Iterator<Item = &[f64]> {
        self.layers
            .iter()
            .flat_map(|l| [l.weight.data(), l.bias.as_slice()])
    }

    pub fn slices_mut(&mut self) -> impl Iterator<Item = &mut [f64]> {
        self.layers
            .iter_mut()
            .flat_map(|l| [l.weight.data_mut(), l.bias.as_mut_slice()])
    }

    pub fn get(&self, mut index: usize) -> f64 {
        for s in self.slices() {
            if index < s.len() {
                return s[index];
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn set(&mut self, mut index: usize, value: f64) {
        for s in self.slices_mut() {
            if index < s.len() {
                s[index] = value;
                return;
            }
            index -= s.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.slices().all(|s| s.iter().all(|v| v.is_finite()))
    }

    /// `self <- tau * source + (1 - tau) * self`
    pub fn soft_update_from(&mut self, source: &MlpParams, tau: f64) {
        for (t, s) in self.slices_mut().zip(source.slices()) {
            for (tv, &sv) in t.iter_mut().zip(s) {
                *tv = tau * sv + (1.0 - tau) * *tv;
            }
        }
    }

    pub fn scale(&mut self, k: f64) {
        for s in self.slices_mut() {
            for v in s {
                *v *= k;
            }
        }
    }

    pub fn add_assign(&mut self, other: &MlpParams) {
        for (a, b) in self.slices_mut().zip(other.slices()) {
            for (x, &y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.slices()
            .flat_map(|s| s.iter())
            .fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

/// Post-activation outputs of every layer; `acts[0]` is the input.
#[derive(Debug, Clone)]
pub struct ActivationCache {
    acts: Vec<Matrix>,
}

impl ActivationCache {
    pub fn output(&self) -> &Matrix {
        self.acts.last().expect("cache holds at least the input")
    }

    pub fn input(&self) -> &Matrix {
        &self.acts[0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub spec: MlpSpec,
    pub params: MlpParams,
}

impl Mlp {
    /// Weights uniform in `±sqrt(1 / fan_in)`, biases zero.
    pub fn init(spec: MlpSpec, rng: &mut SeededRng) -> Result<Self> {
        spec.validate()?;
        let layers = spec
            .layer_shapes()
            .into_iter()
            .map(|(fan_in, fan_out)| {
                let limit = (1.0 / fan_in as f64).sqrt();
                let data = (0..fan_in * fan_out)
                    .map(|_| rng.uniform(-limit, limit))
                    .collect();
                Dense {
                    weight: Matrix::from_vec(fan_in, fan_out, data).expect("sized above"),
                    bias: vec![0.0; fan_out],
                }
            })
            .collect();
        Ok(Self {
            spec,
            params: MlpParams { layers },
        })
    }

    pub fn zeros(spec: MlpSpec) -> Result<Self> {
        spec.validate()?;
        let params = MlpParams::zeros_like(&spec.layer_shapes());
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: MlpSpec, params: MlpParams) -> Result<Self> {
        spec.validate()?;
        if params.shapes() != spec.layer_shapes() {
            return Err(Error::Shape(format!(
                "parameters {:?} do not fit spec {:?}",
                params.shapes(),
                spec.layer_shapes()
            )));
        }
        Ok(Self { spec, params })
    }

    pub fn forward(&self, input: &Matrix) -> Result<(Matrix, ActivationCache)> {
        let cache = self.forward_cached(input)?;
        Ok((cache.output().clone(), cache))
    }

    pub fn forward_cached(&self, input: &Matrix) -> Result<ActivationCache> {
        if input.cols() != self.spec.input_dim {
            return Err(Error::Shape(format!(
                "network expects {} inputs, got {}",
                self.spec.input_dim,
                input.cols()
            )));
        }
        let last = self.params.layers.len() - 1;
        let mut acts = Vec::with_capacity(last + 2);
        acts.push(input.clone());
        for (i, layer) in self.params.layers.iter().enumerate() {
            let mut z = affine(acts.last().unwrap(), &layer.weight, &layer.bias);
            if i < last {
                for v in z.data_mut() {
                    if *v < 0.0 {
                        *v = 0.0;
                    }
                }
            } else if let OutputActivation::TanhScaled(bound) = self.spec.output_activation {
                for v in z.data_mut() {
                    *v = bound * v.tanh();
                }
            }
            acts.push(z);
        }
        Ok(ActivationCache { acts })
    }

    /// Forward pass without keeping intermediate activations.
    pub fn predict(&self, input: &Matrix) -> Result<Matrix> {
        Ok(self.forward_cached(input)?.acts.pop().unwrap())
    }

    pub fn backward(&self, cache: &ActivationCache, output_grad: &Matrix) -> Result<ParamGrads> {
        let (grads, _) = self.backward_full(cache, output_grad, true, false)?;
        Ok(grads.expect("requested"))
    }

    /// Gradient with respect to the network input only; parameter gradients
    /// are not formed.
    pub fn input_grad(&self, cache: &ActivationCache, output_grad: &Matrix) -> Result<Matrix> {
        let (_, dx) = self.backward_full(cache, output_grad, false, true)?;
        Ok(dx.expect("requested"))
    }

    pub fn backward_full(
        &self,
        cache: &ActivationCache,
        output_grad: &Matrix,
        want_params: bool,
        want_input: bool,
    ) -> Result<(Option<ParamGrads>, Option<Matrix>)> {
        let out = cache.output();
        if output_grad.shape() != out.shape() || cache.acts.len() != self.params.layers.len() + 1
        {
            return Err(Error::Shape(format!(
                "output grad {:?} against cached output {:?}",
                output_grad.shape(),
                out.shape()
            )));
        }
        let mut dz = output_grad.clone();
        if let OutputActivation::TanhScaled(bound) = self.spec.output_activation {
            for (g, &y) in dz.data_mut().iter_mut().zip(out.data()) {
                let t = y / bound;
                *g *= bound * (1.0 - t * t);
            }
        }
        let mut grads = want_params.then(|| MlpParams { layers: Vec::new() });
        let mut input_grad = None;
        for l in (0..self.params.layers.len()).rev() {
            let x = &cache.acts[l];
            if let Some(g) = grads.as_mut() {
                let dw = matmul_tn(x, &dz);
                let mut db = vec![0.0; dz.cols()];
                for r in 0..dz.rows() {
                    for (acc, v) in db.iter_mut().zip(dz.row(r)) {
                        *acc += v;
                    }
                }
                g.layers.push(Dense {
                    weight: dw,
                    bias: db,
                });
            }
            if l == 0 {
                if want_input {
                    input_grad = Some(matmul_nt(&dz, &self.params.layers[0].weight));
                }
                break;
            }
            let mut dx = matmul_nt(&dz, &self.params.layers[l].weight);
            // ReLU mask; subgradient at exactly zero is zero.
            for (g, &h) in dx.data_mut().iter_mut().zip(x.data()) {
                if h <= 0.0 {
                    *g = 0.0;
                }
            }
            dz = dx;
        }
        if let Some(g) = grads.as_mut() {
            g.layers.reverse();
        }
        Ok((grads, input_grad))
    }
}
