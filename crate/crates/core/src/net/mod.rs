//! Fully-connected networks with hand-written forward and backward passes.
//!
//! Parameters are flattened layer by layer: the row-major `out × in` weight
//! block followed by the `out` biases (when enabled). The analysis needs more
//! than the usual training gradient, so besides `∇ℓ(w, z)` this module exposes
//! the output Jacobian `∇f(w, x)`, the residual `r = ∂ℓ/∂f`, the loss-output
//! Hessian `∂²ℓ/∂f²`, and Hessian-vector products of the training loss.

mod loss;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::numkit::{dot, norm2, DenseMatrix};

pub use loss::LossKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Activation {
    Relu,
    Tanh,
    Identity,
}

impl Activation {
    #[inline]
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
            Activation::Identity => z,
        }
    }

    /// Derivative; ReLU uses the subgradient 0 at exactly 0.
    #[inline]
    fn derivative(self, z: f64) -> f64 {
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
            Activation::Identity => 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InitScheme {
    /// Every weight and bias uniform on `±√(1/fan_in)`.
    FanInUniform,
    /// All parameters zero.
    Zeros,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MLPSpec {
    /// Layer widths from input to the `C` outputs.
    pub widths: Vec<usize>,
    pub activation: Activation,
    pub loss: LossKind,
    #[serde(default = "default_bias")]
    pub bias: bool,
    pub init: InitScheme,
}

fn default_bias() -> bool {
    true
}

/// Flattened parameter vector of an [`MLPSpec`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub values: Vec<f64>,
}

impl WeightVector {
    pub fn new(values: Vec<f64>) -> Self {
        WeightVector { values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.values
    }
}

/// Intermediate values of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    /// `activations[0]` is the input; `activations[l]` the output of layer `l`.
    activations: Vec<Vec<f64>>,
    /// Pre-activations of layers `1..=L`.
    pre: Vec<Vec<f64>>,
}

impl ForwardCache {
    pub fn output(&self) -> &[f64] {
        self.activations.last().expect("cache holds at least the input")
    }
}

#[derive(Debug, Clone, Copy)]
struct LayerLayout {
    fan_in: usize,
    fan_out: usize,
    weight_offset: usize,
    bias_offset: Option<usize>,
}

impl MLPSpec {
    pub fn new(widths: Vec<usize>, activation: Activation, loss: LossKind) -> Result<Self> {
        let spec = MLPSpec {
            widths,
            activation,
            loss,
            bias: true,
            init: InitScheme::FanInUniform,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// Bias-free linear predictor `f(w, x) = Wx` with squared loss.
    pub fn linear(input_dim: usize, output_dim: usize) -> Self {
        MLPSpec {
            widths: vec![input_dim, output_dim],
            activation: Activation::Identity,
            loss: LossKind::Squared,
            bias: false,
            init: InitScheme::Zeros,
        }
    }

    pub fn with_bias(mut self, bias: bool) -> Self {
        self.bias = bias;
        self
    }

    pub fn with_init(mut self, init: InitScheme) -> Self {
        self.init = init;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.widths.len() < 2 {
            return Err(Error::input("an MLP needs at least an input and an output width"));
        }
        if self.widths.contains(&0) {
            return Err(Error::input("layer widths must be positive"));
        }
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.widths[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.widths.last().expect("validated widths")
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }

    fn layers(&self) -> Vec<LayerLayout> {
        let mut offset = 0;
        self.widths
            .windows(2)
            .map(|w| {
                let weight_offset = offset;
                offset += w[0] * w[1];
                let bias_offset = self.bias.then(|| {
                    let b = offset;
                    offset += w[1];
                    b
                });
                LayerLayout {
                    fan_in: w[0],
                    fan_out: w[1],
                    weight_offset,
                    bias_offset,
                }
            })
            .collect()
    }

    pub fn num_params(&self) -> usize {
        self.widths
            .windows(2)
            .map(|w| w[0] * w[1] + if self.bias { w[1] } else { 0 })
            .sum()
    }

    /// Deterministic initialization from `seed` according to `self.init`.
    pub fn init_weights(&self, seed: u64) -> WeightVector {
        let mut values = vec![0.0; self.num_params()];
        if self.init == InitScheme::FanInUniform {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            for layer in self.layers() {
                let bound = (1.0 / layer.fan_in as f64).sqrt();
                let end = layer.weight_offset + layer.fan_in * layer.fan_out;
                for v in &mut values[layer.weight_offset..end] {
                    *v = rng.random_range(-bound..bound);
                }
                if let Some(b) = layer.bias_offset {
                    for v in &mut values[b..b + layer.fan_out] {
                        *v = rng.random_range(-bound..bound);
                    }
                }
            }
        }
        WeightVector::new(values)
    }

    /// Zeroes the final layer so that `f(w, ·) ≡ 0`.
    pub fn zero_output_layer(&self, w: &mut WeightVector) {
        let last = *self.layers().last().expect("at least one layer");
        let end = last.weight_offset + last.fan_in * last.fan_out;
        w.values[last.weight_offset..end].fill(0.0);
        if let Some(b) = last.bias_offset {
            w.values[b..b + last.fan_out].fill(0.0);
        }
    }

    fn check_weights(&self, w: &WeightVector) -> Result<()> {
        if w.len() != self.num_params() {
            return Err(Error::shape(format!(
                "weight vector has {} entries, network has {} parameters",
                w.len(),
                self.num_params()
            )));
        }
        Ok(())
    }

    fn check_input(&self, x: &[f64]) -> Result<()> {
        if x.len() != self.input_dim() {
            return Err(Error::shape(format!(
                "input of length {} for network with input width {}",
                x.len(),
                self.input_dim()
            )));
        }
        Ok(())
    }

    fn check_target(&self, y: &[f64]) -> Result<()> {
        if y.len() != self.output_dim() {
            return Err(Error::shape(format!(
                "target of length {} for network with {} outputs",
                y.len(),
                self.output_dim()
            )));
        }
        self.loss.validate_target(y)
    }

    pub fn forward(&self, w: &WeightVector, x: &[f64]) -> Result<(Vec<f64>, ForwardCache)> {
        self.check_weights(w)?;
        self.check_input(x)?;
        let cache = self.forward_unchecked(&w.values, x);
        Ok((cache.output().to_vec(), cache))
    }

    fn forward_unchecked(&self, w: &[f64], x: &[f64]) -> ForwardCache {
        let layers = self.layers();
        let mut activations = Vec::with_capacity(layers.len() + 1);
        let mut pre = Vec::with_capacity(layers.len());
        activations.push(x.to_vec());
        for (l, layer) in layers.iter().enumerate() {
            let input = &activations[l];
            let mut z = vec![0.0; layer.fan_out];
            for (o, zo) in z.iter_mut().enumerate() {
                let row = &w[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
                *zo = dot(row, input);
                if let Some(b) = layer.bias_offset {
                    *zo += w[b + o];
                }
            }
            let is_output = l + 1 == layers.len();
            let a = if is_output {
                z.clone()
            } else {
                z.iter().map(|&v| self.activation.apply(v)).collect()
            };
            pre.push(z);
            activations.push(a);
        }
        ForwardCache { activations, pre }
    }

    /// Backpropagates an output cotangent `g` into a parameter gradient `∇_w (gᵀ f)`.
    pub fn backward(&self, w: &WeightVector, cache: &ForwardCache, g: &[f64]) -> Vec<f64> {
        let mut grad = vec![0.0; w.len()];
        self.backward_into(&w.values, cache, g, &mut grad);
        grad
    }

    fn backward_into(&self, w: &[f64], cache: &ForwardCache, g: &[f64], grad: &mut [f64]) {
        let layers = self.layers();
        let mut delta = g.to_vec();
        for l in (0..layers.len()).rev() {
            let layer = layers[l];
            let input = &cache.activations[l];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &mut grad[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
                for (gi, xi) in row.iter_mut().zip(input) {
                    *gi += d * xi;
                }
            }
            if let Some(b) = layer.bias_offset {
                for (o, d) in delta.iter().enumerate() {
                    grad[b + o] += d;
                }
            }
            if l == 0 {
                break;
            }
            let below = &cache.pre[l - 1];
            let mut next = vec![0.0; layer.fan_in];
            for (o, d) in delta.iter().enumerate() {
                if *d == 0.0 {
                    continue;
                }
                let row = &w[layer.weight_offset + o * layer.fan_in..][..layer.fan_in];
                for (ni, wi) in next.iter_mut().zip(row) {
                    *ni += d * wi;
                }
            }
            for (ni, zi) in next.iter_mut().zip(below) {
                *ni *= self.activation.derivative(*zi);
            }
            delta = next;
        }
    }

    /// Loss and residual `r = ∂ℓ/∂f` at one sample.
    pub fn loss_and_residual(&self, w: &WeightVector, x: &[f64], y: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check_target(y)?;
        let (f, _) = self.forward(w, x)?;
        Ok(self.loss.value_and_residual(&f, y))
    }

    /// `∇_w ℓ(w, z)`, computed as `∇f(w, x) · r(w, z)` in one backward pass.
    pub fn per_sample_gradient(&self, w: &WeightVector, x: &[f64], y: &[f64]) -> Result<Vec<f64>> {
        self.check_target(y)?;
        let (f, cache) = self.forward(w, x)?;
        let (_, r) = self.loss.value_and_residual(&f, y);
        Ok(self.backward(w, &cache, &r))
    }

    /// Output Jacobian with row `j` equal to `∇_w f⁽ʲ⁾(w, x)` (a `C × |W|`
    /// matrix, the transpose of the `|W| × C` convention).
    pub fn output_jacobian(&self, w: &WeightVector, x: &[f64]) -> Result<DenseMatrix> {
        let (_, cache) = self.forward(w, x)?;
        Ok(self.jacobian_from_cache(w, &cache))
    }

    fn jacobian_from_cache(&self, w: &WeightVector, cache: &ForwardCache) -> DenseMatrix {
        let c = self.output_dim();
        let p = w.len();
        let mut jac = DenseMatrix::zeros(c, p);
        let mut unit = vec![0.0; c];
        for j in 0..c {
            unit.fill(0.0);
            unit[j] = 1.0;
            self.backward_into(&w.values, cache, &unit, jac.row_mut(j));
        }
        jac
    }

    /// `∂²ℓ/∂f²` at one sample.
    pub fn loss_output_hessian(&self, w: &WeightVector, x: &[f64], y: &[f64]) -> Result<DenseMatrix> {
        self.check_target(y)?;
        let (f, _) = self.forward(w, x)?;
        Ok(self.loss.output_hessian(&f, y))
    }

    /// Everything the kernel assembly needs at one sample, from a single forward pass.
    pub fn sample_derivatives(&self, w: &WeightVector, x: &[f64], y: &[f64]) -> Result<SampleDerivatives> {
        self.check_target(y)?;
        let (f, cache) = self.forward(w, x)?;
        let (loss, residual) = self.loss.value_and_residual(&f, y);
        let jacobian = self.jacobian_from_cache(w, &cache);
        let output_hessian = self.loss.output_hessian(&f, y);
        Ok(SampleDerivatives {
            loss,
            residual,
            jacobian,
            output_hessian,
        })
    }

    /// Mean loss over `indices` of `data`.
    pub fn mean_loss(&self, w: &WeightVector, data: &Dataset, indices: &[usize]) -> Result<f64> {
        self.check_weights(w)?;
        self.check_dataset(data)?;
        if indices.is_empty() {
            return Err(Error::input("mean loss over an empty sample set"));
        }
        let total: f64 = indices
            .iter()
            .map(|&i| {
                let cache = self.forward_unchecked(&w.values, data.input(i));
                self.loss.value(cache.output(), data.target(i))
            })
            .sum();
        Ok(total / indices.len() as f64)
    }

    /// Mean loss and its gradient `∇ℓ̄(w, S)` over `indices` of `data`.
    pub fn mean_loss_and_gradient(
        &self,
        w: &WeightVector,
        data: &Dataset,
        indices: &[usize],
    ) -> Result<(f64, Vec<f64>)> {
        self.check_weights(w)?;
        self.check_dataset(data)?;
        if indices.is_empty() {
            return Err(Error::input("mean gradient over an empty sample set"));
        }
        let mut grad = vec![0.0; w.len()];
        let mut total = 0.0;
        for &i in indices {
            let cache = self.forward_unchecked(&w.values, data.input(i));
            let (loss, r) = self.loss.value_and_residual(cache.output(), data.target(i));
            total += loss;
            self.backward_into(&w.values, &cache, &r, &mut grad);
        }
        let inv = 1.0 / indices.len() as f64;
        grad.iter_mut().for_each(|g| *g *= inv);
        Ok((total * inv, grad))
    }

    /// Per-sample gradients for every index, in order.
    pub fn per_sample_gradients(&self, w: &WeightVector, data: &Dataset, indices: &[usize]) -> Result<Vec<Vec<f64>>> {
        self.check_weights(w)?;
        self.check_dataset(data)?;
        Ok(indices
            .iter()
            .map(|&i| {
                let cache = self.forward_unchecked(&w.values, data.input(i));
                let (_, r) = self.loss.value_and_residual(cache.output(), data.target(i));
                self.backward(w, &cache, &r)
            })
            .collect())
    }

    /// Hessian-vector product `∇²ℓ̄(w, S) · v` over all of `data`, by central
    /// differences of the full-batch gradient with step
    /// `h = 1e-4 · (1 + ‖w‖) / (1 + ‖v‖)`.
    pub fn hvp_train_loss(&self, w: &WeightVector, data: &Dataset, v: &[f64]) -> Result<Vec<f64>> {
        if v.len() != w.len() {
            return Err(Error::shape(format!(
                "HVP direction has length {}, weights have {}",
                v.len(),
                w.len()
            )));
        }
        let all: Vec<usize> = (0..data.len()).collect();
        let vnorm = norm2(v);
        if vnorm == 0.0 {
            return Ok(vec![0.0; v.len()]);
        }
        let h = 1e-4 * (1.0 + norm2(&w.values)) / (1.0 + vnorm);
        let plus = WeightVector::new(w.values.iter().zip(v).map(|(a, b)| a + h * b).collect());
        let minus = WeightVector::new(w.values.iter().zip(v).map(|(a, b)| a - h * b).collect());
        let (_, gp) = self.mean_loss_and_gradient(&plus, data, &all)?;
        let (_, gm) = self.mean_loss_and_gradient(&minus, data, &all)?;
        Ok(gp.iter().zip(&gm).map(|(a, b)| (a - b) / (2.0 * h)).collect())
    }

    fn check_dataset(&self, data: &Dataset) -> Result<()> {
        if data.input_dim() != self.input_dim() || data.target_dim() != self.output_dim() {
            return Err(Error::shape(format!(
                "dataset is {}→{}, network is {}→{}",
                data.input_dim(),
                data.target_dim(),
                self.input_dim(),
                self.output_dim()
            )));
        }
        Ok(())
    }
}

/// Per-sample derivative objects at fixed weights.
#[derive(Debug, Clone)]
pub struct SampleDerivatives {
    pub loss: f64,
    pub residual: Vec<f64>,
    /// `C × |W|`, row `j` is `∇_w f⁽ʲ⁾`.
    pub jacobian: DenseMatrix,
    pub output_hessian: DenseMatrix,
}
