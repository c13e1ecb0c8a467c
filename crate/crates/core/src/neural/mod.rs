//! Feedforward networks used as device macromodels.
//!
//! An [`Mlp`] carries its own affine input/output normalization so callers
//! always work in physical units. The sensitivity of the outputs to the inputs
//! is extracted with an explicit reverse pass ([`Mlp::input_jacobian`]); the
//! Newton solvers consume that matrix directly.

mod io;
mod presets;
mod train;

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use thiserror::Error;

use crate::numlin::{DenseMatrix, DenseVector};

pub use io::{load_model, read_model, save_model, write_model, FORMAT_VERSION, MAGIC};
pub use presets::{Architecture, Preset};
pub use train::{train, Dataset, Loss, TrainConfig, TrainOutcome};

#[derive(Debug, Error)]
pub enum NeuralError {
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("loss became non-finite at epoch {epoch}")]
    NonFiniteLoss { epoch: usize, last_finite: Box<Mlp> },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("model file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T, E = NeuralError> = std::result::Result<T, E>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Activation {
    Identity,
    Softplus,
    Tanh,
    Square,
}

impl Activation {
    pub const ALL: [Activation; 4] = [
        Activation::Identity,
        Activation::Softplus,
        Activation::Tanh,
        Activation::Square,
    ];

    #[inline]
    pub fn apply(self, a: f64) -> f64 {
        match self {
            Activation::Identity => a,
            // ln(1 + e^a) without overflow for large |a|
            Activation::Softplus => {
                if a > 0.0 {
                    a + (-a).exp().ln_1p()
                } else {
                    a.exp().ln_1p()
                }
            }
            Activation::Tanh => a.tanh(),
            Activation::Square => a * a,
        }
    }

    #[inline]
    pub fn derivative(self, a: f64) -> f64 {
        match self {
            Activation::Identity => 1.0,
            Activation::Softplus => {
                if a >= 0.0 {
                    1.0 / (1.0 + (-a).exp())
                } else {
                    let e = a.exp();
                    e / (1.0 + e)
                }
            }
            Activation::Tanh => {
                let t = a.tanh();
                1.0 - t * t
            }
            Activation::Square => 2.0 * a,
        }
    }

    pub(crate) fn tag(self) -> u8 {
        match self {
            Activation::Identity => 0,
            Activation::Softplus => 1,
            Activation::Tanh => 2,
            Activation::Square => 3,
        }
    }

    pub(crate) fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => Activation::Identity,
            1 => Activation::Softplus,
            2 => Activation::Tanh,
            3 => Activation::Square,
            _ => return None,
        })
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Identity => "identity",
            Activation::Softplus => "softplus",
            Activation::Tanh => "tanh",
            Activation::Square => "square",
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        Activation::ALL
            .into_iter()
            .find(|a| a.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| format!("unknown activation `{s}`"))
    }
}

/// One dense layer: `activation(W x + b)` with `W` stored as out x in.
#[derive(Debug, Clone, PartialEq)]
pub struct Layer {
    pub weights: DenseMatrix,
    pub bias: DenseVector,
    pub activation: Activation,
}

impl Layer {
    pub fn new(weights: DenseMatrix, bias: DenseVector, activation: Activation) -> Result<Self> {
        if bias.len() != weights.rows() {
            return Err(NeuralError::DimensionMismatch(format!(
                "bias has {} entries for {} outputs",
                bias.len(),
                weights.rows()
            )));
        }
        Ok(Self {
            weights,
            bias,
            activation,
        })
    }

    pub fn inputs(&self) -> usize {
        self.weights.cols()
    }

    pub fn outputs(&self) -> usize {
        self.weights.rows()
    }

    fn pre_activation(&self, x: &[f64]) -> DenseVector {
        let mut z = self.weights.matvec(x);
        for (zi, bi) in z.iter_mut().zip(&self.bias) {
            *zi += bi;
        }
        z
    }
}

/// Feedforward network with stored input/output normalization.
///
/// `forward(x) = layers(normalize(x)) * output_scale + output_offset` where
/// `normalize(x) = (x - input_offset) * input_scale`.
#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    layers: Vec<Layer>,
    input_scale: DenseVector,
    input_offset: DenseVector,
    output_scale: DenseVector,
    output_offset: DenseVector,
}

/// Values kept from a forward pass for the reverse sweep.
pub(crate) struct ForwardTrace {
    /// Input to each layer (normalized network input first).
    pub(crate) inputs: Vec<DenseVector>,
    /// Pre-activation of each layer.
    pub(crate) pre: Vec<DenseVector>,
    /// Raw network output before de-normalization.
    pub(crate) output: DenseVector,
}

impl Mlp {
    /// Assembles a network from explicit layers with identity normalization.
    pub fn from_layers(layers: Vec<Layer>) -> Result<Self> {
        let first = layers
            .first()
            .ok_or_else(|| NeuralError::DimensionMismatch("network has no layers".into()))?;
        for pair in layers.windows(2) {
            if pair[0].outputs() != pair[1].inputs() {
                return Err(NeuralError::DimensionMismatch(format!(
                    "layer widths do not chain: {} -> {}",
                    pair[0].outputs(),
                    pair[1].inputs()
                )));
            }
        }
        let n_in = first.inputs();
        let n_out = layers.last().map(Layer::outputs).unwrap_or(0);
        let net = Self {
            layers,
            input_scale: vec![1.0; n_in],
            input_offset: vec![0.0; n_in],
            output_scale: vec![1.0; n_out],
            output_offset: vec![0.0; n_out],
        };
        net.check_finite()?;
        Ok(net)
    }

    /// Randomly initialized network. `sizes` lists every width including the
    /// input and output; `activations` has one entry per weight layer.
    pub fn random(sizes: &[usize], activations: &[Activation], seed: u64) -> Result<Self> {
        if sizes.len() < 2 || activations.len() != sizes.len() - 1 {
            return Err(NeuralError::DimensionMismatch(format!(
                "{} widths need {} activations, got {}",
                sizes.len(),
                sizes.len().saturating_sub(1),
                activations.len()
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let layers = sizes
            .windows(2)
            .zip(activations)
            .map(|(w, &act)| {
                let (fan_in, fan_out) = (w[0], w[1]);
                let data = (0..fan_in * fan_out)
                    .map(|_| init_weight(&mut rng, act, fan_in, fan_out))
                    .collect();
                Layer::new(
                    DenseMatrix::from_row_major(fan_out, fan_in, data).expect("sized"),
                    vec![0.0; fan_out],
                    act,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        Self::from_layers(layers)
    }

    pub fn with_normalization(
        mut self,
        input_scale: DenseVector,
        input_offset: DenseVector,
        output_scale: DenseVector,
        output_offset: DenseVector,
    ) -> Result<Self> {
        let (n_in, n_out) = (self.input_dim(), self.output_dim());
        if input_scale.len() != n_in
            || input_offset.len() != n_in
            || output_scale.len() != n_out
            || output_offset.len() != n_out
        {
            return Err(NeuralError::DimensionMismatch(
                "normalization vectors do not match network dimensions".into(),
            ));
        }
        self.input_scale = input_scale;
        self.input_offset = input_offset;
        self.output_scale = output_scale;
        self.output_offset = output_offset;
        self.check_finite()?;
        Ok(self)
    }

    /// Sets input/output normalization to zero-mean unit-variance over `data`.
    pub fn fit_normalization(&mut self, data: &Dataset) -> Result<()> {
        data.check_dims(self)?;
        let (in_mean, in_std) = column_stats(&data.inputs);
        let (out_mean, out_std) = column_stats(&data.targets);
        self.input_offset = in_mean;
        self.input_scale = in_std.iter().map(|s| 1.0 / s).collect();
        self.output_offset = out_mean;
        self.output_scale = out_std;
        Ok(())
    }

    pub fn input_dim(&self) -> usize {
        self.layers[0].inputs()
    }

    pub fn output_dim(&self) -> usize {
        self.layers[self.layers.len() - 1].outputs()
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    pub(crate) fn layers_mut(&mut self) -> &mut [Layer] {
        &mut self.layers
    }

    pub fn input_scale(&self) -> &[f64] {
        &self.input_scale
    }

    pub fn input_offset(&self) -> &[f64] {
        &self.input_offset
    }

    pub fn output_scale(&self) -> &[f64] {
        &self.output_scale
    }

    pub fn output_offset(&self) -> &[f64] {
        &self.output_offset
    }

    pub fn parameter_count(&self) -> usize {
        self.layers
            .iter()
            .map(|l| l.weights.rows() * l.weights.cols() + l.bias.len())
            .sum()
    }

    fn check_finite(&self) -> Result<()> {
        let finite = self
            .layers
            .iter()
            .all(|l| l.weights.is_finite() && l.bias.iter().all(|v| v.is_finite()))
            && [
                &self.input_scale,
                &self.input_offset,
                &self.output_scale,
                &self.output_offset,
            ]
            .iter()
            .all(|v| v.iter().all(|x| x.is_finite()));
        if finite {
            Ok(())
        } else {
            Err(NeuralError::Format("non-finite parameter".into()))
        }
    }

    fn check_input(&self, input: &[f64]) -> Result<()> {
        if input.len() != self.input_dim() {
            return Err(NeuralError::DimensionMismatch(format!(
                "network expects {} inputs, got {}",
                self.input_dim(),
                input.len()
            )));
        }
        Ok(())
    }

    pub(crate) fn normalize_input(&self, input: &[f64]) -> DenseVector {
        input
            .iter()
            .zip(&self.input_offset)
            .zip(&self.input_scale)
            .map(|((x, o), s)| (x - o) * s)
            .collect()
    }

    pub(crate) fn trace(&self, normalized: DenseVector) -> ForwardTrace {
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut pre = Vec::with_capacity(self.layers.len());
        let mut h = normalized;
        for layer in &self.layers {
            let z = layer.pre_activation(&h);
            let next = z.iter().map(|&a| layer.activation.apply(a)).collect();
            inputs.push(h);
            pre.push(z);
            h = next;
        }
        ForwardTrace { inputs, pre, output: h }
    }

    fn denormalize(&self, raw: &[f64]) -> DenseVector {
        raw.iter()
            .zip(&self.output_scale)
            .zip(&self.output_offset)
            .map(|((y, s), o)| y * s + o)
            .collect()
    }

    /// Evaluates the network on a physical-unit input.
    pub fn forward(&self, input: &[f64]) -> Result<DenseVector> {
        self.check_input(input)?;
        let mut h = self.normalize_input(input);
        for layer in &self.layers {
            h = layer
                .pre_activation(&h)
                .into_iter()
                .map(|a| layer.activation.apply(a))
                .collect();
        }
        Ok(self.denormalize(&h))
    }

    /// Output/input sensitivity (`output_dim x input_dim`) from one forward
    /// pass and one reverse sweep per output.
    pub fn input_jacobian(&self, input: &[f64]) -> Result<DenseMatrix> {
        Ok(self.forward_with_jacobian(input)?.1)
    }

    /// Forward output and input Jacobian sharing a single forward pass.
    pub fn forward_with_jacobian(&self, input: &[f64]) -> Result<(DenseVector, DenseMatrix)> {
        self.check_input(input)?;
        let trace = self.trace(self.normalize_input(input));
        let output = self.denormalize(&trace.output);
        let mut jac = DenseMatrix::zeros(self.output_dim(), self.input_dim());
        for j in 0..self.output_dim() {
            // seed the adjoint with the de-normalization scale of output j
            let mut adj = vec![0.0; self.output_dim()];
            adj[j] = self.output_scale[j];
            let grad = self.backward_to_input(&trace, adj);
            for (c, g) in grad.iter().enumerate() {
                jac[(j, c)] = g * self.input_scale[c];
            }
        }
        Ok((output, jac))
    }

    /// Pulls an adjoint on the raw network output back to the normalized input.
    fn backward_to_input(&self, trace: &ForwardTrace, mut adj: DenseVector) -> DenseVector {
        for (layer, pre) in self.layers.iter().zip(&trace.pre).rev() {
            for (a, z) in adj.iter_mut().zip(pre) {
                *a *= layer.activation.derivative(*z);
            }
            let w = &layer.weights;
            let mut up = vec![0.0; w.cols()];
            for (r, a) in adj.iter().enumerate() {
                if *a == 0.0 {
                    continue;
                }
                for (u, wv) in up.iter_mut().zip(w.row(r)) {
                    *u += a * wv;
                }
            }
            adj = up;
        }
        adj
    }
}

fn init_weight(rng: &mut ChaCha8Rng, act: Activation, fan_in: usize, fan_out: usize) -> f64 {
    match act {
        Activation::Softplus => {
            let n: f64 = rng.sample(StandardNormal);
            n * (2.0 / fan_in as f64).sqrt()
        }
        _ => {
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            rng.random_range(-limit..limit)
        }
    }
}

/// Per-column mean and standard deviation; zero spread maps to unit scale.
fn column_stats(m: &DenseMatrix) -> (DenseVector, DenseVector) {
    let n = m.rows().max(1) as f64;
    let mut mean = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for (acc, v) in mean.iter_mut().zip(m.row(r)) {
            *acc += v;
        }
    }
    mean.iter_mut().for_each(|v| *v /= n);
    let mut var = vec![0.0; m.cols()];
    for r in 0..m.rows() {
        for ((acc, v), mu) in var.iter_mut().zip(m.row(r)).zip(&mean) {
            *acc += (v - mu) * (v - mu);
        }
    }
    let std = var
        .into_iter()
        .map(|v| {
            let s = (v / n).sqrt();
            if s > 1e-300 {
                s
            } else {
                1.0
            }
        })
        .collect();
    (mean, std)
}
