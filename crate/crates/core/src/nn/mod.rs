//! A small feedforward network with hand-written backpropagation.
//!
//! Two model shapes are used: a tile classifier (hidden ReLU layers ending in a
//! single sigmoid unit) and an attention-MIL model whose dense layers embed
//! tiles and whose [`AttentionHead`] pools them into a bag prediction.

mod adam;
mod attention;
mod checkpoint;
mod gradcheck;
pub(crate) mod mlp;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPS_ADAM};
pub use attention::{attention_backward, attention_pool, attention_scores, AttentionCache};
pub use checkpoint::{read_checkpoint, write_checkpoint, Checkpoint, CHECKPOINT_VERSION};
pub use gradcheck::{finite_diff_check, relative_error, GRAD_FLOOR};
pub use mlp::{mlp_backward, mlp_forward, MlpCache};

use ndarray::{Array1, Array2};
use rand::Rng;
use rand_distr::{Distribution, Uniform};

use crate::error::{Error, Result};

/// Hidden units of the attention scorer.
pub const ATTENTION_HIDDEN: usize = 128;

/// Default hidden widths of the tile network.
pub const DEFAULT_HIDDEN: [usize; 2] = [64, 32];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Identity,
}

impl Activation {
    pub fn name(self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::Sigmoid => "sigmoid",
            Activation::Identity => "identity",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "relu" => Some(Activation::Relu),
            "sigmoid" => Some(Activation::Sigmoid),
            "identity" => Some(Activation::Identity),
            _ => None,
        }
    }

    pub(crate) fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Sigmoid => sigmoid(z),
            Activation::Identity => z,
        }
    }

    /// Derivative expressed through the pre-activation `z` and output `a`.
    pub(crate) fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => a * (1.0 - a),
            Activation::Identity => 1.0,
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// Fully connected layer computing `act(x W^T + b)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `out x in`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub activation: Activation,
}

impl Dense {
    pub fn zeros(input: usize, output: usize, activation: Activation) -> Self {
        Dense {
            weight: Array2::zeros((output, input)),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(input: usize, output: usize, activation: Activation, rng: &mut R) -> Self {
        Dense {
            weight: glorot_matrix(output, input, rng),
            bias: Array1::zeros(output),
            activation,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.ncols()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.nrows()
    }
}

fn glorot_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let limit = (6.0 / (rows + cols) as f64).sqrt();
    let dist = Uniform::new_inclusive(-limit, limit).expect("finite bounds");
    Array2::from_shape_simple_fn((rows, cols), || dist.sample(rng))
}

/// Gated-tanh attention pooling: scores `w . tanh(V h_i)`, softmax weights,
/// and a logistic bag classifier on the weighted embedding sum.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionHead {
    /// `H x E`
    pub v: Array2<f64>,
    /// `H`
    pub w: Array1<f64>,
    /// `E`
    pub classifier_weight: Array1<f64>,
    pub classifier_bias: f64,
}

impl AttentionHead {
    pub fn zeros(embedding: usize, hidden: usize) -> Self {
        AttentionHead {
            v: Array2::zeros((hidden, embedding)),
            w: Array1::zeros(hidden),
            classifier_weight: Array1::zeros(embedding),
            classifier_bias: 0.0,
        }
    }

    pub fn glorot<R: Rng + ?Sized>(embedding: usize, hidden: usize, rng: &mut R) -> Self {
        AttentionHead {
            v: glorot_matrix(hidden, embedding, rng),
            w: glorot_matrix(1, hidden, rng).row(0).to_owned(),
            classifier_weight: glorot_matrix(1, embedding, rng).row(0).to_owned(),
            classifier_bias: 0.0,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        self.v.ncols()
    }

    pub fn hidden_dim(&self) -> usize {
        self.v.nrows()
    }
}

/// Network parameters. Gradients and optimizer moments use the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub layers: Vec<Dense>,
    pub attention: Option<AttentionHead>,
}

impl ModelParams {
    /// Tile classifier `input -> hidden.. (relu) -> 1 (sigmoid)`.
    pub fn tile_classifier<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        let mut layers = Vec::with_capacity(hidden.len() + 1);
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Dense::glorot(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        layers.push(Dense::glorot(fan_in, 1, Activation::Sigmoid, rng));
        ModelParams { layers, attention: None }
    }

    /// Attention-MIL model: ReLU embedder followed by an attention head with
    /// [`ATTENTION_HIDDEN`] hidden units.
    pub fn attention_mil<R: Rng + ?Sized>(input: usize, hidden: &[usize], rng: &mut R) -> Self {
        assert!(!hidden.is_empty(), "attention model needs an embedding layer");
        let mut layers = Vec::with_capacity(hidden.len());
        let mut fan_in = input;
        for &h in hidden {
            layers.push(Dense::glorot(fan_in, h, Activation::Relu, rng));
            fan_in = h;
        }
        let attention = Some(AttentionHead::glorot(fan_in, ATTENTION_HIDDEN, rng));
        ModelParams { layers, attention }
    }

    pub fn zeros_like(&self) -> Self {
        ModelParams {
            layers: self
                .layers
                .iter()
                .map(|l| Dense::zeros(l.input_dim(), l.output_dim(), l.activation))
                .collect(),
            attention: self
                .attention
                .as_ref()
                .map(|a| AttentionHead::zeros(a.embedding_dim(), a.hidden_dim())),
        }
    }

    pub fn input_dim(&self) -> usize {
        self.layers.first().map_or(0, Dense::input_dim)
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map_or(0, Dense::output_dim)
    }

    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(Error::invalid("model has no layers"));
        }
        for pair in self.layers.windows(2) {
            if pair[0].output_dim() != pair[1].input_dim() {
                return Err(Error::DimensionMismatch {
                    expected: pair[0].output_dim(),
                    actual: pair[1].input_dim(),
                });
            }
        }
        for l in &self.layers {
            if l.bias.len() != l.output_dim() {
                return Err(Error::DimensionMismatch {
                    expected: l.output_dim(),
                    actual: l.bias.len(),
                });
            }
        }
        match &self.attention {
            Some(head) => {
                if head.embedding_dim() != self.output_dim() {
                    return Err(Error::DimensionMismatch {
                        expected: self.output_dim(),
                        actual: head.embedding_dim(),
                    });
                }
                if head.w.len() != head.hidden_dim() || head.classifier_weight.len() != head.embedding_dim() {
                    return Err(Error::invalid("attention head vectors do not match V"));
                }
            }
            None => {
                let last = self.layers.last().expect("non-empty");
                if last.output_dim() != 1 || last.activation != Activation::Sigmoid {
                    return Err(Error::invalid("tile classifier must end in one sigmoid unit"));
                }
            }
        }
        Ok(())
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn tensors(&self) -> Vec<&[f64]> {
        let mut out: Vec<&[f64]> = Vec::new();
        for l in &self.layers {
            out.push(l.weight.as_slice().expect("standard layout"));
            out.push(l.bias.as_slice().expect("standard layout"));
        }
        if let Some(a) = &self.attention {
            out.push(a.v.as_slice().expect("standard layout"));
            out.push(a.w.as_slice().expect("standard layout"));
            out.push(a.classifier_weight.as_slice().expect("standard layout"));
            out.push(std::slice::from_ref(&a.classifier_bias));
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out: Vec<&mut [f64]> = Vec::new();
        for l in &mut self.layers {
            out.push(l.weight.as_slice_mut().expect("standard layout"));
            out.push(l.bias.as_slice_mut().expect("standard layout"));
        }
        if let Some(a) = &mut self.attention {
            out.push(a.v.as_slice_mut().expect("standard layout"));
            out.push(a.w.as_slice_mut().expect("standard layout"));
            out.push(a.classifier_weight.as_slice_mut().expect("standard layout"));
            out.push(std::slice::from_mut(&mut a.classifier_bias));
        }
        out
    }

    pub fn num_params(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }

    pub fn same_shape(&self, other: &ModelParams) -> bool {
        let a = self.tensors();
        let b = other.tensors();
        a.len() == b.len() && a.iter().zip(&b).all(|(x, y)| x.len() == y.len())
    }

    /// `self += scale * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &ModelParams, scale: f64) {
        for (dst, src) in self.tensors_mut().into_iter().zip(other.tensors()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.tensors().iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

/// Per-tile tumor scores: sigmoid outputs for a tile classifier, min-max
/// scaled attention weights for an attention model.
pub fn tile_scores(params: &ModelParams, features: &Array2<f64>) -> Result<Vec<f64>> {
    let (out, _) = mlp_forward(params, features)?;
    match &params.attention {
        None => Ok(out.column(0).to_vec()),
        Some(_) => {
            let (bag_prob, weights, _) = attention_pool(params, &out)?;
            Ok(attention_scores(&weights, bag_prob))
        }
    }
}
