use ndarray::{Array1, Array2, Axis};

use super::{Dense, ModelParams};
use crate::error::{Error, Result};

/// Activations saved by [`mlp_forward`] for the backward pass.
#[derive(Debug, Clone)]
pub struct MlpCache {
    /// Input to each layer; `inputs[0]` is the feature matrix.
    inputs: Vec<Array2<f64>>,
    pre: Vec<Array2<f64>>,
    output: Array2<f64>,
}

impl MlpCache {
    pub fn output(&self) -> &Array2<f64> {
        &self.output
    }

    pub fn rows(&self) -> usize {
        self.output.nrows()
    }
}

/// Runs every dense layer row by row. For a tile classifier the single output
/// column holds the tile probabilities; for an attention model it holds the
/// tile embeddings.
pub fn mlp_forward(params: &ModelParams, features: &Array2<f64>) -> Result<(Array2<f64>, MlpCache)> {
    if params.layers.is_empty() {
        return Err(Error::invalid("model has no layers"));
    }
    if features.ncols() != params.input_dim() {
        return Err(Error::DimensionMismatch {
            expected: params.input_dim(),
            actual: features.ncols(),
        });
    }
    let mut inputs = Vec::with_capacity(params.layers.len());
    let mut pre = Vec::with_capacity(params.layers.len());
    let mut x = features.to_owned();
    for layer in &params.layers {
        let z = x.dot(&layer.weight.t()) + &layer.bias;
        let a = z.mapv(|v| layer.activation.apply(v));
        inputs.push(x);
        pre.push(z);
        x = a;
    }
    let cache = MlpCache {
        inputs,
        pre,
        output: x.clone(),
    };
    Ok((x, cache))
}

/// Gradients of every dense layer plus the gradient with respect to the input
/// features, given the upstream gradient on the network output.
pub(crate) fn backward_layers(
    layers: &[Dense],
    cache: &MlpCache,
    grad_output: &Array2<f64>,
) -> Result<(Vec<Dense>, Array2<f64>)> {
    if cache.pre.len() != layers.len() {
        return Err(Error::DimensionMismatch {
            expected: layers.len(),
            actual: cache.pre.len(),
        });
    }
    for (layer, z) in layers.iter().zip(&cache.pre) {
        if z.ncols() != layer.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: layer.output_dim(),
                actual: z.ncols(),
            });
        }
    }
    if grad_output.dim() != cache.output.dim() {
        return Err(Error::DimensionMismatch {
            expected: cache.output.len(),
            actual: grad_output.len(),
        });
    }

    let mut grads: Vec<Dense> = Vec::with_capacity(layers.len());
    let mut upstream = grad_output.to_owned();
    for (k, layer) in layers.iter().enumerate().rev() {
        let z = &cache.pre[k];
        let a = if k + 1 < layers.len() { &cache.inputs[k + 1] } else { &cache.output };
        let mut dz = upstream;
        ndarray::Zip::from(&mut dz)
            .and(z)
            .and(a)
            .for_each(|d, &zv, &av| *d *= layer.activation.derivative(zv, av));
        let weight = dz.t().dot(&cache.inputs[k]);
        let bias: Array1<f64> = dz.sum_axis(Axis(0));
        upstream = dz.dot(&layer.weight);
        grads.push(Dense {
            weight,
            bias,
            activation: layer.activation,
        });
    }
    grads.reverse();
    Ok((grads, upstream))
}

/// Parameter gradients of a tile classifier given `d loss / d prob` per row.
/// The returned value has the shape of `params` (attention tensors, if any,
/// are zero).
pub fn mlp_backward(params: &ModelParams, cache: &MlpCache, grad_probs: &[f64]) -> Result<ModelParams> {
    if params.output_dim() != 1 {
        return Err(Error::invalid("mlp_backward expects a single-output network"));
    }
    if grad_probs.len() != cache.rows() {
        return Err(Error::DimensionMismatch {
            expected: cache.rows(),
            actual: grad_probs.len(),
        });
    }
    let upstream = Array2::from_shape_vec((grad_probs.len(), 1), grad_probs.to_vec())
        .expect("column vector");
    let (layers, _) = backward_layers(&params.layers, cache, &upstream)?;
    let mut grads = params.zeros_like();
    grads.layers = layers;
    Ok(grads)
}
