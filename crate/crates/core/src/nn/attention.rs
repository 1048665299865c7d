use ndarray::{Array1, Array2, Axis};

use super::{sigmoid, AttentionHead, ModelParams};
use crate::error::{Error, Result};

#[derive(Debug, Clone)]
pub struct AttentionCache {
    embeddings: Array2<f64>,
    /// `tanh(V h_i)`, `n x H`
    gated: Array2<f64>,
    weights: Array1<f64>,
    pooled: Array1<f64>,
    bag_prob: f64,
}

fn head(params: &ModelParams) -> Result<&AttentionHead> {
    params
        .attention
        .as_ref()
        .ok_or_else(|| Error::invalid("model has no attention head"))
}

/// Pools tile embeddings into a bag probability.
///
/// Returns the bag probability, the softmax attention weights (a point of the
/// probability simplex) and the cache for [`attention_backward`].
pub fn attention_pool(params: &ModelParams, embeddings: &Array2<f64>) -> Result<(f64, Vec<f64>, AttentionCache)> {
    let head = head(params)?;
    if embeddings.nrows() == 0 {
        return Err(Error::invalid("empty bag"));
    }
    if embeddings.ncols() != head.embedding_dim() {
        return Err(Error::DimensionMismatch {
            expected: head.embedding_dim(),
            actual: embeddings.ncols(),
        });
    }
    let gated = embeddings.dot(&head.v.t()).mapv(f64::tanh);
    let scores = gated.dot(&head.w);
    let max = scores.fold(f64::NEG_INFINITY, |m, &s| m.max(s));
    let mut weights = scores.mapv(|s| (s - max).exp());
    let total = weights.sum();
    weights /= total;
    let pooled = weights.dot(embeddings);
    let bag_prob = sigmoid(head.classifier_weight.dot(&pooled) + head.classifier_bias);
    let out = weights.to_vec();
    let cache = AttentionCache {
        embeddings: embeddings.to_owned(),
        gated,
        weights,
        pooled,
        bag_prob,
    };
    Ok((bag_prob, out, cache))
}

/// Backpropagates `d loss / d bag_prob` through the pooling. Returns the head
/// gradients and the gradient with respect to the embeddings.
pub fn attention_backward(
    params: &ModelParams,
    cache: &AttentionCache,
    grad_bag_prob: f64,
) -> Result<(AttentionHead, Array2<f64>)> {
    let head = head(params)?;
    if cache.embeddings.ncols() != head.embedding_dim() || cache.gated.ncols() != head.hidden_dim() {
        return Err(Error::invalid("attention cache does not match the head"));
    }
    let p = cache.bag_prob;
    let d_logit = grad_bag_prob * p * (1.0 - p);
    let classifier_weight = &cache.pooled * d_logit;
    let classifier_bias = d_logit;
    let d_pooled = &head.classifier_weight * d_logit;

    // pooled = sum_i a_i h_i
    let a = &cache.weights;
    let mut d_emb = Array2::zeros(cache.embeddings.raw_dim());
    for (mut row, &ai) in d_emb.axis_iter_mut(Axis(0)).zip(a.iter()) {
        row.assign(&(&d_pooled * ai));
    }
    let d_a = cache.embeddings.dot(&d_pooled);
    // softmax Jacobian
    let mean = a.dot(&d_a);
    let d_scores = a * &(d_a - mean);

    let w = d_scores.dot(&cache.gated);
    let mut d_pre = Array2::zeros(cache.gated.raw_dim());
    for ((mut row, g_row), &ds) in d_pre
        .axis_iter_mut(Axis(0))
        .zip(cache.gated.axis_iter(Axis(0)))
        .zip(d_scores.iter())
    {
        ndarray::Zip::from(&mut row)
            .and(&g_row)
            .and(&head.w)
            .for_each(|d, &g, &wk| *d = ds * wk * (1.0 - g * g));
    }
    let v = d_pre.t().dot(&cache.embeddings);
    d_emb += &d_pre.dot(&head.v);

    Ok((
        AttentionHead {
            v,
            w,
            classifier_weight,
            classifier_bias,
        },
        d_emb,
    ))
}

/// Tile scores from attention weights: min-max scaled, all zero when the bag is
/// predicted normal (`bag_prob < 0.5`), all 0.5 when the weights are uniform.
pub fn attention_scores(weights: &[f64], bag_prob: f64) -> Vec<f64> {
    if bag_prob < 0.5 {
        return vec![0.0; weights.len()];
    }
    let min = weights.iter().copied().fold(f64::INFINITY, f64::min);
    let max = weights.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == min {
        return vec![0.5; weights.len()];
    }
    weights.iter().map(|&a| (a - min) / (max - min)).collect()
}
