//! Training loops for the percentage-driven proxy labeler and its baselines.
//!
//! Every method trains on batches of slides with a fixed number of sampled
//! tiles each. Tile-level methods rebuild their targets from the current
//! predictions at every step; the attention model learns from the binary
//! slide label only.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use ndarray::{Array2, Axis};
use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::error::{Error, Result};
use crate::loss::{bce, masked_bce};
use crate::nn::mlp::backward_layers;
use crate::nn::{
    adam_step, attention_backward, attention_pool, mlp_backward, mlp_forward, tile_scores, AdamState, ModelParams,
    DEFAULT_HIDDEN,
};
use crate::proxy::{assign_alphabeta, assign_weseg, supervised_targets, Margins, ProxyTarget};

/// Tiles at or above this probability count as tumor when refining
/// annotations.
pub const REFINE_THRESHOLD: f64 = 0.5;

const SHUFFLE_TAG: u64 = 0x7368_7566;
const SEARCH_TAG: u64 = 0x7365_6172;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Method {
    WeSeg,
    AlphaBeta { alpha: f64, beta: f64 },
    AttentionMil,
    Supervised,
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Method::WeSeg => f.write_str("weseg"),
            Method::AlphaBeta { alpha, beta } => write!(f, "alphabeta-{alpha}-{beta}"),
            Method::AttentionMil => f.write_str("attention_mil"),
            Method::Supervised => f.write_str("supervised"),
        }
    }
}

impl FromStr for Method {
    type Err = Error;

    /// Accepts `weseg`, `attention_mil`, `supervised` and `alphabeta-A-B`.
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weseg" => Ok(Method::WeSeg),
            "attention_mil" => Ok(Method::AttentionMil),
            "supervised" => Ok(Method::Supervised),
            _ => {
                let bad = || Error::invalid(format!("unknown method {s:?}"));
                let rest = s.strip_prefix("alphabeta-").ok_or_else(bad)?;
                let (a, b) = rest.split_once('-').ok_or_else(bad)?;
                let alpha: f64 = a.parse().map_err(|_| bad())?;
                let beta: f64 = b.parse().map_err(|_| bad())?;
                let m = Method::AlphaBeta { alpha, beta };
                m.validate()?;
                Ok(m)
            }
        }
    }
}

impl Serialize for Method {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Method {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

impl Method {
    pub fn validate(&self) -> Result<()> {
        if let Method::AlphaBeta { alpha, beta } = *self {
            if !(0.0..=100.0).contains(&alpha) || !(0.0..=100.0).contains(&beta) || alpha + beta > 100.0 {
                return Err(Error::invalid(format!("invalid alpha/beta {alpha}/{beta}")));
            }
        }
        Ok(())
    }

    pub fn uses_attention(&self) -> bool {
        matches!(self, Method::AttentionMil)
    }

    /// Whether a slide contributes to training and validation. Only the
    /// supervised baseline drops slides, keeping those annotated 0% or 100%.
    pub fn accepts(&self, bag: &SlideBag) -> bool {
        match self {
            Method::Supervised => bag.percent == 0.0 || bag.percent == 100.0,
            _ => true,
        }
    }

    pub fn init_params<R: Rng + ?Sized>(&self, input: usize, hidden: &[usize], rng: &mut R) -> ModelParams {
        if self.uses_attention() {
            ModelParams::attention_mil(input, hidden, rng)
        } else {
            ModelParams::tile_classifier(input, hidden, rng)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub margins: Margins,
    pub slides_per_batch: usize,
    pub tiles_per_slide: usize,
    pub patience: usize,
    pub lr: f64,
    pub max_epochs: usize,
    pub hidden: Vec<usize>,
    pub seed: u64,
    /// Records wall-clock milliseconds per epoch in the history. Off by
    /// default so that histories are reproducible byte for byte.
    pub record_timing: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::WeSeg,
            margins: Margins::zero(),
            slides_per_batch: 8,
            tiles_per_slide: 30,
            patience: 50,
            lr: 1e-3,
            max_epochs: 300,
            hidden: DEFAULT_HIDDEN.to_vec(),
            seed: 0,
            record_timing: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.method.validate()?;
        self.margins.validate()?;
        if self.slides_per_batch == 0 || self.tiles_per_slide == 0 || self.max_epochs == 0 {
            return Err(Error::invalid("batch size, tiles per slide and max epochs must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.hidden.contains(&0) || (self.method.uses_attention() && self.hidden.is_empty()) {
            return Err(Error::invalid(format!("invalid hidden widths {:?}", self.hidden)));
        }
        Ok(())
    }
}

/// Per-dimension affine scaling fitted on training tiles.
#[derive(Debug, Clone, PartialEq)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Standardizer {
    /// Population mean and standard deviation over all tiles of `cohort`.
    /// Constant dimensions get a standard deviation of 1.
    pub fn fit(cohort: &[SlideBag]) -> Result<Self> {
        let dim = cohort.first().ok_or_else(|| Error::invalid("empty cohort"))?.dim();
        let total: usize = cohort.iter().map(SlideBag::n_tiles).sum();
        if total < 2 {
            return Err(Error::invalid("need at least two tiles to fit a standardizer"));
        }
        let mut sum = vec![0.0; dim];
        for bag in cohort {
            if bag.dim() != dim {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    actual: bag.dim(),
                });
            }
            for row in bag.features.rows() {
                for (s, v) in sum.iter_mut().zip(row) {
                    *s += v;
                }
            }
        }
        let mean: Vec<f64> = sum.iter().map(|s| s / total as f64).collect();
        let mut sq = vec![0.0; dim];
        for bag in cohort {
            for row in bag.features.rows() {
                for ((q, v), m) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (v - m) * (v - m);
                }
            }
        }
        let std = sq
            .iter()
            .map(|q| {
                let s = (q / total as f64).sqrt();
                if s > 0.0 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Ok(Standardizer { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn apply(&self, features: &Array2<f64>) -> Result<Array2<f64>> {
        if features.ncols() != self.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.dim(),
                actual: features.ncols(),
            });
        }
        let mut out = features.clone();
        for mut row in out.rows_mut() {
            for ((v, m), s) in row.iter_mut().zip(&self.mean).zip(&self.std) {
                *v = (*v - m) / s;
            }
        }
        Ok(out)
    }

    pub fn apply_bag(&self, bag: &SlideBag) -> Result<SlideBag> {
        Ok(SlideBag {
            features: self.apply(&bag.features)?,
            ..bag.clone()
        })
    }

    pub fn to_pair(&self) -> (Vec<f64>, Vec<f64>) {
        (self.mean.clone(), self.std.clone())
    }

    pub fn from_pair((mean, std): (Vec<f64>, Vec<f64>)) -> Result<Self> {
        if mean.len() != std.len() || std.iter().any(|s| s.is_nan() || *s <= 0.0) {
            return Err(Error::invalid("standardizer needs matching lengths and positive deviations"));
        }
        Ok(Standardizer { mean, std })
    }
}

/// Masked BCE of a tile classifier against fixed targets, with the gradient.
pub fn tile_loss_grad(params: &ModelParams, features: &Array2<f64>, target: &ProxyTarget) -> Result<(f64, ModelParams)> {
    let (out, cache) = mlp_forward(params, features)?;
    let probs = out.column(0).to_vec();
    let (loss, grad_probs) = masked_bce(&probs, target);
    Ok((loss, mlp_backward(params, &cache, &grad_probs)?))
}

/// Bag-level BCE of an attention model, with the gradient.
pub fn bag_loss_grad(params: &ModelParams, features: &Array2<f64>, label: u8) -> Result<(f64, ModelParams)> {
    let (embeddings, cache) = mlp_forward(params, features)?;
    let (bag_prob, _, att_cache) = attention_pool(params, &embeddings)?;
    let (loss, grad_prob) = bce(bag_prob, label);
    let (head, grad_emb) = attention_backward(params, &att_cache, grad_prob)?;
    let (layers, _) = backward_layers(&params.layers, &cache, &grad_emb)?;
    Ok((
        loss,
        ModelParams {
            layers,
            attention: Some(head),
        },
    ))
}

/// Loss and gradient of one slide under `method`. Tile-level targets are
/// derived from the model's current predictions on exactly these tiles.
/// Returns `None` for slides the method does not train on.
pub fn slide_loss_grad(
    params: &ModelParams,
    bag: &SlideBag,
    method: Method,
    margins: &Margins,
) -> Result<Option<(f64, ModelParams)>> {
    let label = u8::from(bag.percent > 0.0);
    let target = match method {
        Method::AttentionMil => return bag_loss_grad(params, &bag.features, label).map(Some),
        Method::Supervised => match supervised_targets(bag) {
            Some(t) => t,
            None => return Ok(None),
        },
        Method::WeSeg | Method::AlphaBeta { .. } => {
            let (out, _) = mlp_forward(params, &bag.features)?;
            let probs = out.column(0).to_vec();
            match method {
                Method::WeSeg => assign_weseg(&probs, bag.percent, margins)?,
                Method::AlphaBeta { alpha, beta } => assign_alphabeta(&probs, label, alpha, beta)?,
                _ => unreachable!(),
            }
        }
    };
    tile_loss_grad(params, &bag.features, &target).map(Some)
}

/// Mean loss and mean gradient over the slides of a batch that the method
/// trains on. Slides are processed in parallel and reduced in batch order.
pub fn batch_gradients(params: &ModelParams, batch: &[SlideBag], config: &TrainConfig) -> Result<(f64, ModelParams)> {
    if batch.is_empty() {
        return Err(Error::invalid("empty batch"));
    }
    let per_slide: Vec<Option<(f64, ModelParams)>> = batch
        .par_iter()
        .map(|bag| slide_loss_grad(params, bag, config.method, &config.margins))
        .collect::<Result<_>>()?;
    let mut grads = params.zeros_like();
    let mut loss = 0.0;
    let mut used = 0usize;
    for (l, g) in per_slide.into_iter().flatten() {
        loss += l;
        grads.add_scaled(&g, 1.0);
        used += 1;
    }
    if used == 0 {
        return Err(Error::invalid(format!("no slide of the batch is usable by {}", config.method)));
    }
    let scale = 1.0 / used as f64;
    let mut mean = params.zeros_like();
    mean.add_scaled(&grads, scale);
    Ok((loss * scale, mean))
}

/// One optimizer update on an already sampled batch. Returns the batch loss.
pub fn train_step(
    params: &mut ModelParams,
    state: &mut AdamState,
    batch: &[SlideBag],
    config: &TrainConfig,
) -> Result<f64> {
    let (loss, grads) = batch_gradients(params, batch, config)?;
    if !loss.is_finite() {
        let ids: Vec<&str> = batch.iter().map(|b| b.id.as_str()).collect();
        return Err(Error::NonFinite(format!("batch loss {loss} on slides {ids:?}")));
    }
    adam_step(params, &grads, state, config.lr)?;
    Ok(loss)
}

/// Picks `k` tiles of a bag: without replacement when it has at least `k`
/// tiles, with replacement otherwise.
pub fn sample_tiles<R: Rng + ?Sized>(bag: &SlideBag, k: usize, rng: &mut R) -> SlideBag {
    let n = bag.n_tiles();
    let rows: Vec<usize> = if n >= k {
        sample(rng, n, k).into_vec()
    } else {
        (0..k).map(|_| rng.random_range(0..n)).collect()
    };
    SlideBag {
        features: bag.features.select(Axis(0), &rows),
        truth: bag.truth.as_ref().map(|t| rows.iter().map(|&r| t[r]).collect()),
        ..bag.clone()
    }
}

/// Mean per-slide loss of the method on full bags, targets built from the
/// current predictions. Slides the method does not use are skipped.
pub fn validation_loss(params: &ModelParams, cohort: &[SlideBag], config: &TrainConfig) -> Result<f64> {
    let losses: Vec<Option<(f64, ModelParams)>> = cohort
        .par_iter()
        .map(|bag| slide_loss_grad(params, bag, config.method, &config.margins))
        .collect::<Result<_>>()?;
    let values: Vec<f64> = losses.into_iter().flatten().map(|(l, _)| l).collect();
    if values.is_empty() {
        return Err(Error::invalid(format!("no validation slide is usable by {}", config.method)));
    }
    Ok(values.iter().sum::<f64>() / values.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_ms: u64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub standardizer: Standardizer,
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

/// Trains from scratch with early stopping on the validation loss.
///
/// The standardizer is fitted on `train` and applied to both cohorts. Each
/// epoch visits every usable training slide once in a seeded order. Training
/// stops when `patience` consecutive epochs fail to improve the best
/// validation loss, counting from the epoch after it, or at `max_epochs`.
/// `on_improve` sees every new best model.
pub fn run_training<F>(
    train: &[SlideBag],
    val: &[SlideBag],
    config: &TrainConfig,
    mut on_improve: F,
) -> Result<TrainOutcome>
where
    F: FnMut(usize, &ModelParams, &Standardizer) -> Result<()>,
{
    config.validate()?;
    let train_ids: std::collections::HashSet<&str> = train.iter().map(|b| b.id.as_str()).collect();
    if let Some(shared) = val.iter().find(|b| train_ids.contains(b.id.as_str())) {
        return Err(Error::invalid(format!("slide {} is in both train and validation", shared.id)));
    }
    let standardizer = Standardizer::fit(train)?;
    let usable: Vec<SlideBag> = train
        .iter()
        .filter(|b| config.method.accepts(b))
        .map(|b| standardizer.apply_bag(b))
        .collect::<Result<_>>()?;
    if usable.is_empty() {
        return Err(Error::invalid(format!("no training slide is usable by {}", config.method)));
    }
    let val: Vec<SlideBag> = val.iter().map(|b| standardizer.apply_bag(b)).collect::<Result<_>>()?;

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut params = config.method.init_params(standardizer.dim(), &config.hidden, &mut rng);
    let mut state = AdamState::new(&params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(config.seed ^ SHUFFLE_TAG);

    let mut best = params.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut stale = 0usize;
    let mut history = Vec::new();
    for epoch in 1..=config.max_epochs {
        let started = Instant::now();
        let mut order: Vec<usize> = (0..usable.len()).collect();
        order.shuffle(&mut order_rng);
        let mut epoch_loss = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.slides_per_batch) {
            let batch: Vec<SlideBag> = chunk
                .iter()
                .map(|&i| sample_tiles(&usable[i], config.tiles_per_slide, &mut order_rng))
                .collect();
            let loss = train_step(&mut params, &mut state, &batch, config)
                .map_err(|e| diagnose(e, epoch, batches))?;
            epoch_loss += loss;
            batches += 1;
        }
        let train_loss = epoch_loss / batches as f64;
        let val_loss = validation_loss(&params, &val, config)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss {val_loss} at epoch {epoch}")));
        }
        let wall_ms = if config.record_timing {
            started.elapsed().as_millis() as u64
        } else {
            0
        };
        history.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr: config.lr,
            wall_ms,
        });
        log::debug!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6}");
        if val_loss < best_val {
            best_val = val_loss;
            best = params.clone();
            best_epoch = epoch;
            stale = 0;
            on_improve(epoch, &best, &standardizer)?;
        } else {
            stale += 1;
            if stale > config.patience {
                log::info!("early stop at epoch {epoch}, best epoch {best_epoch}");
                break;
            }
        }
    }
    Ok(TrainOutcome {
        params: best,
        standardizer,
        history,
        best_epoch,
        best_val_loss: best_val,
    })
}

fn diagnose(e: Error, epoch: usize, batch: usize) -> Error {
    match e {
        Error::NonFinite(what) => Error::NonFinite(format!("{what} (epoch {epoch}, batch {batch})")),
        other => other,
    }
}

/// `10^u` with `u` uniform on `[-6, -3]`.
pub fn sample_lr<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    10f64.powf(rng.random_range(-6.0..=-3.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrialReport {
    pub trial: usize,
    pub lr: f64,
    pub best_val_loss: f64,
    pub best_epoch: usize,
    pub epochs: usize,
}

/// Random search over log-uniform learning rates; the winner has the lowest
/// best validation loss (first trial wins ties).
pub fn lr_random_search(
    train: &[SlideBag],
    val: &[SlideBag],
    base: &TrainConfig,
    trials: usize,
) -> Result<(f64, Vec<TrialReport>)> {
    if trials == 0 {
        return Err(Error::invalid("random search needs at least one trial"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(base.seed ^ SEARCH_TAG);
    let lrs: Vec<f64> = (0..trials).map(|_| sample_lr(&mut rng)).collect();
    let mut reports = Vec::with_capacity(trials);
    for (trial, &lr) in lrs.iter().enumerate() {
        let config = TrainConfig { lr, ..base.clone() };
        let outcome = run_training(train, val, &config, |_, _, _| Ok(()))?;
        log::info!("trial {trial}: lr {lr:.3e} best val {:.6}", outcome.best_val_loss);
        reports.push(TrialReport {
            trial,
            lr,
            best_val_loss: outcome.best_val_loss,
            best_epoch: outcome.best_epoch,
            epochs: outcome.history.len(),
        });
    }
    let best = reports
        .iter()
        .min_by(|a, b| a.best_val_loss.total_cmp(&b.best_val_loss))
        .expect("at least one trial");
    Ok((best.lr, reports))
}

/// Tile scores of a raw (unstandardized) bag.
pub fn predict(params: &ModelParams, standardizer: &Standardizer, bag: &SlideBag) -> Result<Vec<f64>> {
    tile_scores(params, &standardizer.apply(&bag.features)?)
}

/// Replaces each tumor slide's percentage by the share of its tiles scored
/// at or above [`REFINE_THRESHOLD`]. Normal slides keep 0%.
pub fn refine_annotations(params: &ModelParams, standardizer: &Standardizer, cohort: &[SlideBag]) -> Result<Vec<SlideBag>> {
    cohort
        .par_iter()
        .map(|bag| {
            let mut out = bag.clone();
            if bag.label() == 0 {
                out.percent = 0.0;
                return Ok(out);
            }
            let scores = predict(params, standardizer, bag)?;
            let above = scores.iter().filter(|&&s| s >= REFINE_THRESHOLD).count();
            out.percent = 100.0 * above as f64 / scores.len() as f64;
            Ok(out)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Activation;
    use crate::synth::{gen_feature_bags, SynthSpec};
    use ndarray::array;

    fn bag(id: &str, features: Array2<f64>, percent: f64) -> SlideBag {
        SlideBag::new(id, features, percent, None, None).unwrap()
    }

    fn random_bag(id: &str, n: usize, dim: usize, percent: f64, seed: u64) -> SlideBag {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = Array2::from_shape_fn((n, dim), |_| rng.random_range(-2.0..2.0));
        bag(id, f, percent)
    }

    fn small_config(method: Method) -> TrainConfig {
        TrainConfig {
            method,
            hidden: vec![8],
            max_epochs: 20,
            lr: 1e-3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn method_strings_round_trip() {
        for m in [
            Method::WeSeg,
            Method::AttentionMil,
            Method::Supervised,
            Method::AlphaBeta { alpha: 50.0, beta: 0.0 },
            Method::AlphaBeta { alpha: 12.5, beta: 30.0 },
        ] {
            assert_eq!(m.to_string().parse::<Method>().unwrap(), m);
        }
        assert_eq!(Method::AlphaBeta { alpha: 75.0, beta: 0.0 }.to_string(), "alphabeta-75-0");
        assert!("alphabeta-80-30".parse::<Method>().is_err());
        assert!("mil".parse::<Method>().is_err());
    }

    #[test]
    fn standardizer_two_points() {
        let s = Standardizer::fit(&[bag("a", array![[0.0, 5.0], [2.0, 5.0]], 0.0)]).unwrap();
        assert_eq!(s.mean, vec![1.0, 5.0]);
        assert_eq!(s.std, vec![1.0, 1.0]);
        let z = s.apply(&array![[0.0, 5.0], [2.0, 5.0]]).unwrap();
        assert_eq!(z, array![[-1.0, 0.0], [1.0, 0.0]]);
        assert!(Standardizer::fit(&[]).is_err());
        assert!(Standardizer::fit(&[bag("a", array![[1.0]], 0.0)]).is_err());
    }

    #[test]
    fn standardized_moments() {
        let cohort = vec![random_bag("a", 50, 4, 10.0, 1), random_bag("b", 31, 4, 0.0, 2)];
        let s = Standardizer::fit(&cohort).unwrap();
        let scaled: Vec<SlideBag> = cohort.iter().map(|b| s.apply_bag(b).unwrap()).collect();
        let again = Standardizer::fit(&scaled).unwrap();
        for j in 0..4 {
            assert!(again.mean[j].abs() <= 1e-9);
            assert!((again.std[j] - 1.0).abs() <= 1e-6);
        }
    }

    #[test]
    fn supervised_on_normal_slides_is_plain_bce() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let params = ModelParams::tile_classifier(3, &[5], &mut rng);
        let b = random_bag("a", 12, 3, 0.0, 5);
        let (loss, _) = slide_loss_grad(&params, &b, Method::Supervised, &Margins::zero())
            .unwrap()
            .unwrap();
        let probs = tile_scores(&params, &b.features).unwrap();
        let expected = probs.iter().map(|&q| -(1.0 - q).ln()).sum::<f64>() / probs.len() as f64;
        assert!((loss - expected).abs() < 1e-12);
        let partial = random_bag("b", 12, 3, 40.0, 6);
        assert!(slide_loss_grad(&params, &partial, Method::Supervised, &Margins::zero())
            .unwrap()
            .is_none());
    }

    #[test]
    fn weseg_degenerates_to_supervised() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let params = ModelParams::tile_classifier(4, &[6, 3], &mut rng);
        for percent in [0.0, 100.0] {
            let batch: Vec<SlideBag> = (0..3)
                .map(|i| random_bag(&format!("s{i}"), 20 + i, 4, percent, 10 + i as u64))
                .collect();
            let weseg = batch_gradients(&params, &batch, &small_config(Method::WeSeg)).unwrap();
            let sup = batch_gradients(&params, &batch, &small_config(Method::Supervised)).unwrap();
            assert_eq!(weseg.0.to_bits(), sup.0.to_bits());
            assert_eq!(weseg.1, sup.1);
        }
    }

    #[test]
    fn alphabeta_normal_slide_targets_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let params = ModelParams::tile_classifier(2, &[4], &mut rng);
        let b = random_bag("n", 10, 2, 0.0, 1);
        let ab = slide_loss_grad(&params, &b, Method::AlphaBeta { alpha: 50.0, beta: 50.0 }, &Margins::zero())
            .unwrap()
            .unwrap();
        let sup = slide_loss_grad(&params, &b, Method::Supervised, &Margins::zero()).unwrap().unwrap();
        assert_eq!(ab.0, sup.0);
    }

    #[test]
    fn attention_gradient_matches_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut params = ModelParams::attention_mil(3, &[4], &mut rng);
        params.layers[0].activation = Activation::Sigmoid;
        let b = random_bag("a", 7, 3, 30.0, 13);
        let err = crate::nn::finite_diff_check(|p| bag_loss_grad(p, &b.features, 1).unwrap(), &params, 1e-5, 10_000);
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn tile_sampling_policy() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut b = random_bag("a", 40, 2, 50.0, 0);
        b.truth = Some((0..40).map(|i| (i % 2) as u8).collect());
        let s = sample_tiles(&b, 30, &mut rng);
        assert_eq!(s.n_tiles(), 30);
        let mut rows: Vec<String> = s.features.rows().into_iter().map(|r| format!("{r}")).collect();
        rows.sort();
        rows.dedup();
        assert_eq!(rows.len(), 30);
        let small = sample_tiles(&random_bag("b", 5, 2, 50.0, 1), 30, &mut rng);
        assert_eq!(small.n_tiles(), 30);
    }

    #[test]
    fn empty_batch_is_an_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let params = ModelParams::tile_classifier(2, &[3], &mut rng);
        assert!(batch_gradients(&params, &[], &small_config(Method::WeSeg)).is_err());
    }

    fn tiny_cohort(count: usize, seed: u64) -> Vec<SlideBag> {
        let mut spec = SynthSpec::with_separation(4, 2.0, seed);
        spec.min_tiles = 10;
        spec.max_tiles = 20;
        gen_feature_bags(&spec, count).unwrap()
    }

    fn renamed(mut cohort: Vec<SlideBag>, prefix: &str) -> Vec<SlideBag> {
        for b in &mut cohort {
            b.id = format!("{prefix}{}", b.id);
        }
        cohort
    }

    #[test]
    fn patience_zero_stops_after_second_epoch() {
        let train = renamed(tiny_cohort(16, 1), "t");
        let val = renamed(tiny_cohort(4, 2), "v");
        let config = TrainConfig {
            patience: 0,
            lr: 1e-300,
            ..small_config(Method::WeSeg)
        };
        let out = run_training(&train, &val, &config, |_, _, _| Ok(())).unwrap();
        assert_eq!(out.history.len(), 2);
        assert_eq!(out.best_epoch, 1);
    }

    #[test]
    fn training_is_deterministic_and_keeps_best() {
        let train = renamed(tiny_cohort(24, 3), "t");
        let val = renamed(tiny_cohort(6, 4), "v");
        let config = small_config(Method::WeSeg);
        let mut improvements = Vec::new();
        let a = run_training(&train, &val, &config, |e, _, _| {
            improvements.push(e);
            Ok(())
        })
        .unwrap();
        let b = run_training(&train, &val, &config, |_, _, _| Ok(())).unwrap();
        assert_eq!(a.history, b.history);
        assert_eq!(a.params, b.params);
        assert_eq!(improvements.last(), Some(&a.best_epoch));
        assert!(a.history.iter().all(|r| a.best_val_loss <= r.val_loss));
        assert!(a.history.iter().all(|r| r.wall_ms == 0));
        assert_eq!(validation_loss(&a.params, &standardize(&a.standardizer, &val), &config).unwrap(), a.best_val_loss);
    }

    fn standardize(s: &Standardizer, cohort: &[SlideBag]) -> Vec<SlideBag> {
        cohort.iter().map(|b| s.apply_bag(b).unwrap()).collect()
    }

    #[test]
    fn overlapping_splits_are_rejected() {
        let train = tiny_cohort(4, 1);
        assert!(run_training(&train, &train[..1], &small_config(Method::WeSeg), |_, _, _| Ok(())).is_err());
    }

    #[test]
    fn each_method_trains() {
        let train = renamed(tiny_cohort(20, 5), "t");
        let val = renamed(tiny_cohort(20, 6), "v");
        for method in [
            Method::WeSeg,
            Method::AlphaBeta { alpha: 50.0, beta: 50.0 },
            Method::AttentionMil,
        ] {
            let config = TrainConfig {
                max_epochs: 3,
                ..small_config(method)
            };
            let out = run_training(&train, &val, &config, |_, _, _| Ok(())).unwrap();
            assert!(!out.history.is_empty());
            assert!(out.params.all_finite());
            let scores = predict(&out.params, &out.standardizer, &val[0]).unwrap();
            assert!(scores.iter().all(|s| (0.0..=1.0).contains(s)));
        }
    }

    #[test]
    fn lr_samples_stay_in_range() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..10_000 {
            let lr = sample_lr(&mut rng);
            assert!((1e-6..=1e-3).contains(&lr));
        }
    }

    #[test]
    fn search_single_trial_and_reproducibility() {
        let train = renamed(tiny_cohort(16, 7), "t");
        let val = renamed(tiny_cohort(4, 8), "v");
        let base = TrainConfig {
            max_epochs: 3,
            ..small_config(Method::WeSeg)
        };
        let (lr, reports) = lr_random_search(&train, &val, &base, 1).unwrap();
        assert_eq!(reports.len(), 1);
        assert_eq!(lr, reports[0].lr);
        let a = lr_random_search(&train, &val, &base, 3).unwrap();
        let b = lr_random_search(&train, &val, &base, 3).unwrap();
        assert_eq!(a, b);
        assert!(lr_random_search(&train, &val, &base, 0).is_err());
    }

    #[test]
    fn refinement_counts_tiles_above_threshold() {
        // one sigmoid unit reading the first feature with unit weight
        let mut params = ModelParams::tile_classifier(1, &[], &mut ChaCha8Rng::seed_from_u64(0));
        params.layers[0].weight[[0, 0]] = 1.0;
        params.layers[0].bias[0] = 0.0;
        let identity = Standardizer {
            mean: vec![0.0],
            std: vec![1.0],
        };
        let half = bag("h", array![[2.0], [-2.0], [0.0], [-1.0]], 30.0);
        let high = bag("a", array![[3.0], [4.0]], 10.0);
        let normal = bag("n", array![[5.0], [5.0]], 0.0);
        let out = refine_annotations(&params, &identity, &[half, high, normal]).unwrap();
        assert_eq!(out[0].percent, 50.0);
        assert_eq!(out[1].percent, 100.0);
        assert_eq!(out[2].percent, 0.0);
    }
}
