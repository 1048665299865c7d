//! Synthetic cohorts: Gaussian tile features, raster slides, and a noise model
//! that rounds annotations the way human estimates cluster on multiples of 5
//! and 20.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal as NormalDist};

use crate::bag::SlideBag;
use crate::error::{Error, Result};
use crate::pnm::RgbImage;

/// Share of normal slides in the reference cohort (2248 of 12783).
pub const NORMAL_SLIDE_WEIGHT: f64 = 2248.0 / 12783.0;

/// Reported incidences among non-zero annotations.
pub const MULTIPLE_OF_20_INCIDENCE: f64 = 0.449;
pub const MULTIPLE_OF_5_INCIDENCE: f64 = 0.891;

const NOISE_STREAM_TAG: u64 = 0x6e6f_6973_655f_7631;

/// Per-slide generator: the root seed with the slide index as ChaCha stream.
pub fn slide_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthSpec {
    pub mu0: Vec<f64>,
    pub mu1: Vec<f64>,
    /// Shared per-dimension standard deviation.
    pub sigma: f64,
    pub min_tiles: usize,
    pub max_tiles: usize,
    /// Probability that a slide is normal (percent 0).
    pub normal_weight: f64,
    pub seed: u64,
}

impl SynthSpec {
    /// Benign mean at the origin, tumor mean along the diagonal so that the
    /// Euclidean separation equals `separation * sigma`.
    pub fn with_separation(dim: usize, separation: f64, seed: u64) -> Self {
        let shift = separation / (dim as f64).sqrt();
        SynthSpec {
            mu0: vec![0.0; dim],
            mu1: vec![shift; dim],
            sigma: 1.0,
            min_tiles: 40,
            max_tiles: 120,
            normal_weight: NORMAL_SLIDE_WEIGHT,
            seed,
        }
    }

    pub fn dim(&self) -> usize {
        self.mu0.len()
    }

    /// `|mu1 - mu0| / sigma`.
    pub fn separation(&self) -> f64 {
        let d2: f64 = self.mu0.iter().zip(&self.mu1).map(|(a, b)| (b - a) * (b - a)).sum();
        d2.sqrt() / self.sigma
    }

    /// AUC of the optimal tile scorer, `Phi(d' / sqrt 2)`.
    pub fn bayes_auc(&self) -> f64 {
        NormalDist::standard().cdf(self.separation() / std::f64::consts::SQRT_2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mu0.is_empty() || self.mu0.len() != self.mu1.len() {
            return Err(Error::invalid("class means must be non-empty and of equal length"));
        }
        if !self.sigma.is_finite() || self.sigma <= 0.0 {
            return Err(Error::invalid(format!("sigma must be positive, got {}", self.sigma)));
        }
        if self.separation().is_nan() || self.separation() <= 0.0 {
            return Err(Error::invalid("class means coincide"));
        }
        if self.min_tiles == 0 || self.min_tiles > self.max_tiles {
            return Err(Error::invalid(format!(
                "invalid tile range [{}, {}]",
                self.min_tiles, self.max_tiles
            )));
        }
        if !(0.0..=1.0).contains(&self.normal_weight) {
            return Err(Error::invalid(format!("normal weight {} outside [0, 1]", self.normal_weight)));
        }
        Ok(())
    }

    /// Point mass at 0 with weight `normal_weight`, otherwise an integer
    /// percentage uniform on `1..=100`.
    pub fn sample_percent<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.normal_weight {
            0.0
        } else {
            rng.random_range(1..=100u32) as f64
        }
    }

    /// Support of the non-zero percentage distribution with its weights.
    pub fn nonzero_support(&self) -> Vec<(f64, f64)> {
        (1..=100).map(|p| (p as f64, 0.01)).collect()
    }
}

/// Number of tumor tiles in a slide of `n` tiles with the given percentage.
pub fn tumor_tiles(n: usize, percent: f64) -> usize {
    ((n as f64 * percent / 100.0 + 0.5).floor() as usize).min(n)
}

fn feature_bag(spec: &SynthSpec, index: usize) -> SlideBag {
    let mut rng = slide_rng(spec.seed, index as u64);
    let percent = spec.sample_percent(&mut rng);
    let n = rng.random_range(spec.min_tiles..=spec.max_tiles);
    let k = tumor_tiles(n, percent);
    let mut truth: Vec<u8> = (0..n).map(|i| u8::from(i < k)).collect();
    truth.shuffle(&mut rng);
    let dim = spec.dim();
    let mut features = Array2::zeros((n, dim));
    for (i, &t) in truth.iter().enumerate() {
        let mu = if t == 1 { &spec.mu1 } else { &spec.mu0 };
        for j in 0..dim {
            let z: f64 = StandardNormal.sample(&mut rng);
            // stored on disk as f32
            features[[i, j]] = (mu[j] + spec.sigma * z) as f32 as f64;
        }
    }
    SlideBag {
        id: format!("slide-{index:05}"),
        features,
        percent,
        slide_label: Some(u8::from(percent > 0.0)),
        truth: Some(truth),
        true_percent: Some(percent),
    }
}

/// `count` slides with per-tile truth. Slide `i` depends only on
/// `(spec, i)`, so generation order does not matter.
pub fn gen_feature_bags(spec: &SynthSpec, count: usize) -> Result<Vec<SlideBag>> {
    spec.validate()?;
    use rayon::prelude::*;
    Ok((0..count).into_par_iter().map(|i| feature_bag(spec, i)).collect())
}

/// Geometry and tissue layout of synthetic raster slides.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RasterSpec {
    pub width: usize,
    pub height: usize,
    pub tile_size: usize,
    pub overlap: usize,
    /// Fraction of columns, from the left, covered by tissue.
    pub tissue_fraction: f64,
}

impl Default for RasterSpec {
    fn default() -> Self {
        RasterSpec {
            width: 512,
            height: 384,
            tile_size: 64,
            overlap: 16,
            tissue_fraction: 0.75,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RasterSlide {
    pub image: RgbImage,
    /// Row-major per-pixel tumor mask.
    pub truth: Vec<u8>,
    pub tissue: Vec<bool>,
}

impl RasterSlide {
    /// Tumor share of the tissue area, in percent.
    pub fn tumor_percent(&self) -> f64 {
        let tissue = self.tissue.iter().filter(|&&t| t).count();
        let tumor = self.truth.iter().filter(|&&t| t == 1).count();
        if tissue == 0 {
            0.0
        } else {
            100.0 * tumor as f64 / tissue as f64
        }
    }
}

const BACKGROUND_RGB: [f64; 3] = [240.0, 240.0, 242.0];
const BENIGN_RGB: [f64; 3] = [222.0, 160.0, 196.0];
const TUMOR_RGB: [f64; 3] = [150.0, 80.0, 158.0];
const TEXTURE_STD: f64 = 22.0;

/// Raster slide whose left `tissue_fraction` of columns is tissue; tumor fills
/// the tissue column by column until it covers `percent`% of it. The rest of
/// the image is near-white background.
pub fn gen_raster_slide<R: Rng + ?Sized>(raster: &RasterSpec, percent: f64, rng: &mut R) -> Result<RasterSlide> {
    let (w, h) = (raster.width, raster.height);
    if w < raster.tile_size || h < raster.tile_size {
        return Err(Error::invalid(format!(
            "raster {w}x{h} smaller than tile size {}",
            raster.tile_size
        )));
    }
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::invalid(format!("percent {percent} outside [0, 100]")));
    }
    let tissue_cols = ((w as f64 * raster.tissue_fraction).round() as usize).min(w);
    let tissue_area = tissue_cols * h;
    let tumor_px = ((tissue_area as f64 * percent / 100.0).round() as usize).min(tissue_area);
    let achieved = if tissue_area == 0 { 0.0 } else { 100.0 * tumor_px as f64 / tissue_area as f64 };
    if tissue_area == 0 && percent > 0.0 || (achieved - percent).abs() > 1.0 {
        return Err(Error::invalid(format!(
            "cannot place {percent}% tumor in {tissue_area} tissue pixels"
        )));
    }

    let noise = Normal::new(0.0, TEXTURE_STD).expect("positive std");
    let mut image = RgbImage::new(w, h);
    let mut truth = vec![0u8; w * h];
    let mut tissue = vec![false; w * h];
    // column-major fill so the tumor is one contiguous block on the left
    let mut placed = 0;
    for x in 0..w {
        for y in 0..h {
            let idx = y * w + x;
            let (base, jitter) = if x < tissue_cols {
                tissue[idx] = true;
                if placed < tumor_px {
                    placed += 1;
                    truth[idx] = 1;
                    (TUMOR_RGB, TEXTURE_STD)
                } else {
                    (BENIGN_RGB, TEXTURE_STD)
                }
            } else {
                (BACKGROUND_RGB, 6.0)
            };
            let mut px = [0u8; 3];
            for c in 0..3 {
                let v = base[c] + noise.sample(rng) * jitter / TEXTURE_STD;
                px[c] = v.round().clamp(0.0, 255.0) as u8;
            }
            image.set_pixel(x, y, px);
        }
    }
    Ok(RasterSlide { image, truth, tissue })
}

/// Annotation rounding: with probability `q20` to the nearest multiple of 20,
/// else with probability `q5` to the nearest multiple of 5, else unchanged.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub q20: f64,
    pub q5: f64,
}

fn nearest_multiple(p: f64, step: f64) -> f64 {
    (p / step + 0.5).floor() * step
}

/// Nearest positive multiple of 5 (a non-zero estimate never becomes 0).
fn round_to_5(p: f64) -> f64 {
    nearest_multiple(p, 5.0).max(5.0)
}

/// Nearest multiple of 20. Below 10 that would be 0, and 20 lies more than
/// 10 points away, so those values are rounded to 5 instead.
fn round_to_20(p: f64) -> f64 {
    let r = nearest_multiple(p, 20.0);
    if r == 0.0 {
        round_to_5(p)
    } else {
        r
    }
}

fn is_multiple(p: f64, step: i64) -> bool {
    (p.round() as i64) % step == 0
}

#[derive(Debug, Clone, Copy, Default)]
struct Incidence {
    m20: f64,
    m5: f64,
}

fn incidence(support: &[(f64, f64)], round: impl Fn(f64) -> f64) -> Incidence {
    let total: f64 = support.iter().map(|s| s.1).sum();
    let mut inc = Incidence::default();
    for &(p, w) in support {
        let r = round(p);
        if is_multiple(r, 20) {
            inc.m20 += w;
        }
        if is_multiple(r, 5) {
            inc.m5 += w;
        }
    }
    inc.m20 /= total;
    inc.m5 /= total;
    inc
}

impl NoiseModel {
    pub const IDENTITY: NoiseModel = NoiseModel { q20: 0.0, q5: 0.0 };

    /// Solves for `(q20, q5)` so that, over the non-zero percentages in
    /// `support` (value, weight), the perturbed annotations are multiples of
    /// 20 and of 5 with the requested incidences.
    pub fn calibrate(support: &[(f64, f64)], target20: f64, target5: f64) -> Result<Self> {
        if support.is_empty() {
            return Err(Error::invalid("empty percentage support"));
        }
        let keep = incidence(support, |p| p);
        let by20 = incidence(support, round_to_20);
        let by5 = incidence(support, round_to_5);
        if (by5.m5 - keep.m5).abs() < 1e-15 {
            return Err(Error::invalid("multiple-of-5 rounding has no effect on this support"));
        }
        // q5 that matches the multiple-of-5 target for a given q20
        let q5_for = |q20: f64| ((target5 - q20 * by20.m5) / (1.0 - q20) - keep.m5) / (by5.m5 - keep.m5);
        let residual = |q20: f64| {
            let q5 = q5_for(q20);
            q20 * by20.m20 + (1.0 - q20) * (q5 * by5.m20 + (1.0 - q5) * keep.m20) - target20
        };
        let feasible = |q20: f64| (0.0..=1.0).contains(&q5_for(q20));

        let steps = 10_000;
        let grid: Vec<f64> = (0..steps).map(|i| i as f64 / steps as f64).collect();
        for pair in grid.windows(2) {
            let (mut lo, mut hi) = (pair[0], pair[1]);
            if !(feasible(lo) && feasible(hi)) {
                continue;
            }
            let (r_lo, r_hi) = (residual(lo), residual(hi));
            if r_lo == 0.0 {
                return Ok(NoiseModel { q20: lo, q5: q5_for(lo) });
            }
            if r_lo.signum() == r_hi.signum() {
                continue;
            }
            for _ in 0..100 {
                let mid = 0.5 * (lo + hi);
                if residual(mid).signum() == r_lo.signum() {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let q20 = 0.5 * (lo + hi);
            return Ok(NoiseModel { q20, q5: q5_for(q20).clamp(0.0, 1.0) });
        }
        Err(Error::invalid(format!(
            "no rounding probabilities reach {target20} / {target5} on this support"
        )))
    }

    /// Calibrated against the reported incidences under the generator's
    /// percentage distribution.
    pub fn reported(spec: &SynthSpec) -> Result<Self> {
        Self::calibrate(&spec.nonzero_support(), MULTIPLE_OF_20_INCIDENCE, MULTIPLE_OF_5_INCIDENCE)
    }

    pub fn perturb<R: Rng + ?Sized>(&self, percent_true: f64, rng: &mut R) -> f64 {
        // both draws happen unconditionally to keep the stream aligned
        let u20: f64 = rng.random();
        let u5: f64 = rng.random();
        if percent_true <= 0.0 {
            return 0.0;
        }
        let noisy = if u20 < self.q20 {
            round_to_20(percent_true)
        } else if u5 < self.q5 {
            round_to_5(percent_true)
        } else {
            percent_true
        };
        noisy.clamp(0.0, 100.0)
    }
}

/// Perturbs one annotation with a generator seeded from `noise_seed`.
pub fn perturb_annotation(model: &NoiseModel, percent_true: f64, noise_seed: u64) -> f64 {
    model.perturb(percent_true, &mut ChaCha8Rng::seed_from_u64(noise_seed))
}

/// Replaces each slide's percentage by a perturbed copy, keeping the original
/// in `true_percent`. Slide `i` uses its own noise stream.
pub fn perturb_cohort(slides: &mut [SlideBag], model: &NoiseModel, seed: u64) {
    for (i, bag) in slides.iter_mut().enumerate() {
        let mut rng = slide_rng(seed ^ NOISE_STREAM_TAG, i as u64);
        let truth = bag.true_percent.unwrap_or(bag.percent);
        bag.true_percent = Some(truth);
        bag.percent = model.perturb(truth, &mut rng);
    }
}
