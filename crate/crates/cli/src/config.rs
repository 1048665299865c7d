//! Run configuration, read from TOML. Every field has a default, so an empty
//! file (or no file) is a valid configuration.
//!
//! ```toml
//! seed = 2024          # root seed; WESEG_SEED and --seed override it
//! threads = 0          # 0 uses every core
//! methods = ["weseg", "alphabeta-50-0", "supervised"]
//!
//! [data]
//! kind = "features"    # or "raster"
//! slides = 550
//! dim = 16
//! separation = 2.0
//! min_tiles = 40
//! max_tiles = 120
//! normal_weight = 0.17586
//! noise = true
//! split = [0.7, 0.1, 0.2]
//!
//! [data.raster]
//! width = 512
//! height = 384
//! tile_size = 64
//! overlap = 16
//! tissue_fraction = 0.75
//!
//! [train]              # see weseg_core::train::TrainConfig
//! lr = 1e-3
//! patience = 50
//! max_epochs = 300
//! margins = { r_low = 0.0, r_high = 0.0, a_low = 0.0, a_high = 0.0 }
//!
//! [search]
//! trials = 8
//! ```
//!
//! `train.seed` and `train.method` are overwritten per run: the seed by the
//! root seed and the method by the one being trained.

use std::path::Path;

use anyhow::{bail, Context, Result};
use serde::{Deserialize, Serialize};
use weseg_core::synth::{RasterSpec, SynthSpec, NORMAL_SLIDE_WEIGHT};
use weseg_core::train::{Method, TrainConfig};

pub const CONFIG_FILE: &str = "config.toml";
pub const SEED_ENV: &str = "WESEG_SEED";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataKind {
    Features,
    Raster,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub kind: DataKind,
    pub slides: usize,
    /// Feature dimension of feature-space cohorts; raster cohorts use the
    /// tiler's fixed feature length.
    pub dim: usize,
    pub separation: f64,
    pub min_tiles: usize,
    pub max_tiles: usize,
    pub normal_weight: f64,
    /// Perturb the annotations with the calibrated rounding noise.
    pub noise: bool,
    pub split: [f64; 3],
    pub raster: RasterSpec,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            kind: DataKind::Features,
            slides: 550,
            dim: 16,
            separation: 2.0,
            min_tiles: 40,
            max_tiles: 120,
            normal_weight: NORMAL_SLIDE_WEIGHT,
            noise: true,
            split: [0.7, 0.1, 0.2],
            raster: RasterSpec::default(),
        }
    }
}

impl DataConfig {
    pub fn synth_spec(&self, seed: u64) -> SynthSpec {
        let mut spec = SynthSpec::with_separation(self.dim, self.separation, seed);
        spec.min_tiles = self.min_tiles;
        spec.max_tiles = self.max_tiles;
        spec.normal_weight = self.normal_weight;
        spec
    }

    /// Train/validation/test sizes. The test split takes the remainder.
    pub fn split_sizes(&self) -> Result<[usize; 3]> {
        let [a, b, c] = self.split;
        if [a, b, c].iter().any(|v| v.is_nan() || *v < 0.0) || ((a + b + c) - 1.0).abs() > 1e-9 {
            bail!("split fractions {:?} must be non-negative and sum to 1", self.split);
        }
        let n = self.slides;
        let train = (n as f64 * a).round() as usize;
        let val = ((n as f64 * b).round() as usize).min(n - train);
        let sizes = [train, val, n - train - val];
        if sizes.contains(&0) {
            bail!("{n} slides cannot fill the {:?} split with a slide in every cohort", self.split);
        }
        Ok(sizes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SearchConfig {
    pub trials: usize,
}

impl Default for SearchConfig {
    fn default() -> Self {
        SearchConfig { trials: 8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub seed: u64,
    pub threads: usize,
    pub methods: Vec<Method>,
    pub data: DataConfig,
    pub train: TrainConfig,
    pub search: SearchConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2024,
            threads: 0,
            methods: vec![
                Method::WeSeg,
                Method::AlphaBeta { alpha: 50.0, beta: 0.0 },
                Method::AlphaBeta { alpha: 50.0, beta: 50.0 },
                Method::AlphaBeta { alpha: 75.0, beta: 0.0 },
                Method::Supervised,
                Method::AttentionMil,
            ],
            data: DataConfig::default(),
            train: TrainConfig::default(),
            search: SearchConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::from_toml(&text).with_context(|| format!("parsing {}", path.display()))
    }

    /// Loads the file if given, then applies the seed override: `--seed`
    /// first, else the environment variable.
    pub fn resolve(path: Option<&Path>, seed_flag: Option<u64>, threads_flag: Option<usize>) -> Result<Self> {
        let mut config = match path {
            Some(p) => Self::load(p)?,
            None => Self::default(),
        };
        if let Some(seed) = seed_flag {
            config.seed = seed;
        } else if let Ok(value) = std::env::var(SEED_ENV) {
            config.seed = value
                .trim()
                .parse()
                .with_context(|| format!("{SEED_ENV}={value:?} is not an unsigned integer"))?;
        }
        if let Some(threads) = threads_flag {
            config.threads = threads;
        }
        config.train.seed = config.seed;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        for m in &self.methods {
            m.validate()?;
        }
        self.data.synth_spec(self.seed).validate()?;
        if self.data.kind == DataKind::Raster {
            let r = &self.data.raster;
            if r.overlap >= r.tile_size || r.width < r.tile_size || r.height < r.tile_size {
                bail!("raster geometry {}x{} cannot hold tiles of {} with overlap {}", r.width, r.height, r.tile_size, r.overlap);
            }
        }
        Ok(())
    }

    /// Training configuration of one method.
    pub fn train_config(&self, method: Method) -> TrainConfig {
        TrainConfig {
            method,
            seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// Writes the full configuration into `dir`.
    pub fn write_copy(&self, dir: &Path) -> Result<()> {
        let path = dir.join(CONFIG_FILE);
        std::fs::write(&path, self.to_toml()).with_context(|| format!("writing {}", path.display()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_file_is_default() {
        assert_eq!(RunConfig::from_toml("").unwrap(), RunConfig::default());
    }

    #[test]
    fn round_trips_through_toml() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::from_toml(&c.to_toml()).unwrap(), c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(RunConfig::from_toml("sed = 3").is_err());
        assert!(RunConfig::from_toml("[train]\nlearning_rate = 0.1").is_err());
        assert!(RunConfig::from_toml("[data.raster]\ntile = 3").is_err());
    }

    #[test]
    fn partial_sections_keep_defaults() {
        let c = RunConfig::from_toml("methods = [\"alphabeta-50-50\"]\n[train]\npatience = 3").unwrap();
        assert_eq!(c.train.patience, 3);
        assert_eq!(c.train.tiles_per_slide, 30);
        assert_eq!(c.methods, vec![Method::AlphaBeta { alpha: 50.0, beta: 50.0 }]);
        assert!(RunConfig::from_toml("methods = [\"alphabeta-90-50\"]").is_err());
    }

    #[test]
    fn split_sizes() {
        let mut d = DataConfig {
            slides: 100,
            ..DataConfig::default()
        };
        assert_eq!(d.split_sizes().unwrap(), [70, 10, 20]);
        d.slides = 0;
        assert!(d.split_sizes().is_err());
        d.slides = 550;
        assert_eq!(d.split_sizes().unwrap(), [385, 55, 110]);
        d.split = [0.5, 0.5, 0.5];
        assert!(d.split_sizes().is_err());
    }
}
