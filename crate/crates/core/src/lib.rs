//! Weakly supervised tile-level tumor segmentation trained from slide-level
//! tumor percentages.
//!
//! A slide is a bag of tile feature vectors with a single weak annotation: the
//! estimated percentage of tumor it contains. Training ranks the current tile
//! predictions of each slide, labels the top `p%` as tumor and the rest as
//! benign, and minimizes binary cross-entropy against that proxy map. The
//! crate also ships the baselines (alpha/beta MIL, attention MIL, supervised
//! training restricted to 0%/100% slides), a raster tiling pipeline, a
//! synthetic cohort generator with a calibrated annotation-noise model, and
//! ROC-AUC evaluation.

pub mod bag;
pub mod cohort;
pub mod error;
pub mod eval;
pub mod loss;
pub mod nn;
pub mod pnm;
pub mod proxy;
pub mod synth;
pub mod tiler;
pub mod train;

pub use bag::SlideBag;
pub use error::{Error, Result};
pub use proxy::{Margins, ProxyTarget};
