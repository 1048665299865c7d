use ndarray::Array2;

use crate::error::{Error, Result};

/// One slide: `n` tile feature vectors of a common length plus its weak
/// annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct SlideBag {
    pub id: String,
    /// `n x D`, one row per tile.
    pub features: Array2<f64>,
    /// Tumor percentage in `[0, 100]`.
    pub percent: f64,
    /// 0 = normal, 1 = tumor-bearing.
    pub slide_label: Option<u8>,
    /// Per-tile ground truth, used for evaluation only.
    pub truth: Option<Vec<u8>>,
    /// Noise-free percentage when `percent` is a perturbed annotation.
    pub true_percent: Option<f64>,
}

impl SlideBag {
    pub fn new(
        id: impl Into<String>,
        features: Array2<f64>,
        percent: f64,
        slide_label: Option<u8>,
        truth: Option<Vec<u8>>,
    ) -> Result<Self> {
        let bag = SlideBag {
            id: id.into(),
            features,
            percent,
            slide_label,
            truth,
            true_percent: None,
        };
        bag.validate()?;
        Ok(bag)
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.features.nrows();
        if n == 0 {
            return Err(Error::invalid(format!("slide {} has no tiles", self.id)));
        }
        if self.features.ncols() == 0 {
            return Err(Error::invalid(format!("slide {} has empty features", self.id)));
        }
        if !(0.0..=100.0).contains(&self.percent) {
            return Err(Error::invalid(format!(
                "slide {}: percent {} outside [0, 100]",
                self.id, self.percent
            )));
        }
        if let Some(label) = self.slide_label {
            if label > 1 {
                return Err(Error::invalid(format!("slide {}: label {label}", self.id)));
            }
            if self.percent == 0.0 && label != 0 {
                return Err(Error::invalid(format!(
                    "slide {}: percent 0 with tumor label",
                    self.id
                )));
            }
        }
        if let Some(truth) = &self.truth {
            if truth.len() != n {
                return Err(Error::DimensionMismatch {
                    expected: n,
                    actual: truth.len(),
                });
            }
            if truth.iter().any(|&t| t > 1) {
                return Err(Error::invalid(format!("slide {}: non-binary truth", self.id)));
            }
        }
        if self.features.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("features of slide {}", self.id)));
        }
        Ok(())
    }

    pub fn n_tiles(&self) -> usize {
        self.features.nrows()
    }

    pub fn dim(&self) -> usize {
        self.features.ncols()
    }

    /// Binary label, falling back to `percent > 0` when none was recorded.
    pub fn label(&self) -> u8 {
        self.slide_label.unwrap_or(u8::from(self.percent > 0.0))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn rejects_inconsistent_bags() {
        let f = array![[0.0, 1.0], [2.0, 3.0]];
        assert!(SlideBag::new("a", f.clone(), 0.0, Some(1), None).is_err());
        assert!(SlideBag::new("a", f.clone(), 101.0, None, None).is_err());
        assert!(SlideBag::new("a", f.clone(), 50.0, Some(1), Some(vec![1])).is_err());
        assert!(SlideBag::new("a", Array2::zeros((0, 2)), 50.0, None, None).is_err());
        let ok = SlideBag::new("a", f, 50.0, Some(1), Some(vec![1, 0])).unwrap();
        assert_eq!(ok.n_tiles(), 2);
        assert_eq!(ok.dim(), 2);
    }

    #[test]
    fn label_defaults_from_percent() {
        let f = array![[0.0]];
        assert_eq!(SlideBag::new("a", f.clone(), 0.0, None, None).unwrap().label(), 0);
        assert_eq!(SlideBag::new("a", f, 3.0, None, None).unwrap().label(), 1);
    }
}
