//! Proxy ground-truth construction from ranked tile predictions.
//!
//! Every labeler ranks tiles by predicted probability (highest first, equal
//! values ordered by ascending tile index), marks a prefix of the ranking as
//! tumor, a suffix as benign, and masks out whatever lies between.

use crate::bag::SlideBag;
use crate::error::{Error, Result};

/// Relative (`r_*`) and absolute (`a_*`, percentage points) widenings of the
/// masked band around the annotation.
#[derive(Debug, Clone, Copy, Default, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Margins {
    pub r_low: f64,
    pub r_high: f64,
    pub a_low: f64,
    pub a_high: f64,
}

impl Margins {
    pub fn zero() -> Self {
        Self::default()
    }

    pub fn is_zero(&self) -> bool {
        self.r_low == 0.0 && self.r_high == 0.0 && self.a_low == 0.0 && self.a_high == 0.0
    }

    pub fn validate(&self) -> Result<()> {
        let all = [self.r_low, self.r_high, self.a_low, self.a_high];
        if all.iter().any(|m| !m.is_finite() || *m < 0.0) {
            return Err(Error::invalid(format!("margins must be finite and >= 0: {self:?}")));
        }
        Ok(())
    }
}

/// Per-tile `{0,1}` targets; tiles with `mask == 0` carry no error signal.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProxyTarget {
    pub targets: Vec<u8>,
    pub mask: Vec<u8>,
}

impl ProxyTarget {
    pub fn filled(n: usize, value: u8) -> Self {
        ProxyTarget {
            targets: vec![value; n],
            mask: vec![1; n],
        }
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.targets
            .iter()
            .zip(&self.mask)
            .filter(|(&t, &m)| t == 1 && m == 1)
            .count()
    }

    pub fn negatives(&self) -> usize {
        self.targets
            .iter()
            .zip(&self.mask)
            .filter(|(&t, &m)| t == 0 && m == 1)
            .count()
    }

    pub fn masked_in(&self) -> usize {
        self.mask.iter().filter(|&&m| m == 1).count()
    }
}

fn round_half_up(n: usize, percent: f64) -> usize {
    let count = (n as f64 * percent / 100.0 + 0.5).floor();
    (count.max(0.0) as usize).min(n)
}

/// Number of tiles labeled tumor (`n_pos`) and benign (`n_neg`) for a slide
/// of `n` tiles annotated with `percent`.
///
/// The positive share is `clamp((1 - r_high) * p - a_high, 0, 100)` and the
/// negative share `clamp((1 - r_low) * (100 - p) - a_low, 0, 100)`; both are
/// turned into tile counts with round-half-up. With all margins at zero every
/// tile is labeled, so `n_neg = n - n_pos`.
pub fn percentile_counts(n: usize, percent: f64, margins: &Margins) -> (usize, usize) {
    let percent = percent.clamp(0.0, 100.0);
    let pos_share = ((1.0 - margins.r_high) * percent - margins.a_high).clamp(0.0, 100.0);
    let n_pos = round_half_up(n, pos_share);
    if margins.is_zero() {
        return (n_pos, n - n_pos);
    }
    let neg_share = ((1.0 - margins.r_low) * (100.0 - percent) - margins.a_low).clamp(0.0, 100.0);
    let n_neg = round_half_up(n, neg_share).min(n - n_pos);
    (n_pos, n_neg)
}

/// Tile indices ordered from highest to lowest probability; equal values keep
/// ascending index order.
pub fn rank_descending(probs: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..probs.len()).collect();
    order.sort_by(|&a, &b| probs[b].total_cmp(&probs[a]));
    order
}

fn check_finite(probs: &[f64]) -> Result<()> {
    if let Some(i) = probs.iter().position(|p| !p.is_finite()) {
        return Err(Error::NonFinite(format!("probability at tile {i}")));
    }
    Ok(())
}

/// Top `n_pos` ranked tiles get target 1, bottom `n_neg` get target 0, the
/// rest are masked out.
pub fn assign_by_rank(probs: &[f64], n_pos: usize, n_neg: usize) -> Result<ProxyTarget> {
    check_finite(probs)?;
    let n = probs.len();
    if n_pos + n_neg > n {
        return Err(Error::invalid(format!(
            "{n_pos} positives + {n_neg} negatives exceed {n} tiles"
        )));
    }
    let mut target = ProxyTarget {
        targets: vec![0; n],
        mask: vec![0; n],
    };
    for (rank, &i) in rank_descending(probs).iter().enumerate() {
        if rank < n_pos {
            target.targets[i] = 1;
            target.mask[i] = 1;
        } else if rank >= n - n_neg {
            target.mask[i] = 1;
        }
    }
    Ok(target)
}

/// WeSeg proxy map: the `percent`% most probable tiles are tumor, the rest
/// benign, with an optional masked band controlled by `margins`.
pub fn assign_weseg(probs: &[f64], percent: f64, margins: &Margins) -> Result<ProxyTarget> {
    if probs.is_empty() {
        return Err(Error::invalid("empty probability vector"));
    }
    if !(0.0..=100.0).contains(&percent) {
        return Err(Error::invalid(format!("percent {percent} outside [0, 100]")));
    }
    margins.validate()?;
    let (n_pos, n_neg) = percentile_counts(probs.len(), percent, margins);
    assign_by_rank(probs, n_pos, n_neg)
}

/// Alpha/beta MIL labeler: normal slides are all benign; on tumor slides the
/// top `alpha`% are tumor and the bottom `beta`% benign.
pub fn assign_alphabeta(probs: &[f64], slide_label: u8, alpha: f64, beta: f64) -> Result<ProxyTarget> {
    if !(0.0..=100.0).contains(&alpha) || !(0.0..=100.0).contains(&beta) {
        return Err(Error::invalid(format!("alpha {alpha} / beta {beta} outside [0, 100]")));
    }
    if alpha + beta > 100.0 {
        return Err(Error::invalid(format!("alpha + beta = {} > 100", alpha + beta)));
    }
    check_finite(probs)?;
    let n = probs.len();
    if slide_label == 0 {
        return Ok(ProxyTarget::filled(n, 0));
    }
    let n_pos = round_half_up(n, alpha);
    let n_neg = round_half_up(n, beta).min(n - n_pos);
    assign_by_rank(probs, n_pos, n_neg)
}

/// Fixed targets for the supervised baseline, which only trains on slides
/// annotated exactly 0% or 100%.
pub fn supervised_targets(bag: &SlideBag) -> Option<ProxyTarget> {
    let n = bag.n_tiles();
    if bag.percent == 0.0 {
        Some(ProxyTarget::filled(n, 0))
    } else if bag.percent == 100.0 {
        Some(ProxyTarget::filled(n, 1))
    } else {
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array2;
    use proptest::prelude::*;

    fn margins(r: f64, a_low: f64, a_high: f64) -> Margins {
        Margins {
            r_low: r,
            r_high: r,
            a_low,
            a_high,
        }
    }

    /// Closest count `k` to `n * share / 100`, ties going up.
    fn nearest_count(n: usize, share: f64) -> usize {
        let target = n as f64 * share;
        let mut best = 0;
        for k in 0..=n {
            let d = (100.0 * k as f64 - target).abs();
            let d_best = (100.0 * best as f64 - target).abs();
            if d <= d_best {
                best = k;
            }
        }
        best
    }

    fn brute_counts(n: usize, p: f64, m: &Margins) -> (usize, usize) {
        let pos = nearest_count(n, ((1.0 - m.r_high) * p - m.a_high).clamp(0.0, 100.0));
        if m.is_zero() {
            return (pos, n - pos);
        }
        let neg = nearest_count(n, ((1.0 - m.r_low) * (100.0 - p) - m.a_low).clamp(0.0, 100.0));
        (pos, neg.min(n - pos))
    }

    #[test]
    fn counts_examples() {
        assert_eq!(percentile_counts(4, 50.0, &Margins::zero()), (2, 2));
        assert_eq!(percentile_counts(4, 100.0, &Margins::zero()), (4, 0));
        assert_eq!(percentile_counts(10, 50.0, &margins(0.0, 10.0, 10.0)), (4, 4));
    }

    #[test]
    fn counts_match_enumeration() {
        let grids = [
            Margins::zero(),
            margins(0.0, 10.0, 10.0),
            margins(0.2, 0.0, 0.0),
            margins(0.1, 5.0, 2.5),
            Margins { r_low: 0.3, r_high: 0.0, a_low: 0.0, a_high: 7.0 },
        ];
        for m in &grids {
            for n in 1..=12 {
                for p in 0..=100 {
                    let p = p as f64;
                    let got = percentile_counts(n, p, m);
                    assert_eq!(got, brute_counts(n, p, m), "n={n} p={p} m={m:?}");
                    assert!(got.0 + got.1 <= n);
                }
            }
        }
    }

    #[test]
    fn inactive_margin_keeps_full_coverage() {
        // r_low scales the benign share, which is empty at 100%
        let m = Margins { r_low: 0.5, ..Margins::zero() };
        assert_eq!(percentile_counts(7, 100.0, &m), (7, 0));
        assert_eq!(percentile_counts(7, 0.0, &m), (0, 4));
    }

    #[test]
    fn weseg_examples() {
        let t = assign_weseg(&[0.9, 0.6, 0.4, 0.1], 50.0, &Margins::zero()).unwrap();
        assert_eq!(t.targets, vec![1, 1, 0, 0]);
        assert_eq!(t.mask, vec![1, 1, 1, 1]);

        let t = assign_weseg(&[0.3, 0.8, 0.5], 0.0, &Margins::zero()).unwrap();
        assert_eq!(t, ProxyTarget::filled(3, 0));

        let probs: Vec<f64> = (1..=10).map(|i| i as f64 / 10.0).collect();
        let t = assign_weseg(&probs, 50.0, &margins(0.0, 10.0, 10.0)).unwrap();
        assert_eq!(t.targets, vec![0, 0, 0, 0, 0, 0, 1, 1, 1, 1]);
        assert_eq!(t.mask, vec![1, 1, 1, 1, 0, 0, 1, 1, 1, 1]);
    }

    #[test]
    fn ties_follow_index_order() {
        let t = assign_weseg(&[0.5, 0.5, 0.5, 0.5], 50.0, &Margins::zero()).unwrap();
        assert_eq!(t.targets, vec![1, 1, 0, 0]);
    }

    #[test]
    fn weseg_rejects_non_finite() {
        assert!(assign_weseg(&[0.1, f64::NAN], 50.0, &Margins::zero()).is_err());
        assert!(assign_weseg(&[0.1, f64::INFINITY], 50.0, &Margins::zero()).is_err());
        assert!(assign_weseg(&[0.1], 50.0, &margins(-0.1, 0.0, 0.0)).is_err());
    }

    #[test]
    fn alphabeta_examples() {
        let t = assign_alphabeta(&[0.9, 0.1], 0, 50.0, 0.0).unwrap();
        assert_eq!(t.targets, vec![0, 0]);
        assert_eq!(t.mask, vec![1, 1]);

        let probs = [0.9, 0.6, 0.4, 0.1];
        let t = assign_alphabeta(&probs, 1, 50.0, 0.0).unwrap();
        assert_eq!(&t.targets[..2], &[1, 1]);
        assert_eq!(t.mask, vec![1, 1, 0, 0]);

        let t = assign_alphabeta(&probs, 1, 50.0, 50.0).unwrap();
        assert_eq!(t.targets, vec![1, 1, 0, 0]);
        assert_eq!(t.mask, vec![1, 1, 1, 1]);

        assert!(assign_alphabeta(&probs, 1, 60.0, 50.0).is_err());
    }

    #[test]
    fn supervised_only_uses_extremes() {
        let bag = |p: f64| SlideBag::new("s", Array2::zeros((3, 2)), p, None, None).unwrap();
        assert_eq!(supervised_targets(&bag(0.0)).unwrap().targets, vec![0, 0, 0]);
        assert_eq!(supervised_targets(&bag(100.0)).unwrap().targets, vec![1, 1, 1]);
        assert!(supervised_targets(&bag(40.0)).is_none());
    }

    #[test]
    fn extremes_coincide_with_supervised() {
        let probs = [0.2, 0.7, 0.1, 0.9, 0.5];
        for p in [0.0, 100.0] {
            let bag = SlideBag::new("s", Array2::zeros((5, 1)), p, None, None).unwrap();
            let weseg = assign_weseg(&probs, p, &Margins::zero()).unwrap();
            assert_eq!(Some(weseg), supervised_targets(&bag));
        }
    }

    fn distinct_probs() -> impl Strategy<Value = Vec<f64>> {
        prop::collection::btree_set(1u32..1_000_000, 1..64)
            .prop_map(|s| s.into_iter().map(|v| v as f64 / 1_000_000.0).collect::<Vec<_>>())
            .prop_shuffle()
    }

    proptest! {
        #[test]
        fn counts_are_exact(
            probs in prop::collection::vec(0.0f64..1.0, 1..200),
            p in 0.0f64..=100.0,
            r in 0.0f64..0.5,
            a_low in 0.0f64..20.0,
            a_high in 0.0f64..20.0,
        ) {
            let m = Margins { r_low: r, r_high: r / 2.0, a_low, a_high };
            let t = assign_weseg(&probs, p, &m).unwrap();
            let (n_pos, n_neg) = percentile_counts(probs.len(), p, &m);
            prop_assert_eq!(t.positives(), n_pos);
            prop_assert_eq!(t.negatives(), n_neg);
        }

        #[test]
        fn rank_invariant(probs in distinct_probs(), p in 0.0f64..=100.0) {
            let m = Margins { a_low: 5.0, a_high: 5.0, ..Margins::zero() };
            let warped: Vec<f64> = probs.iter().map(|&x| (3.0 * x).exp() - 7.0).collect();
            prop_assert_eq!(assign_weseg(&probs, p, &m).unwrap(), assign_weseg(&warped, p, &m).unwrap());
        }

        #[test]
        fn permutation_equivariant(probs in distinct_probs(), p in 0.0f64..=100.0, seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let mut perm: Vec<usize> = (0..probs.len()).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let permuted: Vec<f64> = perm.iter().map(|&i| probs[i]).collect();
            let base = assign_weseg(&probs, p, &Margins::zero()).unwrap();
            let moved = assign_weseg(&permuted, p, &Margins::zero()).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(moved.targets[k], base.targets[i]);
                prop_assert_eq!(moved.mask[k], base.mask[i]);
            }
            let base = assign_alphabeta(&probs, 1, 40.0, 30.0).unwrap();
            let moved = assign_alphabeta(&permuted, 1, 40.0, 30.0).unwrap();
            for (k, &i) in perm.iter().enumerate() {
                prop_assert_eq!(moved.targets[k], base.targets[i]);
                prop_assert_eq!(moved.mask[k], base.mask[i]);
            }
        }
    }
}
