//! ROC-AUC on tissue tiles or pixels, cohort reports and annotation
//! statistics.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bag::SlideBag;
use crate::error::{Error, Result};

/// Mann-Whitney AUC: the probability that a random positive outscores a
/// random negative, ties counting one half. Runs in `O(n log n)` via midranks.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::DimensionMismatch {
            expected: scores.len(),
            actual: labels.len(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("score".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let midrank = (i + j + 2) as f64 / 2.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += midrank * positives as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

/// ROC curve points `(fpr, tpr)` from `(0,0)` to `(1,1)`, one per distinct
/// threshold.
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedAuc);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    for (k, &i) in order.iter().enumerate() {
        if labels[i] == 1 {
            tp += 1;
        } else {
            fp += 1;
        }
        let last_of_group = order.get(k + 1).is_none_or(|&next| scores[next] != scores[i]);
        if last_of_group {
            points.push((fp as f64 / n_neg as f64, tp as f64 / n_pos as f64));
        }
    }
    Ok(points)
}

/// Relative reduction of the AUC error `1 - AUC` with respect to a reference.
pub fn error_reduction(auc_value: f64, auc_ref: f64) -> f64 {
    (auc_value - auc_ref) / (1.0 - auc_ref)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SlideAuc {
    pub slide_id: String,
    pub auc: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortReport {
    pub method: String,
    pub cohort: String,
    pub pooled_auc: f64,
    pub slides: Vec<SlideAuc>,
    pub roc: Vec<(f64, f64)>,
    pub tiles: usize,
}

impl CohortReport {
    /// Slides whose truth has a single class and therefore no AUC.
    pub fn skipped(&self) -> usize {
        self.slides.iter().filter(|s| s.auc.is_none()).count()
    }

    pub fn mean_slide_auc(&self) -> Option<f64> {
        let values: Vec<f64> = self.slides.iter().filter_map(|s| s.auc).collect();
        if values.is_empty() {
            None
        } else {
            Some(values.iter().sum::<f64>() / values.len() as f64)
        }
    }

    pub fn error_reduction_vs(&self, reference: &CohortReport) -> f64 {
        error_reduction(self.pooled_auc, reference.pooled_auc)
    }
}

/// Pooled and per-slide AUC of per-tile (or per-pixel) scores.
/// `items` holds `(slide id, scores, labels)` for tissue elements only.
pub fn eval_scored(method: &str, cohort: &str, items: &[(String, Vec<f64>, Vec<u8>)]) -> Result<CohortReport> {
    let mut pooled_scores = Vec::new();
    let mut pooled_labels = Vec::new();
    let mut slides = Vec::with_capacity(items.len());
    for (id, scores, labels) in items {
        if scores.len() != labels.len() {
            return Err(Error::DimensionMismatch {
                expected: labels.len(),
                actual: scores.len(),
            });
        }
        let slide_auc = match auc(scores, labels) {
            Ok(a) => Some(a),
            Err(Error::UndefinedAuc) => None,
            Err(e) => return Err(e),
        };
        slides.push(SlideAuc {
            slide_id: id.clone(),
            auc: slide_auc,
        });
        pooled_scores.extend_from_slice(scores);
        pooled_labels.extend_from_slice(labels);
    }
    let pooled_auc = auc(&pooled_scores, &pooled_labels)?;
    let roc = roc_curve(&pooled_scores, &pooled_labels)?;
    Ok(CohortReport {
        method: method.to_string(),
        cohort: cohort.to_string(),
        pooled_auc,
        slides,
        roc,
        tiles: pooled_scores.len(),
    })
}

/// Evaluates per-slide tile scores against the slides' tile truth.
pub fn eval_cohort(method: &str, cohort: &str, slides: &[SlideBag], scores: &[Vec<f64>]) -> Result<CohortReport> {
    if slides.len() != scores.len() {
        return Err(Error::DimensionMismatch {
            expected: slides.len(),
            actual: scores.len(),
        });
    }
    let items = slides
        .iter()
        .zip(scores)
        .map(|(bag, s)| {
            let truth = bag
                .truth
                .clone()
                .ok_or_else(|| Error::invalid(format!("slide {} has no ground truth", bag.id)))?;
            Ok((bag.id.clone(), s.clone(), truth))
        })
        .collect::<Result<Vec<_>>>()?;
    eval_scored(method, cohort, &items)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnnotationStats {
    pub slides: usize,
    pub nonzero: usize,
    /// Share of non-zero annotations that are multiples of 20.
    pub multiple_of_20: f64,
    /// Share of non-zero annotations that are multiples of 5.
    pub multiple_of_5: f64,
    /// Counts of annotations rounded to each integer percentage `0..=100`.
    pub histogram: Vec<usize>,
}

/// Incidence of round annotations, tested on integer-rounded percentages.
pub fn annotation_stats(percents: &[f64]) -> AnnotationStats {
    let mut histogram = vec![0usize; 101];
    let (mut nonzero, mut m20, mut m5) = (0usize, 0usize, 0usize);
    for &p in percents {
        let r = p.round().clamp(0.0, 100.0) as i64;
        histogram[r as usize] += 1;
        if p == 0.0 {
            continue;
        }
        nonzero += 1;
        if r % 20 == 0 {
            m20 += 1;
        }
        if r % 5 == 0 {
            m5 += 1;
        }
    }
    let share = |k: usize| if nonzero == 0 { 0.0 } else { k as f64 / nonzero as f64 };
    AnnotationStats {
        slides: percents.len(),
        nonzero,
        multiple_of_20: share(m20),
        multiple_of_5: share(m5),
        histogram,
    }
}

const PALETTE: [&str; 8] = [
    "#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#17becf",
];

/// Standalone SVG line plot of ROC curves with axes and a legend.
pub fn roc_svg(title: &str, curves: &[(String, Vec<(f64, f64)>)]) -> String {
    let (size, margin) = (400.0, 50.0);
    let total = size + 2.0 * margin;
    let px = |fpr: f64| margin + fpr * size;
    let py = |tpr: f64| margin + (1.0 - tpr) * size;
    let mut s = String::new();
    writeln!(
        s,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{total}" height="{total}" viewBox="0 0 {total} {total}" font-family="sans-serif" font-size="12">"#
    )
    .unwrap();
    writeln!(s, r#"<rect width="{total}" height="{total}" fill="white"/>"#).unwrap();
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle" font-size="14">{}</text>"#, total / 2.0, margin / 2.0, escape(title)).unwrap();
    writeln!(
        s,
        r#"<rect x="{margin}" y="{margin}" width="{size}" height="{size}" fill="none" stroke="black"/>"#
    )
    .unwrap();
    for k in 0..=5 {
        let v = k as f64 / 5.0;
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="middle">{v:.1}</text>"#, px(v), margin + size + 16.0).unwrap();
        writeln!(s, r#"<text x="{:.1}" y="{:.1}" text-anchor="end">{v:.1}</text>"#, margin - 6.0, py(v) + 4.0).unwrap();
    }
    writeln!(s, r#"<text x="{}" y="{}" text-anchor="middle">false positive rate</text>"#, total / 2.0, total - 10.0).unwrap();
    writeln!(
        s,
        r#"<text x="14" y="{0}" text-anchor="middle" transform="rotate(-90 14 {0})">true positive rate</text>"#,
        total / 2.0
    )
    .unwrap();
    writeln!(
        s,
        r##"<line x1="{}" y1="{}" x2="{}" y2="{}" stroke="#999" stroke-dasharray="4 4"/>"##,
        px(0.0),
        py(0.0),
        px(1.0),
        py(1.0)
    )
    .unwrap();
    for (k, (name, points)) in curves.iter().enumerate() {
        let color = PALETTE[k % PALETTE.len()];
        let coords: Vec<String> = thin(points).iter().map(|&(x, y)| format!("{:.2},{:.2}", px(x), py(y))).collect();
        writeln!(
            s,
            r#"<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{}"/>"#,
            coords.join(" ")
        )
        .unwrap();
        let ly = margin + size - 12.0 - 16.0 * (curves.len() - 1 - k) as f64;
        writeln!(s, r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/>"#, margin + size - 150.0, margin + size - 130.0).unwrap();
        writeln!(s, r#"<text x="{}" y="{}">{}</text>"#, margin + size - 124.0, ly + 4.0, escape(name)).unwrap();
    }
    s.push_str("</svg>\n");
    s
}

/// Drops points closer than a thousandth of the axis to the last kept one.
fn thin(points: &[(f64, f64)]) -> Vec<(f64, f64)> {
    let mut kept: Vec<(f64, f64)> = Vec::new();
    for (i, &p) in points.iter().enumerate() {
        let last = i + 1 == points.len();
        match kept.last() {
            Some(&(x, y)) if !last && (p.0 - x).abs() < 1e-3 && (p.1 - y).abs() < 1e-3 => {}
            _ => kept.push(p),
        }
    }
    kept
}

fn escape(text: &str) -> String {
    text.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    /// `O(n^2)` pair count.
    fn auc_pairs(scores: &[f64], labels: &[u8]) -> f64 {
        let mut num = 0.0;
        let mut den = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] == 1 && labels[j] == 0 {
                    den += 1.0;
                    if scores[i] > scores[j] {
                        num += 1.0;
                    } else if scores[i] == scores[j] {
                        num += 0.5;
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[0, 0, 1, 1]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.8, 0.2, 0.1], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert_eq!(auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap(), 0.75);
        assert_eq!(auc(&[0.5, 0.5], &[0, 1]).unwrap(), 0.5);
        assert!(matches!(auc(&[0.1, 0.2], &[1, 1]), Err(Error::UndefinedAuc)));
        assert!(auc(&[f64::NAN, 0.2], &[0, 1]).is_err());
    }

    #[test]
    fn roc_curve_area_matches_auc() {
        let scores = [0.1, 0.4, 0.35, 0.8, 0.4, 0.2, 0.9, 0.4];
        let labels = [0, 0, 1, 1, 1, 0, 1, 0];
        let roc = roc_curve(&scores, &labels).unwrap();
        assert_eq!(roc.first(), Some(&(0.0, 0.0)));
        assert_eq!(roc.last(), Some(&(1.0, 1.0)));
        let trapezoid: f64 = roc.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum();
        assert!((trapezoid - auc(&scores, &labels).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn error_reduction_examples() {
        // 0.932 vs 0.892 and vs 0.905
        assert!(error_reduction(0.932, 0.892) > 0.37);
        assert!(error_reduction(0.932, 0.905) > 0.28);
        assert_eq!(error_reduction(0.9, 0.9), 0.0);
    }

    #[test]
    fn cohort_report() {
        let bag = |id: &str, truth: Vec<u8>| {
            let n = truth.len();
            SlideBag::new(id, ndarray::Array2::zeros((n, 1)), 50.0, None, Some(truth)).unwrap()
        };
        let slides = vec![bag("a", vec![0, 1, 1]), bag("b", vec![0, 0])];
        let scores = vec![vec![0.2, 0.9, 0.1], vec![0.3, 0.4]];
        let r = eval_cohort("m", "test", &slides, &scores).unwrap();
        assert_eq!(r.skipped(), 1);
        assert_eq!(r.slides[0].auc, Some(0.5));
        assert_eq!(r.tiles, 5);
        // pooled: positives {0.9, 0.1} vs negatives {0.2, 0.3, 0.4}
        assert!((r.pooled_auc - 0.5).abs() < 1e-12);

        let single = eval_cohort("m", "test", &slides[..1], &scores[..1]).unwrap();
        assert_eq!(Some(single.pooled_auc), single.slides[0].auc);

        let mut no_truth = slides.clone();
        no_truth[1].truth = None;
        assert!(eval_cohort("m", "test", &no_truth, &scores).is_err());
    }

    #[test]
    fn stats_examples() {
        let s = annotation_stats(&[20.0, 20.0, 20.0]);
        assert_eq!((s.multiple_of_20, s.multiple_of_5), (1.0, 1.0));
        let s = annotation_stats(&[37.0]);
        assert_eq!((s.multiple_of_20, s.multiple_of_5), (0.0, 0.0));
        let s = annotation_stats(&[0.0, 0.0, 40.0, 45.0, 13.0, 60.0]);
        assert_eq!(s.nonzero, 4);
        assert_eq!(s.multiple_of_20, 0.5);
        assert_eq!(s.multiple_of_5, 0.75);
        assert_eq!(s.histogram[0], 2);
        assert_eq!(s.histogram.iter().sum::<usize>(), 6);
    }

    #[test]
    fn svg_is_self_contained() {
        let svg = roc_svg("test <a>", &[("weseg".into(), vec![(0.0, 0.0), (0.2, 0.8), (1.0, 1.0)])]);
        assert!(svg.starts_with("<svg"));
        assert!(svg.contains("polyline"));
        assert!(svg.contains("&lt;a&gt;"));
        assert!(!svg.contains("href"));
    }

    proptest! {
        #[test]
        fn matches_pair_counting(
            data in prop::collection::vec((0u8..20, 0u8..2), 2..200)
        ) {
            let scores: Vec<f64> = data.iter().map(|d| d.0 as f64 / 7.0).collect();
            let labels: Vec<u8> = data.iter().map(|d| d.1).collect();
            match auc(&scores, &labels) {
                Ok(a) => prop_assert!((a - auc_pairs(&scores, &labels)).abs() <= 1e-12),
                Err(Error::UndefinedAuc) => {}
                Err(e) => panic!("{e}"),
            }
        }

        #[test]
        fn monotone_and_sign_symmetry(
            raw in prop::collection::btree_set(0u32..100_000, 4..100),
            flips in prop::collection::vec(0u8..2, 100),
        ) {
            let scores: Vec<f64> = raw.into_iter().map(|v| v as f64 / 1000.0).collect();
            let labels: Vec<u8> = flips[..scores.len()].to_vec();
            if let Ok(a) = auc(&scores, &labels) {
                let warped: Vec<f64> = scores.iter().map(|s| (0.1 * s).exp() + 3.0 * s).collect();
                prop_assert!((auc(&warped, &labels).unwrap() - a).abs() <= 1e-12);
                let negated: Vec<f64> = scores.iter().map(|s| -s).collect();
                prop_assert!((auc(&negated, &labels).unwrap() + a - 1.0).abs() <= 1e-12);
            }
        }
    }
}
