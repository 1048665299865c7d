//! Comparison table across methods and cohorts, plus ROC plots.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use anyhow::{Context, Result};
use serde::Serialize;
use weseg_core::eval::{error_reduction, roc_svg};

use crate::commands::{write_csv, EvaluationRow, RocPoint};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub method: String,
    pub cohort: String,
    pub status: &'static str,
    pub level: Option<String>,
    pub pooled_auc: Option<f64>,
    pub mean_slide_auc: Option<f64>,
    pub skipped: Option<usize>,
    /// Error reduction of this method's pooled AUC relative to the best
    /// other method on the same cohort.
    pub error_reduction_vs_best_other: Option<f64>,
}

pub struct Report {
    pub rows: Vec<ReportRow>,
    pub absent: usize,
}

fn read_evaluations(path: &Path) -> Result<Vec<EvaluationRow>> {
    let mut reader = csv::Reader::from_path(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(reader.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// Cohorts with an `evaluation_<cohort>.csv` in `results`.
fn evaluated_cohorts(results: &Path) -> Result<BTreeSet<String>> {
    let mut cohorts = BTreeSet::new();
    for entry in std::fs::read_dir(results).with_context(|| format!("listing {}", results.display()))? {
        let name = entry?.file_name().to_string_lossy().into_owned();
        if let Some(cohort) = name.strip_prefix("evaluation_").and_then(|n| n.strip_suffix(".csv")) {
            cohorts.insert(cohort.to_string());
        }
    }
    Ok(cohorts)
}

/// Builds the table for `cohorts` (every evaluated cohort when empty).
/// A method without results on one of the cohorts gets an `absent` row.
pub fn build(results: &Path, cohorts: &[String]) -> Result<(Report, Vec<EvaluationRow>)> {
    let cohorts: Vec<String> = if cohorts.is_empty() {
        evaluated_cohorts(results)?.into_iter().collect()
    } else {
        cohorts.to_vec()
    };
    let mut evaluations = Vec::new();
    for cohort in &cohorts {
        let path = results.join(format!("evaluation_{cohort}.csv"));
        if path.is_file() {
            evaluations.extend(read_evaluations(&path)?);
        }
    }
    let mut methods: Vec<String> = Vec::new();
    for e in &evaluations {
        if !methods.contains(&e.method) {
            methods.push(e.method.clone());
        }
    }
    for dir in crate::commands::run_dirs(results)? {
        let text = std::fs::read_to_string(dir.join(crate::commands::CHECKPOINT_FILE))?;
        if let Some(method) = text.lines().nth(1).and_then(|l| l.strip_prefix("method ")) {
            if !methods.iter().any(|m| m == method) {
                methods.push(method.to_string());
            }
        }
    }

    let mut rows = Vec::new();
    let mut absent = 0;
    for cohort in &cohorts {
        for method in &methods {
            let found = evaluations.iter().find(|e| &e.method == method && &e.cohort == cohort);
            let Some(e) = found else {
                absent += 1;
                rows.push(ReportRow {
                    method: method.clone(),
                    cohort: cohort.clone(),
                    status: "absent",
                    level: None,
                    pooled_auc: None,
                    mean_slide_auc: None,
                    skipped: None,
                    error_reduction_vs_best_other: None,
                });
                continue;
            };
            let best_other = evaluations
                .iter()
                .filter(|o| &o.cohort == cohort && &o.method != method)
                .map(|o| o.pooled_auc)
                .fold(None, |acc: Option<f64>, v| Some(acc.map_or(v, |a| a.max(v))));
            rows.push(ReportRow {
                method: method.clone(),
                cohort: cohort.clone(),
                status: "ok",
                level: Some(e.level.clone()),
                pooled_auc: Some(e.pooled_auc),
                mean_slide_auc: e.mean_slide_auc,
                skipped: Some(e.skipped),
                error_reduction_vs_best_other: best_other.filter(|&b| b < 1.0).map(|b| error_reduction(e.pooled_auc, b)),
            });
        }
    }
    Ok((Report { rows, absent }, evaluations))
}

fn cell(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.4}"))
}

pub fn markdown(report: &Report) -> String {
    let mut s = String::from("| method | cohort | pooled AUC | mean slide AUC | skipped | error reduction vs best other |\n");
    s.push_str("|---|---|---|---|---|---|\n");
    for r in &report.rows {
        if r.status == "absent" {
            writeln!(s, "| {} | {} | absent | - | - | - |", r.method, r.cohort).unwrap();
        } else {
            let er = r
                .error_reduction_vs_best_other
                .map_or_else(|| "-".to_string(), |v| format!("{:+.1}%", 100.0 * v));
            writeln!(
                s,
                "| {} | {} | {} | {} | {} | {er} |",
                r.method,
                r.cohort,
                cell(r.pooled_auc),
                cell(r.mean_slide_auc),
                r.skipped.unwrap_or(0)
            )
            .unwrap();
        }
    }
    s
}

/// Writes `report.csv`, `report.md` and one `roc_<cohort>.svg` per cohort
/// into `out`. Returns the report so the caller can fail on absent rows.
pub fn write_report(results: &Path, cohorts: &[String], out: &Path) -> Result<Report> {
    let (report, evaluations) = build(results, cohorts)?;
    crate::commands::create_dir(out)?;
    write_csv(&out.join("report.csv"), &report.rows)?;
    std::fs::write(out.join("report.md"), markdown(&report))?;
    let cohorts: BTreeSet<&str> = report.rows.iter().map(|r| r.cohort.as_str()).collect();
    for cohort in cohorts {
        let mut curves = Vec::new();
        for e in evaluations.iter().filter(|e| e.cohort == cohort) {
            let path = results.join(&e.run).join(format!("roc_{cohort}.csv"));
            let mut reader = csv::Reader::from_path(&path).with_context(|| format!("reading {}", path.display()))?;
            let points: Vec<RocPoint> = reader.deserialize().collect::<std::result::Result<_, _>>()?;
            curves.push((
                format!("{} ({:.3})", e.method, e.pooled_auc),
                points.into_iter().map(|p| (p.fpr, p.tpr)).collect(),
            ));
        }
        let svg = roc_svg(&format!("ROC, {cohort} cohort"), &curves);
        std::fs::write(out.join(format!("roc_{cohort}.svg")), svg)?;
    }
    Ok(report)
}
