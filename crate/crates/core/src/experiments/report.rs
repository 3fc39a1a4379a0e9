//! Result tables: per-evaluation errors, per-condition summaries, fits of
//! the condition medians, and provenance.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ExperimentConfig;
use super::dataset::write_json;
use super::pipeline::{EvalRow, TrainingInfo};
use crate::stats::{linear_fit, median, spearman, summarize, Summary};
use crate::{Error, Result};

pub const POSITION: &str = "position_error_mm";
pub const FORWARD_ANGLE: &str = "forward_angle_error_deg";

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionResult {
    pub label: String,
    /// Abscissa for fits; `None` keeps the condition out of them.
    pub x: Option<f64>,
    pub training: Option<TrainingInfo>,
    pub model_file: String,
    pub model_hash: String,
    pub rows: Vec<EvalRow>,
}

impl ConditionResult {
    pub fn values(&self, metric: &str) -> Vec<f64> {
        if let Some(i) = metric.strip_prefix("position_error_mm_iter") {
            let i: usize = i.parse().unwrap_or(usize::MAX);
            return self
                .rows
                .iter()
                .filter_map(|r| r.trace_position_error_mm.get(i).copied())
                .collect();
        }
        self.rows
            .iter()
            .map(|r| match metric {
                FORWARD_ANGLE => r.forward_angle_error_deg,
                _ => r.position_error_mm,
            })
            .collect()
    }

    pub fn summary(&self, metric: &str) -> Result<Summary> {
        summarize(&self.values(metric))
    }

    /// Largest number of recorded iterations over all rows.
    pub fn max_iterations(&self) -> usize {
        self.rows.iter().map(|r| r.iterations).max().unwrap_or(0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitRow {
    pub n: usize,
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
    pub spearman: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentResult {
    pub name: String,
    /// Meaning of [`ConditionResult::x`], e.g. `eta`.
    pub x_name: String,
    pub conditions: Vec<ConditionResult>,
}

impl ExperimentResult {
    pub fn condition(&self, label: &str) -> Option<&ConditionResult> {
        self.conditions.iter().find(|c| c.label == label)
    }

    /// (x, statistic) over the conditions that take part in fits.
    pub fn series(&self, metric: &str, stat: impl Fn(&[f64]) -> Result<f64>) -> Result<(Vec<f64>, Vec<f64>)> {
        let mut xs = Vec::new();
        let mut ys = Vec::new();
        for c in &self.conditions {
            if let Some(x) = c.x {
                xs.push(x);
                ys.push(stat(&c.values(metric))?);
            }
        }
        Ok((xs, ys))
    }

    /// Linear fit and rank correlation of `stat(metric)` against `x`.
    pub fn fit(&self, metric: &str, stat: impl Fn(&[f64]) -> Result<f64>) -> Result<FitRow> {
        let (xs, ys) = self.series(metric, stat)?;
        let lf = linear_fit(&xs, &ys)?;
        Ok(FitRow {
            n: xs.len(),
            slope: lf.slope,
            intercept: lf.intercept,
            r2: lf.r2,
            spearman: spearman(&xs, &ys)?,
        })
    }
}

pub fn std_of(values: &[f64]) -> Result<f64> {
    Ok(summarize(values)?.std)
}

const ERROR_HEADER: [&str; 14] = [
    "condition",
    "image_id",
    "repetition",
    "iterations",
    "x_gt_u",
    "x_gt_v",
    "x_est_u",
    "x_est_v",
    "alpha_gt",
    "alpha_est",
    "position_error_mm",
    "forward_angle_error_deg",
    "fallback",
    "aborted",
];

const SUMMARY_HEADER: [&str; 13] = [
    "condition", "x", "metric", "n", "mean", "std", "min", "q05", "q25", "median", "q75", "q95", "max",
];

const FIT_HEADER: [&str; 8] = ["metric", "statistic", "x", "n", "slope", "intercept", "r2", "spearman"];

fn opt(x: Option<f64>) -> String {
    x.map(|v| v.to_string()).unwrap_or_default()
}

#[derive(Serialize)]
struct ConditionProvenance<'a> {
    label: &'a str,
    x: Option<f64>,
    training: &'a Option<TrainingInfo>,
    model_file: &'a str,
    model_hash: &'a str,
    evaluations: usize,
    fallbacks: usize,
    aborted: usize,
}

#[derive(Serialize)]
struct Provenance<'a> {
    experiment: &'a str,
    code_version: String,
    config_hash: String,
    config: &'a ExperimentConfig,
    conditions: Vec<ConditionProvenance<'a>>,
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

fn csv_err(path: &Path) -> impl Fn(csv::Error) -> Error + '_ {
    move |e| Error::Format(format!("{}: {e}", path.display()))
}

pub fn code_version() -> String {
    format!("{} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION"))
}

/// Writes `errors.csv`, `summary.csv`, `fit.csv` and `provenance.json`.
/// Nothing time- or host-dependent is recorded, so identical inputs give
/// identical files.
pub fn write_results(dir: &Path, result: &ExperimentResult, cfg: &ExperimentConfig) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;

    let p = dir.join("errors.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(ERROR_HEADER).map_err(csv_err(&p))?;
    for c in &result.conditions {
        for r in &c.rows {
            w.write_record([
                c.label.clone(),
                r.image_id.clone(),
                r.repetition.to_string(),
                r.iterations.to_string(),
                r.x_gt_u.to_string(),
                r.x_gt_v.to_string(),
                r.x_est_u.to_string(),
                r.x_est_v.to_string(),
                r.alpha_gt.to_string(),
                r.alpha_est.to_string(),
                r.position_error_mm.to_string(),
                r.forward_angle_error_deg.to_string(),
                r.fallback.to_string(),
                r.aborted.to_string(),
            ])
            .map_err(csv_err(&p))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("summary.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(SUMMARY_HEADER).map_err(csv_err(&p))?;
    for c in &result.conditions {
        let mut metrics = vec![POSITION.to_string(), FORWARD_ANGLE.to_string()];
        metrics.extend((0..=c.max_iterations()).map(|i| format!("{POSITION}_iter{i}")));
        for m in metrics {
            let s = c.summary(&m)?;
            let mut rec = vec![c.label.clone(), opt(c.x), m, s.n.to_string()];
            rec.extend([s.mean, s.std, s.min, s.q05, s.q25, s.median, s.q75, s.q95, s.max].map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err(&p))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let p = dir.join("fit.csv");
    let mut w = csv_writer(&p)?;
    w.write_record(FIT_HEADER).map_err(csv_err(&p))?;
    if result.conditions.iter().filter(|c| c.x.is_some()).count() >= 2 {
        let fits: [(&str, &str, FitRow); 2] = [
            (POSITION, "median", result.fit(POSITION, median)?),
            (FORWARD_ANGLE, "std", result.fit(FORWARD_ANGLE, std_of)?),
        ];
        for (metric, statistic, fit) in fits {
            let mut rec = vec![metric.to_string(), statistic.to_string(), result.x_name.clone(), fit.n.to_string()];
            rec.extend([fit.slope, fit.intercept, fit.r2, fit.spearman].map(|v| v.to_string()));
            w.write_record(&rec).map_err(csv_err(&p))?;
        }
    }
    w.flush().map_err(|e| Error::io(&p, e))?;

    let prov = Provenance {
        experiment: &result.name,
        code_version: code_version(),
        config_hash: crate::renderer::short_hash(&serde_json::to_vec(cfg).expect("config serializes")),
        config: cfg,
        conditions: result
            .conditions
            .iter()
            .map(|c| ConditionProvenance {
                label: &c.label,
                x: c.x,
                training: &c.training,
                model_file: &c.model_file,
                model_hash: &c.model_hash,
                evaluations: c.rows.len(),
                fallbacks: c.rows.iter().filter(|r| r.fallback).count(),
                aborted: c.rows.iter().filter(|r| r.aborted).count(),
            })
            .collect(),
    };
    write_json(&dir.join("provenance.json"), &prov)
}

/// Reads one numeric column of a CSV file, optionally keeping only rows
/// whose `filter_column` equals `filter_value`.
pub fn read_csv_column(path: &Path, column: &str, filter: Option<(&str, &str)>) -> Result<Vec<f64>> {
    let mut rdr = csv::Reader::from_path(path).map_err(csv_err(path))?;
    let headers = rdr.headers().map_err(csv_err(path))?.clone();
    let find = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Format(format!("{}: no column `{name}`", path.display())))
    };
    let col = find(column)?;
    let filter = filter.map(|(c, v)| find(c).map(|i| (i, v))).transpose()?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(csv_err(path))?;
        if let Some((i, v)) = filter {
            if rec.get(i) != Some(v) {
                continue;
            }
        }
        let cell = rec.get(col).unwrap_or("");
        let x: f64 = cell
            .parse()
            .map_err(|_| Error::Format(format!("{}: `{cell}` is not a number", path.display())))?;
        out.push(x);
    }
    Ok(out)
}
