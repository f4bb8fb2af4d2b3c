//! The report bundle written at the end of a run.

use std::fs;
use std::path::Path;

use anyhow::{anyhow, Context};
use serde::{Deserialize, Serialize};

use morec::coordinator::PiStep;
use morec::metrics::{pareto_frontier, select_solution, Direction, SolutionRow, SolutionSet};

use crate::RunError;

/// Metric columns in `EvalReport::metrics` order.
pub const METRICS: [&str; 4] = ["hit", "rhit", "pop_kl", "min_hit"];
pub const DIRECTIONS: [Direction; 4] = [
    Direction::Maximize,
    Direction::Maximize,
    Direction::Minimize,
    Direction::Maximize,
];

pub const TABLE_HEADER: [&str; 9] = [
    "config_digest",
    "label",
    "hit",
    "rhit",
    "pop_kl",
    "min_hit",
    "imp",
    "valid",
    "selected",
];
pub const FRONTIER_HEADER: [&str; 6] = ["config_digest", "x_metric", "y_metric", "label", "x", "y"];
pub const ALPHA_HEADER: [&str; 6] = ["config_digest", "label", "step", "err", "err_sum", "alpha_acc"];

/// A solution on the two-metric frontier of `(x_metric, y_metric)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FrontierPoint {
    pub x_metric: String,
    pub y_metric: String,
    pub label: String,
    pub x: f64,
    pub y: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AlphaTrace {
    pub label: String,
    pub steps: Vec<PiStep>,
}

/// Everything in `report.json`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub config_digest: String,
    pub pretrain_key: String,
    pub set: SolutionSet,
    pub selected: Option<String>,
    pub frontier: Vec<FrontierPoint>,
}

/// Non-dominated solutions for every pair of metrics. The base is not a
/// candidate.
pub fn frontier_points(solutions: &[SolutionRow]) -> Vec<FrontierPoint> {
    let mut out = Vec::new();
    for i in 0..METRICS.len() {
        for j in i + 1..METRICS.len() {
            let pts: Vec<Vec<f64>> = solutions
                .iter()
                .map(|r| {
                    let m = r.report.metrics();
                    vec![m[i], m[j]]
                })
                .collect();
            let front = pareto_frontier(&pts, &[DIRECTIONS[i], DIRECTIONS[j]]).expect("two values per point");
            out.extend(front.into_iter().map(|k| FrontierPoint {
                x_metric: METRICS[i].into(),
                y_metric: METRICS[j].into(),
                label: solutions[k].label.clone(),
                x: pts[k][0],
                y: pts[k][1],
            }));
        }
    }
    out
}

impl Report {
    /// Selects a solution and extracts the frontiers. Fails if any row was
    /// produced under a different config digest.
    pub fn build(set: SolutionSet, pretrain_key: String) -> Result<Self, RunError> {
        let digest = set.base.config_digest.clone();
        if let Some(r) = set.solutions.iter().find(|r| r.config_digest != digest) {
            return Err(anyhow!("solution `{}` has digest {}, base has {digest}", r.label, r.config_digest).into());
        }
        let selected = select_solution(&set.solutions, &set.base.report).map(|i| set.solutions[i].label.clone());
        let frontier = frontier_points(&set.solutions);
        Ok(Report {
            config_digest: digest,
            pretrain_key,
            set,
            selected,
            frontier,
        })
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>, RunError> {
    Ok(csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?)
}

// `{}` on f64 prints the shortest string that parses back to the same value.
fn num(x: f64) -> String {
    format!("{x}")
}

fn finish(w: csv::Writer<fs::File>, path: &Path) -> Result<(), RunError> {
    w.into_inner()
        .map_err(|e| anyhow!("flushing {}: {e}", path.display()))?
        .sync_all()
        .with_context(|| format!("syncing {}", path.display()))?;
    Ok(())
}

/// Writes `report.json`, `table.csv`, `frontier.csv` and `alpha_trace.csv`
/// into `out_dir`. Every CSV row carries the config digest.
pub fn emit_report(report: &Report, alpha_traces: &[AlphaTrace], out_dir: &Path) -> Result<(), RunError> {
    fs::create_dir_all(out_dir).with_context(|| format!("creating {}", out_dir.display()))?;
    let d = report.config_digest.as_str();

    let json = serde_json::to_string_pretty(report).map_err(anyhow::Error::from)?;
    let path = out_dir.join("report.json");
    fs::write(&path, json + "\n").with_context(|| format!("writing {}", path.display()))?;

    let path = out_dir.join("table.csv");
    let mut w = csv_writer(&path)?;
    let write_err = |e: csv::Error| RunError::Failed(anyhow!("writing {}: {e}", path.display()));
    w.write_record(TABLE_HEADER).map_err(write_err)?;
    let rows = std::iter::once(&report.set.base).chain(&report.set.solutions);
    for r in rows {
        let m = r.report.metrics();
        let selected = report.selected.as_deref() == Some(r.label.as_str());
        w.write_record([
            d.to_string(),
            r.label.clone(),
            num(m[0]),
            num(m[1]),
            num(m[2]),
            num(m[3]),
            num(r.imp),
            r.valid.to_string(),
            selected.to_string(),
        ])
        .map_err(write_err)?;
    }
    finish(w, &path)?;

    let path = out_dir.join("frontier.csv");
    let mut w = csv_writer(&path)?;
    let write_err = |e: csv::Error| RunError::Failed(anyhow!("writing {}: {e}", path.display()));
    w.write_record(FRONTIER_HEADER).map_err(write_err)?;
    for p in &report.frontier {
        w.write_record([d, &p.x_metric, &p.y_metric, &p.label, &num(p.x), &num(p.y)])
            .map_err(write_err)?;
    }
    finish(w, &path)?;

    let path = out_dir.join("alpha_trace.csv");
    let mut w = csv_writer(&path)?;
    let write_err = |e: csv::Error| RunError::Failed(anyhow!("writing {}: {e}", path.display()));
    w.write_record(ALPHA_HEADER).map_err(write_err)?;
    for t in alpha_traces {
        for s in &t.steps {
            w.write_record([
                d,
                &t.label,
                &s.step.to_string(),
                &num(s.err),
                &num(s.err_sum),
                &num(s.alpha_acc),
            ])
            .map_err(write_err)?;
        }
    }
    finish(w, &path)
}
