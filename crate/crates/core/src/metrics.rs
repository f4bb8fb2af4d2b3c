//! Top-K evaluation metrics, the average relative improvement (`Imp`),
//! Pareto-dominance tooling and solution selection.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backbone::{topk_recommend, MfModel};
use crate::dataset::{InteractionDataset, ItemCatalog, Split};
use crate::sampler::train_bucket_counts;
use crate::{Error, Result};

/// Additive smoothing applied to bucket distributions before KL.
pub const KL_SMOOTHING: f64 = 1e-6;
/// A solution is valid when its Hit is at least this fraction of the base Hit.
pub const VALIDITY_RATIO: f64 = 0.97;
pub const DEFAULT_K: usize = 10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub k: usize,
    pub n_users: usize,
    pub hit: f64,
    /// Mean over evaluated users of `price(target) * hit`.
    pub rhit: f64,
    /// `KL(Q || P)` in nats between train and recommended bucket frequencies.
    pub pop_kl: f64,
    /// Hit of the worst category (category of the held-out item).
    pub min_hit: f64,
    pub per_category_hit: BTreeMap<String, f64>,
}

impl EvalReport {
    /// `[hit, rhit, pop_kl, min_hit]`.
    pub fn metrics(&self) -> [f64; 4] {
        [self.hit, self.rhit, self.pop_kl, self.min_hit]
    }
}

/// Top-`k` list (train items excluded) for every interaction of `split`.
pub fn topk_lists(model: &MfModel, dataset: &InteractionDataset, split: Split, k: usize) -> Result<Vec<Vec<u32>>> {
    dataset
        .split(split)
        .par_iter()
        .map(|t| topk_recommend(model, t.user as usize, k, dataset.history(t.user)))
        .collect()
}

/// Bucket histogram of every item in the top-`k` lists of `split`'s users.
pub fn recommendation_bucket_counts(
    model: &MfModel,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    split: Split,
    k: usize,
) -> Result<Vec<f64>> {
    let lists = topk_lists(model, dataset, split, k)?;
    Ok(bucket_counts(&lists, catalog))
}

fn bucket_counts(lists: &[Vec<u32>], catalog: &ItemCatalog) -> Vec<f64> {
    let mut counts = vec![0.0; catalog.n_buckets];
    for item in lists.iter().flatten() {
        counts[catalog.pop_bucket[*item as usize] as usize] += 1.0;
    }
    counts
}

/// Normalizes counts, adds `eps` to every entry, renormalizes.
pub fn smoothed_distribution(counts: &[f64], eps: f64) -> Vec<f64> {
    let total: f64 = counts.iter().sum();
    let freq: Vec<f64> = if total > 0.0 {
        counts.iter().map(|c| c / total).collect()
    } else {
        vec![0.0; counts.len()]
    };
    let z: f64 = freq.iter().map(|f| f + eps).sum();
    freq.iter().map(|f| (f + eps) / z).collect()
}

/// `sum_i q_i ln(q_i / p_i)`; terms with `q_i = 0` contribute nothing.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(qi, _)| **qi > 0.0)
        .map(|(qi, pi)| qi * (qi / pi).ln())
        .sum()
}

/// Evaluates all four metrics on `split` (normally [`Split::Test`]).
pub fn evaluate(
    model: &MfModel,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    split: Split,
    k: usize,
) -> Result<EvalReport> {
    let targets = dataset.split(split);
    if targets.is_empty() {
        return Err(Error::Empty("evaluation split"));
    }
    let lists = topk_lists(model, dataset, split, k)?;
    let mut hits = 0.0;
    let mut rhit = 0.0;
    let mut per_cat: BTreeMap<u32, (f64, f64)> = BTreeMap::new();
    for (t, list) in targets.iter().zip(&lists) {
        let hit = if list.contains(&t.item) { 1.0 } else { 0.0 };
        hits += hit;
        rhit += hit * catalog.price[t.item as usize];
        let e = per_cat.entry(catalog.category[t.item as usize]).or_default();
        e.0 += hit;
        e.1 += 1.0;
    }
    let n = targets.len() as f64;
    let per_category_hit: BTreeMap<String, f64> = per_cat
        .iter()
        .map(|(c, (h, cnt))| (catalog.category_names[*c as usize].clone(), h / cnt))
        .collect();
    let min_hit = per_category_hit.values().copied().fold(f64::INFINITY, f64::min);

    let p = smoothed_distribution(&bucket_counts(&lists, catalog), KL_SMOOTHING);
    let q = smoothed_distribution(&train_bucket_counts(dataset, catalog), KL_SMOOTHING);

    Ok(EvalReport {
        k,
        n_users: targets.len(),
        hit: hits / n,
        rhit: rhit / n,
        pop_kl: kl_divergence(&q, &p),
        min_hit,
        per_category_hit,
    })
}

pub fn hit_at_k(model: &MfModel, dataset: &InteractionDataset, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    Ok(evaluate(model, dataset, catalog, Split::Test, k)?.hit)
}

pub fn rhit_at_k(model: &MfModel, dataset: &InteractionDataset, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    Ok(evaluate(model, dataset, catalog, Split::Test, k)?.rhit)
}

pub fn pop_kl(model: &MfModel, dataset: &InteractionDataset, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    Ok(evaluate(model, dataset, catalog, Split::Test, k)?.pop_kl)
}

pub fn min_hit(model: &MfModel, dataset: &InteractionDataset, catalog: &ItemCatalog, k: usize) -> Result<f64> {
    Ok(evaluate(model, dataset, catalog, Split::Test, k)?.min_hit)
}

const METRIC_NAMES: [&str; 4] = ["hit", "rhit", "pop_kl", "min_hit"];
/// Pop-KL is lower-is-better; the others are higher-is-better.
const LOWER_IS_BETTER: [bool; 4] = [false, false, true, false];

fn relative_gains(base: &[f64; 4], sol: &[f64; 4]) -> [Option<f64>; 4] {
    let mut out = [None; 4];
    for i in 0..4 {
        if base[i] != 0.0 {
            let d = if LOWER_IS_BETTER[i] { base[i] - sol[i] } else { sol[i] - base[i] };
            out[i] = Some(d / base[i]);
        }
    }
    out
}

/// Mean relative improvement over `[hit, rhit, pop_kl, min_hit]`, in percent.
pub fn imp_from_metrics(base: &[f64; 4], sol: &[f64; 4]) -> Result<f64> {
    let gains = relative_gains(base, sol);
    let mut sum = 0.0;
    for (g, name) in gains.iter().zip(METRIC_NAMES) {
        sum += g.ok_or(Error::ZeroBaseMetric(name))?;
    }
    Ok(100.0 * sum / 4.0)
}

pub fn imp(base: &EvalReport, sol: &EvalReport) -> Result<f64> {
    imp_from_metrics(&base.metrics(), &sol.metrics())
}

/// Like [`imp`] but averages only over metrics whose base value is nonzero.
pub fn imp_lenient(base: &EvalReport, sol: &EvalReport) -> f64 {
    let gains: Vec<f64> = relative_gains(&base.metrics(), &sol.metrics()).into_iter().flatten().collect();
    if gains.is_empty() {
        0.0
    } else {
        100.0 * gains.iter().sum::<f64>() / gains.len() as f64
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Direction {
    Maximize,
    Minimize,
}

/// `a` is weakly better everywhere and strictly better somewhere.
pub fn dominates(a: &[f64], b: &[f64], dirs: &[Direction]) -> bool {
    let mut strict = false;
    for ((x, y), d) in a.iter().zip(b).zip(dirs) {
        let (x, y) = match d {
            Direction::Maximize => (*x, *y),
            Direction::Minimize => (-*x, -*y),
        };
        if x < y {
            return false;
        }
        if x > y {
            strict = true;
        }
    }
    strict
}

/// Indices (ascending) of the non-dominated points.
///
/// Points are visited in decreasing lexicographic order of their oriented
/// coordinates; a dominator always precedes what it dominates in that order,
/// so each point only has to be checked against the frontier found so far.
pub fn pareto_frontier(points: &[Vec<f64>], dirs: &[Direction]) -> Result<Vec<usize>> {
    if points.iter().any(|p| p.len() != dirs.len()) {
        return Err(Error::Shape("every point needs one value per direction".into()));
    }
    let oriented = |i: usize| -> Vec<f64> {
        points[i]
            .iter()
            .zip(dirs)
            .map(|(x, d)| if *d == Direction::Maximize { *x } else { -*x })
            .collect()
    };
    let keys: Vec<Vec<f64>> = (0..points.len()).map(oriented).collect();
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| {
        keys[b]
            .iter()
            .zip(&keys[a])
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if !front.iter().any(|&f| dominates(&points[f], &points[i], dirs)) {
            front.push(i);
        }
    }
    front.sort_unstable();
    Ok(front)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionRow {
    pub label: String,
    pub config_digest: String,
    pub report: EvalReport,
    pub imp: f64,
    pub valid: bool,
}

impl SolutionRow {
    /// Scores `report` against `base`. Falls back to [`imp_lenient`] when a
    /// base metric is zero.
    pub fn new(label: impl Into<String>, config_digest: impl Into<String>, report: EvalReport, base: &EvalReport) -> Self {
        let label = label.into();
        let imp = imp(base, &report).unwrap_or_else(|e| {
            log::warn!("{label}: {e}; averaging over the remaining metrics");
            imp_lenient(base, &report)
        });
        let valid = is_valid(&report, base);
        Self {
            label,
            config_digest: config_digest.into(),
            report,
            imp,
            valid,
        }
    }
}

pub fn is_valid(report: &EvalReport, base: &EvalReport) -> bool {
    report.hit >= VALIDITY_RATIO * base.hit
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolutionSet {
    pub base: SolutionRow,
    pub solutions: Vec<SolutionRow>,
}

impl SolutionSet {
    pub fn new(config_digest: &str, base: EvalReport) -> Self {
        let row = SolutionRow {
            label: "base".into(),
            config_digest: config_digest.into(),
            report: base,
            imp: 0.0,
            valid: true,
        };
        Self {
            base: row,
            solutions: Vec::new(),
        }
    }

    pub fn push(&mut self, label: impl Into<String>, report: EvalReport) {
        let row = SolutionRow::new(label, self.base.config_digest.clone(), report, &self.base.report);
        self.solutions.push(row);
    }
}

/// Picks the highest-Imp valid solution; if none is valid, the highest-Hit
/// one. Ties go to the lexicographically first label. `None` when empty.
pub fn select_solution(candidates: &[SolutionRow], base: &EvalReport) -> Option<usize> {
    let valid: Vec<usize> = (0..candidates.len()).filter(|&i| is_valid(&candidates[i].report, base)).collect();
    let (pool, key): (Vec<usize>, fn(&SolutionRow) -> f64) = if valid.is_empty() {
        ((0..candidates.len()).collect(), |r| r.report.hit)
    } else {
        (valid, |r| r.imp)
    };
    pool.into_iter().reduce(|best, i| {
        let (a, b) = (&candidates[best], &candidates[i]);
        match key(b).total_cmp(&key(a)) {
            std::cmp::Ordering::Greater => i,
            std::cmp::Ordering::Equal if b.label < a.label => i,
            _ => best,
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(m: [f64; 4]) -> EvalReport {
        EvalReport {
            k: 10,
            n_users: 1,
            hit: m[0],
            rhit: m[1],
            pop_kl: m[2],
            min_hit: m[3],
            per_category_hit: BTreeMap::new(),
        }
    }

    const BASE: [f64; 4] = [1.62, 135.42, 142.54, 0.91];

    #[test]
    fn imp_against_published_rows() {
        let morec = imp_from_metrics(&BASE, &[1.63, 225.19, 16.81, 1.05]).unwrap();
        assert!((morec - 42.60).abs() <= 0.3, "{morec}");
        assert!((morec - 42.62).abs() < 0.01);
        let stat = imp_from_metrics(&BASE, &[1.62, 197.56, 37.09, 1.00]).unwrap();
        assert!((stat - 32.41).abs() <= 0.3, "{stat}");
        assert_eq!(imp_from_metrics(&BASE, &BASE).unwrap(), 0.0);
        assert!(matches!(
            imp_from_metrics(&[1.0, 1.0, 0.0, 1.0], &BASE),
            Err(Error::ZeroBaseMetric("pop_kl"))
        ));
    }

    #[test]
    fn kl_examples() {
        assert_eq!(kl_divergence(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        let v = kl_divergence(&[0.5, 0.5], &[0.25, 0.75]);
        let expected = 0.5 * 2f64.ln() + 0.5 * (2.0f64 / 3.0).ln();
        assert!((v - expected).abs() < 1e-15);
        assert!((v - 0.1438).abs() < 1e-4);
        let s = smoothed_distribution(&[50.0, 50.0], KL_SMOOTHING);
        assert!((s[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn pareto_examples() {
        let dirs = [Direction::Maximize, Direction::Maximize];
        let pts = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(pareto_frontier(&pts, &dirs).unwrap(), vec![1]);
        let same = vec![vec![1.0, 3.0]; 4];
        assert_eq!(pareto_frontier(&same, &dirs).unwrap(), vec![0, 1, 2, 3]);
        let mixed = [Direction::Maximize, Direction::Minimize];
        let pts = vec![vec![1.0, 1.0], vec![2.0, 2.0], vec![1.0, 2.0]];
        assert_eq!(pareto_frontier(&pts, &mixed).unwrap(), vec![0, 1]);
        assert!(pareto_frontier(&[vec![1.0]], &dirs).is_err());
    }

    fn row(label: &str, m: [f64; 4]) -> SolutionRow {
        SolutionRow::new(label, "d", report(m), &report(BASE))
    }

    #[test]
    fn selection_rule() {
        let base = report(BASE);
        // all below 0.97 * 1.62 = 1.5714: highest hit wins
        let invalid = vec![
            row("a", [1.32, 262.84, 20.37, 0.32]),
            row("b", [1.28, 256.53, 19.74, 0.25]),
            row("c", [1.31, 255.88, 20.07, 0.29]),
        ];
        assert_eq!(select_solution(&invalid, &base), Some(0));

        let mut one_valid = invalid.clone();
        one_valid.push(row("d", [1.60, 140.0, 140.0, 0.91]));
        assert_eq!(select_solution(&one_valid, &base), Some(3));

        let two = vec![row("r1", [1.63, 225.19, 16.81, 1.05]), row("r2", [1.59, 223.12, 23.35, 1.09])];
        assert_eq!(select_solution(&two, &base), Some(0));

        let tie = vec![row("z", BASE), row("y", BASE)];
        assert_eq!(select_solution(&tie, &base), Some(1));
        assert_eq!(select_solution(&[], &base), None);
    }

    #[test]
    fn min_hit_zero_category_falls_back_to_lenient_imp() {
        let base = report([0.2, 5.0, 0.3, 0.0]);
        let r = SolutionRow::new("s", "d", report([0.2, 5.5, 0.3, 0.1]), &base);
        assert!((r.imp - 100.0 * 0.1 / 3.0).abs() < 1e-9);
    }
}
