//! The experiment stages. Each stage reads what earlier stages left in the
//! output directory, so they can run as separate processes; `run` chains
//! them in one process.
//!
//! Layout under `out_dir`:
//!
//! ```text
//! data/interactions.tsv, data/items.tsv   synth
//! prep/summary.json                       prep
//! <cache_dir>/pretrain-<key>.json         pretrain
//! runs/<label>/{model.json, train.json, history.jsonl}   train
//! eval/base.json, runs/<label>/eval.json  eval
//! report.json, table.csv, frontier.csv, alpha_trace.csv  report
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context};
use rayon::prelude::*;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use morec::backbone::{Checkpoint, MfModel};
use morec::coordinator::PiStep;
use morec::dataset::{
    build_catalog, kcore_filter, leave_one_out_split, load_interactions, load_item_metadata, InteractionDataset,
    ItemCatalog, ItemMetadata, RawInteractions, Split,
};
use morec::metrics::{evaluate, EvalReport, SolutionSet};
use morec::synth::synth_generate;
use morec::trainer::{continual_train, init_model, pretrain, EpochRecord, PretrainEpoch, TrainConfig};

use crate::config::{ExperimentConfig, Overrides};
use crate::report::{emit_report, AlphaTrace, Report};
use crate::RunError;

type Result<T> = std::result::Result<T, RunError>;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stage {
    Synth,
    Prep,
    Pretrain,
    Train,
    Eval,
    Report,
    Run,
}

#[derive(Clone, Debug)]
pub struct Prepared {
    pub dataset: InteractionDataset,
    pub catalog: ItemCatalog,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PrepSummary {
    pub config_digest: String,
    pub n_raw: usize,
    pub n_after_kcore: usize,
    pub n_users: usize,
    pub n_items: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    pub categories: Vec<String>,
}

/// Cached pretrain result. `checkpoint.config_digest` is the cache key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainArtifact {
    pub checkpoint: Checkpoint,
    pub converged_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<PretrainEpoch>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub config_digest: String,
    pub label: String,
    pub train: TrainConfig,
    pub target_loss: f64,
    pub best_epoch: Option<usize>,
    pub alpha_trace: Vec<PiStep>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub config_digest: String,
    pub label: String,
    pub report: EvalReport,
}

#[derive(Serialize)]
struct HistoryLine<'a> {
    config_digest: &'a str,
    label: &'a str,
    #[serde(flatten)]
    record: &'a EpochRecord,
}

/// Result of a full `run`.
#[derive(Clone, Debug)]
pub struct RunSummary {
    pub report: Report,
    /// `None` when the stage did not touch the pretrain cache.
    pub pretrain_cache_hit: Option<bool>,
}

/// Loads, validates and runs `stage`; returns the process exit code.
pub fn run_experiment(config_path: &Path, overrides: &Overrides) -> i32 {
    match run_stage(Stage::Run, config_path, overrides, &[]) {
        Ok(_) => 0,
        Err(e) => {
            log::error!("{e}");
            e.exit_code()
        }
    }
}

/// Runs one stage. `only` restricts `train` and `eval` to some sweep labels.
pub fn run_stage(stage: Stage, config_path: &Path, overrides: &Overrides, only: &[String]) -> Result<Option<RunSummary>> {
    let cfg = ExperimentConfig::load(config_path, overrides)?;
    cfg.validate()?;
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(j) = overrides.jobs {
        pool = pool.num_threads(j);
    }
    let pool = pool.build().map_err(|e| RunError::Failed(e.into()))?;
    pool.install(|| dispatch(stage, &cfg, only))
}

fn dispatch(stage: Stage, cfg: &ExperimentConfig, only: &[String]) -> Result<Option<RunSummary>> {
    let digest = cfg.digest()?;
    log::info!("config digest {digest}");
    match stage {
        Stage::Synth => {
            stage_synth(cfg)?;
        }
        Stage::Prep => {
            stage_prep(cfg)?;
        }
        Stage::Pretrain => {
            let prep = stage_prep(cfg)?;
            stage_pretrain(cfg, &prep)?;
        }
        Stage::Train => {
            let prep = stage_prep(cfg)?;
            let (base, _) = stage_pretrain(cfg, &prep)?;
            stage_train(cfg, &prep, &base, only)?;
        }
        Stage::Eval => {
            let prep = stage_prep(cfg)?;
            let (base, _) = stage_pretrain(cfg, &prep)?;
            stage_eval(cfg, &prep, &base, only)?;
        }
        Stage::Report => {
            let report = stage_report(cfg)?;
            return Ok(Some(RunSummary {
                report,
                pretrain_cache_hit: None,
            }));
        }
        Stage::Run => {
            let prep = stage_prep(cfg)?;
            let (base, hit) = stage_pretrain(cfg, &prep)?;
            stage_train(cfg, &prep, &base, &[])?;
            stage_eval(cfg, &prep, &base, &[])?;
            let report = stage_report(cfg)?;
            return Ok(Some(RunSummary {
                report,
                pretrain_cache_hit: Some(hit),
            }));
        }
    }
    Ok(None)
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(anyhow::Error::from)?;
    // Write then rename so a crashed run never leaves a truncated artifact.
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, text).with_context(|| format!("writing {}", tmp.display()))?;
    fs::rename(&tmp, path).with_context(|| format!("renaming {}", tmp.display()))?;
    Ok(())
}

fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    Ok(serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?)
}

fn raw_data(cfg: &ExperimentConfig) -> Result<(RawInteractions, ItemMetadata)> {
    let d = &cfg.data;
    if let Some(s) = &d.synth {
        let data = synth_generate(s, cfg.seed)?;
        return Ok((data.interactions, data.metadata));
    }
    let (inter, meta) = d.interactions.as_ref().zip(d.metadata.as_ref()).expect("validated data paths");
    Ok((load_interactions(inter, &d.load)?, load_item_metadata(meta, d.metadata_header)?))
}

/// Writes the generated data as TSV so it can be reused as file input.
pub fn stage_synth(cfg: &ExperimentConfig) -> Result<PathBuf> {
    if cfg.data.synth.is_none() {
        return Err(RunError::config("`synth` needs a [data.synth] section"));
    }
    let (raw, meta) = raw_data(cfg)?;
    let dir = cfg.out_dir.join("data");
    fs::create_dir_all(&dir).with_context(|| format!("creating {}", dir.display()))?;
    raw.write_tsv(&dir.join("interactions.tsv"))?;
    meta.write_tsv(&dir.join("items.tsv"))?;
    log::info!("wrote {} interactions to {}", raw.len(), dir.display());
    Ok(dir)
}

pub fn stage_prep(cfg: &ExperimentConfig) -> Result<Prepared> {
    let (raw, meta) = raw_data(cfg)?;
    let kept = kcore_filter(&raw, cfg.data.kcore)?;
    if kept.emptied {
        return Err(anyhow!("{}-core filtering removed every interaction", cfg.data.kcore).into());
    }
    let dataset = leave_one_out_split(&kept.interactions);
    let catalog = build_catalog(&meta, &dataset, cfg.data.n_buckets)?;
    let summary = PrepSummary {
        config_digest: cfg.digest()?,
        n_raw: raw.len(),
        n_after_kcore: kept.interactions.len(),
        n_users: dataset.n_users(),
        n_items: dataset.n_items(),
        n_train: dataset.train.len(),
        n_valid: dataset.valid.len(),
        n_test: dataset.test.len(),
        categories: catalog.category_names.clone(),
    };
    log::info!(
        "prep: {} -> {} interactions, {} users, {} items",
        summary.n_raw,
        summary.n_after_kcore,
        summary.n_users,
        summary.n_items
    );
    write_json(&cfg.out_dir.join("prep/summary.json"), &summary)?;
    Ok(Prepared { dataset, catalog })
}

/// Returns the base model and whether it came from the cache.
pub fn stage_pretrain(cfg: &ExperimentConfig, prep: &Prepared) -> Result<(PretrainArtifact, bool)> {
    let key = cfg.pretrain_key()?;
    let path = cfg.cache_dir().join(format!("pretrain-{key}.json"));
    if path.is_file() {
        let art: PretrainArtifact = read_json(&path)?;
        let m = &art.checkpoint.model;
        let fits = m.n_users == prep.dataset.n_users() && m.n_items == prep.dataset.n_items();
        if art.checkpoint.config_digest == key && fits {
            log::info!("pretrain cache hit {}", path.display());
            return Ok((art, true));
        }
        log::warn!("ignoring stale pretrain cache {}", path.display());
    }
    let model = init_model(&prep.dataset, &cfg.backbone, cfg.seed)?;
    let out = pretrain(&model, &prep.dataset, &prep.catalog, &cfg.pretrain).context("pretraining")?;
    log::info!(
        "pretrain: best epoch {} of {}, converged loss {:.4}",
        out.best_epoch,
        out.history.len(),
        out.converged_loss
    );
    let art = PretrainArtifact {
        checkpoint: Checkpoint::new(out.model, key),
        converged_loss: out.converged_loss,
        best_epoch: out.best_epoch,
        history: out.history,
    };
    write_json(&path, &art)?;
    Ok((art, false))
}

fn selected_entries(cfg: &ExperimentConfig, only: &[String]) -> Result<Vec<(String, TrainConfig)>> {
    let all: Vec<(String, TrainConfig)> = (0..cfg.sweep.len()).map(|i| cfg.entry(i)).collect();
    for l in only {
        if !all.iter().any(|(label, _)| label == l) {
            return Err(RunError::config(format!("no sweep entry labelled `{l}`")));
        }
    }
    Ok(all.into_iter().filter(|(l, _)| only.is_empty() || only.contains(l)).collect())
}

fn run_dir(cfg: &ExperimentConfig, label: &str) -> PathBuf {
    cfg.out_dir.join("runs").join(label)
}

/// One continual-training run per sweep entry, in parallel. Entries write
/// only to their own directory.
pub fn stage_train(cfg: &ExperimentConfig, prep: &Prepared, base: &PretrainArtifact, only: &[String]) -> Result<()> {
    let digest = cfg.digest()?;
    let entries = selected_entries(cfg, only)?;
    entries.par_iter().try_for_each(|(label, tc)| -> Result<()> {
        let out = continual_train(
            &base.checkpoint.model,
            &prep.dataset,
            &prep.catalog,
            tc,
            Some(base.converged_loss),
        )
        .with_context(|| format!("sweep entry `{label}`"))?;
        let dir = run_dir(cfg, label);
        write_json(&dir.join("model.json"), &Checkpoint::new(out.model, digest.clone()))?;
        let mut lines = String::new();
        for record in &out.history.epochs {
            let line = HistoryLine {
                config_digest: &digest,
                label,
                record,
            };
            lines.push_str(&serde_json::to_string(&line).map_err(anyhow::Error::from)?);
            lines.push('\n');
        }
        fs::write(dir.join("history.jsonl"), lines).with_context(|| format!("writing history of `{label}`"))?;
        let record = TrainRecord {
            config_digest: digest.clone(),
            label: label.clone(),
            train: tc.clone(),
            target_loss: out.history.target_loss,
            best_epoch: out.history.best_epoch,
            alpha_trace: out.history.alpha_trace,
        };
        write_json(&dir.join("train.json"), &record)?;
        log::info!("trained `{label}` ({} epochs)", out.history.epochs.len());
        Ok(())
    })
}

fn check_digest(found: &str, expected: &str, what: &Path) -> Result<()> {
    if found != expected {
        return Err(anyhow!(
            "{} belongs to config {found}, not {expected}; rerun the earlier stages",
            what.display()
        )
        .into());
    }
    Ok(())
}

/// Test-split metrics for the base and every trained entry.
pub fn stage_eval(cfg: &ExperimentConfig, prep: &Prepared, base: &PretrainArtifact, only: &[String]) -> Result<()> {
    let digest = cfg.digest()?;
    let k = cfg.train.eval_k;
    let eval = |label: &str, model: &MfModel| -> Result<EvalRecord> {
        let report = evaluate(model, &prep.dataset, &prep.catalog, Split::Test, k)?;
        Ok(EvalRecord {
            config_digest: digest.clone(),
            label: label.to_string(),
            report,
        })
    };
    write_json(&cfg.out_dir.join("eval/base.json"), &eval("base", &base.checkpoint.model)?)?;
    for (label, _) in selected_entries(cfg, only)? {
        let dir = run_dir(cfg, &label);
        let path = dir.join("model.json");
        let ck = Checkpoint::load(&path).with_context(|| format!("loading `{label}`; run `train` first"))?;
        check_digest(&ck.config_digest, &digest, &path)?;
        write_json(&dir.join("eval.json"), &eval(&label, &ck.model)?)?;
    }
    Ok(())
}

/// Aggregates the evaluations into the report bundle. Single-threaded.
pub fn stage_report(cfg: &ExperimentConfig) -> Result<Report> {
    let digest = cfg.digest()?;
    let base_path = cfg.out_dir.join("eval/base.json");
    let base: EvalRecord = read_json(&base_path)?;
    check_digest(&base.config_digest, &digest, &base_path)?;
    let mut set = SolutionSet::new(&digest, base.report);
    let mut traces = Vec::new();
    for i in 0..cfg.sweep.len() {
        let (label, _) = cfg.entry(i);
        let dir = run_dir(cfg, &label);
        let ev: EvalRecord = read_json(&dir.join("eval.json"))?;
        check_digest(&ev.config_digest, &digest, &dir.join("eval.json"))?;
        let tr: TrainRecord = read_json(&dir.join("train.json"))?;
        check_digest(&tr.config_digest, &digest, &dir.join("train.json"))?;
        set.push(label.clone(), ev.report);
        traces.push(AlphaTrace {
            label,
            steps: tr.alpha_trace,
        });
    }
    let report = Report::build(set, cfg.pretrain_key()?)?;
    emit_report(&report, &traces, &cfg.out_dir)?;
    match &report.selected {
        Some(l) => log::info!("selected `{l}`; report in {}", cfg.out_dir.display()),
        None => log::info!("no solutions; report in {}", cfg.out_dir.display()),
    }
    Ok(report)
}
