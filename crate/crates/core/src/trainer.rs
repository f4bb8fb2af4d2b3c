//! Pretraining on accuracy and the tri-level continual training loop.
//!
//! Each continual step draws one batch per active objective from that
//! objective's weight table, asks the PI controller for the accuracy weight,
//! and takes a single Adam step on the synthesized loss. After each epoch the
//! fairness and alignment tables are updated from validation feedback.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::backbone::{apply_gradients, Gradients, LossMode, MfModel, NegativeSampler, OptimizerState};
use crate::coordinator::{static_alpha, synthesize_loss, PiConfig, PiController, PiStep, PreferenceVector};
use crate::dataset::{InteractionDataset, ItemCatalog, Split};
use crate::metrics::{evaluate, imp_lenient, is_valid, EvalReport, DEFAULT_K};
use crate::objectives::{
    batch_objective_loss, inverse_popularity_surrogate_loss, pearson_fairness_loss, revenue_surrogate_loss, Batch,
    ObjectiveKind, ObjectiveSpec,
};
use crate::rng::{self, StreamRng};
use crate::sampler::{exposure_distribution, init_weights, GroupWeightTable, SamplerConfig, WeightTableSnapshot};
use crate::{Error, Result};

pub const STREAM_INIT: &str = "model-init";
pub const STREAM_PRETRAIN_SAMPLER: &str = "pretrain/sampler";
pub const STREAM_PRETRAIN_NEGATIVES: &str = "pretrain/negatives";
pub const STREAM_SAMPLER: &str = "continual/sampler";
pub const STREAM_NEGATIVES: &str = "continual/negatives";
pub const STREAM_VALID_NEGATIVES: &str = "continual/valid-negatives";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BackboneConfig {
    pub dim: usize,
    pub use_bias: bool,
    pub init_std: f64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            dim: 64,
            use_bias: true,
            init_std: 0.1,
        }
    }
}

/// Fresh model for `dataset`, initialized from the `model-init` stream.
pub fn init_model(dataset: &InteractionDataset, cfg: &BackboneConfig, seed: u64) -> Result<MfModel> {
    if cfg.dim == 0 {
        return Err(Error::config("embedding dimension must be >= 1"));
    }
    let mut r = rng::stream(seed, STREAM_INIT);
    Ok(MfModel::random(dataset.n_users(), dataset.n_items(), cfg.dim, cfg.use_bias, cfg.init_std, &mut r))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimConfig {
    pub batch_size: usize,
    pub n_negatives: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub loss: LossMode,
    /// Negatives are drawn proportional to `pop_count ^ neg_exponent`.
    pub neg_exponent: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        Self {
            batch_size: 512,
            n_negatives: 10,
            lr: 0.001,
            weight_decay: 0.0,
            loss: LossMode::Bpr,
            neg_exponent: 1.0,
        }
    }
}

impl OptimConfig {
    fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::config("batch_size must be >= 1"));
        }
        if self.n_negatives == 0 {
            return Err(Error::config("n_negatives must be >= 1"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return Err(Error::config("lr must be > 0 and weight_decay >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub optim: OptimConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            optim: OptimConfig::default(),
            max_epochs: 100,
            patience: 5,
            eval_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainEpoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_hit: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PretrainOutcome {
    /// Checkpoint with the best validation Hit.
    pub model: MfModel,
    /// Epoch-mean train loss of the best epoch.
    pub converged_loss: f64,
    pub best_epoch: usize,
    pub history: Vec<PretrainEpoch>,
}

fn steps_per_epoch(dataset: &InteractionDataset, batch_size: usize) -> usize {
    dataset.train.len().div_ceil(batch_size).max(1)
}

/// Mean accuracy loss of a freshly drawn batch; `scale * grad` goes to `grads`.
#[allow(clippy::too_many_arguments)]
fn objective_batch(
    table: &GroupWeightTable,
    dataset: &InteractionDataset,
    negatives: &NegativeSampler,
    optim: &OptimConfig,
    sampler_rng: &mut StreamRng,
    neg_rng: &mut StreamRng,
) -> Result<Batch> {
    let pairs = table.draw_batch(dataset, optim.batch_size, sampler_rng)?;
    Batch::with_negatives(pairs, dataset, negatives, optim.n_negatives, neg_rng)
}

fn active(weight: f64, grads: &mut Gradients) -> Option<&mut Gradients> {
    (weight != 0.0).then_some(grads)
}

fn ensure_finite(what: &str, value: f64) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss(format!("{what} = {value}")))
    }
}

/// Accuracy-only training with uniform sampling and early stopping on
/// validation Hit@k.
pub fn pretrain(
    model: &MfModel,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    cfg: &PretrainConfig,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    let mut model = model.clone();
    let table = init_weights(ObjectiveKind::Accuracy, dataset, catalog, &SamplerConfig::default())?;
    let negatives = NegativeSampler::new(&catalog.pop_count, cfg.optim.neg_exponent)?;
    let mut opt = OptimizerState::new(&model, cfg.optim.lr, cfg.optim.weight_decay);
    let mut grads = Gradients::zeros_like(&model);
    let mut sampler_rng = rng::stream(cfg.seed, STREAM_PRETRAIN_SAMPLER);
    let mut neg_rng = rng::stream(cfg.seed, STREAM_PRETRAIN_NEGATIVES);
    let spec = ObjectiveSpec {
        kind: ObjectiveKind::Accuracy,
        surrogate_mode: false,
    };

    let steps = steps_per_epoch(dataset, cfg.optim.batch_size);
    let mut history = Vec::new();
    let mut best: Option<(f64, usize, f64, MfModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let mut total = 0.0;
        for _ in 0..steps {
            let batch = objective_batch(&table, dataset, &negatives, &cfg.optim, &mut sampler_rng, &mut neg_rng)?;
            grads.clear();
            let loss = batch_objective_loss(spec, &batch, &model, cfg.optim.loss, Some(&mut grads), 1.0)?;
            ensure_finite("pretrain loss", loss)?;
            apply_gradients(&mut model, &mut opt, &grads)?;
            total += loss;
        }
        let train_loss = total / steps as f64;
        let valid_hit = evaluate(&model, dataset, catalog, Split::Valid, cfg.eval_k)?.hit;
        log::info!("pretrain epoch {epoch}: loss {train_loss:.4} valid hit@{} {valid_hit:.4}", cfg.eval_k);
        history.push(PretrainEpoch {
            epoch,
            train_loss,
            valid_hit,
        });
        if best.as_ref().is_none_or(|(h, ..)| valid_hit > *h) {
            best = Some((valid_hit, epoch, train_loss, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, converged_loss, model) = best.expect("max_epochs >= 1");
    Ok(PretrainOutcome {
        model,
        converged_loss,
        best_epoch,
        history,
    })
}

/// Preset accuracy loss for the controller.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TargetLoss {
    /// `scale` times the pretrain converged loss.
    Auto { scale: f64 },
    Fixed(f64),
}

impl TargetLoss {
    pub fn resolve(self, pretrain_loss: Option<f64>) -> Result<f64> {
        match self {
            TargetLoss::Fixed(v) => Ok(v),
            TargetLoss::Auto { scale } => pretrain_loss
                .map(|l| l * scale)
                .ok_or_else(|| Error::config("target loss `auto` needs the pretrain converged loss")),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CoordinatorMode {
    /// PI-controlled accuracy weight, data-sampled objectives.
    Pi,
    /// Fixed weights over `[accuracy, revenue, fairness, alignment]` applied
    /// to the surrogate losses of one uniform batch.
    Static { rho_full: [f64; 4] },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Active objectives; accuracy must be present.
    pub objectives: Vec<ObjectiveKind>,
    /// Preference over the non-accuracy objectives, in `objectives` order.
    pub preference: PreferenceVector,
    pub target_loss: TargetLoss,
    pub pi: PiConfig,
    pub mode: CoordinatorMode,
    pub sampler: SamplerConfig,
    pub optim: OptimConfig,
    pub max_epochs: usize,
    pub patience: usize,
    pub eval_k: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            objectives: vec![ObjectiveKind::Accuracy],
            preference: PreferenceVector {
                rho: vec![],
                lambda: 0.2,
            },
            target_loss: TargetLoss::Auto { scale: 1.0 },
            pi: PiConfig::default(),
            mode: CoordinatorMode::Pi,
            sampler: SamplerConfig::default(),
            optim: OptimConfig::default(),
            max_epochs: 30,
            patience: 5,
            eval_k: DEFAULT_K,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.optim.validate()?;
        self.pi.validate()?;
        self.preference.validate()?;
        if self.patience == 0 {
            return Err(Error::config("patience must be >= 1"));
        }
        if self.max_epochs == 0 {
            return Err(Error::config("max_epochs must be >= 1"));
        }
        let n_acc = self.objectives.iter().filter(|&&o| o == ObjectiveKind::Accuracy).count();
        if n_acc != 1 {
            return Err(Error::config("exactly one accuracy objective must be active"));
        }
        let mut seen = self.objectives.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.objectives.len() {
            return Err(Error::config("objectives must not repeat"));
        }
        if self.preference.rho.len() != self.objectives.len() - 1 {
            return Err(Error::config(format!(
                "{} preference weights for {} non-accuracy objectives",
                self.preference.rho.len(),
                self.objectives.len() - 1
            )));
        }
        if let CoordinatorMode::Static { rho_full } = &self.mode {
            if rho_full.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
                return Err(Error::config("static weights must be finite and >= 0"));
            }
        }
        Ok(())
    }

    /// Non-accuracy objectives paired with their preference weight.
    fn others(&self) -> Vec<(ObjectiveKind, f64)> {
        self.objectives
            .iter()
            .copied()
            .filter(|&o| o != ObjectiveKind::Accuracy)
            .zip(self.preference.rho.iter().copied())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_accuracy_loss: f64,
    pub mean_combined_loss: f64,
    pub objective_losses: BTreeMap<String, f64>,
    pub mean_alpha_acc: f64,
    pub weight_tables: Vec<WeightTableSnapshot>,
    pub valid_report: EvalReport,
    pub valid_imp: f64,
    pub valid_ok: bool,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub target_loss: f64,
    pub base_valid_report: Option<EvalReport>,
    pub epochs: Vec<EpochRecord>,
    /// Per-step accuracy loss, in step order.
    pub loss_trace: Vec<f64>,
    /// Per-step controller output (PI mode only).
    pub alpha_trace: Vec<PiStep>,
    pub best_epoch: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct ContinualOutcome {
    pub model: MfModel,
    pub history: TrainHistory,
}

/// Ranks epochs: valid epochs by Imp, invalid ones by Hit, valid first.
fn selection_key(report: &EvalReport, base: &EvalReport) -> (bool, f64) {
    if is_valid(report, base) {
        (true, imp_lenient(base, report))
    } else {
        (false, report.hit)
    }
}

fn key_better(a: (bool, f64), b: (bool, f64)) -> bool {
    (a.0 && !b.0) || (a.0 == b.0 && a.1 > b.1)
}

/// Mean validation accuracy loss per category, aligned with the fairness
/// table's groups. Categories without validation samples get 0.
fn category_validation_losses(
    model: &MfModel,
    valid: &Batch,
    catalog: &ItemCatalog,
    table: &GroupWeightTable,
    mode: LossMode,
) -> Vec<f64> {
    let mut sum = vec![0.0; catalog.n_categories()];
    let mut cnt = vec![0usize; catalog.n_categories()];
    for (i, p) in valid.pairs.iter().enumerate() {
        let l = crate::backbone::sample_loss_unchecked(
            model,
            p.user as usize,
            p.item as usize,
            valid.negatives_of(i),
            mode,
            None,
            1.0,
        );
        let c = catalog.category[p.item as usize] as usize;
        sum[c] += l;
        cnt[c] += 1;
    }
    table
        .groups
        .iter()
        .map(|g| {
            let c = g.id as usize;
            if cnt[c] > 0 {
                sum[c] / cnt[c] as f64
            } else {
                0.0
            }
        })
        .collect()
}

/// Multi-objective continual training starting from `model`.
///
/// `pretrain_loss` resolves an `auto` target loss.
pub fn continual_train(
    model: &MfModel,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    cfg: &TrainConfig,
    pretrain_loss: Option<f64>,
) -> Result<ContinualOutcome> {
    cfg.validate()?;
    let target = cfg.target_loss.resolve(pretrain_loss)?;
    let mut model = model.clone();
    let mut opt = OptimizerState::new(&model, cfg.optim.lr, cfg.optim.weight_decay);
    let mut grads = Gradients::zeros_like(&model);
    let negatives = NegativeSampler::new(&catalog.pop_count, cfg.optim.neg_exponent)?;
    let mut sampler_rng = rng::stream(cfg.seed, STREAM_SAMPLER);
    let mut neg_rng = rng::stream(cfg.seed, STREAM_NEGATIVES);

    let acc_table = init_weights(ObjectiveKind::Accuracy, dataset, catalog, &cfg.sampler)?;
    let others = match cfg.mode {
        CoordinatorMode::Pi => cfg.others(),
        CoordinatorMode::Static { .. } => Vec::new(),
    };
    let mut tables: Vec<(GroupWeightTable, f64)> = others
        .iter()
        .map(|&(kind, rho)| Ok((init_weights(kind, dataset, catalog, &cfg.sampler)?, rho)))
        .collect::<Result<_>>()?;
    let needs_valid_losses = tables.iter().any(|(t, _)| t.objective == ObjectiveKind::Fairness);
    let valid_batch = if needs_valid_losses {
        // uniform negatives: the group loss should track ranking against the
        // whole catalog, which is what Hit measures
        let uniform = NegativeSampler::new(&catalog.pop_count, 0.0)?;
        let mut r = rng::stream(cfg.seed, STREAM_VALID_NEGATIVES);
        Some(Batch::with_negatives(dataset.valid.clone(), dataset, &uniform, cfg.optim.n_negatives, &mut r)?)
    } else {
        None
    };

    let mut pi = PiController::new(&cfg.pi, target);
    let acc_spec = ObjectiveSpec {
        kind: ObjectiveKind::Accuracy,
        surrogate_mode: matches!(cfg.mode, CoordinatorMode::Static { .. }),
    };
    let base_valid = evaluate(&model, dataset, catalog, Split::Valid, cfg.eval_k)?;
    let mut history = TrainHistory {
        target_loss: target,
        base_valid_report: Some(base_valid.clone()),
        ..TrainHistory::default()
    };

    let steps = steps_per_epoch(dataset, cfg.optim.batch_size);
    let mut best: Option<((bool, f64), usize, MfModel)> = None;
    let mut since_best = 0;
    for epoch in 0..cfg.max_epochs {
        let mut acc_total = 0.0;
        let mut combined_total = 0.0;
        let mut alpha_total = 0.0;
        let mut obj_totals: BTreeMap<String, f64> = BTreeMap::new();

        for _ in 0..steps {
            let batch = objective_batch(&acc_table, dataset, &negatives, &cfg.optim, &mut sampler_rng, &mut neg_rng)?;
            grads.clear();
            let (acc_loss, alpha, combined) = match &cfg.mode {
                CoordinatorMode::Pi => {
                    let acc_loss = batch_objective_loss(acc_spec, &batch, &model, cfg.optim.loss, Some(&mut grads), 1.0)?;
                    ensure_finite("accuracy loss", acc_loss)?;
                    let step = pi.pi_alpha(acc_loss);
                    history.alpha_trace.push(step);
                    grads.scale(step.alpha_acc);
                    let mut losses = vec![acc_loss];
                    for (table, rho) in &tables {
                        let b = objective_batch(table, dataset, &negatives, &cfg.optim, &mut sampler_rng, &mut neg_rng)?;
                        let spec = ObjectiveSpec {
                            kind: table.objective,
                            surrogate_mode: false,
                        };
                        let w = cfg.preference.lambda * rho;
                        let g = if w != 0.0 { Some(&mut grads) } else { None };
                        let l = batch_objective_loss(spec, &b, &model, cfg.optim.loss, g, w)?;
                        *obj_totals.entry(table.objective.name().to_string()).or_default() += l;
                        losses.push(l);
                    }
                    let combined = synthesize_loss(step.alpha_acc, &cfg.preference, &losses)?;
                    (acc_loss, step.alpha_acc, combined)
                }
                CoordinatorMode::Static { rho_full } => {
                    let w = static_alpha(rho_full);
                    let acc_loss = batch_objective_loss(acc_spec, &batch, &model, cfg.optim.loss, active(w[0], &mut grads), w[0])?;
                    ensure_finite("accuracy loss", acc_loss)?;
                    let mut combined = w[0] * acc_loss;
                    if w[1] != 0.0 {
                        let l = revenue_surrogate_loss(&model, &batch, &catalog.price, cfg.optim.loss, Some(&mut grads), w[1])?;
                        *obj_totals.entry("revenue".into()).or_default() += l;
                        combined += w[1] * l;
                    }
                    if w[2] != 0.0 {
                        let l = pearson_fairness_loss(&model, &batch, &catalog.category, Some(&mut grads), w[2])?;
                        *obj_totals.entry("fairness".into()).or_default() += l;
                        combined += w[2] * l;
                    }
                    if w[3] != 0.0 {
                        let l = inverse_popularity_surrogate_loss(
                            &model,
                            &batch,
                            &catalog.pop_count,
                            cfg.optim.loss,
                            Some(&mut grads),
                            w[3],
                        )?;
                        *obj_totals.entry("alignment".into()).or_default() += l;
                        combined += w[3] * l;
                    }
                    (acc_loss, w[0], combined)
                }
            };
            ensure_finite("combined loss", combined)?;
            apply_gradients(&mut model, &mut opt, &grads)?;
            history.loss_trace.push(acc_loss);
            acc_total += acc_loss;
            combined_total += combined;
            alpha_total += alpha;
        }

        // middle level: validation feedback into the adaptive tables
        for (table, _) in tables.iter_mut() {
            match table.objective {
                ObjectiveKind::Fairness => {
                    let vb = valid_batch.as_ref().expect("built when fairness is active");
                    let losses = category_validation_losses(&model, vb, catalog, table, cfg.optim.loss);
                    log::debug!("epoch {epoch}: per-category validation loss {losses:?}");
                    table.update_fairness_weights(&losses)?;
                }
                ObjectiveKind::Alignment => {
                    let exposure = exposure_distribution(&model, dataset, catalog, cfg.eval_k)?;
                    table.update_alignment_weights(&exposure)?;
                }
                ObjectiveKind::Accuracy | ObjectiveKind::Revenue => {}
            }
        }

        let valid_report = evaluate(&model, dataset, catalog, Split::Valid, cfg.eval_k)?;
        let key = selection_key(&valid_report, &base_valid);
        let n = steps as f64;
        obj_totals.values_mut().for_each(|v| *v /= n);
        log::info!(
            "epoch {epoch}: acc loss {:.4} (target {target:.4}) alpha {:.4} valid hit {:.4} imp {:.2}",
            acc_total / n,
            alpha_total / n,
            valid_report.hit,
            imp_lenient(&base_valid, &valid_report)
        );
        history.epochs.push(EpochRecord {
            epoch,
            mean_accuracy_loss: acc_total / n,
            mean_combined_loss: combined_total / n,
            objective_losses: obj_totals,
            mean_alpha_acc: alpha_total / n,
            weight_tables: tables.iter().map(|(t, _)| t.snapshot()).collect(),
            valid_imp: imp_lenient(&base_valid, &valid_report),
            valid_ok: key.0,
            valid_report,
        });

        if best.as_ref().is_none_or(|(k, ..)| key_better(key, *k)) {
            best = Some((key, epoch, model.clone()));
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= cfg.patience {
                break;
            }
        }
    }
    let (_, best_epoch, model) = best.expect("max_epochs >= 1");
    history.best_epoch = Some(best_epoch);
    Ok(ContinualOutcome { model, history })
}
