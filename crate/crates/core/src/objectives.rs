//! The four foundation objectives and the differentiable surrogates used by
//! the static-scalarization baseline.
//!
//! In the data-centric mode every objective is trained with the same
//! accuracy loss; what distinguishes objectives is the distribution the
//! batch was drawn from (see [`crate::sampler`]). The surrogates instead
//! re-weight or regularize one uniform batch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{sample_loss_unchecked, Gradients, LossMode, MfModel, NegativeSampler};
use crate::dataset::InteractionDataset;
use crate::{Error, Interaction, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ObjectiveKind {
    Accuracy,
    Revenue,
    Fairness,
    Alignment,
}

impl ObjectiveKind {
    pub const ALL: [ObjectiveKind; 4] = [Self::Accuracy, Self::Revenue, Self::Fairness, Self::Alignment];

    pub fn name(self) -> &'static str {
        match self {
            Self::Accuracy => "accuracy",
            Self::Revenue => "revenue",
            Self::Fairness => "fairness",
            Self::Alignment => "alignment",
        }
    }
}

impl std::str::FromStr for ObjectiveKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::config(format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub kind: ObjectiveKind,
    /// Static-baseline mode: evaluate the surrogate loss on a uniform batch.
    pub surrogate_mode: bool,
}

/// Positives plus `n_negatives` sampled negatives per positive.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Batch {
    pub pairs: Vec<Interaction>,
    pub negatives: Vec<u32>,
    pub n_negatives: usize,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn negatives_of(&self, i: usize) -> &[u32] {
        &self.negatives[i * self.n_negatives..(i + 1) * self.n_negatives]
    }

    /// Attaches negatives to `pairs`, excluding each user's train history and
    /// the positive itself.
    pub fn with_negatives<R: Rng>(
        pairs: Vec<Interaction>,
        dataset: &InteractionDataset,
        sampler: &NegativeSampler,
        n_negatives: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let mut negatives = Vec::with_capacity(pairs.len() * n_negatives);
        let mut exclude = Vec::new();
        let mut buf = Vec::with_capacity(n_negatives);
        for p in &pairs {
            exclude.clear();
            exclude.extend_from_slice(dataset.history(p.user));
            exclude.push(p.item);
            sampler.sample_into(n_negatives, &exclude, rng, &mut buf)?;
            negatives.extend_from_slice(&buf);
        }
        Ok(Self {
            pairs,
            negatives,
            n_negatives,
        })
    }

    fn check(&self, model: &MfModel) -> Result<()> {
        if self.pairs.is_empty() {
            return Err(Error::Empty("batch"));
        }
        if self.n_negatives == 0 || self.negatives.len() != self.pairs.len() * self.n_negatives {
            return Err(Error::Shape("batch needs n_negatives >= 1 per positive".into()));
        }
        for (i, p) in self.pairs.iter().enumerate() {
            if p.user as usize >= model.n_users || p.item as usize >= model.n_items {
                return Err(Error::IndexOutOfRange {
                    what: "batch pair",
                    index: i,
                    len: self.pairs.len(),
                });
            }
            if self.negatives_of(i).iter().any(|&n| n == p.item || n as usize >= model.n_items) {
                return Err(Error::config(format!("invalid negative for batch pair {i}")));
            }
        }
        Ok(())
    }
}

/// Mean accuracy loss of a batch. The objective identity lives in the batch's
/// sampling distribution, so every kind uses the same function.
pub fn batch_objective_loss(
    _spec: ObjectiveSpec,
    batch: &Batch,
    model: &MfModel,
    mode: LossMode,
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    let w = vec![1.0; batch.len()];
    weighted_batch_loss(model, batch, &w, mode, grads, scale)
}

/// `sum_i w_i * l_i / sum_i w_i` over the batch, with gradients.
pub fn weighted_batch_loss(
    model: &MfModel,
    batch: &Batch,
    weights: &[f64],
    mode: LossMode,
    mut grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    batch.check(model)?;
    if weights.len() != batch.len() {
        return Err(Error::Shape("one weight per batch sample required".into()));
    }
    let total: f64 = weights.iter().sum();
    if total.is_nan() || total <= 0.0 || weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
        return Err(Error::config("sample weights must be >= 0 with a positive sum"));
    }
    let mut loss = 0.0;
    for (i, (p, &w)) in batch.pairs.iter().zip(weights).enumerate() {
        let c = w / total;
        if c == 0.0 {
            continue;
        }
        let l = sample_loss_unchecked(
            model,
            p.user as usize,
            p.item as usize,
            batch.negatives_of(i),
            mode,
            grads.as_deref_mut(),
            scale * c,
        );
        loss += c * l;
    }
    Ok(loss)
}

/// Plain weighted mean of precomputed per-sample losses.
pub fn weighted_mean(losses: &[f64], weights: &[f64]) -> f64 {
    let total: f64 = weights.iter().sum();
    losses.iter().zip(weights).map(|(l, w)| l * w).sum::<f64>() / total
}

/// Price-weighted mean loss, normalized by the total price in the batch.
pub fn revenue_surrogate_loss(
    model: &MfModel,
    batch: &Batch,
    prices: &[f64],
    mode: LossMode,
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    let w: Vec<f64> = batch.pairs.iter().map(|p| prices[p.item as usize]).collect();
    if w.iter().all(|&x| x == 0.0) {
        return Err(Error::config("all batch prices are zero"));
    }
    weighted_batch_loss(model, batch, &w, mode, grads, scale)
}

/// Mean loss weighted by inverse train popularity of the positive item.
pub fn inverse_popularity_surrogate_loss(
    model: &MfModel,
    batch: &Batch,
    pop_counts: &[u64],
    mode: LossMode,
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    let mut w = Vec::with_capacity(batch.len());
    for p in &batch.pairs {
        let c = pop_counts[p.item as usize];
        if c == 0 {
            return Err(Error::config(format!("item {} has zero popularity", p.item)));
        }
        w.push(1.0 / c as f64);
    }
    weighted_batch_loss(model, batch, &w, mode, grads, scale)
}

/// `|pearson(predictions, group_attr)|` and its gradient in `predictions`.
/// Zero when either side has no variance.
pub fn pearson_fairness_regularizer(predictions: &[f64], group_attr: &[f64]) -> Result<(f64, Vec<f64>)> {
    let n = predictions.len();
    if n < 2 || group_attr.len() != n {
        return Err(Error::Shape(format!(
            "pearson needs >= 2 paired samples, got {n} and {}",
            group_attr.len()
        )));
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / n as f64;
    let (mx, mg) = (mean(predictions), mean(group_attr));
    let dx: Vec<f64> = predictions.iter().map(|x| x - mx).collect();
    let dg: Vec<f64> = group_attr.iter().map(|g| g - mg).collect();
    let sxx: f64 = dx.iter().map(|x| x * x).sum();
    let sgg: f64 = dg.iter().map(|g| g * g).sum();
    if sxx == 0.0 || sgg == 0.0 {
        return Ok((0.0, vec![0.0; n]));
    }
    let sxg: f64 = dx.iter().zip(&dg).map(|(x, g)| x * g).sum();
    let denom = (sxx * sgg).sqrt();
    let r = sxg / denom;
    // d r / d x_i = dg_i / denom - r * dx_i / sxx  (the mean terms cancel)
    let sign = if r >= 0.0 { 1.0 } else { -1.0 };
    let grad = dx.iter().zip(&dg).map(|(x, g)| sign * (g / denom - r * x / sxx)).collect();
    Ok((r.abs(), grad))
}

/// Pearson regularizer between positive-pair scores and the positive item's
/// category index.
pub fn pearson_fairness_loss(
    model: &MfModel,
    batch: &Batch,
    category: &[u32],
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    let mut preds = Vec::with_capacity(batch.len());
    for p in &batch.pairs {
        preds.push(model.score(p.user as usize, p.item as usize)?);
    }
    let attrs: Vec<f64> = batch.pairs.iter().map(|p| category[p.item as usize] as f64).collect();
    let (value, d) = pearson_fairness_regularizer(&preds, &attrs)?;
    if let Some(g) = grads {
        for (p, di) in batch.pairs.iter().zip(d) {
            model.accumulate_score_grad(p.user as usize, p.item as usize, scale * di, g);
        }
    }
    Ok(value)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn model_and_batch() -> (MfModel, Batch) {
        let mut r = rng::stream(1, "obj");
        let m = MfModel::random(4, 6, 3, true, 0.5, &mut r);
        let batch = Batch {
            pairs: vec![
                Interaction::new(0, 0, 0),
                Interaction::new(1, 1, 0),
                Interaction::new(2, 2, 0),
                Interaction::new(3, 3, 0),
            ],
            negatives: vec![4, 5, 5, 4, 0, 1, 1, 2],
            n_negatives: 2,
        };
        (m, batch)
    }

    const ACC: ObjectiveSpec = ObjectiveSpec {
        kind: ObjectiveKind::Accuracy,
        surrogate_mode: false,
    };

    #[test]
    fn objective_kind_does_not_change_the_loss() {
        let (m, b) = model_and_batch();
        let rev = ObjectiveSpec {
            kind: ObjectiveKind::Revenue,
            ..ACC
        };
        let a = batch_objective_loss(ACC, &b, &m, LossMode::Bpr, None, 1.0).unwrap();
        let r = batch_objective_loss(rev, &b, &m, LossMode::Bpr, None, 1.0).unwrap();
        assert_eq!(a, r);
        assert!(a.is_finite() && a >= 0.0);
        assert!(batch_objective_loss(ACC, &Batch::default(), &m, LossMode::Bpr, None, 1.0).is_err());
    }

    #[test]
    fn surrogate_reductions() {
        let (m, b) = model_and_batch();
        let plain = batch_objective_loss(ACC, &b, &m, LossMode::Bce, None, 1.0).unwrap();
        let rev = revenue_surrogate_loss(&m, &b, &[7.0; 6], LossMode::Bce, None, 1.0).unwrap();
        let pop = inverse_popularity_surrogate_loss(&m, &b, &[3; 6], LossMode::Bce, None, 1.0).unwrap();
        assert!((plain - rev).abs() < 1e-12);
        assert!((plain - pop).abs() < 1e-12);
        assert!(revenue_surrogate_loss(&m, &b, &[0.0; 6], LossMode::Bce, None, 1.0).is_err());
    }

    #[test]
    fn zero_price_sample_contributes_nothing() {
        let (m, b) = model_and_batch();
        let mut prices = [2.0; 6];
        prices[0] = 0.0;
        let with = revenue_surrogate_loss(&m, &b, &prices, LossMode::Bpr, None, 1.0).unwrap();
        let rest = Batch {
            pairs: b.pairs[1..].to_vec(),
            negatives: b.negatives[2..].to_vec(),
            n_negatives: 2,
        };
        let without = batch_objective_loss(ACC, &rest, &m, LossMode::Bpr, None, 1.0).unwrap();
        assert!((with - without).abs() < 1e-12);
    }

    #[test]
    fn weighted_mean_examples() {
        assert!((weighted_mean(&[0.4, 0.8], &[1.0, 3.0]) - 0.7).abs() < 1e-12);
        assert!((weighted_mean(&[0.8, 0.4], &[1.0, 0.25]) - 0.72).abs() < 1e-12);
    }

    #[test]
    fn pearson_examples() {
        let (v, _) = pearson_fairness_regularizer(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let (v, _) = pearson_fairness_regularizer(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]).unwrap();
        assert!((v - 1.0).abs() < 1e-12);
        let (v, _) = pearson_fairness_regularizer(&[1.0, 2.0, 3.0, 4.0], &[0.0, 1.0, 0.0, 1.0]).unwrap();
        assert!((v - 0.4472).abs() < 1e-4);
        let (v, g) = pearson_fairness_regularizer(&[2.0; 3], &[0.0, 1.0, 2.0]).unwrap();
        assert_eq!(v, 0.0);
        assert!(g.iter().all(|&x| x == 0.0));
        assert!(pearson_fairness_regularizer(&[1.0], &[1.0]).is_err());
    }
}
