//! Group-weighted mini-batch sampling and the signed weight updates that
//! steer it.
//!
//! Every objective owns a [`GroupWeightTable`]: a partition of the train split
//! into groups plus a probability vector over those groups. A batch sample is
//! drawn by picking a group according to the weights and then a member of
//! that group uniformly. Accuracy and revenue tables are fixed; fairness and
//! alignment tables move by `step_size` after each epoch based on validation
//! feedback and are then projected back onto the floored simplex.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::MfModel;
use crate::dataset::{InteractionDataset, ItemCatalog, Split};
use crate::metrics::{recommendation_bucket_counts, smoothed_distribution, KL_SMOOTHING};
use crate::objectives::ObjectiveKind;
use crate::{Error, Interaction, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub step_size: f64,
    pub floor: f64,
    pub n_price_bins: usize,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            step_size: 0.1,
            floor: 1e-4,
            n_price_bins: 10,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Group {
    pub id: u32,
    pub label: String,
    /// Indices into the train split.
    pub members: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupWeightTable {
    pub objective: ObjectiveKind,
    pub groups: Vec<Group>,
    pub weights: Vec<f64>,
    pub step_size: f64,
    pub floor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupSnapshot {
    pub id: u32,
    pub label: String,
    pub weight: f64,
    pub size: usize,
}

/// Serialized form of a weight table (no member lists).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WeightTableSnapshot {
    pub objective: ObjectiveKind,
    pub groups: Vec<GroupSnapshot>,
    pub step_size: f64,
}

impl GroupWeightTable {
    /// Drops empty groups, then normalizes `raw` onto the floored simplex.
    pub fn from_groups(objective: ObjectiveKind, groups: Vec<Group>, raw: Vec<f64>, cfg: &SamplerConfig) -> Result<Self> {
        debug_assert_eq!(groups.len(), raw.len());
        let (groups, weights): (Vec<Group>, Vec<f64>) = groups
            .into_iter()
            .zip(raw)
            .filter(|(g, _)| {
                if g.members.is_empty() {
                    log::warn!("{objective:?} group `{}` has no train interactions; dropped", g.label);
                    false
                } else {
                    true
                }
            })
            .unzip();
        if groups.is_empty() {
            return Err(Error::Empty("train split"));
        }
        let mut table = Self {
            objective,
            groups,
            weights,
            step_size: cfg.step_size,
            floor: cfg.floor,
        };
        table.renormalize();
        Ok(table)
    }

    /// Clamps each weight to at least `floor`, then rescales to sum 1.
    pub fn renormalize(&mut self) {
        let floor = self.floor;
        self.weights.iter_mut().for_each(|w| *w = w.max(floor));
        let sum: f64 = self.weights.iter().sum();
        self.weights.iter_mut().for_each(|w| *w /= sum);
    }

    pub fn len(&self) -> usize {
        self.groups.len()
    }

    pub fn is_empty(&self) -> bool {
        self.groups.is_empty()
    }

    pub fn snapshot(&self) -> WeightTableSnapshot {
        WeightTableSnapshot {
            objective: self.objective,
            groups: self
                .groups
                .iter()
                .zip(&self.weights)
                .map(|(g, &w)| GroupSnapshot {
                    id: g.id,
                    label: g.label.clone(),
                    weight: w,
                    size: g.members.len(),
                })
                .collect(),
            step_size: self.step_size,
        }
    }

    /// Draws `batch_size` train interactions with replacement: a group by
    /// weight, then a member uniformly.
    pub fn draw_batch<R: Rng>(&self, dataset: &InteractionDataset, batch_size: usize, rng: &mut R) -> Result<Vec<Interaction>> {
        let mut out = Vec::with_capacity(batch_size);
        self.draw_batch_into(dataset, batch_size, rng, &mut out)?;
        Ok(out)
    }

    pub fn draw_batch_into<R: Rng>(
        &self,
        dataset: &InteractionDataset,
        batch_size: usize,
        rng: &mut R,
        out: &mut Vec<Interaction>,
    ) -> Result<()> {
        if dataset.train.is_empty() {
            return Err(Error::Empty("train split"));
        }
        out.clear();
        if self.groups.len() == 1 {
            let members = &self.groups[0].members;
            for _ in 0..batch_size {
                out.push(dataset.train[members[rng.random_range(0..members.len())] as usize]);
            }
            return Ok(());
        }
        let dist = WeightedIndex::new(&self.weights).map_err(|_| Error::NoSamplingMass)?;
        for _ in 0..batch_size {
            let members = &self.groups[dist.sample(rng)].members;
            out.push(dataset.train[members[rng.random_range(0..members.len())] as usize]);
        }
        Ok(())
    }

    /// Signed step towards the group with the largest validation loss:
    /// `w[i*] += step_size`, ties to the lowest group, then renormalize.
    pub fn update_fairness_weights(&mut self, group_losses: &[f64]) -> Result<()> {
        if self.objective != ObjectiveKind::Fairness {
            return Err(Error::config(format!("fairness update on a {:?} table", self.objective)));
        }
        if group_losses.len() != self.groups.len() {
            return Err(Error::Shape(format!(
                "{} group losses for {} groups",
                group_losses.len(),
                self.groups.len()
            )));
        }
        if group_losses.iter().any(|l| !l.is_finite()) {
            return Err(Error::NonFiniteLoss("fairness group loss".into()));
        }
        let mut worst = 0;
        for (i, &l) in group_losses.iter().enumerate() {
            if l > group_losses[worst] {
                worst = i;
            }
        }
        self.weights[worst] += self.step_size;
        self.renormalize();
        Ok(())
    }

    /// `w[b] -= step_size * sign(P[b] - Q[b])` for every bucket group, then
    /// renormalize. `sign(0) = 0`.
    pub fn update_alignment_weights(&mut self, exposure: &ExposureDistribution) -> Result<()> {
        if self.objective != ObjectiveKind::Alignment {
            return Err(Error::config(format!("alignment update on a {:?} table", self.objective)));
        }
        for (g, w) in self.groups.iter().zip(self.weights.iter_mut()) {
            let b = g.id as usize;
            let (p, q) = match (exposure.p.get(b), exposure.q.get(b)) {
                (Some(&p), Some(&q)) => (p, q),
                _ => return Err(Error::Shape(format!("no exposure entry for bucket {b}"))),
            };
            let diff = p - q;
            let sign = if diff > 0.0 {
                1.0
            } else if diff < 0.0 {
                -1.0
            } else {
                0.0
            };
            *w -= self.step_size * sign;
        }
        self.renormalize();
        Ok(())
    }
}

/// Builds the initial table for `objective`:
///
/// * accuracy: one group holding all of train;
/// * revenue: equal-count price bins over train interactions, weight
///   proportional to the bin's mean price;
/// * fairness: one group per item category, weight proportional to size;
/// * alignment: one group per popularity bucket, uniform weights.
pub fn init_weights(
    objective: ObjectiveKind,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    cfg: &SamplerConfig,
) -> Result<GroupWeightTable> {
    if catalog.n_items() != dataset.n_items() {
        return Err(Error::config(format!(
            "catalog covers {} items, dataset has {}",
            catalog.n_items(),
            dataset.n_items()
        )));
    }
    let train = &dataset.train;
    let n = train.len() as u32;
    match objective {
        ObjectiveKind::Accuracy => GroupWeightTable::from_groups(
            objective,
            vec![Group {
                id: 0,
                label: "all".into(),
                members: (0..n).collect(),
            }],
            vec![1.0],
            cfg,
        ),
        ObjectiveKind::Revenue => {
            let price = |idx: u32| catalog.price[train[idx as usize].item as usize];
            let mut order: Vec<u32> = (0..n).collect();
            order.sort_by(|&a, &b| price(a).total_cmp(&price(b)).then(a.cmp(&b)));
            let n_bins = cfg.n_price_bins.clamp(1, order.len().max(1));
            let base = order.len() / n_bins;
            let rem = order.len() % n_bins;
            let mut groups = Vec::with_capacity(n_bins);
            let mut raw = Vec::with_capacity(n_bins);
            let mut pos = 0;
            for b in 0..n_bins {
                let size = base + usize::from(b < rem);
                let members: Vec<u32> = order[pos..pos + size].to_vec();
                pos += size;
                let mean = if members.is_empty() {
                    0.0
                } else {
                    members.iter().map(|&m| price(m)).sum::<f64>() / members.len() as f64
                };
                let label = match (members.first(), members.last()) {
                    (Some(&lo), Some(&hi)) => format!("price {:.2}-{:.2}", price(lo), price(hi)),
                    _ => format!("price bin {b}"),
                };
                groups.push(Group { id: b as u32, label, members });
                raw.push(mean);
            }
            if raw.iter().sum::<f64>() <= 0.0 {
                return Err(Error::config("revenue objective needs items with positive prices"));
            }
            let total: f64 = raw.iter().sum();
            raw.iter_mut().for_each(|w| *w /= total);
            GroupWeightTable::from_groups(objective, groups, raw, cfg)
        }
        ObjectiveKind::Fairness => {
            let k = catalog.n_categories();
            let mut members = vec![Vec::new(); k];
            for (idx, it) in train.iter().enumerate() {
                members[catalog.category[it.item as usize] as usize].push(idx as u32);
            }
            let raw: Vec<f64> = members.iter().map(|m| m.len() as f64 / n.max(1) as f64).collect();
            let groups = members
                .into_iter()
                .enumerate()
                .map(|(c, members)| Group {
                    id: c as u32,
                    label: catalog.category_names[c].clone(),
                    members,
                })
                .collect();
            GroupWeightTable::from_groups(objective, groups, raw, cfg)
        }
        ObjectiveKind::Alignment => {
            let k = catalog.n_buckets;
            let mut members = vec![Vec::new(); k];
            for (idx, it) in train.iter().enumerate() {
                members[catalog.pop_bucket[it.item as usize] as usize].push(idx as u32);
            }
            let groups = members
                .into_iter()
                .enumerate()
                .map(|(b, members)| Group {
                    id: b as u32,
                    label: format!("popularity bucket {b}"),
                    members,
                })
                .collect();
            GroupWeightTable::from_groups(objective, groups, vec![1.0 / k as f64; k], cfg)
        }
    }
}

/// Per-popularity-bucket exposure of the model's recommendations (`p`) and
/// frequency in the train data (`q`), both smoothed and normalized.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExposureDistribution {
    pub p: Vec<f64>,
    pub q: Vec<f64>,
}

/// Exposure over the top-`k` lists of all validation users (train items
/// excluded) against the train-interaction bucket histogram.
pub fn exposure_distribution(
    model: &MfModel,
    dataset: &InteractionDataset,
    catalog: &ItemCatalog,
    k: usize,
) -> Result<ExposureDistribution> {
    let p_counts = recommendation_bucket_counts(model, dataset, catalog, Split::Valid, k)?;
    Ok(ExposureDistribution {
        p: smoothed_distribution(&p_counts, KL_SMOOTHING),
        q: smoothed_distribution(&train_bucket_counts(dataset, catalog), KL_SMOOTHING),
    })
}

pub fn train_bucket_counts(dataset: &InteractionDataset, catalog: &ItemCatalog) -> Vec<f64> {
    let mut q = vec![0.0; catalog.n_buckets];
    for it in &dataset.train {
        q[catalog.pop_bucket[it.item as usize] as usize] += 1.0;
    }
    q
}
