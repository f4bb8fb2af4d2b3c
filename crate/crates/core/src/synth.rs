//! Desk-scale synthetic interaction data with latent structure, a Zipf
//! popularity profile, prices and categories.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::dataset::{ItemMetadata, RawInteractions, RawRecord};
use crate::rng;
use crate::{Error, Result};

/// Scales the sampling mass of every item in one category by `factor`. The
/// category becomes rare in the data and the model serves it worse.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Underserved {
    pub category: usize,
    pub factor: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_interactions: usize,
    pub n_categories: usize,
    pub zipf_exponent: f64,
    pub price_range: (f64, f64),
    pub latent_dim: usize,
    /// Multiplier on the user/item cosine affinity before the softmax.
    pub affinity_scale: f64,
    pub underserved: Option<Underserved>,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_users: 1000,
            n_items: 300,
            n_interactions: 20_000,
            n_categories: 5,
            zipf_exponent: 0.8,
            price_range: (1.0, 100.0),
            latent_dim: 8,
            affinity_scale: 4.0,
            underserved: None,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_users == 0 || self.n_items == 0 {
            return Err(Error::config("synthetic data needs at least one user and one item"));
        }
        if self.n_interactions < 3 * self.n_users {
            return Err(Error::config(format!(
                "n_interactions ({}) must be at least 3 * n_users ({})",
                self.n_interactions,
                3 * self.n_users
            )));
        }
        if self.n_interactions.div_ceil(self.n_users) > self.n_items {
            return Err(Error::config("more interactions per user than items"));
        }
        if self.n_categories == 0 || self.n_categories > self.n_items {
            return Err(Error::config("n_categories must be in 1..=n_items"));
        }
        let (lo, hi) = self.price_range;
        if !(lo.is_finite() && hi.is_finite() && 0.0 <= lo && lo <= hi) {
            return Err(Error::config("price_range must satisfy 0 <= lo <= hi"));
        }
        if self.latent_dim == 0 {
            return Err(Error::config("latent_dim must be >= 1"));
        }
        if !(self.zipf_exponent >= 0.0 && self.zipf_exponent.is_finite()) {
            return Err(Error::config("zipf_exponent must be finite and >= 0"));
        }
        if let Some(u) = &self.underserved {
            if u.category >= self.n_categories || !(u.factor > 0.0 && u.factor.is_finite()) {
                return Err(Error::config("underserved category out of range or factor <= 0"));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthData {
    pub interactions: RawInteractions,
    pub metadata: ItemMetadata,
}

fn unit_vector<R: Rng>(dim: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm > 1e-12 {
            return v.into_iter().map(|x| x / norm).collect();
        }
    }
}

/// Generates a dataset that is a pure function of `(cfg, seed)`.
///
/// Item `i` has popularity rank `i` and category `i mod n_categories`. Each
/// user draws their items without replacement from
/// `softmax(affinity_scale * cos(user, item) + ln zipf(rank))` using the
/// Gumbel top-k trick; the chosen items are then put in random time order so
/// that held-out items are not biased towards the user's weakest preferences.
pub fn synth_generate(cfg: &SynthConfig, seed: u64) -> Result<SynthData> {
    cfg.validate()?;
    let mut rng = rng::stream(seed, "synth");
    let d = cfg.latent_dim;

    let items: Vec<Vec<f64>> = (0..cfg.n_items).map(|_| unit_vector(d, &mut rng)).collect();
    let prior: Vec<f64> = (0..cfg.n_items)
        .map(|rank| {
            let mut logit = -cfg.zipf_exponent * ((rank + 1) as f64).ln();
            if let Some(u) = &cfg.underserved {
                if rank % cfg.n_categories == u.category {
                    logit += u.factor.ln();
                }
            }
            logit
        })
        .collect();

    let (lo, hi) = cfg.price_range;
    let mut metadata = ItemMetadata::default();
    for rank in 0..cfg.n_items {
        let raw: f64 = if hi > lo { rng.random_range(lo..=hi) } else { lo };
        let price = (raw * 100.0).round() / 100.0;
        metadata
            .rows
            .push((format!("i{rank}"), format!("c{}", rank % cfg.n_categories), price));
    }

    let base = cfg.n_interactions / cfg.n_users;
    let rem = cfg.n_interactions % cfg.n_users;
    let mut records = Vec::with_capacity(cfg.n_interactions);
    let mut keys: Vec<(f64, usize)> = Vec::with_capacity(cfg.n_items);
    for u in 0..cfg.n_users {
        let user = unit_vector(d, &mut rng);
        let count = base + usize::from(u < rem);
        keys.clear();
        for (i, item) in items.iter().enumerate() {
            let cos: f64 = user.iter().zip(item).map(|(a, b)| a * b).sum();
            let uniform: f64 = rng.random_range(f64::MIN_POSITIVE..1.0);
            let gumbel = -(-uniform.ln()).ln();
            keys.push((cfg.affinity_scale * cos + prior[i] + gumbel, i));
        }
        keys.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut chosen: Vec<usize> = keys[..count].iter().map(|&(_, i)| i).collect();
        // Fisher-Yates for the time order
        for j in (1..chosen.len()).rev() {
            let k = rng.random_range(0..=j);
            chosen.swap(j, k);
        }
        let start = 1_600_000_000u64 + u as u64 * 7;
        for (j, item) in chosen.into_iter().enumerate() {
            records.push(RawRecord {
                user: format!("u{u}"),
                item: format!("i{item}"),
                timestamp: start + 3600 * j as u64,
                rating: None,
            });
        }
    }

    Ok(SynthData {
        interactions: RawInteractions { records },
        metadata,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::HashMap;

    fn small() -> SynthConfig {
        SynthConfig {
            n_users: 50,
            n_items: 40,
            n_interactions: 500,
            ..SynthConfig::default()
        }
    }

    #[test]
    fn deterministic_bytes() {
        let dir = tempfile::tempdir().unwrap();
        let mut files = Vec::new();
        for run in 0..2 {
            let data = synth_generate(&small(), 11).unwrap();
            let ip = dir.path().join(format!("i{run}.tsv"));
            let mp = dir.path().join(format!("m{run}.tsv"));
            data.interactions.write_tsv(&ip).unwrap();
            data.metadata.write_tsv(&mp).unwrap();
            files.push((std::fs::read(ip).unwrap(), std::fs::read(mp).unwrap()));
        }
        assert_eq!(files[0], files[1]);
        let other = synth_generate(&small(), 12).unwrap();
        assert_ne!(other.interactions, synth_generate(&small(), 11).unwrap().interactions);
    }

    #[test]
    fn zero_zipf_is_roughly_uniform() {
        let cfg = SynthConfig {
            n_users: 2000,
            n_items: 100,
            n_interactions: 100_000,
            zipf_exponent: 0.0,
            ..SynthConfig::default()
        };
        let data = synth_generate(&cfg, 3).unwrap();
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for r in &data.interactions.records {
            *counts.entry(r.item.as_str()).or_default() += 1;
        }
        assert_eq!(counts.len(), 100);
        let max = *counts.values().max().unwrap() as f64;
        let min = *counts.values().min().unwrap() as f64;
        assert!(max / min < 3.0, "max/min = {}", max / min);
    }

    #[test]
    fn single_category() {
        let cfg = SynthConfig {
            n_categories: 1,
            ..small()
        };
        let data = synth_generate(&cfg, 1).unwrap();
        assert!(data.metadata.rows.iter().all(|(_, c, _)| c == "c0"));
    }

    #[test]
    fn rejects_infeasible_sizes() {
        let cfg = SynthConfig {
            n_interactions: 100,
            ..small()
        };
        assert!(synth_generate(&cfg, 0).is_err());
        let cfg = SynthConfig {
            n_items: 5,
            n_categories: 2,
            ..small()
        };
        assert!(synth_generate(&cfg, 0).is_err());
    }

    #[test]
    fn prices_in_range_and_no_duplicate_pairs() {
        let data = synth_generate(&small(), 5).unwrap();
        assert!(data.metadata.rows.iter().all(|(_, _, p)| (1.0..=100.0).contains(p)));
        let mut pairs: Vec<_> = data.interactions.records.iter().map(|r| (&r.user, &r.item)).collect();
        let n = pairs.len();
        pairs.sort();
        pairs.dedup();
        assert_eq!(pairs.len(), n);
    }
}
