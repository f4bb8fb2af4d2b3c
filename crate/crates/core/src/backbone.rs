//! Matrix-factorization scoring model, BPR/BCE sample losses with analytic
//! gradients, popularity-proportional negative sampling, an Adam optimizer
//! and top-K retrieval.

use std::fs;
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Sigmoid outputs are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]` before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossMode {
    #[default]
    Bpr,
    Bce,
}

/// Dot-product model `<user_emb[u], item_emb[e]> + item_bias[e]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MfModel {
    pub n_users: usize,
    pub n_items: usize,
    pub dim: usize,
    pub use_bias: bool,
    /// Row-major `n_users x dim`.
    pub user_emb: Vec<f64>,
    /// Row-major `n_items x dim`.
    pub item_emb: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl MfModel {
    pub fn zeros(n_users: usize, n_items: usize, dim: usize, use_bias: bool) -> Self {
        assert!(dim >= 1, "embedding dimension must be >= 1");
        Self {
            n_users,
            n_items,
            dim,
            use_bias,
            user_emb: vec![0.0; n_users * dim],
            item_emb: vec![0.0; n_items * dim],
            item_bias: vec![0.0; n_items],
        }
    }

    /// Embeddings drawn from `N(0, init_std^2)`, biases zero.
    pub fn random<R: Rng>(n_users: usize, n_items: usize, dim: usize, use_bias: bool, init_std: f64, rng: &mut R) -> Self {
        let mut m = Self::zeros(n_users, n_items, dim, use_bias);
        let normal = Normal::new(0.0, init_std).expect("init_std must be finite and >= 0");
        m.user_emb.iter_mut().for_each(|x| *x = normal.sample(rng));
        m.item_emb.iter_mut().for_each(|x| *x = normal.sample(rng));
        m
    }

    #[inline]
    pub fn user_row(&self, u: usize) -> &[f64] {
        &self.user_emb[u * self.dim..(u + 1) * self.dim]
    }

    #[inline]
    pub fn item_row(&self, e: usize) -> &[f64] {
        &self.item_emb[e * self.dim..(e + 1) * self.dim]
    }

    fn check_user(&self, u: usize) -> Result<()> {
        if u >= self.n_users {
            return Err(Error::IndexOutOfRange {
                what: "user",
                index: u,
                len: self.n_users,
            });
        }
        Ok(())
    }

    fn check_item(&self, e: usize) -> Result<()> {
        if e >= self.n_items {
            return Err(Error::IndexOutOfRange {
                what: "item",
                index: e,
                len: self.n_items,
            });
        }
        Ok(())
    }

    #[inline]
    fn score_unchecked(&self, u: usize, e: usize) -> f64 {
        let dot: f64 = self.user_row(u).iter().zip(self.item_row(e)).map(|(a, b)| a * b).sum();
        if self.use_bias {
            dot + self.item_bias[e]
        } else {
            dot
        }
    }

    pub fn score(&self, u: usize, e: usize) -> Result<f64> {
        self.check_user(u)?;
        self.check_item(e)?;
        Ok(self.score_unchecked(u, e))
    }

    /// Scores of every item for user `u`, written into `out`.
    pub fn score_all(&self, u: usize, out: &mut Vec<f64>) -> Result<()> {
        self.check_user(u)?;
        out.clear();
        out.extend((0..self.n_items).map(|e| self.score_unchecked(u, e)));
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.user_emb.iter().chain(&self.item_emb).chain(&self.item_bias).all(|x| x.is_finite())
    }

    /// Adds `coef * d score(u, e) / d params` into `grads`.
    #[inline]
    pub(crate) fn accumulate_score_grad(&self, u: usize, e: usize, coef: f64, grads: &mut Gradients) {
        let d = self.dim;
        let (ur, ir) = (u * d, e * d);
        for k in 0..d {
            grads.user_emb[ur + k] += coef * self.item_emb[ir + k];
            grads.item_emb[ir + k] += coef * self.user_emb[ur + k];
        }
        if self.use_bias {
            grads.item_bias[e] += coef;
        }
    }
}

/// Dense gradient buffers with the same shapes as [`MfModel`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    pub user_emb: Vec<f64>,
    pub item_emb: Vec<f64>,
    pub item_bias: Vec<f64>,
}

impl Gradients {
    pub fn zeros_like(model: &MfModel) -> Self {
        Self {
            user_emb: vec![0.0; model.user_emb.len()],
            item_emb: vec![0.0; model.item_emb.len()],
            item_bias: vec![0.0; model.item_bias.len()],
        }
    }

    pub fn clear(&mut self) {
        self.blocks_mut().into_iter().for_each(|b| b.fill(0.0));
    }

    pub fn scale(&mut self, c: f64) {
        for b in self.blocks_mut() {
            b.iter_mut().for_each(|x| *x *= c);
        }
    }

    /// `self += c * other`.
    pub fn add_scaled(&mut self, c: f64, other: &Gradients) {
        for (dst, src) in self.blocks_mut().into_iter().zip(other.blocks()) {
            dst.iter_mut().zip(src).for_each(|(d, s)| *d += c * s);
        }
    }

    fn blocks(&self) -> [&[f64]; 3] {
        [&self.user_emb, &self.item_emb, &self.item_bias]
    }

    fn blocks_mut(&mut self) -> [&mut Vec<f64>; 3] {
        [&mut self.user_emb, &mut self.item_emb, &mut self.item_bias]
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.blocks().concat()
    }
}

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `-ln(clamp(sigmoid(x)))` and its derivative in `x`.
#[inline]
fn neg_log_sigmoid(x: f64) -> (f64, f64) {
    let p = sigmoid(x);
    if p < PROB_CLAMP {
        (-PROB_CLAMP.ln(), 0.0)
    } else if p > 1.0 - PROB_CLAMP {
        (-(1.0 - PROB_CLAMP).ln(), 0.0)
    } else {
        (-p.ln(), p - 1.0)
    }
}

/// Loss of one positive `(u, e_pos)` against `negatives`.
///
/// * BCE: `-ln p(pos) - sum ln(1 - p(neg))`, averaged over `1 + |neg|` terms.
/// * BPR: `-ln sigmoid(s_pos - s_neg)`, averaged over the negatives.
///
/// When `grads` is given, `scale * d loss / d params` is added to it.
pub fn sample_loss(
    model: &MfModel,
    u: usize,
    e_pos: usize,
    negatives: &[u32],
    mode: LossMode,
    grads: Option<&mut Gradients>,
    scale: f64,
) -> Result<f64> {
    model.check_user(u)?;
    model.check_item(e_pos)?;
    if negatives.is_empty() {
        return Err(Error::Empty("negatives"));
    }
    for &n in negatives {
        model.check_item(n as usize)?;
        if n as usize == e_pos {
            return Err(Error::config(format!("negative {n} equals the positive item")));
        }
    }
    Ok(sample_loss_unchecked(model, u, e_pos, negatives, mode, grads, scale))
}

pub(crate) fn sample_loss_unchecked(
    model: &MfModel,
    u: usize,
    e_pos: usize,
    negatives: &[u32],
    mode: LossMode,
    mut grads: Option<&mut Gradients>,
    scale: f64,
) -> f64 {
    let s_pos = model.score_unchecked(u, e_pos);
    match mode {
        LossMode::Bce => {
            let norm = 1.0 / (1 + negatives.len()) as f64;
            let (mut loss, d_pos) = neg_log_sigmoid(s_pos);
            if let Some(g) = grads.as_deref_mut() {
                model.accumulate_score_grad(u, e_pos, scale * norm * d_pos, g);
            }
            for &n in negatives {
                let n = n as usize;
                // -ln(1 - sigmoid(s)) = -ln sigmoid(-s)
                let (l, d) = neg_log_sigmoid(-model.score_unchecked(u, n));
                loss += l;
                if let Some(g) = grads.as_deref_mut() {
                    model.accumulate_score_grad(u, n, -scale * norm * d, g);
                }
            }
            loss * norm
        }
        LossMode::Bpr => {
            let norm = 1.0 / negatives.len() as f64;
            let mut loss = 0.0;
            for &n in negatives {
                let n = n as usize;
                let (l, d) = neg_log_sigmoid(s_pos - model.score_unchecked(u, n));
                loss += l;
                if let Some(g) = grads.as_deref_mut() {
                    model.accumulate_score_grad(u, e_pos, scale * norm * d, g);
                    model.accumulate_score_grad(u, n, -scale * norm * d, g);
                }
            }
            loss * norm
        }
    }
}

/// Draws negatives i.i.d. with probability proportional to
/// `pop_count^exponent` (exponent 1 is popularity-proportional, 0 uniform).
#[derive(Clone, Debug)]
pub struct NegativeSampler {
    weights: Vec<f64>,
    dist: WeightedIndex<f64>,
}

const MAX_REJECTIONS: usize = 10_000;

impl NegativeSampler {
    pub fn new(pop_count: &[u64], exponent: f64) -> Result<Self> {
        let weights: Vec<f64> = pop_count
            .iter()
            .map(|&c| if c == 0 && exponent > 0.0 { 0.0 } else { (c as f64).powf(exponent) })
            .collect();
        let dist = WeightedIndex::new(&weights).map_err(|_| Error::NoSamplingMass)?;
        Ok(Self { weights, dist })
    }

    /// Popularity-proportional sampler.
    pub fn proportional(pop_count: &[u64]) -> Result<Self> {
        Self::new(pop_count, 1.0)
    }

    /// `n` draws with replacement, rejecting items in `exclude`.
    pub fn sample<R: Rng>(&self, n: usize, exclude: &[u32], rng: &mut R) -> Result<Vec<u32>> {
        let mut out = Vec::with_capacity(n);
        self.sample_into(n, exclude, rng, &mut out)?;
        Ok(out)
    }

    pub fn sample_into<R: Rng>(&self, n: usize, exclude: &[u32], rng: &mut R, out: &mut Vec<u32>) -> Result<()> {
        out.clear();
        let mut rejections = 0usize;
        while out.len() < n {
            let item = self.dist.sample(rng) as u32;
            if exclude.contains(&item) {
                rejections += 1;
                if rejections == MAX_REJECTIONS && self.remaining_mass(exclude) <= 0.0 {
                    return Err(Error::NoSamplingMass);
                }
                continue;
            }
            out.push(item);
        }
        Ok(())
    }

    fn remaining_mass(&self, exclude: &[u32]) -> f64 {
        let mut ex: Vec<u32> = exclude.to_vec();
        ex.sort_unstable();
        ex.dedup();
        let total: f64 = self.weights.iter().sum();
        let excluded: f64 = ex.iter().filter_map(|&i| self.weights.get(i as usize)).sum();
        total - excluded
    }
}

/// Adam with bias correction and L2 weight decay folded into the gradient.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub step: u64,
    m: Vec<f64>,
    v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(model: &MfModel, lr: f64, weight_decay: f64) -> Self {
        let n = model.user_emb.len() + model.item_emb.len() + model.item_bias.len();
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: vec![0.0; n],
            v: vec![0.0; n],
        }
    }

    pub fn second_moments(&self) -> &[f64] {
        &self.v
    }
}

/// One bias-corrected Adam step.
pub fn apply_gradients(model: &mut MfModel, opt: &mut OptimizerState, grads: &Gradients) -> Result<()> {
    let shapes_ok = grads.user_emb.len() == model.user_emb.len()
        && grads.item_emb.len() == model.item_emb.len()
        && grads.item_bias.len() == model.item_bias.len()
        && opt.m.len() == model.user_emb.len() + model.item_emb.len() + model.item_bias.len();
    if !shapes_ok {
        return Err(Error::Shape("gradient or optimizer shapes do not match the model".into()));
    }
    for (name, block) in [
        ("user_emb", &grads.user_emb),
        ("item_emb", &grads.item_emb),
        ("item_bias", &grads.item_bias),
    ] {
        if block.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(name));
        }
    }

    opt.step += 1;
    let t = opt.step as i32;
    let bc1 = 1.0 - opt.beta1.powi(t);
    let bc2 = 1.0 - opt.beta2.powi(t);
    let (b1, b2, lr, eps, wd) = (opt.beta1, opt.beta2, opt.lr, opt.eps, opt.weight_decay);

    let params = model
        .user_emb
        .iter_mut()
        .chain(model.item_emb.iter_mut())
        .chain(model.item_bias.iter_mut());
    let gs = grads.user_emb.iter().chain(&grads.item_emb).chain(&grads.item_bias);
    for (((p, &g), m), v) in params.zip(gs).zip(opt.m.iter_mut()).zip(opt.v.iter_mut()) {
        let g = g + wd * *p;
        *m = b1 * *m + (1.0 - b1) * g;
        *v = b2 * *v + (1.0 - b2) * g * g;
        *p -= lr * (*m / bc1) / ((*v / bc2).sqrt() + eps);
    }
    Ok(())
}

/// Indices of the `k` largest scores outside `exclude`, by descending score
/// with ties broken by ascending index.
pub fn topk_from_scores(scores: &[f64], k: usize, exclude: &[u32]) -> Result<Vec<u32>> {
    let mut mask = vec![false; scores.len()];
    for &e in exclude {
        if let Some(m) = mask.get_mut(e as usize) {
            *m = true;
        }
    }
    let mut cand: Vec<u32> = (0..scores.len() as u32).filter(|&i| !mask[i as usize]).collect();
    if k > cand.len() {
        return Err(Error::config(format!("top-{k} requested but only {} candidates", cand.len())));
    }
    // `+ 0.0` folds -0.0 into +0.0 so signed zeros tie and fall back to the index
    let key = |i: &u32| scores[*i as usize] + 0.0;
    let cmp = |a: &u32, b: &u32| key(b).total_cmp(&key(a)).then(a.cmp(b));
    if k == 0 {
        return Ok(Vec::new());
    }
    if k < cand.len() {
        cand.select_nth_unstable_by(k - 1, cmp);
        cand.truncate(k);
    }
    cand.sort_unstable_by(cmp);
    Ok(cand)
}

pub fn topk_recommend(model: &MfModel, u: usize, k: usize, exclude: &[u32]) -> Result<Vec<u32>> {
    let mut scores = Vec::with_capacity(model.n_items);
    model.score_all(u, &mut scores)?;
    topk_from_scores(&scores, k, exclude)
}

pub const CHECKPOINT_FORMAT: &str = "morec-mf-json-v1";

/// On-disk model container: a JSON object
/// `{format, config_digest, model: {n_users, n_items, dim, use_bias, user_emb, item_emb, item_bias}}`
/// with row-major embedding arrays.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config_digest: String,
    pub model: MfModel,
}

impl Checkpoint {
    pub fn new(model: MfModel, config_digest: impl Into<String>) -> Self {
        Self {
            format: CHECKPOINT_FORMAT.to_string(),
            config_digest: config_digest.into(),
            model,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_vec(self)?;
        fs::write(path, json).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_slice(&bytes)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(Error::config(format!("unsupported checkpoint format `{}`", ck.format)));
        }
        let m = &ck.model;
        if m.user_emb.len() != m.n_users * m.dim || m.item_emb.len() != m.n_items * m.dim || m.item_bias.len() != m.n_items {
            return Err(Error::Shape("checkpoint arrays do not match declared shapes".into()));
        }
        Ok(ck)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn two_by_two() -> MfModel {
        let mut m = MfModel::zeros(1, 2, 2, true);
        m.user_emb = vec![1.0, 2.0];
        m.item_emb = vec![3.0, -1.0, 0.0, 0.0];
        m
    }

    #[test]
    fn score_examples() {
        let zero = MfModel::zeros(2, 2, 3, true);
        assert_eq!(zero.score(1, 1).unwrap(), 0.0);
        let m = two_by_two();
        assert_eq!(m.score(0, 0).unwrap(), 1.0);
        let mut b = MfModel::zeros(1, 2, 2, true);
        b.item_bias[1] = 0.7;
        assert_eq!(b.score(0, 1).unwrap(), 0.7);
        b.use_bias = false;
        assert_eq!(b.score(0, 1).unwrap(), 0.0);
        assert!(matches!(m.score(1, 0), Err(Error::IndexOutOfRange { what: "user", .. })));
        assert!(matches!(m.score(0, 5), Err(Error::IndexOutOfRange { what: "item", .. })));
    }

    #[test]
    fn symmetric_losses_are_ln2() {
        let m = MfModel::zeros(1, 3, 2, true);
        let bpr = sample_loss(&m, 0, 0, &[1], LossMode::Bpr, None, 1.0).unwrap();
        let bce = sample_loss(&m, 0, 0, &[1], LossMode::Bce, None, 1.0).unwrap();
        assert!((bpr - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((bce - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn loss_input_errors() {
        let m = MfModel::zeros(1, 3, 2, true);
        assert!(sample_loss(&m, 0, 0, &[], LossMode::Bpr, None, 1.0).is_err());
        assert!(sample_loss(&m, 0, 0, &[0], LossMode::Bpr, None, 1.0).is_err());
    }

    #[test]
    fn extreme_scores_stay_finite() {
        let mut m = MfModel::zeros(1, 2, 1, true);
        m.item_bias = vec![-1e6, 1e6];
        for mode in [LossMode::Bpr, LossMode::Bce] {
            let mut g = Gradients::zeros_like(&m);
            let l = sample_loss(&m, 0, 0, &[1], mode, Some(&mut g), 1.0).unwrap();
            assert!(l.is_finite() && l >= 0.0);
            assert!(g.flatten().iter().all(|x| x.is_finite()));
        }
    }

    #[test]
    fn negative_frequencies() {
        let s = NegativeSampler::proportional(&[3, 1, 0]).unwrap();
        let mut r = rng::stream(1, "t");
        let draws = s.sample(100_000, &[], &mut r).unwrap();
        assert!(!draws.contains(&2));
        let f0 = draws.iter().filter(|&&i| i == 0).count() as f64 / 1e5;
        assert!((f0 - 0.75).abs() < 0.02, "f0 = {f0}");

        let s = NegativeSampler::proportional(&[3, 1]).unwrap();
        assert!(s.sample(1000, &[0], &mut r).unwrap().iter().all(|&i| i == 1));
        assert!(s.sample(0, &[], &mut r).unwrap().is_empty());
        assert!(matches!(s.sample(1, &[0, 1], &mut r), Err(Error::NoSamplingMass)));
        assert!(NegativeSampler::proportional(&[0, 0]).is_err());
    }

    #[test]
    fn adam_first_step_and_identity() {
        let mut m = MfModel::zeros(0, 1, 1, true);
        let mut opt = OptimizerState::new(&m, 0.001, 0.0);
        let mut g = Gradients::zeros_like(&m);
        apply_gradients(&mut m, &mut opt, &g).unwrap();
        assert_eq!(m.item_emb[0], 0.0);
        assert_eq!(m.item_bias[0], 0.0);

        let mut m = MfModel::zeros(0, 1, 1, true);
        let mut opt = OptimizerState::new(&m, 0.001, 0.0);
        g.item_bias[0] = 1.0;
        apply_gradients(&mut m, &mut opt, &g).unwrap();
        assert!((m.item_bias[0] + 0.001).abs() < 1e-6);
        assert_eq!(opt.step, 1);
        assert!(opt.second_moments().iter().all(|&v| v >= 0.0));

        let (mut once, mut o1) = (m.clone(), opt.clone());
        apply_gradients(&mut once, &mut o1, &g).unwrap();
        apply_gradients(&mut m, &mut opt, &g).unwrap();
        apply_gradients(&mut m, &mut opt, &g).unwrap();
        assert_ne!(once, m);
        assert_eq!(opt.step, o1.step + 1);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut m = MfModel::zeros(1, 1, 1, true);
        let mut opt = OptimizerState::new(&m, 0.001, 0.0);
        let mut g = Gradients::zeros_like(&m);
        g.item_emb[0] = f64::NAN;
        match apply_gradients(&mut m, &mut opt, &g) {
            Err(Error::NonFiniteGradient(block)) => assert_eq!(block, "item_emb"),
            other => panic!("{other:?}"),
        }
        assert_eq!(opt.step, 0);
    }

    #[test]
    fn topk_examples() {
        let s = [0.1, 0.9, 0.5];
        assert_eq!(topk_from_scores(&s, 2, &[]).unwrap(), vec![1, 2]);
        assert_eq!(topk_from_scores(&s, 2, &[1]).unwrap(), vec![2, 0]);
        assert_eq!(topk_from_scores(&[0.3; 5], 3, &[]).unwrap(), vec![0, 1, 2]);
        assert!(topk_from_scores(&s, 3, &[0]).is_err());
    }

    #[test]
    fn bpr_toy_converges() {
        // user 0 likes item 0, user 1 likes item 1
        let mut r = rng::stream(3, "toy");
        let mut m = MfModel::random(2, 2, 4, true, 0.1, &mut r);
        let mut opt = OptimizerState::new(&m, 0.05, 0.0);
        let mut g = Gradients::zeros_like(&m);
        let mut loss = 0.0;
        for _ in 0..500 {
            g.clear();
            loss = 0.0;
            for (u, pos, neg) in [(0usize, 0usize, 1u32), (1, 1, 0)] {
                loss += sample_loss(&m, u, pos, &[neg], LossMode::Bpr, Some(&mut g), 0.5).unwrap() * 0.5;
            }
            apply_gradients(&mut m, &mut opt, &g).unwrap();
        }
        assert!(loss < 0.1, "loss {loss}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ck.json");
        let mut r = rng::stream(9, "ck");
        let m = MfModel::random(3, 4, 5, true, 0.3, &mut r);
        Checkpoint::new(m.clone(), "abc").save(&path).unwrap();
        let back = Checkpoint::load(&path).unwrap();
        assert_eq!(back.model, m);
        assert_eq!(back.config_digest, "abc");
    }
}
