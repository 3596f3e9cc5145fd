//! Synthetic hard negatives and the margin-capped, truncated pairwise loss.

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::SearchSample;
use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Which text embedding receives the noise of a fake negative.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseSide {
    Query,
    Item,
}

/// Refined loss with margin and truncation, or the plain pairwise logistic loss.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairwiseMode {
    Refined,
    Naive,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DebiasConfig {
    pub enabled: bool,
    pub mode: PairwiseMode,
    pub p1: f64,
    pub p2: f64,
    pub margin: f64,
    pub threshold: f64,
    pub weight: f64,
    pub noise_std: f64,
    pub noise_side: NoiseSide,
}

impl Default for DebiasConfig {
    fn default() -> Self {
        DebiasConfig {
            enabled: true,
            mode: PairwiseMode::Refined,
            p1: 0.2,
            p2: 0.6,
            margin: 0.075,
            threshold: 0.08,
            weight: 1.0,
            noise_std: 1.0,
            noise_side: NoiseSide::Query,
        }
    }
}

impl DebiasConfig {
    pub fn validate(&self) -> Result<()> {
        check_probs(self.p1, self.p2)?;
        if self.p1 == self.p2 || self.p1 <= 0.0 || self.p2 >= 1.0 {
            return Err(Error::Config(format!(
                "need 0 < p1 < p2 < 1, got p1={} p2={}",
                self.p1, self.p2
            )));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if !(self.threshold > 0.0 && self.threshold < 1.0) {
            return Err(Error::Config("threshold must lie in (0, 1)".into()));
        }
        if !(self.weight >= 0.0) || !(self.noise_std >= 0.0) {
            return Err(Error::Config("weight and noise_std must be >= 0".into()));
        }
        Ok(())
    }
}

fn check_probs(p1: f64, p2: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p1) || !(0.0..=1.0).contains(&p2) || p1 > p2 {
        return Err(Error::Config(format!("need 0 <= p1 <= p2 <= 1, got p1={p1} p2={p2}")));
    }
    Ok(())
}

/// Downgraded relevance level for a uniform draw `u`.
pub fn fake_rsl_from_uniform(p1: f64, p2: f64, u: f64) -> u8 {
    if u < p1 {
        1
    } else if u < p2 {
        2
    } else {
        3
    }
}

/// Fake level: 1 with probability `p1`, 2 with `p2 - p1`, else 3.
/// `p1 == p2` is accepted and never yields 2; `p1 > p2` is a config error.
pub fn sample_fake_rsl(p1: f64, p2: f64, rng: &mut Rng) -> Result<u8> {
    check_probs(p1, p2)?;
    Ok(fake_rsl_from_uniform(p1, p2, rng.random::<f64>()))
}

/// Draws `d` independent `N(0, std²)` values.
pub fn noise_vector(d: usize, std: f64, rng: &mut Rng) -> Vec<f64> {
    (0..d)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect()
}

/// `emb + ε` with `ε ~ N(0, 1)` element-wise.
pub fn inject_noise(emb: &Tensor, rng: &mut Rng) -> Tensor {
    let noise = noise_vector(emb.len(), 1.0, rng);
    let mut out = emb.clone();
    for (v, e) in out.data_mut().iter_mut().zip(noise) {
        *v += e;
    }
    out
}

/// A clicked, strongly relevant sample and its synthetic counterpart.
#[derive(Clone, Debug, PartialEq)]
pub struct DebiasPair {
    pub positive: SearchSample,
    /// Identical to `positive` except for `rsl`, which holds the fake level.
    pub negative: SearchSample,
    /// Noise added to the embedding on the configured side.
    pub noise: Vec<f64>,
}

impl DebiasPair {
    pub fn fake_rsl(&self) -> u8 {
        self.negative.rsl
    }
}

pub fn qualifies(s: &SearchSample) -> bool {
    s.click && s.rsl == 4
}

/// One pair per qualifying positive (clicked, rsl 4); `None` otherwise.
pub fn make_negative(positive: &SearchSample, d: usize, cfg: &DebiasConfig, rng: &mut Rng) -> Result<Option<DebiasPair>> {
    if !qualifies(positive) {
        return Ok(None);
    }
    let fake = sample_fake_rsl(cfg.p1, cfg.p2, rng)?;
    let mut negative = positive.clone();
    negative.rsl = fake;
    Ok(Some(DebiasPair {
        positive: positive.clone(),
        negative,
        noise: noise_vector(d, cfg.noise_std, rng),
    }))
}

/// Pairs for every qualifying sample of `batch`, with the row each came from.
pub fn make_pairs(batch: &[SearchSample], d: usize, cfg: &DebiasConfig, rng: &mut Rng) -> Result<Vec<(usize, DebiasPair)>> {
    let mut out = Vec::new();
    for (i, s) in batch.iter().enumerate() {
        if let Some(p) = make_negative(s, d, cfg, rng)? {
            out.push((i, p));
        }
    }
    Ok(out)
}

/// `Σ log(1 + exp(-(f⁺ - f⁻)))` over pairs; columns `n × 1`.
pub fn pairwise_loss_naive<'t>(f_pos: Var<'t>, f_neg: Var<'t>) -> Var<'t> {
    if f_pos.rows() == 0 {
        return f_pos.tape().constant(Tensor::scalar(0.0));
    }
    f_neg.sub(f_pos).softplus().sum()
}

/// `w · Σ log(1 + exp(max(0, margin - (f⁺ - f⁻))))`, with `w` dropped to zero
/// when the batch's mean positive score is at or above the threshold. The
/// truncated loss is a constant and carries no gradient.
pub fn debias_loss<'t>(f_pos: Var<'t>, f_neg: Var<'t>, cfg: &DebiasConfig) -> Var<'t> {
    let tape: &'t Tape = f_pos.tape();
    if f_pos.rows() == 0 || truncated(f_pos, cfg) {
        return tape.constant(Tensor::scalar(0.0));
    }
    f_neg
        .sub(f_pos)
        .add_scalar(cfg.margin)
        .relu()
        .softplus()
        .sum()
        .scale(cfg.weight)
}

/// Whether the batch's mean positive score reached the truncation threshold.
pub fn truncated(f_pos: Var<'_>, cfg: &DebiasConfig) -> bool {
    let mean = f_pos.with_value(|t| t.sum() / t.len().max(1) as f64);
    mean >= cfg.threshold
}

/// The configured pairwise loss.
pub fn pairwise_loss<'t>(f_pos: Var<'t>, f_neg: Var<'t>, cfg: &DebiasConfig) -> Var<'t> {
    match cfg.mode {
        PairwiseMode::Refined => debias_loss(f_pos, f_neg, cfg),
        PairwiseMode::Naive => pairwise_loss_naive(f_pos, f_neg).scale(cfg.weight),
    }
}
