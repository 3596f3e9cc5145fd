//! Relevance-decomposed click model: a relevance distribution head, one
//! click head per relevance level, their mixture and the incentive-scaled
//! ranking score.

mod batch;

use serde::{Deserialize, Serialize};

pub use batch::{id_row, EmbeddingCache, FeatureBatch, RequestSpec, RowSpec, TableSizes, TextEncoder};

use crate::debias::{make_negative, pairwise_loss, DebiasConfig, DebiasPair};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::ParamStore;
use crate::preference::{ContextVars, IncentiveHead, MergedSequence};
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::data::SearchSample;

pub const RSL_LEVELS: usize = 4;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ModelVariant {
    /// Relevance mixture, incentive score and all auxiliary losses.
    Full,
    /// One sigmoid over the same features; ranks by click probability.
    Plain,
}

/// How the incentive score scales the click probability.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TauMode {
    /// `τ · p`
    Literal,
    /// `max(0, 1 + τ) · p`
    OnePlus,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CtrConfig {
    pub variant: ModelVariant,
    pub tau_mode: TauMode,
    pub emb_dim: usize,
    pub hidden: usize,
    pub pref_hidden: usize,
    pub lambda_rsl: f64,
    /// Weight of the per-request listwise loss on ranking scores.
    pub lambda_rank: f64,
    /// Ranking scores are multiplied by this before the listwise softmax.
    pub rank_sharpness: f64,
    #[serde(skip)]
    pub n_users: usize,
    #[serde(skip)]
    pub n_items: usize,
    #[serde(skip)]
    pub n_categories: usize,
    #[serde(skip)]
    pub dense_width: usize,
}

impl Default for CtrConfig {
    fn default() -> Self {
        CtrConfig {
            variant: ModelVariant::Full,
            tau_mode: TauMode::Literal,
            emb_dim: 8,
            hidden: 32,
            pref_hidden: 16,
            lambda_rsl: 1.0,
            lambda_rank: 1.0,
            rank_sharpness: 2.0,
            n_users: 1,
            n_items: 1,
            n_categories: 1,
            dense_width: crate::data::DENSE_WIDTH,
        }
    }
}

impl CtrConfig {
    pub fn validate(&self) -> Result<()> {
        if self.emb_dim == 0 || self.hidden == 0 || self.pref_hidden == 0 {
            return Err(Error::Config("model widths must be positive".into()));
        }
        if self.lambda_rsl < 0.0 || self.lambda_rank < 0.0 || self.rank_sharpness <= 0.0 {
            return Err(Error::Config("loss weights must be >= 0 and sharpness > 0".into()));
        }
        Ok(())
    }

    fn sizes(&self) -> TableSizes {
        TableSizes {
            users: self.n_users,
            items: self.n_items,
            categories: self.n_categories,
            dense: self.dense_width,
        }
    }
}

/// Forward outputs, one row per batch row.
pub struct Forward<'t> {
    /// `[n × 4]` relevance logits (full variant).
    pub rsl_logits: Option<Var<'t>>,
    pub p_rsl: Option<Var<'t>>,
    pub p_cond: Option<Var<'t>>,
    pub p_click: Var<'t>,
    pub tau: Option<Var<'t>>,
    pub rank: Var<'t>,
}

/// Per-sample prediction in plain numbers.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub p_rsl: [f64; RSL_LEVELS],
    pub p_click_given_rsl: [f64; RSL_LEVELS],
    pub p_click: f64,
    pub tau: f64,
    pub rank_score: f64,
}

/// Loss components of one step.
pub struct LossParts<'t> {
    pub total: Var<'t>,
    pub bce: Var<'t>,
    pub rsl_ce: Option<Var<'t>>,
    pub debias: Option<Var<'t>>,
    pub rank: Option<Var<'t>>,
}

/// Labels and bookkeeping that accompany a [`FeatureBatch`] in training.
pub struct BatchTargets {
    /// Rows `0..n_real` are logged samples; later rows are debias negatives.
    pub n_real: usize,
    pub clicks: Vec<f64>,
    pub rsl: Vec<u8>,
    pub exposed: Vec<bool>,
    /// `(positive row, negative row)` debias pairs.
    pub pairs: Vec<(usize, usize)>,
    /// Contiguous real-row ranges, one per request.
    pub request_rows: Vec<(usize, usize)>,
}

impl BatchTargets {
    pub fn from_rows(rows: &[RowSpec<'_>], n_real: usize, pairs: Vec<(usize, usize)>) -> Self {
        let real = &rows[..n_real];
        let mut request_rows = Vec::new();
        let mut start = 0;
        for i in 1..=real.len() {
            if i == real.len() || real[i].request != real[start].request {
                if i > start {
                    request_rows.push((start, i - start));
                }
                start = i;
            }
        }
        BatchTargets {
            n_real,
            clicks: real.iter().map(|r| if r.sample.click { 1.0 } else { 0.0 }).collect(),
            rsl: real.iter().map(|r| r.sample.rsl).collect(),
            exposed: real.iter().map(|r| r.sample.exposed).collect(),
            pairs,
            request_rows,
        }
    }
}

#[derive(Clone, Debug)]
pub struct RankModel {
    pub config: CtrConfig,
    pub text: TextEncoder,
    pub head: IncentiveHead,
}

impl RankModel {
    pub fn new(config: CtrConfig, text: TextEncoder) -> Result<Self> {
        config.validate()?;
        let head = IncentiveHead::new(text.d(), config.pref_hidden);
        Ok(RankModel { config, text, head })
    }

    fn input_width(&self) -> usize {
        5 * self.config.emb_dim + 3 * self.text.d()
    }

    /// Fresh ranking parameters (the encoder's weights are added by the caller).
    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        let c = &self.config;
        let (e, h, d) = (c.emb_dim, c.hidden, self.text.d());
        let mut p = ParamStore::new();
        p.init_normal("ctr.user_emb", c.n_users + 1, e, 0.1, rng);
        p.init_normal("ctr.item_emb", c.n_items + 1, e, 0.1, rng);
        p.init_normal("ctr.cat_emb", c.n_categories + 1, e, 0.1, rng);
        p.init_normal("ctr.rsl_emb", RSL_LEVELS + 1, e, 0.1, rng);
        p.init_xavier("ctr.dense_w", c.dense_width, e, rng);
        p.init_const("ctr.dense_b", 1, e, 0.0);
        let towers: &[(&str, usize, usize)] = match c.variant {
            ModelVariant::Full => &[("rel", 3, RSL_LEVELS), ("click", 0, RSL_LEVELS)],
            ModelVariant::Plain => &[("plain", 0, 1)],
        };
        for &(name, text_only, out) in towers {
            let width = if text_only > 0 { 3 * d } else { self.input_width() };
            p.init_xavier(&format!("ctr.{name}.w1"), width, h, rng);
            p.init_const(&format!("ctr.{name}.b1"), 1, h, 0.0);
            p.init_xavier(&format!("ctr.{name}.w2"), h, out, rng);
            p.init_const(&format!("ctr.{name}.b2"), 1, out, 0.0);
        }
        if c.variant == ModelVariant::Full {
            // start near the logged click rate
            p.init_const("ctr.click.b2", 1, RSL_LEVELS, -2.5);
            p.extend(self.head.init(rng));
        } else {
            p.init_const("ctr.plain.b2", 1, 1, -2.5);
        }
        p
    }

    pub fn build_batch(&self, requests: &[RequestSpec<'_>], rows: &[RowSpec<'_>]) -> Result<FeatureBatch> {
        FeatureBatch::build(&self.text, &self.config.sizes(), requests, rows)
    }

    /// Features and targets for whole requests. With debias enabled (full
    /// variant only) every clicked rsl-4 row gets one synthetic negative,
    /// appended after the real rows.
    pub fn training_batch(
        &self,
        requests: &[(&[SearchSample], &MergedSequence)],
        debias: Option<&DebiasConfig>,
        rng: &mut Rng,
    ) -> Result<(FeatureBatch, BatchTargets)> {
        let specs: Vec<RequestSpec> = requests
            .iter()
            .map(|(samples, seq)| RequestSpec {
                query: samples.first().map_or(&[][..], |s| &s.query_text[..]),
                seq,
            })
            .collect();
        let mut rows: Vec<RowSpec> = Vec::new();
        for (r, (samples, _)) in requests.iter().enumerate() {
            rows.extend(samples.iter().map(|s| RowSpec::real(s, r)));
        }
        let n_real = rows.len();
        let mut negatives: Vec<(usize, DebiasPair)> = Vec::new();
        if let Some(cfg) = debias.filter(|d| d.enabled && self.config.variant == ModelVariant::Full) {
            for (i, row) in rows.iter().enumerate() {
                if let Some(p) = make_negative(row.sample, self.text.d(), cfg, rng)? {
                    negatives.push((i, p));
                }
            }
        }
        let side = debias.map(|d| d.noise_side);
        let mut pairs = Vec::with_capacity(negatives.len());
        for (k, (i, p)) in negatives.iter().enumerate() {
            pairs.push((*i, n_real + k));
            rows.push(RowSpec {
                sample: rows[*i].sample,
                request: rows[*i].request,
                rsl_feature: p.fake_rsl(),
                noise: side.map(|s| (s, &p.noise[..])),
            });
        }
        let targets = BatchTargets::from_rows(&rows, n_real, pairs);
        Ok((self.build_batch(&specs, &rows)?, targets))
    }

    fn tower<'t>(&self, tape: &'t Tape, params: &ParamStore, name: &str, x: Var<'t>) -> Var<'t> {
        let v = |s: &str| params.var(tape, &format!("ctr.{name}.{s}"));
        x.matmul(v("w1")).add_row(v("b1")).relu().matmul(v("w2")).add_row(v("b2"))
    }

    pub fn forward<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        fb: &FeatureBatch,
        cache: Option<&mut EmbeddingCache>,
    ) -> Result<Forward<'t>> {
        let table = fb.text_table(tape, &self.text, params, cache)?;
        let mut q = table.gather_rows(fb.query_text.clone());
        if let Some(n) = &fb.query_noise {
            q = q.add(tape.constant(n.clone()));
        }
        let mut i = table.gather_rows(fb.item_text.clone());
        if let Some(n) = &fb.item_noise {
            i = i.add(tape.constant(n.clone()));
        }
        let r = table.gather_rows(fb.pair_text.clone());
        let emb = |name: &str, idx: &[usize]| params.var(tape, name).gather_rows(idx.to_vec());
        let dense = tape
            .constant(fb.dense.clone())
            .matmul(params.var(tape, "ctr.dense_w"))
            .add_row(params.var(tape, "ctr.dense_b"));
        let x = tape.concat_cols(&[
            emb("ctr.user_emb", &fb.user),
            emb("ctr.item_emb", &fb.item),
            emb("ctr.cat_emb", &fb.category),
            dense,
            emb("ctr.rsl_emb", &fb.rsl_feature),
            q,
            i,
            r,
        ]);
        if self.config.variant == ModelVariant::Plain {
            let p = self.tower(tape, params, "plain", x).sigmoid();
            return Ok(Forward {
                rsl_logits: None,
                p_rsl: None,
                p_cond: None,
                p_click: p,
                tau: None,
                rank: p,
            });
        }
        let rsl_logits = self.tower(tape, params, "rel", tape.concat_cols(&[q, i, r]));
        let p_rsl = rsl_logits.softmax_rows();
        let p_cond = self.tower(tape, params, "click", x).sigmoid();
        let p_click = p_rsl.mul(p_cond).sum_cols();
        let ctx = ContextVars {
            query: table.gather_rows(fb.request_query.clone()),
            own_keys: table.gather_rows(fb.own_keys.clone()),
            own_values: table.gather_rows(fb.own_values.clone()),
            own_segments: fb.own_segments.clone(),
            cross_keys: table.gather_rows(fb.cross_keys.clone()),
            cross_values: table.gather_rows(fb.cross_values.clone()),
            cross_segments: fb.cross_segments.clone(),
        };
        let pref = self.head.preferences(tape, params, &ctx);
        let tau = self.head.tau(tape, params, &pref, &fb.request, r);
        let rank = self.fuse(tau, p_click);
        Ok(Forward {
            rsl_logits: Some(rsl_logits),
            p_rsl: Some(p_rsl),
            p_cond: Some(p_cond),
            p_click,
            tau: Some(tau),
            rank,
        })
    }

    fn fuse<'t>(&self, tau: Var<'t>, p_click: Var<'t>) -> Var<'t> {
        match self.config.tau_mode {
            TauMode::Literal => tau.mul(p_click),
            TauMode::OnePlus => tau.add_scalar(1.0).relu().mul(p_click),
        }
    }

    /// `BCE + λ_rsl·CE(rsl) + R_debias + λ_rank·listwise(rank)`; only the
    /// first two apply to the plain variant's single head.
    pub fn main_loss<'t>(&self, fwd: &Forward<'t>, t: &BatchTargets, debias: Option<&DebiasConfig>) -> Result<LossParts<'t>> {
        let c = &self.config;
        let real: Vec<usize> = (0..t.n_real).collect();
        let bce = losses::binary_cross_entropy(fwd.p_click.gather_rows(real), &t.clicks);
        let mut total = bce;
        let mut parts = LossParts {
            total,
            bce,
            rsl_ce: None,
            debias: None,
            rank: None,
        };
        if let Some(logits) = fwd.rsl_logits {
            let rows: Vec<usize> = (0..t.n_real).filter(|&i| t.exposed[i]).collect();
            if !rows.is_empty() && c.lambda_rsl > 0.0 {
                let labels: Vec<usize> = rows.iter().map(|&i| t.rsl[i] as usize - 1).collect();
                let ce = losses::softmax_cross_entropy(logits.gather_rows(rows), &labels);
                total = total.add(ce.scale(c.lambda_rsl));
                parts.rsl_ce = Some(ce);
            }
        }
        if let Some(cfg) = debias.filter(|d| d.enabled && c.variant == ModelVariant::Full) {
            let pos: Vec<usize> = t.pairs.iter().map(|p| p.0).collect();
            let neg: Vec<usize> = t.pairs.iter().map(|p| p.1).collect();
            let l = pairwise_loss(fwd.p_click.gather_rows(pos), fwd.p_click.gather_rows(neg), cfg);
            total = total.add(l);
            parts.debias = Some(l);
        }
        if let (Some(tau), true) = (fwd.tau, c.lambda_rank > 0.0) {
            // the click estimate is held fixed here so this term only shapes τ
            let p = fwd.p_click.tape().constant(fwd.p_click.value());
            if let Some(l) = listwise_loss(self.fuse(tau, p), t, c.rank_sharpness) {
                total = total.add(l.scale(c.lambda_rank));
                parts.rank = Some(l);
            }
        }
        parts.total = total;
        Ok(parts)
    }

    /// Prediction for one sample in the context of its merged sequence.
    pub fn predict(
        &self,
        params: &ParamStore,
        sample: &SearchSample,
        seq: &MergedSequence,
        cache: Option<&mut EmbeddingCache>,
    ) -> Result<Prediction> {
        let req = [RequestSpec {
            query: &sample.query_text,
            seq,
        }];
        let rows = [RowSpec::real(sample, 0)];
        let fb = self.build_batch(&req, &rows)?;
        let tape = Tape::new();
        let f = self.forward(&tape, params, &fb, cache)?;
        Ok(prediction_row(&f, 0))
    }
}

/// Extracts row `r` of a forward pass.
pub fn prediction_row(f: &Forward<'_>, r: usize) -> Prediction {
    let four = |v: Option<Var<'_>>| -> [f64; RSL_LEVELS] {
        v.map(|v| v.with_value(|t| [t.get(r, 0), t.get(r, 1), t.get(r, 2), t.get(r, 3)]))
            .unwrap_or([f64::NAN; RSL_LEVELS])
    };
    let p = f.p_click.with_value(|t| t.get(r, 0));
    Prediction {
        p_rsl: four(f.p_rsl),
        p_click_given_rsl: four(f.p_cond),
        p_click: p,
        tau: f.tau.map_or(f64::NAN, |t| t.with_value(|t| t.get(r, 0))),
        rank_score: f.rank.with_value(|t| t.get(r, 0)),
    }
}

/// Mean over requests with at least one click of the softmax cross entropy
/// of clicked rows, scores scaled by `sharpness`.
fn listwise_loss<'t>(rank: Var<'t>, t: &BatchTargets, sharpness: f64) -> Option<Var<'t>> {
    let segs: Vec<(usize, usize)> = t
        .request_rows
        .iter()
        .copied()
        .filter(|&(s, l)| l > 1 && t.clicks[s..s + l].iter().any(|&y| y > 0.0) && t.clicks[s..s + l].iter().any(|&y| y == 0.0))
        .collect();
    if segs.is_empty() {
        return None;
    }
    let mut w = vec![0.0; t.n_real];
    for &(s, l) in &segs {
        let k = t.clicks[s..s + l].iter().filter(|&&y| y > 0.0).count() as f64;
        for i in s..s + l {
            if t.clicks[i] > 0.0 {
                w[i] = -1.0 / (k * segs.len() as f64);
            }
        }
    }
    let real: Vec<usize> = (0..t.n_real).collect();
    Some(rank.gather_rows(real).scale(sharpness).segment_log_softmax(segs).weighted_sum(w))
}

/// A scored candidate in final order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredCandidate {
    pub item_id: u32,
    pub p_click: f64,
    pub tau: f64,
    pub rank_score: f64,
    /// 1-based position.
    pub rank: usize,
}

/// Orders candidates by descending ranking score, ties by ascending item id.
pub fn rank_candidates(mut scored: Vec<(u32, Prediction)>) -> Vec<ScoredCandidate> {
    scored.sort_by(|a, b| b.1.rank_score.total_cmp(&a.1.rank_score).then(a.0.cmp(&b.0)));
    scored
        .into_iter()
        .enumerate()
        .map(|(k, (item_id, p))| ScoredCandidate {
            item_id,
            p_click: p.p_click,
            tau: p.tau,
            rank_score: p.rank_score,
            rank: k + 1,
        })
        .collect()
}

/// Scores every candidate of one request and returns them in rank order.
pub fn score_candidates(
    model: &RankModel,
    params: &ParamStore,
    query: &[String],
    seq: &MergedSequence,
    candidates: &[SearchSample],
    cache: Option<&mut EmbeddingCache>,
) -> Result<Vec<ScoredCandidate>> {
    if candidates.is_empty() {
        return Ok(Vec::new());
    }
    let req = [RequestSpec { query, seq }];
    let rows: Vec<RowSpec> = candidates.iter().map(|s| RowSpec::real(s, 0)).collect();
    let fb = model.build_batch(&req, &rows)?;
    let tape = Tape::new();
    let f = model.forward(&tape, params, &fb, cache)?;
    Ok(rank_candidates(
        candidates
            .iter()
            .enumerate()
            .map(|(r, s)| (s.item_id, prediction_row(&f, r)))
            .collect(),
    ))
}

/// Concatenated encoder and ranking parameters.
pub fn joint_params(encoder: &ParamStore, ranking: ParamStore) -> ParamStore {
    let mut p = encoder.clone();
    p.extend(ranking);
    p
}
