//! Cross-user behaviour mining, target-attention preference pooling and the
//! gated incentive score.

use std::collections::{BTreeMap, BTreeSet};

use rand::seq::IndexedRandom;
use serde::{Deserialize, Serialize};

use crate::data::{BehaviorEvent, BehaviorSequence, SearchSample, MAX_BEHAVIOR_LEN};
use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::ops;
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Jaccard similarity of the two token sets.
pub fn query_similarity(a: &[String], b: &[String]) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::Input("query similarity of an empty query".into()));
    }
    let a: BTreeSet<&String> = a.iter().collect();
    let b: BTreeSet<&String> = b.iter().collect();
    let inter = a.intersection(&b).count();
    Ok(inter as f64 / (a.len() + b.len() - inter) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Cross-user supplementation on or off.
    pub enabled: bool,
    /// Users sampled from the same-category pool.
    pub pool_users: usize,
    pub top_k: usize,
    pub max_len: usize,
    /// Users with fewer own events count as cold for evaluation slices.
    pub cold_threshold: usize,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            enabled: true,
            pool_users: 50,
            top_k: 10,
            max_len: MAX_BEHAVIOR_LEN,
            cold_threshold: 5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
struct PoolEvent {
    category: u32,
    event: BehaviorEvent,
}

/// Read-only snapshot of historical clicks, indexed by user and category.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BehaviorPool {
    per_user: BTreeMap<u32, Vec<PoolEvent>>,
    /// category -> users with at least one click there
    category_users: BTreeMap<u32, Vec<u32>>,
}

impl BehaviorPool {
    /// Builds the pool from clicked samples in canonical order; unclicked
    /// samples are ignored.
    pub fn new(history: &[SearchSample]) -> Self {
        let mut per_user: BTreeMap<u32, Vec<PoolEvent>> = BTreeMap::new();
        let mut cats: BTreeMap<u32, BTreeSet<u32>> = BTreeMap::new();
        for s in history.iter().filter(|s| s.click) {
            per_user.entry(s.user_id).or_default().push(PoolEvent {
                category: s.category,
                event: BehaviorEvent::from_sample(s),
            });
            cats.entry(s.category).or_default().insert(s.user_id);
        }
        BehaviorPool {
            per_user,
            category_users: cats
                .into_iter()
                .map(|(c, us)| (c, us.into_iter().collect()))
                .collect(),
        }
    }

    pub fn own_event_count(&self, user: u32) -> usize {
        self.per_user.get(&user).map_or(0, Vec::len)
    }

    pub fn n_events(&self) -> usize {
        self.per_user.values().map(Vec::len).sum()
    }
}

/// A user's own history plus the cross-user supplement for one query.
#[derive(Clone, Debug, PartialEq)]
pub struct MergedSequence {
    pub own: BehaviorSequence,
    pub cross: BehaviorSequence,
    /// `(user_id, event index)` of every cross event, in rank order.
    pub cross_sources: Vec<(u32, usize)>,
}

impl MergedSequence {
    pub fn is_empty(&self) -> bool {
        self.own.is_empty() && self.cross.is_empty()
    }
}

fn query_key(tokens: &[String]) -> u64 {
    rng::derive_seed(0, &tokens.join(" "), &[])
}

/// Own events (latest `max_len`) plus up to `top_k` same-category events of
/// up to `pool_users` sampled other users, ranked by query similarity with
/// ties broken by `(user_id, event index)`.
pub fn build_merged_sequence(
    pool: &BehaviorPool,
    user: u32,
    query: &[String],
    category: u32,
    cfg: &MiningConfig,
    seed: u64,
) -> Result<MergedSequence> {
    if query.is_empty() {
        return Err(Error::Input("current query is empty".into()));
    }
    let mut own = BehaviorSequence::new(user, cfg.max_len);
    for e in pool.per_user.get(&user).into_iter().flatten() {
        own.push(e.event.clone());
    }
    let mut cross = BehaviorSequence::new(user, cfg.top_k.min(cfg.max_len));
    let mut cross_sources = Vec::new();
    if cfg.enabled && cfg.top_k > 0 {
        let candidates: Vec<u32> = pool
            .category_users
            .get(&category)
            .map(|us| us.iter().copied().filter(|&u| u != user).collect())
            .unwrap_or_default();
        let mut r: Rng = rng::keyed_stream(seed, "mining", &[user as u64, query_key(query)]);
        let mut sampled: Vec<u32> = candidates
            .choose_multiple(&mut r, cfg.pool_users.min(candidates.len()))
            .copied()
            .collect();
        sampled.sort_unstable();
        let mut scored: Vec<(f64, u32, usize)> = Vec::new();
        for u in sampled {
            for (i, e) in pool.per_user[&u].iter().enumerate() {
                if e.category == category {
                    scored.push((query_similarity(&e.event.query_text, query)?, u, i));
                }
            }
        }
        scored.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        for &(_, u, i) in scored.iter().take(cfg.top_k.min(cfg.max_len)) {
            cross.events.push(pool.per_user[&u][i].event.clone());
            cross_sources.push((u, i));
        }
    }
    Ok(MergedSequence {
        own,
        cross,
        cross_sources,
    })
}

/// Embedded behaviour sequences for a batch of requests. Keys are query
/// embeddings of past events, values their pair embeddings; segment `b`
/// covers rows `start..start+len` of the stacked keys.
pub struct ContextVars<'t> {
    /// `[batch × d]` current-query embeddings.
    pub query: Var<'t>,
    pub own_keys: Var<'t>,
    pub own_values: Var<'t>,
    pub own_segments: Vec<(usize, usize)>,
    pub cross_keys: Var<'t>,
    pub cross_values: Var<'t>,
    pub cross_segments: Vec<(usize, usize)>,
}

/// Per-request pooled preferences and gate weights.
pub struct PreferenceOut<'t> {
    pub r_user: Var<'t>,
    pub r_cate: Var<'t>,
    /// `[batch × 2]`, rows on the simplex.
    pub gate: Var<'t>,
}

/// Attention pooling at user and category level, a softmax gate read from
/// the user preference and two softplus experts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IncentiveHead {
    pub d: usize,
    pub hidden: usize,
}

impl IncentiveHead {
    pub fn new(d: usize, hidden: usize) -> Self {
        IncentiveHead { d, hidden }
    }

    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        let (d, h) = (self.d, self.hidden);
        let mut p = ParamStore::new();
        for side in ["user", "cate"] {
            p.init_xavier(&format!("pref.{side}.wq"), d, d, rng);
            p.init_xavier(&format!("pref.{side}.wk"), d, d, rng);
            p.init_normal(&format!("pref.{side}.default"), 1, d, 0.1, rng);
        }
        p.init_xavier("pref.gate.w", d, 2, rng);
        p.init_const("pref.gate.b", 1, 2, 0.0);
        for e in ["pos", "neg"] {
            p.init_xavier(&format!("pref.{e}.w1"), 3 * d, h, rng);
            p.init_const(&format!("pref.{e}.b1"), 1, h, 0.0);
            p.init_xavier(&format!("pref.{e}.w2"), h, 1, rng);
            p.init_const(&format!("pref.{e}.b2"), 1, 1, 0.0);
        }
        p
    }

    fn pool<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        side: &str,
        query: Var<'t>,
        keys: Var<'t>,
        values: Var<'t>,
        segments: &[(usize, usize)],
    ) -> Var<'t> {
        let q = query.matmul(params.var(tape, &format!("pref.{side}.wq")));
        let k = keys.matmul(params.var(tape, &format!("pref.{side}.wk")));
        let att = q.segment_attention(k, values, segments.to_vec(), 1.0 / (self.d as f64).sqrt());
        let empty = Tensor::column(
            segments
                .iter()
                .map(|&(_, len)| if len == 0 { 1.0 } else { 0.0 })
                .collect(),
        );
        if empty.data().iter().all(|&v| v == 0.0) {
            return att;
        }
        let fallback = tape
            .constant(empty)
            .matmul(params.var(tape, &format!("pref.{side}.default")));
        att.add(fallback)
    }

    pub fn preferences<'t>(&self, tape: &'t Tape, params: &ParamStore, ctx: &ContextVars<'t>) -> PreferenceOut<'t> {
        let r_user = self.pool(tape, params, "user", ctx.query, ctx.own_keys, ctx.own_values, &ctx.own_segments);
        let r_cate = self.pool(tape, params, "cate", ctx.query, ctx.cross_keys, ctx.cross_values, &ctx.cross_segments);
        let gate = r_user
            .matmul(params.var(tape, "pref.gate.w"))
            .add_row(params.var(tape, "pref.gate.b"))
            .softmax_rows();
        PreferenceOut { r_user, r_cate, gate }
    }

    fn expert<'t>(&self, tape: &'t Tape, params: &ParamStore, name: &str, x: Var<'t>) -> Var<'t> {
        let v = |s: &str| params.var(tape, &format!("pref.{name}.{s}"));
        x.matmul(v("w1")).add_row(v("b1")).relu().matmul(v("w2")).add_row(v("b2"))
    }

    /// Expert outputs `(f₊, f₋)` for stacked `[r_user, r_cate, r_cur]` rows;
    /// `f₊ = softplus(E₊) > 0` and `f₋ = -softplus(E₋) < 0`.
    pub fn experts<'t>(&self, tape: &'t Tape, params: &ParamStore, x: Var<'t>) -> (Var<'t>, Var<'t>) {
        let f_pos = self.expert(tape, params, "pos", x).softplus();
        let f_neg = self.expert(tape, params, "neg", x).softplus().neg();
        (f_pos, f_neg)
    }

    /// Expert inputs per sample. `request` maps each sample row of `r_cur`
    /// to its request row in `pref`.
    pub fn expert_inputs<'t>(&self, tape: &'t Tape, pref: &PreferenceOut<'t>, request: &[usize], r_cur: Var<'t>) -> Var<'t> {
        let ru = pref.r_user.gather_rows(request.to_vec());
        let rc = pref.r_cate.gather_rows(request.to_vec());
        tape.concat_cols(&[ru, rc, r_cur])
    }

    /// Incentive `τ = w₁·f₊ + w₂·f₋` per sample.
    pub fn tau<'t>(
        &self,
        tape: &'t Tape,
        params: &ParamStore,
        pref: &PreferenceOut<'t>,
        request: &[usize],
        r_cur: Var<'t>,
    ) -> Var<'t> {
        let g = pref.gate.gather_rows(request.to_vec());
        let (f_pos, f_neg) = self.experts(tape, params, self.expert_inputs(tape, pref, request, r_cur));
        g.slice_cols(0, 1).mul(f_pos).add(g.slice_cols(1, 1).mul(f_neg))
    }
}

/// `w1·softplus(e_pos) − w2·softplus(e_neg)`.
pub fn combine_tau(w1: f64, w2: f64, e_pos: f64, e_neg: f64) -> f64 {
    w1 * ops::softplus(e_pos) - w2 * ops::softplus(e_neg)
}
