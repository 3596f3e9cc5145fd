//! Request simulation: candidate generation, relevance-gated exposure and clicks.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::world::{relevance, World};
use super::SearchSample;
use crate::error::{Error, Result};
use crate::rng::{self, Rng};

/// Latent appeal of an item for a query. Never written to logs; it drives both
/// the exposure gate and the click model, which is what makes the exposed
/// sample unrepresentative of the candidate space.
pub fn attractiveness(world: &World, query: u32, item: u32) -> f64 {
    let h1 = rng::derive_seed(world.rng_seed, "attractiveness", &[query as u64, item as u64]);
    let h2 = rng::mix64(h1);
    let u1 = ((h1 >> 11) as f64 + 0.5) / (1u64 << 53) as f64;
    let u2 = (h2 >> 11) as f64 / (1u64 << 53) as f64;
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Probability that the platform shows a candidate.
///
/// Strictly relevant candidates always pass; every step below strongly
/// relevant multiplies the pass rate by `1 - strictness`, softened for
/// attractive items.
pub fn exposure_probability(rsl: u8, strictness: f64, attractiveness_weight: f64, attractiveness: f64) -> f64 {
    let steps = (4 - rsl.clamp(1, 4)) as f64;
    let open = (1.0 - strictness).clamp(0.0, 1.0);
    open.powf(steps * (-attractiveness_weight * attractiveness).exp())
}

/// Click probability of `sample` if it were exposed.
pub fn click_probability(world: &World, sample: &SearchSample) -> f64 {
    let item = &world.items[sample.item_id as usize];
    world.config.click.probability(
        item.quality,
        attractiveness(world, sample.query_id, sample.item_id),
        sample.rsl,
        world.sensitivity(sample.user_id, sample.query_id),
    )
}

struct Catalog {
    by_source: Vec<Vec<u32>>,
    by_category: Vec<Vec<u32>>,
    queries_by_category: Vec<Vec<u32>>,
}

impl Catalog {
    fn new(world: &World) -> Self {
        let n_cat = world.categories.len();
        let mut by_source = vec![Vec::new(); world.queries.len()];
        let mut by_category = vec![Vec::new(); n_cat];
        for it in &world.items {
            by_source[it.source_query as usize].push(it.id);
            by_category[it.category as usize].push(it.id);
        }
        let mut queries_by_category = vec![Vec::new(); n_cat];
        for q in &world.queries {
            queries_by_category[q.category as usize].push(q.id);
        }
        Catalog {
            by_source,
            by_category,
            queries_by_category,
        }
    }
}

fn pick_query(world: &World, cat: &Catalog, user: u32, r: &mut Rng) -> u32 {
    let u = &world.users[user as usize];
    let n_cat = world.categories.len();
    let c = if !u.favourite_categories.is_empty() && r.random_bool(world.config.favourite_category_prob) {
        u.favourite_categories[r.random_range(0..u.favourite_categories.len())] as usize
    } else {
        r.random_range(0..n_cat)
    };
    let pool = &cat.queries_by_category[c];
    if pool.is_empty() {
        r.random_range(0..world.queries.len()) as u32
    } else {
        pool[r.random_range(0..pool.len())]
    }
}

fn pick_candidates(world: &World, cat: &Catalog, query: u32, r: &mut Rng) -> Vec<u32> {
    let cfg = &world.config;
    let n_items = world.items.len();
    let k = cfg.candidates_per_request.min(n_items);
    let n_matched = (k as f64 * cfg.matched_candidate_share).round() as usize;
    let n_same = ((k as f64 * cfg.category_candidate_share).round() as usize).min(k - n_matched.min(k));
    let q_cat = world.queries[query as usize].category as usize;
    let mut chosen: BTreeSet<u32> = BTreeSet::new();
    let mut out = Vec::with_capacity(k);
    let draw = |pool: &[u32], r: &mut Rng, chosen: &mut BTreeSet<u32>, out: &mut Vec<u32>| {
        if !pool.is_empty() {
            for _ in 0..8 {
                let it = pool[r.random_range(0..pool.len())];
                if chosen.insert(it) {
                    out.push(it);
                    return;
                }
            }
        }
        let start = r.random_range(0..n_items);
        for off in 0..n_items {
            let it = ((start + off) % n_items) as u32;
            if chosen.insert(it) {
                out.push(it);
                return;
            }
        }
    };
    let all: Vec<u32> = Vec::new();
    for slot in 0..k {
        let pool: &[u32] = if slot < n_matched {
            &cat.by_source[query as usize]
        } else if slot < n_matched + n_same {
            &cat.by_category[q_cat]
        } else {
            &all
        };
        draw(pool, r, &mut chosen, &mut out);
    }
    out.shuffle(r);
    out
}

fn make_sample(world: &World, user: u32, query: u32, item: u32, exposed: bool) -> SearchSample {
    let q = &world.queries[query as usize];
    let it = &world.items[item as usize];
    SearchSample {
        user_id: user,
        query_id: query,
        item_id: item,
        category: q.category,
        query_text: q.tokens.clone(),
        item_text: it.tokens.clone(),
        rsl: relevance(q, it),
        exposed,
        click: false,
        dense: it.dense.to_vec(),
    }
}

fn simulate_request(world: &World, cat: &Catalog, user: u32, strictness: f64, r: &mut Rng) -> Vec<SearchSample> {
    let query = pick_query(world, cat, user, r);
    let gamma = world.config.exposure_attractiveness;
    pick_candidates(world, cat, query, r)
        .into_iter()
        .map(|item| {
            let mut s = make_sample(world, user, query, item, false);
            let p = exposure_probability(s.rsl, strictness, gamma, attractiveness(world, query, item));
            s.exposed = r.random::<f64>() < p;
            s
        })
        .collect()
}

fn check_strictness(strictness: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&strictness) {
        return Err(Error::Config(format!("exposure strictness {strictness} outside [0, 1]")));
    }
    Ok(())
}

/// Simulates `n` candidate impressions, exposed and unexposed, with
/// `click = false` everywhere. Requests are dealt round-robin over users and
/// the output is ordered by user, then request.
pub fn simulate_exposure(world: &World, strictness: f64, n: usize, seed: u64) -> Result<Vec<SearchSample>> {
    check_strictness(strictness)?;
    if n == 0 {
        return Err(Error::Input("simulate_exposure needs n >= 1".into()));
    }
    let cat = Catalog::new(world);
    let n_users = world.users.len();
    let per_request = world.config.candidates_per_request.min(world.items.len());
    let n_requests = n.div_ceil(per_request);
    let mut per_user: Vec<Vec<SearchSample>> = vec![Vec::new(); n_users];
    for k in 0..n_requests {
        let user = k % n_users;
        let mut r = rng::keyed_stream(seed, "exposure", &[user as u64, (k / n_users) as u64]);
        per_user[user].extend(simulate_request(world, &cat, user as u32, strictness, &mut r));
    }
    // the last request may be cut short so exactly n samples come back
    let mut taken = 0usize;
    let mut budget = vec![0usize; n_users];
    for k in 0..n_requests {
        let want = per_request.min(n - taken);
        budget[k % n_users] += want;
        taken += want;
    }
    Ok(per_user
        .into_iter()
        .zip(budget)
        .flat_map(|(v, b)| v.into_iter().take(b))
        .collect())
}

/// Draws click labels for exposed samples; unexposed samples stay unclicked.
pub fn simulate_clicks(world: &World, mut samples: Vec<SearchSample>, seed: u64) -> Vec<SearchSample> {
    let mut r = rng::stream(seed, "clicks");
    for s in samples.iter_mut() {
        s.click = s.exposed && r.random::<f64>() < click_probability(world, s);
    }
    samples
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogConfig {
    /// Requests per user before the training window; only clicks are kept.
    pub history_requests: usize,
    pub train_requests: usize,
    pub test_requests: usize,
    /// Multiplier on the training activity of cold users.
    pub cold_train_activity: f64,
    /// Exposure gate strictness; `None` uses the world default.
    pub strictness: Option<f64>,
}

impl Default for LogConfig {
    fn default() -> Self {
        LogConfig {
            history_requests: 30,
            train_requests: 8,
            test_requests: 3,
            cold_train_activity: 0.5,
            strictness: None,
        }
    }
}

impl LogConfig {
    /// Logging volumes used with [`WorldConfig::desk`].
    pub fn desk() -> Self {
        LogConfig {
            history_requests: 150,
            test_requests: 6,
            ..LogConfig::default()
        }
    }
}

/// A simulated logging period split into the behaviour history, a training
/// window (exposed impressions only) and a test window (every candidate).
#[derive(Clone, Debug, PartialEq)]
pub struct SearchLogs {
    pub history: Vec<SearchSample>,
    pub train: Vec<SearchSample>,
    pub test: Vec<SearchSample>,
}

fn user_requests(
    world: &World,
    cat: &Catalog,
    user: u32,
    n: usize,
    strictness: f64,
    phase: &str,
    seed: u64,
) -> Vec<SearchSample> {
    let mut r = rng::keyed_stream(seed, phase, &[user as u64]);
    let mut out = Vec::new();
    for _ in 0..n {
        let mut req = simulate_request(world, cat, user, strictness, &mut r);
        for s in req.iter_mut() {
            s.click = s.exposed && r.random::<f64>() < click_probability(world, s);
        }
        out.extend(req);
    }
    out
}

pub fn generate_logs(world: &World, cfg: &LogConfig, seed: u64) -> Result<SearchLogs> {
    let strictness = cfg.strictness.unwrap_or(world.config.default_strictness);
    check_strictness(strictness)?;
    if !(0.0..=1.0).contains(&cfg.cold_train_activity) {
        return Err(Error::Config("cold_train_activity must lie in [0, 1]".into()));
    }
    let cat = Catalog::new(world);
    let mut logs = SearchLogs {
        history: Vec::new(),
        train: Vec::new(),
        test: Vec::new(),
    };
    for u in &world.users {
        let mut clicks: Vec<SearchSample> =
            user_requests(world, &cat, u.id, cfg.history_requests, strictness, "history", seed)
                .into_iter()
                .filter(|s| s.click)
                .collect();
        if u.cold {
            let mut r = rng::keyed_stream(seed, "cold", &[u.id as u64]);
            clicks.truncate(r.random_range(0..=2usize));
        }
        logs.history.extend(clicks);

        let n_train = if u.cold {
            (cfg.train_requests as f64 * cfg.cold_train_activity).round() as usize
        } else {
            cfg.train_requests
        };
        logs.train.extend(
            user_requests(world, &cat, u.id, n_train, strictness, "train", seed)
                .into_iter()
                .filter(|s| s.exposed),
        );
        logs.test
            .extend(user_requests(world, &cat, u.id, cfg.test_requests, strictness, "test", seed));
    }
    Ok(logs)
}
