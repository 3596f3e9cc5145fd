//! Ground-truth world: users, queries, items and the relevance oracle.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

/// Width of every sample's dense feature vector.
pub const DENSE_WIDTH: usize = 3;

/// Ground-truth click behaviour of an exposed impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClickModel {
    /// `sigmoid(bias + quality*q + attractiveness*a + (relevance + sensitivity*s)*(rsl-4))`
    Logistic {
        bias: f64,
        quality: f64,
        attractiveness: f64,
        relevance: f64,
        sensitivity: f64,
    },
    /// Every exposed impression clicks with this probability.
    Constant(f64),
}

impl Default for ClickModel {
    fn default() -> Self {
        ClickModel::Logistic {
            bias: -3.3,
            quality: 0.5,
            attractiveness: 0.8,
            relevance: 0.2,
            sensitivity: 1.2,
        }
    }
}

impl ClickModel {
    pub fn probability(&self, quality: f64, attractiveness: f64, rsl: u8, sensitivity: f64) -> f64 {
        match *self {
            ClickModel::Constant(p) => p,
            ClickModel::Logistic {
                bias,
                quality: wq,
                attractiveness: wa,
                relevance: wr,
                sensitivity: ws,
            } => {
                let slope = (wr + ws * sensitivity).max(0.0);
                crate::ops::sigmoid(bias + wq * quality + wa * attractiveness + slope * (rsl as f64 - 4.0))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    pub n_users: usize,
    pub n_items: usize,
    pub n_queries: usize,
    pub n_categories: usize,
    pub words_per_category: usize,
    pub generic_words: usize,
    /// Share of users with almost no search history.
    pub cold_user_fraction: f64,
    /// Spread of category-level relevance sensitivity (max minus min).
    pub category_sensitivity_gap: f64,
    /// Per-query deviation around the category sensitivity.
    pub query_sensitivity_spread: f64,
    /// Weight of the user's own sensitivity against the query's.
    pub user_sensitivity_weight: f64,
    /// Probability that a request is issued in one of the user's favourite categories.
    pub favourite_category_prob: f64,
    pub candidates_per_request: usize,
    /// Share of candidates drawn from items built around the request's query.
    pub matched_candidate_share: f64,
    /// Share of candidates drawn from the query's category.
    pub category_candidate_share: f64,
    /// How strongly latent attractiveness lets a weakly relevant item through the exposure gate.
    pub exposure_attractiveness: f64,
    /// Gate strictness used when logs are generated without an explicit value.
    pub default_strictness: f64,
    pub click: ClickModel,
}

impl Default for WorldConfig {
    fn default() -> Self {
        WorldConfig {
            n_users: 300,
            n_items: 600,
            n_queries: 60,
            n_categories: 6,
            words_per_category: 10,
            generic_words: 12,
            cold_user_fraction: 0.3,
            category_sensitivity_gap: 0.6,
            query_sensitivity_spread: 0.2,
            user_sensitivity_weight: 0.3,
            favourite_category_prob: 0.8,
            candidates_per_request: 20,
            matched_candidate_share: 0.3,
            category_candidate_share: 0.3,
            exposure_attractiveness: 1.0,
            default_strictness: 0.85,
            click: ClickModel::default(),
        }
    }
}

impl WorldConfig {
    /// The experiment world: many queries with little text overlap, so a
    /// cold user's own history says little about the query at hand, and
    /// click sensitivity to relevance that varies by query rather than by
    /// category.
    pub fn desk() -> Self {
        WorldConfig {
            n_items: 1800,
            n_queries: 600,
            words_per_category: 14,
            category_sensitivity_gap: 0.0,
            query_sensitivity_spread: 0.5,
            user_sensitivity_weight: 0.1,
            exposure_attractiveness: 0.5,
            click: ClickModel::Logistic {
                bias: -3.3,
                quality: 0.5,
                attractiveness: 0.8,
                relevance: -0.8,
                sensitivity: 2.4,
            },
            ..WorldConfig::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_categories == 0 {
            return Err(Error::Config("n_categories must be at least 1".into()));
        }
        if self.n_users == 0 || self.n_items == 0 || self.n_queries == 0 {
            return Err(Error::Config("world counts must be at least 1".into()));
        }
        if self.words_per_category < 3 {
            return Err(Error::Config("words_per_category must be at least 3".into()));
        }
        for (name, v) in [
            ("cold_user_fraction", self.cold_user_fraction),
            ("category_sensitivity_gap", self.category_sensitivity_gap),
            ("user_sensitivity_weight", self.user_sensitivity_weight),
            ("favourite_category_prob", self.favourite_category_prob),
            ("matched_candidate_share", self.matched_candidate_share),
            ("category_candidate_share", self.category_candidate_share),
            ("default_strictness", self.default_strictness),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{name} must lie in [0, 1]")));
            }
        }
        if self.matched_candidate_share + self.category_candidate_share > 1.0 {
            return Err(Error::Config("candidate shares must sum to at most 1".into()));
        }
        if self.candidates_per_request == 0 {
            return Err(Error::Config("candidates_per_request must be at least 1".into()));
        }
        if let ClickModel::Constant(p) = self.click {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config("constant click probability must lie in [0, 1]".into()));
            }
        }
        if self.query_sensitivity_spread < 0.0 {
            return Err(Error::Config("query_sensitivity_spread must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of distinct word tokens the world can emit.
    pub fn word_count(&self) -> usize {
        self.n_categories * self.words_per_category + self.generic_words
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct UserProfile {
    pub id: u32,
    /// Relevance sensitivity in `[0, 1]`.
    pub sensitivity: f64,
    /// Low-activity user (0 to 2 historical clicks).
    pub cold: bool,
    /// Categories the user mostly searches in.
    pub favourite_categories: Vec<u32>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QueryProfile {
    pub id: u32,
    pub category: u32,
    pub tokens: Vec<String>,
    /// Query-level relevance sensitivity in `[0, 1]`.
    pub sensitivity: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ItemProfile {
    pub id: u32,
    pub category: u32,
    pub tokens: Vec<String>,
    pub quality: f64,
    /// The query whose wording the item description was built around.
    pub source_query: u32,
    pub dense: [f64; DENSE_WIDTH],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub config: WorldConfig,
    pub users: Vec<UserProfile>,
    pub items: Vec<ItemProfile>,
    pub queries: Vec<QueryProfile>,
    pub categories: Vec<u32>,
    pub rng_seed: u64,
    /// Category-level sensitivity, indexed by category id.
    pub category_sensitivity: Vec<f64>,
}

pub fn word(i: usize) -> String {
    format!("w{i}")
}

fn category_word(cfg: &WorldConfig, cat: usize, j: usize) -> String {
    word(cat * cfg.words_per_category + j)
}

fn generic_word(cfg: &WorldConfig, j: usize) -> String {
    word(cfg.n_categories * cfg.words_per_category + j)
}

pub fn generate_world(config: &WorldConfig, seed: u64) -> Result<World> {
    config.validate()?;
    let cfg = config;
    let n_cat = cfg.n_categories;

    let category_sensitivity: Vec<f64> = (0..n_cat)
        .map(|c| {
            if n_cat == 1 {
                0.5
            } else {
                0.5 + cfg.category_sensitivity_gap * (c as f64 / (n_cat - 1) as f64 - 0.5)
            }
        })
        .collect();

    let mut r = rng::stream(seed, "world.queries");
    let queries: Vec<QueryProfile> = (0..cfg.n_queries)
        .map(|q| {
            let cat = q % n_cat;
            let len = r.random_range(2..=3usize);
            let mut pool: Vec<usize> = (0..cfg.words_per_category).collect();
            pool.shuffle(&mut r);
            let mut tokens: Vec<String> = pool[..len]
                .iter()
                .map(|&j| category_word(cfg, cat, j))
                .collect();
            tokens.sort();
            let noise: f64 = r.sample(StandardNormal);
            QueryProfile {
                id: q as u32,
                category: cat as u32,
                tokens,
                sensitivity: (category_sensitivity[cat] + cfg.query_sensitivity_spread * noise)
                    .clamp(0.0, 1.0),
            }
        })
        .collect();

    let by_category: Vec<Vec<usize>> = (0..n_cat)
        .map(|c| (0..queries.len()).filter(|&q| queries[q].category as usize == c).collect())
        .collect();

    let mut r = rng::stream(seed, "world.items");
    let items: Vec<ItemProfile> = (0..cfg.n_items)
        .map(|i| {
            // categories without queries cannot host items built around one
            let mut cat = r.random_range(0..n_cat);
            while by_category[cat].is_empty() {
                cat = r.random_range(0..n_cat);
            }
            let src = by_category[cat][r.random_range(0..by_category[cat].len())];
            let q = &queries[src];
            let mut set: BTreeSet<String> = BTreeSet::new();
            let keep_all = r.random_bool(0.5);
            let mut src_tokens = q.tokens.clone();
            src_tokens.shuffle(&mut r);
            let keep = if keep_all {
                src_tokens.len()
            } else {
                r.random_range(0..src_tokens.len())
            };
            set.extend(src_tokens.into_iter().take(keep));
            let extra = r.random_range(1..=3usize);
            let target = (keep + extra).min(cfg.words_per_category);
            while set.len() < target {
                set.insert(category_word(cfg, cat, r.random_range(0..cfg.words_per_category)));
            }
            if cfg.generic_words > 0 {
                set.insert(generic_word(cfg, r.random_range(0..cfg.generic_words)));
            }
            let mut tokens: Vec<String> = set.into_iter().collect();
            tokens.shuffle(&mut r);
            let quality: f64 = r.sample(StandardNormal);
            let n1: f64 = r.sample(StandardNormal);
            let n2: f64 = r.sample(StandardNormal);
            let n3: f64 = r.sample(StandardNormal);
            ItemProfile {
                id: i as u32,
                category: cat as u32,
                tokens,
                quality,
                source_query: src as u32,
                dense: [quality + 0.3 * n1, 0.5 * quality + n2, n3],
            }
        })
        .collect();

    let mut r = rng::stream(seed, "world.users");
    let users: Vec<UserProfile> = (0..cfg.n_users)
        .map(|u| {
            let mut cats: Vec<u32> = (0..n_cat as u32).collect();
            cats.shuffle(&mut r);
            cats.truncate(2.min(n_cat));
            UserProfile {
                id: u as u32,
                sensitivity: r.random_range(0.0..1.0),
                cold: r.random_bool(cfg.cold_user_fraction),
                favourite_categories: cats,
            }
        })
        .collect();

    Ok(World {
        config: cfg.clone(),
        users,
        items,
        queries,
        categories: (0..n_cat as u32).collect(),
        rng_seed: seed,
        category_sensitivity,
    })
}

/// Ground-truth relevance level in `1..=4`: irrelevant across categories,
/// otherwise graded by how much of the query wording the item covers.
pub fn relevance(query: &QueryProfile, item: &ItemProfile) -> u8 {
    relevance_of(query.category, &query.tokens, item.category, &item.tokens)
}

pub fn relevance_of(q_cat: u32, q_tokens: &[String], i_cat: u32, i_tokens: &[String]) -> u8 {
    if q_cat != i_cat {
        return 1;
    }
    let q: BTreeSet<&String> = q_tokens.iter().collect();
    let i: BTreeSet<&String> = i_tokens.iter().collect();
    let covered = q.intersection(&i).count() as f64 / q.len().max(1) as f64;
    if covered >= 1.0 {
        4
    } else if covered >= 0.5 {
        3
    } else {
        2
    }
}

impl World {
    /// Effective relevance sensitivity of `user` when issuing `query`.
    pub fn sensitivity(&self, user: u32, query: u32) -> f64 {
        let w = self.config.user_sensitivity_weight;
        let u = self.users[user as usize].sensitivity;
        let q = self.queries[query as usize].sensitivity;
        (w * u + (1.0 - w) * q).clamp(0.0, 1.0)
    }

    pub fn queries_in(&self, category: u32) -> impl Iterator<Item = &QueryProfile> {
        self.queries.iter().filter(move |q| q.category == category)
    }
}
