//! Synthetic search world, logging simulation and the dataset file format.

mod dataset;
mod sim;
mod world;

use serde::{Deserialize, Serialize};

pub use dataset::{config_hash, emit_dataset, load_dataset, DatasetHeader, DATASET_FIELDS, DATASET_VERSION};
pub use sim::{
    attractiveness, click_probability, exposure_probability, generate_logs, simulate_clicks,
    simulate_exposure, LogConfig, SearchLogs,
};
pub use world::{
    generate_world, relevance, relevance_of, word, ClickModel, ItemProfile, QueryProfile,
    UserProfile, World, WorldConfig, DENSE_WIDTH,
};

/// Behaviour sequences keep at most this many events.
pub const MAX_BEHAVIOR_LEN: usize = 25;

/// One (user, query, item) candidate impression.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSample {
    pub user_id: u32,
    pub query_id: u32,
    pub item_id: u32,
    /// Category of the query.
    pub category: u32,
    pub query_text: Vec<String>,
    pub item_text: Vec<String>,
    /// Relevance level: 1 irrelevant, 2 weak, 3 relevant, 4 strongly relevant.
    pub rsl: u8,
    pub exposed: bool,
    pub click: bool,
    pub dense: Vec<f64>,
}

/// A past search click.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorEvent {
    pub query_text: Vec<String>,
    pub item_text: Vec<String>,
    pub rsl: u8,
}

impl BehaviorEvent {
    pub fn from_sample(s: &SearchSample) -> Self {
        BehaviorEvent {
            query_text: s.query_text.clone(),
            item_text: s.item_text.clone(),
            rsl: s.rsl,
        }
    }
}

/// Ordered click history of one user, oldest first, capped at `max_length`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSequence {
    pub owner_user_id: u32,
    pub events: Vec<BehaviorEvent>,
    pub max_length: usize,
}

impl BehaviorSequence {
    pub fn new(owner_user_id: u32, max_length: usize) -> Self {
        BehaviorSequence {
            owner_user_id,
            events: Vec::new(),
            max_length,
        }
    }

    /// Appends an event, dropping the oldest one when full.
    pub fn push(&mut self, e: BehaviorEvent) {
        if self.max_length == 0 {
            return;
        }
        if self.events.len() == self.max_length {
            self.events.remove(0);
        }
        self.events.push(e);
    }

    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }
}

/// Splits canonically ordered samples into requests: maximal runs sharing
/// `(user_id, query_id)`. Returns half-open index ranges.
pub fn request_spans(samples: &[SearchSample]) -> Vec<std::ops::Range<usize>> {
    let mut spans = Vec::new();
    let mut start = 0;
    for i in 1..=samples.len() {
        if i == samples.len()
            || samples[i].user_id != samples[start].user_id
            || samples[i].query_id != samples[start].query_id
        {
            if i > start {
                spans.push(start..i);
            }
            start = i;
        }
    }
    spans
}
