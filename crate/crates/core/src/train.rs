//! Training loop, offline evaluation and experiment orchestration.

use std::collections::BTreeMap;
use std::ops::Range;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::config;
use crate::ctr::{prediction_row, CtrConfig, EmbeddingCache, ModelVariant, Prediction, RankModel, RequestSpec, RowSpec, TextEncoder};
use crate::data::{
    generate_logs, generate_world, request_spans, LogConfig, SearchLogs, SearchSample, World, WorldConfig,
    DENSE_WIDTH,
};
use crate::debias::{DebiasConfig, PairwiseMode};
use crate::encoder::{
    pretrain, round_to_storage, sample_relevance_pairs, train_teacher, Encoder, EncoderConfig, EncoderParams,
    PretrainConfig, PretrainReport, SftHead, Vocab,
};
use crate::error::{Error, Result};
use crate::metrics;
use crate::nn::{Optimizer, ParamStore};
use crate::preference::{build_merged_sequence, BehaviorPool, MergedSequence, MiningConfig};
use crate::rng;
use crate::tape::Tape;

pub const ENCODER_PREFIX: &str = "encoder.";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    /// Rows per step; whole requests are packed until the count is reached.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub epochs: usize,
    /// Learning-rate multiplier for encoder weights; 0 keeps the encoder frozen.
    pub encoder_lr_scale: f64,
}

impl Default for TrainConfig {
    /// Production-scale settings: batches of 4096 and plain SGD at 1e-4.
    fn default() -> Self {
        TrainConfig {
            batch_size: 4096,
            learning_rate: 1e-4,
            momentum: 0.0,
            epochs: 1,
            encoder_lr_scale: 0.0,
        }
    }
}

impl TrainConfig {
    /// Settings that converge on the default synthetic world in seconds.
    pub fn desk() -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 0.05,
            momentum: 0.9,
            epochs: 8,
            encoder_lr_scale: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 2 {
            return Err(Error::Config("train.batch_size must be at least 2".into()));
        }
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("train.learning_rate must be finite and >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("train.momentum must lie in [0, 1)".into()));
        }
        if !(self.encoder_lr_scale >= 0.0) {
            return Err(Error::Config("train.encoder_lr_scale must be >= 0".into()));
        }
        Ok(())
    }
}

/// How the text encoder is obtained before ranking training.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainSetup {
    /// `false` leaves the encoder at its random initialisation.
    pub enabled: bool,
    pub pairs: usize,
    /// Exposure strictness used when sampling labelled pairs.
    pub strictness: f64,
    pub balanced: bool,
    pub teacher_d_model: usize,
    pub teacher_d_ff: usize,
    #[serde(flatten)]
    pub optim: PretrainConfig,
}

impl Default for PretrainSetup {
    fn default() -> Self {
        PretrainSetup {
            enabled: true,
            pairs: 5000,
            strictness: 0.0,
            balanced: true,
            teacher_d_model: 32,
            teacher_d_ff: 64,
            optim: PretrainConfig {
                epochs: 4,
                ..PretrainConfig::default()
            },
        }
    }
}

/// Everything one experiment needs. Every leaf is a config-file key.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub world: WorldConfig,
    pub logs: LogConfig,
    /// `vocab_size = 0` sizes the vocabulary from the world.
    pub encoder: EncoderConfig,
    pub pretrain: PretrainSetup,
    pub model: CtrConfig,
    pub debias: DebiasConfig,
    pub mining: MiningConfig,
    pub train: TrainConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 1,
            world: WorldConfig::desk(),
            logs: LogConfig::desk(),
            encoder: EncoderConfig {
                vocab_size: 0,
                ..EncoderConfig::default()
            },
            pretrain: PretrainSetup::default(),
            model: CtrConfig::default(),
            debias: DebiasConfig::default(),
            mining: MiningConfig::default(),
            train: TrainConfig::desk(),
        }
    }
}

impl ExperimentConfig {
    /// Defaults overridden by a flat config file.
    pub fn load(path: &std::path::Path) -> Result<Self> {
        let cfg: ExperimentConfig = config::load(&ExperimentConfig::default(), path)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.world.validate()?;
        self.encoder_config()?.validate()?;
        self.pretrain.optim.validate()?;
        self.model.validate()?;
        if self.debias.enabled {
            self.debias.validate()?;
        }
        self.train.validate()?;
        if self.mining.max_len == 0 {
            return Err(Error::Config("mining.max_len must be positive".into()));
        }
        Ok(())
    }

    pub fn hash(&self) -> String {
        config::hash(self)
    }

    pub fn vocab(&self) -> Vocab {
        Vocab::synthetic(self.world.word_count())
    }

    pub fn encoder_config(&self) -> Result<EncoderConfig> {
        let n = self.vocab().len();
        let mut c = self.encoder.clone();
        if c.vocab_size == 0 {
            c.vocab_size = n;
        } else if c.vocab_size < n {
            return Err(Error::Config(format!("encoder.vocab_size {} is below the world's {n} tokens", c.vocab_size)));
        }
        Ok(c)
    }

    pub fn text_encoder(&self) -> Result<TextEncoder> {
        Ok(TextEncoder {
            encoder: Encoder::new(self.encoder_config()?, ENCODER_PREFIX)?,
            vocab: self.vocab(),
        })
    }

    /// The ranking model with table sizes taken from the world.
    pub fn rank_model(&self) -> Result<RankModel> {
        let model = CtrConfig {
            n_users: self.world.n_users,
            n_items: self.world.n_items,
            n_categories: self.world.n_categories,
            dense_width: DENSE_WIDTH,
            ..self.model.clone()
        };
        RankModel::new(model, self.text_encoder()?)
    }

    /// The debias settings actually in force for training.
    pub fn active_debias(&self) -> Option<&DebiasConfig> {
        Some(&self.debias).filter(|d| d.enabled && self.model.variant == ModelVariant::Full)
    }
}

pub fn generate_data(cfg: &ExperimentConfig) -> Result<(World, SearchLogs)> {
    let world = generate_world(&cfg.world, cfg.seed)?;
    let logs = generate_logs(&world, &cfg.logs, cfg.seed)?;
    Ok((world, logs))
}

/// Encoder weights (names under [`ENCODER_PREFIX`]) and, when pretrained,
/// the per-epoch report.
pub fn prepare_encoder(cfg: &ExperimentConfig, world: &World) -> Result<(ParamStore, Option<PretrainReport>)> {
    let ec = cfg.encoder_config()?;
    let mut r = rng::stream(cfg.seed, "encoder.init");
    let student = EncoderParams::init(ec.clone(), ENCODER_PREFIX, &mut r)?;
    if !cfg.pretrain.enabled {
        let mut params = student.params;
        round_to_storage(&mut params);
        return Ok((params, None));
    }
    let p = &cfg.pretrain;
    let pairs = sample_relevance_pairs(world, p.pairs, p.strictness, p.balanced, cfg.seed)?;
    let vocab = cfg.vocab();
    let teacher_cfg = EncoderConfig {
        d_model: p.teacher_d_model,
        d_ff: p.teacher_d_ff,
        ..ec.clone()
    };
    let teacher = train_teacher(teacher_cfg, ec.d_model, &vocab, &pairs, &p.optim, cfg.seed)?;
    let head = SftHead::init(ec.d_model, &mut r);
    let out = pretrain(student, head, &vocab, &pairs, &teacher, &p.optim, cfg.seed)?;
    Ok((out.student.params, Some(out.report)))
}

/// One logged request: its rows in the sample list and merged sequence.
#[derive(Clone, Debug)]
pub struct Request {
    pub rows: Range<usize>,
    pub seq: MergedSequence,
    /// Own click events in the behaviour pool.
    pub own_events: usize,
}

pub fn build_requests(samples: &[SearchSample], pool: &BehaviorPool, mining: &MiningConfig, seed: u64) -> Result<Vec<Request>> {
    request_spans(samples)
        .into_iter()
        .map(|rows| {
            let s = &samples[rows.start];
            let seq = build_merged_sequence(pool, s.user_id, &s.query_text, s.category, mining, seed)?;
            Ok(Request {
                rows,
                seq,
                own_events: pool.own_event_count(s.user_id),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub steps: usize,
    pub mean_loss: f64,
    pub mean_bce: f64,
    /// Steps whose debias term was switched off by the truncation rule.
    pub truncated_steps: usize,
}

fn frozen(cfg: &ExperimentConfig) -> bool {
    cfg.train.encoder_lr_scale == 0.0
}

/// SGD over shuffled batches of whole requests. `params` holds the encoder
/// and ranking weights; the result is rounded to checkpoint precision.
pub fn train_model(
    cfg: &ExperimentConfig,
    model: &RankModel,
    mut params: ParamStore,
    samples: &[SearchSample],
    requests: &[Request],
    cache: &mut EmbeddingCache,
) -> Result<(ParamStore, Vec<EpochLog>)> {
    let tc = &cfg.train;
    let debias = cfg.active_debias();
    let freeze = frozen(cfg);
    let mut opt = Optimizer::sgd(tc.learning_rate, tc.momentum);
    let lr_scale = |name: &str| {
        if name.starts_with(ENCODER_PREFIX) {
            tc.encoder_lr_scale
        } else {
            1.0
        }
    };
    let mut logs = Vec::with_capacity(tc.epochs);
    for epoch in 0..tc.epochs {
        let mut order: Vec<usize> = (0..requests.len()).collect();
        order.shuffle(&mut rng::keyed_stream(cfg.seed, "train.shuffle", &[epoch as u64]));
        let mut batches: Vec<Vec<usize>> = Vec::new();
        let mut cur = Vec::new();
        let mut rows = 0;
        for i in order {
            rows += requests[i].rows.len();
            cur.push(i);
            if rows >= tc.batch_size {
                batches.push(std::mem::take(&mut cur));
                rows = 0;
            }
        }
        if !cur.is_empty() {
            batches.push(cur);
        }
        let mut log = EpochLog {
            epoch,
            steps: 0,
            mean_loss: 0.0,
            mean_bce: 0.0,
            truncated_steps: 0,
        };
        for (b, batch) in batches.iter().enumerate() {
            let reqs: Vec<(&[SearchSample], &MergedSequence)> = batch
                .iter()
                .map(|&i| (&samples[requests[i].rows.clone()], &requests[i].seq))
                .collect();
            let mut r = rng::keyed_stream(cfg.seed, "train.debias", &[epoch as u64, b as u64]);
            let (fb, targets) = model.training_batch(&reqs, debias, &mut r)?;
            let tape = Tape::new();
            let fwd = model.forward(&tape, &params, &fb, if freeze { Some(&mut *cache) } else { None })?;
            let parts = model.main_loss(&fwd, &targets, debias)?;
            let loss = parts.total.item();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!("epoch {epoch} step {b}: loss {loss}")));
            }
            if debias.is_some_and(|d| d.mode == PairwiseMode::Refined) && !targets.pairs.is_empty() {
                if parts.debias.is_some_and(|v| v.item() == 0.0) {
                    log.truncated_steps += 1;
                }
            }
            log.mean_loss += loss;
            log.mean_bce += parts.bce.item();
            log.steps += 1;
            let grads = tape.backward(parts.total)?;
            opt.apply(&mut params, &grads, lr_scale);
        }
        if !params.is_finite() {
            return Err(Error::Divergence(format!("non-finite weights after epoch {epoch}")));
        }
        if log.steps > 0 {
            log.mean_loss /= log.steps as f64;
            log.mean_bce /= log.steps as f64;
        }
        log::info!(
            "epoch {epoch}: loss {:.5} bce {:.5} ({} steps, {} truncated)",
            log.mean_loss,
            log.mean_bce,
            log.steps,
            log.truncated_steps
        );
        logs.push(log);
    }
    round_to_storage(&mut params);
    Ok((params, logs))
}

/// Predictions for every sample, in sample order.
pub fn score_samples(
    model: &RankModel,
    params: &ParamStore,
    samples: &[SearchSample],
    requests: &[Request],
    mut cache: Option<&mut EmbeddingCache>,
) -> Result<Vec<Prediction>> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in requests.chunks(64) {
        let specs: Vec<RequestSpec> = chunk
            .iter()
            .map(|r| RequestSpec {
                query: &samples[r.rows.start].query_text,
                seq: &r.seq,
            })
            .collect();
        let rows: Vec<RowSpec> = chunk
            .iter()
            .enumerate()
            .flat_map(|(k, r)| samples[r.rows.clone()].iter().map(move |s| RowSpec::real(s, k)))
            .collect();
        let fb = model.build_batch(&specs, &rows)?;
        let tape = Tape::new();
        let fwd = model.forward(&tape, params, &fb, cache.as_deref_mut())?;
        out.extend((0..rows.len()).map(|r| prediction_row(&fwd, r)));
    }
    Ok(out)
}

/// Metrics over one subset of the test rows. `None` marks a metric that is
/// undefined on the subset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SliceMetrics {
    pub samples: usize,
    pub clicks: usize,
    /// On the click probability.
    pub auc: Option<f64>,
    pub gauc: Option<f64>,
    /// On the final ranking score.
    pub rank_auc: Option<f64>,
    pub rank_gauc: Option<f64>,
    pub pcoc: Option<f64>,
}

/// Canonical evaluation record. Top-level ranking metrics are measured on
/// exposed test impressions; `slices` adds the full candidate space and the
/// cold-start and active user groups.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub auc: f64,
    pub gauc: f64,
    /// Set when the report is compared against a base model.
    pub relaimpr_vs_base: Option<f64>,
    pub pcoc: f64,
    /// `|pcoc - 1|`
    pub pcoc_deviation: f64,
    pub irrelevant_rate_at_10: f64,
    pub slices: BTreeMap<String, SliceMetrics>,
    pub config_hash: String,
    pub seed: u64,
}

impl MetricsReport {
    /// Pretty JSON with sorted keys and a trailing newline.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serialises");
        let mut s = serde_json::to_string_pretty(&value).expect("value serialises");
        s.push('\n');
        s
    }

    pub fn slice(&self, name: &str) -> &SliceMetrics {
        &self.slices[name]
    }
}

fn defined(r: Result<f64>) -> Result<Option<f64>> {
    match r {
        Ok(v) => Ok(Some(v)),
        Err(Error::UndefinedMetric(_)) => Ok(None),
        Err(e) => Err(e),
    }
}

fn slice_metrics(samples: &[SearchSample], preds: &[Prediction], rows: &[usize]) -> Result<SliceMetrics> {
    let y: Vec<bool> = rows.iter().map(|&i| samples[i].click).collect();
    let p: Vec<f64> = rows.iter().map(|&i| preds[i].p_click).collect();
    let s: Vec<f64> = rows.iter().map(|&i| preds[i].rank_score).collect();
    let u: Vec<u32> = rows.iter().map(|&i| samples[i].user_id).collect();
    Ok(SliceMetrics {
        samples: rows.len(),
        clicks: y.iter().filter(|&&v| v).count(),
        auc: defined(metrics::auc(&p, &y))?,
        gauc: defined(metrics::gauc(&p, &y, &u))?,
        rank_auc: defined(metrics::auc(&s, &y))?,
        rank_gauc: defined(metrics::gauc(&s, &y, &u))?,
        pcoc: defined(metrics::pcoc(&p, &y))?,
    })
}

fn required(v: Option<f64>, what: &str) -> Result<f64> {
    v.ok_or_else(|| Error::UndefinedMetric(format!("{what} is undefined on the test set")))
}

pub fn evaluate(
    cfg: &ExperimentConfig,
    samples: &[SearchSample],
    requests: &[Request],
    preds: &[Prediction],
) -> Result<MetricsReport> {
    let cold_of: Vec<bool> = {
        let mut v = vec![false; samples.len()];
        for r in requests {
            for i in r.rows.clone() {
                v[i] = r.own_events < cfg.mining.cold_threshold;
            }
        }
        v
    };
    let all: Vec<usize> = (0..samples.len()).collect();
    let exposed: Vec<usize> = all.iter().copied().filter(|&i| samples[i].exposed).collect();
    let mut slices = BTreeMap::new();
    slices.insert("full".to_string(), slice_metrics(samples, preds, &all)?);
    slices.insert("exposed".to_string(), slice_metrics(samples, preds, &exposed)?);
    for (name, want) in [("cold", true), ("active", false)] {
        let rows: Vec<usize> = exposed.iter().copied().filter(|&i| cold_of[i] == want).collect();
        slices.insert(name.to_string(), slice_metrics(samples, preds, &rows)?);
        let rows: Vec<usize> = all.iter().copied().filter(|&i| cold_of[i] == want).collect();
        slices.insert(format!("{name}_full"), slice_metrics(samples, preds, &rows)?);
    }
    let lists: Vec<Vec<u8>> = requests
        .iter()
        .map(|r| {
            let mut idx: Vec<usize> = r.rows.clone().collect();
            idx.sort_by(|&a, &b| {
                preds[b]
                    .rank_score
                    .total_cmp(&preds[a].rank_score)
                    .then(samples[a].item_id.cmp(&samples[b].item_id))
            });
            idx.into_iter().map(|i| samples[i].rsl).collect()
        })
        .collect();
    let ex = &slices["exposed"];
    let pcoc = required(ex.pcoc, "PCOC")?;
    Ok(MetricsReport {
        auc: required(ex.auc, "AUC")?,
        gauc: required(ex.gauc, "GAUC")?,
        relaimpr_vs_base: None,
        pcoc,
        pcoc_deviation: (pcoc - 1.0).abs(),
        irrelevant_rate_at_10: metrics::irrelevant_rate_at_10(&lists)?,
        slices,
        config_hash: cfg.hash(),
        seed: cfg.seed,
    })
}

/// A trained model together with what produced it.
pub struct TrainedModel {
    pub model: RankModel,
    pub params: ParamStore,
    pub epochs: Vec<EpochLog>,
}

/// Initial ranking weights joined with the given encoder weights.
pub fn init_params(cfg: &ExperimentConfig, model: &RankModel, encoder: &ParamStore) -> ParamStore {
    let mut params = encoder.clone();
    params.extend(model.init(&mut rng::stream(cfg.seed, "model.init")));
    round_to_storage(&mut params);
    params
}

/// Trains on `logs.train` with the behaviour pool from `logs.history`.
pub fn fit(cfg: &ExperimentConfig, history: &[SearchSample], train: &[SearchSample], encoder: &ParamStore) -> Result<TrainedModel> {
    cfg.validate()?;
    let model = cfg.rank_model()?;
    let pool = BehaviorPool::new(history);
    let requests = build_requests(train, &pool, &cfg.mining, cfg.seed)?;
    let mut cache = EmbeddingCache::new();
    let params = init_params(cfg, &model, encoder);
    let (params, epochs) = train_model(cfg, &model, params, train, &requests, &mut cache)?;
    Ok(TrainedModel { model, params, epochs })
}

/// Scores `test` and computes the report.
pub fn assess(cfg: &ExperimentConfig, model: &RankModel, params: &ParamStore, history: &[SearchSample], test: &[SearchSample]) -> Result<MetricsReport> {
    let pool = BehaviorPool::new(history);
    let requests = build_requests(test, &pool, &cfg.mining, cfg.seed)?;
    let mut cache = EmbeddingCache::new();
    let preds = score_samples(model, params, test, &requests, Some(&mut cache))?;
    evaluate(cfg, test, &requests, &preds)
}

/// Data, encoder, training and evaluation for one configuration.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let (world, logs) = generate_data(cfg)?;
    let (encoder, _) = prepare_encoder(cfg, &world)?;
    let trained = fit(cfg, &logs.history, &logs.train, &encoder)?;
    assess(cfg, &trained.model, &trained.params, &logs.history, &logs.test)
}

/// Named configuration variants compared by [`ablate`].
pub fn ablation_variants(cfg: &ExperimentConfig) -> Vec<(String, ExperimentConfig)> {
    let mut out = vec![("full".to_string(), cfg.clone())];
    let mut v = cfg.clone();
    v.mining.enabled = false;
    out.push(("no_mining".into(), v));
    let mut v = cfg.clone();
    v.debias.enabled = false;
    out.push(("no_debias".into(), v));
    let mut v = cfg.clone();
    v.pretrain.enabled = false;
    out.push(("no_encoder_pretrain".into(), v));
    let mut v = cfg.clone();
    v.debias.mode = PairwiseMode::Naive;
    out.push(("naive_debias".into(), v));
    let mut v = cfg.clone();
    v.model.variant = ModelVariant::Plain;
    v.debias.enabled = false;
    v.mining.enabled = false;
    out.push(("base".into(), v));
    out
}

/// Scalar metrics compared across ablation variants. Dotted names address
/// a slice field (`cold.rank_gauc`).
pub const ABLATION_METRICS: &[&str] = &[
    "auc",
    "gauc",
    "pcoc_deviation",
    "irrelevant_rate_at_10",
    "full.auc",
    "full.rank_auc",
    "cold.gauc",
    "cold.rank_gauc",
    "active.rank_gauc",
];

pub fn metric_value(r: &MetricsReport, name: &str) -> Option<f64> {
    if let Some((slice, field)) = name.split_once('.') {
        let s = r.slices.get(slice)?;
        return match field {
            "auc" => s.auc,
            "gauc" => s.gauc,
            "rank_auc" => s.rank_auc,
            "rank_gauc" => s.rank_gauc,
            "pcoc" => s.pcoc,
            _ => None,
        };
    }
    match name {
        "auc" => Some(r.auc),
        "gauc" => Some(r.gauc),
        "pcoc" => Some(r.pcoc),
        "pcoc_deviation" => Some(r.pcoc_deviation),
        "irrelevant_rate_at_10" => Some(r.irrelevant_rate_at_10),
        _ => None,
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    let mut v: Vec<f64> = values.iter().copied().filter(|x| !x.is_nan()).collect();
    if v.is_empty() {
        return None;
    }
    v.sort_by(f64::total_cmp);
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { 0.5 * (v[n / 2 - 1] + v[n / 2]) })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Delta {
    pub per_seed: Vec<Option<f64>>,
    pub median: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub seeds: Vec<u64>,
    /// variant -> one report per seed; `relaimpr_vs_base` is filled in.
    pub reports: BTreeMap<String, Vec<MetricsReport>>,
    /// variant -> metric -> (variant - full)
    pub delta_vs_full: BTreeMap<String, BTreeMap<String, Delta>>,
    /// variant -> metric -> (variant - base)
    pub delta_vs_base: BTreeMap<String, BTreeMap<String, Delta>>,
}

impl AblationReport {
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("report serialises");
        let mut s = serde_json::to_string_pretty(&value).expect("value serialises");
        s.push('\n');
        s
    }

    /// Per-seed values of `metric` for `variant`.
    pub fn values(&self, variant: &str, metric: &str) -> Vec<Option<f64>> {
        self.reports[variant].iter().map(|r| metric_value(r, metric)).collect()
    }
}

fn deltas(reports: &BTreeMap<String, Vec<MetricsReport>>, reference: &str) -> BTreeMap<String, BTreeMap<String, Delta>> {
    let mut out = BTreeMap::new();
    for (name, rs) in reports {
        let mut per_metric = BTreeMap::new();
        for &m in ABLATION_METRICS {
            let per_seed: Vec<Option<f64>> = rs
                .iter()
                .zip(&reports[reference])
                .map(|(a, b)| Some(metric_value(a, m)? - metric_value(b, m)?))
                .collect();
            let present: Vec<f64> = per_seed.iter().flatten().copied().collect();
            per_metric.insert(
                m.to_string(),
                Delta {
                    median: median(&present),
                    per_seed,
                },
            );
        }
        out.insert(name.clone(), per_metric);
    }
    out
}

/// Runs the chosen variants (all when `only` is empty) over `seeds`. Data
/// and the pretrained encoder are shared by variants of the same seed.
pub fn ablate(cfg: &ExperimentConfig, seeds: &[u64], only: &[&str]) -> Result<AblationReport> {
    let variants: Vec<(String, ExperimentConfig)> = ablation_variants(cfg)
        .into_iter()
        .filter(|(n, _)| only.is_empty() || only.contains(&n.as_str()) || n == "full" || n == "base")
        .collect();
    let mut reports: BTreeMap<String, Vec<MetricsReport>> = BTreeMap::new();
    for &seed in seeds {
        let base_cfg = ExperimentConfig { seed, ..cfg.clone() };
        base_cfg.validate()?;
        let (world, logs) = generate_data(&base_cfg)?;
        let mut encoders: BTreeMap<bool, ParamStore> = BTreeMap::new();
        for (name, v) in &variants {
            let v = ExperimentConfig { seed, ..v.clone() };
            let enc = match encoders.get(&v.pretrain.enabled) {
                Some(e) => e.clone(),
                None => {
                    let (e, _) = prepare_encoder(&v, &world)?;
                    encoders.insert(v.pretrain.enabled, e.clone());
                    e
                }
            };
            let trained = fit(&v, &logs.history, &logs.train, &enc)?;
            let report = assess(&v, &trained.model, &trained.params, &logs.history, &logs.test)?;
            log::info!("seed {seed} {name}: auc {:.4} full auc {:?}", report.auc, report.slice("full").auc);
            reports.entry(name.clone()).or_default().push(report);
        }
    }
    let base_auc: Vec<f64> = reports["base"].iter().map(|r| r.auc).collect();
    for rs in reports.values_mut() {
        for (r, &b) in rs.iter_mut().zip(&base_auc) {
            r.relaimpr_vs_base = defined(metrics::relaimpr(r.auc, b))?;
        }
    }
    Ok(AblationReport {
        seeds: seeds.to_vec(),
        delta_vs_full: deltas(&reports, "full"),
        delta_vs_base: deltas(&reports, "base"),
        reports,
    })
}

/// One cell of the fake-level cut-point grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub p1: f64,
    pub p2: f64,
    pub auc: f64,
    pub gauc: f64,
    pub full_auc: Option<f64>,
}

/// Trains the full model for every valid `(p1, p2)` with `p1 < p2`, sharing
/// data and encoder.
pub fn sweep(cfg: &ExperimentConfig, p1s: &[f64], p2s: &[f64]) -> Result<Vec<SweepCell>> {
    cfg.validate()?;
    let (world, logs) = generate_data(cfg)?;
    let (enc, _) = prepare_encoder(cfg, &world)?;
    let mut out = Vec::new();
    for &p1 in p1s {
        for &p2 in p2s {
            if !(p1 < p2) {
                continue;
            }
            let mut v = cfg.clone();
            v.debias.p1 = p1;
            v.debias.p2 = p2;
            v.validate()?;
            let t = fit(&v, &logs.history, &logs.train, &enc)?;
            let r = assess(&v, &t.model, &t.params, &logs.history, &logs.test)?;
            out.push(SweepCell {
                p1,
                p2,
                auc: r.auc,
                gauc: r.gauc,
                full_auc: r.slice("full").auc,
            });
        }
    }
    Ok(out)
}

/// `p1,p2,auc,gauc,full_auc` rows; undefined values are left empty.
pub fn sweep_csv(cells: &[SweepCell]) -> String {
    let mut s = String::from("p1,p2,auc,gauc,full_auc\n");
    for c in cells {
        let full = c.full_auc.map_or(String::new(), |v| v.to_string());
        s.push_str(&format!("{},{},{},{},{}\n", c.p1, c.p2, c.auc, c.gauc, full));
    }
    s
}

/// Fails unless `found` holds exactly the tensors of `expected`, shape for
/// shape. Used to match a checkpoint against the configured model.
pub fn check_layout(expected: &ParamStore, found: &ParamStore, what: &str) -> Result<()> {
    for (name, t) in expected.iter() {
        match found.try_get(name) {
            None => return Err(Error::Config(format!("{what} lacks tensor {name}"))),
            Some(f) if f.shape() != t.shape() => {
                return Err(Error::Config(format!(
                    "{what}: tensor {name} has shape {:?}, the config implies {:?}",
                    f.shape(),
                    t.shape()
                )))
            }
            _ => {}
        }
    }
    if let Some(extra) = found.names().find(|n| !expected.contains(n)) {
        return Err(Error::Config(format!("{what} has unexpected tensor {extra}")));
    }
    Ok(())
}
