//! Relevance-classification SFT, teacher distillation and their joint
//! pretraining loop.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{format_pair, round_to_storage, Encoder, EncoderConfig, EncoderParams, Vocab};
use crate::data::{simulate_exposure, World};
use crate::error::{Error, Result};
use crate::losses;
use crate::nn::{Optimizer, ParamStore};
use crate::rng::{self, Rng};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub const RELEVANCE_CLASSES: usize = 4;
const HEAD_W: &str = "sft_head.w";
const HEAD_B: &str = "sft_head.b";

/// A query/item text pair with its relevance level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RelevancePair {
    pub query: Vec<String>,
    pub item: Vec<String>,
    pub rsl: u8,
}

/// Draws `n` labelled pairs from exposed impressions of `world`. With
/// `balanced`, each relevance level contributes `n / 4` pairs (the remainder
/// goes to the lowest levels).
pub fn sample_relevance_pairs(
    world: &World,
    n: usize,
    strictness: f64,
    balanced: bool,
    seed: u64,
) -> Result<Vec<RelevancePair>> {
    let mut quota = [n; 4];
    if balanced {
        for (k, q) in quota.iter_mut().enumerate() {
            *q = n / 4 + usize::from(k < n % 4);
        }
    }
    let mut out = Vec::with_capacity(n);
    let mut taken = [0usize; 4];
    for round in 0..200u64 {
        if out.len() >= n {
            break;
        }
        let batch = simulate_exposure(world, strictness, 20_000, rng::derive_seed(seed, "pairs", &[round]))?;
        for s in batch.into_iter().filter(|s| s.exposed) {
            let k = s.rsl as usize - 1;
            if out.len() < n && taken[k] < quota[k] {
                taken[k] += 1;
                out.push(RelevancePair {
                    query: s.query_text,
                    item: s.item_text,
                    rsl: s.rsl,
                });
            }
        }
    }
    if out.len() < n {
        return Err(Error::Input(format!(
            "exposure space too sparse: found {:?} pairs per relevance level",
            taken
        )));
    }
    let mut r = rng::stream(seed, "pairs.shuffle");
    out.shuffle(&mut r);
    Ok(out)
}

/// Linear map from the encoder width to the four relevance levels.
pub struct SftHead;

impl SftHead {
    pub fn init(d: usize, rng: &mut Rng) -> ParamStore {
        let mut p = ParamStore::new();
        p.init_xavier(HEAD_W, d, RELEVANCE_CLASSES, rng);
        p.init_const(HEAD_B, 1, RELEVANCE_CLASSES, 0.0);
        p
    }
}

pub fn sft_logits<'t>(tape: &'t Tape, params: &ParamStore, emb: Var<'t>) -> Var<'t> {
    emb.matmul(params.var(tape, HEAD_W)).add_row(params.var(tape, HEAD_B))
}

fn label_indices(labels: &[u8]) -> Result<Vec<usize>> {
    labels
        .iter()
        .map(|&l| {
            if (1..=4).contains(&l) {
                Ok(l as usize - 1)
            } else {
                Err(Error::Input(format!("relevance label {l} outside 1..=4")))
            }
        })
        .collect()
}

/// Mean cross entropy of the relevance logits against levels `1..=4`.
pub fn sft_loss<'t>(logits: Var<'t>, labels: &[u8]) -> Result<Var<'t>> {
    if logits.rows() != labels.len() {
        return Err(Error::Shape(format!(
            "{} logit rows for {} labels",
            logits.rows(),
            labels.len()
        )));
    }
    Ok(losses::softmax_cross_entropy(logits, &label_indices(labels)?))
}

/// Mean squared distance between student embeddings and teacher targets.
pub fn distill_loss<'t>(student: Var<'t>, target: &Tensor) -> Result<Var<'t>> {
    if student.rows() != target.rows() || student.cols() != target.cols() {
        return Err(Error::Shape(format!(
            "student {}x{} vs target {}x{}",
            student.rows(),
            student.cols(),
            target.rows(),
            target.cols()
        )));
    }
    let t = student.tape().constant(target.clone());
    Ok(losses::mse(student, t))
}

/// A frozen wider encoder plus a fixed linear map into the student width.
#[derive(Clone, Debug, PartialEq)]
pub struct TeacherOracle {
    pub encoder: EncoderParams,
    pub map: Tensor,
}

impl TeacherOracle {
    pub fn new(encoder: EncoderParams, student_width: usize, seed: u64) -> Self {
        let dt = encoder.config().d_model;
        let mut r = rng::stream(seed, "teacher.map");
        let mut tmp = ParamStore::new();
        tmp.init_normal("map", dt, student_width, 1.0 / (dt as f64).sqrt(), &mut r);
        TeacherOracle {
            encoder,
            map: tmp.get("map").clone(),
        }
    }

    /// Mapped teacher embeddings for formatted sequences.
    pub fn targets(&self, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let e = self.encoder.encoder.embed(&self.encoder.params, seqs, 64)?;
        e.matmul(&self.map)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub holdout_fraction: f64,
    pub sft_weight: f64,
    pub distill_weight: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            batch_size: 32,
            lr: 2e-3,
            holdout_fraction: 0.2,
            sft_weight: 1.0,
            distill_weight: 1.0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("pretrain batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(Error::Config("holdout_fraction must lie in [0, 1)".into()));
        }
        if self.lr < 0.0 || !self.lr.is_finite() {
            return Err(Error::Config("pretrain lr must be finite and >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    /// Medians of the per-batch training losses (epoch 0: before any update).
    pub train_sft_median: f64,
    pub train_distill_median: f64,
    pub heldout_sft: f64,
    pub heldout_distill: f64,
    pub heldout_accuracy: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// `epochs[0]` describes the untrained student.
    pub epochs: Vec<EpochStats>,
}

pub struct PretrainOutcome {
    pub student: EncoderParams,
    pub head: ParamStore,
    pub report: PretrainReport,
}

struct Encoded {
    seqs: Vec<Vec<u32>>,
    labels: Vec<u8>,
    targets: Option<Tensor>,
}

fn encode_pairs(vocab: &Vocab, pairs: &[RelevancePair], max_len: usize) -> Result<(Vec<Vec<u32>>, Vec<u8>)> {
    let mut seqs = Vec::with_capacity(pairs.len());
    for p in pairs {
        seqs.push(format_pair(&vocab.ids(&p.query), &vocab.ids(&p.item), max_len)?);
    }
    Ok((seqs, pairs.iter().map(|p| p.rsl).collect()))
}

/// Weighted joint objective; returns `(overall, sft, distill)`.
pub fn overall_loss<'t>(
    tape: &'t Tape,
    encoder: &Encoder,
    params: &ParamStore,
    seqs: &[Vec<u32>],
    labels: &[u8],
    targets: Option<&Tensor>,
    cfg: &PretrainConfig,
) -> Result<(Var<'t>, Var<'t>, Option<Var<'t>>)> {
    let emb = encoder.forward(tape, params, seqs)?;
    let sft = sft_loss(sft_logits(tape, params, emb), labels)?;
    let distill = targets.map(|t| distill_loss(emb, t)).transpose()?;
    let overall = match distill {
        Some(d) => sft.scale(cfg.sft_weight).add(d.scale(cfg.distill_weight)),
        None => sft.scale(cfg.sft_weight),
    };
    Ok((overall, sft, distill))
}

fn median(v: &mut [f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

fn batch_slice(data: &Encoded, idx: &[usize]) -> Encoded {
    Encoded {
        seqs: idx.iter().map(|&i| data.seqs[i].clone()).collect(),
        labels: idx.iter().map(|&i| data.labels[i]).collect(),
        targets: data.targets.as_ref().map(|t| t.select_rows(idx)),
    }
}

/// Held-out `(sft, distill, accuracy)`.
fn evaluate(encoder: &Encoder, params: &ParamStore, data: &Encoded) -> Result<(f64, f64, f64)> {
    if data.seqs.is_empty() {
        return Ok((f64::NAN, f64::NAN, f64::NAN));
    }
    let (mut sft, mut dist, mut correct) = (0.0, 0.0, 0usize);
    let n = data.seqs.len();
    let idx: Vec<usize> = (0..n).collect();
    for chunk in idx.chunks(128) {
        let b = batch_slice(data, chunk);
        let tape = Tape::new();
        let emb = encoder.forward(&tape, params, &b.seqs)?;
        let logits = sft_logits(&tape, params, emb);
        sft += sft_loss(logits, &b.labels)?.item() * chunk.len() as f64;
        if let Some(t) = &b.targets {
            dist += distill_loss(emb, t)?.item() * chunk.len() as f64;
        }
        correct += logits.with_value(|l| {
            (0..l.rows())
                .filter(|&r| argmax(l.row(r)) + 1 == b.labels[r] as usize)
                .count()
        });
    }
    let dist = if data.targets.is_some() { dist / n as f64 } else { f64::NAN };
    Ok((sft / n as f64, dist, correct as f64 / n as f64))
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = j;
        }
    }
    best
}

/// Fraction of pairs whose most likely relevance level is the labelled one.
pub fn relevance_accuracy(student: &EncoderParams, head: &ParamStore, vocab: &Vocab, pairs: &[RelevancePair]) -> Result<f64> {
    let (seqs, labels) = encode_pairs(vocab, pairs, student.config().max_seq_len)?;
    let mut params = student.params.clone();
    params.extend(head.clone());
    let data = Encoded {
        seqs,
        labels,
        targets: None,
    };
    Ok(evaluate(&student.encoder, &params, &data)?.2)
}

fn train(
    student: EncoderParams,
    head: ParamStore,
    vocab: &Vocab,
    pairs: &[RelevancePair],
    teacher: Option<&TeacherOracle>,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    cfg.validate()?;
    if pairs.is_empty() {
        return Err(Error::Input("no relevance pairs to train on".into()));
    }
    let max_len = student.config().max_seq_len;
    let (seqs, labels) = encode_pairs(vocab, pairs, max_len)?;
    let targets = teacher.map(|t| t.targets(&seqs)).transpose()?;
    let all = Encoded { seqs, labels, targets };
    let n_hold = ((pairs.len() as f64) * cfg.holdout_fraction).round() as usize;
    let n_hold = n_hold.min(pairs.len() - 1);
    let hold_idx: Vec<usize> = (0..n_hold).collect();
    let train_idx: Vec<usize> = (n_hold..pairs.len()).collect();
    let held = batch_slice(&all, &hold_idx);

    let encoder = student.encoder.clone();
    let mut params = student.params;
    params.extend(head);
    let mut opt = Optimizer::adam(cfg.lr);
    let mut r = rng::stream(seed, "pretrain.order");
    let mut report = PretrainReport::default();

    let (hs, hd, ha) = evaluate(&encoder, &params, &held)?;
    report.epochs.push(EpochStats {
        epoch: 0,
        train_sft_median: f64::NAN,
        train_distill_median: f64::NAN,
        heldout_sft: hs,
        heldout_distill: hd,
        heldout_accuracy: ha,
    });
    for epoch in 1..=cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut r);
        let (mut sfts, mut dists) = (Vec::new(), Vec::new());
        for chunk in order.chunks(cfg.batch_size) {
            let b = batch_slice(&all, chunk);
            let tape = Tape::new();
            let (overall, sft, distill) =
                overall_loss(&tape, &encoder, &params, &b.seqs, &b.labels, b.targets.as_ref(), cfg)?;
            let loss = overall.item();
            if !loss.is_finite() {
                return Err(Error::Divergence(format!(
                    "pretraining loss {loss} at epoch {epoch} (sft {}, distill {:?})",
                    sft.item(),
                    distill.map(|d| d.item())
                )));
            }
            sfts.push(sft.item());
            if let Some(d) = distill {
                dists.push(d.item());
            }
            let grads = tape.backward(overall)?;
            opt.apply(&mut params, &grads, |_| 1.0);
        }
        let (hs, hd, ha) = evaluate(&encoder, &params, &held)?;
        log::info!("pretrain epoch {epoch}: heldout sft {hs:.4} distill {hd:.4} acc {ha:.3}");
        report.epochs.push(EpochStats {
            epoch,
            train_sft_median: median(&mut sfts),
            train_distill_median: median(&mut dists),
            heldout_sft: hs,
            heldout_distill: hd,
            heldout_accuracy: ha,
        });
    }
    round_to_storage(&mut params);
    let head = params.subset("sft_head.");
    let student_params = params.subset(&encoder.prefix);
    Ok(PretrainOutcome {
        student: EncoderParams {
            encoder,
            params: student_params,
        },
        head,
        report,
    })
}

/// Joint SFT plus distillation from a frozen `teacher`, with Adam.
pub fn pretrain(
    student: EncoderParams,
    head: ParamStore,
    vocab: &Vocab,
    pairs: &[RelevancePair],
    teacher: &TeacherOracle,
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<PretrainOutcome> {
    if teacher.map.cols() != student.config().d_model {
        return Err(Error::Shape("teacher map width differs from the student".into()));
    }
    train(student, head, vocab, pairs, Some(teacher), cfg, seed)
}

/// Trains a wider encoder on the relevance task alone and freezes it.
pub fn train_teacher(
    config: EncoderConfig,
    student_width: usize,
    vocab: &Vocab,
    pairs: &[RelevancePair],
    cfg: &PretrainConfig,
    seed: u64,
) -> Result<TeacherOracle> {
    let mut r = rng::stream(seed, "teacher.init");
    let enc = EncoderParams::init(config, "teacher.", &mut r)?;
    let head = SftHead::init(enc.config().d_model, &mut r);
    let out = train(enc, head, vocab, pairs, None, cfg, rng::derive_seed(seed, "teacher.train", &[]))?;
    log::info!(
        "teacher heldout accuracy {:.3}",
        out.report.epochs.last().map_or(f64::NAN, |e| e.heldout_accuracy)
    );
    Ok(TeacherOracle::new(out.student, student_width, seed))
}
