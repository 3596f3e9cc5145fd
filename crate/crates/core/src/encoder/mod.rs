//! Small pre-LN transformer text encoder with [CLS] pooling.

mod checkpoint;
mod pretrain;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::ParamStore;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

pub use checkpoint::{load_checkpoint, round_to_storage, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use pretrain::{
    distill_loss, overall_loss, pretrain, relevance_accuracy, sample_relevance_pairs, sft_logits,
    sft_loss, train_teacher, EpochStats, PretrainConfig, PretrainOutcome, PretrainReport,
    RelevancePair, SftHead, TeacherOracle, RELEVANCE_CLASSES,
};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const SEP: u32 = 2;
pub const UNK: u32 = 3;
const N_SPECIAL: usize = 4;
const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Including the four special tokens.
    pub vocab_size: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    pub max_seq_len: usize,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            vocab_size: 128,
            d_model: 16,
            n_layers: 2,
            n_heads: 2,
            d_ff: 32,
            max_seq_len: 24,
        }
    }
}

impl EncoderConfig {
    /// Three layers at width 128 over a 10k vocabulary: just under 1.9M weights.
    pub fn full_scale() -> Self {
        EncoderConfig {
            vocab_size: 10_000,
            d_model: 128,
            n_layers: 3,
            n_heads: 4,
            d_ff: 512,
            max_seq_len: 64,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= N_SPECIAL {
            return Err(Error::Config("vocab_size must exceed the 4 special tokens".into()));
        }
        if self.d_model == 0 || self.d_ff == 0 || self.n_heads == 0 {
            return Err(Error::Config("encoder widths must be positive".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config("n_heads must divide d_model".into()));
        }
        if self.max_seq_len < 5 {
            return Err(Error::Config("max_seq_len must be at least 5".into()));
        }
        Ok(())
    }

    /// Exact weight count of an encoder with this shape.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attn = 4 * (d * d + d);
        let norms = 2 * 2 * d;
        let ffn = d * self.d_ff + self.d_ff + self.d_ff * d + d;
        self.vocab_size * d
            + self.max_seq_len * d
            + self.n_layers * (attn + norms + ffn)
            + 2 * d
            + d * d
            + d
    }
}

/// Word-to-id mapping. Ids `0..4` are PAD, CLS, SEP and UNK.
#[derive(Clone, Debug, PartialEq)]
pub struct Vocab {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    pub fn new(words: impl IntoIterator<Item = String>) -> Self {
        let mut v = Vocab {
            words: Vec::new(),
            index: HashMap::new(),
        };
        for w in words {
            if !v.index.contains_key(&w) {
                v.index.insert(w.clone(), (v.words.len() + N_SPECIAL) as u32);
                v.words.push(w);
            }
        }
        v
    }

    /// Vocabulary of a synthetic world: `w0 .. w{n-1}`.
    pub fn synthetic(n_words: usize) -> Self {
        Self::new((0..n_words).map(crate::data::word))
    }

    /// Size including special tokens.
    pub fn len(&self) -> usize {
        self.words.len() + N_SPECIAL
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    pub fn ids(&self, words: &[String]) -> Vec<u32> {
        words.iter().map(|w| self.id(w)).collect()
    }
}

/// `[CLS] tokens [SEP]`, truncated to `max_len`.
pub fn format_text(tokens: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if tokens.is_empty() {
        return Err(Error::Input("cannot encode an empty token list".into()));
    }
    let keep = tokens.len().min(max_len.saturating_sub(2));
    if keep < tokens.len() {
        log::warn!("text of {} tokens truncated to {keep}", tokens.len());
    }
    let mut out = Vec::with_capacity(keep + 2);
    out.push(CLS);
    out.extend_from_slice(&tokens[..keep]);
    out.push(SEP);
    Ok(out)
}

/// `[CLS] query [SEP] item [SEP]`. Overlong pairs lose item tokens first.
pub fn format_pair(query: &[u32], item: &[u32], max_len: usize) -> Result<Vec<u32>> {
    if query.is_empty() || item.is_empty() {
        return Err(Error::Input("cannot encode a pair with an empty side".into()));
    }
    let room = max_len.saturating_sub(3);
    let q_keep = query.len().min(room.saturating_sub(1)).max(1);
    let i_keep = item.len().min(room.saturating_sub(q_keep));
    if q_keep + i_keep < query.len() + item.len() {
        log::warn!(
            "pair of {}+{} tokens truncated to {q_keep}+{i_keep}",
            query.len(),
            item.len()
        );
    }
    let mut out = Vec::with_capacity(q_keep + i_keep + 3);
    out.push(CLS);
    out.extend_from_slice(&query[..q_keep]);
    out.push(SEP);
    out.extend_from_slice(&item[..i_keep]);
    out.push(SEP);
    Ok(out)
}

/// Architecture plus the parameter-name prefix it reads from a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder {
    pub config: EncoderConfig,
    pub prefix: String,
}

impl Encoder {
    pub fn new(config: EncoderConfig, prefix: impl Into<String>) -> Result<Self> {
        config.validate()?;
        Ok(Encoder {
            config,
            prefix: prefix.into(),
        })
    }

    fn name(&self, s: &str) -> String {
        format!("{}{}", self.prefix, s)
    }

    fn layer_name(&self, l: usize, s: &str) -> String {
        format!("{}layer{}.{}", self.prefix, l, s)
    }

    pub fn init(&self, rng: &mut Rng) -> ParamStore {
        let c = &self.config;
        let d = c.d_model;
        let mut p = ParamStore::new();
        p.init_normal(&self.name("tok_emb"), c.vocab_size, d, 0.5, rng);
        p.init_normal(&self.name("pos_emb"), c.max_seq_len, d, 0.1, rng);
        for l in 0..c.n_layers {
            for m in ["wq", "wk", "wv", "wo"] {
                p.init_xavier(&self.layer_name(l, m), d, d, rng);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                p.init_const(&self.layer_name(l, b), 1, d, 0.0);
            }
            for n in ["ln1", "ln2"] {
                p.init_const(&self.layer_name(l, &format!("{n}_g")), 1, d, 1.0);
                p.init_const(&self.layer_name(l, &format!("{n}_b")), 1, d, 0.0);
            }
            p.init_xavier(&self.layer_name(l, "ff1_w"), d, c.d_ff, rng);
            p.init_const(&self.layer_name(l, "ff1_b"), 1, c.d_ff, 0.0);
            p.init_xavier(&self.layer_name(l, "ff2_w"), c.d_ff, d, rng);
            p.init_const(&self.layer_name(l, "ff2_b"), 1, d, 0.0);
        }
        p.init_const(&self.name("lnf_g"), 1, d, 1.0);
        p.init_const(&self.name("lnf_b"), 1, d, 0.0);
        p.init_xavier(&self.name("proj_w"), d, d, rng);
        p.init_const(&self.name("proj_b"), 1, d, 0.0);
        p
    }

    /// Pooled `[batch × d]` outputs for already formatted id sequences.
    pub fn forward<'t>(&self, tape: &'t Tape, params: &ParamStore, batch: &[Vec<u32>]) -> Result<Var<'t>> {
        let c = &self.config;
        if batch.is_empty() {
            return Err(Error::Input("empty encoder batch".into()));
        }
        let t = batch.iter().map(Vec::len).max().unwrap_or(0);
        if t == 0 || t > c.max_seq_len {
            return Err(Error::Input(format!("sequence length {t} outside 1..={}", c.max_seq_len)));
        }
        let mut ids = Vec::with_capacity(batch.len() * t);
        let mut pos = Vec::with_capacity(batch.len() * t);
        let mut lens = Vec::with_capacity(batch.len());
        for seq in batch {
            if seq.is_empty() {
                return Err(Error::Input("empty sequence in encoder batch".into()));
            }
            lens.push(seq.len());
            for j in 0..t {
                let id = seq.get(j).copied().unwrap_or(PAD) as usize;
                if id >= c.vocab_size {
                    return Err(Error::Input(format!("token id {id} outside vocabulary")));
                }
                ids.push(id);
                pos.push(j);
            }
        }
        let var = |n: String| params.var(tape, &n);
        let mut x = var(self.name("tok_emb"))
            .gather_rows(ids)
            .add(var(self.name("pos_emb")).gather_rows(pos));
        for l in 0..c.n_layers {
            let lv = |s: &str| var(self.layer_name(l, s));
            let h = x.layer_norm(lv("ln1_g"), lv("ln1_b"), LN_EPS);
            let q = h.matmul(lv("wq")).add_row(lv("bq"));
            let k = h.matmul(lv("wk")).add_row(lv("bk"));
            let v = h.matmul(lv("wv")).add_row(lv("bv"));
            let a = q.seq_attention(k, v, lens.clone(), t, c.n_heads);
            x = x.add(a.matmul(lv("wo")).add_row(lv("bo")));
            let h = x.layer_norm(lv("ln2_g"), lv("ln2_b"), LN_EPS);
            let f = h
                .matmul(lv("ff1_w"))
                .add_row(lv("ff1_b"))
                .gelu()
                .matmul(lv("ff2_w"))
                .add_row(lv("ff2_b"));
            x = x.add(f);
        }
        let cls: Vec<usize> = (0..batch.len()).map(|b| b * t).collect();
        let pooled = x
            .gather_rows(cls)
            .layer_norm(var(self.name("lnf_g")), var(self.name("lnf_b")), LN_EPS);
        Ok(pooled.matmul(var(self.name("proj_w"))).add_row(var(self.name("proj_b"))))
    }

    /// Forward pass without gradient bookkeeping, in chunks of `chunk` sequences.
    pub fn embed(&self, params: &ParamStore, batch: &[Vec<u32>], chunk: usize) -> Result<Tensor> {
        let d = self.config.d_model;
        let mut out = Vec::with_capacity(batch.len() * d);
        for part in batch.chunks(chunk.max(1)) {
            let tape = Tape::new();
            out.extend(self.forward(&tape, params, part)?.value().into_data());
        }
        Ok(Tensor::matrix(batch.len(), d, out))
    }
}

/// An encoder together with its weights.
#[derive(Clone, Debug, PartialEq)]
pub struct EncoderParams {
    pub encoder: Encoder,
    pub params: ParamStore,
}

impl EncoderParams {
    pub fn init(config: EncoderConfig, prefix: &str, rng: &mut Rng) -> Result<Self> {
        let encoder = Encoder::new(config, prefix)?;
        let params = encoder.init(rng);
        Ok(EncoderParams { encoder, params })
    }

    pub fn config(&self) -> &EncoderConfig {
        &self.encoder.config
    }

    /// Exact number of scalar weights held.
    pub fn parameter_count(&self) -> usize {
        self.params.num_scalars()
    }

    pub fn encode_text(&self, tokens: &[u32]) -> Result<Tensor> {
        let seq = format_text(tokens, self.config().max_seq_len)?;
        self.encoder.embed(&self.params, &[seq], 1)
    }

    pub fn encode_pair(&self, query: &[u32], item: &[u32]) -> Result<Tensor> {
        let seq = format_pair(query, item, self.config().max_seq_len)?;
        self.encoder.embed(&self.params, &[seq], 1)
    }
}
