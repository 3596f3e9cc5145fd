//! Turning samples and behaviour sequences into index-based feature batches.

use std::collections::HashMap;

use crate::data::SearchSample;
use crate::debias::NoiseSide;
use crate::encoder::{format_pair, format_text, Encoder, Vocab};
use crate::error::Result;
use crate::nn::ParamStore;
use crate::preference::MergedSequence;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// Encoder architecture plus the vocabulary feeding it.
#[derive(Clone, Debug)]
pub struct TextEncoder {
    pub encoder: Encoder,
    pub vocab: Vocab,
}

impl TextEncoder {
    pub fn d(&self) -> usize {
        self.encoder.config.d_model
    }

    pub fn text_ids(&self, tokens: &[String]) -> Result<Vec<u32>> {
        format_text(&self.vocab.ids(tokens), self.encoder.config.max_seq_len)
    }

    pub fn pair_ids(&self, query: &[String], item: &[String]) -> Result<Vec<u32>> {
        format_pair(
            &self.vocab.ids(query),
            &self.vocab.ids(item),
            self.encoder.config.max_seq_len,
        )
    }
}

/// Embeddings of a frozen encoder, keyed by formatted id sequence.
#[derive(Clone, Debug, Default)]
pub struct EmbeddingCache {
    rows: HashMap<Vec<u32>, Vec<f64>>,
}

impl EmbeddingCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// `[seqs × d]` embeddings, computing any missing rows with `params`.
    pub fn table(&mut self, text: &TextEncoder, params: &ParamStore, seqs: &[Vec<u32>]) -> Result<Tensor> {
        let missing: Vec<Vec<u32>> = seqs
            .iter()
            .filter(|s| !self.rows.contains_key(*s))
            .cloned()
            .collect();
        if !missing.is_empty() {
            let emb = text.encoder.embed(params, &missing, 256)?;
            for (i, s) in missing.into_iter().enumerate() {
                self.rows.insert(s, emb.row(i).to_vec());
            }
        }
        let d = text.d();
        let mut out = Vec::with_capacity(seqs.len() * d);
        for s in seqs {
            out.extend_from_slice(&self.rows[s]);
        }
        Ok(Tensor::matrix(seqs.len(), d, out))
    }
}

/// One row of a batch: a candidate of request `request`, optionally carrying
/// a replacement relevance feature and embedding noise (debias negatives).
#[derive(Clone, Debug)]
pub struct RowSpec<'a> {
    pub sample: &'a SearchSample,
    pub request: usize,
    pub rsl_feature: u8,
    pub noise: Option<(NoiseSide, &'a [f64])>,
}

impl<'a> RowSpec<'a> {
    pub fn real(sample: &'a SearchSample, request: usize) -> Self {
        RowSpec {
            sample,
            request,
            rsl_feature: sample.rsl,
            noise: None,
        }
    }
}

/// A request context: the current query and its merged behaviour sequence.
#[derive(Clone, Copy, Debug)]
pub struct RequestSpec<'a> {
    pub query: &'a [String],
    pub seq: &'a MergedSequence,
}

/// Index form of a batch. Text inputs point into `seqs`, the batch's unique
/// formatted sequences.
#[derive(Clone, Debug)]
pub struct FeatureBatch {
    pub n_rows: usize,
    pub user: Vec<usize>,
    pub item: Vec<usize>,
    pub category: Vec<usize>,
    pub rsl_feature: Vec<usize>,
    pub dense: Tensor,
    pub query_text: Vec<usize>,
    pub item_text: Vec<usize>,
    pub pair_text: Vec<usize>,
    pub request: Vec<usize>,
    pub query_noise: Option<Tensor>,
    pub item_noise: Option<Tensor>,
    pub request_query: Vec<usize>,
    pub own_keys: Vec<usize>,
    pub own_values: Vec<usize>,
    pub own_segments: Vec<(usize, usize)>,
    pub cross_keys: Vec<usize>,
    pub cross_values: Vec<usize>,
    pub cross_segments: Vec<(usize, usize)>,
    pub seqs: Vec<Vec<u32>>,
}

#[derive(Default)]
struct Interner {
    index: HashMap<Vec<u32>, usize>,
    seqs: Vec<Vec<u32>>,
}

impl Interner {
    fn id(&mut self, s: Vec<u32>) -> usize {
        if let Some(&i) = self.index.get(&s) {
            return i;
        }
        let i = self.seqs.len();
        self.index.insert(s.clone(), i);
        self.seqs.push(s);
        i
    }
}

/// Id-table row: 0 is reserved for ids outside the table.
pub fn id_row(id: u32, known: usize) -> usize {
    if (id as usize) < known {
        id as usize + 1
    } else {
        0
    }
}

pub struct TableSizes {
    pub users: usize,
    pub items: usize,
    pub categories: usize,
    pub dense: usize,
}

impl FeatureBatch {
    pub fn build(
        text: &TextEncoder,
        sizes: &TableSizes,
        requests: &[RequestSpec<'_>],
        rows: &[RowSpec<'_>],
    ) -> Result<FeatureBatch> {
        let d = text.d();
        let n = rows.len();
        let mut it = Interner::default();
        let mut fb = FeatureBatch {
            n_rows: n,
            user: Vec::with_capacity(n),
            item: Vec::with_capacity(n),
            category: Vec::with_capacity(n),
            rsl_feature: Vec::with_capacity(n),
            dense: Tensor::zeros(n, sizes.dense),
            query_text: Vec::with_capacity(n),
            item_text: Vec::with_capacity(n),
            pair_text: Vec::with_capacity(n),
            request: Vec::with_capacity(n),
            query_noise: None,
            item_noise: None,
            request_query: Vec::with_capacity(requests.len()),
            own_keys: Vec::new(),
            own_values: Vec::new(),
            own_segments: Vec::new(),
            cross_keys: Vec::new(),
            cross_values: Vec::new(),
            cross_segments: Vec::new(),
            seqs: Vec::new(),
        };
        for (r, row) in rows.iter().enumerate() {
            let s = row.sample;
            fb.user.push(id_row(s.user_id, sizes.users));
            fb.item.push(id_row(s.item_id, sizes.items));
            fb.category.push(id_row(s.category, sizes.categories));
            fb.rsl_feature.push(row.rsl_feature.clamp(1, 4) as usize);
            for (j, v) in s.dense.iter().take(sizes.dense).enumerate() {
                fb.dense.set(r, j, *v);
            }
            fb.query_text.push(it.id(text.text_ids(&s.query_text)?));
            fb.item_text.push(it.id(text.text_ids(&s.item_text)?));
            fb.pair_text.push(it.id(text.pair_ids(&s.query_text, &s.item_text)?));
            fb.request.push(row.request);
            if let Some((side, noise)) = row.noise {
                let slot = match side {
                    NoiseSide::Query => &mut fb.query_noise,
                    NoiseSide::Item => &mut fb.item_noise,
                };
                let t = slot.get_or_insert_with(|| Tensor::zeros(n, d));
                t.row_mut(r).copy_from_slice(&noise[..d]);
            }
        }
        for req in requests {
            fb.request_query.push(it.id(text.text_ids(req.query)?));
            let start = fb.own_keys.len();
            for e in &req.seq.own.events {
                fb.own_keys.push(it.id(text.text_ids(&e.query_text)?));
                fb.own_values.push(it.id(text.pair_ids(&e.query_text, &e.item_text)?));
            }
            fb.own_segments.push((start, fb.own_keys.len() - start));
            let start = fb.cross_keys.len();
            for e in &req.seq.cross.events {
                fb.cross_keys.push(it.id(text.text_ids(&e.query_text)?));
                fb.cross_values.push(it.id(text.pair_ids(&e.query_text, &e.item_text)?));
            }
            fb.cross_segments.push((start, fb.cross_keys.len() - start));
        }
        fb.seqs = it.seqs;
        Ok(fb)
    }

    /// The batch's text table: cached constants for a frozen encoder, a
    /// differentiable forward pass otherwise.
    pub fn text_table<'t>(
        &self,
        tape: &'t Tape,
        text: &TextEncoder,
        params: &ParamStore,
        cache: Option<&mut EmbeddingCache>,
    ) -> Result<Var<'t>> {
        match cache {
            Some(c) => Ok(tape.constant(c.table(text, params, &self.seqs)?)),
            None => text.encoder.forward(tape, params, &self.seqs),
        }
    }
}
