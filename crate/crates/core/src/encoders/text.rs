use std::ops::Range;

use super::EncoderConfig;
use crate::error::{Error, Result};
use crate::params::{Bound, Init, Linear, ParamId, ParamStore};
use crate::perturbation::{TokenizedReport, Vocabulary};
use crate::rng::derive_seed;
use crate::tensor::Tensor;

/// Sub-word embeddings, sinusoidal positions, one self-attention block with a
/// feed-forward sublayer, then mean-pooled global and per-word projections.
#[derive(Debug, Clone)]
pub struct TextEncoder {
    embedding: ParamId,
    query: Linear,
    key: Linear,
    value: Linear,
    attn_out: Linear,
    ffn_in: Linear,
    ffn_out: Linear,
    global_proj: Linear,
    word_proj: Linear,
    width: usize,
    position_signal: bool,
}

/// Batched text embeddings.
pub struct TextBatch {
    /// `R × d_e`, one row per report.
    pub global: Tensor,
    /// `N_total × K` sub-word features, reports stacked.
    pub subword_rows: Tensor,
    /// `W_total × d_e` word embeddings, reports stacked.
    pub word_rows: Tensor,
    /// Sub-word rows of each report.
    pub subword_spans: Vec<Range<usize>>,
    /// Word rows of each report.
    pub word_spans: Vec<Range<usize>>,
}

impl TextBatch {
    /// `d_e × W` word embeddings of report `r`.
    pub fn local(&self, r: usize) -> Result<Tensor> {
        self.word_rows.slice_rows(self.word_spans[r].clone())?.t()
    }

    /// `K × N` sub-word features of report `r`.
    pub fn subwords(&self, r: usize) -> Result<Tensor> {
        self.subword_rows.slice_rows(self.subword_spans[r].clone())?.t()
    }
}

/// Sinusoidal position signal for positions `0..len` at width `k`.
pub fn position_signal(len: usize, k: usize) -> Vec<f64> {
    let mut out = vec![0.0; len * k];
    for p in 0..len {
        for i in 0..k {
            let rate = 10000f64.powf((2 * (i / 2)) as f64 / k as f64);
            let angle = p as f64 / rate;
            out[p * k + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    out
}

/// Word-level embeddings from sub-word features: the mean of each word's
/// sub-word columns followed by a shared projection.
///
/// `subwords` is `K × N`, `weight` is `K × d_e`; returns `d_e × W`. The spans
/// must partition `0..N`.
pub fn aggregate_subwords(
    subwords: &Tensor,
    word_spans: &[Range<usize>],
    weight: &Tensor,
    bias: Option<&Tensor>,
) -> Result<Tensor> {
    let n = *subwords
        .shape()
        .get(1)
        .ok_or_else(|| Error::shape("aggregate_subwords", "expected K × N"))?;
    let mut cursor = 0;
    for s in word_spans {
        if s.start != cursor || s.end <= s.start {
            return Err(Error::shape("aggregate_subwords", "word spans must partition the sub-words"));
        }
        cursor = s.end;
    }
    if cursor != n {
        return Err(Error::shape("aggregate_subwords", "word spans must partition the sub-words"));
    }
    let words = subwords.t()?.segment_mean(word_spans)?.matmul(weight)?;
    let words = match bias {
        Some(b) => words.add_row(b)?,
        None => words,
    };
    words.t()
}

impl TextEncoder {
    pub(super) fn new(cfg: &EncoderConfig, vocab_size: usize, store: &mut ParamStore) -> Self {
        let k = cfg.subword_dim;
        let seed = |s: u64| derive_seed(cfg.init_seed, 300 + s);
        let embedding = store.add("text.embedding", &[vocab_size, k], Init::Uniform(1.0), seed(0));
        TextEncoder {
            embedding,
            query: Linear::new(store, "text.query", k, k, false, seed(1)),
            key: Linear::new(store, "text.key", k, k, false, seed(2)),
            value: Linear::new(store, "text.value", k, k, false, seed(3)),
            attn_out: Linear::new(store, "text.attn_out", k, k, true, seed(4)),
            ffn_in: Linear::new(store, "text.ffn_in", k, cfg.ffn_hidden, true, seed(5)),
            ffn_out: Linear::new(store, "text.ffn_out", cfg.ffn_hidden, k, true, seed(6)),
            global_proj: Linear::new(store, "text.global_proj", k, cfg.embed_dim, true, seed(7)),
            word_proj: Linear::new(store, "text.word_proj", k, cfg.embed_dim, true, seed(8)),
            width: k,
            position_signal: cfg.position_signal,
        }
    }

    pub fn word_projection<'a>(&self, bound: &'a Bound) -> (&'a Tensor, Option<&'a Tensor>) {
        (
            bound.get(self.word_proj.weight),
            self.word_proj.bias.map(|b| bound.get(b)),
        )
    }

    pub fn forward(&self, bound: &Bound, vocab: &Vocabulary, reports: &[&TokenizedReport]) -> Result<TextBatch> {
        if reports.is_empty() {
            return Err(Error::shape("encode_text", "empty batch"));
        }
        let k = self.width;
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        let mut subword_spans = Vec::with_capacity(reports.len());
        let mut word_spans = Vec::with_capacity(reports.len());
        let mut all_words = Vec::new();
        let mut words_seen = 0;
        for report in reports {
            if report.tokens.is_empty() || report.subwords.iter().any(Vec::is_empty) {
                return Err(Error::EmptyReport);
            }
            let start = ids.len();
            let report_ids = report.subword_ids(vocab);
            positions.extend(0..report_ids.len());
            ids.extend(report_ids);
            subword_spans.push(start..ids.len());
            all_words.extend(report.word_spans().into_iter().map(|s| s.start + start..s.end + start));
            word_spans.push(words_seen..words_seen + report.word_count());
            words_seen += report.word_count();
        }

        let mut x = bound.get(self.embedding).select_rows(&ids)?;
        if self.position_signal {
            let max_len = positions.iter().max().copied().unwrap_or(0) + 1;
            let table = position_signal(max_len, k);
            let pe: Vec<f64> = positions
                .iter()
                .flat_map(|&p| table[p * k..(p + 1) * k].iter().copied())
                .collect();
            x = x.add(&Tensor::new(pe, &[ids.len(), k])?)?;
        }

        let q = self.query.forward(bound, &x)?;
        let key = self.key.forward(bound, &x)?;
        let v = self.value.forward(bound, &x)?;
        let attended = Tensor::segment_attention(&q, &key, &v, &subword_spans, 1.0 / (k as f64).sqrt())?;
        let h = x.add(&self.attn_out.forward(bound, &attended)?)?;
        let ffn = self.ffn_out.forward(bound, &self.ffn_in.forward(bound, &h)?.relu())?;
        let features = h.add(&ffn)?;

        let global = self.global_proj.forward(bound, &features.segment_mean(&subword_spans)?)?;
        let word_rows = self.word_proj.forward(bound, &features.segment_mean(&all_words)?)?;
        Ok(TextBatch {
            global,
            subword_rows: features,
            word_rows,
            subword_spans,
            word_spans,
        })
    }
}
