//! Global, local attentive and perturbation-sensitivity losses.
//!
//! Local embeddings are column-major here (`d_e × M`, `d_e × W`); batched
//! helpers take row-major stacks as the encoders emit them.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
    /// Temperature of the word-to-region attention and of the score
    /// aggregation.
    pub tau_local: f64,
    /// InfoNCE temperature of the local loss; `tau` when unset.
    pub local_nce_tau: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            alpha: 0.1,
            beta: 0.1,
            tau: 0.07,
            tau_local: 1.0,
            local_nce_tau: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (name, t) in [("tau", self.tau), ("tau_local", self.tau_local)] {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("{name} must be positive, got {t}")));
            }
        }
        if let Some(t) = self.local_nce_tau {
            if !(t > 0.0 && t.is_finite()) {
                return Err(Error::Config(format!("local_nce_tau must be positive, got {t}")));
            }
        }
        for (name, w) in [("alpha", self.alpha), ("beta", self.beta)] {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(Error::Config(format!("{name} must be non-negative, got {w}")));
            }
        }
        Ok(())
    }

    pub fn local_tau(&self) -> f64 {
        self.local_nce_tau.unwrap_or(self.tau)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub global: f64,
    pub local: f64,
    pub pert: f64,
    pub total: f64,
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidArgument(format!("temperature must be positive, got {tau}")))
    }
}

fn dims2(t: &Tensor, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        &[r, c] => Ok((r, c)),
        s => Err(Error::shape(what, format!("expected a matrix, got {s:?}"))),
    }
}

/// Symmetric cross-entropy over a square logit matrix with the diagonal as
/// positives: the mean of the row-wise and column-wise losses.
pub fn symmetric_info_nce(logits: &Tensor) -> Result<Tensor> {
    let (b, b2) = dims2(logits, "info_nce")?;
    if b != b2 {
        return Err(Error::shape("info_nce", format!("logits must be square, got {b}x{b2}")));
    }
    let diag: Vec<Option<usize>> = (0..b).map(|i| Some(i * b + i)).collect();
    let rows = logits.log_softmax(1)?.gather(diag.clone(), &[b])?.mean();
    let cols = logits.log_softmax(0)?.gather(diag, &[b])?.mean();
    Ok(rows.add(&cols)?.scale(-0.5))
}

/// Image-report matching loss over a batch of global embeddings (`B × d_e`).
pub fn global_contrastive_loss(e_i: &Tensor, e_t: &Tensor, tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (bi, di) = dims2(e_i, "global_contrastive_loss")?;
    let (bt, dt) = dims2(e_t, "global_contrastive_loss")?;
    if bi != bt || di != dt {
        return Err(Error::shape(
            "global_contrastive_loss",
            format!("image batch {bi}x{di} vs text batch {bt}x{dt}"),
        ));
    }
    let logits = e_i
        .l2_normalize(1)?
        .matmul(&e_t.l2_normalize(1)?.t()?)?
        .scale(1.0 / tau);
    symmetric_info_nce(&logits)
}

/// Word-to-region attention `M × W`; each column is a softmax over regions.
pub fn attention_weights(e_i_local: &Tensor, e_t_local: &Tensor, tau_local: f64) -> Result<Tensor> {
    check_tau(tau_local)?;
    let (d, _) = dims2(e_i_local, "attention_weights")?;
    let (d2, _) = dims2(e_t_local, "attention_weights")?;
    if d != d2 {
        return Err(Error::shape("attention_weights", format!("d_e {d} vs {d2}")));
    }
    e_i_local
        .t()?
        .matmul(e_t_local)?
        .scale(1.0 / tau_local)
        .softmax(0)
}

/// Per-word cosine between each word and its attention-pooled image context,
/// for every word column of `e_t_local` (`d_e × W`). Returns `W` values.
fn word_context_cosines(e_i_local: &Tensor, e_t_local: &Tensor, words_unit: &Tensor, tau_local: f64) -> Result<Tensor> {
    let attn = attention_weights(e_i_local, e_t_local, tau_local)?;
    let context = e_i_local.matmul(&attn)?;
    context.l2_normalize(0)?.mul(words_unit)?.sum_axis(0)
}

/// Local attentive matching score `S = log Σ_j exp(cos(c_j, w_j) / τ_local)`.
pub fn local_matching_score(e_i_local: &Tensor, e_t_local: &Tensor, tau_local: f64) -> Result<Tensor> {
    let words_unit = e_t_local.l2_normalize(0)?;
    word_context_cosines(e_i_local, e_t_local, &words_unit, tau_local)?
        .scale(1.0 / tau_local)
        .logsumexp(0)
}

/// Matching scores of every image against every report, `B_i × B_t`.
///
/// `image_locals` holds one `d_e × M` matrix per image; `word_rows` stacks
/// the words of all reports (`W_total × d_e`) and `word_spans` marks each
/// report's rows.
pub fn local_score_matrix(
    image_locals: &[Tensor],
    word_rows: &Tensor,
    word_spans: &[Range<usize>],
    tau_local: f64,
) -> Result<Tensor> {
    check_tau(tau_local)?;
    if image_locals.is_empty() || word_spans.is_empty() {
        return Err(Error::shape("local_score_matrix", "empty batch"));
    }
    let words = word_rows.t()?;
    let words_unit = word_rows.l2_normalize(1)?.t()?;
    let n = word_spans.len();
    let rows = image_locals
        .iter()
        .map(|local| {
            word_context_cosines(local, &words, &words_unit, tau_local)?
                .scale(1.0 / tau_local)
                .segment_logsumexp(word_spans)?
                .reshape(&[1, n])
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::cat_rows(&rows)
}

/// Symmetric InfoNCE over the local matching scores of a batch of pairs.
pub fn local_contrastive_loss(
    e_i_local: &[Tensor],
    e_t_local: &[Tensor],
    tau: f64,
    tau_local: f64,
) -> Result<Tensor> {
    check_tau(tau)?;
    if e_i_local.len() != e_t_local.len() {
        return Err(Error::shape(
            "local_contrastive_loss",
            format!("{} images vs {} reports", e_i_local.len(), e_t_local.len()),
        ));
    }
    let mut spans = Vec::with_capacity(e_t_local.len());
    let mut cursor = 0;
    let mut rows = Vec::with_capacity(e_t_local.len());
    for t in e_t_local {
        let w = dims2(t, "local_contrastive_loss")?.1;
        spans.push(cursor..cursor + w);
        cursor += w;
        rows.push(t.t()?);
    }
    let words = Tensor::cat_rows(&rows)?;
    local_contrastive_loss_stacked(e_i_local, &words, &spans, tau, tau_local)
}

/// [`local_contrastive_loss`] with the reports' words already stacked row-wise.
pub fn local_contrastive_loss_stacked(
    e_i_local: &[Tensor],
    word_rows: &Tensor,
    word_spans: &[Range<usize>],
    tau: f64,
    tau_local: f64,
) -> Result<Tensor> {
    check_tau(tau)?;
    if e_i_local.len() != word_spans.len() {
        return Err(Error::shape(
            "local_contrastive_loss",
            format!("{} images vs {} reports", e_i_local.len(), word_spans.len()),
        ));
    }
    let scores = local_score_matrix(e_i_local, word_rows, word_spans, tau_local)?;
    symmetric_info_nce(&scores.scale(1.0 / tau))
}

/// One sample's candidates for the perturbation loss: the row of its
/// original report and the rows of its usable perturbations.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PertGroup {
    pub sample: usize,
    pub positive: usize,
    pub negatives: Vec<usize>,
}

/// Perturbation-sensitivity loss for one image: `e_i`, `e_t` are `d_e`,
/// `e_t_perts` is `d_e × P`.
pub fn perturbation_sensitivity_loss(e_i: &Tensor, e_t: &Tensor, e_t_perts: &Tensor, tau: f64) -> Result<Tensor> {
    let d = e_i.len();
    if e_t.len() != d {
        return Err(Error::shape("perturbation_sensitivity_loss", "e_i and e_t widths differ"));
    }
    let (dp, p) = dims2(e_t_perts, "perturbation_sensitivity_loss")?;
    if dp != d {
        return Err(Error::shape("perturbation_sensitivity_loss", format!("negatives have width {dp}, expected {d}")));
    }
    let texts = Tensor::cat_rows(&[e_t.reshape(&[1, d])?, e_t_perts.t()?])?;
    let group = PertGroup {
        sample: 0,
        positive: 0,
        negatives: (1..=p).collect(),
    };
    perturbation_loss_batch(&e_i.reshape(&[1, d])?, &texts, &[group], tau)
}

/// Mean perturbation-sensitivity loss over groups. `e_i` is `B × d_e`,
/// `texts` is `T × d_e`; each group names one image row and text rows.
/// Groups without negatives are an error.
pub fn perturbation_loss_batch(e_i: &Tensor, texts: &Tensor, groups: &[PertGroup], tau: f64) -> Result<Tensor> {
    check_tau(tau)?;
    let (b, d) = dims2(e_i, "perturbation_loss")?;
    let (t, d2) = dims2(texts, "perturbation_loss")?;
    if d != d2 {
        return Err(Error::shape("perturbation_loss", format!("d_e {d} vs {d2}")));
    }
    if groups.is_empty() {
        return Err(Error::NoNegatives);
    }
    let mut index = Vec::new();
    let mut positives = Vec::with_capacity(groups.len());
    let mut spans = Vec::with_capacity(groups.len());
    for g in groups {
        if g.negatives.is_empty() {
            return Err(Error::NoNegatives);
        }
        if g.sample >= b || g.positive >= t || g.negatives.iter().any(|&n| n >= t) {
            return Err(Error::shape("perturbation_loss", "group index out of range"));
        }
        let start = index.len();
        positives.push(Some(g.sample * t + g.positive));
        index.push(Some(g.sample * t + g.positive));
        index.extend(g.negatives.iter().map(|&n| Some(g.sample * t + n)));
        spans.push(start..index.len());
    }
    let logits = e_i
        .l2_normalize(1)?
        .matmul(&texts.l2_normalize(1)?.t()?)?
        .scale(1.0 / tau);
    let n = groups.len();
    let denom = logits.gather(index.clone(), &[index.len()])?.segment_logsumexp(&spans)?;
    let pos = logits.gather(positives, &[n])?;
    Ok(denom.sub(&pos)?.mean())
}

/// `global + α·local + β·pert`, with every component recorded.
pub fn total_loss(global: &Tensor, local: &Tensor, pert: &Tensor, weights: &LossWeights) -> Result<(Tensor, LossBreakdown)> {
    let total = global
        .add(&local.scale(weights.alpha))?
        .add(&pert.scale(weights.beta))?;
    let breakdown = LossBreakdown {
        global: global.item(),
        local: local.item(),
        pert: pert.item(),
        total: total.item(),
    };
    Ok((total, breakdown))
}
