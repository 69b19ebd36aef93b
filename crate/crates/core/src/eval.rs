//! Zero-shot structure evaluation, retrieval recall and linear probes.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Image, SyntheticPair};
use crate::encoders::DualEncoder;
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::perturbation::{Rule, TextPipeline, TokenizedReport};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use crate::train::sgd_step;

/// The original must beat every perturbation by more than this to count as
/// ranked first.
pub const TIE_TOLERANCE: f64 = 1e-9;

/// Items encoded per forward pass during evaluation.
const EVAL_CHUNK: usize = 256;

/// Anything that maps images and reports to global embeddings.
pub trait EmbeddingModel {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>>;
    fn embed_texts(&self, reports: &[&TokenizedReport]) -> Result<Vec<Vec<f64>>>;
}

fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    let width = t.shape()[1];
    t.data().chunks(width).map(<[f64]>::to_vec).collect()
}

impl EmbeddingModel for DualEncoder {
    fn embed_images(&self, images: &[&Image]) -> Result<Vec<Vec<f64>>> {
        let bound = self.params.freeze();
        let mut out = Vec::with_capacity(images.len());
        for chunk in images.chunks(EVAL_CHUNK) {
            out.extend(rows(&self.encode_images(&bound, chunk)?.global));
        }
        Ok(out)
    }

    fn embed_texts(&self, reports: &[&TokenizedReport]) -> Result<Vec<Vec<f64>>> {
        let bound = self.params.freeze();
        let mut out = Vec::with_capacity(reports.len());
        for chunk in reports.chunks(EVAL_CHUNK) {
            out.extend(rows(&self.encode_texts(&bound, chunk)?.global));
        }
        Ok(out)
    }
}

/// Cosine similarity of two vectors.
pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::InvalidArgument(format!("lengths {} and {} differ", a.len(), b.len())));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na <= 1e-12 || nb <= 1e-12 {
        return Err(Error::ZeroNorm);
    }
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Cosine similarity of two embedding tensors.
pub fn cosine_similarity(e_i: &Tensor, e_t: &Tensor) -> Result<f64> {
    cosine(e_i.data(), e_t.data())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StructureEvalResult {
    pub n_samples: usize,
    pub n_correct: usize,
    pub accuracy: f64,
    /// Samples dropped because every perturbation was degenerate.
    pub skipped: usize,
    /// For each wrongly ranked sample, the rule of the best-scoring variant.
    pub per_rule: BTreeMap<String, usize>,
    pub seed: u64,
}

/// Ranks one image's candidates: index 0 is the original. Returns `None` when
/// the original is the strict argmax, otherwise the index of the strongest
/// competitor (first on ties).
pub fn strongest_competitor(image: &[f64], candidates: &[Vec<f64>]) -> Result<Option<usize>> {
    let sims = candidates.iter().map(|c| cosine(image, c)).collect::<Result<Vec<_>>>()?;
    let mut best = 1;
    for (j, &s) in sims.iter().enumerate().skip(1) {
        if s > sims[best] {
            best = j;
        }
    }
    Ok((sims[0] - sims[best] <= TIE_TOLERANCE).then_some(best))
}

/// Zero-shot structure evaluation: is the original report closer to its
/// image than all of its perturbations?
pub fn structure_eval<M: EmbeddingModel + ?Sized>(
    pairs: &[SyntheticPair],
    model: &M,
    pipeline: &TextPipeline,
    seed: u64,
) -> Result<StructureEvalResult> {
    if pairs.is_empty() {
        return Err(Error::InvalidArgument("no pairs to evaluate".into()));
    }
    let mut per_rule: BTreeMap<String, usize> = Rule::ALL.iter().map(|r| (r.name().to_string(), 0)).collect();
    let (mut n, mut correct, mut skipped) = (0, 0, 0);
    let images: Vec<&Image> = pairs.iter().map(|p| &p.image).collect();
    let image_embs = model.embed_images(&images)?;
    for (pair, image_emb) in pairs.iter().zip(&image_embs) {
        let report = pipeline.process(&pair.report)?;
        let set = pipeline.perturbations(&report, derive_seed(seed, pair.id as u64))?;
        let variants: Vec<_> = set.usable().collect();
        if variants.is_empty() {
            log::warn!("sample {}: every perturbation is degenerate, skipped", pair.id);
            skipped += 1;
            continue;
        }
        let mut texts = vec![report.clone()];
        texts.extend(variants.iter().map(|v| pipeline.variant_report(v)));
        let refs: Vec<&TokenizedReport> = texts.iter().collect();
        let text_embs = model.embed_texts(&refs)?;
        n += 1;
        match strongest_competitor(image_emb, &text_embs)? {
            None => correct += 1,
            Some(j) => *per_rule.get_mut(variants[j - 1].rule.name()).expect("all rules listed") += 1,
        }
    }
    if n == 0 {
        return Err(Error::InvalidArgument("every sample was skipped".into()));
    }
    Ok(StructureEvalResult {
        n_samples: n,
        n_correct: correct,
        accuracy: correct as f64 / n as f64,
        skipped,
        per_rule,
        seed,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub n: usize,
    pub k_values: Vec<usize>,
    pub image_to_text: Vec<f64>,
    pub text_to_image: Vec<f64>,
}

impl RetrievalResult {
    pub fn recall(&self, k: usize, image_to_text: bool) -> Option<f64> {
        let i = self.k_values.iter().position(|&v| v == k)?;
        Some(if image_to_text { self.image_to_text[i] } else { self.text_to_image[i] })
    }
}

/// Rank (1-based) of `truth` among `scores`. Ties with other candidates
/// count against the true partner.
pub fn rank_of(scores: &[f64], truth: usize) -> usize {
    let s = scores[truth];
    1 + scores
        .iter()
        .enumerate()
        .filter(|&(j, &v)| j != truth && v >= s)
        .count()
}

/// Recall@k in both directions; pair `i` is `images[i]` with `texts[i]`.
pub fn retrieval_from_embeddings(images: &[Vec<f64>], texts: &[Vec<f64>], k_values: &[usize]) -> Result<RetrievalResult> {
    let n = images.len();
    if texts.len() != n {
        return Err(Error::InvalidArgument(format!("{n} images vs {} texts", texts.len())));
    }
    let max_k = k_values.iter().copied().max().unwrap_or(0);
    if n == 0 || n < max_k || k_values.contains(&0) {
        return Err(Error::InvalidArgument(format!("need at least {max_k} pairs and positive k")));
    }
    let sims = images
        .iter()
        .map(|i| texts.iter().map(|t| cosine(i, t)).collect::<Result<Vec<_>>>())
        .collect::<Result<Vec<_>>>()?;
    let i2t: Vec<usize> = (0..n).map(|i| rank_of(&sims[i], i)).collect();
    let t2i: Vec<usize> = (0..n)
        .map(|j| {
            let col: Vec<f64> = sims.iter().map(|r| r[j]).collect();
            rank_of(&col, j)
        })
        .collect();
    let recall = |ranks: &[usize], k: usize| ranks.iter().filter(|&&r| r <= k).count() as f64 / n as f64;
    Ok(RetrievalResult {
        n,
        k_values: k_values.to_vec(),
        image_to_text: k_values.iter().map(|&k| recall(&i2t, k)).collect(),
        text_to_image: k_values.iter().map(|&k| recall(&t2i, k)).collect(),
    })
}

pub fn retrieval_eval<M: EmbeddingModel + ?Sized>(
    pairs: &[SyntheticPair],
    model: &M,
    pipeline: &TextPipeline,
    k_values: &[usize],
) -> Result<RetrievalResult> {
    let images: Vec<&Image> = pairs.iter().map(|p| &p.image).collect();
    let reports = pairs
        .iter()
        .map(|p| pipeline.process(&p.report))
        .collect::<Result<Vec<_>>>()?;
    let refs: Vec<&TokenizedReport> = reports.iter().collect();
    retrieval_from_embeddings(&model.embed_images(&images)?, &model.embed_texts(&refs)?, k_values)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Held-out samples; half the data when unset.
    pub test_size: Option<usize>,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            test_size: None,
            seed: 0,
            epochs: 300,
            lr: 0.5,
            momentum: 0.9,
            weight_decay: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub n_train: usize,
    pub n_test: usize,
    /// Held-out accuracy per finding.
    pub accuracy: Vec<f64>,
}

/// Fits one logistic-regression classifier per finding on standardized
/// frozen embeddings and reports held-out accuracy.
pub fn linear_probe(embeddings: &[Vec<f64>], labels: &[Vec<bool>], config: &ProbeConfig) -> Result<ProbeResult> {
    let n = embeddings.len();
    if labels.len() != n || n < 2 {
        return Err(Error::InvalidArgument(format!("{n} embeddings vs {} label rows", labels.len())));
    }
    let d = embeddings[0].len();
    let findings = labels[0].len();
    if embeddings.iter().any(|e| e.len() != d) || labels.iter().any(|l| l.len() != findings) {
        return Err(Error::InvalidArgument("ragged embeddings or labels".into()));
    }
    let n_test = config.test_size.unwrap_or(n / 2);
    if n_test == 0 || n_test >= n {
        return Err(Error::InvalidArgument(format!("test size {n_test} leaves no train or test data")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng_from(config.seed));
    let (test, train) = order.split_at(n_test);

    let mut mean = vec![0.0; d];
    let mut std = vec![0.0; d];
    for &i in train {
        mean.iter_mut().zip(&embeddings[i]).for_each(|(m, v)| *m += v / train.len() as f64);
    }
    for &i in train {
        std.iter_mut()
            .zip(embeddings[i].iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m) * (v - m) / train.len() as f64);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-12));
    let features = |idx: &[usize]| -> Result<Tensor> {
        let data = idx
            .iter()
            .flat_map(|&i| embeddings[i].iter().zip(&mean).zip(&std).map(|((v, m), s)| (v - m) / s))
            .collect();
        Tensor::new(data, &[idx.len(), d])
    };
    let x_train = features(train)?;
    let x_test = features(test)?;

    let mut accuracy = Vec::with_capacity(findings);
    for f in 0..findings {
        let y: Vec<usize> = train.iter().map(|&i| labels[i][f] as usize).collect();
        if y.iter().all(|&c| c == y[0]) {
            return Err(Error::InvalidArgument(format!("degenerate split: finding {f} has one class in training")));
        }
        let mut store = ParamStore::new();
        let w = store.add("probe.weight", &[d, 2], Init::Zeros, 0);
        let b = store.add("probe.bias", &[2], Init::Zeros, 0);
        let mut buffers: Vec<Vec<f64>> = store.iter().map(|p| vec![0.0; p.data.len()]).collect();
        let target: Vec<Option<usize>> = y.iter().enumerate().map(|(r, &c)| Some(r * 2 + c)).collect();
        for _ in 0..config.epochs {
            let bound = store.bind();
            let logits = x_train.matmul(bound.get(w))?.add_row(bound.get(b))?;
            let loss = logits
                .log_softmax(1)?
                .gather(target.clone(), &[y.len()])?
                .mean()
                .scale(-1.0);
            loss.backward()?;
            sgd_step(&mut store, &bound.grads(), &mut buffers, config.lr, config.momentum, config.weight_decay)?;
        }
        let bound = store.freeze();
        let logits = x_test.matmul(bound.get(w))?.add_row(bound.get(b))?;
        let hits = test
            .iter()
            .enumerate()
            .filter(|&(r, &i)| (logits.data()[r * 2 + 1] > logits.data()[r * 2]) == labels[i][f])
            .count();
        accuracy.push(hits as f64 / n_test as f64);
    }
    Ok(ProbeResult {
        n_train: train.len(),
        n_test,
        accuracy,
    })
}

/// Linear probe on a model's frozen global image embeddings.
pub fn probe_model<M: EmbeddingModel + ?Sized>(pairs: &[SyntheticPair], model: &M, config: &ProbeConfig) -> Result<ProbeResult> {
    let images: Vec<&Image> = pairs.iter().map(|p| &p.image).collect();
    let labels: Vec<Vec<bool>> = pairs.iter().map(|p| p.labels.clone()).collect();
    linear_probe(&model.embed_images(&images)?, &labels, config)
}

/// Expected accuracy of uniformly random ranking: the mean of one over the
/// candidate count of every sample.
pub fn random_structure_baseline(pairs: &[SyntheticPair], pipeline: &TextPipeline, seed: u64) -> Result<f64> {
    let mut total = 0.0;
    let mut n = 0;
    for pair in pairs {
        let report = pipeline.process(&pair.report)?;
        let set = pipeline.perturbations(&report, derive_seed(seed, pair.id as u64))?;
        let usable = set.usable().count();
        if usable > 0 {
            total += 1.0 / (usable + 1) as f64;
            n += 1;
        }
    }
    Ok(if n == 0 { 0.0 } else { total / n as f64 })
}
