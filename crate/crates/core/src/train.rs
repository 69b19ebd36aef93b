//! Pre-training loop: seeded batching, loss assembly with on-the-fly
//! perturbations, momentum SGD, metrics and resumable checkpoints.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::{Image, SyntheticPair};
use crate::encoders::{DualEncoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::losses::{
    global_contrastive_loss, local_contrastive_loss_stacked, perturbation_loss_batch, total_loss, LossBreakdown,
    LossWeights, PertGroup,
};
use crate::params::ParamStore;
use crate::perturbation::{TextPipeline, TokenizedReport};
use crate::rng::{derive_path, rng_from};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Seeds {
    /// Shuffling order.
    pub data: u64,
    /// Parameter initialization.
    pub init: u64,
    /// Perturbation draws.
    pub perturbation: u64,
}

impl Default for Seeds {
    fn default() -> Self {
        Seeds {
            data: 1,
            init: 2,
            perturbation: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub weights: LossWeights,
    pub seeds: Seeds,
    pub encoder: EncoderConfig,
    pub corpus: Option<PathBuf>,
    /// Save a checkpoint every this many epochs; 0 saves only the last one.
    pub checkpoint_every: usize,
    /// Stop gradients at the perturbed-report embeddings.
    pub detach_negatives: bool,
    /// Compute zero-weighted loss terms anyway so they show up in metrics.
    pub monitor_disabled_terms: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 150,
            batch_size: 64,
            lr: 0.0015,
            momentum: 0.9,
            weight_decay: 5e-4,
            weights: LossWeights::default(),
            seeds: Seeds::default(),
            encoder: EncoderConfig::default(),
            corpus: None,
            checkpoint_every: 0,
            detach_negatives: false,
            monitor_disabled_terms: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Config(format!("weight_decay must be non-negative, got {}", self.weight_decay)));
        }
        self.weights.validate()?;
        self.encoder.validate()
    }

    /// Encoder config with the init seed taken from `seeds`.
    pub fn encoder_config(&self) -> EncoderConfig {
        EncoderConfig {
            init_seed: self.seeds.init,
            ..self.encoder.clone()
        }
    }
}

/// One optimizer step's losses.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub epoch: usize,
    pub step: usize,
    pub global: f64,
    pub local: f64,
    pub pert: f64,
    pub total: f64,
}

/// Mean total loss of each epoch, in epoch order.
pub fn epoch_means(history: &[MetricsRow]) -> Vec<(usize, f64)> {
    let mut out: Vec<(usize, f64, usize)> = Vec::new();
    for row in history {
        match out.last_mut() {
            Some((e, sum, n)) if *e == row.epoch => {
                *sum += row.total;
                *n += 1;
            }
            _ => out.push((row.epoch, row.total, 1)),
        }
    }
    out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
}

/// Momentum SGD with coupled L2 on one buffer:
/// `buf ← m·buf + g + wd·p`, `p ← p − lr·buf`.
pub fn sgd_update(param: &mut [f64], grad: &[f64], buf: &mut [f64], lr: f64, momentum: f64, weight_decay: f64) -> Result<()> {
    if grad.len() != param.len() || buf.len() != param.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd shapes disagree: param {}, grad {}, buffer {}",
            param.len(),
            grad.len(),
            buf.len()
        )));
    }
    for ((p, g), b) in param.iter_mut().zip(grad).zip(buf.iter_mut()) {
        *b = momentum * *b + g + weight_decay * *p;
        *p -= lr * *b;
    }
    Ok(())
}

/// [`sgd_update`] over every parameter of a store.
pub fn sgd_step(
    params: &mut ParamStore,
    grads: &[Vec<f64>],
    buffers: &mut [Vec<f64>],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() || buffers.len() != params.len() {
        return Err(Error::InvalidArgument(format!(
            "sgd expects {} gradients and buffers, got {} and {}",
            params.len(),
            grads.len(),
            buffers.len()
        )));
    }
    for ((p, g), b) in params.iter_mut().zip(grads).zip(buffers.iter_mut()) {
        sgd_update(&mut p.data, g, b, lr, momentum, weight_decay)?;
    }
    Ok(())
}

/// Everything needed to continue training exactly where it stopped. All
/// random streams are derived from the seeds and the epoch counter, so the
/// seeds stand in for generator states.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointState {
    pub format_version: u32,
    pub config: TrainConfig,
    pub params: ParamStore,
    pub momentum: Vec<Vec<f64>>,
    /// Completed epochs.
    pub epoch: usize,
    /// Completed optimizer steps.
    pub step: usize,
    pub perturbation_sets: usize,
}

impl CheckpointState {
    pub fn save(&self, path: &Path) -> Result<()> {
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, self)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let state: CheckpointState = serde_json::from_reader(reader)?;
        if state.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}",
                state.format_version
            )));
        }
        Ok(state)
    }
}

/// Training state over one corpus.
pub struct Trainer<'a> {
    pub config: TrainConfig,
    pub model: DualEncoder,
    pipeline: TextPipeline,
    corpus: &'a [SyntheticPair],
    reports: Vec<TokenizedReport>,
    momentum: Vec<Vec<f64>>,
    epoch: usize,
    step: usize,
    perturbation_sets: usize,
}

fn non_finite(component: &'static str, epoch: usize, step: usize) -> impl Fn(Error) -> Error {
    move |e| match e {
        Error::NonFinite | Error::ZeroNorm => Error::NonFiniteLoss { component, epoch, step },
        other => other,
    }
}

fn finite(t: &Tensor, component: &'static str, epoch: usize, step: usize) -> Result<()> {
    if t.item().is_finite() {
        Ok(())
    } else {
        Err(Error::NonFiniteLoss { component, epoch, step })
    }
}

impl<'a> Trainer<'a> {
    pub fn new(config: TrainConfig, corpus: &'a [SyntheticPair]) -> Result<Self> {
        config.validate()?;
        let pipeline = TextPipeline::default();
        let model = DualEncoder::new(config.encoder_config(), pipeline.tokenizer.vocab().clone())?;
        Self::assemble(config, model, pipeline, corpus)
    }

    pub fn resume(state: CheckpointState, corpus: &'a [SyntheticPair]) -> Result<Self> {
        let mut trainer = Self::new(state.config.clone(), corpus)?;
        trainer.model.params.load_from(&state.params)?;
        if state.momentum.len() != trainer.momentum.len()
            || state.momentum.iter().zip(&trainer.momentum).any(|(a, b)| a.len() != b.len())
        {
            return Err(Error::Config("checkpoint momentum buffers do not match the model".into()));
        }
        trainer.momentum = state.momentum;
        trainer.epoch = state.epoch;
        trainer.step = state.step;
        trainer.perturbation_sets = state.perturbation_sets;
        Ok(trainer)
    }

    fn assemble(config: TrainConfig, model: DualEncoder, pipeline: TextPipeline, corpus: &'a [SyntheticPair]) -> Result<Self> {
        if corpus.is_empty() {
            return Err(Error::InvalidArgument("training corpus is empty".into()));
        }
        if config.batch_size > corpus.len() {
            return Err(Error::Config(format!(
                "batch_size {} exceeds corpus size {}",
                config.batch_size,
                corpus.len()
            )));
        }
        let reports = corpus
            .iter()
            .map(|p| pipeline.process(&p.report))
            .collect::<Result<Vec<_>>>()?;
        let momentum = model.params.iter().map(|p| vec![0.0; p.data.len()]).collect();
        Ok(Trainer {
            config,
            model,
            pipeline,
            corpus,
            reports,
            momentum,
            epoch: 0,
            step: 0,
            perturbation_sets: 0,
        })
    }

    /// Completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn finished(&self) -> bool {
        self.epoch >= self.config.epochs
    }

    /// Perturbation sets generated so far.
    pub fn perturbation_sets(&self) -> usize {
        self.perturbation_sets
    }

    pub fn checkpoint(&self) -> CheckpointState {
        CheckpointState {
            format_version: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            params: self.model.params.clone(),
            momentum: self.momentum.clone(),
            epoch: self.epoch,
            step: self.step,
            perturbation_sets: self.perturbation_sets,
        }
    }

    /// Whether a checkpoint is due after the epoch just completed.
    pub fn checkpoint_due(&self) -> bool {
        let every = self.config.checkpoint_every;
        self.finished() || (every > 0 && self.epoch.is_multiple_of(every))
    }

    /// Sample order of epoch `epoch` (1-based).
    pub fn epoch_order(&self, epoch: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.corpus.len()).collect();
        order.shuffle(&mut rng_from(derive_path(self.config.seeds.data, &[epoch as u64])));
        order
    }

    /// Runs one epoch and returns its metric rows.
    pub fn run_epoch(&mut self) -> Result<Vec<MetricsRow>> {
        let epoch = self.epoch + 1;
        let order = self.epoch_order(epoch);
        let mut rows = Vec::new();
        for batch in order.chunks(self.config.batch_size) {
            rows.push(self.train_step(epoch, batch)?);
        }
        self.epoch = epoch;
        Ok(rows)
    }

    fn train_step(&mut self, epoch: usize, batch: &[usize]) -> Result<MetricsRow> {
        let step = self.step + 1;
        let weights = self.config.weights;
        let want_local = weights.alpha > 0.0 || self.config.monitor_disabled_terms;
        let want_pert = weights.beta > 0.0 || self.config.monitor_disabled_terms;

        let mut texts: Vec<TokenizedReport> = batch.iter().map(|&i| self.reports[i].clone()).collect();
        let mut groups = Vec::new();
        if want_pert {
            for (b, &i) in batch.iter().enumerate() {
                let seed = derive_path(self.config.seeds.perturbation, &[self.corpus[i].id as u64, epoch as u64]);
                let set = self.pipeline.perturbations(&self.reports[i], seed)?;
                self.perturbation_sets += 1;
                let start = texts.len();
                texts.extend(set.usable().map(|v| self.pipeline.variant_report(v)));
                if texts.len() > start {
                    groups.push(PertGroup {
                        sample: b,
                        positive: b,
                        negatives: (start..texts.len()).collect(),
                    });
                }
            }
        }

        let bound = self.model.params.bind();
        let images: Vec<&Image> = batch.iter().map(|&i| &self.corpus[i].image).collect();
        let img = self.model.encode_images(&bound, &images)?;
        let text_refs: Vec<&TokenizedReport> = texts.iter().collect();
        let txt = self.model.encode_texts(&bound, &text_refs)?;
        let n = batch.len();

        let originals = txt.global.slice_rows(0..n)?;
        let global = global_contrastive_loss(&img.global, &originals, weights.tau)
            .map_err(non_finite("global", epoch, step))?;
        finite(&global, "global", epoch, step)?;

        let local = if want_local {
            let image_locals = (0..n).map(|b| img.local(b)).collect::<Result<Vec<_>>>()?;
            let words_end = txt.word_spans[n - 1].end;
            let words = txt.word_rows.slice_rows(0..words_end)?;
            let l = local_contrastive_loss_stacked(
                &image_locals,
                &words,
                &txt.word_spans[..n],
                weights.local_tau(),
                weights.tau_local,
            )
            .map_err(non_finite("local", epoch, step))?;
            finite(&l, "local", epoch, step)?;
            l
        } else {
            Tensor::scalar(0.0)
        };

        let pert = if want_pert && !groups.is_empty() {
            let all = if self.config.detach_negatives && texts.len() > n {
                Tensor::cat_rows(&[originals.clone(), txt.global.slice_rows(n..texts.len())?.detach()])?
            } else {
                txt.global.clone()
            };
            let p = perturbation_loss_batch(&img.global, &all, &groups, weights.tau)
                .map_err(non_finite("pert", epoch, step))?;
            finite(&p, "pert", epoch, step)?;
            p
        } else {
            Tensor::scalar(0.0)
        };

        let (total, breakdown): (Tensor, LossBreakdown) = total_loss(&global, &local, &pert, &weights)?;
        finite(&total, "total", epoch, step)?;
        total.backward()?;
        let grads = bound.grads();
        if let Some(bad) = grads.iter().position(|g| g.iter().any(|v| !v.is_finite())) {
            log::error!("non-finite gradient in {}", self.model.params.iter().nth(bad).unwrap().name);
            return Err(Error::NonFiniteLoss {
                component: "gradient",
                epoch,
                step,
            });
        }
        sgd_step(
            &mut self.model.params,
            &grads,
            &mut self.momentum,
            self.config.lr,
            self.config.momentum,
            self.config.weight_decay,
        )?;
        self.step = step;
        Ok(MetricsRow {
            epoch,
            step,
            global: breakdown.global,
            local: breakdown.local,
            pert: breakdown.pert,
            total: breakdown.total,
        })
    }
}

/// Result of a complete run.
pub struct TrainOutcome {
    pub history: Vec<MetricsRow>,
    pub model: DualEncoder,
    pub state: CheckpointState,
}

/// Trains for `config.epochs` epochs from scratch.
pub fn train(config: TrainConfig, corpus: &[SyntheticPair]) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config, corpus)?;
    let mut history = Vec::new();
    while !trainer.finished() {
        history.extend(trainer.run_epoch()?);
    }
    let state = trainer.checkpoint();
    Ok(TrainOutcome {
        history,
        model: trainer.model,
        state,
    })
}
