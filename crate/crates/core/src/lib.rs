//! Multi-scale contrastive vision-language pre-training with perturbed
//! report discrimination.
//!
//! The crate carries its own small reverse-mode autodiff engine
//! ([`tensor`]), a rule-based report perturbation engine ([`perturbation`]),
//! small image and text encoders ([`encoders`]), the global, local and
//! perturbation losses ([`losses`]), a synthetic paired corpus ([`data`]),
//! the training loop ([`train`]) and evaluation harnesses ([`eval`]).

pub mod data;
pub mod encoders;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod losses;
pub mod params;
pub mod perturbation;
pub mod rng;
pub mod tensor;
pub mod train;

pub use data::{generate_corpus, Image, SyntheticPair};
pub use encoders::{DualEncoder, EmbeddingBundle, EncoderConfig};
pub use error::{Error, Result};
pub use eval::{EmbeddingModel, RetrievalResult, StructureEvalResult};
pub use losses::{LossBreakdown, LossWeights};
pub use perturbation::{PerturbationSet, PosTag, Rule, TextPipeline, TokenizedReport};
pub use tensor::Tensor;
pub use train::{CheckpointState, MetricsRow, TrainConfig};
