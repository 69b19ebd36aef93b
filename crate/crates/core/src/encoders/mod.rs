//! Small trainable image and text encoders producing global and local
//! embeddings.

mod image;
mod text;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use image::{conv_out_side, receptive_field, ImageBatch, ImageEncoder};
pub use text::{aggregate_subwords, position_signal, TextBatch, TextEncoder};

use crate::data::Image;
use crate::error::{Error, Result};
use crate::params::{Bound, ParamStore};
use crate::perturbation::{TokenizedReport, Vocabulary};
use crate::tensor::Tensor;

pub const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EncoderConfig {
    /// Joint embedding width `d_e`.
    pub embed_dim: usize,
    /// Sub-regions per side; `M = grid²`.
    pub grid: usize,
    /// Sub-word feature width `K`.
    pub subword_dim: usize,
    pub image_side: usize,
    pub image_channels: usize,
    pub conv_channels: Vec<usize>,
    /// Conv layer whose map feeds the local embeddings; the last one if unset.
    pub local_feature_layer: Option<usize>,
    pub ffn_hidden: usize,
    pub position_signal: bool,
    pub init_seed: u64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            embed_dim: 32,
            grid: 4,
            subword_dim: 32,
            image_side: 32,
            image_channels: 1,
            conv_channels: vec![8, 16, 32],
            local_feature_layer: None,
            ffn_hidden: 64,
            position_signal: true,
            init_seed: 0,
        }
    }
}

impl EncoderConfig {
    pub fn regions(&self) -> usize {
        self.grid * self.grid
    }

    pub fn local_layer(&self) -> usize {
        self.local_feature_layer
            .unwrap_or(self.conv_channels.len().saturating_sub(1))
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("embed_dim", self.embed_dim),
            ("grid", self.grid),
            ("subword_dim", self.subword_dim),
            ("image_side", self.image_side),
            ("image_channels", self.image_channels),
            ("ffn_hidden", self.ffn_hidden),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.conv_channels.is_empty() || self.conv_channels.contains(&0) {
            return Err(Error::Config("conv_channels must be non-empty and positive".into()));
        }
        if self.local_layer() >= self.conv_channels.len() {
            return Err(Error::Config(format!(
                "local_feature_layer {} out of range for {} conv layers",
                self.local_layer(),
                self.conv_channels.len()
            )));
        }
        let side = (0..=self.local_layer()).fold(self.image_side, |s, _| conv_out_side(s));
        if side % self.grid != 0 {
            return Err(Error::Config(format!(
                "grid {} does not divide the {side}x{side} local feature map",
                self.grid
            )));
        }
        Ok(())
    }
}

/// Per-sample embeddings, in column-major orientation for the local parts.
#[derive(Debug, Clone)]
pub struct EmbeddingBundle {
    /// `d_e`
    pub e_i: Tensor,
    /// `d_e × M`
    pub e_i_local: Tensor,
    /// `d_e`
    pub e_t: Tensor,
    /// `K × N`
    pub e_t_sub: Tensor,
    /// `d_e × W`
    pub e_t_local: Tensor,
}

/// Image and text encoders sharing one parameter store.
#[derive(Debug, Clone)]
pub struct DualEncoder {
    pub config: EncoderConfig,
    pub vocab: Vocabulary,
    pub params: ParamStore,
    image: ImageEncoder,
    text: TextEncoder,
}

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    format_version: u32,
    config: EncoderConfig,
    vocab_size: usize,
    params: ParamStore,
}

impl DualEncoder {
    pub fn new(config: EncoderConfig, vocab: Vocabulary) -> Result<Self> {
        config.validate()?;
        let mut params = ParamStore::new();
        let image = ImageEncoder::new(&config, &mut params)?;
        let text = TextEncoder::new(&config, vocab.len(), &mut params);
        Ok(DualEncoder {
            config,
            vocab,
            params,
            image,
            text,
        })
    }

    pub fn image_encoder(&self) -> &ImageEncoder {
        &self.image
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn encode_images(&self, bound: &Bound, images: &[&Image]) -> Result<ImageBatch> {
        self.image.forward(bound, images)
    }

    pub fn encode_texts(&self, bound: &Bound, reports: &[&TokenizedReport]) -> Result<TextBatch> {
        self.text.forward(bound, &self.vocab, reports)
    }

    /// `(e_i, e_i_local)` for one image.
    pub fn encode_image(&self, bound: &Bound, image: &Image) -> Result<(Tensor, Tensor)> {
        let batch = self.encode_images(bound, &[image])?;
        let e_i = batch.global.reshape(&[self.config.embed_dim])?;
        Ok((e_i, batch.local(0)?))
    }

    /// `(e_t, e_t_sub, e_t_local)` for one report.
    pub fn encode_text(&self, bound: &Bound, report: &TokenizedReport) -> Result<(Tensor, Tensor, Tensor)> {
        let batch = self.encode_texts(bound, &[report])?;
        let e_t = batch.global.reshape(&[self.config.embed_dim])?;
        let e_t_sub = batch.subwords(0)?;
        let (w, b) = self.text.word_projection(bound);
        let e_t_local = aggregate_subwords(&e_t_sub, &report.word_spans(), w, b)?;
        Ok((e_t, e_t_sub, e_t_local))
    }

    pub fn encode_pair(&self, bound: &Bound, image: &Image, report: &TokenizedReport) -> Result<EmbeddingBundle> {
        let (e_i, e_i_local) = self.encode_image(bound, image)?;
        let (e_t, e_t_sub, e_t_local) = self.encode_text(bound, report)?;
        Ok(EmbeddingBundle {
            e_i,
            e_i_local,
            e_t,
            e_t_sub,
            e_t_local,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = CheckpointFile {
            format_version: CHECKPOINT_FORMAT,
            config: self.config.clone(),
            vocab_size: self.vocab.len(),
            params: self.params.clone(),
        };
        let out = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer(out, &file)?;
        Ok(())
    }

    /// Loads weights saved by [`DualEncoder::save`], rebuilding the
    /// architecture from the embedded config and checking every shape.
    pub fn load(path: &Path, vocab: Vocabulary) -> Result<Self> {
        let reader = std::io::BufReader::new(std::fs::File::open(path)?);
        let file: CheckpointFile = serde_json::from_reader(reader)?;
        if file.format_version != CHECKPOINT_FORMAT {
            return Err(Error::Config(format!(
                "unsupported checkpoint format {}",
                file.format_version
            )));
        }
        if file.vocab_size != vocab.len() {
            return Err(Error::Config(format!(
                "checkpoint vocabulary has {} entries, tokenizer has {}",
                file.vocab_size,
                vocab.len()
            )));
        }
        let mut model = DualEncoder::new(file.config, vocab)?;
        model.params.load_from(&file.params)?;
        Ok(model)
    }
}
