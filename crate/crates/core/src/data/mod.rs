//! Synthetic paired corpus: toy images, grammar-generated reports and their
//! on-disk form.

mod image;
mod synthetic;

use std::io::{BufRead, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

pub use image::Image;
pub use synthetic::{
    compose_report, generate_corpus, generate_pair, glyph_mask, parse_report, render, ParsedReport, SyntheticPair,
    FINDINGS, FINDING_NAMES, GLYPH_INTENSITY, MIN_SIDE, NOISE_AMPLITUDE,
};

use crate::error::{Error, Result};

pub const CORPUS_FILE: &str = "corpus.jsonl";
pub const IMAGE_DIR: &str = "images";

/// One line of `corpus.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusRecord {
    pub id: usize,
    pub report: String,
    pub labels: Vec<bool>,
    /// Relative to the corpus directory.
    pub image_file: String,
    #[serde(default)]
    pub severe: Vec<bool>,
    #[serde(default)]
    pub seed: u64,
}

/// Writes `corpus.jsonl` and one PGM per sample under `dir`.
pub fn save_corpus(dir: &Path, pairs: &[SyntheticPair]) -> Result<()> {
    std::fs::create_dir_all(dir.join(IMAGE_DIR))?;
    let mut out = BufWriter::new(std::fs::File::create(dir.join(CORPUS_FILE))?);
    for pair in pairs {
        let image_file = format!("{IMAGE_DIR}/{:06}.pgm", pair.id);
        pair.image.write_pgm(&dir.join(&image_file))?;
        let record = CorpusRecord {
            id: pair.id,
            report: pair.report.clone(),
            labels: pair.labels.clone(),
            image_file,
            severe: pair.severe.clone(),
            seed: pair.seed,
        };
        serde_json::to_writer(&mut out, &record)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

/// Reads a corpus written by [`save_corpus`]. `dir` may also point straight
/// at a `.jsonl` file.
pub fn load_corpus(dir: &Path) -> Result<Vec<SyntheticPair>> {
    let (root, index): (PathBuf, PathBuf) = if dir.is_file() {
        (dir.parent().unwrap_or(Path::new(".")).to_path_buf(), dir.to_path_buf())
    } else {
        (dir.to_path_buf(), dir.join(CORPUS_FILE))
    };
    let file = std::fs::File::open(&index)
        .map_err(|e| Error::Data(format!("cannot open corpus {}: {e}", index.display())))?;
    let mut pairs = Vec::new();
    for (n, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let record: CorpusRecord = serde_json::from_str(&line)
            .map_err(|e| Error::Data(format!("{} line {}: {e}", index.display(), n + 1)))?;
        let image = Image::read_pgm(&root.join(&record.image_file))?;
        let severe = if record.severe.is_empty() {
            vec![false; record.labels.len()]
        } else {
            record.severe
        };
        pairs.push(SyntheticPair {
            id: record.id,
            image,
            report: record.report,
            labels: record.labels,
            severe,
            seed: record.seed,
        });
    }
    if pairs.is_empty() {
        return Err(Error::Data(format!("corpus {} is empty", index.display())));
    }
    Ok(pairs)
}
