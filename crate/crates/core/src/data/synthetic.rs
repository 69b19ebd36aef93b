use rand::Rng;

use super::Image;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Number of findings per sample.
pub const FINDINGS: usize = 4;
pub const FINDING_NAMES: [&str; FINDINGS] = ["opacity", "effusion", "pneumothorax", "cardiomegaly"];
pub const MIN_SIDE: usize = 16;
pub const NOISE_AMPLITUDE: f64 = 0.1;
pub const GLYPH_INTENSITY: f64 = 0.85;

/// Positive clauses take a severity word in place of `{}`: the adjective for
/// the first three findings, the adverb for the heart.
const POSITIVE: [[&str; 2]; FINDINGS] = [
    ["there is {} focal opacity", "there is a {} focal opacity"],
    ["there is {} pleural effusion", "there is a {} pleural effusion"],
    ["there is {} pneumothorax", "there is a {} pneumothorax"],
    ["the heart is {} enlarged", "the heart size is {} abnormal"],
];
const NEGATIVE: [[&str; 2]; FINDINGS] = [
    ["the lungs are clear", "there is no focal opacity"],
    ["there is no pleural effusion", "there is no evidence of pleural effusion"],
    ["there is no pneumothorax", "there is no evidence of pneumothorax"],
    ["the heart is normal", "the heart size is normal"],
];

/// Quadrant `(row, column)` of each finding's glyph.
const QUADRANT: [(usize, usize); FINDINGS] = [(0, 0), (1, 0), (0, 1), (1, 1)];

/// A toy image paired with the report describing it.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticPair {
    pub id: usize,
    pub image: Image,
    pub report: String,
    pub labels: Vec<bool>,
    /// Severity of each finding; meaningful only where the label is set.
    pub severe: Vec<bool>,
    pub seed: u64,
}

/// Findings recovered from a report's text.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParsedReport {
    pub labels: Vec<bool>,
    pub severe: Vec<bool>,
}

fn severity_word(finding: usize, severe: bool) -> &'static str {
    match (finding == 3, severe) {
        (false, false) => "mild",
        (false, true) => "severe",
        (true, false) => "mildly",
        (true, true) => "severely",
    }
}

/// Whether pixel center `(y, x)` lies on the glyph of `finding` drawn around
/// `(cy, cx)` with radius `r`.
fn glyph_covers(finding: usize, dy: f64, dx: f64, r: f64) -> bool {
    let dist = (dy * dy + dx * dx).sqrt();
    match finding {
        0 => dist <= r,
        1 => dy.abs() <= 0.45 * r && dx.abs() <= r,
        2 => dist <= r && dist >= 0.55 * r,
        _ => dy.abs().max(dx.abs()) <= 0.8 * r,
    }
}

/// Binary mask of one finding's glyph, `side × side`.
pub fn glyph_mask(finding: usize, severe: bool, side: usize) -> Vec<bool> {
    let q = side as f64 / 2.0;
    let (qy, qx) = QUADRANT[finding];
    let cy = (qy as f64 + 0.5) * q;
    let cx = (qx as f64 + 0.5) * q;
    let r = q * if severe { 0.38 } else { 0.2 };
    let mut mask = vec![false; side * side];
    for y in 0..side {
        for x in 0..side {
            mask[y * side + x] = glyph_covers(finding, y as f64 + 0.5 - cy, x as f64 + 0.5 - cx, r);
        }
    }
    mask
}

fn quantize(v: f64) -> f64 {
    (v * 65535.0).round() / 65535.0
}

/// Renders the image for a set of findings with noise drawn from `noise_seed`.
pub fn render(labels: &[bool], severe: &[bool], side: usize, noise_seed: u64) -> Result<Image> {
    if side < MIN_SIDE {
        return Err(Error::InvalidArgument(format!(
            "image side {side} is too small to render glyphs (minimum {MIN_SIDE})"
        )));
    }
    let mut rng = rng_from(noise_seed);
    let mut pixels: Vec<f64> = (0..side * side).map(|_| rng.gen::<f64>() * NOISE_AMPLITUDE).collect();
    for f in 0..FINDINGS {
        if labels[f] {
            for (p, on) in pixels.iter_mut().zip(glyph_mask(f, severe[f], side)) {
                if on {
                    *p += GLYPH_INTENSITY;
                }
            }
        }
    }
    pixels.iter_mut().for_each(|p| *p = quantize(*p));
    Image::new(side, side, 1, pixels)
}

/// Builds the report for a set of findings; `synonyms[f]` picks the phrasing.
pub fn compose_report(labels: &[bool], severe: &[bool], synonyms: &[usize]) -> String {
    (0..FINDINGS)
        .map(|f| {
            if labels[f] {
                POSITIVE[f][synonyms[f]].replace("{}", severity_word(f, severe[f]))
            } else {
                NEGATIVE[f][synonyms[f]].to_string()
            }
        })
        .collect::<Vec<_>>()
        .join(" ")
}

fn finding_of_clause(clause: &[&str]) -> Option<usize> {
    let has = |w: &str| clause.contains(&w);
    if has("opacity") || has("lungs") {
        Some(0)
    } else if has("effusion") {
        Some(1)
    } else if has("pneumothorax") {
        Some(2)
    } else if has("heart") {
        Some(3)
    } else {
        None
    }
}

/// Recovers findings from a report written in the corpus grammar. Clauses
/// start at `the` or `there`.
pub fn parse_report(report: &str) -> Result<ParsedReport> {
    let words: Vec<&str> = report.split_whitespace().collect();
    let mut clauses: Vec<Vec<&str>> = Vec::new();
    for w in words {
        if w == "the" || w == "there" || clauses.is_empty() {
            clauses.push(Vec::new());
        }
        clauses.last_mut().unwrap().push(w);
    }
    let mut labels = [None; FINDINGS];
    let mut severe = vec![false; FINDINGS];
    for clause in &clauses {
        let f = finding_of_clause(clause)
            .ok_or_else(|| Error::Data(format!("unrecognized clause `{}`", clause.join(" "))))?;
        if labels[f].is_some() {
            return Err(Error::Data(format!("finding {} mentioned twice", FINDING_NAMES[f])));
        }
        let negated = clause.iter().any(|w| matches!(*w, "no" | "clear" | "normal"));
        labels[f] = Some(!negated);
        severe[f] = clause.iter().any(|w| matches!(*w, "severe" | "severely"));
    }
    let labels = labels
        .iter()
        .enumerate()
        .map(|(f, l)| l.ok_or_else(|| Error::Data(format!("finding {} not mentioned", FINDING_NAMES[f]))))
        .collect::<Result<Vec<_>>>()?;
    Ok(ParsedReport { labels, severe })
}

/// Sample `id` of the corpus generated from `seed`. Depends only on
/// `(id, side, seed)`, so corpora can be generated in shards.
pub fn generate_pair(id: usize, side: usize, seed: u64) -> Result<SyntheticPair> {
    let sample_seed = derive_seed(seed, id as u64);
    let mut rng = rng_from(derive_seed(sample_seed, 0));
    let labels: Vec<bool> = (0..FINDINGS).map(|_| rng.gen_bool(0.5)).collect();
    let severe: Vec<bool> = (0..FINDINGS).map(|_| rng.gen_bool(0.5)).collect();
    let synonyms: Vec<usize> = (0..FINDINGS).map(|_| rng.gen_range(0..2)).collect();
    let image = render(&labels, &severe, side, derive_seed(sample_seed, 1))?;
    Ok(SyntheticPair {
        id,
        image,
        report: compose_report(&labels, &severe, &synonyms),
        labels,
        severe,
        seed: sample_seed,
    })
}

pub fn generate_corpus(n: usize, side: usize, seed: u64) -> Result<Vec<SyntheticPair>> {
    if n == 0 {
        return Err(Error::InvalidArgument("corpus size must be at least 1".into()));
    }
    (0..n).map(|id| generate_pair(id, side, seed)).collect()
}
