//! Lexicon lookup with suffix fallback.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::tokenizer::TokenizedReport;
use crate::error::{Error, Result};

const SHIPPED_LEXICON: &str = include_str!("../../data/lexicon.tsv");
const SHIPPED_ANTONYMS: &str = include_str!("../../data/antonyms.tsv");

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum PosTag {
    Noun,
    Verb,
    Adj,
    Other,
}

impl FromStr for PosTag {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "NOUN" => Ok(PosTag::Noun),
            "VERB" => Ok(PosTag::Verb),
            "ADJ" => Ok(PosTag::Adj),
            "OTHER" => Ok(PosTag::Other),
            other => Err(Error::Data(format!("unknown POS tag `{other}`"))),
        }
    }
}

impl fmt::Display for PosTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            PosTag::Noun => "NOUN",
            PosTag::Verb => "VERB",
            PosTag::Adj => "ADJ",
            PosTag::Other => "OTHER",
        })
    }
}

const NOUN_SUFFIXES: [&str; 4] = ["tion", "sion", "sis", "oma"];
const ADJ_SUFFIXES: [&str; 4] = ["ous", "al", "ic", "ar"];
const VERB_SUFFIXES: [&str; 2] = ["ed", "ing"];
const VERB_FORMS: [&str; 4] = ["is", "are", "was", "were"];

/// POS lexicon plus antonym table, both loaded from tab-separated files.
#[derive(Debug, Clone, Default)]
pub struct Lexicon {
    tags: HashMap<String, PosTag>,
    antonyms: HashMap<String, String>,
}

fn tsv_pairs(text: &str) -> impl Iterator<Item = Result<(&str, &str)>> {
    text.lines()
        .map(str::trim)
        .filter(|l| !l.is_empty() && !l.starts_with('#'))
        .map(|l| {
            l.split_once('\t')
                .map(|(a, b)| (a.trim(), b.trim()))
                .ok_or_else(|| Error::Data(format!("expected `word<TAB>value`, got `{l}`")))
        })
}

impl Lexicon {
    pub fn from_tsv(lexicon: &str, antonyms: &str) -> Result<Self> {
        let mut tags = HashMap::new();
        for pair in tsv_pairs(lexicon) {
            let (word, tag) = pair?;
            tags.insert(word.to_lowercase(), tag.parse()?);
        }
        let mut table = HashMap::new();
        for pair in tsv_pairs(antonyms) {
            let (a, b) = pair?;
            table.insert(a.to_lowercase(), b.to_lowercase());
            table.insert(b.to_lowercase(), a.to_lowercase());
        }
        Ok(Lexicon { tags, antonyms: table })
    }

    pub fn shipped() -> Self {
        Self::from_tsv(SHIPPED_LEXICON, SHIPPED_ANTONYMS).expect("shipped lexicon is well-formed")
    }

    pub fn antonym(&self, word: &str) -> Option<&str> {
        self.antonyms.get(word).map(String::as_str)
    }

    /// Lexicon entry, then suffix heuristics, then `Other`.
    pub fn tag_word(&self, word: &str) -> PosTag {
        if let Some(&tag) = self.tags.get(word) {
            return tag;
        }
        if VERB_FORMS.contains(&word) {
            return PosTag::Verb;
        }
        let ends = |suffixes: &[&str]| suffixes.iter().any(|s| word.len() > s.len() && word.ends_with(s));
        if ends(&NOUN_SUFFIXES) {
            PosTag::Noun
        } else if ends(&ADJ_SUFFIXES) {
            PosTag::Adj
        } else if ends(&VERB_SUFFIXES) {
            PosTag::Verb
        } else {
            PosTag::Other
        }
    }

    pub fn pos_tag(&self, mut report: TokenizedReport) -> TokenizedReport {
        report.pos = Some(report.tokens.iter().map(|t| self.tag_word(t)).collect());
        report
    }
}
