use std::collections::HashMap;
use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::tagger::PosTag;
use crate::error::{Error, Result};

const SHIPPED_VOCAB: &str = include_str!("../../data/vocab.txt");

pub const UNK: &str = "[UNK]";
pub const UNK_ID: usize = 0;

/// Word-piece vocabulary. Continuation pieces carry a `##` prefix.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    pieces: Vec<String>,
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// One piece per line; `[UNK]` is always id 0.
    pub fn from_lines(text: &str) -> Self {
        let mut pieces = vec![UNK.to_string()];
        let mut index = HashMap::from([(UNK.to_string(), UNK_ID)]);
        for line in text.lines().map(str::trim).filter(|l| !l.is_empty()) {
            if !index.contains_key(line) {
                index.insert(line.to_string(), pieces.len());
                pieces.push(line.to_string());
            }
        }
        Vocabulary { pieces, index }
    }

    pub fn shipped() -> Self {
        Self::from_lines(SHIPPED_VOCAB)
    }

    pub fn len(&self) -> usize {
        self.pieces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pieces.is_empty()
    }

    pub fn contains(&self, piece: &str) -> bool {
        self.index.contains_key(piece)
    }

    /// Id of `piece`, or [`UNK_ID`].
    pub fn id(&self, piece: &str) -> usize {
        self.index.get(piece).copied().unwrap_or(UNK_ID)
    }

    pub fn piece(&self, id: usize) -> Option<&str> {
        self.pieces.get(id).map(String::as_str)
    }

    /// Greedy longest-match segmentation. Where no vocabulary piece matches,
    /// a single character is emitted (which maps to `[UNK]` only if that
    /// character itself is not in the vocabulary).
    pub fn wordpiece(&self, word: &str) -> Vec<String> {
        let chars: Vec<char> = word.chars().collect();
        let mut pieces = Vec::new();
        let mut start = 0;
        while start < chars.len() {
            let prefix = if start == 0 { "" } else { "##" };
            let mut matched = None;
            for end in (start + 1..=chars.len()).rev() {
                let candidate: String = prefix.chars().chain(chars[start..end].iter().copied()).collect();
                if self.contains(&candidate) {
                    matched = Some((candidate, end));
                    break;
                }
            }
            let (piece, end) = matched.unwrap_or_else(|| {
                let fallback: String = prefix.chars().chain(std::iter::once(chars[start])).collect();
                (fallback, start + 1)
            });
            pieces.push(piece);
            start = end;
        }
        pieces
    }
}

/// A report split into lowercase word tokens, with optional POS tags and the
/// word-piece segmentation of every token.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenizedReport {
    pub tokens: Vec<String>,
    pub pos: Option<Vec<PosTag>>,
    pub subwords: Vec<Vec<String>>,
}

impl TokenizedReport {
    /// Number of words, W.
    pub fn word_count(&self) -> usize {
        self.tokens.len()
    }

    /// Total number of sub-words, N.
    pub fn subword_count(&self) -> usize {
        self.subwords.iter().map(Vec::len).sum()
    }

    /// Span of each word within the flattened sub-word sequence.
    pub fn word_spans(&self) -> Vec<Range<usize>> {
        let mut start = 0;
        self.subwords
            .iter()
            .map(|w| {
                let span = start..start + w.len();
                start = span.end;
                span
            })
            .collect()
    }

    pub fn subword_ids(&self, vocab: &Vocabulary) -> Vec<usize> {
        self.subwords.iter().flatten().map(|p| vocab.id(p)).collect()
    }

    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

#[derive(Debug, Clone)]
pub struct Tokenizer {
    vocab: Vocabulary,
}

impl Default for Tokenizer {
    fn default() -> Self {
        Tokenizer::new(Vocabulary::shipped())
    }
}

impl Tokenizer {
    pub fn new(vocab: Vocabulary) -> Self {
        Tokenizer { vocab }
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.vocab
    }

    /// Lowercases, turns punctuation into whitespace and splits. Tags are
    /// left unset.
    pub fn tokenize(&self, text: &str) -> Result<TokenizedReport> {
        let cleaned: String = text
            .chars()
            .map(|c| if c.is_ascii_punctuation() { ' ' } else { c })
            .collect::<String>()
            .to_lowercase();
        let tokens: Vec<String> = cleaned.split_whitespace().map(str::to_string).collect();
        if tokens.is_empty() {
            return Err(Error::EmptyReport);
        }
        Ok(self.from_tokens(tokens))
    }

    /// Segments already-split tokens (e.g. a perturbed token list).
    pub fn from_tokens(&self, tokens: Vec<String>) -> TokenizedReport {
        let subwords = tokens.iter().map(|t| self.vocab.wordpiece(t)).collect();
        TokenizedReport {
            tokens,
            pos: None,
            subwords,
        }
    }
}
