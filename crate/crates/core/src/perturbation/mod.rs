//! Report perturbations: tokenization, rule-based POS tagging and the nine
//! structure-breaking rewrites used as hard negatives.

mod rules;
mod tagger;
mod tokenizer;

pub use rules::{generate_set, perturb, PerturbationSet, Perturbed, Rule, MAX_REDRAWS};
pub use tagger::{Lexicon, PosTag};
pub use tokenizer::{TokenizedReport, Tokenizer, Vocabulary, UNK, UNK_ID};

use crate::error::Result;

/// Tokenizer and lexicon bundled together: text in, tagged reports and
/// perturbation sets out.
#[derive(Debug, Clone)]
pub struct TextPipeline {
    pub tokenizer: Tokenizer,
    pub lexicon: Lexicon,
}

impl Default for TextPipeline {
    fn default() -> Self {
        TextPipeline {
            tokenizer: Tokenizer::default(),
            lexicon: Lexicon::shipped(),
        }
    }
}

impl TextPipeline {
    /// Tokenize and tag.
    pub fn process(&self, text: &str) -> Result<TokenizedReport> {
        let report = self.tokenizer.tokenize(text)?;
        Ok(self.lexicon.pos_tag(report))
    }

    pub fn perturbations(&self, report: &TokenizedReport, seed: u64) -> Result<PerturbationSet> {
        generate_set(report, seed, &self.lexicon)
    }

    /// Re-segments a perturbed variant so it can be encoded.
    pub fn variant_report(&self, variant: &Perturbed) -> TokenizedReport {
        self.tokenizer.from_tokens(variant.tokens.clone())
    }
}
