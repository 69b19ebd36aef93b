use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::tagger::{Lexicon, PosTag};
use super::tokenizer::TokenizedReport;
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};

/// Extra draws allowed when a seeded shuffle reproduces the original.
pub const MAX_REDRAWS: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    ShuffleAllWords,
    SwapAdjacent,
    ReverseSentence,
    ShuffleWithinTrigrams,
    ShuffleTrigrams,
    ShuffleNounsAdjs,
    ShuffleAllButNounsAdjs,
    ShuffleNounsVerbsAdjs,
    ReplaceAdjAntonyms,
}

impl Rule {
    /// All rules, in the order variants appear in a [`PerturbationSet`].
    pub const ALL: [Rule; 9] = [
        Rule::ShuffleAllWords,
        Rule::SwapAdjacent,
        Rule::ReverseSentence,
        Rule::ShuffleWithinTrigrams,
        Rule::ShuffleTrigrams,
        Rule::ShuffleNounsAdjs,
        Rule::ShuffleAllButNounsAdjs,
        Rule::ShuffleNounsVerbsAdjs,
        Rule::ReplaceAdjAntonyms,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Rule::ShuffleAllWords => "shuffle_all_words",
            Rule::SwapAdjacent => "swap_adjacent",
            Rule::ReverseSentence => "reverse_sentence",
            Rule::ShuffleWithinTrigrams => "shuffle_within_trigrams",
            Rule::ShuffleTrigrams => "shuffle_trigrams",
            Rule::ShuffleNounsAdjs => "shuffle_nouns_adjs",
            Rule::ShuffleAllButNounsAdjs => "shuffle_all_but_nouns_adjs",
            Rule::ShuffleNounsVerbsAdjs => "shuffle_nouns_verbs_adjs",
            Rule::ReplaceAdjAntonyms => "replace_adj_antonyms",
        }
    }

    pub fn index(self) -> usize {
        Rule::ALL.iter().position(|&r| r == self).expect("rule listed in ALL")
    }

    /// Whether the rule only reorders tokens.
    pub fn preserves_multiset(self) -> bool {
        self != Rule::ReplaceAdjAntonyms
    }

    fn needs_pos(self) -> bool {
        matches!(
            self,
            Rule::ShuffleNounsAdjs
                | Rule::ShuffleAllButNounsAdjs
                | Rule::ShuffleNounsVerbsAdjs
                | Rule::ReplaceAdjAntonyms
        )
    }
}

impl FromStr for Rule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Rule::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownRule(s.to_string()))
    }
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// One perturbed variant of a report.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Perturbed {
    pub rule: Rule,
    pub tokens: Vec<String>,
    /// The rule could not produce a token list different from the original.
    pub degenerate: bool,
    /// Antonym replacement skipped at least one adjective with no entry.
    pub partial: bool,
}

impl Perturbed {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }
}

/// The nine perturbed variants of one report, in [`Rule::ALL`] order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PerturbationSet {
    pub original: TokenizedReport,
    pub variants: Vec<Perturbed>,
    pub seed: u64,
}

impl PerturbationSet {
    pub fn usable(&self) -> impl Iterator<Item = &Perturbed> {
        self.variants.iter().filter(|v| !v.degenerate)
    }
}

/// Consecutive groups of three; a trailing group of one or two stays whole.
fn trigram_groups(n: usize) -> Vec<std::ops::Range<usize>> {
    (0..n).step_by(3).map(|s| s..(s + 3).min(n)).collect()
}

fn has_two_distinct<T: PartialEq>(items: &[T]) -> bool {
    items.iter().any(|x| *x != items[0])
}

/// Re-draws `draw` until its output differs from `original`. Returns the last
/// draw and whether it is still identical.
fn draw_distinct<F>(original: &[String], alternative_exists: bool, mut draw: F) -> (Vec<String>, bool)
where
    F: FnMut() -> Vec<String>,
{
    if !alternative_exists {
        return (original.to_vec(), true);
    }
    let mut out = draw();
    for _ in 0..MAX_REDRAWS {
        if out != original {
            return (out, false);
        }
        out = draw();
    }
    let same = out == original;
    (out, same)
}

fn shuffle_positions(tokens: &[String], positions: &[usize], rng: &mut ChaCha8Rng) -> Vec<String> {
    let mut picked: Vec<String> = positions.iter().map(|&i| tokens[i].clone()).collect();
    picked.shuffle(rng);
    let mut out = tokens.to_vec();
    for (&i, t) in positions.iter().zip(picked) {
        out[i] = t;
    }
    out
}

fn positions_where(pos: &[PosTag], keep: impl Fn(PosTag) -> bool) -> Vec<usize> {
    pos.iter().enumerate().filter(|(_, &t)| keep(t)).map(|(i, _)| i).collect()
}

/// Applies one rule. Seeded rules are a pure function of
/// `(tokens, rule, seed)`.
pub fn perturb(report: &TokenizedReport, rule: Rule, seed: u64, lexicon: &Lexicon) -> Result<Perturbed> {
    let tokens = &report.tokens;
    if tokens.is_empty() {
        return Err(Error::EmptyReport);
    }
    let pos = match (&report.pos, rule.needs_pos()) {
        (Some(p), _) => p.as_slice(),
        (None, true) => return Err(Error::PosUnset(rule.name())),
        (None, false) => &[],
    };
    let mut rng = rng_from(seed);
    let mut partial = false;

    let (out, degenerate) = match rule {
        Rule::ShuffleAllWords => {
            let all: Vec<usize> = (0..tokens.len()).collect();
            draw_distinct(tokens, has_two_distinct(tokens), || shuffle_positions(tokens, &all, &mut rng))
        }
        Rule::SwapAdjacent => {
            let mut out = tokens.clone();
            for pair in out.chunks_mut(2) {
                if pair.len() == 2 {
                    pair.swap(0, 1);
                }
            }
            let same = out == *tokens;
            (out, same)
        }
        Rule::ReverseSentence => {
            let out: Vec<String> = tokens.iter().rev().cloned().collect();
            let same = out == *tokens;
            (out, same)
        }
        Rule::ShuffleWithinTrigrams => {
            let groups = trigram_groups(tokens.len());
            let exists = groups.iter().any(|g| has_two_distinct(&tokens[g.clone()]));
            draw_distinct(tokens, exists, || {
                let mut out = Vec::with_capacity(tokens.len());
                for g in &groups {
                    let mut part = tokens[g.clone()].to_vec();
                    part.shuffle(&mut rng);
                    out.extend(part);
                }
                out
            })
        }
        Rule::ShuffleTrigrams => {
            let groups = trigram_groups(tokens.len());
            let chunks: Vec<&[String]> = groups.iter().map(|g| &tokens[g.clone()]).collect();
            draw_distinct(tokens, has_two_distinct(&chunks), || {
                let mut order = chunks.clone();
                order.shuffle(&mut rng);
                order.concat()
            })
        }
        Rule::ShuffleNounsAdjs | Rule::ShuffleAllButNounsAdjs | Rule::ShuffleNounsVerbsAdjs => {
            let selected = match rule {
                Rule::ShuffleNounsAdjs => positions_where(pos, |t| matches!(t, PosTag::Noun | PosTag::Adj)),
                Rule::ShuffleAllButNounsAdjs => {
                    positions_where(pos, |t| !matches!(t, PosTag::Noun | PosTag::Adj))
                }
                _ => positions_where(pos, |t| matches!(t, PosTag::Noun | PosTag::Verb | PosTag::Adj)),
            };
            let picked: Vec<&String> = selected.iter().map(|&i| &tokens[i]).collect();
            draw_distinct(tokens, has_two_distinct(&picked), || {
                shuffle_positions(tokens, &selected, &mut rng)
            })
        }
        Rule::ReplaceAdjAntonyms => {
            let mut out = tokens.clone();
            for (i, tag) in pos.iter().enumerate() {
                if *tag != PosTag::Adj {
                    continue;
                }
                match lexicon.antonym(&tokens[i]) {
                    Some(ant) => out[i] = ant.to_string(),
                    None => partial = true,
                }
            }
            let same = out == *tokens;
            (out, same)
        }
    };

    Ok(Perturbed {
        rule,
        tokens: out,
        degenerate,
        partial,
    })
}

/// Applies all nine rules; rule `i` uses the sub-seed `derive_seed(seed, i)`.
pub fn generate_set(report: &TokenizedReport, seed: u64, lexicon: &Lexicon) -> Result<PerturbationSet> {
    let variants = Rule::ALL
        .into_iter()
        .map(|rule| perturb(report, rule, derive_seed(seed, rule.index() as u64), lexicon))
        .collect::<Result<Vec<_>>>()?;
    Ok(PerturbationSet {
        original: report.clone(),
        variants,
        seed,
    })
}
