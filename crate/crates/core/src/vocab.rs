//! Whitespace-plus-punctuation tokenizer with a frequency-ranked vocabulary.
//!
//! Real pretrained tokenizers are out of scope at desk scale; this one keeps
//! the properties the pipeline needs: determinism, stable special-token ids,
//! forced inclusion of label words, and id-level round-tripping.

use std::collections::HashMap;
use std::path::Path;

use crate::error::{Error, Result};

pub const BOS_TOKEN: &str = "<s>";
pub const PAD_TOKEN: &str = "[PAD]";
pub const UNK_TOKEN: &str = "[UNK]";
pub const BOS_ID: u32 = 0;
pub const PAD_ID: u32 = 1;
pub const UNK_ID: u32 = 2;
const SPECIALS: [&str; 3] = [BOS_TOKEN, PAD_TOKEN, UNK_TOKEN];

/// Punctuation split off as single-character tokens.
const PUNCT: [char; 6] = ['.', ',', '!', '?', ';', ':'];

/// Splits on whitespace, then separates punctuation characters into their
/// own tokens ("lot!" → "lot", "!").
pub fn tokenize(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for word in text.split_whitespace() {
        let mut cur = String::new();
        for ch in word.chars() {
            if PUNCT.contains(&ch) {
                if !cur.is_empty() {
                    out.push(std::mem::take(&mut cur));
                }
                out.push(ch.to_string());
            } else {
                cur.push(ch);
            }
        }
        if !cur.is_empty() {
            out.push(cur);
        }
    }
    out
}

/// Token ↔ id bijection with fixed special tokens at ids 0..=2.
#[derive(Clone, Debug)]
pub struct Vocab {
    tokens: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocab {
    /// Frequency-ranked vocabulary over `corpus`, capped at `max_size`.
    /// `must_include` tokens (label words, template words) are kept
    /// regardless of frequency, right after the specials.
    pub fn build(
        corpus: impl IntoIterator<Item = impl AsRef<str>>,
        max_size: usize,
        must_include: &[&str],
    ) -> Result<Vocab> {
        let mut counts: HashMap<String, u64> = HashMap::new();
        let mut any = false;
        for line in corpus {
            for tok in tokenize(line.as_ref()) {
                any = true;
                *counts.entry(tok).or_insert(0) += 1;
            }
        }
        if !any {
            return Err(Error::Data("cannot build a vocabulary from an empty corpus".into()));
        }
        if max_size <= SPECIALS.len() {
            return Err(Error::Data(format!(
                "max vocab size {max_size} leaves no room beyond the {} special tokens",
                SPECIALS.len()
            )));
        }

        let mut tokens: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        for forced in must_include {
            for tok in tokenize(forced) {
                if !tokens.contains(&tok) {
                    tokens.push(tok);
                }
            }
        }
        // Rank by frequency, ties broken lexicographically for determinism.
        let mut ranked: Vec<(String, u64)> = counts.into_iter().collect();
        ranked.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        for (tok, _) in ranked {
            if tokens.len() >= max_size {
                break;
            }
            if !tokens.contains(&tok) {
                tokens.push(tok);
            }
        }
        Vocab::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Result<Vocab> {
        if tokens.len() < SPECIALS.len()
            || SPECIALS.iter().zip(&tokens).any(|(s, t)| s != t)
        {
            return Err(Error::Data(format!(
                "vocabulary must start with the special tokens {SPECIALS:?}"
            )));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, tok) in tokens.iter().enumerate() {
            if index.insert(tok.clone(), i as u32).is_some() {
                return Err(Error::Data(format!("duplicate token {tok:?} in vocabulary")));
            }
        }
        Ok(Vocab { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.tokens.get(id as usize).map(|s| s.as_str())
    }

    pub fn id(&self, token: &str) -> Option<u32> {
        self.index.get(token).copied()
    }

    /// Token ids for a full model input: BOS prepended exactly once,
    /// out-of-vocabulary tokens mapped to UNK.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids = vec![BOS_ID];
        ids.extend(self.encode_continuation(text));
        ids
    }

    /// Token ids without BOS, for continuations such as label words.
    pub fn encode_continuation(&self, text: &str) -> Vec<u32> {
        tokenize(text)
            .iter()
            .map(|tok| self.id(tok).unwrap_or(UNK_ID))
            .collect()
    }

    /// Text for a token-id sequence. BOS and PAD are dropped; punctuation
    /// tokens attach to the preceding word so template strings round-trip.
    pub fn decode(&self, ids: &[u32]) -> String {
        let mut out = String::new();
        for &id in ids {
            if id == BOS_ID || id == PAD_ID {
                continue;
            }
            let tok = self.token(id).unwrap_or(UNK_TOKEN);
            let is_punct = tok.chars().count() == 1
                && tok.chars().next().map(|c| PUNCT.contains(&c)).unwrap_or(false);
            if !out.is_empty() && !is_punct {
                out.push(' ');
            }
            out.push_str(tok);
        }
        out
    }

    /// One token per line; the line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.tokens.join("\n"))?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Vocab> {
        let text = std::fs::read_to_string(path)?;
        Vocab::from_tokens(text.lines().map(|l| l.to_string()).collect())
    }
}
