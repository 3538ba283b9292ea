//! Word-level tokenizer with a small corpus-built vocabulary.
//!
//! Vocabulary file: UTF-8, one token per line, line number is the id. The
//! first lines are the special tokens in the order of [`SPECIALS`].

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: u32 = 0;
pub const CLS: u32 = 1;
pub const MASK: u32 = 2;
pub const UNK: u32 = 3;
pub const SPECIALS: [&str; 4] = ["[PAD]", "[CLS]", "[MASK]", "[UNK]"];

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tokenizer {
    vocab: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, u32>,
}

/// Token ids padded to a fixed length; `mask[i]` is true for real tokens.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Encoded {
    pub ids: Vec<u32>,
    pub mask: Vec<bool>,
}

impl Encoded {
    pub fn real_len(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// Lowercased alphanumeric words; punctuation splits and is dropped.
pub fn split_words(text: &str) -> impl Iterator<Item = String> + '_ {
    text.split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_lowercase)
}

impl Tokenizer {
    fn from_vocab(vocab: Vec<String>) -> Result<Self> {
        for (i, s) in SPECIALS.iter().enumerate() {
            if vocab.get(i).map(String::as_str) != Some(*s) {
                return Err(Error::Config(format!("vocabulary must start with {SPECIALS:?}")));
            }
        }
        let mut index = HashMap::with_capacity(vocab.len());
        for (i, t) in vocab.iter().enumerate() {
            if index.insert(t.clone(), i as u32).is_some() {
                return Err(Error::Config(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { vocab, index })
    }

    /// Words seen at least `min_count` times, most frequent first (ties
    /// alphabetical), capped at `max_size` entries including specials.
    pub fn build<'a>(texts: impl IntoIterator<Item = &'a str>, min_count: usize, max_size: usize) -> Self {
        let mut counts: BTreeMap<String, usize> = BTreeMap::new();
        for t in texts {
            for w in split_words(t) {
                *counts.entry(w).or_default() += 1;
            }
        }
        let mut words: Vec<(String, usize)> = counts.into_iter().filter(|(_, c)| *c >= min_count).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
        let mut vocab: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        vocab.extend(
            words
                .into_iter()
                .map(|(w, _)| w)
                .take(max_size.saturating_sub(SPECIALS.len())),
        );
        Self::from_vocab(vocab).expect("built vocabulary is well formed")
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        Self::from_vocab(text.lines().map(str::to_string).collect())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut text = self.vocab.join("\n");
        text.push('\n');
        fs::write(path, text)?;
        Ok(())
    }

    pub fn vocab_size(&self) -> usize {
        self.vocab.len()
    }

    pub fn token(&self, id: u32) -> Option<&str> {
        self.vocab.get(id as usize).map(String::as_str)
    }

    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// `[CLS]` followed by word ids, truncated and padded to `max_len`.
    pub fn encode(&self, text: &str, max_len: usize) -> Encoded {
        assert!(max_len >= 1, "max_len must leave room for [CLS]");
        let mut ids = vec![CLS];
        ids.extend(split_words(text).map(|w| self.id(&w)).take(max_len - 1));
        let real = ids.len();
        ids.resize(max_len, PAD);
        let mask = (0..max_len).map(|i| i < real).collect();
        Encoded { ids, mask }
    }

    pub fn decode(&self, ids: &[u32]) -> String {
        ids.iter()
            .filter(|&&i| i != PAD && i != CLS)
            .map(|&i| self.token(i).unwrap_or("[UNK]"))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// Rebuilds the lookup table after deserialization.
    pub fn reindex(self) -> Result<Self> {
        Self::from_vocab(self.vocab)
    }
}

pub fn is_special(id: u32) -> bool {
    (id as usize) < SPECIALS.len()
}
