//! Word-level vocabulary with four reserved ids ahead of the real entries.
//!
//! On disk a vocabulary is one token per line; the token on line `i`
//! (0-indexed) has id `i + 4`. The reserved ids — padding, sentence start,
//! sentence end, unknown — are implicit and never written to the file.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;

use crate::error::{Error, Result};
use crate::model::{BOS, EOS, PAD, RESERVED_TOKENS, UNK};

/// Display forms of the reserved ids.
const RESERVED_FORMS: [&str; RESERVED_TOKENS] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Lowercase words, split on whitespace, with leading and trailing
/// punctuation stripped.
pub fn tokenize(text: &str) -> Vec<String> {
    text.split_whitespace()
        .map(|w| {
            w.trim_matches(|c: char| !c.is_alphanumeric())
                .to_lowercase()
        })
        .filter(|w| !w.is_empty())
        .collect()
}

/// Token-to-id table. Ids `0..4` are reserved; real words start at 4.
#[derive(Debug, Clone)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, u32>,
}

impl Vocabulary {
    /// Build from explicit words in the given (file) order.
    pub fn from_words<I: IntoIterator<Item = String>>(words: I) -> Result<Self> {
        let words: Vec<String> = words.into_iter().collect();
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if w.is_empty() || w.chars().any(char::is_whitespace) {
                return Err(Error::Config(format!(
                    "vocabulary entry {i} is empty or contains whitespace"
                )));
            }
            if RESERVED_FORMS.contains(&w.as_str()) {
                return Err(Error::Config(format!(
                    "vocabulary entry {w:?} collides with a reserved form"
                )));
            }
            if index
                .insert(w.clone(), (i + RESERVED_TOKENS) as u32)
                .is_some()
            {
                return Err(Error::Config(format!("duplicate vocabulary entry {w:?}")));
            }
        }
        Ok(Vocabulary { words, index })
    }

    /// Build from raw sentences: tokenize everything, keep the unique words
    /// in lexicographic order so construction is deterministic.
    pub fn build<'a, I: IntoIterator<Item = &'a str>>(sentences: I) -> Result<Self> {
        let unique: BTreeSet<String> = sentences.into_iter().flat_map(tokenize).collect();
        Vocabulary::from_words(unique)
    }

    /// Total id count including the reserved range.
    pub fn size(&self) -> usize {
        self.words.len() + RESERVED_TOKENS
    }

    /// Id of a word, falling back to the unknown id.
    pub fn id(&self, word: &str) -> u32 {
        self.index.get(word).copied().unwrap_or(UNK)
    }

    /// Display form of an id; `None` when the id is out of range.
    pub fn word(&self, id: u32) -> Option<&str> {
        let id = id as usize;
        if id < RESERVED_TOKENS {
            Some(RESERVED_FORMS[id])
        } else {
            self.words.get(id - RESERVED_TOKENS).map(String::as_str)
        }
    }

    /// Tokenize and encode a sentence, appending the end token.
    pub fn encode(&self, text: &str) -> Vec<u32> {
        let mut ids: Vec<u32> = tokenize(text).iter().map(|w| self.id(w)).collect();
        ids.push(EOS);
        ids
    }

    /// Human-readable sentence: structural ids (padding, start, end) are
    /// dropped, unknowns keep their display form.
    pub fn render(&self, tokens: &[u32]) -> String {
        tokens
            .iter()
            .filter(|&&t| t != PAD && t != BOS && t != EOS)
            .map(|&t| self.word(t).unwrap_or("<bad>").to_string())
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for w in &self.words {
            out.push_str(w);
            out.push('\n');
        }
        std::fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let words: Vec<String> = text.lines().map(str::to_string).collect();
        Vocabulary::from_words(words).map_err(|e| match e {
            Error::Config(reason) => Error::Format {
                path: path.display().to_string(),
                reason,
            },
            other => other,
        })
    }
}
