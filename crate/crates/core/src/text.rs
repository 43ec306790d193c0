//! Text preprocessing, vocabulary construction and fixed-length token sequences.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};

pub const PAD: &str = "<pad>";
pub const UNK: &str = "<unk>";
pub const START: &str = "<start>";
pub const END: &str = "<end>";
pub const SEP: &str = "<sep>";

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
pub const START_ID: usize = 2;
pub const END_ID: usize = 3;
pub const SEP_ID: usize = 4;

const SPECIALS: [&str; 5] = [PAD, UNK, START, END, SEP];

/// Default cap for descriptions, START and END included.
pub const DESCRIPTION_MAX_LEN: usize = 50;
/// Default cap for SEP-joined keyword sequences.
pub const KEYWORD_MAX_LEN: usize = 20;

/// Lowercase alphabetic words: non-alphabetic characters are dropped and the
/// remainder split on whitespace.
pub fn preprocess(text: &str) -> Vec<String> {
    let cleaned: String = text
        .chars()
        .filter(|c| c.is_ascii_alphabetic() || c.is_whitespace())
        .collect();
    cleaned
        .split_whitespace()
        .map(|w| w.to_ascii_lowercase())
        .collect()
}

/// Bijective token/id mapping with the special tokens at ids 0..5.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Vocabulary {
    to_id: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Vocabulary {
    /// Words seen once across the counted corpus are left out and encode to UNK.
    /// Ids follow descending frequency, ties broken lexicographically.
    pub fn build(descriptions: &[Vec<String>], keywords: &[Vec<String>], include_keywords: bool) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        let counted = if include_keywords { keywords } else { &[] };
        for doc in descriptions.iter().chain(counted) {
            for w in doc {
                *counts.entry(w.as_str()).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|(w, c)| *c >= 2 && !SPECIALS.contains(w))
            .collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let tokens = SPECIALS
            .iter()
            .map(|s| s.to_string())
            .chain(words.into_iter().map(|(w, _)| w.to_string()))
            .collect();
        Self::from_tokens(tokens).expect("specials are unique")
    }

    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < SPECIALS.len() || tokens[..SPECIALS.len()] != SPECIALS {
            return Err(Error::Data(
                "vocabulary must start with the special tokens".into(),
            ));
        }
        let mut to_id = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if to_id.insert(t.clone(), i).is_some() {
                return Err(Error::Data(format!("duplicate vocabulary token {t}")));
            }
        }
        Ok(Vocabulary { to_id, tokens })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.to_id.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn contains(&self, token: &str) -> bool {
        self.to_id.contains_key(token)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map_or(UNK, String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    /// Word ids for running text, no delimiters or padding.
    pub fn ids(&self, text: &str) -> Vec<usize> {
        preprocess(text).iter().map(|w| self.id(w)).collect()
    }

    /// `START words END`, truncated (END kept) and padded to `max_len`.
    pub fn encode_description(&self, text: &str, max_len: usize) -> TokenSequence {
        let mut ids = vec![START_ID];
        ids.extend(self.ids(text));
        ids.truncate(max_len.saturating_sub(1));
        ids.push(END_ID);
        TokenSequence::padded(ids, max_len)
    }

    /// Keyword phrases joined with SEP, truncated and padded to `max_len`.
    pub fn encode_keywords<S: AsRef<str>>(&self, keywords: &[S], max_len: usize) -> TokenSequence {
        let mut ids = Vec::new();
        for (i, k) in keywords.iter().enumerate() {
            if i > 0 {
                ids.push(SEP_ID);
            }
            ids.extend(self.ids(k.as_ref()));
        }
        TokenSequence::padded(ids, max_len)
    }

    /// Space-joined words, stopping at END and skipping PAD/START.
    pub fn decode(&self, ids: &[usize]) -> String {
        ids.iter()
            .take_while(|&&i| i != END_ID)
            .filter(|&&i| i != PAD_ID && i != START_ID)
            .map(|&i| self.token(i))
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// One token per line; line number is the id.
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.tokens.join("\n");
        s.push('\n');
        fs::write(path, s).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let s = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_tokens(s.lines().map(str::to_string).collect())
    }
}

/// Fixed-length id sequence; positions at and after `true_length` are PAD.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSequence {
    pub ids: Vec<usize>,
    pub true_length: usize,
}

impl TokenSequence {
    pub fn padded(mut ids: Vec<usize>, max_len: usize) -> Self {
        ids.truncate(max_len);
        let true_length = ids.len();
        ids.resize(max_len, PAD_ID);
        TokenSequence { ids, true_length }
    }

    pub fn tokens(&self) -> &[usize] {
        &self.ids[..self.true_length]
    }

    /// PAD mask over the full padded length (`true` = padding).
    pub fn pad_mask(&self) -> Vec<bool> {
        (0..self.ids.len()).map(|i| i >= self.true_length).collect()
    }

    pub fn is_empty(&self) -> bool {
        self.true_length == 0
    }
}
