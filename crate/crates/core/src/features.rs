//! Whitespace tokens, training vocabularies and sparse count vectors.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corpus::Dataset;

pub const DEFAULT_MIN_COUNT: usize = 2;
pub const DEFAULT_MAX_LEN: usize = 256;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FeatureError {
    #[error("vocabulary is empty with min_count={0}; lower min_count")]
    EmptyVocabulary(usize),
    #[error("training set is empty")]
    EmptyTrainingSet,
    #[error("{word:?} is not a token of the text")]
    NotAToken { word: String },
    #[error("duplicate vocabulary entry {0:?}")]
    DuplicateWord(String),
}

/// Splits normalized text on runs of spaces. Tokens keep case and punctuation.
pub fn tokenize(text: &str) -> Vec<&str> {
    text.split(' ').filter(|t| !t.is_empty()).collect()
}

/// Deletes every token equal to `word` and rejoins the rest with single spaces.
pub fn remove_word(text: &str, word: &str) -> Result<String, FeatureError> {
    let tokens = tokenize(text);
    if !tokens.contains(&word) {
        return Err(FeatureError::NotAToken { word: word.to_string() });
    }
    Ok(tokens.into_iter().filter(|t| *t != word).collect::<Vec<_>>().join(" "))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    index: HashMap<String, usize>,
    min_count: usize,
}

impl Vocabulary {
    /// Builds a vocabulary from words already in index order.
    pub fn from_words(words: Vec<String>, min_count: usize) -> Result<Self, FeatureError> {
        let mut index = HashMap::with_capacity(words.len());
        for (i, w) in words.iter().enumerate() {
            if index.insert(w.clone(), i).is_some() {
                return Err(FeatureError::DuplicateWord(w.clone()));
            }
        }
        Ok(Vocabulary { words, index, min_count })
    }

    /// Keeps words seen at least `min_count` times in `train`, most frequent first,
    /// ties broken lexicographically.
    pub fn build(train: &Dataset, min_count: usize) -> Result<Self, FeatureError> {
        if train.is_empty() {
            return Err(FeatureError::EmptyTrainingSet);
        }
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for inst in &train.instances {
            for tok in tokenize(&inst.text) {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts.into_iter().filter(|&(_, n)| n >= min_count).collect();
        if kept.is_empty() {
            return Err(FeatureError::EmptyVocabulary(min_count));
        }
        kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        Self::from_words(kept.into_iter().map(|(w, _)| w.to_string()).collect(), min_count)
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn min_count(&self) -> usize {
        self.min_count
    }

    pub fn get(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn word(&self, index: usize) -> Option<&str> {
        self.words.get(index).map(String::as_str)
    }

    /// Words in index order.
    pub fn words(&self) -> &[String] {
        &self.words
    }
}

/// Feature index → positive count, sorted by index.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseVector {
    pairs: Vec<(usize, u32)>,
}

impl SparseVector {
    /// Accumulates duplicate indices and drops non-positive counts.
    pub fn from_pairs(mut pairs: Vec<(usize, u32)>) -> Self {
        pairs.sort_unstable_by_key(|p| p.0);
        let mut merged: Vec<(usize, u32)> = Vec::with_capacity(pairs.len());
        for (i, c) in pairs {
            match merged.last_mut() {
                Some(last) if last.0 == i => last.1 += c,
                _ => merged.push((i, c)),
            }
        }
        merged.retain(|p| p.1 > 0);
        SparseVector { pairs: merged }
    }

    pub fn pairs(&self) -> &[(usize, u32)] {
        &self.pairs
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn get(&self, index: usize) -> u32 {
        self.pairs.binary_search_by_key(&index, |p| p.0).map(|i| self.pairs[i].1).unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.pairs.iter().map(|p| p.1 as u64).sum()
    }

    /// Removes `index` entirely, returning its former count.
    pub fn without(&self, index: usize) -> (SparseVector, u32) {
        let removed = self.get(index);
        let pairs = self.pairs.iter().copied().filter(|p| p.0 != index).collect();
        (SparseVector { pairs }, removed)
    }
}

/// Counts in-vocabulary tokens among the first `max_len` tokens of `text`.
pub fn vectorize(text: &str, vocab: &Vocabulary, max_len: usize) -> SparseVector {
    let pairs = tokenize(text).into_iter().take(max_len).filter_map(|t| vocab.get(t)).map(|i| (i, 1)).collect();
    SparseVector::from_pairs(pairs)
}
