use std::collections::HashMap;

use crate::error::{QicaError, Result};

pub const PAD: &str = "<pad>";
pub const END_OF_TEXT: &str = "<eot>";
const TEMPLATE_WORDS: [&str; 3] = ["a", "photo", "of"];

/// Closed, whitespace-split vocabulary: template words, categories and one
/// token per integer `0..=max_count`.
#[derive(Clone, Debug)]
pub struct VocabTokenizer {
    vocabulary: Vec<String>,
    index: HashMap<String, usize>,
    categories: Vec<String>,
    max_count: usize,
    max_seq_len: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct TokenSeq {
    /// Padded to the tokenizer's `max_seq_len`.
    pub ids: Vec<usize>,
    /// Position of the final non-pad token.
    pub eot: usize,
    /// Integer value of the number token, if the text has one.
    pub number: Option<usize>,
}

impl VocabTokenizer {
    pub fn new(categories: &[String], max_count: usize, max_seq_len: usize) -> Self {
        let mut vocabulary: Vec<String> = vec![PAD.into(), END_OF_TEXT.into()];
        vocabulary.extend(TEMPLATE_WORDS.iter().map(|w| w.to_string()));
        vocabulary.extend(categories.iter().cloned());
        vocabulary.extend((0..=max_count).map(|n| n.to_string()));
        let index = vocabulary
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
        Self {
            vocabulary,
            index,
            categories: categories.to_vec(),
            max_count,
            max_seq_len,
        }
    }

    pub fn vocab_size(&self) -> usize {
        self.vocabulary.len()
    }

    pub fn max_seq_len(&self) -> usize {
        self.max_seq_len
    }

    pub fn max_count(&self) -> usize {
        self.max_count
    }

    pub fn categories(&self) -> &[String] {
        &self.categories
    }

    pub fn pad_id(&self) -> usize {
        0
    }

    pub fn id(&self, word: &str) -> Option<usize> {
        self.index.get(word).copied()
    }

    pub fn tokenize(&self, text: &str) -> Result<TokenSeq> {
        let words: Vec<&str> = text.split_whitespace().collect();
        if words.is_empty() {
            return Err(QicaError::Config("empty text".into()));
        }
        if words.len() > self.max_seq_len {
            return Err(QicaError::SequenceTooLong {
                len: words.len(),
                max: self.max_seq_len,
            });
        }
        let mut ids = Vec::with_capacity(self.max_seq_len);
        let mut number = None;
        for w in &words {
            let id = self.id(w).ok_or_else(|| QicaError::UnknownWord(w.to_string()))?;
            if let Ok(n) = w.parse::<usize>() {
                number = Some(n);
            }
            ids.push(id);
        }
        let eot = ids.len() - 1;
        ids.resize(self.max_seq_len, self.pad_id());
        Ok(TokenSeq { ids, eot, number })
    }

    pub fn decode(&self, seq: &TokenSeq) -> String {
        seq.ids[..=seq.eot]
            .iter()
            .map(|&i| self.vocabulary[i].as_str())
            .collect::<Vec<_>>()
            .join(" ")
    }

    /// `"a photo of {q} {category}"`.
    pub fn training_text(category: &str, q: usize) -> String {
        format!("a photo of {q} {category}")
    }

    /// `"a photo of {category}"`.
    pub fn inference_text(category: &str) -> String {
        format!("a photo of {category}")
    }

    /// Tokenizes number-free inference text, rejecting number tokens.
    pub fn tokenize_inference(&self, text: &str) -> Result<TokenSeq> {
        if let Some(w) = text.split_whitespace().find(|w| w.parse::<usize>().is_ok()) {
            return Err(QicaError::NumberInInferenceText(w.to_string()));
        }
        let seq = self.tokenize(text)?;
        let known = text
            .split_whitespace()
            .any(|w| self.categories.iter().any(|c| c == w));
        if !known {
            return Err(QicaError::UnknownCategory(text.to_string()));
        }
        Ok(seq)
    }
}
