//! Word-level vocabulary shared by the report language model and the
//! name encoders.
//!
//! Text normalization is lowercase + whitespace splitting with
//! punctuation separated into standalone words, so the round-trip
//! `detokenize(tokenize(t))` returns the normalized form of `t`.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const PAD: usize = 0;
pub const BOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
const SPECIALS: [&str; 4] = ["<pad>", "<bos>", "<eos>", "<unk>"];

/// Bijective word <-> id mapping with reserved special ids.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq, Eq)]
pub struct Vocabulary {
    words: Vec<String>,
    #[serde(skip)]
    index: BTreeMap<String, usize>,
}

/// Lowercase and split into words; punctuation becomes its own word.
pub fn normalize_words(text: &str) -> Vec<String> {
    let mut words = Vec::new();
    let mut cur = String::new();
    for ch in text.chars() {
        let c = ch.to_ascii_lowercase();
        if c.is_alphanumeric() || c == '-' || c == '_' {
            cur.push(c);
        } else {
            if !cur.is_empty() {
                words.push(std::mem::take(&mut cur));
            }
            if !c.is_whitespace() {
                words.push(c.to_string());
            }
        }
    }
    if !cur.is_empty() {
        words.push(cur);
    }
    words
}

impl Vocabulary {
    /// Build from a corpus: specials first, then sorted unique words.
    pub fn from_corpus<'a>(texts: impl IntoIterator<Item = &'a str>) -> Self {
        let mut uniq: Vec<String> = texts
            .into_iter()
            .flat_map(|t| normalize_words(t))
            .collect();
        uniq.sort();
        uniq.dedup();
        let mut words: Vec<String> = SPECIALS.iter().map(|s| s.to_string()).collect();
        words.extend(uniq);
        let mut v = Self {
            words,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        v
    }

    fn rebuild_index(&mut self) {
        self.index = self
            .words
            .iter()
            .enumerate()
            .map(|(i, w)| (w.clone(), i))
            .collect();
    }

    pub fn len(&self) -> usize {
        self.words.len()
    }

    pub fn is_empty(&self) -> bool {
        self.words.is_empty()
    }

    pub fn id(&self, word: &str) -> usize {
        *self.index.get(word).unwrap_or(&UNK)
    }

    pub fn word(&self, id: usize) -> &str {
        &self.words[id]
    }

    /// Encode normalized words; no bos/eos added here.
    pub fn encode(&self, text: &str) -> Vec<usize> {
        normalize_words(text).iter().map(|w| self.id(w)).collect()
    }

    /// Encode with bos/eos framing for language modeling.
    pub fn encode_framed(&self, text: &str) -> Vec<usize> {
        let mut ids = vec![BOS];
        ids.extend(self.encode(text));
        ids.push(EOS);
        ids
    }

    /// Inverse of `encode` up to normalization; specials are skipped.
    pub fn decode(&self, ids: &[usize]) -> String {
        let parts: Vec<&str> = ids
            .iter()
            .filter(|&&i| i >= SPECIALS.len())
            .map(|&i| self.word(i))
            .collect();
        parts.join(" ")
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(&self.words)?)
    }

    pub fn from_json(json: &str) -> Result<Self> {
        let words: Vec<String> = serde_json::from_str(json)?;
        if words.len() < SPECIALS.len() || words[..4] != SPECIALS {
            return Err(Error::manifest("vocabulary missing reserved special ids"));
        }
        let mut v = Self {
            words,
            index: BTreeMap::new(),
        };
        v.rebuild_index();
        Ok(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_normalized_text() {
        let v = Vocabulary::from_corpus(["Acute infarct in the frontal region."]);
        let ids = v.encode("Acute infarct in the FRONTAL region.");
        let back = v.decode(&ids);
        assert_eq!(back, "acute infarct in the frontal region .");
    }

    #[test]
    fn unknown_words_map_to_unk() {
        let v = Vocabulary::from_corpus(["known words only"]);
        let ids = v.encode("known mystery");
        assert_eq!(ids[0], v.id("known"));
        assert_eq!(ids[1], UNK);
    }

    #[test]
    fn specials_are_reserved_and_first() {
        let v = Vocabulary::from_corpus(["a b c"]);
        assert_eq!(v.word(PAD), "<pad>");
        assert_eq!(v.word(BOS), "<bos>");
        assert_eq!(v.word(EOS), "<eos>");
        assert_eq!(v.word(UNK), "<unk>");
        let framed = v.encode_framed("a");
        assert_eq!(framed[0], BOS);
        assert_eq!(*framed.last().unwrap(), EOS);
    }

    #[test]
    fn json_round_trip() {
        let v = Vocabulary::from_corpus(["some words here", "and more words"]);
        let j = v.to_json().unwrap();
        let v2 = Vocabulary::from_json(&j).unwrap();
        assert_eq!(v, v2);
        assert_eq!(v2.id("words"), v.id("words"));
    }
}
