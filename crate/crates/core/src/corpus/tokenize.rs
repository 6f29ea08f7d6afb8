use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

pub const PAD_ID: usize = 0;
pub const UNK_ID: usize = 1;
const PAD: &str = "<pad>";
const UNK: &str = "<unk>";

const DETACHED: &[char] = &['.', ',', '!', '?', ';', ':', '"', '\''];

/// Splits on whitespace, detaches punctuation and lowercases.
pub fn tokenize_surface(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut current = String::new();
        for ch in chunk.chars() {
            if DETACHED.contains(&ch) {
                if !current.is_empty() {
                    out.push(std::mem::take(&mut current));
                }
                out.push(ch.to_string());
            } else {
                current.extend(ch.to_lowercase());
            }
        }
        if !current.is_empty() {
            out.push(current);
        }
    }
    out
}

/// Tokens of one sentence and their vocabulary ids.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenSequence {
    pub tokens: Vec<String>,
    pub ids: Vec<usize>,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Keeps the positions for which `keep` is true, in order.
    pub fn retain_positions(&self, keep: &[bool]) -> TokenSequence {
        debug_assert_eq!(keep.len(), self.len());
        let mut out = TokenSequence::default();
        for (i, &k) in keep.iter().enumerate() {
            if k {
                out.tokens.push(self.tokens[i].clone());
                out.ids.push(self.ids[i]);
            }
        }
        out
    }
}

pub fn tokenize(text: &str, vocab: &Vocabulary) -> TokenSequence {
    vocab.encode_tokens(tokenize_surface(text))
}

/// Surface form ↔ id mapping with reserved padding and unknown entries.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(from = "VocabularyRepr", into = "VocabularyRepr")]
pub struct Vocabulary {
    entries: Vec<String>,
    index: HashMap<String, usize>,
    min_freq: usize,
}

#[derive(Serialize, Deserialize)]
struct VocabularyRepr {
    entries: Vec<String>,
    min_freq: usize,
}

impl From<VocabularyRepr> for Vocabulary {
    fn from(r: VocabularyRepr) -> Self {
        let index = r
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.clone(), i))
            .collect();
        Self {
            entries: r.entries,
            index,
            min_freq: r.min_freq,
        }
    }
}

impl From<Vocabulary> for VocabularyRepr {
    fn from(v: Vocabulary) -> Self {
        Self {
            entries: v.entries,
            min_freq: v.min_freq,
        }
    }
}

impl Vocabulary {
    pub const DEFAULT_MIN_FREQ: usize = 2;

    /// Builds a vocabulary from tokenized sentences. Entries are ordered by
    /// descending frequency, ties broken lexicographically.
    pub fn build<'a, I, S>(sentences: I, min_freq: usize) -> Self
    where
        I: IntoIterator<Item = S>,
        S: IntoIterator<Item = &'a String>,
    {
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for sentence in sentences {
            for tok in sentence {
                *counts.entry(tok.as_str()).or_default() += 1;
            }
        }
        let mut kept: Vec<(&str, usize)> = counts
            .into_iter()
            .filter(|&(t, c)| c >= min_freq && t != PAD && t != UNK)
            .collect();
        kept.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let entries = [PAD.to_string(), UNK.to_string()]
            .into_iter()
            .chain(kept.into_iter().map(|(t, _)| t.to_string()))
            .collect();
        VocabularyRepr { entries, min_freq }.into()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.len() <= 2
    }

    pub fn min_freq(&self) -> usize {
        self.min_freq
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK_ID)
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn encode_tokens(&self, tokens: Vec<String>) -> TokenSequence {
        let ids = tokens.iter().map(|t| self.id(t)).collect();
        TokenSequence { tokens, ids }
    }

    /// Hex SHA-256 over the ordered entries.
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        for e in &self.entries {
            h.update(e.as_bytes());
            h.update([0u8]);
        }
        hex::encode(h.finalize())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use regex::Regex;

    fn oracle(text: &str) -> Vec<String> {
        let re = Regex::new(r#"[.,!?;:"']|[^\s.,!?;:"']+"#).unwrap();
        re.find_iter(&text.to_lowercase())
            .map(|m| m.as_str().to_string())
            .collect()
    }

    #[test]
    fn examples() {
        assert_eq!(tokenize_surface("A man runs."), ["a", "man", "runs", "."]);
        assert!(tokenize_surface("").is_empty());
        assert_eq!(tokenize_surface("Hello, world"), oracle("Hello, world"));
        assert_eq!(tokenize_surface("Hello, world"), ["hello", ",", "world"]);
    }

    #[test]
    fn matches_regex_oracle() {
        for text in [
            "Don't stop: \"now\"!",
            "  tabs\tand\nnewlines ;x;  ",
            "Ünïcode Straße, ok?",
            "...",
        ] {
            assert_eq!(tokenize_surface(text), oracle(text), "{text}");
        }
    }

    #[test]
    fn vocabulary_order_and_cutoff() {
        let sents: Vec<Vec<String>> = vec![
            tokenize_surface("b a c a"),
            tokenize_surface("b d a"),
            tokenize_surface("c"),
        ];
        let v = Vocabulary::build(&sents, 2);
        // a:3, b:2, c:2, d:1
        assert_eq!(v.len(), 5);
        assert_eq!(v.token(2), Some("a"));
        assert_eq!(v.token(3), Some("b"));
        assert_eq!(v.token(4), Some("c"));
        assert_eq!(v.id("d"), UNK_ID);
        assert_eq!(v.id("<pad>"), PAD_ID);
        let again = Vocabulary::build(&sents, 2);
        assert_eq!(v.fingerprint(), again.fingerprint());
        let json = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&json).unwrap();
        assert_eq!(back, v);
    }

    proptest! {
        #[test]
        fn tokenize_join_idempotent(words in prop::collection::vec("[a-z]{1,6}|[.,!?;:]", 0..12)) {
            let joined = words.join(" ");
            prop_assert_eq!(tokenize_surface(&joined), words);
        }
    }
}
