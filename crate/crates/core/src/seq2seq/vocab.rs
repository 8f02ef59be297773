use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const BOS: usize = 2;
pub const EOS: usize = 3;

const RESERVED: [&str; 4] = ["<pad>", "<unk>", "<s>", "</s>"];

/// Token <-> id bijection with the four reserved ids first.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    #[serde(skip)]
    index: HashMap<String, usize>,
}

impl Vocabulary {
    /// Builds a vocabulary from tokenized lines, most frequent first (ties by
    /// token text), keeping at most `max_size` entries including reserved ids.
    pub fn build<'a, I, L>(lines: I, max_size: Option<usize>) -> Self
    where
        I: IntoIterator<Item = L>,
        L: IntoIterator<Item = &'a str>,
    {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for line in lines {
            for tok in line {
                *counts.entry(tok).or_default() += 1;
            }
        }
        let mut words: Vec<(&str, usize)> = counts.into_iter().filter(|(w, _)| !RESERVED.contains(w)).collect();
        words.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(b.0)));
        let mut tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let cap = max_size.unwrap_or(usize::MAX);
        tokens.extend(
            words
                .into_iter()
                .map(|(w, _)| w.to_string())
                .take(cap.saturating_sub(4)),
        );
        Self::from_tokens(tokens).expect("reserved prefix present")
    }

    /// Vocabulary whose first four entries must be the reserved tokens.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < 5 {
            return Err(invalid("vocabulary needs at least one non-reserved token"));
        }
        if tokens.iter().take(4).zip(RESERVED).any(|(a, b)| a != b) {
            return Err(invalid("vocabulary must start with <pad> <unk> <s> </s>"));
        }
        let mut index = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if index.insert(t.clone(), i).is_some() {
                return Err(invalid(format!("duplicate vocabulary entry {t:?}")));
            }
        }
        Ok(Self { tokens, index })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        self.tokens.get(id).map(String::as_str).unwrap_or("<unk>")
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref())).collect()
    }

    /// Maps ids back to tokens, stopping at EOS and dropping PAD/BOS.
    pub fn decode(&self, ids: &[usize]) -> Vec<String> {
        ids.iter()
            .take_while(|&&i| i != EOS)
            .filter(|&&i| i != PAD && i != BOS)
            .map(|&i| self.token(i).to_string())
            .collect()
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = crate::Error;

    fn try_from(tokens: Vec<String>) -> Result<Self> {
        Self::from_tokens(tokens)
    }
}

impl From<Vocabulary> for Vec<String> {
    fn from(v: Vocabulary) -> Self {
        v.tokens
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reserved_ids_are_fixed() {
        let v = Vocabulary::build([vec!["b", "a", "a"]], None);
        assert_eq!(v.id("<pad>"), PAD);
        assert_eq!(v.id("<unk>"), UNK);
        assert_eq!(v.id("<s>"), BOS);
        assert_eq!(v.id("</s>"), EOS);
        assert_eq!(v.token(4), "a");
        assert_eq!(v.id("zzz"), UNK);
    }

    #[test]
    fn decode_stops_at_eos() {
        let v = Vocabulary::build([vec!["x", "y"]], None);
        let ids = vec![BOS, v.id("x"), v.id("y"), EOS, v.id("x")];
        assert_eq!(v.decode(&ids), vec!["x", "y"]);
    }

    #[test]
    fn serde_round_trip() {
        let v = Vocabulary::build([vec!["x", "y", "y"]], Some(5));
        assert_eq!(v.len(), 5);
        let s = serde_json::to_string(&v).unwrap();
        let back: Vocabulary = serde_json::from_str(&s).unwrap();
        assert_eq!(back.id("y"), v.id("y"));
        assert!(serde_json::from_str::<Vocabulary>("[\"a\",\"b\"]").is_err());
    }
}
