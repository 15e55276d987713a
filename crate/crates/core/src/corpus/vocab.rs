use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Reserved token ids, fixed across every vocabulary.
pub mod special {
    pub const PAD: usize = 0;
    pub const START: usize = 1;
    pub const END: usize = 2;
    pub const UNK: usize = 3;
    pub const PREFIX_GEN: usize = 4;
    pub const PREFIX_SUM: usize = 5;

    pub const NAMES: [&str; 6] = ["<pad>", "<s>", "</s>", "<unk>", "ShellCodeGen:", "ShellCodeSum:"];

    /// True for ids a decoder should never emit mid-sequence.
    pub fn is_control(id: usize) -> bool {
        matches!(id, PAD | START | PREFIX_GEN | PREFIX_SUM)
    }
}

pub const RESERVED_TOKENS: usize = special::NAMES.len();

/// Token/id bijection with the reserved tokens occupying ids `0..6`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct Vocabulary {
    tokens: Vec<String>,
    ids: HashMap<String, usize>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = special::NAMES.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Vocabulary { tokens, ids }
    }

    /// Rebuilds from a full token list; the reserved prefix must match.
    pub fn from_tokens(tokens: Vec<String>) -> Result<Self> {
        if tokens.len() < RESERVED_TOKENS || tokens.iter().zip(special::NAMES).any(|(a, b)| a != b) {
            return Err(Error::Corpus("vocabulary does not start with the reserved tokens".into()));
        }
        let mut ids = HashMap::with_capacity(tokens.len());
        for (i, t) in tokens.iter().enumerate() {
            if ids.insert(t.clone(), i).is_some() {
                return Err(Error::Corpus(format!("duplicate vocabulary token `{t}`")));
            }
        }
        Ok(Vocabulary { tokens, ids })
    }

    /// Adds a token if new; returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        if let Some(&i) = self.ids.get(token) {
            return i;
        }
        self.tokens.push(token.to_owned());
        self.ids.insert(token.to_owned(), self.tokens.len() - 1);
        self.tokens.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }

    pub fn encode<S: AsRef<str>>(&self, tokens: &[S]) -> Vec<usize> {
        tokens.iter().map(|t| self.id(t.as_ref()).unwrap_or(special::UNK)).collect()
    }

    pub fn decode(&self, ids: &[usize]) -> Result<Vec<String>> {
        ids.iter()
            .map(|&i| {
                self.token(i)
                    .map(str::to_owned)
                    .ok_or_else(|| Error::Index(format!("token id {i} outside vocabulary of {}", self.len())))
            })
            .collect()
    }

    /// Decodes model output, dropping start/end/pad markers.
    pub fn decode_output(&self, ids: &[usize]) -> Result<Vec<String>> {
        let body: Vec<usize> = ids
            .iter()
            .copied()
            .filter(|&i| !matches!(i, special::PAD | special::START))
            .take_while(|&i| i != special::END)
            .collect();
        self.decode(&body)
    }
}

impl TryFrom<Vec<String>> for Vocabulary {
    type Error = Error;

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
    fn reserved_ids_are_stable() {
        let v = Vocabulary::new();
        assert_eq!(v.id("ShellCodeGen:"), Some(special::PREFIX_GEN));
        assert_eq!(v.id("ShellCodeSum:"), Some(special::PREFIX_SUM));
        assert_eq!(v.len(), RESERVED_TOKENS);
    }

    #[test]
    fn encode_decode_round_trip() {
        let mut v = Vocabulary::new();
        for t in ["a", "b", "c", "a"] {
            v.add(t);
        }
        assert_eq!(v.len(), 9);
        let ids = v.encode(&["c", "a", "zzz"]);
        assert_eq!(ids, [8, 6, special::UNK]);
        let back = v.decode(&ids).unwrap();
        assert_eq!(v.encode(&back), ids);
        assert!(v.decode(&[99]).is_err());
    }

    #[test]
    fn serde_round_trip_and_validation() {
        let mut v = Vocabulary::new();
        v.add("x");
        let json = serde_json::to_string(&v).unwrap();
        assert_eq!(serde_json::from_str::<Vocabulary>(&json).unwrap(), v);
        assert!(serde_json::from_str::<Vocabulary>(r#"["x"]"#).is_err());
    }

    #[test]
    fn output_decoding_stops_at_end() {
        let mut v = Vocabulary::new();
        let a = v.add("a");
        let out = v.decode_output(&[special::START, a, special::END, a]).unwrap();
        assert_eq!(out, ["a"]);
    }
}
