//! Nearest-source retrieval baselines: BM25, Jaccard and character-level
//! Levenshtein. Each answers a query with the target paired to the most
//! similar training source; ties go to the lowest index.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RetrievalMethod {
    Bm25,
    Jaccard,
    Levenshtein,
}

impl RetrievalMethod {
    pub const ALL: [RetrievalMethod; 3] =
        [RetrievalMethod::Bm25, RetrievalMethod::Jaccard, RetrievalMethod::Levenshtein];

    pub fn as_str(self) -> &'static str {
        match self {
            RetrievalMethod::Bm25 => "bm25",
            RetrievalMethod::Jaccard => "jaccard",
            RetrievalMethod::Levenshtein => "levenshtein",
        }
    }
}

impl std::str::FromStr for RetrievalMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bm25" => Ok(RetrievalMethod::Bm25),
            "jaccard" => Ok(RetrievalMethod::Jaccard),
            "levenshtein" | "lev" => Ok(RetrievalMethod::Levenshtein),
            _ => Err(Error::Config(format!("unknown retrieval method `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

/// A training source: raw text for edit distance, tokens for the rest.
#[derive(Clone, Debug, PartialEq)]
pub struct Document {
    pub text: String,
    pub tokens: Vec<String>,
    pub target: String,
}

#[derive(Clone, Debug)]
pub struct RetrievalIndex {
    docs: Vec<Document>,
    term_freqs: Vec<HashMap<String, usize>>,
    doc_freq: HashMap<String, usize>,
    avg_len: f64,
    params: Bm25Params,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Hit<'a> {
    pub index: usize,
    pub score: f64,
    pub target: &'a str,
}

impl RetrievalIndex {
    pub fn new(docs: Vec<Document>, params: Bm25Params) -> Result<Self> {
        if docs.is_empty() {
            return Err(Error::Contract("retrieval index needs at least one document".into()));
        }
        let mut doc_freq = HashMap::new();
        let mut term_freqs = Vec::with_capacity(docs.len());
        for d in &docs {
            let mut tf = HashMap::new();
            for t in &d.tokens {
                *tf.entry(t.clone()).or_insert(0) += 1;
            }
            for t in tf.keys() {
                *doc_freq.entry(t.clone()).or_insert(0) += 1;
            }
            term_freqs.push(tf);
        }
        let avg_len = docs.iter().map(|d| d.tokens.len()).sum::<usize>() as f64 / docs.len() as f64;
        Ok(RetrievalIndex { docs, term_freqs, doc_freq, avg_len, params })
    }

    pub fn len(&self) -> usize {
        self.docs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.docs.is_empty()
    }

    pub fn documents(&self) -> &[Document] {
        &self.docs
    }

    /// `ln(1 + (N − df + 0.5) / (df + 0.5))`, which stays positive for
    /// terms present in most documents.
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.docs.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    pub fn bm25_scores(&self, query: &[String]) -> Vec<f64> {
        let Bm25Params { k1, b } = self.params;
        self.docs
            .iter()
            .zip(&self.term_freqs)
            .map(|(d, tf)| {
                let norm = k1 * (1.0 - b + b * d.tokens.len() as f64 / self.avg_len.max(f64::MIN_POSITIVE));
                query
                    .iter()
                    .map(|q| match tf.get(q) {
                        Some(&f) => self.idf(q) * f as f64 * (k1 + 1.0) / (f as f64 + norm),
                        None => 0.0,
                    })
                    .sum()
            })
            .collect()
    }

    pub fn jaccard_scores(&self, query: &[String]) -> Vec<f64> {
        let q: HashSet<&String> = query.iter().collect();
        self.docs.iter().map(|d| jaccard(&q, &d.tokens.iter().collect())).collect()
    }

    pub fn levenshtein_scores(&self, query: &str) -> Vec<f64> {
        self.docs.iter().map(|d| levenshtein_similarity(query, &d.text)).collect()
    }

    fn best(&self, scores: Vec<f64>) -> Hit<'_> {
        let mut best = 0;
        for (i, &s) in scores.iter().enumerate().skip(1) {
            if s > scores[best] {
                best = i;
            }
        }
        Hit { index: best, score: scores[best], target: &self.docs[best].target }
    }

    pub fn retrieve(&self, method: RetrievalMethod, query_text: &str, query_tokens: &[String]) -> Result<Hit<'_>> {
        if query_tokens.is_empty() || query_text.trim().is_empty() {
            return Err(Error::Contract("empty retrieval query".into()));
        }
        let scores = match method {
            RetrievalMethod::Bm25 => self.bm25_scores(query_tokens),
            RetrievalMethod::Jaccard => self.jaccard_scores(query_tokens),
            RetrievalMethod::Levenshtein => self.levenshtein_scores(query_text),
        };
        Ok(self.best(scores))
    }
}

/// `|A ∩ B| / |A ∪ B|`; two empty sets count as identical.
pub fn jaccard<T: Eq + std::hash::Hash>(a: &HashSet<T>, b: &HashSet<T>) -> f64 {
    let union = a.union(b).count();
    if union == 0 {
        return 1.0;
    }
    a.intersection(b).count() as f64 / union as f64
}

/// Character-level edit distance with unit costs.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn levenshtein_similarity(a: &str, b: &str) -> f64 {
    let longest = a.chars().count().max(b.chars().count());
    if longest == 0 {
        return 1.0;
    }
    1.0 - levenshtein(a, b) as f64 / longest as f64
}
