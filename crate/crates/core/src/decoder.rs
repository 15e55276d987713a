//! Greedy and beam-search decoding over any next-token scorer.

use std::cmp::Ordering;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::corpus::special;
use crate::error::{Error, Result};
use crate::model::{EncoderMemory, Seq2Seq};
use crate::tensor::Real;

/// Produces next-token log-probabilities for a batch of generated prefixes.
/// Prefixes contain generated tokens only; any start marker is the
/// implementor's business.
pub trait StepModel {
    fn vocab_size(&self) -> usize;
    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>>;
}

/// Decoding session for one encoded source.
pub struct ModelStepper<'a, T: Real> {
    model: &'a Seq2Seq<T>,
    memory: EncoderMemory<T>,
}

impl<'a, T: Real> ModelStepper<'a, T> {
    pub fn new(model: &'a Seq2Seq<T>, source: &[usize]) -> Result<Self> {
        Ok(ModelStepper { model, memory: model.encode(source)? })
    }
}

impl<T: Real> StepModel for ModelStepper<'_, T> {
    fn vocab_size(&self) -> usize {
        self.model.config().vocab_size
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let full: Vec<Vec<usize>> =
            prefixes.iter().map(|p| std::iter::once(special::START).chain(p.iter().copied()).collect()).collect();
        let out = self.model.decode_logprobs_batch(&full, &self.memory)?;
        Ok(out.into_iter().map(|row| row.into_iter().map(|x| x.to_f64().unwrap_or(f64::NAN)).collect()).collect())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    pub beam_width: usize,
    pub max_len: usize,
    /// Length-normalisation exponent; 0 ranks by the raw log-probability sum.
    pub alpha: f64,
    /// Token that finishes a hypothesis, if any.
    pub end: Option<usize>,
    /// Tokens that may never be emitted.
    pub blocked: Vec<usize>,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam_width: 3,
            max_len: 64,
            alpha: 0.0,
            end: Some(special::END),
            blocked: vec![special::PAD, special::START, special::PREFIX_GEN, special::PREFIX_SUM],
        }
    }
}

impl DecodeConfig {
    /// Defaults with the length cap used for code targets.
    pub fn for_code() -> Self {
        DecodeConfig { max_len: 32, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beam_width == 0 || self.max_len == 0 {
            return Err(Error::Config("beam_width and max_len must be at least 1".into()));
        }
        if !self.alpha.is_finite() || self.alpha < 0.0 {
            return Err(Error::Config(format!("length penalty {} must be finite and non-negative", self.alpha)));
        }
        Ok(())
    }

    fn allowed(&self, vocab: usize) -> Vec<usize> {
        (0..vocab).filter(|t| !self.blocked.contains(t)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BeamHypothesis {
    /// Generated tokens, including the end token when it was produced.
    pub tokens: Vec<usize>,
    pub log_prob: f64,
    /// Ranking score: `log_prob / len^alpha`.
    pub score: f64,
    pub finished: bool,
}

impl BeamHypothesis {
    /// Tokens with a trailing end token removed.
    pub fn body(&self, end: Option<usize>) -> &[usize] {
        match (self.tokens.last(), end) {
            (Some(&l), Some(e)) if l == e => &self.tokens[..self.tokens.len() - 1],
            _ => &self.tokens,
        }
    }
}

fn score(log_prob: f64, len: usize, alpha: f64) -> f64 {
    if alpha == 0.0 {
        log_prob
    } else {
        log_prob / (len.max(1) as f64).powf(alpha)
    }
}

/// Higher score first, then lexicographically smaller token sequence.
fn rank(a: &BeamHypothesis, b: &BeamHypothesis) -> Ordering {
    b.score.total_cmp(&a.score).then_with(|| a.tokens.cmp(&b.tokens))
}

fn check_row(row: &[f64], vocab: usize) -> Result<()> {
    if row.len() != vocab {
        return Err(Error::Shape(format!("scorer returned {} log-probabilities for vocabulary {vocab}", row.len())));
    }
    Ok(())
}

pub fn greedy_decode(model: &dyn StepModel, config: &DecodeConfig) -> Result<BeamHypothesis> {
    config.validate()?;
    let vocab = model.vocab_size();
    let allowed = config.allowed(vocab);
    if allowed.is_empty() {
        return Err(Error::Config("every token is blocked".into()));
    }
    let (mut tokens, mut log_prob) = (Vec::new(), 0.0);
    let mut finished = false;
    while tokens.len() < config.max_len {
        let row = model.next_logprobs(std::slice::from_ref(&tokens))?.remove(0);
        check_row(&row, vocab)?;
        // strict comparison keeps the lowest id on ties
        let mut best = allowed[0];
        for &t in &allowed[1..] {
            if row[t] > row[best] {
                best = t;
            }
        }
        log_prob += row[best];
        tokens.push(best);
        if Some(best) == config.end {
            finished = true;
            break;
        }
    }
    let finished = finished || tokens.len() == config.max_len;
    Ok(BeamHypothesis { score: score(log_prob, tokens.len(), config.alpha), tokens, log_prob, finished })
}

/// Beam search returning up to `beam_width` hypotheses, best first.
///
/// At each step every live hypothesis is extended by every allowed token and
/// the best `beam_width` extensions survive; extensions that emit the end
/// token or reach `max_len` are retired to the finished pool. The greedy
/// path is also entered into the pool, so the top result never scores below
/// greedy decoding.
pub fn beam_search(model: &dyn StepModel, config: &DecodeConfig) -> Result<Vec<BeamHypothesis>> {
    config.validate()?;
    let vocab = model.vocab_size();
    let allowed = config.allowed(vocab);
    if allowed.is_empty() {
        return Err(Error::Config("every token is blocked".into()));
    }
    let reachable = (allowed.len() as u128).checked_pow(config.max_len as u32).unwrap_or(u128::MAX);
    let mut width = config.beam_width;
    if width as u128 > reachable {
        width = reachable as usize;
        warn!("beam width {} exceeds the {reachable} reachable sequences; clamped", config.beam_width);
    }
    let mut live = vec![BeamHypothesis { tokens: Vec::new(), log_prob: 0.0, score: 0.0, finished: false }];
    let mut done: Vec<BeamHypothesis> = Vec::new();
    for _ in 0..config.max_len {
        if live.is_empty() {
            break;
        }
        let prefixes: Vec<Vec<usize>> = live.iter().map(|h| h.tokens.clone()).collect();
        let rows = model.next_logprobs(&prefixes)?;
        let mut cands = Vec::with_capacity(live.len() * allowed.len());
        for (h, row) in live.iter().zip(&rows) {
            check_row(row, vocab)?;
            for &t in &allowed {
                let mut tokens = h.tokens.clone();
                tokens.push(t);
                let log_prob = h.log_prob + row[t];
                let finished = Some(t) == config.end || tokens.len() == config.max_len;
                cands.push(BeamHypothesis {
                    score: score(log_prob, tokens.len(), config.alpha),
                    tokens,
                    log_prob,
                    finished,
                });
            }
        }
        cands.sort_by(rank);
        cands.truncate(width);
        let (fin, next): (Vec<_>, Vec<_>) = cands.into_iter().partition(|h| h.finished);
        done.extend(fin);
        live = next;
        // Raw sums only fall as hypotheses grow, so once `width` finished
        // results beat every live prefix nothing can overtake them.
        if config.alpha == 0.0 && done.len() >= width {
            done.sort_by(rank);
            let kth = done[width - 1].score;
            if live.iter().all(|h| h.score <= kth) {
                live.clear();
            }
        }
    }
    let greedy = greedy_decode(model, config)?;
    if !done.iter().any(|h| h.tokens == greedy.tokens) {
        done.push(greedy);
    }
    done.sort_by(rank);
    done.truncate(width);
    Ok(done)
}

/// Beam search with width 1 short-circuits to greedy decoding.
pub fn decode(model: &dyn StepModel, config: &DecodeConfig) -> Result<BeamHypothesis> {
    if config.beam_width == 1 {
        return greedy_decode(model, config);
    }
    beam_search(model, config)?
        .into_iter()
        .next()
        .ok_or_else(|| Error::State("beam search produced no hypothesis".into()))
}
