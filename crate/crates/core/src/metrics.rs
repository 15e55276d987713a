//! BLEU-4, ROUGE-L, METEOR and exact-match accuracy over token sequences.
//! All scores are percentages in `[0, 100]`.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::corpus::TaskDirection;
use crate::error::{Error, Result};

pub type Tokens = [String];

fn check(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<()> {
    if cands.len() != refs.len() {
        return Err(Error::Contract(format!("{} candidates for {} references", cands.len(), refs.len())));
    }
    if cands.is_empty() {
        return Err(Error::Contract("cannot score an empty corpus".into()));
    }
    Ok(())
}

fn ngram_counts(tokens: &Tokens, n: usize) -> HashMap<&[String], usize> {
    let mut m = HashMap::new();
    if tokens.len() >= n {
        for w in tokens.windows(n) {
            *m.entry(w).or_insert(0) += 1;
        }
    }
    m
}

/// `(clipped matches, candidate n-grams)` for one pair.
fn modified_precision(cand: &Tokens, reference: &Tokens, n: usize) -> (usize, usize) {
    let c = ngram_counts(cand, n);
    let r = ngram_counts(reference, n);
    let matched = c.iter().map(|(g, &k)| k.min(r.get(g).copied().unwrap_or(0))).sum();
    (matched, cand.len().saturating_sub(n - 1))
}

fn brevity_penalty(cand_len: usize, ref_len: usize) -> f64 {
    if cand_len == 0 {
        0.0
    } else if cand_len >= ref_len {
        1.0
    } else {
        (1.0 - ref_len as f64 / cand_len as f64).exp()
    }
}

/// Geometric mean over the orders the candidate side actually has n-grams
/// for, so corpora of very short sequences are not forced to zero.
fn geometric_mean(counts: &[(usize, usize)], smooth: Option<f64>) -> f64 {
    let mut log_sum = 0.0;
    let mut orders = 0;
    for &(m, total) in counts {
        if total == 0 {
            continue;
        }
        let m = if m == 0 {
            match smooth {
                Some(eps) => eps,
                None => return 0.0,
            }
        } else {
            m as f64
        };
        log_sum += (m / total as f64).ln();
        orders += 1;
    }
    if orders == 0 {
        0.0
    } else {
        (log_sum / orders as f64).exp()
    }
}

/// Corpus-level BLEU-4: clipped n-gram matches and lengths pooled over all
/// pairs, uniform weights, brevity penalty on pooled lengths.
pub fn bleu4(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check(cands, refs)?;
    let mut counts = [(0usize, 0usize); 4];
    let (mut c_len, mut r_len) = (0, 0);
    for (c, r) in cands.iter().zip(refs) {
        for (n, slot) in counts.iter_mut().enumerate() {
            let (m, t) = modified_precision(c, r, n + 1);
            slot.0 += m;
            slot.1 += t;
        }
        c_len += c.len();
        r_len += r.len();
    }
    Ok(100.0 * brevity_penalty(c_len, r_len) * geometric_mean(&counts, None))
}

/// Sentence-level BLEU-4 with zero match counts replaced by `epsilon`.
pub fn sentence_bleu4(cand: &Tokens, reference: &Tokens, epsilon: f64) -> f64 {
    let counts: Vec<(usize, usize)> = (1..=4).map(|n| modified_precision(cand, reference, n)).collect();
    100.0 * brevity_penalty(cand.len(), reference.len()) * geometric_mean(&counts, Some(epsilon))
}

/// Mean sentence-level BLEU-4 over pairs.
pub fn bleu4_sentence_avg(cands: &[Vec<String>], refs: &[Vec<String>], epsilon: f64) -> Result<f64> {
    check(cands, refs)?;
    Ok(cands.iter().zip(refs).map(|(c, r)| sentence_bleu4(c, r, epsilon)).sum::<f64>() / cands.len() as f64)
}

pub fn lcs_len(a: &Tokens, b: &Tokens) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub const ROUGE_BETA: f64 = 1.2;

pub fn rouge_l_pair(cand: &Tokens, reference: &Tokens) -> f64 {
    let lcs = lcs_len(cand, reference);
    if lcs == 0 {
        return 0.0;
    }
    let p = lcs as f64 / cand.len() as f64;
    let r = lcs as f64 / reference.len() as f64;
    let b2 = ROUGE_BETA * ROUGE_BETA;
    (1.0 + b2) * p * r / (r + b2 * p)
}

/// Mean per-pair LCS F-score with `β = 1.2`.
pub fn rouge_l(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check(cands, refs)?;
    Ok(100.0 * cands.iter().zip(refs).map(|(c, r)| rouge_l_pair(c, r)).sum::<f64>() / cands.len() as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeteorParams {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for MeteorParams {
    fn default() -> Self {
        MeteorParams { alpha: 0.9, beta: 3.0, gamma: 0.5 }
    }
}

/// Greedy word alignment: exact matches first, then Porter-stem matches
/// among the words still free. Each stage scans the candidate from its last
/// word backwards and takes the last free matching reference word, the same
/// order NLTK uses. Returns `(cand, ref)` index pairs sorted by candidate
/// position.
pub fn meteor_alignment(cand: &Tokens, reference: &Tokens) -> Vec<(usize, usize)> {
    let mut c_used = vec![false; cand.len()];
    let mut r_used = vec![false; reference.len()];
    let mut pairs = Vec::new();
    let mut stage = |key_c: &dyn Fn(usize) -> String, key_r: &dyn Fn(usize) -> String| {
        for i in (0..cand.len()).rev() {
            if c_used[i] {
                continue;
            }
            let k = key_c(i);
            if let Some(j) = (0..reference.len()).rev().find(|&j| !r_used[j] && key_r(j) == k) {
                c_used[i] = true;
                r_used[j] = true;
                pairs.push((i, j));
            }
        }
    };
    stage(&|i| cand[i].clone(), &|j| reference[j].clone());
    stage(&|i| porter_stemmer::stem(&cand[i].to_lowercase()), &|j| porter_stemmer::stem(&reference[j].to_lowercase()));
    pairs.sort_unstable();
    pairs
}

fn chunks(alignment: &[(usize, usize)]) -> usize {
    if alignment.is_empty() {
        return 0;
    }
    1 + alignment.windows(2).filter(|w| !(w[1].0 == w[0].0 + 1 && w[1].1 == w[0].1 + 1)).count()
}

pub fn meteor_pair(cand: &Tokens, reference: &Tokens, p: MeteorParams) -> f64 {
    let a = meteor_alignment(cand, reference);
    let m = a.len();
    if m == 0 {
        return 0.0;
    }
    let precision = m as f64 / cand.len() as f64;
    let recall = m as f64 / reference.len() as f64;
    let fmean = precision * recall / (p.alpha * precision + (1.0 - p.alpha) * recall);
    let frag = chunks(&a) as f64 / m as f64;
    let penalty = p.gamma * frag.powf(p.beta);
    (1.0 - penalty) * fmean
}

/// Mean per-pair METEOR with exact and stem stages.
pub fn meteor(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check(cands, refs)?;
    let p = MeteorParams::default();
    Ok(100.0 * cands.iter().zip(refs).map(|(c, r)| meteor_pair(c, r, p)).sum::<f64>() / cands.len() as f64)
}

/// Lowercases the digits of hex literals; other tokens are returned as is.
pub fn normalize_token(t: &str) -> String {
    let body = t.strip_prefix('-').unwrap_or(t);
    let is_hex = match (body.get(..2), body.get(2..)) {
        (Some(p), Some(d)) => p.eq_ignore_ascii_case("0x") && !d.is_empty() && d.bytes().all(|b| b.is_ascii_hexdigit()),
        _ => false,
    };
    if is_hex {
        t.to_ascii_lowercase()
    } else {
        t.to_owned()
    }
}

pub fn sequences_match(a: &Tokens, b: &Tokens) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| normalize_token(x) == normalize_token(y))
}

/// Percentage of pairs whose token sequences are identical up to hex case.
pub fn exact_match(cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<f64> {
    check(cands, refs)?;
    let hits = cands.iter().zip(refs).filter(|(c, r)| sequences_match(c, r)).count();
    Ok(100.0 * hits as f64 / cands.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub direction: TaskDirection,
    pub pairs: usize,
    pub bleu4: f64,
    pub rouge_l: f64,
    /// Summarization only.
    pub meteor: Option<f64>,
    /// Generation only.
    pub acc: Option<f64>,
}

impl ScoreReport {
    pub fn compute(direction: TaskDirection, cands: &[Vec<String>], refs: &[Vec<String>]) -> Result<Self> {
        Ok(ScoreReport {
            direction,
            pairs: cands.len(),
            bleu4: bleu4(cands, refs)?,
            rouge_l: rouge_l(cands, refs)?,
            meteor: match direction {
                TaskDirection::Sum => Some(meteor(cands, refs)?),
                TaskDirection::Gen => None,
            },
            acc: match direction {
                TaskDirection::Gen => Some(exact_match(cands, refs)?),
                TaskDirection::Sum => None,
            },
        })
    }

    pub fn metrics(&self) -> Vec<(&'static str, f64)> {
        let mut m = vec![("bleu4", self.bleu4), ("rouge_l", self.rouge_l)];
        if let Some(x) = self.meteor {
            m.push(("meteor", x));
        }
        if let Some(x) = self.acc {
            m.push(("acc", x));
        }
        m
    }

    /// One `metric<TAB>value<TAB>pairs` record per line.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (name, v) in self.metrics() {
            let _ = writeln!(s, "{}.{name}\t{v:.4}\t{}", self.direction.as_str(), self.pairs);
        }
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(s: &str) -> Vec<String> {
        s.split_whitespace().map(str::to_owned).collect()
    }

    fn one(c: &str, r: &str) -> (Vec<Vec<String>>, Vec<Vec<String>>) {
        (vec![t(c)], vec![t(r)])
    }

    #[test]
    fn bleu_closed_forms() {
        let (c, r) = one("a b c d", "a b c d e");
        assert!((bleu4(&c, &r).unwrap() - 100.0 * (-0.25f64).exp()).abs() < 1e-9);
        assert!((bleu4(&c, &r).unwrap() - 77.88).abs() < 0.01);
        let (c, r) = one("a b c d e", "a b c d e");
        assert_eq!(bleu4(&c, &r).unwrap(), 100.0);
        let (c, r) = one("x y z w", "a b c d");
        assert_eq!(bleu4(&c, &r).unwrap(), 0.0);
        assert!(bleu4(&[], &[]).is_err());
        assert!(bleu4(&c, &[]).is_err());
    }

    #[test]
    fn bleu_short_identical_sequences_score_full() {
        let c = vec![t("int 0x80"), t("push eax")];
        assert_eq!(bleu4(&c, &c).unwrap(), 100.0);
    }

    #[test]
    fn sentence_bleu_smoothing() {
        // p1 = 3/4, p2 = 1/3, p3 = eps/2, p4 = eps/1
        let s = sentence_bleu4(&t("a b x c"), &t("a b y c"), 0.1);
        let geo = (((0.75f64).ln() + (1.0f64 / 3.0).ln() + (0.05f64).ln() + (0.1f64).ln()) / 4.0).exp();
        assert!((s - 100.0 * geo).abs() < 1e-9);
    }

    #[test]
    fn rouge_formula() {
        let (c, r) = one("a c", "a b c");
        let (p, rec) = (1.0, 2.0 / 3.0);
        let b2 = 1.44;
        let f = (1.0 + b2) * p * rec / (rec + b2 * p);
        assert!((rouge_l(&c, &r).unwrap() - 100.0 * f).abs() < 1e-9);
        assert_eq!(lcs_len(&t("a b c b d a b"), &t("b d c a b a")), 4);
    }

    #[test]
    fn meteor_closed_forms() {
        let (c, r) = one("a b c d", "a b c d");
        assert!((meteor(&c, &r).unwrap() - 100.0 * (1.0 - 0.5 / 64.0)).abs() < 1e-9);
        assert!((meteor(&c, &r).unwrap() - 99.22).abs() < 0.01);
        let (c, r) = one("a b", "c d");
        assert_eq!(meteor(&c, &r).unwrap(), 0.0);
        assert_eq!(meteor_alignment(&t("moving"), &t("move")), [(0, 0)]);
    }

    #[test]
    fn exact_match_cases() {
        let refs = vec![t("xor eax , eax"), t("int 0x80")];
        assert_eq!(exact_match(&refs, &refs).unwrap(), 100.0);
        let half = vec![t("xor eax , eax"), t("int 0x81")];
        assert_eq!(exact_match(&half, &refs).unwrap(), 50.0);
        let cased = vec![t("xor eax , eax"), t("int 0X80")];
        assert_eq!(exact_match(&cased, &refs).unwrap(), 100.0);
        assert!(!sequences_match(&t("mov EAX"), &t("mov eax")));
    }

    #[test]
    fn report_layout() {
        let c = vec![t("a b c d")];
        let g = ScoreReport::compute(TaskDirection::Gen, &c, &c).unwrap();
        assert!(g.meteor.is_none() && g.acc == Some(100.0));
        let s = ScoreReport::compute(TaskDirection::Sum, &c, &c).unwrap();
        assert!(s.acc.is_none() && s.meteor.is_some());
        assert_eq!(s.render().lines().count(), 3);
        assert!(g.render().starts_with("gen.bleu4\t100.0000\t1"));
    }
}
