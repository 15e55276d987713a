//! Parallel intent/snippet corpus: loading, tokenization, vocabulary,
//! dual-direction examples and the seeded 80/10/10 split.

mod dual;
mod tokenize;
mod vocab;

use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use log::{info, warn};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::SeededRng;

pub use dual::{dualize, target_ids, DualOptions, PrefixedExample, TaskDirection, TaskMode};
pub use tokenize::{detokenize, detokenize_code, tokenize, TokenKind, LINE_SEPARATOR};
pub use vocab::{special, Vocabulary, RESERVED_TOKENS};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExamplePair {
    /// Zero-based data row in the source file.
    pub row: usize,
    pub intent: String,
    pub snippet: String,
}

impl ExamplePair {
    pub fn intent_tokens(&self) -> Vec<String> {
        tokenize(&self.intent, TokenKind::Nl)
    }

    pub fn snippet_tokens(&self) -> Vec<String> {
        tokenize(&self.snippet, TokenKind::Code)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputFormat {
    Csv { intent_column: String, snippet_column: String },
    Tsv,
}

impl Default for InputFormat {
    fn default() -> Self {
        InputFormat::Csv { intent_column: "intent".into(), snippet_column: "snippet".into() }
    }
}

impl InputFormat {
    /// `.tsv` files are read as two-column TSV, anything else as CSV with
    /// the default header names.
    pub fn for_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(e) if e.eq_ignore_ascii_case("tsv") => InputFormat::Tsv,
            _ => InputFormat::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LoadReport {
    pub pairs: Vec<ExamplePair>,
    pub rows: usize,
    pub skipped: usize,
}

pub fn load_pairs(path: &Path, format: &InputFormat) -> Result<LoadReport> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let report = parse_pairs(&text, format).map_err(|e| match e {
        Error::Corpus(m) => Error::Corpus(format!("{}: {m}", path.display())),
        other => other,
    })?;
    info!("{}: {} pairs from {} rows ({} skipped)", path.display(), report.pairs.len(), report.rows, report.skipped);
    Ok(report)
}

/// Parses corpus text. Rows with an empty field or the wrong number of
/// columns are skipped and counted.
pub fn parse_pairs(text: &str, format: &InputFormat) -> Result<LoadReport> {
    let mut builder = csv::ReaderBuilder::new();
    builder.flexible(true);
    let (intent_ix, snippet_ix, mut reader) = match format {
        InputFormat::Tsv => {
            builder.has_headers(false).delimiter(b'\t').quoting(false);
            (0, 1, builder.from_reader(text.as_bytes()))
        }
        InputFormat::Csv { intent_column, snippet_column } => {
            let mut reader = builder.has_headers(true).from_reader(text.as_bytes());
            let headers = reader.headers().map_err(|e| Error::Corpus(format!("unreadable header: {e}")))?.clone();
            let find = |name: &str| {
                headers
                    .iter()
                    .position(|h| h.trim() == name)
                    .ok_or_else(|| Error::Corpus(format!("header has no `{name}` column")))
            };
            (find(intent_column)?, find(snippet_column)?, reader)
        }
    };
    let mut pairs = Vec::new();
    let (mut rows, mut skipped) = (0, 0);
    for (row, record) in reader.records().enumerate() {
        rows += 1;
        let record = match record {
            Ok(r) => r,
            Err(e) => {
                warn!("row {row}: {e}");
                skipped += 1;
                continue;
            }
        };
        let field = |i: usize| record.get(i).map(str::trim).unwrap_or("");
        let (intent, snippet) = (field(intent_ix), field(snippet_ix));
        let width_ok = !matches!(format, InputFormat::Tsv) || record.len() == 2;
        if intent.is_empty() || snippet.is_empty() || !width_ok {
            warn!("row {row}: malformed or empty field, skipped");
            skipped += 1;
            continue;
        }
        pairs.push(ExamplePair { row, intent: intent.to_owned(), snippet: snippet.to_owned() });
    }
    if skipped > 0 {
        warn!("{skipped} malformed rows skipped");
    }
    if pairs.is_empty() {
        return Err(Error::Corpus(format!("no valid rows among {rows}")));
    }
    Ok(LoadReport { pairs, rows, skipped })
}

/// All training tokens from both sides, in first-occurrence order.
pub fn build_vocab(train: &[ExamplePair]) -> Result<Vocabulary> {
    if train.is_empty() {
        return Err(Error::Corpus("cannot build a vocabulary from an empty training set".into()));
    }
    let mut v = Vocabulary::new();
    for p in train {
        for t in p.intent_tokens().iter().chain(&p.snippet_tokens()) {
            v.add(t);
        }
    }
    Ok(v)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
    pub test: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        SplitRatios { train: 0.8, val: 0.1, test: 0.1 }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Split {
    pub train: Vec<ExamplePair>,
    pub val: Vec<ExamplePair>,
    pub test: Vec<ExamplePair>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SplitName {
    Train,
    Val,
    Test,
}

impl SplitName {
    pub const ALL: [SplitName; 3] = [SplitName::Train, SplitName::Val, SplitName::Test];

    pub fn as_str(self) -> &'static str {
        match self {
            SplitName::Train => "train",
            SplitName::Val => "val",
            SplitName::Test => "test",
        }
    }
}

impl std::str::FromStr for SplitName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(SplitName::Train),
            "val" | "valid" | "validation" => Ok(SplitName::Val),
            "test" => Ok(SplitName::Test),
            _ => Err(Error::Config(format!("unknown split `{s}`"))),
        }
    }
}

impl Split {
    pub fn get(&self, name: SplitName) -> &[ExamplePair] {
        match name {
            SplitName::Train => &self.train,
            SplitName::Val => &self.val,
            SplitName::Test => &self.test,
        }
    }

    /// One JSON object per line: `{"split": ..., "row": ...}`.
    pub fn manifest(&self) -> String {
        let mut s = String::new();
        for name in SplitName::ALL {
            for p in self.get(name) {
                let _ = writeln!(s, "{{\"split\":\"{}\",\"row\":{}}}", name.as_str(), p.row);
            }
        }
        s
    }

    /// Rebuilds a split from a manifest and the loaded pairs.
    pub fn from_manifest(manifest: &str, pairs: &[ExamplePair]) -> Result<Self> {
        #[derive(Deserialize)]
        struct Entry {
            split: SplitName,
            row: usize,
        }
        let by_row: std::collections::HashMap<usize, &ExamplePair> = pairs.iter().map(|p| (p.row, p)).collect();
        let mut out = Split { train: Vec::new(), val: Vec::new(), test: Vec::new() };
        for (n, line) in manifest.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let e: Entry = serde_json::from_str(line).map_err(|err| Error::Parse {
                raw: line.to_owned(),
                message: format!("manifest line {}: {err}", n + 1),
            })?;
            let pair =
                by_row.get(&e.row).ok_or_else(|| Error::Corpus(format!("manifest row {} not in corpus", e.row)))?;
            match e.split {
                SplitName::Train => out.train.push((*pair).clone()),
                SplitName::Val => out.val.push((*pair).clone()),
                SplitName::Test => out.test.push((*pair).clone()),
            }
        }
        Ok(out)
    }
}

/// Seeded shuffle, then contiguous train/val/test slices with rounded sizes.
pub fn split(pairs: &[ExamplePair], ratios: SplitRatios, seed: u64) -> Result<Split> {
    let SplitRatios { train, val, test } = ratios;
    if [train, val, test].iter().any(|r| !(0.0..=1.0).contains(r)) || ((train + val + test) - 1.0).abs() > 1e-9 {
        return Err(Error::Config(format!("split ratios {train}/{val}/{test} must be in [0, 1] and sum to 1")));
    }
    let n = pairs.len();
    let n_train = (n as f64 * train).round() as usize;
    let n_val = (n as f64 * val).round() as usize;
    if n_train == 0 || n_val == 0 || n_train + n_val >= n {
        return Err(Error::Corpus(format!("{n} pairs are too few for three non-empty splits")));
    }
    let mut order: Vec<usize> = (0..n).collect();
    SeededRng::new(seed).shuffle(&mut order);
    let take = |ix: &[usize]| ix.iter().map(|&i| pairs[i].clone()).collect::<Vec<_>>();
    Ok(Split {
        train: take(&order[..n_train]),
        val: take(&order[n_train..n_train + n_val]),
        test: take(&order[n_train + n_val..]),
    })
}

/// Length distribution of one side of the corpus, in whitespace tokens.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LengthStats {
    pub mean: f64,
    pub mode: usize,
    pub median: f64,
    /// `(threshold, percentage of items shorter than threshold)`
    pub below: Vec<(usize, f64)>,
}

impl LengthStats {
    pub fn from_lengths(lengths: &[usize], thresholds: &[usize]) -> Option<Self> {
        if lengths.is_empty() {
            return None;
        }
        let n = lengths.len() as f64;
        let mean = lengths.iter().sum::<usize>() as f64 / n;
        let mut sorted = lengths.to_vec();
        sorted.sort_unstable();
        let mid = sorted.len() / 2;
        let median =
            if sorted.len() % 2 == 1 { sorted[mid] as f64 } else { (sorted[mid - 1] + sorted[mid]) as f64 / 2.0 };
        let mut counts = std::collections::BTreeMap::new();
        for &l in lengths {
            *counts.entry(l).or_insert(0usize) += 1;
        }
        let max_count = counts.values().copied().max().unwrap_or(0);
        let mode = counts.iter().find(|(_, &c)| c == max_count).map(|(&l, _)| l).unwrap_or(0);
        let below =
            thresholds.iter().map(|&t| (t, 100.0 * lengths.iter().filter(|&&l| l < t).count() as f64 / n)).collect();
        Some(LengthStats { mean, mode, median, below })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub pairs: usize,
    pub code: LengthStats,
    pub comment: LengthStats,
}

impl CorpusStats {
    pub fn compute(pairs: &[ExamplePair]) -> Option<Self> {
        let code: Vec<usize> = pairs.iter().map(|p| p.snippet.split_whitespace().count()).collect();
        let nl: Vec<usize> = pairs.iter().map(|p| p.intent.split_whitespace().count()).collect();
        Some(CorpusStats {
            pairs: pairs.len(),
            code: LengthStats::from_lengths(&code, &[5, 10, 15])?,
            comment: LengthStats::from_lengths(&nl, &[10, 30, 50])?,
        })
    }

    pub fn render(&self) -> String {
        let row = |name: &str, s: &LengthStats| {
            let mut line = format!("{name:<8} avg {:.2}  mode {}  median {}", s.mean, s.mode, s.median);
            for (t, p) in &s.below {
                let _ = write!(line, "  <{t} {p:.2}%");
            }
            line
        };
        format!("pairs {}\n{}\n{}\n", self.pairs, row("code", &self.code), row("comment", &self.comment))
    }
}

/// Verifies that no original row appears in two splits.
pub fn check_disjoint(split: &Split) -> Result<()> {
    let mut seen = HashSet::new();
    for name in SplitName::ALL {
        for p in split.get(name) {
            if !seen.insert(p.row) {
                return Err(Error::Corpus(format!("row {} appears in more than one split", p.row)));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pairs(n: usize) -> Vec<ExamplePair> {
        (0..n).map(|i| ExamplePair { row: i, intent: format!("do thing {i}"), snippet: format!("inc e{i}") }).collect()
    }

    #[test]
    fn csv_two_rows() {
        let r = parse_pairs("intent,snippet\nclear eax,\"xor eax, eax\"\nsyscall,int 0x80\n", &InputFormat::default())
            .unwrap();
        assert_eq!(r.pairs.len(), 2);
        assert_eq!(r.pairs[0].snippet, "xor eax, eax");
        assert_eq!(r.skipped, 0);
    }

    #[test]
    fn empty_snippet_is_skipped() {
        let r = parse_pairs("intent,snippet\nclear eax,\nsyscall,int 0x80\n", &InputFormat::default()).unwrap();
        assert_eq!((r.pairs.len(), r.skipped, r.rows), (1, 1, 2));
        assert_eq!(r.pairs[0].row, 1);
    }

    #[test]
    fn custom_columns_and_tsv() {
        let fmt = InputFormat::Csv { intent_column: "nl".into(), snippet_column: "code".into() };
        let r = parse_pairs("code,nl\nint 0x80,make syscall\n", &fmt).unwrap();
        assert_eq!(r.pairs[0].intent, "make syscall");
        let r = parse_pairs("a b\tinc eax\nbad line\n", &InputFormat::Tsv).unwrap();
        assert_eq!((r.pairs.len(), r.skipped), (1, 1));
        assert!(parse_pairs("intent,snippet\n,\n", &InputFormat::default()).is_err());
        assert!(parse_pairs("x,y\n1,2\n", &InputFormat::default()).is_err());
    }

    #[test]
    fn vocab_from_training_only() {
        let train = vec![ExamplePair { row: 0, intent: "a b".into(), snippet: "b c".into() }];
        let v = build_vocab(&train).unwrap();
        assert_eq!(&v.tokens()[RESERVED_TOKENS..], ["a", "b", "c"]);
        assert_eq!(v.encode(&["d"]), [special::UNK]);
        assert!(build_vocab(&[]).is_err());
    }

    #[test]
    fn split_sizes_and_determinism() {
        let s = split(&pairs(10), SplitRatios::default(), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        let s = split(&pairs(3200), SplitRatios::default(), 7).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (2560, 320, 320));
        check_disjoint(&s).unwrap();
        assert_eq!(s, split(&pairs(3200), SplitRatios::default(), 7).unwrap());
        assert_ne!(s.train, split(&pairs(3200), SplitRatios::default(), 8).unwrap().train);
        assert!(split(&pairs(3), SplitRatios::default(), 7).is_err());
        assert!(split(&pairs(10), SplitRatios { train: 0.5, val: 0.1, test: 0.1 }, 7).is_err());
    }

    #[test]
    fn manifest_round_trip() {
        let p = pairs(20);
        let s = split(&p, SplitRatios::default(), 1).unwrap();
        let m = s.manifest();
        assert_eq!(m.lines().count(), 20);
        assert_eq!(Split::from_manifest(&m, &p).unwrap(), s);
    }

    #[test]
    fn length_stats() {
        let s = LengthStats::from_lengths(&[3, 3, 4, 2, 8], &[5, 10]).unwrap();
        assert!((s.mean - 4.0).abs() < 1e-12);
        assert_eq!((s.mode, s.median), (3, 3.0));
        assert_eq!(s.below, vec![(5, 80.0), (10, 100.0)]);
        assert!(LengthStats::from_lengths(&[], &[]).is_none());
    }
}
