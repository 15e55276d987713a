//! End-to-end steps behind the command line: prepare, train, evaluate,
//! infer, repair, retrieval baselines and attention dumps. Every step reads
//! and writes inside the run's work directory.
//!
//! ```text
//! <workdir>/run_config.toml     effective configuration
//! <workdir>/data/split.jsonl    split manifest
//! <workdir>/data/vocab.json     training vocabulary
//! <workdir>/data/stats.txt      corpus statistics
//! <workdir>/model/best.ckpt     best checkpoint
//! <workdir>/model/train_log.jsonl
//! <workdir>/eval/<split>/report.txt, <dir>.predictions.tsv, repair_audit.jsonl
//! <workdir>/baseline/<method>/<split>/...
//! ```

mod attn_dump;
mod config;

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use log::{info, warn};
use serde::Serialize;

pub use attn_dump::{parse_dump, render_dump, site_name, AttentionMatrix, DUMP_HEADER};
pub use config::{DecodeOptions, ModelOptions, Paths, RunConfig, TrainOptions, WORKDIR_ENV};

use crate::corpus::{
    self, build_vocab, check_disjoint, detokenize, dualize, load_pairs, special, tokenize, CorpusStats, DualOptions,
    ExamplePair, Split, SplitName, TaskDirection, TokenKind, Vocabulary,
};
use crate::decoder::{decode, DecodeConfig, ModelStepper};
use crate::error::{Error, Result};
use crate::metrics::ScoreReport;
use crate::model::{AttentionSite, Checkpoint, CheckpointMeta, Seq2Seq};
use crate::repair::{repair, RepairReport};
use crate::retrieval::{Bm25Params, Document, RetrievalIndex, RetrievalMethod};
use crate::tensor::SeededRng;
use crate::trainer::{fit, FitOutput, FitReport};

pub const MANIFEST_FILE: &str = "split.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const STATS_FILE: &str = "stats.txt";
pub const CONFIG_COPY: &str = "run_config.toml";
pub const REPORT_FILE: &str = "report.txt";
pub const AUDIT_FILE: &str = "repair_audit.jsonl";

fn write_file(path: &Path, contents: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, contents).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn direction_kinds(direction: TaskDirection) -> (TokenKind, TokenKind) {
    match direction {
        TaskDirection::Gen => (TokenKind::Nl, TokenKind::Code),
        TaskDirection::Sum => (TokenKind::Code, TokenKind::Nl),
    }
}

fn source_and_reference(pair: &ExamplePair, direction: TaskDirection) -> (&str, &str) {
    match direction {
        TaskDirection::Gen => (&pair.intent, &pair.snippet),
        TaskDirection::Sum => (&pair.snippet, &pair.intent),
    }
}

fn save_config_copy(cfg: &RunConfig) -> Result<()> {
    write_file(&cfg.paths.workdir.join(CONFIG_COPY), &cfg.to_toml()?)
}

#[derive(Clone, Debug, PartialEq)]
pub struct PrepareReport {
    pub rows: usize,
    pub skipped: usize,
    pub train: usize,
    pub val: usize,
    pub test: usize,
    /// Training items after expansion into task directions.
    pub dualized_train: usize,
    pub vocab_size: usize,
    pub stats: Option<CorpusStats>,
}

impl PrepareReport {
    pub fn render(&self) -> String {
        let mut s = format!(
            "rows\t{}\nskipped\t{}\ntrain\t{}\nval\t{}\ntest\t{}\ndualized_train\t{}\nvocab\t{}\n",
            self.rows, self.skipped, self.train, self.val, self.test, self.dualized_train, self.vocab_size
        );
        if let Some(st) = &self.stats {
            s.push_str(&st.render());
        }
        s
    }
}

/// Loads the corpus, splits it, builds the training vocabulary and writes
/// the manifest, vocabulary and statistics.
pub fn prepare(cfg: &RunConfig) -> Result<PrepareReport> {
    cfg.validate()?;
    let loaded = load_pairs(&cfg.paths.corpus, &cfg.input_format())?;
    let split = corpus::split(&loaded.pairs, cfg.split, cfg.seed)?;
    check_disjoint(&split)?;
    let vocab = build_vocab(&split.train)?;
    let stats = CorpusStats::compute(&loaded.pairs);
    let report = PrepareReport {
        rows: loaded.rows,
        skipped: loaded.skipped,
        train: split.train.len(),
        val: split.val.len(),
        test: split.test.len(),
        dualized_train: split.train.len() * cfg.task.directions().len(),
        vocab_size: vocab.len(),
        stats,
    };
    let dir = cfg.data_dir();
    write_file(&dir.join(MANIFEST_FILE), &split.manifest())?;
    write_file(&dir.join(VOCAB_FILE), &serde_json::to_string_pretty(&vocab)?)?;
    write_file(&dir.join(STATS_FILE), &report.render())?;
    save_config_copy(cfg)?;
    info!(
        "prepared {} train / {} val / {} test pairs, vocabulary {}",
        report.train, report.val, report.test, report.vocab_size
    );
    Ok(report)
}

/// Artifacts written by [`prepare`], re-joined with the corpus.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub split: Split,
    pub vocab: Vocabulary,
}

impl Prepared {
    pub fn load(cfg: &RunConfig) -> Result<Self> {
        let dir = cfg.data_dir();
        let manifest_path = dir.join(MANIFEST_FILE);
        if !manifest_path.exists() {
            return Err(Error::Contract(format!("{} not found; run `prepare` first", manifest_path.display())));
        }
        let loaded = load_pairs(&cfg.paths.corpus, &cfg.input_format())?;
        let split = Split::from_manifest(&read_file(&manifest_path)?, &loaded.pairs)?;
        let vocab: Vocabulary = serde_json::from_str(&read_file(&dir.join(VOCAB_FILE))?)?;
        Ok(Prepared { split, vocab })
    }
}

/// Builds a fresh model from the prepared vocabulary and fits it.
pub fn train(cfg: &RunConfig) -> Result<FitReport> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let options = cfg.dual_options();
    let train_set = dualize(&prepared.split.train, &prepared.vocab, options);
    let val_set = dualize(&prepared.split.val, &prepared.vocab, options);
    let model_cfg = cfg.model.to_config(prepared.vocab.len());
    let mut model = Seq2Seq::<f32>::new(model_cfg, &mut SeededRng::new(cfg.seed).fork(0))?;
    save_config_copy(cfg)?;
    let dir = cfg.model_dir();
    let report = fit(
        &mut model,
        &train_set,
        &val_set,
        &cfg.train_config(),
        FitOutput { dir: &dir, vocab: &prepared.vocab, prefix: cfg.prefix },
    )?;
    info!("best epoch {} with validation loss {:.4}", report.best_epoch, report.best_val_loss);
    Ok(report)
}

/// A loaded checkpoint ready for decoding.
#[derive(Clone, Debug)]
pub struct Session {
    pub model: Seq2Seq<f32>,
    pub vocab: Vocabulary,
    pub meta: CheckpointMeta,
    pub decode: DecodeOptions,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Inference {
    pub direction: TaskDirection,
    pub text: String,
    pub tokens: Vec<String>,
    pub log_prob: f64,
    /// Source tokens missing from the vocabulary.
    pub unknown_tokens: usize,
    /// Generation only, when repair was requested.
    pub repair: Option<RepairReport>,
}

impl Session {
    pub fn load(path: &Path, decode: DecodeOptions) -> Result<Self> {
        let (model, vocab, meta) = Checkpoint::load(path)?.into_model()?;
        Ok(Session { model, vocab, meta, decode })
    }

    pub fn from_parts(model: Seq2Seq<f32>, vocab: Vocabulary, meta: CheckpointMeta, decode: DecodeOptions) -> Self {
        Session { model, vocab, meta, decode }
    }

    fn prefix_options(&self) -> DualOptions {
        DualOptions { prefix: self.meta.prefix, ..DualOptions::default() }
    }

    /// Source ids for raw text: optional prefix token, then the body.
    pub fn source_ids(&self, direction: TaskDirection, text: &str) -> (Vec<usize>, usize) {
        let tokens = tokenize(text, direction_kinds(direction).0);
        let body = self.vocab.encode(&tokens);
        let unknown = body.iter().filter(|&&i| i == special::UNK).count();
        (self.prefix_options().source_ids(direction, &body), unknown)
    }

    pub fn decode_ids(&self, direction: TaskDirection, source: &[usize]) -> Result<(Vec<String>, f64)> {
        let stepper = ModelStepper::new(&self.model, source)?;
        let cfg: DecodeConfig = self.decode.for_direction(direction);
        let hyp = decode(&stepper, &cfg)?;
        Ok((self.vocab.decode_output(&hyp.tokens)?, hyp.log_prob))
    }

    /// Decodes one input; generation output is repaired against the input
    /// intent when `with_repair` is set.
    pub fn infer(&self, direction: TaskDirection, text: &str, with_repair: bool) -> Result<Inference> {
        if text.trim().is_empty() {
            return Err(Error::Contract("empty input text".into()));
        }
        let (source, unknown_tokens) = self.source_ids(direction, text);
        let body_len = source.len() - usize::from(self.meta.prefix);
        if unknown_tokens == body_len {
            warn!("every input token is out of vocabulary; decoding from <unk> only");
        }
        let (tokens, log_prob) = self.decode_ids(direction, &source)?;
        let out_kind = direction_kinds(direction).1;
        let mut text_out = detokenize(&tokens, out_kind);
        let mut report = None;
        if with_repair && direction == TaskDirection::Gen {
            let (fixed, r) = repair(&text_out, text);
            text_out = fixed;
            report = Some(r);
        }
        let tokens = tokenize(&text_out, out_kind);
        Ok(Inference { direction, text: text_out, tokens, log_prob, unknown_tokens, repair: report })
    }

    /// Decodes many sources, fanning out over the available cores. Output
    /// order follows input order.
    pub fn decode_many(&self, direction: TaskDirection, sources: &[Vec<usize>]) -> Result<Vec<Vec<String>>> {
        let workers = std::thread::available_parallelism().map_or(1, |n| n.get()).min(sources.len().max(1));
        let chunk = sources.len().div_ceil(workers).max(1);
        std::thread::scope(|scope| {
            let handles: Vec<_> = sources
                .chunks(chunk)
                .map(|part| {
                    scope.spawn(move || {
                        part.iter().map(|s| self.decode_ids(direction, s).map(|(t, _)| t)).collect::<Result<Vec<_>>>()
                    })
                })
                .collect();
            let mut out = Vec::with_capacity(sources.len());
            for h in handles {
                out.extend(h.join().map_err(|_| Error::State("decoding worker panicked".into()))??);
            }
            Ok(out)
        })
    }
}

/// Scores for one split; generation appears with and without repair.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub split: SplitName,
    pub gen: Option<ScoreReport>,
    pub gen_repaired: Option<ScoreReport>,
    pub sum: Option<ScoreReport>,
}

impl EvalReport {
    /// `label.metric<TAB>value<TAB>pairs`, with labels `gen`, `gen.repair`
    /// and `sum`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let sections = [("gen", &self.gen), ("gen.repair", &self.gen_repaired), ("sum", &self.sum)];
        for (label, rep) in sections {
            if let Some(r) = rep {
                for (name, v) in r.metrics() {
                    let _ = writeln!(s, "{label}.{name}\t{v:.4}\t{}", r.pairs);
                }
            }
        }
        s
    }

    /// Parses [`render`](Self::render) output into `(label.metric, value, pairs)`.
    pub fn parse(text: &str) -> Result<Vec<(String, f64, usize)>> {
        text.lines()
            .filter(|l| !l.trim().is_empty())
            .map(|l| {
                let f: Vec<&str> = l.split('\t').collect();
                let bad = || Error::Parse { raw: l.to_owned(), message: "expected `name<TAB>value<TAB>pairs`".into() };
                if f.len() != 3 {
                    return Err(bad());
                }
                Ok((f[0].to_owned(), f[1].parse().map_err(|_| bad())?, f[2].parse().map_err(|_| bad())?))
            })
            .collect()
    }
}

/// One decoded item: source, reference, raw output, repaired output.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    pub source: String,
    pub reference: String,
    pub output: String,
    pub repaired: Option<String>,
}

struct Scored {
    report: EvalReport,
    predictions: Vec<(TaskDirection, Vec<Prediction>)>,
    audit: Vec<RepairReport>,
}

fn score_outputs(
    split: SplitName,
    pairs: &[ExamplePair],
    directions: &[TaskDirection],
    mut produce: impl FnMut(TaskDirection) -> Result<Vec<String>>,
) -> Result<Scored> {
    let mut report = EvalReport { split, gen: None, gen_repaired: None, sum: None };
    let mut predictions = Vec::new();
    let mut audit = Vec::new();
    for &direction in directions {
        let outputs = produce(direction)?;
        let (_, out_kind) = direction_kinds(direction);
        let refs: Vec<Vec<String>> =
            pairs.iter().map(|p| tokenize(source_and_reference(p, direction).1, out_kind)).collect();
        let cands: Vec<Vec<String>> = outputs.iter().map(|o| tokenize(o, out_kind)).collect();
        let mut preds: Vec<Prediction> = pairs
            .iter()
            .zip(&outputs)
            .map(|(p, o)| {
                let (src, reference) = source_and_reference(p, direction);
                Prediction {
                    source: src.to_owned(),
                    reference: reference.to_owned(),
                    output: o.clone(),
                    repaired: None,
                }
            })
            .collect();
        let scores = ScoreReport::compute(direction, &cands, &refs)?;
        match direction {
            TaskDirection::Gen => {
                let mut fixed = Vec::with_capacity(outputs.len());
                for (pred, p) in preds.iter_mut().zip(pairs) {
                    let (text, r) = repair(&pred.output, &p.intent);
                    fixed.push(tokenize(&text, out_kind));
                    pred.repaired = Some(text);
                    audit.push(r);
                }
                let repaired = ScoreReport::compute(direction, &fixed, &refs)?;
                if repaired.acc < scores.acc {
                    warn!(
                        "repair lowered {} exact match from {:.4} to {:.4}",
                        split.as_str(),
                        scores.acc.unwrap_or(0.0),
                        repaired.acc.unwrap_or(0.0)
                    );
                }
                report.gen = Some(scores);
                report.gen_repaired = Some(repaired);
            }
            TaskDirection::Sum => report.sum = Some(scores),
        }
        predictions.push((direction, preds));
    }
    Ok(Scored { report, predictions, audit })
}

fn write_scored(dir: &Path, scored: &Scored) -> Result<()> {
    write_file(&dir.join(REPORT_FILE), &scored.report.render())?;
    for (direction, preds) in &scored.predictions {
        let mut s = String::from("source\treference\toutput\trepaired\n");
        for p in preds {
            let clean = |x: &str| x.replace(['\t', '\n'], " ");
            let _ = writeln!(
                s,
                "{}\t{}\t{}\t{}",
                clean(&p.source),
                clean(&p.reference),
                clean(&p.output),
                p.repaired.as_deref().map(clean).unwrap_or_default()
            );
        }
        write_file(&dir.join(format!("{}.predictions.tsv", direction.as_str())), &s)?;
    }
    let mut audit = String::new();
    for (i, r) in scored.audit.iter().enumerate() {
        #[derive(Serialize)]
        struct Entry<'a> {
            item: usize,
            #[serde(flatten)]
            report: &'a RepairReport,
        }
        let _ = writeln!(audit, "{}", serde_json::to_string(&Entry { item: i, report: r })?);
    }
    write_file(&dir.join(AUDIT_FILE), &audit)
}

/// Checks that a checkpoint matches the architecture the config asks for.
fn check_compatible(cfg: &RunConfig, session: &Session) -> Result<()> {
    let want = cfg.model.to_config(session.vocab.len());
    let have = session.model.config();
    if *have != want {
        return Err(Error::Checkpoint(format!(
            "checkpoint architecture ({} layers, {} heads, width {}, {}) does not match the configuration ({} layers, {} heads, width {}, {})",
            have.n_layers, have.n_heads, have.d_model, have.norm_mode, want.n_layers, want.n_heads, want.d_model, want.norm_mode
        )));
    }
    Ok(())
}

/// Decodes a split with the trained model and scores every direction of the
/// task mode. Writes the report, predictions and repair audit.
pub fn eval(cfg: &RunConfig, split: SplitName) -> Result<EvalReport> {
    cfg.validate()?;
    let prepared = Prepared::load(cfg)?;
    let session = Session::load(&cfg.checkpoint_path(), cfg.decode.clone())?;
    check_compatible(cfg, &session)?;
    let pairs = prepared.split.get(split);
    if pairs.is_empty() {
        return Err(Error::Corpus(format!("split {} is empty", split.as_str())));
    }
    let scored = score_outputs(split, pairs, cfg.task.directions(), |direction| {
        let sources: Vec<Vec<usize>> =
            pairs.iter().map(|p| session.source_ids(direction, source_and_reference(p, direction).0).0).collect();
        let toks = session.decode_many(direction, &sources)?;
        Ok(toks.iter().map(|t| detokenize(t, direction_kinds(direction).1)).collect())
    })?;
    write_scored(&cfg.paths.workdir.join("eval").join(split.as_str()), &scored)?;
    Ok(scored.report)
}

/// Answers each query of a split with the nearest training example under
/// `method`. Generation outputs are also scored after repair.
pub fn baseline(cfg: &RunConfig, method: RetrievalMethod, split: SplitName) -> Result<EvalReport> {
    let prepared = Prepared::load(cfg)?;
    let pairs = prepared.split.get(split);
    if pairs.is_empty() {
        return Err(Error::Corpus(format!("split {} is empty", split.as_str())));
    }
    let scored = score_outputs(split, pairs, cfg.task.directions(), |direction| {
        let (in_kind, _) = direction_kinds(direction);
        let docs = prepared
            .split
            .train
            .iter()
            .map(|p| {
                let (src, tgt) = source_and_reference(p, direction);
                Document { text: src.to_owned(), tokens: tokenize(src, in_kind), target: tgt.to_owned() }
            })
            .collect();
        let index = RetrievalIndex::new(docs, Bm25Params::default())?;
        pairs
            .iter()
            .map(|p| {
                let q = source_and_reference(p, direction).0;
                Ok(index.retrieve(method, q, &tokenize(q, in_kind))?.target.to_owned())
            })
            .collect()
    })?;
    write_scored(&cfg.paths.workdir.join("baseline").join(method.as_str()).join(split.as_str()), &scored)?;
    Ok(scored.report)
}

/// Repairs `generated<TAB>intent` records. Returns the repaired records in
/// the same shape and a JSON-lines audit log.
pub fn repair_records(input: &str) -> Result<(String, String)> {
    let mut out = String::new();
    let mut audit = String::new();
    for (n, line) in input.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (generated, intent) = line.split_once('\t').ok_or_else(|| Error::Parse {
            raw: line.to_owned(),
            message: format!("record {} is not `generated<TAB>intent`", n + 1),
        })?;
        let (fixed, report) = repair(generated, intent);
        let _ = writeln!(out, "{fixed}\t{intent}");
        #[derive(Serialize)]
        struct Entry<'a> {
            line: usize,
            #[serde(flatten)]
            report: &'a RepairReport,
        }
        let _ = writeln!(audit, "{}", serde_json::to_string(&Entry { line: n + 1, report: &report })?);
    }
    Ok((out, audit))
}

/// Splits a leading prefix token off `text`, if present.
fn strip_prefix_text(text: &str) -> (Option<TaskDirection>, &str) {
    let trimmed = text.trim_start();
    for (d, id) in [(TaskDirection::Gen, special::PREFIX_GEN), (TaskDirection::Sum, special::PREFIX_SUM)] {
        if let Some(rest) = trimmed.strip_prefix(special::NAMES[id]) {
            if rest.is_empty() || rest.starts_with(char::is_whitespace) {
                return (Some(d), rest.trim_start());
            }
        }
    }
    (None, text)
}

/// Attention weights for one input. A leading `ShellCodeGen:` or
/// `ShellCodeSum:` in `text` selects the direction, otherwise `direction`
/// does. With `target`, decoder self and cross attention are included.
pub fn attention_dump(
    session: &Session,
    direction: TaskDirection,
    text: &str,
    target: Option<&str>,
) -> Result<Vec<AttentionMatrix>> {
    let (explicit, body) = strip_prefix_text(text);
    let direction = explicit.unwrap_or(direction);
    let (source, _) = session.source_ids(direction, body);
    if source.is_empty() {
        return Err(Error::Contract("empty input text".into()));
    }
    let target_ids = target.map(|t| {
        let toks = tokenize(t, direction_kinds(direction).1);
        corpus::target_ids(&session.vocab.encode(&toks))
    });
    let maps = session.model.attention_maps(&source, target_ids.as_deref())?;
    let names = |ids: &[usize]| -> Result<Vec<String>> { session.vocab.decode(ids) };
    let src_names = names(&source[..source.len().min(session.model.config().max_source_len)])?;
    let tgt_names = match &target_ids {
        Some(t) => names(&t[..t.len().min(session.model.config().max_target_len)])?,
        None => Vec::new(),
    };
    let mut out = Vec::new();
    for m in maps {
        let (rows, cols) = match m.site {
            AttentionSite::EncoderSelf => (&src_names, &src_names),
            AttentionSite::DecoderSelf => (&tgt_names, &tgt_names),
            AttentionSite::DecoderCross => (&tgt_names, &src_names),
        };
        let shape = m.weights.shape();
        let (heads, q, k) = (shape[0], shape[1], shape[2]);
        let data = m.weights.data();
        for h in 0..heads {
            let weights = (0..q).map(|i| (0..k).map(|j| f64::from(data[(h * q + i) * k + j])).collect()).collect();
            out.push(AttentionMatrix {
                site: m.site,
                layer: m.layer + 1,
                head: h + 1,
                rows: rows[..q].to_vec(),
                cols: cols[..k].to_vec(),
                weights,
            });
        }
    }
    Ok(out)
}

/// Writes `text` to `path`, creating parent directories.
pub fn write_output(path: &Path, text: &str) -> Result<()> {
    write_file(path, text)
}

/// Directory holding evaluation artifacts for `split`.
pub fn eval_dir(cfg: &RunConfig, split: SplitName) -> PathBuf {
    cfg.paths.workdir.join("eval").join(split.as_str())
}
