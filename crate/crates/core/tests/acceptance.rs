//! Acceptance suite. Prints one PASS / FAIL / NOT EVALUATED line per
//! criterion and exits non-zero if any evaluated criterion fails. Runs
//! without the libtest harness so the report shows under plain `cargo test`.
//!
//! Criteria 8 and 9 need the public Shellcode_IA32 corpus; point
//! `DUALSC_CORPUS` at its CSV to run them. Criterion 9 trains 18 models and
//! takes hours on a CPU; `DUALSC_ABLATION_EPOCHS` caps each run (default 100).

use std::path::Path;
use std::time::Instant;

use dualsc::attention::{attention, zero_mean_unit_normalized, AttentionMask, NormMode};
use dualsc::corpus::{
    build_vocab, dualize, special, tokenize, DualOptions, SplitName, TaskDirection, TaskMode, TokenKind,
};
use dualsc::decoder::{beam_search, greedy_decode, DecodeConfig, ModelStepper, StepModel};
use dualsc::metrics::{bleu4, exact_match, meteor, rouge_l};
use dualsc::model::{Batch, ModelConfig, Seq2Seq};
use dualsc::pipeline::{self, EvalReport, RunConfig, Session};
use dualsc::repair::repair;
use dualsc::tensor::{SeededRng, Tape, Tensor};
use dualsc::toy;
use dualsc::trainer::{train_epoch, Adam, AdamConfig, TrainConfig};

type Outcome = Result<String, String>;

enum Verdict {
    Pass(String),
    Fail(String),
    NotEvaluated(String),
}

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn toks(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_owned).collect()
}

// 1. Central finite differences over every scalar parameter.

fn gradient_correctness() -> Outcome {
    let start = Instant::now();
    let mut cfg = ModelConfig::new(20, NormMode::AdjustQkNorm);
    cfg.d_model = 32;
    cfg.hidden_size = 64;
    cfg.dropout = 0.0;
    let model = Seq2Seq::<f64>::new(cfg, &mut SeededRng::new(11)).map_err(|e| e.to_string())?;
    let batch = Batch {
        sources: vec![vec![4, 7, 8, 9], vec![5, 11]],
        targets: vec![vec![special::START, 13, 14, special::END], vec![special::START, special::END]],
    };
    let mut tape = Tape::new();
    let pv = model.params().register(&mut tape);
    let loss = model.loss(&mut tape, &pv, &batch, None).map_err(|e| e.to_string())?;
    tape.backward(loss).map_err(|e| e.to_string())?;
    let analytic: Vec<Vec<f64>> = (0..model.params().len()).map(|i| tape.grad(pv.get(i)).unwrap().to_vec()).collect();

    let entries: Vec<(usize, usize)> =
        analytic.iter().enumerate().flat_map(|(p, g)| (0..g.len()).map(move |j| (p, j))).collect();
    let workers = std::thread::available_parallelism().map_or(1, |n| n.get());
    let h = 1e-5;
    let batch = &batch;
    let results: Vec<(f64, Option<String>)> = std::thread::scope(|s| {
        let handles: Vec<_> = entries
            .chunks(entries.len().div_ceil(workers))
            .map(|part| {
                let mut m = model.clone();
                let analytic = &analytic;
                s.spawn(move || {
                    let mut worst = 0.0f64;
                    let mut first_fail = None;
                    for &(p, j) in part {
                        let orig = m.params().tensor(p).data()[j];
                        m.params_mut().tensor_mut(p).data_mut()[j] = orig + h;
                        let fp = m.eval_loss(batch).unwrap();
                        m.params_mut().tensor_mut(p).data_mut()[j] = orig - h;
                        let fm = m.eval_loss(batch).unwrap();
                        m.params_mut().tensor_mut(p).data_mut()[j] = orig;
                        let numeric = (fp - fm) / (2.0 * h);
                        let a = analytic[p][j];
                        let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-6);
                        worst = worst.max(rel);
                        if rel >= 1e-3 && first_fail.is_none() {
                            first_fail =
                                Some(format!("{}[{j}]: analytic {a:e}, numeric {numeric:e}", m.params().name(p)));
                        }
                    }
                    (worst, first_fail)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().unwrap()).collect()
    });
    let worst = results.iter().map(|r| r.0).fold(0.0, f64::max);
    if let Some(f) = results.into_iter().find_map(|r| r.1) {
        return Err(format!("relative error >= 1e-3 at {f}"));
    }
    let secs = start.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s (limit 60 s)"))?;
    Ok(format!(
        "{} scalars in {} tensors, max rel err {worst:.2e} (< 1e-3), {secs:.1} s (< 60 s)",
        entries.len(),
        analytic.len()
    ))
}

// 2. Adjust_QKNorm invariants.

fn adjust_qknorm_invariants() -> Outcome {
    let mut rng = SeededRng::new(21);
    let (mut worst_sum, mut worst_norm, mut worst_bound, mut worst_masked) =
        (0.0f64, 0.0f64, f64::NEG_INFINITY, 0.0f64);
    for trial in 0..200 {
        let (batch, heads, d) = (2, 4, 8);
        let (lq, lk) = (1 + trial % 5, 2 + trial % 6);
        let mut rand = |shape: &[usize]| {
            let n = shape.iter().product();
            let scale = 10f64.powf(rng.uniform_range(-2.0, 2.0));
            Tensor::<f32>::from_f64(shape, &(0..n).map(|_| rng.normal() * scale).collect::<Vec<_>>()).unwrap()
        };
        let q = rand(&[batch * heads, lq, d]);
        let k = rand(&[batch * heads, lk, d]);
        let v = rand(&[batch * heads, lk, d]);
        let gvals: Vec<f64> = (0..heads).map(|_| rng.uniform_range(-8.0, 8.0)).collect();
        let g = Tensor::<f32>::from_f64(&[heads], &gvals).unwrap();
        let valid: Vec<Vec<bool>> =
            (0..batch).map(|b| (0..lk).map(|j| j == 0 || (j + b + trial) % 3 != 0).collect()).collect();
        let mask = AttentionMask::padding(&valid, lq).unwrap();

        for t in [&q, &k] {
            let n = zero_mean_unit_normalized(t, 1e-6).unwrap();
            for row in n.data().chunks(d) {
                let sum: f64 = row.iter().map(|&x| x as f64).sum();
                let norm = row.iter().map(|&x| (x as f64).powi(2)).sum::<f64>().sqrt();
                worst_sum = worst_sum.max(sum.abs());
                worst_norm = worst_norm.max((norm - 1.0).abs());
            }
        }

        let mut tape = Tape::<f32>::new();
        let (qv, kv, vv, gv) = (tape.constant(q), tape.constant(k), tape.constant(v), tape.constant(g));
        let out =
            attention(&mut tape, NormMode::AdjustQkNorm, qv, kv, vv, Some(gv), &mask).map_err(|e| e.to_string())?;
        let logits = tape.data(out.logits).to_vec();
        let weights = tape.data(out.weights).to_vec();
        for bh in 0..batch * heads {
            let (b, hd) = (bh / heads, bh % heads);
            for i in 0..lq {
                for j in 0..lk {
                    let idx = (bh * lq + i) * lk + j;
                    if mask.is_allowed(b, i, j) {
                        worst_bound = worst_bound.max((logits[idx] as f64).abs() - gvals[hd].abs());
                    } else {
                        worst_masked = worst_masked.max(weights[idx] as f64);
                    }
                }
            }
        }
    }
    ensure(worst_sum <= 1e-5, || format!("slice sum off by {worst_sum:e}"))?;
    ensure(worst_norm <= 1e-5, || format!("slice norm off by {worst_norm:e}"))?;
    ensure(worst_bound <= 1e-5, || format!("|s| exceeds |g| by {worst_bound:e}"))?;
    ensure(worst_masked < 1e-6, || format!("masked weight {worst_masked:e}"))?;
    Ok(format!(
        "200 trials: |sum| <= {worst_sum:.1e}, |norm-1| <= {worst_norm:.1e}, max(|s|-|g|) = {worst_bound:.1e}, masked weight <= {worst_masked:.1e}"
    ))
}

// 3. Memorising a 32-pair toy corpus.

fn decode_accuracy(model: &Seq2Seq<f32>, data: &[dualsc::corpus::PrefixedExample], direction: TaskDirection) -> f64 {
    let cfg = DecodeConfig::default();
    let mut hits = 0;
    let mut total = 0;
    for e in data.iter().filter(|e| e.direction == direction) {
        let stepper = ModelStepper::new(model, &e.source).unwrap();
        let hyp = dualsc::decoder::decode(&stepper, &cfg).unwrap();
        total += 1;
        if hyp.body(cfg.end) == &e.target[1..e.target.len() - 1] {
            hits += 1;
        }
    }
    100.0 * hits as f64 / total as f64
}

fn overfit_toy() -> Outcome {
    let start = Instant::now();
    let pairs = toy::pairs(32);
    let vocab = build_vocab(&pairs).map_err(|e| e.to_string())?;
    let data = dualize(&pairs, &vocab, DualOptions::default());
    let mut cfg = ModelConfig::new(vocab.len(), NormMode::AdjustQkNorm);
    cfg.d_model = 64;
    cfg.n_heads = 4;
    cfg.hidden_size = 128;
    cfg.dropout = 0.0;
    let mut model = Seq2Seq::<f32>::new(cfg, &mut SeededRng::new(7)).map_err(|e| e.to_string())?;
    let tc = TrainConfig {
        batch_size: 16,
        adam: AdamConfig { lr: 3e-3, ..AdamConfig::default() },
        ..TrainConfig::default()
    };
    let mut adam = Adam::new(tc.adam, model.params());
    let (mut shuffle, mut dropout) = (SeededRng::new(1), SeededRng::new(2));
    for epoch in 1..=300 {
        let stats =
            train_epoch(&mut model, &mut adam, &data, &tc, &mut shuffle, &mut dropout).map_err(|e| e.to_string())?;
        if epoch % 10 == 0 || stats.loss < 0.01 {
            let gen = decode_accuracy(&model, &data, TaskDirection::Gen);
            let sum = decode_accuracy(&model, &data, TaskDirection::Sum);
            if gen == 100.0 && sum == 100.0 {
                let secs = start.elapsed().as_secs_f64();
                ensure(secs < 300.0, || format!("reached 100% but took {secs:.0} s (limit 300 s)"))?;
                return Ok(format!(
                    "100% exact match both directions at epoch {epoch} (<= 300), loss {:.4}, {secs:.1} s (< 300 s)",
                    stats.loss
                ));
            }
        }
    }
    let gen = decode_accuracy(&model, &data, TaskDirection::Gen);
    let sum = decode_accuracy(&model, &data, TaskDirection::Sum);
    Err(format!("after 300 epochs: gen {gen:.1}%, sum {sum:.1}%"))
}

// 4. Metric fixtures; expected values from tests/oracles/metrics_oracle.py.

/// Candidate/reference pairs and the expected BLEU-4, ROUGE-L, METEOR, ACC.
type Fixture = (&'static [(&'static str, &'static str)], [f64; 4]);

#[rustfmt::skip]
const FIXTURES: &[Fixture] = &[
    (&[("a b c d", "a b c d e")], [77.8800783071, 87.1428571429, 80.9948979592, 0.0]),
    (&[("the cat sat on the mat today", "the cat sat on a mat today")], [48.8923022435, 85.7142857143, 80.3571428571, 0.0]),
    (&[("mov eax , 0xAB \\n int 0x80", "mov eax , 0xab \\n int 0x80")], [0.0, 85.7142857143, 99.8542274052, 100.0]),
    (&[("push ebx", "push ebx")], [100.0, 100.0, 93.75, 100.0]),
    (&[("a b c d e f", "a b c d e f g"), ("x y z w", "x y w z")], [70.8073545221, 83.0223880597, 82.8307417472, 0.0]),
    (&[("jump short to the label now", "jump to the label now")], [53.7284965912, 92.4242424242, 94.9019607843, 0.0]),
    (&[("xor ecx , ecx \\n mul ecx", "xor ecx , ecx")], [41.1133616901, 76.4890282132, 46.5116279070, 0.0]),
    (&[("the the the the", "the cat the mat")], [0.0, 50.0, 25.0, 0.0]),
    (&[("moving the value into eax", "move the value into eax")], [66.8740304976, 80.0, 99.6, 0.0]),
    (&[("a b", "b a")], [0.0, 50.0, 50.0, 0.0]),
    (&[("push eax", "push eax"), ("pop ebx from the stack", "pop ecx from the stack"), ("int 0x80", "int 0x80 ;")], [0.0, 85.7383966245, 77.8017241379, 33.3333333333]),
    (&[("decrement ecx by one and jump to loop", "decrement the ecx register and jump to loop")], [38.2602941628, 75.0, 70.3125, 0.0]),
    (&[("store the byte in al", "load the word from esi")], [0.0, 20.0, 10.0, 0.0]),
    (&[("jumps to the loop start", "jump to the loop start")], [66.8740304976, 80.0, 99.6, 0.0]),
];

fn metric_fixtures() -> Outcome {
    type Metric = fn(&[Vec<String>], &[Vec<String>]) -> dualsc::Result<f64>;
    let metrics: [(&str, Metric); 4] =
        [("bleu4", bleu4), ("rouge_l", rouge_l), ("meteor", meteor), ("acc", exact_match)];
    let mut worst = 0.0f64;
    for (pairs, want) in FIXTURES {
        let c: Vec<Vec<String>> = pairs.iter().map(|p| toks(p.0)).collect();
        let r: Vec<Vec<String>> = pairs.iter().map(|p| toks(p.1)).collect();
        for ((name, f), w) in metrics.iter().zip(want) {
            let got = f(&c, &r).map_err(|e| e.to_string())?;
            worst = worst.max((got - w).abs());
            ensure((got - w).abs() <= 1e-4, || format!("{name} on {pairs:?}: {got} vs {w}"))?;
        }
    }
    let ident = vec![toks("mov eax , 0x1"), toks("xor ebx , ebx \\n int 0x80")];
    let other = vec![toks("jmp short loop"), toks("push edi")];
    for (name, f) in metrics {
        let same = f(&ident, &ident).map_err(|e| e.to_string())?;
        let floor = if name == "meteor" { 99.0 } else { 100.0 };
        ensure(same >= floor && same <= 100.0, || format!("{name} identity gives {same}"))?;
        let disjoint = f(&ident, &other).map_err(|e| e.to_string())?;
        ensure(disjoint == 0.0, || format!("{name} disjoint gives {disjoint}"))?;
    }
    Ok(format!(
        "{} fixtures x 4 metrics, max |err| {worst:.1e} (<= 1e-4); identity 100 (METEOR >= 99), disjoint 0",
        FIXTURES.len()
    ))
}

// 5. Repair.

/// `(generated, intent, reference)`; every reference agrees with its intent's literals.
const REPAIR_SUITE: [(&str, &str, &str); 20] = [
    (
        "sub ecx, 0x1525152a",
        "subtract 0x6374612e from the contents in ecx and save the result in ecx",
        "sub ecx, 0x6374612e",
    ),
    ("xor eax, eax", "zero out eax", "xor eax, eax"),
    ("mov eax, 0x11", "move 0x0b into eax", "mov eax, 0x0b"),
    ("mov eax, 0x0b", "move 0x0b into eax", "mov eax, 0x0b"),
    ("mov al, <unk>", "move 0x66 into al", "mov al, 0x66"),
    ("push <unk>", "push 0x68732f2f onto the stack", "push 0x68732f2f"),
    ("int 0x80", "make the system call", "int 0x80"),
    ("mov bl, 3", "put 5 into bl", "mov bl, 5"),
    ("add esp, 0x10 \\n pop eax", "add 0x18 to esp then pop eax", "add esp, 0x18 \\n pop eax"),
    ("mov ecx, 0x1 \\n mov edx, 0x2", "move 0x7 into ecx and 0x8 into edx", "mov ecx, 0x7 \\n mov edx, 0x8"),
    ("mov ebx, ecx", "move 0x5 into ebx", "mov ebx, 0x5"),
    ("cmp al, 0xAA", "compare al with 0xaa", "cmp al, 0xaa"),
    ("mov byte [esi + 7], 0x1", "move 0x0 into the byte at esi plus 7", "mov byte [esi + 7], 0x0"),
    ("loop decode", "loop to decode", "loop decode"),
    ("jmp short 0x20", "jump short to call_shellcode", "jmp short call_shellcode"),
    ("mov eax, 0x1", "move 0x1 into eax", "mov eax, 0x1"),
    ("sub esp, 0x30", "subtract 0x40 from esp", "sub esp, 0x40"),
    ("push 0x0a", "push 0x0b and 0x0c", "push 0x0b \\n push 0x0c"),
    ("_start: xor ecx, ecx", "_start: zero ecx", "_start: xor ecx, ecx"),
    ("dec <unk>", "decrement the counter", "dec ecx"),
];

fn repair_criteria() -> Outcome {
    let (fixed, report) =
        repair("sub ecx, 0x1525152a", "subtract 0x6374612e from the contents in ecx and save the result in ecx");
    ensure(fixed == "sub ecx, 0x6374612e" && report.changed, || format!("worked example gave {fixed:?}"))?;
    let code = |s: &str| tokenize(s, TokenKind::Code);
    let refs: Vec<Vec<String>> = REPAIR_SUITE.iter().map(|c| code(c.2)).collect();
    let before: Vec<Vec<String>> = REPAIR_SUITE.iter().map(|c| code(c.0)).collect();
    let mut after = Vec::new();
    for (gen, intent, _) in REPAIR_SUITE {
        let (once, _) = repair(gen, intent);
        let (twice, _) = repair(&once, intent);
        ensure(once == twice, || format!("not idempotent on {gen:?}: {once:?} then {twice:?}"))?;
        after.push(code(&once));
    }
    let acc_before = exact_match(&before, &refs).map_err(|e| e.to_string())?;
    let acc_after = exact_match(&after, &refs).map_err(|e| e.to_string())?;
    for ((b, a), r) in before.iter().zip(&after).zip(&refs) {
        ensure(!(b == r && a != r), || format!("repair broke a correct line {b:?}"))?;
    }
    ensure(acc_after >= acc_before, || format!("exact match fell from {acc_before} to {acc_after}"))?;
    Ok(format!("worked example exact; 20 cases idempotent; exact match {acc_before:.0}% -> {acc_after:.0}%"))
}

// 6. Beam search against brute force.

struct Toy {
    vocab: usize,
    seed: u64,
}

impl StepModel for Toy {
    fn vocab_size(&self) -> usize {
        self.vocab
    }

    fn next_logprobs(&self, prefixes: &[Vec<usize>]) -> dualsc::Result<Vec<Vec<f64>>> {
        Ok(prefixes
            .iter()
            .map(|p| {
                let key =
                    p.iter().fold(self.seed * 7919 + 1, |h, &t| h.wrapping_mul(6364136223846793005) ^ (t as u64 + 3));
                let mut rng = SeededRng::new(key);
                let logits: Vec<f64> = (0..self.vocab).map(|_| rng.normal() * 1.5).collect();
                let z = logits.iter().map(|x| x.exp()).sum::<f64>().ln();
                logits.iter().map(|x| x - z).collect()
            })
            .collect())
    }
}

fn brute_force(m: &Toy, cfg: &DecodeConfig) -> (Vec<usize>, f64) {
    fn go(m: &Toy, cfg: &DecodeConfig, prefix: Vec<usize>, lp: f64, best: &mut Option<(Vec<usize>, f64)>) {
        let row = m.next_logprobs(std::slice::from_ref(&prefix)).unwrap().remove(0);
        for (t, l) in row.iter().enumerate() {
            let mut p = prefix.clone();
            p.push(t);
            let lp = lp + l;
            if Some(t) == cfg.end || p.len() == cfg.max_len {
                let better = match best {
                    None => true,
                    Some((bp, bl)) => lp > *bl || (lp == *bl && p < *bp),
                };
                if better {
                    *best = Some((p, lp));
                }
            } else {
                go(m, cfg, p, lp, best);
            }
        }
    }
    let mut best = None;
    go(m, cfg, Vec::new(), 0.0, &mut best);
    best.unwrap()
}

fn beam_vs_brute_force() -> Outcome {
    let mut cases = 0;
    for vocab in 2..=4 {
        for max_len in 1..=3 {
            for end in [None, Some(vocab - 1)] {
                for seed in 0..10 {
                    let m = Toy { vocab, seed };
                    let cfg = DecodeConfig {
                        beam_width: vocab.pow(max_len as u32),
                        max_len,
                        alpha: 0.0,
                        end,
                        blocked: vec![],
                    };
                    let (tokens, lp) = brute_force(&m, &cfg);
                    let top = beam_search(&m, &cfg).map_err(|e| e.to_string())?.remove(0);
                    ensure(top.tokens == tokens && (top.log_prob - lp).abs() < 1e-12, || {
                        format!("vocab {vocab}, len {max_len}, end {end:?}, seed {seed}: beam {:?} vs brute force {tokens:?}", top.tokens)
                    })?;
                    let one = DecodeConfig { beam_width: 1, ..cfg };
                    let b1 = beam_search(&m, &one).map_err(|e| e.to_string())?.remove(0);
                    ensure(b1 == greedy_decode(&m, &one).map_err(|e| e.to_string())?, || {
                        format!("beam 1 != greedy (seed {seed})")
                    })?;
                    cases += 1;
                }
            }
        }
    }
    let mut cfg = ModelConfig::new(12, NormMode::AdjustQkNorm);
    cfg.d_model = 16;
    cfg.n_heads = 2;
    cfg.hidden_size = 32;
    let model = Seq2Seq::<f32>::new(cfg, &mut SeededRng::new(4)).map_err(|e| e.to_string())?;
    for src in [vec![4, 6, 7], vec![5, 8], vec![4, 9, 10, 11]] {
        let stepper = ModelStepper::new(&model, &src).map_err(|e| e.to_string())?;
        let one = DecodeConfig { beam_width: 1, max_len: 8, ..DecodeConfig::default() };
        let b = beam_search(&stepper, &one).map_err(|e| e.to_string())?.remove(0);
        ensure(b == greedy_decode(&stepper, &one).map_err(|e| e.to_string())?, || {
            "beam 1 != greedy on the transformer".into()
        })?;
    }
    Ok(format!("{cases} toy instances (vocab 2-4, length <= 3) match brute force; beam 1 == greedy incl. 3 transformer decodes"))
}

// 7. Determinism of the whole pipeline.

fn pipeline_config(dir: &Path, corpus: &Path) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = corpus.to_path_buf();
    cfg.paths.workdir = dir.to_path_buf();
    cfg.seed = 9;
    cfg.model.d_model = 32;
    cfg.model.n_heads = 4;
    cfg.model.hidden_size = 64;
    cfg.train.batch_size = 8;
    cfg.train.max_epochs = 4;
    cfg
}

fn full_run(cfg: &RunConfig) -> Result<String, String> {
    let e = |x: dualsc::Error| x.to_string();
    let prep = pipeline::prepare(cfg).map_err(e)?.render();
    let fit = pipeline::train(cfg).map_err(e)?;
    let losses: Vec<String> = fit.history.iter().map(|r| format!("{:.9} {:.9}", r.train_loss, r.val_loss)).collect();
    let eval = pipeline::eval(cfg, SplitName::Test).map_err(e)?.render();
    let base = pipeline::baseline(cfg, dualsc::retrieval::RetrievalMethod::Bm25, SplitName::Test).map_err(e)?.render();
    let session = Session::load(&cfg.checkpoint_path(), cfg.decode.clone()).map_err(e)?;
    let inf = session.infer(TaskDirection::Gen, "move 0x41 into ecx", true).map_err(e)?.text;
    let ckpt = std::fs::read(cfg.checkpoint_path()).map_err(|x| x.to_string())?;
    Ok(format!("{prep}{}\n{eval}{base}{inf}\n{}", losses.join("\n"), ckpt.len()) + &format!("{:?}", &ckpt[..]))
}

fn determinism() -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let corpus = tmp.path().join("toy.csv");
    std::fs::write(&corpus, toy::csv(&toy::pairs(40))).map_err(|e| e.to_string())?;
    let a = full_run(&pipeline_config(&tmp.path().join("a"), &corpus))?;
    let b = full_run(&pipeline_config(&tmp.path().join("b"), &corpus))?;
    ensure(a == b, || "two same-seed runs differ".into())?;
    let ra = std::fs::read_to_string(tmp.path().join("a/eval/test/report.txt")).map_err(|e| e.to_string())?;
    let rb = std::fs::read_to_string(tmp.path().join("b/eval/test/report.txt")).map_err(|e| e.to_string())?;
    ensure(ra == rb && !ra.is_empty(), || "report files differ".into())?;
    Ok("prepare/train/eval/baseline/infer twice with seed 9: reports, losses and checkpoint bytes identical".into())
}

// 8-9. Corpus-level checks.

fn corpus_path() -> Option<std::path::PathBuf> {
    std::env::var_os("DUALSC_CORPUS").map(Into::into)
}

fn corpus_shape(path: &Path) -> Outcome {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let mut cfg = RunConfig::default();
    cfg.paths.corpus = path.to_path_buf();
    cfg.paths.workdir = tmp.path().to_path_buf();
    let r = pipeline::prepare(&cfg).map_err(|e| e.to_string())?;
    ensure(r.train + r.val + r.test == 3200, || format!("{} pairs, expected 3200", r.train + r.val + r.test))?;
    ensure((r.train, r.val, r.test) == (2560, 320, 320), || format!("split {}/{}/{}", r.train, r.val, r.test))?;
    ensure(r.dualized_train == 5120, || format!("dualized {}", r.dualized_train))?;
    let st = r.stats.ok_or("no statistics")?;
    ensure((st.code.mean - 3.40).abs() <= 0.2, || format!("code mean {:.2}", st.code.mean))?;
    ensure((st.comment.mean - 9.06).abs() <= 0.2, || format!("comment mean {:.2}", st.comment.mean))?;
    Ok(format!("2560/320/320, 5120 dualized, mean lengths {:.2} code / {:.2} comment", st.code.mean, st.comment.mean))
}

fn metric(report: &str, name: &str) -> f64 {
    EvalReport::parse(report).unwrap().into_iter().find(|m| m.0 == name).map_or(f64::NAN, |m| m.1)
}

fn ablations(path: &Path) -> Outcome {
    let epochs: usize = std::env::var("DUALSC_ABLATION_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(100);
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let (mut a, mut b, mut c) = (0, 0, 0);
    let mut lines = Vec::new();
    for seed in [1u64, 2, 3] {
        let run = |tag: &str, f: &dyn Fn(&mut RunConfig)| -> Result<String, String> {
            let mut cfg = RunConfig::default();
            cfg.paths.corpus = path.to_path_buf();
            cfg.paths.workdir = tmp.path().join(format!("{tag}-{seed}"));
            cfg.seed = seed;
            cfg.train.max_epochs = epochs;
            f(&mut cfg);
            pipeline::prepare(&cfg).map_err(|e| e.to_string())?;
            pipeline::train(&cfg).map_err(|e| e.to_string())?;
            Ok(pipeline::eval(&cfg, SplitName::Test).map_err(|e| e.to_string())?.render())
        };
        let dual = run("adjust", &|_| {})?;
        let post = run("post", &|c| c.model.norm_mode = NormMode::PostLn)?;
        let single = run("single", &|c| c.task = TaskMode::SingleGen)?;
        let (on, off) = (metric(&dual, "gen.repair.acc"), metric(&dual, "gen.acc"));
        let (adj, pln) = (metric(&dual, "gen.repair.bleu4"), metric(&post, "gen.repair.bleu4"));
        let sgl = metric(&single, "gen.repair.bleu4");
        a += usize::from(on - off >= 3.0);
        b += usize::from(adj >= pln);
        c += usize::from(adj >= sgl);
        lines.push(format!(
            "seed {seed}: acc {off:.2}->{on:.2}, bleu adjust {adj:.2} / post {pln:.2} / single {sgl:.2}, sum bleu {:.2}",
            metric(&dual, "sum.bleu4")
        ));
    }
    let detail = lines.join("; ");
    ensure(a >= 2 && b >= 2 && c >= 2, || format!("majorities (a {a}/3, b {b}/3, c {c}/3): {detail}"))?;
    Ok(format!("(a) {a}/3 (b) {b}/3 (c) {c}/3 at {epochs} epochs; {detail}"))
}

type Criterion = (&'static str, Box<dyn Fn() -> Verdict>);

fn evaluated(f: fn() -> Outcome) -> Box<dyn Fn() -> Verdict> {
    Box::new(move || match f() {
        Ok(s) => Verdict::Pass(s),
        Err(s) => Verdict::Fail(s),
    })
}

fn corpus_gated(f: fn(&Path) -> Outcome) -> Box<dyn Fn() -> Verdict> {
    Box::new(move || match corpus_path() {
        Some(p) => match f(&p) {
            Ok(s) => Verdict::Pass(s),
            Err(s) => Verdict::Fail(s),
        },
        None => Verdict::NotEvaluated("set DUALSC_CORPUS to the Shellcode_IA32 CSV".into()),
    })
}

fn main() {
    // `cargo test <filter>` forwards the filter here; run only when it
    // names this suite.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    if !filters.is_empty() && !filters.iter().any(|f| "acceptance".contains(f.as_str())) {
        return;
    }
    let criteria: Vec<Criterion> = vec![
        ("1 gradient correctness", evaluated(gradient_correctness)),
        ("2 adjust_qknorm invariants", evaluated(adjust_qknorm_invariants)),
        ("3 toy overfit", evaluated(overfit_toy)),
        ("4 metric fixtures", evaluated(metric_fixtures)),
        ("5 repair", evaluated(repair_criteria)),
        ("6 beam search", evaluated(beam_vs_brute_force)),
        ("7 determinism", evaluated(determinism)),
        ("8 corpus shape", corpus_gated(corpus_shape)),
        ("9 directional ablations", corpus_gated(ablations)),
    ];
    let mut failed = Vec::new();
    for (name, check) in &criteria {
        match check() {
            Verdict::Pass(d) => println!("PASS           {name}: {d}"),
            Verdict::Fail(d) => {
                println!("FAIL           {name}: {d}");
                failed.push(*name);
            }
            Verdict::NotEvaluated(d) => println!("NOT EVALUATED  {name}: {d}"),
        }
    }
    if !failed.is_empty() {
        eprintln!("failed criteria: {failed:?}");
        std::process::exit(1);
    }
}
