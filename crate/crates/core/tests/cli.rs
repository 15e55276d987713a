use std::path::Path;
use std::process::{Command, Output};

use dualsc::pipeline::parse_dump;
use dualsc::toy;

fn dualsc(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dualsc"))
        .args(args)
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .env_remove("DUALSC_WORKDIR")
        .output()
        .expect("binary runs")
}

fn ok(out: &Output) -> String {
    assert!(out.status.success(), "stderr: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap()
}

const CONFIG: &str = r#"
seed = 5

[paths]
corpus = "toy.csv"
workdir = "run"

[model]
n_heads = 4
d_model = 32
hidden_size = 64
dropout = 0.0

[train]
batch_size = 8
max_epochs = 2
"#;

fn setup(dir: &Path) {
    std::fs::write(dir.join("toy.csv"), toy::csv(&toy::pairs(30))).unwrap();
    std::fs::write(dir.join("run.toml"), CONFIG).unwrap();
}

#[test]
fn missing_corpus_fails_with_one_line() {
    let tmp = tempfile::tempdir().unwrap();
    let out = dualsc(tmp.path(), &["prepare", "--workdir", "w"]);
    assert!(!out.status.success());
    let err = String::from_utf8(out.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
    assert!(err.contains("shellcode.csv"), "{err}");
}

#[test]
fn bad_flag_values_are_rejected() {
    let tmp = tempfile::tempdir().unwrap();
    assert!(!dualsc(tmp.path(), &["prepare", "--norm", "bogus"]).status.success());
    assert!(!dualsc(tmp.path(), &["eval", "--split", "dev"]).status.success());
}

#[test]
fn full_cycle() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let c = ["--config", "run.toml"];

    let prep = ok(&dualsc(dir, &[&c[..], &["prepare"]].concat()));
    assert!(prep.contains("train\t24\n"), "{prep}");
    let train = ok(&dualsc(dir, &[&c[..], &["train"]].concat()));
    assert!(train.contains("best_epoch"));
    assert!(dir.join("run/model/best.ckpt").exists());
    assert!(dir.join("run/run_config.toml").exists());

    let eval = ok(&dualsc(dir, &[&c[..], &["eval", "--split", "val"]].concat()));
    assert!(eval.lines().any(|l| l.starts_with("gen.repair.acc\t")), "{eval}");
    assert!(eval.lines().any(|l| l.starts_with("sum.meteor\t")), "{eval}");

    let args = [&c[..], &["infer", "--direction", "gen", "--text", "move 0x99 into eax"]].concat();
    let a = ok(&dualsc(dir, &args));
    assert_eq!(a, ok(&dualsc(dir, &args)));
    let json =
        ok(&dualsc(dir, &[&c[..], &["infer", "--direction", "sum", "--text", "xor eax, eax", "--json"]].concat()));
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["direction"], "sum");

    let base = ok(&dualsc(dir, &[&c[..], &["baseline", "--method", "jaccard"]].concat()));
    assert!(base.contains("gen.acc\t"));

    ok(&dualsc(
        dir,
        &[&c[..], &["attn-dump", "--text", "ShellCodeGen: move eax into ecx", "--out", "attn.txt"]].concat(),
    ));
    let dump = parse_dump(&std::fs::read_to_string(dir.join("attn.txt")).unwrap()).unwrap();
    assert_eq!(dump.len(), 2 * 4);
    assert!(dump.iter().all(|m| m.rows.len() == 5 && m.cols.len() == 5));

    std::fs::write(dir.join("gen.tsv"), "sub ecx, 0x1525152a\tsubtract 0x6374612e from ecx\n").unwrap();
    let rep = ok(&dualsc(dir, &["repair", "--input", "gen.tsv", "--audit", "audit.jsonl"]));
    assert_eq!(rep, "sub ecx, 0x6374612e\tsubtract 0x6374612e from ecx\n");
    assert!(std::fs::read_to_string(dir.join("audit.jsonl")).unwrap().contains("0x1525152a"));

    let mismatch = dualsc(dir, &[&c[..], &["eval", "--norm", "pre"]].concat());
    assert!(!mismatch.status.success());
    assert!(String::from_utf8_lossy(&mismatch.stderr).contains("checkpoint"));
}

#[test]
fn workdir_env_overrides_config() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    setup(dir);
    let out = Command::new(env!("CARGO_BIN_EXE_dualsc"))
        .args(["--config", "run.toml", "prepare"])
        .current_dir(dir)
        .env("DUALSC_WORKDIR", dir.join("elsewhere"))
        .output()
        .unwrap();
    ok(&out);
    assert!(dir.join("elsewhere/data/split.jsonl").exists());
    assert!(!dir.join("run").exists());
}
