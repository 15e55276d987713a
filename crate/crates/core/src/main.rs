use std::io::Read as _;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use dualsc::attention::NormMode;
use dualsc::corpus::{SplitName, TaskDirection, TaskMode};
use dualsc::pipeline::{self, RunConfig, Session, WORKDIR_ENV};
use dualsc::retrieval::RetrievalMethod;

#[derive(Parser, Debug)]
#[command(name = "dualsc", version, about = "Joint shellcode generation and summarization")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// TOML run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Run directory, overriding the configuration.
    #[arg(long, global = true, env = WORKDIR_ENV)]
    workdir: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// post, pre, qk or adjust.
    #[arg(long, global = true)]
    norm: Option<NormMode>,
    /// dual, gen or sum.
    #[arg(long, global = true)]
    task: Option<TaskMode>,
    #[arg(long, global = true)]
    no_prefix: bool,
    #[arg(long, global = true)]
    no_repair: bool,
    #[arg(long, global = true)]
    beam: Option<usize>,
    /// train, val or test.
    #[arg(long, global = true, default_value = "test")]
    split: SplitName,
    /// Checkpoint to load instead of the run's best one.
    #[arg(long, global = true)]
    checkpoint: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split the corpus and build the vocabulary.
    Prepare,
    /// Train a model on the prepared split.
    Train,
    /// Score the model on a split, with and without repair.
    Eval,
    /// Generate code or summarize one input.
    Infer {
        /// gen or sum.
        #[arg(long)]
        direction: TaskDirection,
        /// Input text; read from stdin when omitted.
        #[arg(long)]
        text: Option<String>,
        /// Print the full result as JSON.
        #[arg(long)]
        json: bool,
    },
    /// Repair `generated<TAB>intent` records.
    Repair {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
        /// JSON-lines substitution log.
        #[arg(long)]
        audit: Option<PathBuf>,
    },
    /// Score a retrieval baseline on a split.
    Baseline {
        /// bm25, jaccard or levenshtein.
        #[arg(long)]
        method: RetrievalMethod,
    },
    /// Write attention weights for one input as text matrices.
    AttnDump {
        /// Source text, optionally led by `ShellCodeGen:` or `ShellCodeSum:`.
        #[arg(long)]
        text: String,
        /// Also dump decoder attention for this target.
        #[arg(long)]
        target: Option<String>,
        #[arg(long, default_value = "gen")]
        direction: TaskDirection,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(w) = &g.workdir {
        cfg.paths.workdir = w.clone();
    }
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(n) = g.norm {
        cfg.model.norm_mode = n;
    }
    if let Some(t) = g.task {
        cfg.task = t;
    }
    if g.no_prefix {
        cfg.prefix = false;
    }
    if g.no_repair {
        cfg.repair = false;
    }
    if let Some(b) = g.beam {
        cfg.decode.beam_width = b;
    }
    if let Some(c) = &g.checkpoint {
        cfg.paths.checkpoint = Some(c.clone());
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_input(path: Option<&PathBuf>) -> Result<String> {
    match path {
        Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display())),
        None => {
            let mut s = String::new();
            std::io::stdin().read_to_string(&mut s).context("reading stdin")?;
            Ok(s)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let cfg = run_config(&cli.global)?;
    let split = cli.global.split;
    match cli.command {
        Command::Prepare => print!("{}", pipeline::prepare(&cfg)?.render()),
        Command::Train => {
            let r = pipeline::train(&cfg)?;
            println!(
                "best_epoch\t{}\nbest_val_loss\t{:.6}\nepochs_run\t{}\ncheckpoint\t{}",
                r.best_epoch,
                r.best_val_loss,
                r.epochs_run,
                r.checkpoint.display()
            );
        }
        Command::Eval => print!("{}", pipeline::eval(&cfg, split)?.render()),
        Command::Infer { direction, text, json } => {
            let text = match text {
                Some(t) => t,
                None => read_input(None)?,
            };
            let session = Session::load(&cfg.checkpoint_path(), cfg.decode.clone())?;
            let out = session.infer(direction, text.trim(), cfg.repair)?;
            if json {
                println!("{}", serde_json::to_string(&out)?);
            } else {
                println!("{}", out.text);
                for s in out.repair.iter().flat_map(|r| &r.substitutions) {
                    eprintln!("repaired operand {}: {} -> {} ({:?})", s.operand + 1, s.old, s.new, s.rule);
                }
            }
        }
        Command::Repair { input, output, audit } => {
            let (repaired, log) = pipeline::repair_records(&read_input(input.as_ref())?)?;
            match output {
                Some(p) => pipeline::write_output(&p, &repaired)?,
                None => print!("{repaired}"),
            }
            if let Some(p) = audit {
                pipeline::write_output(&p, &log)?;
            }
        }
        Command::Baseline { method } => {
            print!("{}", pipeline::baseline(&cfg, method, split)?.render())
        }
        Command::AttnDump { text, target, direction, out } => {
            let session = Session::load(&cfg.checkpoint_path(), cfg.decode.clone())?;
            let matrices = pipeline::attention_dump(&session, direction, &text, target.as_deref())?;
            if matrices.is_empty() {
                bail!("model produced no attention maps");
            }
            pipeline::write_output(&out, &pipeline::render_dump(&matrices))?;
            println!("wrote {} matrices to {}", matrices.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let msg = format!("{e:#}").replace('\n', " ");
            eprintln!("error: {msg}");
            ExitCode::FAILURE
        }
    }
}
