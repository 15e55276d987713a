use serde::{Deserialize, Serialize};

use super::vocab::{special, Vocabulary};
use super::ExamplePair;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskDirection {
    /// intent → snippet
    Gen,
    /// snippet → intent
    Sum,
}

impl TaskDirection {
    pub fn prefix_id(self) -> usize {
        match self {
            TaskDirection::Gen => special::PREFIX_GEN,
            TaskDirection::Sum => special::PREFIX_SUM,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            TaskDirection::Gen => "gen",
            TaskDirection::Sum => "sum",
        }
    }
}

impl std::str::FromStr for TaskDirection {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gen" | "generate" => Ok(TaskDirection::Gen),
            "sum" | "summarize" => Ok(TaskDirection::Sum),
            _ => Err(Error::Config(format!("unknown direction `{s}` (expected gen or sum)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMode {
    #[default]
    Dual,
    SingleGen,
    SingleSum,
}

impl TaskMode {
    pub fn directions(self) -> &'static [TaskDirection] {
        match self {
            TaskMode::Dual => &[TaskDirection::Gen, TaskDirection::Sum],
            TaskMode::SingleGen => &[TaskDirection::Gen],
            TaskMode::SingleSum => &[TaskDirection::Sum],
        }
    }
}

impl std::str::FromStr for TaskMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "dual" => Ok(TaskMode::Dual),
            "gen" | "single_gen" => Ok(TaskMode::SingleGen),
            "sum" | "single_sum" => Ok(TaskMode::SingleSum),
            _ => Err(Error::Config(format!("unknown task mode `{s}` (expected dual, gen or sum)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DualOptions {
    pub mode: TaskMode,
    pub prefix: bool,
}

impl Default for DualOptions {
    fn default() -> Self {
        DualOptions { mode: TaskMode::Dual, prefix: true }
    }
}

impl DualOptions {
    /// Source ids for one direction: optional prefix, then the body.
    pub fn source_ids(&self, direction: TaskDirection, body: &[usize]) -> Vec<usize> {
        let mut s = Vec::with_capacity(body.len() + 1);
        if self.prefix {
            s.push(direction.prefix_id());
        }
        s.extend_from_slice(body);
        s
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PrefixedExample {
    pub direction: TaskDirection,
    pub row: usize,
    pub source: Vec<usize>,
    /// `<s> … </s>`
    pub target: Vec<usize>,
}

pub fn target_ids(body: &[usize]) -> Vec<usize> {
    let mut t = Vec::with_capacity(body.len() + 2);
    t.push(special::START);
    t.extend_from_slice(body);
    t.push(special::END);
    t
}

/// Expands pairs into per-direction examples, interleaved pair by pair.
pub fn dualize(pairs: &[ExamplePair], vocab: &Vocabulary, options: DualOptions) -> Vec<PrefixedExample> {
    let mut out = Vec::with_capacity(pairs.len() * options.mode.directions().len());
    for p in pairs {
        let intent = vocab.encode(&p.intent_tokens());
        let code = vocab.encode(&p.snippet_tokens());
        for &direction in options.mode.directions() {
            let (src, tgt) = match direction {
                TaskDirection::Gen => (&intent, &code),
                TaskDirection::Sum => (&code, &intent),
            };
            out.push(PrefixedExample {
                direction,
                row: p.row,
                source: options.source_ids(direction, src),
                target: target_ids(tgt),
            });
        }
    }
    out
}
