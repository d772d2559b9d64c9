//! Multi-task datasets: the synthetic compositional benchmark, a JSONL
//! loader for external toy corpora, and task-pure batching.

mod jsonl;
mod taskgen;

pub(crate) use taskgen::write_json;

pub use jsonl::{load_jsonl, write_jsonl, JsonlRecord, LoadedTasks, Vocabulary};
pub use taskgen::{
    generate_benchmark, Benchmark, BenchmarkConfig, GroundTruthAssignment, SkillPattern, TaskSpec,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;

pub const PAD: u32 = 0;
pub const UNK: u32 = 1;

/// One input sequence and its target tokens (a single class id in
/// classification mode).
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub tokens: Vec<u32>,
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Eval,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Eval => "eval",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TaskForm {
    Classification,
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskDataset {
    pub task_id: usize,
    pub name: String,
    pub train: Vec<Example>,
    pub eval: Vec<Example>,
}

impl TaskDataset {
    pub fn split(&self, split: Split) -> &[Example] {
        match split {
            Split::Train => &self.train,
            Split::Eval => &self.eval,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Targets {
    Classes(Vec<usize>),
    Sequences(Vec<Vec<u32>>),
}

/// A rectangular batch drawn from a single task.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskBatch {
    pub task: usize,
    /// `batch × seq_len`, row-major, right-padded with [`PAD`].
    pub tokens: Vec<u32>,
    pub batch: usize,
    pub seq_len: usize,
    pub targets: Targets,
}

impl TaskBatch {
    pub fn from_examples(task: usize, examples: &[&Example], form: TaskForm) -> Result<Self> {
        if examples.is_empty() {
            return Err(Error::Empty("batch without examples".into()));
        }
        let seq_len = examples
            .iter()
            .map(|e| match form {
                TaskForm::Classification => e.tokens.len(),
                // Room for every target token plus the stop marker.
                TaskForm::Sequence => e.tokens.len().max(e.target.len() + 1),
            })
            .max()
            .unwrap_or(0);
        if examples.iter().any(|e| e.tokens.is_empty()) {
            return Err(Error::Empty("batch of empty sequences".into()));
        }
        let mut tokens = Vec::with_capacity(examples.len() * seq_len);
        for e in examples {
            tokens.extend_from_slice(&e.tokens);
            tokens.resize(tokens.len() + seq_len - e.tokens.len(), PAD);
        }
        let targets = match form {
            TaskForm::Classification => Targets::Classes(
                examples
                    .iter()
                    .map(|e| match e.target.as_slice() {
                        [c] => Ok(*c as usize),
                        other => Err(Error::Contract(format!(
                            "classification target must be one label, got {} tokens",
                            other.len()
                        ))),
                    })
                    .collect::<Result<_>>()?,
            ),
            TaskForm::Sequence => {
                Targets::Sequences(examples.iter().map(|e| e.target.clone()).collect())
            }
        };
        Ok(Self {
            task,
            tokens,
            batch: examples.len(),
            seq_len,
            targets,
        })
    }
}

/// A multi-task corpus ready for training.
#[derive(Debug, Clone, PartialEq)]
pub struct MultiTaskData {
    pub form: TaskForm,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub tasks: Vec<TaskDataset>,
}

impl MultiTaskData {
    pub fn new(form: TaskForm, vocab_size: usize, tasks: Vec<TaskDataset>) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Empty("no tasks".into()));
        }
        if let Some(t) = tasks.iter().find(|t| t.train.is_empty()) {
            return Err(Error::Empty(format!("task `{}` has no training data", t.name)));
        }
        let max_seq_len = tasks
            .iter()
            .flat_map(|t| t.train.iter().chain(&t.eval))
            .map(|e| match form {
                TaskForm::Classification => e.tokens.len(),
                TaskForm::Sequence => e.tokens.len().max(e.target.len() + 1),
            })
            .max()
            .unwrap_or(1);
        Ok(Self {
            form,
            vocab_size,
            max_seq_len,
            tasks,
        })
    }

    pub fn task_count(&self) -> usize {
        self.tasks.len()
    }
}

/// Deterministic hash split on example index: index `i` goes to eval when
/// its keyed hash falls in the lowest `eval_fraction` of the range.
pub fn split_by_index(examples: Vec<Example>, seed: u64, eval_fraction: f64) -> (Vec<Example>, Vec<Example>) {
    let mut train = Vec::new();
    let mut eval = Vec::new();
    for (i, e) in examples.into_iter().enumerate() {
        if is_eval_index(seed, i as u64, eval_fraction) {
            eval.push(e);
        } else {
            train.push(e);
        }
    }
    (train, eval)
}

pub(crate) fn is_eval_index(seed: u64, index: u64, eval_fraction: f64) -> bool {
    let h = seeding::derive(seed, &[0x5_9117, index]);
    (h as f64 / u64::MAX as f64) < eval_fraction
}
