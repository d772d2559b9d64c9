//! Synthetic compositional benchmark.
//!
//! Each latent skill `k` is a pattern of marker tokens with signs; its
//! feature on a sequence is the signed marker count `f_k`. Tasks in one
//! group share a skill subset `S`. Every task also owns a small unique
//! pattern `g_t`. The label is
//!
//! ```text
//! y = [ Σ_{k∈S} f_k  +  w·g_t  +  1/4  >  0 ]
//! ```
//!
//! which is a linear threshold over token counts, never exactly at the
//! boundary for `w = 1/2`, and decides ties of the shared score by the
//! unique pattern.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::jsonl::{write_jsonl, JsonlRecord};
use super::{is_eval_index, Example, MultiTaskData, TaskDataset, TaskForm, UNK};
use crate::error::{Error, Result};
use crate::seeding;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkConfig {
    /// Latent skills `K`.
    pub skills: usize,
    /// Tasks `T`.
    pub tasks: usize,
    /// Task groups; tasks are dealt into groups in contiguous blocks.
    pub groups: usize,
    pub skills_per_group: usize,
    pub seq_len: usize,
    pub vocab_size: usize,
    /// Marker tokens per skill, half positive and half negative.
    pub markers_per_skill: usize,
    /// Marker tokens in each task-unique pattern.
    pub unique_markers: usize,
    pub unique_weight: f64,
    pub n_train: usize,
    pub n_eval: usize,
    pub label_flip_rate: f64,
    pub seed: u64,
}

impl Default for BenchmarkConfig {
    fn default() -> Self {
        Self {
            skills: 6,
            tasks: 8,
            groups: 4,
            skills_per_group: 3,
            seq_len: 16,
            vocab_size: 64,
            markers_per_skill: 4,
            unique_markers: 4,
            unique_weight: 0.5,
            n_train: 1000,
            n_eval: 100,
            label_flip_rate: 0.0,
            seed: 0,
        }
    }
}

impl BenchmarkConfig {
    pub fn validate(&self) -> Result<()> {
        if self.tasks < 2 || self.skills < 2 {
            return Err(Error::Config(format!(
                "need at least 2 tasks and 2 skills, got T={} K={}",
                self.tasks, self.skills
            )));
        }
        if self.groups == 0 || self.groups > self.tasks {
            return Err(Error::Config(format!(
                "groups must be in 1..={}, got {}",
                self.tasks, self.groups
            )));
        }
        if self.skills_per_group == 0 || self.skills_per_group > self.skills {
            return Err(Error::Config(format!(
                "skills_per_group must be in 1..={}, got {}",
                self.skills, self.skills_per_group
            )));
        }
        if binomial(self.skills, self.skills_per_group) < self.groups as u128 {
            return Err(Error::Config(format!(
                "{} groups cannot have distinct {}-of-{} skill subsets",
                self.groups, self.skills_per_group, self.skills
            )));
        }
        if self.markers_per_skill < 2 || self.markers_per_skill % 2 != 0 {
            return Err(Error::Config("markers_per_skill must be even and ≥ 2".into()));
        }
        if self.unique_markers % 2 != 0 {
            return Err(Error::Config("unique_markers must be even".into()));
        }
        let needed = self.skills * self.markers_per_skill + self.unique_markers;
        let available = self.vocab_size.saturating_sub(first_token() as usize);
        if needed > available {
            return Err(Error::Config(format!(
                "vocabulary of {} too small for {} distinct skill patterns ({} marker tokens needed, {} available)",
                self.vocab_size, self.skills, needed, available
            )));
        }
        if self.seq_len == 0 || self.n_train == 0 {
            return Err(Error::Config("seq_len and n_train must be positive".into()));
        }
        if !(0.0..=0.5).contains(&self.label_flip_rate) {
            return Err(Error::Config(format!(
                "label_flip_rate {} outside [0, 0.5]",
                self.label_flip_rate
            )));
        }
        Ok(())
    }

    fn eval_fraction(&self) -> f64 {
        self.n_eval as f64 / (self.n_train + self.n_eval) as f64
    }
}

/// Generated tokens avoid PAD and UNK.
fn first_token() -> u32 {
    UNK + 1
}

fn binomial(n: usize, k: usize) -> u128 {
    (0..k).fold(1u128, |acc, i| acc * (n - i) as u128 / (i as u128 + 1))
}

/// Signed marker tokens; the feature is `#positive − #negative`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SkillPattern {
    pub positive: Vec<u32>,
    pub negative: Vec<u32>,
}

impl SkillPattern {
    pub fn feature(&self, tokens: &[u32]) -> i64 {
        tokens
            .iter()
            .map(|t| {
                if self.positive.contains(t) {
                    1
                } else if self.negative.contains(t) {
                    -1
                } else {
                    0
                }
            })
            .sum()
    }

    fn from_tokens(tokens: &[u32]) -> Self {
        let (p, n) = tokens.split_at(tokens.len() / 2);
        Self {
            positive: p.to_vec(),
            negative: n.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub task_id: usize,
    pub ground_truth_skills: Vec<usize>,
    pub unique_transform_seed: u64,
    pub n_train: usize,
    pub n_eval: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthAssignment {
    /// `T × K`, 1 where the task uses the skill.
    pub matrix: Vec<Vec<u8>>,
    /// Tasks with identical skill subsets share a label.
    pub groups: Vec<usize>,
}

impl GroundTruthAssignment {
    fn from_specs(specs: &[TaskSpec], skills: usize) -> Self {
        let matrix: Vec<Vec<u8>> = specs
            .iter()
            .map(|s| {
                (0..skills)
                    .map(|k| u8::from(s.ground_truth_skills.contains(&k)))
                    .collect()
            })
            .collect();
        let mut seen: Vec<&Vec<u8>> = Vec::new();
        let groups = matrix
            .iter()
            .map(|row| match seen.iter().position(|r| *r == row) {
                Some(g) => g,
                None => {
                    seen.push(row);
                    seen.len() - 1
                }
            })
            .collect();
        Self { matrix, groups }
    }

    pub fn group_count(&self) -> usize {
        self.groups.iter().max().map_or(0, |g| g + 1)
    }
}

/// Label rule of one task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelFunction {
    pub skills: Vec<SkillPattern>,
    pub unique: SkillPattern,
    pub unique_weight: f64,
}

impl LabelFunction {
    pub fn score(&self, tokens: &[u32]) -> f64 {
        let shared: i64 = self.skills.iter().map(|s| s.feature(tokens)).sum();
        shared as f64 + self.unique_weight * self.unique.feature(tokens) as f64 + 0.25
    }

    pub fn label(&self, tokens: &[u32]) -> u32 {
        u32::from(self.score(tokens) > 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Benchmark {
    pub config: BenchmarkConfig,
    pub skill_patterns: Vec<SkillPattern>,
    pub specs: Vec<TaskSpec>,
    pub label_functions: Vec<LabelFunction>,
    pub ground_truth: GroundTruthAssignment,
    pub data: MultiTaskData,
}

/// Builds the label function of a task from its skill subset and unique
/// seed. The unique pattern is drawn from tokens no skill uses.
fn label_function(
    config: &BenchmarkConfig,
    patterns: &[SkillPattern],
    skills: &[usize],
    unique_seed: u64,
) -> LabelFunction {
    let used: BTreeSet<u32> = patterns
        .iter()
        .flat_map(|p| p.positive.iter().chain(&p.negative).copied())
        .collect();
    let mut pool: Vec<u32> = (first_token()..config.vocab_size as u32)
        .filter(|t| !used.contains(t))
        .collect();
    pool.shuffle(&mut seeding::rng(unique_seed));
    LabelFunction {
        skills: skills.iter().map(|&k| patterns[k].clone()).collect(),
        unique: SkillPattern::from_tokens(&pool[..config.unique_markers]),
        unique_weight: config.unique_weight,
    }
}

pub fn generate_benchmark(config: &BenchmarkConfig) -> Result<Benchmark> {
    config.validate()?;
    let seed = config.seed;
    let mut rng = seeding::keyed_rng(seed, &[0x5c111]);

    let mut tokens: Vec<u32> = (first_token()..config.vocab_size as u32).collect();
    tokens.shuffle(&mut rng);
    let skill_patterns: Vec<SkillPattern> = tokens
        .chunks(config.markers_per_skill)
        .take(config.skills)
        .map(SkillPattern::from_tokens)
        .collect();

    let mut subsets: Vec<Vec<usize>> = Vec::with_capacity(config.groups);
    while subsets.len() < config.groups {
        let mut s: Vec<usize> = rand::seq::index::sample(&mut rng, config.skills, config.skills_per_group)
            .into_vec();
        s.sort_unstable();
        if !subsets.contains(&s) {
            subsets.push(s);
        }
    }

    let specs: Vec<TaskSpec> = (0..config.tasks)
        .map(|t| TaskSpec {
            task_id: t,
            ground_truth_skills: subsets[t * config.groups / config.tasks].clone(),
            unique_transform_seed: seeding::derive(seed, &[0x0411e, t as u64]),
            n_train: config.n_train,
            n_eval: config.n_eval,
        })
        .collect();
    let label_functions: Vec<LabelFunction> = specs
        .iter()
        .map(|s| {
            label_function(
                config,
                &skill_patterns,
                &s.ground_truth_skills,
                s.unique_transform_seed,
            )
        })
        .collect();

    let tasks = specs
        .iter()
        .zip(&label_functions)
        .map(|(spec, f)| TaskDataset {
            task_id: spec.task_id,
            name: format!("task_{}", spec.task_id),
            train: Vec::new(),
            eval: Vec::new(),
        }
        .fill(config, spec, f))
        .collect();

    Ok(Benchmark {
        config: config.clone(),
        ground_truth: GroundTruthAssignment::from_specs(&specs, config.skills),
        skill_patterns,
        specs,
        label_functions,
        data: MultiTaskData::new(TaskForm::Classification, config.vocab_size, tasks)?,
    })
}

impl TaskDataset {
    /// Draws examples by index until both split quotas are filled. The
    /// sequence and split of index `i` depend only on `(seed, task, i)`.
    fn fill(mut self, config: &BenchmarkConfig, spec: &TaskSpec, f: &LabelFunction) -> Self {
        let task = spec.task_id as u64;
        let split_seed = seeding::derive(config.seed, &[0x5b117, task]);
        let fraction = config.eval_fraction();
        let mut i = 0u64;
        while self.train.len() < spec.n_train || self.eval.len() < spec.n_eval {
            let to_eval = is_eval_index(split_seed, i, fraction);
            let room = if to_eval {
                self.eval.len() < spec.n_eval
            } else {
                self.train.len() < spec.n_train
            };
            if room {
                let mut rng = seeding::keyed_rng(config.seed, &[0xe8a, task, i]);
                let tokens: Vec<u32> = (0..config.seq_len)
                    .map(|_| rng.gen_range(first_token()..config.vocab_size as u32))
                    .collect();
                let mut label = f.label(&tokens);
                if config.label_flip_rate > 0.0 && rng.gen::<f64>() < config.label_flip_rate {
                    label = 1 - label;
                }
                let example = Example {
                    tokens,
                    target: vec![label],
                };
                if to_eval {
                    self.eval.push(example);
                } else {
                    self.train.push(example);
                }
            }
            i += 1;
        }
        self
    }
}

#[derive(Serialize)]
struct GroundTruthFile<'a> {
    skills: usize,
    task_names: Vec<&'a str>,
    matrix: &'a [Vec<u8>],
    groups: &'a [usize],
    specs: &'a [TaskSpec],
}

impl Benchmark {
    /// Token text used in the JSONL form.
    pub fn token_text(token: u32) -> String {
        format!("w{token}")
    }

    pub fn records(&self, split: super::Split) -> Vec<JsonlRecord> {
        self.data
            .tasks
            .iter()
            .flat_map(|t| {
                t.split(split).iter().map(move |e| JsonlRecord {
                    task: t.name.clone(),
                    input: e
                        .tokens
                        .iter()
                        .map(|&w| Self::token_text(w))
                        .collect::<Vec<_>>()
                        .join(" "),
                    target: e.target[0].to_string(),
                })
            })
            .collect()
    }

    /// Writes `train.jsonl`, `eval.jsonl`, `ground_truth.json` and the
    /// generator config into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_jsonl(&dir.join("train.jsonl"), &self.records(super::Split::Train))?;
        write_jsonl(&dir.join("eval.jsonl"), &self.records(super::Split::Eval))?;
        let gt = GroundTruthFile {
            skills: self.config.skills,
            task_names: self.data.tasks.iter().map(|t| t.name.as_str()).collect(),
            matrix: &self.ground_truth.matrix,
            groups: &self.ground_truth.groups,
            specs: &self.specs,
        };
        write_json(&dir.join("ground_truth.json"), &gt)?;
        write_json(&dir.join("benchmark.json"), &self.config)
    }
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}
