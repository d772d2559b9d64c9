//! Config-driven runs over the synthetic benchmark, shared by the command
//! line runner and the acceptance suite.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::analysis::{self, Dendrogram};
use crate::checkpoint;
use crate::data::{write_json, Benchmark, BenchmarkConfig};
use crate::error::{Error, Result};
use crate::model::{ModelConfig, OutputHead, TransformerModel};
use crate::routing::RoutingVariant;
use crate::tensor::Tensor;
use crate::trainer::{self, MetricReport, Scores, TaskResult, TrainConfig};

/// `(A, B)` rows of the skill-split ablation; every row has four skills.
pub const ABLATION_GRID: [(usize, usize); 4] = [(4, 0), (3, 1), (2, 2), (1, 3)];

pub const DEFAULT_SEEDS: [u64; 3] = [0, 1, 2];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub variant: RoutingVariant,
    /// Overrides the variant's conventional `A`.
    pub common: Option<usize>,
    /// Overrides the variant's conventional `B`.
    pub per_task: Option<usize>,
    /// Overrides the variant's conventional rank.
    pub rank: Option<usize>,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub benchmark: BenchmarkConfig,
    pub out: PathBuf,
    pub seeds: Vec<u64>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            variant: RoutingVariant::CPoly,
            common: None,
            per_task: None,
            rank: None,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            benchmark: BenchmarkConfig::default(),
            out: PathBuf::from("runs"),
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let config: Self =
            serde_json::from_str(text).map_err(|e| Error::Config(format!("experiment config: {e}")))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    /// Same experiment with another variant and its conventional shape.
    pub fn with_variant(&self, variant: RoutingVariant) -> Self {
        Self {
            variant,
            common: None,
            per_task: None,
            rank: None,
            ..self.clone()
        }
    }

    /// Fills every derived field: adapter shape from the variant and
    /// overrides, model extents from the benchmark.
    pub fn resolve(&self) -> Result<Self> {
        let base = self.model.clone().with_variant(self.variant);
        let model = ModelConfig {
            common: self.common.unwrap_or(base.common),
            per_task: self.per_task.unwrap_or(base.per_task),
            rank: self.rank.unwrap_or(base.rank),
            tasks: self.benchmark.tasks,
            vocab_size: self.benchmark.vocab_size,
            max_seq_len: self.benchmark.seq_len,
            output: OutputHead::Classes(2),
            ..base
        };
        if self.seeds.is_empty() {
            return Err(Error::Config("seed list is empty".into()));
        }
        model.validate()?;
        self.train.validate()?;
        self.benchmark.validate()?;
        Ok(Self {
            common: Some(model.common),
            per_task: Some(model.per_task),
            rank: Some(model.rank),
            model,
            ..self.clone()
        })
    }

    /// Model and trainer configs for one seed of a resolved experiment.
    pub fn for_seed(&self, seed: u64) -> (ModelConfig, TrainConfig) {
        (
            ModelConfig {
                seed,
                ..self.model.clone()
            },
            TrainConfig {
                seed,
                ..self.train.clone()
            },
        )
    }

    pub fn run_dir(&self, seed: u64) -> PathBuf {
        self.out.join(run_name(self)).join(format!("seed{seed}"))
    }
}

fn run_name(config: &ExperimentConfig) -> String {
    format!(
        "{}_t{}_a{}_b{}",
        config.variant,
        config.benchmark.tasks,
        config.common.unwrap_or(config.model.common),
        config.per_task.unwrap_or(config.model.per_task)
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub variant: RoutingVariant,
    pub seed: u64,
    pub common: usize,
    pub per_task: usize,
    pub rank: usize,
    pub steps: usize,
    pub adapter_params: usize,
    pub routing_params: usize,
    pub mean: Scores,
    pub mean_loss: f64,
    pub tasks: Vec<TaskResult>,
    pub frozen_unchanged: bool,
}

pub struct RunOutcome {
    pub model: TransformerModel,
    pub report: MetricReport,
    pub summary: RunSummary,
}

fn frozen_snapshot(model: &TransformerModel) -> Vec<Tensor> {
    model.frozen_tensors().into_iter().map(|(_, t)| t.clone()).collect()
}

/// Trains one seed of a resolved experiment on `bench`.
pub fn run_seed(config: &ExperimentConfig, bench: &Benchmark, seed: u64) -> Result<RunOutcome> {
    let (model_config, train_config) = config.for_seed(seed);
    let mut model = TransformerModel::new(model_config)?;
    let before = frozen_snapshot(&model);
    let report = trainer::train(&mut model, &bench.data, &train_config, None)?;
    let frozen_unchanged = before
        .iter()
        .zip(frozen_snapshot(&model))
        .all(|(a, b)| a.bit_eq(&b));
    let count = model.count_trainable();
    let c = model.config();
    let summary = RunSummary {
        variant: c.variant,
        seed,
        common: c.common,
        per_task: c.per_task,
        rank: c.rank,
        steps: report.steps,
        adapter_params: count.adapter,
        routing_params: count.routing,
        mean: report.mean,
        mean_loss: report.mean_loss,
        tasks: report.tasks.clone(),
        frozen_unchanged,
    };
    Ok(RunOutcome {
        model,
        report,
        summary,
    })
}

/// Writes `metrics.csv`, `summary.json` and `checkpoint/` into `dir`.
pub fn write_run(outcome: &RunOutcome, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv = dir.join("metrics.csv");
    fs::write(&csv, outcome.report.to_csv()).map_err(|e| Error::io(&csv, e))?;
    write_json(&dir.join("summary.json"), &outcome.summary)?;
    checkpoint::save(&outcome.model, &dir.join("checkpoint"))?;
    Ok(())
}

/// Median of a non-empty sample; the mean of the middle pair for even sizes.
pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// One line of a comparison or ablation table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TableRow {
    pub variant: RoutingVariant,
    pub tasks: usize,
    pub common: usize,
    pub per_task: usize,
    pub rank: usize,
    pub adapter_params: usize,
    pub seeds: Vec<u64>,
    pub exact_match: Vec<f64>,
    pub median: Scores,
}

impl TableRow {
    pub fn from_runs(tasks: usize, runs: &[RunSummary]) -> Result<Self> {
        let first = runs
            .first()
            .ok_or_else(|| Error::Empty("table row without runs".into()))?;
        let col = |f: fn(&Scores) -> f64| median(&runs.iter().map(|r| f(&r.mean)).collect::<Vec<_>>());
        Ok(Self {
            variant: first.variant,
            tasks,
            common: first.common,
            per_task: first.per_task,
            rank: first.rank,
            adapter_params: first.adapter_params,
            seeds: runs.iter().map(|r| r.seed).collect(),
            exact_match: runs.iter().map(|r| r.mean.exact_match).collect(),
            median: Scores {
                exact_match: col(|s| s.exact_match),
                rouge1: col(|s| s.rouge1),
                rouge_l: col(|s| s.rouge_l),
                rouge_lsum: col(|s| s.rouge_lsum),
            },
        })
    }
}

pub const TABLE_HEADER: &str =
    "variant,tasks,common,per_task,rank,adapter_params,seeds,exact_match_per_seed,exact_match,rouge1,rougeL,rougeLsum";

pub fn table_csv(rows: &[TableRow]) -> String {
    let mut out = String::from(TABLE_HEADER);
    out.push('\n');
    for r in rows {
        let join = |xs: Vec<String>| xs.join(";");
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            r.variant,
            r.tasks,
            r.common,
            r.per_task,
            r.rank,
            r.adapter_params,
            join(r.seeds.iter().map(u64::to_string).collect()),
            join(r.exact_match.iter().map(f64::to_string).collect()),
            r.median.exact_match,
            r.median.rouge1,
            r.median.rouge_l,
            r.median.rouge_lsum
        );
    }
    out
}

/// Experiment configs for the skill-split ablation, at each task count in
/// `task_counts` (the configured count when empty). Task counts other than
/// the configured one keep two tasks per ground-truth group.
pub fn ablation_configs(base: &ExperimentConfig, task_counts: &[usize]) -> Vec<ExperimentConfig> {
    let counts = if task_counts.is_empty() {
        vec![base.benchmark.tasks]
    } else {
        task_counts.to_vec()
    };
    let mut out = Vec::new();
    for t in counts {
        let mut benchmark = base.benchmark.clone();
        if t != benchmark.tasks {
            benchmark.tasks = t;
            benchmark.groups = (t / 2).max(1);
        }
        for (a, b) in ABLATION_GRID {
            let variant = if b == 0 {
                RoutingVariant::Poly
            } else {
                RoutingVariant::CPoly
            };
            out.push(ExperimentConfig {
                common: Some(a),
                per_task: Some(b),
                benchmark: benchmark.clone(),
                ..base.with_variant(variant)
            });
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnalysisSummary {
    pub variant: RoutingVariant,
    pub seed: u64,
    pub ground_truth: Vec<usize>,
    pub predicted: Vec<usize>,
    pub ari: f64,
    pub dendrogram: Dendrogram,
    pub newick: String,
}

/// Clusters routing profiles, cuts at the ground-truth group count and
/// scores the cut.
pub fn analyze_model(model: &TransformerModel, bench: &Benchmark) -> Result<AnalysisSummary> {
    let profiles: Vec<Vec<f64>> = analysis::routing_profiles(model)?
        .into_iter()
        .map(|p| p.values)
        .collect();
    let dendrogram = analysis::cluster_tasks(&profiles)?;
    let truth = bench.ground_truth.groups.clone();
    let predicted = dendrogram.cut(bench.ground_truth.group_count())?;
    let ari = analysis::adjusted_rand_index(&predicted, &truth)?;
    let names: Vec<String> = bench.data.tasks.iter().map(|t| t.name.clone()).collect();
    Ok(AnalysisSummary {
        variant: model.config().variant,
        seed: model.config().seed,
        ground_truth: truth,
        predicted,
        ari,
        newick: dendrogram.to_newick(&names),
        dendrogram,
    })
}

/// Writes heatmaps, `dendrogram.nwk` and `analysis.json` into `dir`.
pub fn write_analysis(model: &TransformerModel, summary: &AnalysisSummary, dir: &Path) -> Result<()> {
    analysis::export_heatmaps(model, &dir.join("heatmaps"))?;
    let nwk = dir.join("dendrogram.nwk");
    fs::write(&nwk, format!("{}\n", summary.newick)).map_err(|e| Error::io(&nwk, e))?;
    write_json(&dir.join("analysis.json"), summary)
}
