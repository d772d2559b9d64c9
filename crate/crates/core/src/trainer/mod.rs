//! Multi-task training loop, learning-rate schedule and evaluation.

mod metrics;
mod optim;

pub use metrics::{lcs_len, metrics, rouge1, rouge_l, rouge_lsum, score_pair, Scores};
pub use optim::{AdamW, OptimizerState, ParamRef};

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::composer::ParamRole;
use crate::data::{MultiTaskData, Split, TaskBatch, TaskDataset};
use crate::error::{Error, Result};
use crate::model::{loss_targets, predictions, TransformerModel};
use crate::routing::{NoiseKey, RoutingMode};
use crate::seeding;
use crate::tensor::Tape;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskMixing {
    /// Task `step mod T`.
    RoundRobin,
    /// Tasks drawn with probability proportional to training-set size.
    Proportional,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub warmup_ratio: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub mixing: TaskMixing,
    /// Learning-rate multiplier for allocation-matrix parameters.
    pub routing_lr_scale: f64,
    /// Evaluate in hard (thresholded) routing mode.
    pub hard_eval: bool,
    /// Steps between metric rows; 0 logs once per epoch.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 3e-3,
            weight_decay: 0.01,
            warmup_ratio: 0.06,
            epochs: 3,
            batch_size: 4,
            seed: 0,
            mixing: TaskMixing::RoundRobin,
            routing_lr_scale: 10.0,
            hard_eval: false,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    /// The published fine-tuning constants: one epoch at 5e-5 with a single
    /// learning rate for every parameter.
    pub fn published() -> Self {
        Self {
            learning_rate: 5e-5,
            epochs: 1,
            routing_lr_scale: 1.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.warmup_ratio) {
            return Err(Error::Config(format!(
                "warmup_ratio {} outside [0, 1)",
                self.warmup_ratio
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate >= 0.0 && self.routing_lr_scale >= 0.0) {
            return Err(Error::Config("learning rates must be non-negative".into()));
        }
        Ok(())
    }

    pub fn eval_mode(&self) -> RoutingMode {
        if self.hard_eval {
            RoutingMode::HardEval
        } else {
            RoutingMode::Eval
        }
    }
}

/// Linear warmup over `ceil(warmup_ratio · total)` steps (at most
/// `total − 1`), then linear decay to zero at `total`.
pub fn lr_at(step: usize, total_steps: usize, base_lr: f64, warmup_ratio: f64) -> Result<f64> {
    if total_steps == 0 {
        return Err(Error::Config("schedule over zero steps".into()));
    }
    if step > total_steps {
        return Err(Error::OutOfRange {
            what: "schedule step",
            index: step,
            limit: total_steps + 1,
        });
    }
    let warmup = ((warmup_ratio * total_steps as f64).ceil() as usize).min(total_steps - 1);
    Ok(if step < warmup {
        base_lr * (step as f64 / warmup as f64)
    } else {
        base_lr * ((total_steps - step) as f64 / (total_steps - warmup) as f64)
    })
}

/// One line of the metrics CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub step: usize,
    pub task: String,
    pub split: Split,
    pub loss: f64,
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: String,
    pub loss: f64,
    #[serde(flatten)]
    pub scores: Scores,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub rows: Vec<MetricRow>,
    /// Final eval-split results per task.
    pub tasks: Vec<TaskResult>,
    /// Unweighted mean over tasks of the final eval results.
    pub mean: Scores,
    pub mean_loss: f64,
    /// Training loss at every step.
    pub loss_curve: Vec<f64>,
    pub steps: usize,
}

pub const CSV_HEADER: &str = "step,task,split,loss,exact_match,rouge1,rougeL,rougeLsum";

impl MetricReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from(CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{},{},{}",
                r.step,
                r.task,
                r.split.as_str(),
                r.loss,
                r.scores.exact_match,
                r.scores.rouge1,
                r.scores.rouge_l,
                r.scores.rouge_lsum
            );
        }
        out
    }
}

/// Per-task batch cursors over reshuffled passes.
struct Sampler {
    seed: u64,
    batch_size: usize,
    orders: Vec<Vec<usize>>,
    cursors: Vec<usize>,
    passes: Vec<u64>,
}

impl Sampler {
    fn new(data: &MultiTaskData, seed: u64, batch_size: usize) -> Self {
        let mut s = Self {
            seed,
            batch_size,
            orders: data.tasks.iter().map(|t| (0..t.train.len()).collect()).collect(),
            cursors: vec![0; data.tasks.len()],
            passes: vec![0; data.tasks.len()],
        };
        for t in 0..data.tasks.len() {
            s.shuffle(t);
        }
        s
    }

    fn shuffle(&mut self, task: usize) {
        let mut rng = seeding::keyed_rng(self.seed, &[0x5a3, task as u64, self.passes[task]]);
        self.orders[task].shuffle(&mut rng);
    }

    fn next(&mut self, task: usize) -> &[usize] {
        if self.cursors[task] >= self.orders[task].len() {
            self.passes[task] += 1;
            self.cursors[task] = 0;
            self.shuffle(task);
        }
        let start = self.cursors[task];
        let end = (start + self.batch_size).min(self.orders[task].len());
        self.cursors[task] = end;
        &self.orders[task][start..end]
    }
}

/// Optimizer steps for a run.
pub fn total_steps(data: &MultiTaskData, config: &TrainConfig) -> usize {
    config.epochs
        * data
            .tasks
            .iter()
            .map(|t| t.train.len().div_ceil(config.batch_size))
            .sum::<usize>()
}

#[derive(Default)]
struct Running {
    loss: f64,
    preds: Vec<Vec<u32>>,
    refs: Vec<Vec<u32>>,
    batches: usize,
}

/// Trains `model` in place and returns its metric history.
pub fn train(
    model: &mut TransformerModel,
    data: &MultiTaskData,
    config: &TrainConfig,
    newline: Option<u32>,
) -> Result<MetricReport> {
    config.validate()?;
    if data.tasks.len() != model.config().tasks {
        return Err(Error::Contract(format!(
            "model has {} tasks, data has {}",
            model.config().tasks,
            data.tasks.len()
        )));
    }
    if data.tasks.iter().any(|t| t.train.is_empty()) {
        return Err(Error::Empty("a task has no training examples".into()));
    }
    let total = total_steps(data, config);
    let per_epoch = total / config.epochs.max(1);
    let log_every = if config.log_every == 0 {
        per_epoch.max(1)
    } else {
        config.log_every
    };
    let names = model.trainable_names();
    let sizes: Vec<usize> = model.trainable_mut().iter().map(|(_, t)| t.numel()).collect();
    let mut state = OptimizerState::new(sizes);
    let adamw = AdamW::default();
    let mut sampler = Sampler::new(data, config.seed, config.batch_size);
    let mut mix_rng = seeding::keyed_rng(config.seed, &[0x313]);
    let weights: Vec<usize> = data.tasks.iter().map(|t| t.train.len()).collect();
    let weight_total: usize = weights.iter().sum();

    let mut rows = Vec::new();
    let mut running: Vec<Running> = data.tasks.iter().map(|_| Running::default()).collect();
    let mut loss_curve = Vec::with_capacity(total);
    let mut last_eval = None;

    for step in 0..total {
        let task = match config.mixing {
            TaskMixing::RoundRobin => step % data.tasks.len(),
            TaskMixing::Proportional => {
                let mut x = mix_rng.gen_range(0..weight_total);
                weights
                    .iter()
                    .position(|&w| {
                        let hit = x < w;
                        x = x.saturating_sub(w);
                        hit
                    })
                    .unwrap_or(0)
            }
        };
        let dataset = &data.tasks[task];
        let picked: Vec<_> = sampler.next(task).iter().map(|&i| &dataset.train[i]).collect();
        let batch = TaskBatch::from_examples(task, &picked, data.form)?;
        let mode = RoutingMode::Train(NoiseKey {
            seed: config.seed,
            step: step as u64,
        });
        let diverged = |e| match e {
            Error::NumericInvalid(m) => {
                Error::NumericInvalid(format!("training diverged at step {step}: {m}"))
            }
            e => e,
        };
        let (loss, logits) = model.loss_and_grad(&batch, mode).map_err(diverged)?;
        loss_curve.push(loss);
        let r = &mut running[task];
        r.loss += loss;
        r.batches += 1;
        r.preds.extend(predictions(model.config(), &logits, &batch));
        r.refs.extend(picked.iter().map(|e| e.target.clone()));

        for a in model.adapters_mut() {
            a.allocation_mut().apply_mask();
        }
        let lr = lr_at(step + 1, total, config.learning_rate, config.warmup_ratio)?;
        let routing_lr = lr * config.routing_lr_scale;
        let mut params: Vec<ParamRef<'_>> = model
            .trainable_mut()
            .into_iter()
            .zip(&names)
            .map(|((role, tensor), name)| ParamRef {
                name,
                tensor,
                lr: match role {
                    ParamRole::Adapter => lr,
                    ParamRole::Routing => routing_lr,
                },
            })
            .collect();
        adamw
            .step(&mut params, &mut state, config.weight_decay)
            .map_err(diverged)?;

        let done = step + 1;
        if done % log_every == 0 || done == total {
            for (t, r) in running.iter_mut().enumerate() {
                if r.batches == 0 {
                    continue;
                }
                rows.push(MetricRow {
                    step: done,
                    task: data.tasks[t].name.clone(),
                    split: Split::Train,
                    loss: r.loss / r.batches as f64,
                    scores: metrics(&r.preds, &r.refs, newline)?,
                });
                *r = Running::default();
            }
            let eval = evaluate(model, data, config.eval_mode(), newline)?;
            rows.extend(eval_rows(done, &eval));
            last_eval = Some(eval);
        }
    }

    let tasks = match last_eval {
        Some(t) => t,
        None => {
            let t = evaluate(model, data, config.eval_mode(), newline)?;
            rows.extend(eval_rows(0, &t));
            t
        }
    };
    let mean = Scores::mean(&tasks.iter().map(|t| t.scores).collect::<Vec<_>>());
    let mean_loss = tasks.iter().map(|t| t.loss).sum::<f64>() / tasks.len() as f64;
    Ok(MetricReport {
        rows,
        tasks,
        mean,
        mean_loss,
        loss_curve,
        steps: total,
    })
}

fn eval_rows(step: usize, results: &[TaskResult]) -> Vec<MetricRow> {
    let mut out: Vec<MetricRow> = results
        .iter()
        .map(|r| MetricRow {
            step,
            task: r.task.clone(),
            split: Split::Eval,
            loss: r.loss,
            scores: r.scores,
        })
        .collect();
    let n = results.len() as f64;
    out.push(MetricRow {
        step,
        task: "mean".into(),
        split: Split::Eval,
        loss: results.iter().map(|r| r.loss).sum::<f64>() / n,
        scores: Scores::mean(&results.iter().map(|r| r.scores).collect::<Vec<_>>()),
    });
    out
}

const EVAL_CHUNK: usize = 64;

/// Mean loss and predictions of one task split.
pub fn predict_split(
    model: &TransformerModel,
    task: &TaskDataset,
    split: Split,
    form: crate::data::TaskForm,
    mode: RoutingMode,
) -> Result<(f64, Vec<Vec<u32>>)> {
    let examples = task.split(split);
    if examples.is_empty() {
        return Err(Error::Empty(format!("task `{}` has no {} examples", task.name, split.as_str())));
    }
    let mut loss_sum = 0.0;
    let mut rows = 0usize;
    let mut preds = Vec::with_capacity(examples.len());
    for chunk in examples.chunks(EVAL_CHUNK) {
        let refs: Vec<_> = chunk.iter().collect();
        let batch = TaskBatch::from_examples(task.task_id, &refs, form)?;
        let mut tape = Tape::new();
        let mut bound = model.bind(&mut tape);
        let logits = model.forward_on_tape(&mut tape, &mut bound, &batch, mode, true)?;
        let loss = model.loss_on_tape(&mut tape, logits, &batch)?;
        let counted = loss_targets(&batch).iter().filter(|t| t.is_some()).count();
        loss_sum += tape.value(loss)[0] * counted as f64;
        rows += counted;
        preds.extend(predictions(model.config(), &tape.to_tensor(logits), &batch));
    }
    Ok((loss_sum / rows as f64, preds))
}

/// Eval-split results for every task.
pub fn evaluate(
    model: &TransformerModel,
    data: &MultiTaskData,
    mode: RoutingMode,
    newline: Option<u32>,
) -> Result<Vec<TaskResult>> {
    data.tasks
        .iter()
        .map(|t| {
            let (loss, preds) = predict_split(model, t, Split::Eval, data.form, mode)?;
            let refs: Vec<Vec<u32>> = t.eval.iter().map(|e| e.target.clone()).collect();
            Ok(TaskResult {
                task: t.name.clone(),
                loss,
                scores: metrics(&preds, &refs, newline)?,
            })
        })
        .collect()
}

/// Mean training-split loss over tasks, in eval routing mode.
pub fn mean_train_loss(model: &TransformerModel, data: &MultiTaskData) -> Result<f64> {
    let mut sum = 0.0;
    for t in &data.tasks {
        sum += predict_split(model, t, Split::Train, data.form, RoutingMode::Eval)?.0;
    }
    Ok(sum / data.tasks.len() as f64)
}
