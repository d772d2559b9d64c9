//! Allocation matrix `W = [W_A | W_B]` and relaxed-Bernoulli routing.
//!
//! `W_A` holds pre-sigmoid logits over the `A` task-common skills. In train
//! mode each logit is turned into a Gumbel-sigmoid sample with fresh uniform
//! noise; in eval mode the noise is pinned at `u = 0.5`, which reduces the
//! sample to `σ(logit)`. The resulting vector is divided by its sum.
//!
//! `W_B` holds raw (not squashed) weights over the task-specific skills and
//! starts as the identity. Row `t` weights every task's specific modules, so
//! off-diagonal entries let task `t` borrow other tasks' skills unless
//! `mask_off_diagonal` pins them at zero.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::kernels::sigmoid;
use crate::tensor::{Tape, Tensor, Var};

pub use crate::tensor::kernels::gumbel_sigmoid;

/// Floor applied to the common-weight sum before normalizing.
pub const NORMALIZE_FLOOR: f64 = 1e-8;

/// The MoE-like adapter families compared in this crate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RoutingVariant {
    /// One adapter, weight fixed at 1.
    #[serde(rename = "lora")]
    SingleLora,
    /// Shared skills with one task-agnostic weight vector.
    #[serde(rename = "moe")]
    MoeLora,
    /// Shared skills with task-indexed weights.
    Poly,
    /// Shared skills with task-indexed weights plus task-exclusive skills.
    #[serde(rename = "cpoly")]
    CPoly,
}

impl RoutingVariant {
    pub const ALL: [RoutingVariant; 4] = [
        RoutingVariant::SingleLora,
        RoutingVariant::MoeLora,
        RoutingVariant::Poly,
        RoutingVariant::CPoly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            RoutingVariant::SingleLora => "lora",
            RoutingVariant::MoeLora => "moe",
            RoutingVariant::Poly => "poly",
            RoutingVariant::CPoly => "cpoly",
        }
    }

    /// Whether routing weights depend on the task.
    pub fn task_indexed(self) -> bool {
        matches!(self, RoutingVariant::Poly | RoutingVariant::CPoly)
    }

    /// Checks the `(A, B)` shape each variant admits.
    pub fn validate(self, common: usize, per_task: usize) -> Result<()> {
        let ok = match self {
            RoutingVariant::SingleLora => common == 1 && per_task == 0,
            RoutingVariant::MoeLora | RoutingVariant::Poly => common >= 1 && per_task == 0,
            RoutingVariant::CPoly => per_task >= 1,
        };
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "variant {self} does not admit A={common}, B={per_task}"
            )))
        }
    }
}

impl fmt::Display for RoutingVariant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RoutingVariant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "lora" => Ok(RoutingVariant::SingleLora),
            "moe" => Ok(RoutingVariant::MoeLora),
            "poly" => Ok(RoutingVariant::Poly),
            "cpoly" => Ok(RoutingVariant::CPoly),
            other => Err(Error::Config(format!("unknown variant `{other}`"))),
        }
    }
}

/// Keys the train-mode noise stream: one draw per (step, adapted matrix,
/// task, skill).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseKey {
    pub seed: u64,
    pub step: u64,
}

impl NoiseKey {
    pub fn uniforms(self, slot: usize, task: usize, n: usize) -> Vec<f64> {
        let mut rng = seeding::keyed_rng(self.seed, &[self.step, slot as u64, task as u64]);
        (0..n).map(|_| rng.gen::<f64>()).collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RoutingMode {
    /// Fresh Gumbel-sigmoid noise per step.
    Train(NoiseKey),
    /// Noise pinned at 0.5, so each weight is `σ(logit)`.
    Eval,
    /// `σ(logit)` thresholded at 0.5.
    HardEval,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AllocationMatrix {
    variant: RoutingVariant,
    tasks: usize,
    common: usize,
    per_task: usize,
    /// `rows × A`; one row for task-agnostic routing, `T` rows otherwise.
    /// Absent for a single fixed adapter.
    logits_a: Option<Tensor>,
    /// `T × T·B` raw weights; column `s·B + j` is task `s`'s `j`-th module.
    weights_b: Option<Tensor>,
    mask_off_diagonal: bool,
    normalize: bool,
}

/// Eager routing weights for one task.
#[derive(Debug, Clone, PartialEq)]
pub struct RoutingWeights {
    /// Common-skill weights before normalization.
    pub raw_common: Vec<f64>,
    pub common: Vec<f64>,
    /// Weights over all `T·B` specific modules (empty when `B = 0`).
    pub specific: Vec<f64>,
}

/// Tape handles for a bound allocation matrix.
#[derive(Debug, Clone, Copy)]
pub struct AllocationVars {
    pub logits_a: Option<Var>,
    pub weights_b: Option<Var>,
}

/// Taped routing weights for one task.
#[derive(Debug, Clone, Copy)]
pub struct RoutingVars {
    pub common: Var,
    pub specific: Option<Var>,
}

/// Uniform logits in `[-1e-3, 1e-3]` and `W_B = I_T`.
pub fn init_allocation(tasks: usize, common: usize, seed: u64) -> Result<AllocationMatrix> {
    AllocationMatrix::new(RoutingVariant::CPoly, tasks, common, 1, seed)
}

impl AllocationMatrix {
    pub fn new(
        variant: RoutingVariant,
        tasks: usize,
        common: usize,
        per_task: usize,
        seed: u64,
    ) -> Result<Self> {
        if tasks == 0 || common == 0 {
            return Err(Error::Config("allocation needs T >= 1 and A >= 1".into()));
        }
        variant.validate(common, per_task)?;
        let rows = match variant {
            RoutingVariant::SingleLora => 0,
            RoutingVariant::MoeLora => 1,
            _ => tasks,
        };
        let mut rng = seeding::rng(seed);
        let logits_a = if rows == 0 {
            None
        } else {
            let data = (0..rows * common)
                .map(|_| rng.gen_range(-1e-3..=1e-3))
                .collect();
            Some(Tensor::new(vec![rows, common], data)?.trainable())
        };
        let weights_b = if per_task == 0 {
            None
        } else {
            let cols = tasks * per_task;
            let mut w = Tensor::zeros(&[tasks, cols]);
            for t in 0..tasks {
                for j in 0..per_task {
                    w.data_mut()[t * cols + t * per_task + j] = 1.0;
                }
            }
            Some(w.trainable())
        };
        Ok(Self {
            variant,
            tasks,
            common,
            per_task,
            logits_a,
            weights_b,
            mask_off_diagonal: false,
            normalize: true,
        })
    }

    pub fn with_mask_off_diagonal(mut self, on: bool) -> Self {
        self.mask_off_diagonal = on;
        self
    }

    pub fn with_normalize(mut self, on: bool) -> Self {
        self.normalize = on;
        self
    }

    pub fn variant(&self) -> RoutingVariant {
        self.variant
    }

    pub fn tasks(&self) -> usize {
        self.tasks
    }

    pub fn common_count(&self) -> usize {
        self.common
    }

    pub fn per_task_count(&self) -> usize {
        self.per_task
    }

    pub fn mask_off_diagonal(&self) -> bool {
        self.mask_off_diagonal
    }

    pub fn normalize(&self) -> bool {
        self.normalize
    }

    pub fn logits_a(&self) -> Option<&Tensor> {
        self.logits_a.as_ref()
    }

    pub fn logits_a_mut(&mut self) -> Option<&mut Tensor> {
        self.logits_a.as_mut()
    }

    pub fn weights_b(&self) -> Option<&Tensor> {
        self.weights_b.as_ref()
    }

    pub fn weights_b_mut(&mut self) -> Option<&mut Tensor> {
        self.weights_b.as_mut()
    }

    pub fn param_count(&self) -> usize {
        self.logits_a.as_ref().map_or(0, Tensor::numel)
            + self.weights_b.as_ref().map_or(0, Tensor::numel)
    }

    /// Trainable tensors in a fixed order: logits, then `W_B`.
    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.logits_a.iter_mut().chain(self.weights_b.iter_mut())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.logits_a.iter().chain(self.weights_b.iter())
    }

    /// Whether flat index `i` of `W_B` lies off the (block) diagonal.
    pub fn is_off_diagonal(&self, i: usize) -> bool {
        let cols = self.tasks * self.per_task;
        let (row, col) = (i / cols, i % cols);
        col / self.per_task != row
    }

    /// Zeroes off-diagonal gradients of `W_B` when masking is on.
    pub fn apply_mask(&mut self) {
        if !self.mask_off_diagonal {
            return;
        }
        let per_task = self.per_task;
        let tasks = self.tasks;
        if let Some(g) = self.weights_b.as_mut().and_then(Tensor::grad_mut) {
            let cols = tasks * per_task;
            for (i, x) in g.iter_mut().enumerate() {
                if (i % cols) / per_task != i / cols {
                    *x = 0.0;
                }
            }
        }
    }

    fn check_task(&self, task: usize) -> Result<()> {
        if task >= self.tasks {
            return Err(Error::OutOfRange {
                what: "task",
                index: task,
                limit: self.tasks,
            });
        }
        Ok(())
    }

    fn logit_row(&self, task: usize) -> usize {
        if self.variant.task_indexed() {
            task
        } else {
            0
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AllocationVars {
        AllocationVars {
            logits_a: self.logits_a.as_ref().map(|t| tape.leaf(t)),
            weights_b: self.weights_b.as_ref().map(|t| tape.leaf(t)),
        }
    }

    /// Routing weights for `task` as tape nodes. `slot` keys the noise
    /// stream for train mode.
    pub fn routing_vars(
        &self,
        tape: &mut Tape,
        vars: AllocationVars,
        task: usize,
        slot: usize,
        mode: RoutingMode,
    ) -> Result<RoutingVars> {
        self.check_task(task)?;
        let common = match vars.logits_a {
            None => tape.constant(vec![1, 1], vec![1.0])?,
            Some(logits) => {
                let row = tape.row(logits, self.logit_row(task))?;
                let raw = match mode {
                    RoutingMode::Train(key) => {
                        let u = key.uniforms(slot, task, self.common);
                        tape.gumbel_sigmoid(row, &u)?
                    }
                    RoutingMode::Eval => tape.gumbel_sigmoid(row, &vec![0.5; self.common])?,
                    RoutingMode::HardEval => {
                        let hard = tape
                            .value(row)
                            .iter()
                            .map(|&w| if sigmoid(w) > 0.5 { 1.0 } else { 0.0 })
                            .collect();
                        tape.constant(vec![1, self.common], hard)?
                    }
                };
                if self.normalize {
                    tape.normalize_sum(raw, NORMALIZE_FLOOR)
                } else {
                    raw
                }
            }
        };
        let specific = match vars.weights_b {
            None => None,
            Some(w) => Some(tape.row(w, task)?),
        };
        Ok(RoutingVars { common, specific })
    }

    /// Eager routing weights (no gradient tracking).
    pub fn routing_weights(
        &self,
        task: usize,
        slot: usize,
        mode: RoutingMode,
    ) -> Result<RoutingWeights> {
        self.check_task(task)?;
        let raw_common = match &self.logits_a {
            None => vec![1.0],
            Some(logits) => {
                let a = self.common;
                let r = self.logit_row(task);
                let row = &logits.data()[r * a..(r + 1) * a];
                match mode {
                    RoutingMode::Train(key) => {
                        let u = key.uniforms(slot, task, a);
                        row.iter()
                            .zip(&u)
                            .map(|(&w, &u)| gumbel_sigmoid(w, u))
                            .collect::<Result<Vec<_>>>()?
                    }
                    RoutingMode::Eval => row
                        .iter()
                        .map(|&w| gumbel_sigmoid(w, 0.5))
                        .collect::<Result<Vec<_>>>()?,
                    RoutingMode::HardEval => row
                        .iter()
                        .map(|&w| if sigmoid(w) > 0.5 { 1.0 } else { 0.0 })
                        .collect(),
                }
            }
        };
        let common = if self.normalize && self.logits_a.is_some() {
            let s = raw_common.iter().fold(0.0, |acc, x| acc + x);
            let d = if s > NORMALIZE_FLOOR { s } else { NORMALIZE_FLOOR };
            raw_common.iter().map(|x| x / d).collect()
        } else {
            raw_common.clone()
        };
        let specific = match &self.weights_b {
            None => Vec::new(),
            Some(w) => {
                let cols = w.cols();
                w.data()[task * cols..(task + 1) * cols].to_vec()
            }
        };
        Ok(RoutingWeights {
            raw_common,
            common,
            specific,
        })
    }

    /// Rebuilds a matrix from stored tensors (checkpoint loading).
    pub fn from_parts(
        variant: RoutingVariant,
        tasks: usize,
        common: usize,
        per_task: usize,
        logits_a: Option<Tensor>,
        weights_b: Option<Tensor>,
        mask_off_diagonal: bool,
        normalize: bool,
    ) -> Result<Self> {
        let template = Self::new(variant, tasks, common, per_task, 0)?;
        let same = |a: Option<&Tensor>, b: Option<&Tensor>| match (a, b) {
            (None, None) => true,
            (Some(a), Some(b)) => a.shape() == b.shape(),
            _ => false,
        };
        if !same(template.logits_a(), logits_a.as_ref())
            || !same(template.weights_b(), weights_b.as_ref())
        {
            return Err(Error::Contract("allocation tensor shapes do not match variant".into()));
        }
        Ok(Self {
            logits_a: logits_a.map(Tensor::trainable),
            weights_b: weights_b.map(Tensor::trainable),
            mask_off_diagonal,
            normalize,
            ..template
        })
    }
}
