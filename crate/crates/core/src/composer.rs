//! Per-task composition of adapter outputs.
//!
//! For input `h` and task `t` the adapted projection computes
//!
//! ```text
//! h·W  +  Σ_i wA[t,i] · h·down_i·up_i  +  Σ_s wB[t,s] · h·down^s·up^s
//! ```
//!
//! where the first sum runs over the shared skills and the second over the
//! task-specific ones. All four variants share this code path; they differ
//! only in which weights exist and whether those are task-indexed. Skill
//! outputs are mixed after projection, which keeps each skill's contribution
//! inspectable.

use crate::adapters::{LayerSlot, LoraVars, ParamCount, SkillInventory};
use crate::error::{Error, Result};
use crate::routing::{AllocationMatrix, AllocationVars, RoutingMode, RoutingVariant};
use crate::tensor::{Tape, Tensor, Var};

/// Role of a trainable tensor, used for per-group learning rates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Adapter,
    Routing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ComposedAdapter {
    slot: LayerSlot,
    variant: RoutingVariant,
    inventory: SkillInventory,
    allocation: AllocationMatrix,
}

/// Tape handles for one bound [`ComposedAdapter`].
#[derive(Debug, Clone)]
pub struct AdapterVars {
    common: Vec<LoraVars>,
    specific: Vec<LoraVars>,
    allocation: AllocationVars,
}

impl AdapterVars {
    /// All handles in the order of [`ComposedAdapter::tensors_mut`].
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for m in self.common.iter().chain(&self.specific) {
            out.push(m.down);
            out.push(m.up);
        }
        out.extend(self.allocation.logits_a);
        out.extend(self.allocation.weights_b);
        out
    }
}

/// Hyperparameters shared by every adapted matrix of a model.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdapterShape {
    pub variant: RoutingVariant,
    pub tasks: usize,
    pub common: usize,
    pub per_task: usize,
    pub width: usize,
    pub rank: usize,
    pub mask_off_diagonal: bool,
    pub normalize: bool,
}

impl ComposedAdapter {
    pub fn new(slot: LayerSlot, shape: AdapterShape, seed: u64) -> Result<Self> {
        shape.variant.validate(shape.common, shape.per_task)?;
        let inventory = SkillInventory::new(
            shape.common,
            shape.per_task,
            shape.tasks,
            shape.width,
            shape.rank,
            seed,
        )?;
        let allocation = AllocationMatrix::new(
            shape.variant,
            shape.tasks,
            shape.common,
            shape.per_task,
            seed ^ 0x5eed_a110c,
        )?
        .with_mask_off_diagonal(shape.mask_off_diagonal)
        .with_normalize(shape.normalize);
        Self::from_parts(slot, inventory, allocation)
    }

    pub fn from_parts(
        slot: LayerSlot,
        inventory: SkillInventory,
        allocation: AllocationMatrix,
    ) -> Result<Self> {
        let variant = allocation.variant();
        variant.validate(inventory.common_count(), inventory.per_task_count())?;
        if inventory.common_count() != allocation.common_count()
            || inventory.per_task_count() != allocation.per_task_count()
            || (inventory.per_task_count() > 0
                && inventory.specific().len() != allocation.tasks())
        {
            return Err(Error::Contract(format!(
                "inventory (A={}, B={}) does not match allocation (A={}, B={}, T={})",
                inventory.common_count(),
                inventory.per_task_count(),
                allocation.common_count(),
                allocation.per_task_count(),
                allocation.tasks()
            )));
        }
        Ok(Self {
            slot,
            variant,
            inventory,
            allocation,
        })
    }

    pub fn slot(&self) -> LayerSlot {
        self.slot
    }

    pub fn variant(&self) -> RoutingVariant {
        self.variant
    }

    pub fn inventory(&self) -> &SkillInventory {
        &self.inventory
    }

    pub fn inventory_mut(&mut self) -> &mut SkillInventory {
        &mut self.inventory
    }

    pub fn allocation(&self) -> &AllocationMatrix {
        &self.allocation
    }

    pub fn allocation_mut(&mut self) -> &mut AllocationMatrix {
        &mut self.allocation
    }

    pub fn param_count(&self) -> ParamCount {
        ParamCount {
            adapter: self.inventory.param_count(),
            routing: self.allocation.param_count(),
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> AdapterVars {
        AdapterVars {
            common: self.inventory.common().iter().map(|m| m.bind(tape)).collect(),
            specific: self
                .inventory
                .specific()
                .iter()
                .flatten()
                .map(|m| m.bind(tape))
                .collect(),
            allocation: self.allocation.bind(tape),
        }
    }

    /// Handles for tensors already on the tape, in [`AdapterVars::all`] order.
    pub fn vars_from(&self, handles: &[Var]) -> Result<AdapterVars> {
        let n_common = self.inventory.common_count();
        let n_specific = self.inventory.specific().iter().map(Vec::len).sum::<usize>();
        let n_alloc = self.allocation.tensors().count();
        let expected = 2 * (n_common + n_specific) + n_alloc;
        if handles.len() != expected {
            return Err(Error::shape("vars_from", &[expected], &[handles.len()]));
        }
        let pair = |i: usize| LoraVars {
            down: handles[2 * i],
            up: handles[2 * i + 1],
        };
        let mut rest = handles[2 * (n_common + n_specific)..].iter().copied();
        let logits_a = self.allocation.logits_a().and_then(|_| rest.next());
        let weights_b = self.allocation.weights_b().and_then(|_| rest.next());
        Ok(AdapterVars {
            common: (0..n_common).map(pair).collect(),
            specific: (n_common..n_common + n_specific).map(pair).collect(),
            allocation: AllocationVars {
                logits_a,
                weights_b,
            },
        })
    }

    /// Trainable tensors in bind order: factor pairs (common, then specific),
    /// logits, `W_B`.
    pub fn tensors_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        let mut out: Vec<(ParamRole, &mut Tensor)> = Vec::new();
        for m in self.inventory.modules_mut() {
            for t in m.tensors_mut() {
                out.push((ParamRole::Adapter, t));
            }
        }
        for t in self.allocation.tensors_mut() {
            out.push((ParamRole::Routing, t));
        }
        out
    }

    /// Names of the trainable tensors, in [`Self::tensors_mut`] order.
    pub fn tensor_names(&self) -> Vec<String> {
        let prefix = self.slot.name();
        let mut out = Vec::new();
        for i in 0..self.inventory.common_count() {
            out.push(format!("{prefix}.common{i}.down"));
            out.push(format!("{prefix}.common{i}.up"));
        }
        for t in 0..self.inventory.specific().len() {
            for j in 0..self.inventory.per_task_count() {
                out.push(format!("{prefix}.task{t}.specific{j}.down"));
                out.push(format!("{prefix}.task{t}.specific{j}.up"));
            }
        }
        if self.allocation.logits_a().is_some() {
            out.push(format!("{prefix}.logits_a"));
        }
        if self.allocation.weights_b().is_some() {
            out.push(format!("{prefix}.weights_b"));
        }
        out
    }

    /// Adds the composed adapter output for `task` to `h·base`.
    pub fn compose(
        &self,
        tape: &mut Tape,
        vars: &AdapterVars,
        h: Var,
        base: Var,
        task: usize,
        mode: RoutingMode,
    ) -> Result<Var> {
        let width = self.inventory.width();
        let hs = tape.shape(h).to_vec();
        if hs.len() != 2 || hs[1] != width || tape.shape(base) != [width, width] {
            return Err(Error::shape("compose", &hs, tape.shape(base)));
        }
        let routing = self
            .allocation
            .routing_vars(tape, vars.allocation, task, self.slot.index(), mode)?;
        let frozen = tape.matmul(h, base)?;
        let pairs = |ms: &[LoraVars]| ms.iter().map(|m| (m.down, m.up)).collect::<Vec<_>>();
        let mut out = tape.lora_mix(frozen, h, &pairs(&vars.common), routing.common)?;
        if let Some(specific_w) = routing.specific {
            out = tape.lora_mix(out, h, &pairs(&vars.specific), specific_w)?;
        }
        Ok(out)
    }

    /// Eager composition without gradient tracking.
    pub fn compose_eager(
        &self,
        h: &Tensor,
        base: &Tensor,
        task: usize,
        mode: RoutingMode,
    ) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = tape.leaf(h);
        let base = tape.leaf(base);
        let out = self.compose(&mut tape, &vars, h, base, task, mode)?;
        Ok(tape.to_tensor(out))
    }
}

/// A frozen projection whose output is corrected by a composed adapter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedLinear {
    pub base: Tensor,
    pub adapter: ComposedAdapter,
}

impl AdaptedLinear {
    pub fn new(base: Tensor, adapter: ComposedAdapter) -> Result<Self> {
        let d = adapter.inventory().width();
        if base.shape() != [d, d] {
            return Err(Error::shape("adapted linear", base.shape(), &[d, d]));
        }
        let mut base = base;
        base.set_requires_grad(false);
        Ok(Self { base, adapter })
    }
}
