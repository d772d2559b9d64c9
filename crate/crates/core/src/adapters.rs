//! Low-rank adapter modules and the partitioned skill inventory.
//!
//! A [`LoraModule`] is the factored update `down · up` added to a frozen
//! projection, so `h ↦ h·(W + down·up)`. No scaling factor and no dropout are
//! applied. A [`SkillInventory`] holds the `A` task-common modules shared by
//! every task and a `T × B` grid of task-specific modules.

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seeding;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct LoraModule {
    down: Tensor,
    up: Tensor,
}

/// Tape handles for one bound [`LoraModule`].
#[derive(Debug, Clone, Copy)]
pub struct LoraVars {
    pub down: Var,
    pub up: Var,
}

impl LoraModule {
    /// `down ~ N(0, 1/d)`, `up = 0`: the initial update is identically zero.
    pub fn init<R: Rng>(width: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > width {
            return Err(Error::Config(format!(
                "adapter rank must satisfy 1 <= r <= d, got r={rank}, d={width}"
            )));
        }
        let normal = Normal::new(0.0, 1.0 / (width as f64).sqrt())
            .map_err(|e| Error::Config(e.to_string()))?;
        let down: Vec<f64> = (0..width * rank).map(|_| normal.sample(rng)).collect();
        Ok(Self {
            down: Tensor::new(vec![width, rank], down)?.trainable(),
            up: Tensor::zeros(&[rank, width]).trainable(),
        })
    }

    pub fn from_parts(down: Tensor, up: Tensor) -> Result<Self> {
        let (&[d, r], &[r2, d2]) = (down.shape(), up.shape()) else {
            return Err(Error::shape("lora", down.shape(), up.shape()));
        };
        if d != d2 || r != r2 || r > d {
            return Err(Error::shape("lora", down.shape(), up.shape()));
        }
        Ok(Self {
            down: down.trainable(),
            up: up.trainable(),
        })
    }

    pub fn width(&self) -> usize {
        self.down.shape()[0]
    }

    pub fn rank(&self) -> usize {
        self.down.shape()[1]
    }

    pub fn down(&self) -> &Tensor {
        &self.down
    }

    pub fn up(&self) -> &Tensor {
        &self.up
    }

    pub fn tensors_mut(&mut self) -> [&mut Tensor; 2] {
        [&mut self.down, &mut self.up]
    }

    pub fn trainable_param_count(&self) -> usize {
        2 * self.rank() * self.width()
    }

    /// Dense `down · up`.
    pub fn delta(&self) -> Tensor {
        self.down.matmul(&self.up).expect("factor shapes agree")
    }

    pub fn bind(&self, tape: &mut Tape) -> LoraVars {
        LoraVars {
            down: tape.leaf(&self.down),
            up: tape.leaf(&self.up),
        }
    }

    /// Eager `h·base + h·down·up`.
    pub fn forward(&self, h: &Tensor, base: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let vars = self.bind(&mut tape);
        let h = tape.leaf(h);
        let base = tape.leaf(base);
        let out = lora_forward(&mut tape, h, base, vars)?;
        Ok(tape.to_tensor(out))
    }
}

/// Deterministic module from a seed.
pub fn init_lora(width: usize, rank: usize, seed: u64) -> Result<LoraModule> {
    LoraModule::init(width, rank, &mut seeding::rng(seed))
}

/// `h·down·up` on the tape.
pub fn lora_delta(tape: &mut Tape, h: Var, m: LoraVars) -> Result<Var> {
    let hd = tape.matmul(h, m.down)?;
    tape.matmul(hd, m.up)
}

/// `h·base + h·down·up` on the tape.
pub fn lora_forward(tape: &mut Tape, h: Var, base: Var, m: LoraVars) -> Result<Var> {
    let (hs, bs) = (tape.shape(h).to_vec(), tape.shape(base).to_vec());
    if hs.len() != 2 || bs != [hs[1], hs[1]] || tape.shape(m.down)[0] != hs[1] {
        return Err(Error::shape("lora_forward", &hs, &bs));
    }
    let frozen = tape.matmul(h, base)?;
    let delta = lora_delta(tape, h, m)?;
    tape.add(frozen, delta)
}

/// Which projection of an attention block an adapter replaces.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Projection {
    Query,
    Key,
    Value,
}

impl Projection {
    pub const ALL: [Projection; 3] = [Projection::Query, Projection::Key, Projection::Value];

    pub fn name(self) -> &'static str {
        match self {
            Projection::Query => "query",
            Projection::Key => "key",
            Projection::Value => "value",
        }
    }
}

/// Identity of one adapted matrix inside the host network.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct LayerSlot {
    pub layer: usize,
    pub projection: Projection,
}

impl LayerSlot {
    /// Dense index over `(layer, projection)`, used to key random streams.
    pub fn index(self) -> usize {
        self.layer * 3 + self.projection as usize
    }

    pub fn name(self) -> String {
        format!("layer{}.{}", self.layer, self.projection.name())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SkillInventory {
    common: Vec<LoraModule>,
    /// Row `t` holds the `B` modules exclusive to task `t`.
    specific: Vec<Vec<LoraModule>>,
    width: usize,
    rank: usize,
}

impl SkillInventory {
    pub fn new(
        common: usize,
        per_task: usize,
        tasks: usize,
        width: usize,
        rank: usize,
        seed: u64,
    ) -> Result<Self> {
        if tasks == 0 {
            return Err(Error::Config("skill inventory needs at least one task".into()));
        }
        let mut rng = seeding::rng(seed);
        let common = (0..common)
            .map(|_| LoraModule::init(width, rank, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        let specific = if per_task == 0 {
            Vec::new()
        } else {
            (0..tasks)
                .map(|_| {
                    (0..per_task)
                        .map(|_| LoraModule::init(width, rank, &mut rng))
                        .collect::<Result<Vec<_>>>()
                })
                .collect::<Result<Vec<_>>>()?
        };
        Ok(Self {
            common,
            specific,
            width,
            rank,
        })
    }

    pub fn from_modules(common: Vec<LoraModule>, specific: Vec<Vec<LoraModule>>) -> Result<Self> {
        let first = common
            .first()
            .or_else(|| specific.first().and_then(|r| r.first()))
            .ok_or_else(|| Error::Empty("skill inventory without modules".into()))?;
        let (width, rank) = (first.width(), first.rank());
        let per_task = specific.first().map_or(0, Vec::len);
        let all = common.iter().chain(specific.iter().flatten());
        if all.clone().any(|m| m.width() != width || m.rank() != rank)
            || specific.iter().any(|r| r.len() != per_task)
        {
            return Err(Error::Contract(
                "inventory modules must share (d, r) and B".into(),
            ));
        }
        Ok(Self {
            common,
            specific,
            width,
            rank,
        })
    }

    pub fn common(&self) -> &[LoraModule] {
        &self.common
    }

    pub fn common_mut(&mut self) -> &mut [LoraModule] {
        &mut self.common
    }

    pub fn specific(&self) -> &[Vec<LoraModule>] {
        &self.specific
    }

    pub fn specific_mut(&mut self) -> &mut [Vec<LoraModule>] {
        &mut self.specific
    }

    pub fn common_count(&self) -> usize {
        self.common.len()
    }

    pub fn per_task_count(&self) -> usize {
        self.specific.first().map_or(0, Vec::len)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn rank(&self) -> usize {
        self.rank
    }

    /// `A + T·B`.
    pub fn module_count(&self) -> usize {
        self.common.len() + self.specific.iter().map(Vec::len).sum::<usize>()
    }

    pub fn param_count(&self) -> usize {
        self.module_count() * 2 * self.rank * self.width
    }

    /// All modules, common first, then specific in task-major order.
    pub fn modules(&self) -> impl Iterator<Item = &LoraModule> {
        self.common.iter().chain(self.specific.iter().flatten())
    }

    pub fn modules_mut(&mut self) -> impl Iterator<Item = &mut LoraModule> {
        self.common.iter_mut().chain(self.specific.iter_mut().flatten())
    }
}

/// Trainable parameter counts, split into adapter factors and routing weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamCount {
    pub adapter: usize,
    pub routing: usize,
}

impl ParamCount {
    pub fn total(self) -> usize {
        self.adapter + self.routing
    }
}

impl std::ops::Add for ParamCount {
    type Output = ParamCount;

    fn add(self, rhs: Self) -> Self {
        ParamCount {
            adapter: self.adapter + rhs.adapter,
            routing: self.routing + rhs.routing,
        }
    }
}

/// Closed-form count: `n·(A + T·B)·2rd` adapter parameters plus
/// `n·T·(A + T·B)` routing parameters over `n` adapted matrices.
pub fn param_count(
    common: usize,
    per_task: usize,
    tasks: usize,
    rank: usize,
    width: usize,
    matrices: usize,
) -> ParamCount {
    ParamCount {
        adapter: matrices * (common + tasks * per_task) * 2 * rank * width,
        routing: matrices * tasks * (common + tasks * per_task),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn hand_computed_forward() {
        let m = LoraModule::from_parts(t(&[&[1.0], &[2.0]]), t(&[&[3.0, 4.0]])).unwrap();
        let out = m.forward(&t(&[&[1.0, 1.0]]), &Tensor::identity(2)).unwrap();
        assert_eq!(out.data(), &[10.0, 13.0]);
    }

    #[test]
    fn zero_up_or_zero_input_leave_base() {
        let m = init_lora(8, 2, 3).unwrap();
        let h = Tensor::new(vec![3, 8], (0..24).map(|i| (i as f64).sin()).collect()).unwrap();
        let base = Tensor::new(vec![8, 8], (0..64).map(|i| (i as f64 * 0.1).cos()).collect())
            .unwrap();
        assert!(m.forward(&h, &base).unwrap().bit_eq(&h.matmul(&base).unwrap()));
        let zero = Tensor::zeros(&[3, 8]);
        assert!(m.forward(&zero, &base).unwrap().data().iter().all(|&x| x == 0.0));
    }

    #[test]
    fn init_is_seeded_and_validated() {
        assert_eq!(init_lora(16, 4, 9).unwrap(), init_lora(16, 4, 9).unwrap());
        assert_ne!(init_lora(16, 4, 9).unwrap(), init_lora(16, 4, 10).unwrap());
        assert!(init_lora(4, 5, 0).is_err());
        assert!(init_lora(4, 0, 0).is_err());
        assert_eq!(init_lora(64, 8, 0).unwrap().trainable_param_count(), 1024);
    }

    #[test]
    fn down_entries_are_centered() {
        let (d, r) = (256, 4);
        let m = init_lora(d, r, 11).unwrap();
        let n = (d * r) as f64;
        let mean = m.down().data().iter().sum::<f64>() / n;
        let sigma = 1.0 / (d as f64).sqrt();
        assert!(mean.abs() <= 3.0 * sigma / n.sqrt(), "mean {mean}");
        let var = m.down().data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        assert!((var * d as f64 - 1.0).abs() < 0.15, "variance {var}");
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let m = init_lora(4, 1, 0).unwrap();
        let err = m.forward(&Tensor::zeros(&[1, 3]), &Tensor::identity(3));
        assert!(err.is_err());
    }

    #[test]
    fn inventory_counts() {
        let inv = SkillInventory::new(3, 1, 8, 16, 2, 0).unwrap();
        assert_eq!(inv.module_count(), 3 + 8);
        assert_eq!(inv.param_count(), 11 * 2 * 2 * 16);
        assert!(inv.modules().all(|m| m.width() == 16 && m.rank() == 2));
        let shared_only = SkillInventory::new(4, 0, 8, 16, 2, 0).unwrap();
        assert_eq!(shared_only.module_count(), 4);
    }

    #[test]
    fn closed_form_counts() {
        assert_eq!(param_count(1, 0, 5, 8, 64, 1).adapter, 1024);
        assert_eq!(param_count(4, 0, 5, 2, 64, 1).adapter, 1024);
        assert_eq!(
            param_count(2, 0, 3, 4, 32, 6).adapter,
            param_count(2, 0, 300, 4, 32, 6).adapter
        );
        assert_eq!(param_count(3, 1, 4, 2, 64, 1).routing, 4 * (3 + 4));
    }
}
