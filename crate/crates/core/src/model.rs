//! A small frozen transformer encoder whose query/key/value projections are
//! adapted by [`ComposedAdapter`]s.
//!
//! Pre-norm blocks without biases or affine norms:
//! `x += attn(LN(x))·W_o; x += relu(LN(x)·W_1)·W_2`, then a final norm and
//! either a mean-pooled class head or a per-position vocabulary head. All
//! base weights are random and frozen; the only trainable tensors are
//! adapter factors and allocation matrices.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adapters::{LayerSlot, ParamCount, Projection};
use crate::composer::{AdaptedLinear, AdapterShape, AdapterVars, ComposedAdapter, ParamRole};
use crate::data::{TaskBatch, Targets, PAD};
use crate::error::{Error, Result};
use crate::routing::{RoutingMode, RoutingVariant};
use crate::seeding;
use crate::tensor::{Gradients, Tape, Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputHead {
    /// One label per example from mean-pooled final states.
    Classes(usize),
    /// One vocabulary distribution per position.
    Sequence,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_layers: usize,
    pub d_ff: usize,
    pub vocab_size: usize,
    pub max_seq_len: usize,
    pub output: OutputHead,
    pub tasks: usize,
    pub variant: RoutingVariant,
    /// Task-common skills per adapted matrix (`A`).
    pub common: usize,
    /// Task-specific skills per task and adapted matrix (`B`).
    pub per_task: usize,
    pub rank: usize,
    pub mask_off_diagonal: bool,
    pub normalize_routing: bool,
    /// Seeds the frozen base network.
    pub base_seed: u64,
    /// Seeds adapters and allocation matrices.
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            n_heads: 4,
            n_layers: 2,
            d_ff: 128,
            vocab_size: 64,
            max_seq_len: 16,
            output: OutputHead::Classes(2),
            tasks: 8,
            variant: RoutingVariant::CPoly,
            common: 3,
            per_task: 1,
            rank: 2,
            mask_off_diagonal: false,
            normalize_routing: true,
            base_seed: 1234,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Sets the variant together with its conventional `(A, B, r)`.
    pub fn with_variant(mut self, variant: RoutingVariant) -> Self {
        let (common, per_task, rank) = match variant {
            RoutingVariant::SingleLora => (1, 0, 8),
            RoutingVariant::MoeLora | RoutingVariant::Poly => (4, 0, 2),
            RoutingVariant::CPoly => (3, 1, 2),
        };
        self.variant = variant;
        self.common = common;
        self.per_task = per_task;
        self.rank = rank;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_model == 0 || self.n_heads == 0 || self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} must be a positive multiple of n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.d_ff == 0 || self.vocab_size < 2 || self.max_seq_len == 0 {
            return Err(Error::Config("model extents must be positive".into()));
        }
        if self.tasks == 0 {
            return Err(Error::Config("model needs at least one task".into()));
        }
        if let OutputHead::Classes(0) = self.output {
            return Err(Error::Config("classification head needs classes".into()));
        }
        if self.rank == 0 || self.rank > self.d_model {
            return Err(Error::Config(format!(
                "rank {} outside 1..={}",
                self.rank, self.d_model
            )));
        }
        self.variant.validate(self.common, self.per_task)
    }

    fn adapter_shape(&self) -> AdapterShape {
        AdapterShape {
            variant: self.variant,
            tasks: self.tasks,
            common: self.common,
            per_task: self.per_task,
            width: self.d_model,
            rank: self.rank,
            mask_off_diagonal: self.mask_off_diagonal,
            normalize: self.normalize_routing,
        }
    }

    pub fn output_width(&self) -> usize {
        match self.output {
            OutputHead::Classes(c) => c,
            OutputHead::Sequence => self.vocab_size,
        }
    }

    pub fn adapted_matrices(&self) -> usize {
        3 * self.n_layers
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Block {
    pub query: AdaptedLinear,
    pub key: AdaptedLinear,
    pub value: AdaptedLinear,
    pub out: Tensor,
    pub ffn_in: Tensor,
    pub ffn_out: Tensor,
}

impl Block {
    pub fn projection(&self, p: Projection) -> &AdaptedLinear {
        match p {
            Projection::Query => &self.query,
            Projection::Key => &self.key,
            Projection::Value => &self.value,
        }
    }

    fn projections_mut(&mut self) -> [&mut AdaptedLinear; 3] {
        [&mut self.query, &mut self.key, &mut self.value]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerModel {
    config: ModelConfig,
    token_embedding: Tensor,
    position_embedding: Tensor,
    blocks: Vec<Block>,
    head: Tensor,
}

/// Tape handles for one forward pass.
#[derive(Debug)]
pub struct BoundModel {
    adapters: Vec<AdapterVars>,
    frozen: Vec<Var>,
}

/// Result of inspecting gradients after a backward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GradientAudit {
    pub frozen_with_gradient: usize,
    pub adapter_nonzero: usize,
    pub routing_nonzero: usize,
}

fn gaussian(rng: &mut impl rand::Rng, shape: &[usize], std: f64) -> Tensor {
    let normal = Normal::new(0.0, std).expect("positive std");
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| normal.sample(rng)).collect())
        .expect("shape matches")
}

impl TransformerModel {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        let mut rng = seeding::keyed_rng(config.base_seed, &[0xba5e]);
        let token_embedding = gaussian(&mut rng, &[config.vocab_size, d], 1.0);
        let position_embedding = gaussian(&mut rng, &[config.max_seq_len, d], 1.0);
        let proj_std = 1.0 / (d as f64).sqrt();
        let mut frozen_blocks = Vec::new();
        for _ in 0..config.n_layers {
            let qkv: Vec<Tensor> = (0..3).map(|_| gaussian(&mut rng, &[d, d], proj_std)).collect();
            let out = gaussian(&mut rng, &[d, d], proj_std);
            let ffn_in = gaussian(&mut rng, &[d, config.d_ff], (2.0 / d as f64).sqrt());
            let ffn_out = gaussian(&mut rng, &[config.d_ff, d], 1.0 / (config.d_ff as f64).sqrt());
            frozen_blocks.push((qkv, out, ffn_in, ffn_out));
        }
        let head = gaussian(&mut rng, &[d, config.output_width()], proj_std);

        let shape = config.adapter_shape();
        let mut blocks = Vec::new();
        for (layer, (qkv, out, ffn_in, ffn_out)) in frozen_blocks.into_iter().enumerate() {
            let mut adapted = Vec::new();
            for (projection, base) in Projection::ALL.into_iter().zip(qkv) {
                let slot = LayerSlot { layer, projection };
                let seed = seeding::derive(config.seed, &[0xada, slot.index() as u64]);
                adapted.push(AdaptedLinear::new(
                    base,
                    ComposedAdapter::new(slot, shape, seed)?,
                )?);
            }
            let mut it = adapted.into_iter();
            let (query, key, value) = (it.next().unwrap(), it.next().unwrap(), it.next().unwrap());
            blocks.push(Block {
                query,
                key,
                value,
                out,
                ffn_in,
                ffn_out,
            });
        }
        Ok(Self {
            config,
            token_embedding,
            position_embedding,
            blocks,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn adapters(&self) -> impl Iterator<Item = &ComposedAdapter> {
        self.blocks
            .iter()
            .flat_map(|b| [&b.query.adapter, &b.key.adapter, &b.value.adapter])
    }

    /// Frozen tensors with stable names.
    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = vec![
            ("token_embedding".to_string(), &self.token_embedding),
            ("position_embedding".to_string(), &self.position_embedding),
        ];
        for (l, b) in self.blocks.iter().enumerate() {
            for p in Projection::ALL {
                out.push((format!("layer{l}.{}.base", p.name()), &b.projection(p).base));
            }
            out.push((format!("layer{l}.out"), &b.out));
            out.push((format!("layer{l}.ffn_in"), &b.ffn_in));
            out.push((format!("layer{l}.ffn_out"), &b.ffn_out));
        }
        out.push(("head".to_string(), &self.head));
        out
    }

    /// Every tensor, frozen then trainable, under the names used by
    /// [`Self::frozen_tensors`] and [`Self::trainable_names`].
    pub(crate) fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor)> {
        let names: Vec<String> = self
            .frozen_tensors()
            .into_iter()
            .map(|(n, _)| n)
            .chain(self.trainable_names())
            .collect();
        let mut tensors: Vec<&mut Tensor> = vec![&mut self.token_embedding, &mut self.position_embedding];
        let mut adapters = Vec::new();
        for b in &mut self.blocks {
            let [q, k, v] = [&mut b.query, &mut b.key, &mut b.value];
            tensors.extend([&mut q.base, &mut k.base, &mut v.base]);
            tensors.extend([&mut b.out, &mut b.ffn_in, &mut b.ffn_out]);
            adapters.extend([&mut q.adapter, &mut k.adapter, &mut v.adapter]);
        }
        tensors.push(&mut self.head);
        for a in adapters {
            tensors.extend(a.tensors_mut().into_iter().map(|(_, t)| t));
        }
        names.into_iter().zip(tensors).collect()
    }

    /// Trainable tensors in bind order.
    pub fn trainable_mut(&mut self) -> Vec<(ParamRole, &mut Tensor)> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.projections_mut())
            .flat_map(|p| p.adapter.tensors_mut())
            .collect()
    }

    /// Names of the trainable tensors, in [`Self::trainable_mut`] order.
    pub fn trainable_names(&self) -> Vec<String> {
        self.adapters().flat_map(ComposedAdapter::tensor_names).collect()
    }

    pub fn adapters_mut(&mut self) -> impl Iterator<Item = &mut ComposedAdapter> {
        self.blocks
            .iter_mut()
            .flat_map(|b| b.projections_mut())
            .map(|p| &mut p.adapter)
    }

    /// Adapter and routing parameters; frozen weights are excluded.
    pub fn count_trainable(&self) -> ParamCount {
        self.adapters()
            .map(ComposedAdapter::param_count)
            .fold(ParamCount::default(), |a, b| a + b)
    }

    pub fn zero_grad(&mut self) {
        for (_, t) in self.trainable_mut() {
            t.zero_grad();
        }
    }

    pub fn bind(&self, tape: &mut Tape) -> BoundModel {
        BoundModel {
            adapters: self.adapters().map(|a| a.bind(tape)).collect(),
            frozen: Vec::new(),
        }
    }

    fn check_batch(&self, batch: &TaskBatch) -> Result<()> {
        let c = &self.config;
        if batch.task >= c.tasks {
            return Err(Error::OutOfRange {
                what: "task",
                index: batch.task,
                limit: c.tasks,
            });
        }
        if batch.batch == 0 || batch.tokens.len() != batch.batch * batch.seq_len {
            return Err(Error::Contract(format!(
                "ragged batch: {} tokens for {}×{}",
                batch.tokens.len(),
                batch.batch,
                batch.seq_len
            )));
        }
        if batch.seq_len == 0 || batch.seq_len > c.max_seq_len {
            return Err(Error::OutOfRange {
                what: "sequence length",
                index: batch.seq_len,
                limit: c.max_seq_len,
            });
        }
        if let Some(&t) = batch.tokens.iter().find(|&&t| t as usize >= c.vocab_size) {
            return Err(Error::OutOfRange {
                what: "token",
                index: t as usize,
                limit: c.vocab_size,
            });
        }
        match (&batch.targets, c.output) {
            (Targets::Classes(t), OutputHead::Classes(_)) if t.len() == batch.batch => Ok(()),
            (Targets::Sequences(t), OutputHead::Sequence) if t.len() == batch.batch => Ok(()),
            _ => Err(Error::Contract("batch targets do not match the output head".into())),
        }
    }

    /// Builds the forward graph and returns the logits node. With
    /// `adapted == false` the frozen projections are used alone.
    pub fn forward_on_tape(
        &self,
        tape: &mut Tape,
        bound: &mut BoundModel,
        batch: &TaskBatch,
        mode: RoutingMode,
        adapted: bool,
    ) -> Result<Var> {
        self.check_batch(batch)?;
        let c = &self.config;
        let (d, n) = (c.d_model, batch.tokens.len());
        let mut embedded = vec![0.0; n * d];
        for (i, &tok) in batch.tokens.iter().enumerate() {
            let pos = i % batch.seq_len;
            let e = &self.token_embedding.data()[tok as usize * d..(tok as usize + 1) * d];
            let p = &self.position_embedding.data()[pos * d..(pos + 1) * d];
            for ((o, a), b) in embedded[i * d..(i + 1) * d].iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        let key_mask = batch
            .tokens
            .iter()
            .any(|&t| t == PAD)
            .then(|| batch.tokens.iter().map(|&t| t != PAD).collect::<Vec<_>>());
        let mut x = tape.constant(vec![n, d], embedded)?;
        for (l, block) in self.blocks.iter().enumerate() {
            let a = tape.layer_norm(x)?;
            let mut qkv = [a; 3];
            for (slot, p) in qkv.iter_mut().zip(Projection::ALL) {
                let lin = block.projection(p);
                let base = tape.leaf(&lin.base);
                bound.frozen.push(base);
                *slot = if adapted {
                    let vars = &bound.adapters[l * 3 + p as usize];
                    lin.adapter.compose(tape, vars, a, base, batch.task, mode)?
                } else {
                    tape.matmul(a, base)?
                };
            }
            let att = tape.attention(
                qkv[0],
                qkv[1],
                qkv[2],
                batch.batch,
                batch.seq_len,
                c.n_heads,
                key_mask.clone(),
            )?;
            let wo = tape.leaf(&block.out);
            let w1 = tape.leaf(&block.ffn_in);
            let w2 = tape.leaf(&block.ffn_out);
            bound.frozen.extend([wo, w1, w2]);
            let proj = tape.matmul(att, wo)?;
            x = tape.add(x, proj)?;
            let f = tape.layer_norm(x)?;
            let f = tape.matmul(f, w1)?;
            let f = tape.relu(f);
            let f = tape.matmul(f, w2)?;
            x = tape.add(x, f)?;
        }
        let x = tape.layer_norm(x)?;
        let head = tape.leaf(&self.head);
        bound.frozen.push(head);
        match c.output {
            OutputHead::Classes(_) => {
                let mut pool = vec![0.0; batch.batch * n];
                for b in 0..batch.batch {
                    let toks = &batch.tokens[b * batch.seq_len..(b + 1) * batch.seq_len];
                    let live = toks.iter().filter(|&&t| t != PAD).count().max(1);
                    for (s, &t) in toks.iter().enumerate() {
                        if t != PAD || key_mask.is_none() {
                            pool[b * n + b * batch.seq_len + s] = 1.0 / live as f64;
                        }
                    }
                }
                let pool = tape.constant(vec![batch.batch, n], pool)?;
                let pooled = tape.matmul(pool, x)?;
                tape.matmul(pooled, head)
            }
            OutputHead::Sequence => tape.matmul(x, head),
        }
    }

    /// Cross-entropy of the batch targets under `logits`.
    pub fn loss_on_tape(&self, tape: &mut Tape, logits: Var, batch: &TaskBatch) -> Result<Var> {
        tape.cross_entropy(logits, &loss_targets(batch))
    }

    /// Eager logits (`batch × classes` or `batch·seq × vocab`).
    pub fn forward(&self, batch: &TaskBatch, mode: RoutingMode) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &mut bound, batch, mode, true)?;
        Ok(tape.to_tensor(logits))
    }

    /// Eager logits of the frozen network with every adapter removed.
    pub fn forward_base(&self, batch: &TaskBatch) -> Result<Tensor> {
        let mut tape = Tape::new();
        let mut bound = BoundModel {
            adapters: Vec::new(),
            frozen: Vec::new(),
        };
        let logits =
            self.forward_on_tape(&mut tape, &mut bound, batch, RoutingMode::Eval, false)?;
        Ok(tape.to_tensor(logits))
    }

    /// Folds gradients from a backward pass into the trainable tensors.
    pub fn accumulate(&mut self, bound: &BoundModel, grads: &Gradients) -> Result<()> {
        let vars: Vec<Var> = bound.adapters.iter().flat_map(AdapterVars::all).collect();
        let params = self.trainable_mut();
        debug_assert_eq!(vars.len(), params.len());
        for (v, (_, t)) in vars.into_iter().zip(params) {
            if let Some(g) = grads.get(v) {
                t.accumulate_grad(g)?;
            }
        }
        Ok(())
    }

    /// Counts frozen leaves that received a gradient and trainable tensors
    /// whose gradient has a nonzero entry.
    pub fn audit_gradients(&mut self, bound: &BoundModel, grads: &Gradients) -> GradientAudit {
        let frozen_with_gradient = bound
            .frozen
            .iter()
            .filter(|v| grads.get(**v).is_some())
            .count();
        let vars: Vec<Var> = bound.adapters.iter().flat_map(AdapterVars::all).collect();
        let mut audit = GradientAudit {
            frozen_with_gradient,
            adapter_nonzero: 0,
            routing_nonzero: 0,
        };
        for (v, (role, _)) in vars.into_iter().zip(self.trainable_mut()) {
            let nonzero = grads.get(v).is_some_and(|g| g.iter().any(|&x| x != 0.0));
            if nonzero {
                match role {
                    ParamRole::Adapter => audit.adapter_nonzero += 1,
                    ParamRole::Routing => audit.routing_nonzero += 1,
                }
            }
        }
        audit
    }

    /// Mean loss and gradients for one batch; gradients are accumulated into
    /// the trainable tensors. Returns `(loss, logits)`.
    pub fn loss_and_grad(
        &mut self,
        batch: &TaskBatch,
        mode: RoutingMode,
    ) -> Result<(f64, Tensor)> {
        let mut tape = Tape::new();
        let mut bound = self.bind(&mut tape);
        let logits = self.forward_on_tape(&mut tape, &mut bound, batch, mode, true)?;
        let loss = self.loss_on_tape(&mut tape, logits, batch)?;
        let value = tape.value(loss)[0];
        if !value.is_finite() {
            return Err(Error::NumericInvalid(format!(
                "loss {value} for task {}",
                batch.task
            )));
        }
        let grads = tape.backward(loss)?;
        self.accumulate(&bound, &grads)?;
        Ok((value, tape.to_tensor(logits)))
    }
}

/// Per-row targets for the loss: one per example in classification mode, one
/// per position in sequence mode (the position right after the target is a
/// `PAD` stop marker; later positions are ignored).
pub fn loss_targets(batch: &TaskBatch) -> Vec<Option<usize>> {
    match &batch.targets {
        Targets::Classes(c) => c.iter().map(|&c| Some(c)).collect(),
        Targets::Sequences(seqs) => {
            let mut out = Vec::with_capacity(batch.batch * batch.seq_len);
            for s in seqs {
                for p in 0..batch.seq_len {
                    out.push(match p.cmp(&s.len()) {
                        std::cmp::Ordering::Less => Some(s[p] as usize),
                        std::cmp::Ordering::Equal => Some(PAD as usize),
                        std::cmp::Ordering::Greater => None,
                    });
                }
            }
            out
        }
    }
}

/// Decodes logits into one predicted token sequence per example.
pub fn predictions(config: &ModelConfig, logits: &Tensor, batch: &TaskBatch) -> Vec<Vec<u32>> {
    let width = logits.cols();
    let argmax = |row: &[f64]| {
        row.iter()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |best, (i, &v)| {
                if v > best.1 {
                    (i, v)
                } else {
                    best
                }
            })
            .0 as u32
    };
    match config.output {
        OutputHead::Classes(_) => (0..batch.batch)
            .map(|b| vec![argmax(&logits.data()[b * width..(b + 1) * width])])
            .collect(),
        OutputHead::Sequence => (0..batch.batch)
            .map(|b| {
                (0..batch.seq_len)
                    .map(|p| {
                        let r = b * batch.seq_len + p;
                        argmax(&logits.data()[r * width..(r + 1) * width])
                    })
                    .take_while(|&t| t != PAD)
                    .collect()
            })
            .collect(),
    }
}
