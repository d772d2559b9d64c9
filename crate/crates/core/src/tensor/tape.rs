use super::kernels::{self, gumbel_sigmoid, sigmoid};
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Sigmoid(Var),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Gather(Var, Vec<usize>),
    LayerNorm {
        input: Var,
        width: usize,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        probs: Vec<f64>,
    },
    Mix {
        weights: Var,
        terms: Vec<Var>,
    },
    LoraMix {
        base: Var,
        h: Var,
        modules: Vec<(Var, Var)>,
        weights: Var,
        /// Column offset of each module in `hd`; the last entry is the width.
        offsets: Vec<usize>,
        /// `h·[down_0 | down_1 | ..]`.
        hd: Vec<f64>,
    },
    GumbelSigmoid(Var),
    NormalizeSum {
        input: Var,
        denom: f64,
        floored: bool,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse(Var, Var),
}

#[derive(Debug, Clone)]
struct AttentionLayout {
    batch: usize,
    seq: usize,
    heads: usize,
    width: usize,
    key_mask: Option<Vec<bool>>,
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    requires_grad: bool,
    op: Op,
}

/// Append-only record of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when it did not require gradients or
    /// the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies the value of `v` out into a fresh tensor.
    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, requires_grad: bool, op: Op) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a tensor as a leaf; it receives gradients iff the tensor
    /// requires them.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape.clone(), t.data.clone(), t.requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.push(t.shape, t.data, false, Op::Leaf))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.nodes[v.0].shape.as_slice() {
            [m, n] => Ok((*m, *n)),
            other => Err(Error::shape(op, other, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                &self.nodes[a.0].shape,
                &self.nodes[b.0].shape,
            ));
        }
        let out = kernels::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, rg, Op::MatMul(a, b)))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (shape, value) = if na.shape == nb.shape {
            let v = na.value.iter().zip(&nb.value).map(|(x, y)| f(*x, *y)).collect();
            (na.shape.clone(), v)
        } else if nb.value.len() == 1 {
            let y = nb.value[0];
            (na.shape.clone(), na.value.iter().map(|x| f(*x, y)).collect())
        } else if na.value.len() == 1 {
            let x = na.value[0];
            (nb.shape.clone(), nb.value.iter().map(|y| f(x, *y)).collect())
        } else {
            return Err(Error::shape(name, &na.shape, &nb.shape));
        };
        let rg = self.rg(&[a, b]);
        let op = match name {
            "add" => Op::Add(a, b),
            "sub" => Op::Sub(a, b),
            _ => Op::Mul(a, b),
        };
        Ok(self.push(shape, value, rg, op))
    }

    /// Elementwise sum; either operand may be a single-element tensor.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y)
    }

    /// Elementwise product; either operand may be a single-element tensor.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x * c, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| x + c, Op::AddScalar(a))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let n = &self.nodes[a.0];
        let value = n.value.iter().map(|&x| f(x)).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(shape, value, rg, op)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x < 0.0 { 0.0 } else { x }, Op::Relu(a))
    }

    /// Natural log; non-positive inputs follow float semantics.
    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().fold(0.0, |acc, x| acc + x);
        let rg = n.requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum(a))
    }

    /// Row `i` of a matrix as a `1×cols` tensor.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let (rows, cols) = self.matrix("row", a)?;
        if i >= rows {
            return Err(Error::OutOfRange {
                what: "row",
                index: i,
                limit: rows,
            });
        }
        self.gather(a, (i * cols..(i + 1) * cols).collect())
    }

    /// Selected flat elements of `a` as a `1×len` tensor.
    pub fn gather(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        let src = &self.nodes[a.0].value;
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(Error::OutOfRange {
                what: "gather",
                index: bad,
                limit: src.len(),
            });
        }
        let value: Vec<f64> = indices.iter().map(|&i| src[i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(vec![1, value.len()], value, rg, Op::Gather(a, indices)))
    }

    /// Normalizes each row of width `cols` to zero mean and unit variance
    /// (no affine parameters).
    pub fn layer_norm(&mut self, a: Var) -> Result<Var> {
        let (rows, width) = self.matrix("layer_norm", a)?;
        let x = &self.nodes[a.0].value;
        let mut out = vec![0.0; rows * width];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x[r * width..(r + 1) * width];
            let mean = row.iter().fold(0.0, |s, v| s + v) / width as f64;
            let var = row.iter().fold(0.0, |s, v| s + (v - mean) * (v - mean)) / width as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            for (o, v) in out[r * width..(r + 1) * width].iter_mut().zip(row) {
                *o = (v - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(
            vec![rows, width],
            out,
            rg,
            Op::LayerNorm {
                input: a,
                width,
                inv_std,
            },
        ))
    }

    /// Multi-head scaled dot-product attention over `batch` sequences of
    /// length `seq`. `q`, `k`, `v` are `(batch·seq)×width`; heads split the
    /// width evenly. `key_mask[i] == false` excludes position `i` as a key.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        seq: usize,
        heads: usize,
        key_mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let (n, width) = self.matrix("attention", q)?;
        for other in [k, v] {
            if self.nodes[other.0].shape != [n, width] {
                return Err(Error::shape(
                    "attention",
                    &self.nodes[q.0].shape,
                    &self.nodes[other.0].shape,
                ));
            }
        }
        if n != batch * seq {
            return Err(Error::shape("attention", &[n, width], &[batch, seq]));
        }
        if heads == 0 || width % heads != 0 {
            return Err(Error::Contract(format!(
                "width {width} not divisible by {heads} heads"
            )));
        }
        if let Some(m) = &key_mask {
            if m.len() != n {
                return Err(Error::shape("attention mask", &[n], &[m.len()]));
            }
        }
        let layout = AttentionLayout {
            batch,
            seq,
            heads,
            width,
            key_mask,
        };
        let (out, probs) = attention_forward(
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
            &layout,
        );
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            vec![n, width],
            out,
            rg,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            },
        ))
    }

    /// `Σ_i weights[i] · terms[i]`. Terms with an exactly-zero weight are
    /// skipped in the forward sum but still receive their weight's gradient.
    pub fn mix(&mut self, weights: Var, terms: &[Var]) -> Result<Var> {
        let w = &self.nodes[weights.0];
        if w.value.len() != terms.len() {
            return Err(Error::shape("mix", &w.shape, &[terms.len()]));
        }
        let first = terms
            .first()
            .ok_or_else(|| Error::Empty("mix needs at least one term".into()))?;
        let shape = self.nodes[first.0].shape.clone();
        for t in terms {
            if self.nodes[t.0].shape != shape {
                return Err(Error::shape("mix", &shape, &self.nodes[t.0].shape));
            }
        }
        let mut acc = vec![0.0; shape.iter().product()];
        for (wi, t) in w.value.iter().zip(terms) {
            if *wi == 0.0 {
                continue;
            }
            for (a, x) in acc.iter_mut().zip(&self.nodes[t.0].value) {
                *a += wi * x;
            }
        }
        let mut all = terms.to_vec();
        all.push(weights);
        let rg = self.rg(&all);
        Ok(self.push(
            shape,
            acc,
            rg,
            Op::Mix {
                weights,
                terms: terms.to_vec(),
            },
        ))
    }

    /// `base + Σ_i w_i · (h·down_i)·up_i` over low-rank modules. Modules whose
    /// weight is exactly zero are skipped in the forward pass, so all-zero
    /// weights return `base` bitwise; their gradients are still produced.
    pub fn lora_mix(
        &mut self,
        base: Var,
        h: Var,
        modules: &[(Var, Var)],
        weights: Var,
    ) -> Result<Var> {
        let (n, d) = self.matrix("lora_mix", h)?;
        let (bn, width) = self.matrix("lora_mix", base)?;
        if bn != n {
            return Err(Error::shape("lora_mix", &[n, d], &[bn, width]));
        }
        if self.nodes[weights.0].value.len() != modules.len() {
            return Err(Error::shape(
                "lora_mix",
                &self.nodes[weights.0].shape,
                &[modules.len()],
            ));
        }
        let mut offsets = vec![0];
        for &(down, up) in modules {
            let (dd, r) = self.matrix("lora_mix", down)?;
            let (ur, uw) = self.matrix("lora_mix", up)?;
            if dd != d || ur != r || uw != width {
                return Err(Error::shape("lora_mix", &[dd, r], &[ur, uw]));
            }
            offsets.push(offsets.last().copied().unwrap_or(0) + r);
        }
        let total = offsets[modules.len()];
        let mut dcat = vec![0.0; d * total];
        for (i, &(down, _)) in modules.iter().enumerate() {
            let r = offsets[i + 1] - offsets[i];
            let dv = &self.nodes[down.0].value;
            for p in 0..d {
                dcat[p * total + offsets[i]..p * total + offsets[i] + r]
                    .copy_from_slice(&dv[p * r..(p + 1) * r]);
            }
        }
        let hd = kernels::matmul(&self.nodes[h.0].value, &dcat, n, d, total);
        let w = &self.nodes[weights.0].value;
        let active: Vec<usize> = (0..modules.len()).filter(|&i| w[i] != 0.0).collect();
        let k: usize = active.iter().map(|&i| offsets[i + 1] - offsets[i]).sum();
        let mut z = vec![0.0; n * k];
        let mut ucat = Vec::with_capacity(k * width);
        let mut col = 0;
        for &i in &active {
            let r = offsets[i + 1] - offsets[i];
            for row in 0..n {
                for q in 0..r {
                    z[row * k + col + q] = w[i] * hd[row * total + offsets[i] + q];
                }
            }
            ucat.extend_from_slice(&self.nodes[modules[i].1 .0].value);
            col += r;
        }
        let mut out = self.nodes[base.0].value.clone();
        kernels::matmul_acc(&mut out, &z, &ucat, n, k, width);
        let mut all: Vec<Var> = modules.iter().flat_map(|&(a, b)| [a, b]).collect();
        all.extend([base, h, weights]);
        let rg = self.rg(&all);
        Ok(self.push(
            vec![n, width],
            out,
            rg,
            Op::LoraMix {
                base,
                h,
                modules: modules.to_vec(),
                weights,
                offsets,
                hd,
            },
        ))
    }

    /// Relaxed Bernoulli sample `σ(w)u / (σ(w)u + (1−σ(w))(1−u))` per element,
    /// i.e. `σ(log(σ(w)u / ((1−σ(w))(1−u))))`. Noise `u` is a constant; each
    /// value must lie in `[0, 1]` and is clamped to `[1e-6, 1−1e-6]`.
    pub fn gumbel_sigmoid(&mut self, logits: Var, u: &[f64]) -> Result<Var> {
        let n = &self.nodes[logits.0];
        if u.len() != n.value.len() {
            return Err(Error::shape("gumbel_sigmoid", &n.shape, &[u.len()]));
        }
        let mut out = Vec::with_capacity(u.len());
        for (&w, &ui) in n.value.iter().zip(u) {
            out.push(gumbel_sigmoid(w, ui)?);
        }
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        Ok(self.push(shape, out, rg, Op::GumbelSigmoid(logits)))
    }

    /// Divides by the element sum, floored at `floor`.
    pub fn normalize_sum(&mut self, a: Var, floor: f64) -> Var {
        let n = &self.nodes[a.0];
        let s = n.value.iter().fold(0.0, |acc, x| acc + x);
        let (denom, floored) = if s > floor { (s, false) } else { (floor, true) };
        let value = n.value.iter().map(|x| x / denom).collect();
        let shape = n.shape.clone();
        let rg = n.requires_grad;
        self.push(
            shape,
            value,
            rg,
            Op::NormalizeSum {
                input: a,
                denom,
                floored,
            },
        )
    }

    /// Mean softmax cross-entropy over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (rows, classes) = self.matrix("cross_entropy", logits)?;
        if targets.len() != rows {
            return Err(Error::shape("cross_entropy", &[rows, classes], &[targets.len()]));
        }
        let x = &self.nodes[logits.0].value;
        if x.iter().any(|v| v.is_nan()) {
            return Err(Error::NumericInvalid("NaN in cross-entropy logits".into()));
        }
        let mut probs = vec![0.0; rows * classes];
        let mut total = 0.0;
        let mut count = 0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= classes {
                return Err(Error::OutOfRange {
                    what: "class",
                    index: t,
                    limit: classes,
                });
            }
            let row = &x[r * classes..(r + 1) * classes];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for (p, v) in probs[r * classes..(r + 1) * classes].iter_mut().zip(row) {
                *p = (v - max).exp();
                z += *p;
            }
            for p in &mut probs[r * classes..(r + 1) * classes] {
                *p /= z;
            }
            total += max + z.ln() - row[t];
            count += 1;
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy without targets".into()));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![total / count as f64],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
        ))
    }

    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (p, t) = (&self.nodes[pred.0], &self.nodes[target.0]);
        if p.shape != t.shape {
            return Err(Error::shape("mse", &p.shape, &t.shape));
        }
        if p.value.iter().chain(&t.value).any(|v| v.is_nan()) {
            return Err(Error::NumericInvalid("NaN in mse inputs".into()));
        }
        let s = p
            .value
            .iter()
            .zip(&t.value)
            .fold(0.0, |acc, (a, b)| acc + (a - b) * (a - b));
        let v = s / p.value.len() as f64;
        let rg = self.rg(&[pred, target]);
        Ok(self.push(vec![1], vec![v], rg, Op::Mse(pred, target)))
    }

    /// Reverse pass from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let ln = &self.nodes[loss.0];
        if ln.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                ln.shape
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        if !ln.requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| -> &[f64] { &self.nodes[v.0].value };
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if wants(*a) {
                    let bt = kernels::transpose(val(*b), k, n);
                    let slot = slot(grads, *a, m * k);
                    kernels::matmul_acc(slot, g, &bt, m, n, k);
                }
                if wants(*b) {
                    let slot = slot(grads, *b, k * n);
                    kernels::matmul_tn_acc(slot, val(*a), g, m, k, n);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                for (v, s) in [(*a, 1.0), (*b, sign)] {
                    if wants(v) {
                        let len = self.nodes[v.0].value.len();
                        let slot = slot(grads, v, len);
                        if len == g.len() {
                            for (o, x) in slot.iter_mut().zip(g) {
                                *o += s * x;
                            }
                        } else {
                            slot[0] += s * g.iter().fold(0.0, |acc, x| acc + x);
                        }
                    }
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(*a, *b), (*b, *a)] {
                    if !wants(v) {
                        continue;
                    }
                    let len = self.nodes[v.0].value.len();
                    let ov = val(other);
                    let slot = slot(grads, v, len);
                    if len == g.len() {
                        if ov.len() == g.len() {
                            for ((o, x), y) in slot.iter_mut().zip(g).zip(ov) {
                                *o += x * y;
                            }
                        } else {
                            for (o, x) in slot.iter_mut().zip(g) {
                                *o += x * ov[0];
                            }
                        }
                    } else {
                        slot[0] += g.iter().zip(ov).fold(0.0, |acc, (x, y)| acc + x * y);
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let slot = slot(grads, *a, g.len());
                    for (o, x) in slot.iter_mut().zip(g) {
                        *o += c * x;
                    }
                }
            }
            Op::AddScalar(a) => add_into(grads, *a, g, |x, _| x, val(*a)),
            Op::Sigmoid(a) => {
                let y = &node.value;
                let slot = slot(grads, *a, g.len());
                for ((o, x), s) in slot.iter_mut().zip(g).zip(y) {
                    *o += x * s * (1.0 - s);
                }
            }
            Op::Relu(a) => add_into(grads, *a, g, |x, v| if v > 0.0 { x } else { 0.0 }, val(*a)),
            Op::Log(a) => add_into(grads, *a, g, |x, v| x / v, val(*a)),
            Op::Exp(a) => {
                let y = &node.value;
                let slot = slot(grads, *a, g.len());
                for ((o, x), e) in slot.iter_mut().zip(g).zip(y) {
                    *o += x * e;
                }
            }
            Op::Sum(a) => {
                let len = self.nodes[a.0].value.len();
                let slot = slot(grads, *a, len);
                for o in slot.iter_mut() {
                    *o += g[0];
                }
            }
            Op::Gather(a, indices) => {
                let len = self.nodes[a.0].value.len();
                let slot = slot(grads, *a, len);
                for (&i, x) in indices.iter().zip(g) {
                    slot[i] += x;
                }
            }
            Op::LayerNorm {
                input,
                width,
                inv_std,
            } => {
                let y = &node.value;
                let width = *width;
                let slot = slot(grads, *input, g.len());
                for (r, is) in inv_std.iter().enumerate() {
                    let gr = &g[r * width..(r + 1) * width];
                    let yr = &y[r * width..(r + 1) * width];
                    let mean_g = gr.iter().fold(0.0, |s, x| s + x) / width as f64;
                    let mean_gy = kernels::dot(gr, yr) / width as f64;
                    for ((o, gi), yi) in slot[r * width..(r + 1) * width].iter_mut().zip(gr).zip(yr)
                    {
                        *o += is * (gi - mean_g - yi * mean_gy);
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
            } => self.attention_backward(*q, *k, *v, layout, probs, g, grads),
            Op::Mix { weights, terms } => {
                let w = val(*weights).to_vec();
                for (wi, t) in w.iter().zip(terms) {
                    if wants(*t) {
                        let slot = slot(grads, *t, g.len());
                        for (o, x) in slot.iter_mut().zip(g) {
                            *o += wi * x;
                        }
                    }
                }
                if wants(*weights) {
                    let dw: Vec<f64> = terms.iter().map(|t| kernels::dot(g, val(*t))).collect();
                    let slot = slot(grads, *weights, dw.len());
                    for (o, x) in slot.iter_mut().zip(dw) {
                        *o += x;
                    }
                }
            }
            Op::LoraMix {
                base,
                h,
                modules,
                weights,
                offsets,
                hd,
            } => {
                if wants(*base) {
                    let slot = slot(grads, *base, g.len());
                    for (o, x) in slot.iter_mut().zip(g) {
                        *o += x;
                    }
                }
                let (n, d) = (self.nodes[h.0].shape[0], self.nodes[h.0].shape[1]);
                let width = node.shape[1];
                let total = *offsets.last().unwrap_or(&0);
                let rank = |i: usize| offsets[i + 1] - offsets[i];
                let w = val(*weights);
                let downs_want = modules.iter().any(|(dn, _)| wants(*dn));
                let ups_want = modules.iter().any(|(_, up)| wants(*up));
                if total == 0 {
                    return;
                }
                if wants(*weights) || wants(*h) || downs_want {
                    // g · [up_0 | up_1 | ..]ᵀ
                    let mut ut = vec![0.0; width * total];
                    for (i, (_, up)) in modules.iter().enumerate() {
                        let uv = val(*up);
                        for q in 0..rank(i) {
                            for j in 0..width {
                                ut[j * total + offsets[i] + q] = uv[q * width + j];
                            }
                        }
                    }
                    let gu = kernels::matmul(g, &ut, n, width, total);
                    if wants(*weights) {
                        let slot = slot(grads, *weights, modules.len());
                        for i in 0..modules.len() {
                            let mut acc = 0.0;
                            for row in 0..n {
                                let base = row * total + offsets[i];
                                for q in 0..rank(i) {
                                    acc += gu[base + q] * hd[base + q];
                                }
                            }
                            slot[i] += acc;
                        }
                    }
                    if wants(*h) || downs_want {
                        let mut dhd = gu;
                        for row in 0..n {
                            for i in 0..modules.len() {
                                for x in &mut dhd[row * total + offsets[i]..row * total + offsets[i + 1]] {
                                    *x *= w[i];
                                }
                            }
                        }
                        if wants(*h) {
                            let mut dt = vec![0.0; total * d];
                            for (i, (down, _)) in modules.iter().enumerate() {
                                let dv = val(*down);
                                for p in 0..d {
                                    for q in 0..rank(i) {
                                        dt[(offsets[i] + q) * d + p] = dv[p * rank(i) + q];
                                    }
                                }
                            }
                            let slot = slot(grads, *h, n * d);
                            kernels::matmul_acc(slot, &dhd, &dt, n, total, d);
                        }
                        if downs_want {
                            let mut dd = vec![0.0; d * total];
                            kernels::matmul_tn_acc(&mut dd, val(*h), &dhd, n, d, total);
                            for (i, (down, _)) in modules.iter().enumerate() {
                                if !wants(*down) {
                                    continue;
                                }
                                let r = rank(i);
                                let slot = slot(grads, *down, d * r);
                                for p in 0..d {
                                    for q in 0..r {
                                        slot[p * r + q] += dd[p * total + offsets[i] + q];
                                    }
                                }
                            }
                        }
                    }
                }
                if ups_want {
                    let mut z = hd.clone();
                    for row in 0..n {
                        for i in 0..modules.len() {
                            for x in &mut z[row * total + offsets[i]..row * total + offsets[i + 1]] {
                                *x *= w[i];
                            }
                        }
                    }
                    let mut du = vec![0.0; total * width];
                    kernels::matmul_tn_acc(&mut du, &z, g, n, total, width);
                    for (i, (_, up)) in modules.iter().enumerate() {
                        if wants(*up) {
                            let slot = slot(grads, *up, rank(i) * width);
                            for (o, x) in slot
                                .iter_mut()
                                .zip(&du[offsets[i] * width..offsets[i + 1] * width])
                            {
                                *o += x;
                            }
                        }
                    }
                }
            }
            Op::GumbelSigmoid(a) => {
                let y = &node.value;
                let slot = slot(grads, *a, g.len());
                for ((o, x), s) in slot.iter_mut().zip(g).zip(y) {
                    *o += x * s * (1.0 - s);
                }
            }
            Op::NormalizeSum {
                input,
                denom,
                floored,
            } => {
                let y = &node.value;
                let slot = slot(grads, *input, g.len());
                if *floored {
                    for (o, x) in slot.iter_mut().zip(g) {
                        *o += x / denom;
                    }
                } else {
                    let gy = kernels::dot(g, y);
                    for (o, x) in slot.iter_mut().zip(g) {
                        *o += (x - gy) / denom;
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                if wants(*logits) {
                    let classes = self.nodes[logits.0].shape[1];
                    let scale = g[0] / *count as f64;
                    let slot = slot(grads, *logits, probs.len());
                    for (r, t) in targets.iter().enumerate() {
                        let Some(t) = *t else { continue };
                        let row = &mut slot[r * classes..(r + 1) * classes];
                        for (c, (o, p)) in row
                            .iter_mut()
                            .zip(&probs[r * classes..(r + 1) * classes])
                            .enumerate()
                        {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            *o += scale * (p - onehot);
                        }
                    }
                }
            }
            Op::Mse(p, t) => {
                let (pv, tv) = (val(*p), val(*t));
                let scale = 2.0 * g[0] / pv.len() as f64;
                for (v, sign) in [(*p, 1.0), (*t, -1.0)] {
                    if wants(v) {
                        let slot = slot(grads, v, pv.len());
                        for ((o, a), b) in slot.iter_mut().zip(pv).zip(tv) {
                            *o += sign * scale * (a - b);
                        }
                    }
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        probs: &[f64],
        g: &[f64],
        grads: &mut [Option<Vec<f64>>],
    ) {
        let AttentionLayout {
            batch,
            seq,
            heads,
            width,
            ..
        } = *layout;
        let dh = width / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (
            &self.nodes[q.0].value,
            &self.nodes[k.0].value,
            &self.nodes[v.0].value,
        );
        let n = batch * seq * width;
        let mut dq = vec![0.0; n];
        let mut dk = vec![0.0; n];
        let mut dv = vec![0.0; n];
        let mut dp = vec![0.0; seq];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                let pbase = (b * heads + h) * seq * seq;
                for i in 0..seq {
                    let ri = (b * seq + i) * width + off;
                    let gi = &g[ri..ri + dh];
                    let prow = &probs[pbase + i * seq..pbase + (i + 1) * seq];
                    for j in 0..seq {
                        let rj = (b * seq + j) * width + off;
                        dp[j] = kernels::dot(gi, &vv[rj..rj + dh]);
                        let p = prow[j];
                        for (o, x) in dv[rj..rj + dh].iter_mut().zip(gi) {
                            *o += p * x;
                        }
                    }
                    let pdp = kernels::dot(prow, &dp);
                    for j in 0..seq {
                        let ds = prow[j] * (dp[j] - pdp) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let rj = (b * seq + j) * width + off;
                        for t in 0..dh {
                            dq[ri + t] += ds * kv[rj + t];
                            dk[rj + t] += ds * qv[ri + t];
                        }
                    }
                }
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let slot = slot(grads, var, n);
                for (o, x) in slot.iter_mut().zip(d) {
                    *o += x;
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

fn add_into(
    grads: &mut [Option<Vec<f64>>],
    a: Var,
    g: &[f64],
    f: impl Fn(f64, f64) -> f64,
    input: &[f64],
) {
    let slot = slot(grads, a, g.len());
    for ((o, x), v) in slot.iter_mut().zip(g).zip(input) {
        *o += f(*x, *v);
    }
}

fn attention_forward(
    q: &[f64],
    k: &[f64],
    v: &[f64],
    layout: &AttentionLayout,
) -> (Vec<f64>, Vec<f64>) {
    let AttentionLayout {
        batch,
        seq,
        heads,
        width,
        ref key_mask,
    } = *layout;
    let dh = width / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = vec![0.0; batch * seq * width];
    let mut probs = vec![0.0; batch * heads * seq * seq];
    for b in 0..batch {
        for h in 0..heads {
            let off = h * dh;
            let pbase = (b * heads + h) * seq * seq;
            for i in 0..seq {
                let ri = (b * seq + i) * width + off;
                let prow = &mut probs[pbase + i * seq..pbase + (i + 1) * seq];
                let mut max = f64::NEG_INFINITY;
                for (j, p) in prow.iter_mut().enumerate() {
                    let keep = key_mask.as_ref().map_or(true, |m| m[b * seq + j]);
                    if keep {
                        let rj = (b * seq + j) * width + off;
                        *p = kernels::dot(&q[ri..ri + dh], &k[rj..rj + dh]) * scale;
                        max = if p.is_nan() || max.is_nan() { f64::NAN } else { max.max(*p) };
                    } else {
                        *p = f64::NEG_INFINITY;
                    }
                }
                if max == f64::NEG_INFINITY {
                    prow.iter_mut().for_each(|p| *p = 0.0);
                    continue;
                }
                let mut z = 0.0;
                for p in prow.iter_mut() {
                    *p = if *p == f64::NEG_INFINITY {
                        0.0
                    } else {
                        (*p - max).exp()
                    };
                    z += *p;
                }
                for p in prow.iter_mut() {
                    *p /= z;
                }
                let orow = &mut out[ri..ri + dh];
                for (j, p) in prow.iter().enumerate() {
                    if *p == 0.0 {
                        continue;
                    }
                    let rj = (b * seq + j) * width + off;
                    for (o, x) in orow.iter_mut().zip(&v[rj..rj + dh]) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    (out, probs)
}
