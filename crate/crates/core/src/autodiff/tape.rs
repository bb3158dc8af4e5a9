use std::collections::HashMap;
use std::sync::atomic::{AtomicU32, Ordering};

use smallvec::{smallvec, SmallVec};

use super::kernels;
use super::tensor::Tensor;
use super::AutodiffError;

type Inputs = SmallVec<[Var; 2]>;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

#[derive(Clone, Debug)]
pub(crate) enum Op {
    Leaf,
    Const,
    Add,
    Sub,
    Mul,
    Div,
    Scale(f64),
    AddScalar,
    MatMul { ta: bool, tb: bool },
    Sigmoid,
    Tanh,
    Exp,
    Log,
    SumAll,
    ExpandScalar,
    Broadcast,
    SumLeading,
    RowSum,
    ColExpand,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, end: usize },
    Pad { axis: usize, before: usize },
    Reshape,
    Softmax,
}

impl Op {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Const => "constant",
            Op::Add => "add",
            Op::Sub => "subtract",
            Op::Mul => "multiply",
            Op::Div => "divide",
            Op::Scale(_) => "scale",
            Op::AddScalar => "add_scalar",
            Op::MatMul { .. } => "matmul",
            Op::Sigmoid => "sigmoid",
            Op::Tanh => "tanh",
            Op::Exp => "exp",
            Op::Log => "log",
            Op::SumAll => "sum",
            Op::ExpandScalar => "expand_scalar",
            Op::Broadcast => "broadcast",
            Op::SumLeading => "sum_leading",
            Op::RowSum => "row_sum",
            Op::ColExpand => "col_expand",
            Op::Concat { .. } => "concat",
            Op::Slice { .. } => "slice",
            Op::Pad { .. } => "pad",
            Op::Reshape => "reshape",
            Op::Softmax => "softmax",
        }
    }
}

struct Entry {
    op: Op,
    inputs: Inputs,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients of one output with respect to every leaf of a tape.
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    grads: HashMap<Var, Tensor>,
}

impl GradMap {
    pub fn get(&self, leaf: Var) -> Option<&Tensor> {
        self.grads.get(&leaf)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Append-only record of primitive operations.
///
/// Every primitive appends one entry holding its forward value, so entries are
/// topologically ordered by construction. Gradient computations are themselves
/// expressed in primitives: with `create_graph` they stay on the tape and can
/// be differentiated again, otherwise they are discarded once the gradient
/// values have been read out.
pub struct Tape {
    id: u32,
    entries: Vec<Entry>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() < long.len() && long[long.len() - short.len()..] == *short
}

impl Tape {
    pub fn new() -> Self {
        Self {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            entries: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// A differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.record(Op::Leaf, Inputs::new(), value, true)
    }

    /// An input that takes part in the computation but receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.record(Op::Const, Inputs::new(), value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.entries[v.index()].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.entries[v.index()].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.entries[v.index()].requires_grad
    }

    pub fn is_leaf(&self, v: Var) -> bool {
        matches!(self.entries[v.index()].op, Op::Leaf)
    }

    /// Drops every entry recorded after the first `len`. Handles to dropped
    /// entries must not be used again.
    pub(crate) fn truncate(&mut self, len: usize) {
        self.entries.truncate(len);
    }

    /// Number of entries whose inputs include `v`.
    pub fn consumers(&self, v: Var) -> usize {
        self.entries
            .iter()
            .filter(|e| e.inputs.contains(&v))
            .count()
    }

    fn record(&mut self, op: Op, inputs: Inputs, value: Tensor, requires_grad: bool) -> Var {
        let index = u32::try_from(self.entries.len()).expect("tape overflow");
        self.entries.push(Entry {
            op,
            inputs,
            value,
            requires_grad,
        });
        Var {
            tape: self.id,
            index,
        }
    }

    fn push(&mut self, op: Op, inputs: Inputs, value: Tensor) -> Var {
        let requires_grad = inputs.iter().any(|v| self.entries[v.index()].requires_grad);
        self.record(op, inputs, value, requires_grad)
    }

    fn check(&self, v: Var) -> Result<(), AutodiffError> {
        if v.tape != self.id || v.index() >= self.entries.len() {
            return Err(AutodiffError::NotOnTape);
        }
        Ok(())
    }

    fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: a.to_vec(),
            rhs: b.to_vec(),
        }
    }

    // ---- elementwise ----------------------------------------------------

    fn elementwise(
        &mut self,
        op: Op,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (a, b) = if sa == sb {
            (a, b)
        } else if is_suffix(&sb, &sa) {
            (a, self.broadcast_to(b, &sa)?)
        } else if is_suffix(&sa, &sb) {
            (self.broadcast_to(a, &sb)?, b)
        } else {
            return Err(Self::mismatch(op.name(), &sa, &sb));
        };
        let value = kernels::zip_map(self.value(a), self.value(b), f);
        Ok(self.push(op, smallvec![a, b], value))
    }

    /// Elementwise sum; a lower-rank operand is expanded along leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(Op::Add, a, b, |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(Op::Sub, a, b, |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(Op::Mul, a, b, |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.elementwise(Op::Div, a, b, |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let value = kernels::map(self.value(a), |x| c * x);
        Ok(self.push(Op::Scale(c), smallvec![a], value))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let value = kernels::map(self.value(a), |x| x + c);
        Ok(self.push(Op::AddScalar, smallvec![a], value))
    }

    fn unary(&mut self, op: Op, a: Var, f: impl Fn(f64) -> f64) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let value = kernels::map(self.value(a), f);
        Ok(self.push(op, smallvec![a], value))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Sigmoid, a, kernels::sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Tanh, a, f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Exp, a, f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.unary(Op::Log, a, f64::ln)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a) · op(b)` where `ta`/`tb` select a transpose of each operand.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var, AutodiffError> {
        self.check(a)?;
        self.check(b)?;
        let (va, vb) = (self.value(a), self.value(b));
        if va.rank() != 2 || vb.rank() != 2 {
            return Err(Self::mismatch("matmul", va.shape(), vb.shape()));
        }
        let (_, k1) = kernels::op_dims(va, ta);
        let (k2, _) = kernels::op_dims(vb, tb);
        if k1 != k2 {
            return Err(Self::mismatch("matmul", va.shape(), vb.shape()));
        }
        let value = kernels::matmul(va, vb, ta, tb);
        Ok(self.push(Op::MatMul { ta, tb }, smallvec![a, b], value))
    }

    /// `x · wᵀ + b` for a batch `x` of shape `[B, in]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var, AutodiffError> {
        let xw = self.matmul_t(x, weight, false, true)?;
        self.add(xw, bias)
    }

    // ---- reductions and expansions --------------------------------------

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let total = self.value(a).data().iter().sum();
        Ok(self.push(Op::SumAll, smallvec![a], Tensor::scalar(total)))
    }

    /// Fills `shape` with the single value of `a`.
    pub fn expand_scalar(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if self.value(a).numel() != 1 {
            return Err(Self::mismatch("expand_scalar", self.shape(a), shape));
        }
        let value = Tensor::full(shape, self.value(a).item());
        Ok(self.push(Op::ExpandScalar, smallvec![a], value))
    }

    /// Repeats `a` along new leading axes; `a`'s shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        if !is_suffix(self.shape(a), shape) {
            return Err(Self::mismatch("broadcast", self.shape(a), shape));
        }
        let value = kernels::broadcast(self.value(a), shape);
        Ok(self.push(Op::Broadcast, smallvec![a], value))
    }

    /// Sums leading axes away so the result has `shape`.
    pub fn sum_leading(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        if !is_suffix(shape, self.shape(a)) {
            return Err(Self::mismatch("sum_leading", self.shape(a), shape));
        }
        let value = kernels::sum_leading(self.value(a), shape);
        Ok(self.push(Op::SumLeading, smallvec![a], value))
    }

    /// Sum over the last axis, keeping it with length 1.
    pub fn row_sum(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let value = kernels::row_sum(self.value(a));
        Ok(self.push(Op::RowSum, smallvec![a], value))
    }

    /// Repeats a last axis of length 1 to length `cols`.
    pub fn col_expand(&mut self, a: Var, cols: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if self.shape(a).last() != Some(&1) || cols == 0 {
            return Err(Self::mismatch("col_expand", self.shape(a), &[cols]));
        }
        let value = kernels::col_expand(self.value(a), cols);
        Ok(self.push(Op::ColExpand, smallvec![a], value))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let value = kernels::softmax(self.value(a));
        Ok(self.push(Op::Softmax, smallvec![a], value))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or_else(|| {
            AutodiffError::InvalidShape("concat of zero tensors".to_string())
        })?;
        for &p in parts {
            self.check(p)?;
        }
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(Self::mismatch("concat", &s0, &[axis]));
        }
        for &p in &parts[1..] {
            let s = self.shape(p);
            let compatible = s.len() == s0.len()
                && s.iter()
                    .zip(&s0)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Self::mismatch("concat", &s0, s));
            }
        }
        if parts.len() == 1 {
            return Ok(first);
        }
        let values: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = kernels::concat(&values, axis);
        Ok(self.push(Op::Concat { axis }, SmallVec::from_slice(parts), value))
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            self.check(p)?;
            let mut shape = vec![1];
            shape.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &shape)?);
        }
        self.concat(&lifted, 0)
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        let shape = self.shape(a);
        if axis >= shape.len() || start >= end || end > shape[axis] {
            return Err(Self::mismatch("slice", shape, &[axis, start, end]));
        }
        if start == 0 && end == shape[axis] {
            return Ok(a);
        }
        let value = kernels::slice(self.value(a), axis, start, end);
        Ok(self.push(Op::Slice { axis, start, end }, smallvec![a], value))
    }

    /// Zero padding along `axis`.
    pub fn pad(&mut self, a: Var, axis: usize, before: usize, after: usize) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if axis >= self.shape(a).len() {
            return Err(Self::mismatch("pad", self.shape(a), &[axis]));
        }
        if before == 0 && after == 0 {
            return Ok(a);
        }
        let value = kernels::pad(self.value(a), axis, before, after);
        Ok(self.push(Op::Pad { axis, before }, smallvec![a], value))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        self.check(a)?;
        if self.shape(a) == shape {
            return Ok(a);
        }
        let value = self
            .value(a)
            .reshaped(shape)
            .map_err(|_| Self::mismatch("reshape", self.shape(a), shape))?;
        Ok(self.push(Op::Reshape, smallvec![a], value))
    }

    // ---- differentiation ------------------------------------------------

    /// Vector-Jacobian product of entry `node` with respect to its `k`-th input.
    fn vjp(&mut self, node: usize, k: usize, g: Var) -> Result<Var, AutodiffError> {
        let op = self.entries[node].op.clone();
        let inputs = self.entries[node].inputs.clone();
        let out = Var {
            tape: self.id,
            index: node as u32,
        };
        let x = inputs[k];
        let in_shape = self.shape(x).to_vec();
        match op {
            Op::Leaf | Op::Const => unreachable!("leaves have no inputs"),
            Op::Add | Op::AddScalar => Ok(g),
            Op::Sub => {
                if k == 0 {
                    Ok(g)
                } else {
                    self.neg(g)
                }
            }
            Op::Mul => self.mul(g, inputs[1 - k]),
            Op::Div => {
                if k == 0 {
                    self.div(g, inputs[1])
                } else {
                    let go = self.mul(g, out)?;
                    let q = self.div(go, inputs[1])?;
                    self.neg(q)
                }
            }
            Op::Scale(c) => self.scale(g, c),
            Op::MatMul { ta, tb } => {
                let (a, b) = (inputs[0], inputs[1]);
                match (k, ta, tb) {
                    (0, false, false) => self.matmul_t(g, b, false, true),
                    (1, false, false) => self.matmul_t(a, g, true, false),
                    (0, false, true) => self.matmul_t(g, b, false, false),
                    (1, false, true) => self.matmul_t(g, a, true, false),
                    (0, true, false) => self.matmul_t(b, g, false, true),
                    (1, true, false) => self.matmul_t(a, g, false, false),
                    (0, true, true) => self.matmul_t(b, g, true, true),
                    (_, true, true) => self.matmul_t(g, a, true, true),
                    _ => unreachable!(),
                }
            }
            Op::Sigmoid => {
                let one_minus = self.scale(out, -1.0)?;
                let one_minus = self.add_scalar(one_minus, 1.0)?;
                let d = self.mul(out, one_minus)?;
                self.mul(g, d)
            }
            Op::Tanh => {
                let sq = self.mul(out, out)?;
                let d = self.scale(sq, -1.0)?;
                let d = self.add_scalar(d, 1.0)?;
                self.mul(g, d)
            }
            Op::Exp => self.mul(g, out),
            Op::Log => self.div(g, x),
            Op::SumAll => self.expand_scalar(g, &in_shape),
            Op::ExpandScalar => self.sum(g),
            Op::Broadcast => self.sum_leading(g, &in_shape),
            Op::SumLeading => self.broadcast_to(g, &in_shape),
            Op::RowSum => {
                let cols = *in_shape.last().unwrap();
                self.col_expand(g, cols)
            }
            Op::ColExpand => self.row_sum(g),
            Op::Concat { axis } => {
                let offset: usize = inputs[..k].iter().map(|&v| self.shape(v)[axis]).sum();
                self.slice(g, axis, offset, offset + in_shape[axis])
            }
            Op::Slice { axis, start, end } => {
                let after = in_shape[axis] - end;
                self.pad(g, axis, start, after)
            }
            Op::Pad { axis, before } => self.slice(g, axis, before, before + in_shape[axis]),
            Op::Reshape => self.reshape(g, &in_shape),
            Op::Softmax => {
                let gy = self.mul(g, out)?;
                let s = self.row_sum(gy)?;
                let cols = *in_shape.last().unwrap();
                let s = self.col_expand(s, cols)?;
                let centered = self.sub(g, s)?;
                self.mul(out, centered)
            }
        }
    }

    /// Marks entries up to `output` that lie on a path from a target.
    fn relevance(&self, output: usize, is_target: impl Fn(usize) -> bool) -> Vec<bool> {
        let mut relevant = vec![false; output + 1];
        for i in 0..=output {
            let e = &self.entries[i];
            relevant[i] = e.requires_grad
                && (is_target(i) || e.inputs.iter().any(|v| relevant[v.index()]));
        }
        relevant
    }

    fn adjoints(
        &mut self,
        output: Var,
        seed: Tensor,
        relevant: &[bool],
    ) -> Result<Vec<Option<Var>>, AutodiffError> {
        let out = output.index();
        let mut adj: Vec<Option<Var>> = vec![None; out + 1];
        if !relevant[out] {
            return Ok(adj);
        }
        adj[out] = Some(self.constant(seed));
        for i in (0..=out).rev() {
            let Some(g) = adj[i] else { continue };
            if !relevant[i] {
                continue;
            }
            let n_inputs = self.entries[i].inputs.len();
            for k in 0..n_inputs {
                let input = self.entries[i].inputs[k].index();
                if !relevant[input] {
                    continue;
                }
                let contrib = self.vjp(i, k, g)?;
                adj[input] = Some(match adj[input] {
                    None => contrib,
                    Some(prev) => self.add(prev, contrib)?,
                });
            }
        }
        Ok(adj)
    }

    fn seed_for(&self, output: Var, seed: Option<&Tensor>) -> Result<Tensor, AutodiffError> {
        let shape = self.shape(output);
        match seed {
            Some(s) if s.shape() == shape => Ok(s.clone()),
            Some(s) => Err(Self::mismatch("backward", shape, s.shape())),
            None if self.value(output).numel() == 1 => Ok(Tensor::full(shape, 1.0)),
            None => Err(AutodiffError::NonScalarOutput(shape.to_vec())),
        }
    }

    /// Gradients of `output` with respect to every leaf on the tape.
    ///
    /// Leaves that do not influence `output` map to exact zeros. The tape is
    /// left exactly as it was found.
    pub fn backward(&mut self, output: Var, seed: Option<&Tensor>) -> Result<GradMap, AutodiffError> {
        self.check(output)?;
        let seed = self.seed_for(output, seed)?;
        let mark = self.entries.len();
        let relevant = self.relevance(output.index(), |i| matches!(self.entries[i].op, Op::Leaf));
        let adj = self.adjoints(output, seed, &relevant)?;
        let mut grads = HashMap::new();
        for (i, e) in self.entries[..mark].iter().enumerate() {
            if !matches!(e.op, Op::Leaf) {
                continue;
            }
            let g = match adj.get(i).copied().flatten() {
                Some(v) => self.entries[v.index()].value.clone(),
                None => Tensor::zeros(e.value.shape()),
            };
            grads.insert(
                Var {
                    tape: self.id,
                    index: i as u32,
                },
                g,
            );
        }
        self.entries.truncate(mark);
        Ok(GradMap { grads })
    }

    /// Gradient values of a scalar `output` with respect to `wrt`.
    ///
    /// `wrt` may name any recorded entries, not just leaves. Entries that do
    /// not influence `output` get zeros.
    pub fn grad_values(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Tensor>, AutodiffError> {
        let mark = self.entries.len();
        let vars = self.grad_vars(output, wrt)?;
        let values = vars.iter().map(|&v| self.value(v).clone()).collect();
        self.entries.truncate(mark);
        Ok(values)
    }

    /// Gradients of a scalar `output` with respect to `wrt`, recorded on the
    /// tape when `create_graph` is set so they can be differentiated again.
    /// Without it the results are constants.
    pub fn grad(&mut self, output: Var, wrt: &[Var], create_graph: bool) -> Result<Vec<Var>, AutodiffError> {
        if create_graph {
            self.grad_vars(output, wrt)
        } else {
            let values = self.grad_values(output, wrt)?;
            Ok(values.into_iter().map(|t| self.constant(t)).collect())
        }
    }

    fn grad_vars(&mut self, output: Var, wrt: &[Var]) -> Result<Vec<Var>, AutodiffError> {
        self.check(output)?;
        for &w in wrt {
            self.check(w)?;
        }
        let seed = self.seed_for(output, None)?;
        let out = output.index();
        let mut target = vec![false; out + 1];
        for w in wrt {
            if w.index() <= out {
                target[w.index()] = true;
            }
        }
        let relevant = self.relevance(out, |i| target[i]);
        let adj = self.adjoints(output, seed, &relevant)?;
        let mut result = Vec::with_capacity(wrt.len());
        for &w in wrt {
            let g = adj.get(w.index()).copied().flatten();
            result.push(match g {
                Some(v) => v,
                None => {
                    let zeros = Tensor::zeros(self.shape(w));
                    self.constant(zeros)
                }
            });
        }
        Ok(result)
    }
}
