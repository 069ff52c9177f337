//! Define-by-run reverse-mode tape.
//!
//! Every operation evaluates eagerly and appends a node whose parents are
//! strictly earlier nodes, so the node list is already in topological order
//! and [`Tape::backward`] is a single reverse sweep. Nodes that do not
//! depend on any parameter leaf are marked constant and never receive an
//! adjoint.
//!
//! Broadcasting is limited to exact shape matches and scalar-vs-tensor.
//! Row-bias and channel-bias additions are separate named ops.

use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use super::kernels::{self, dims2};
use super::Tensor;
use crate::error::{Error, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

/// Handle to a node on a specific tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    index: usize,
}

/// A differentiable operation defined outside the tape, with its own adjoint.
pub trait CustomOp: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;

    fn forward(&self, inputs: &[&Tensor]) -> Result<Tensor>;

    /// Vector-Jacobian product: one entry per input, `None` where the input
    /// is not differentiable.
    fn backward(
        &self,
        inputs: &[&Tensor],
        output: &Tensor,
        grad: &Tensor,
    ) -> Result<Vec<Option<Tensor>>>;
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Bcast {
    Same,
    LeftScalar,
    RightScalar,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    AddScalar(usize),
    MulScalar(usize, f64),
    Matmul(usize, usize),
    AddBias(usize, usize),
    Conv2d(usize, usize),
    ChannelBias(usize, usize),
    Pad2d(usize, usize),
    MeanPool2d(usize, usize),
    GlobalMeanPool(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Concat(Vec<usize>, usize),
    Slice {
        x: usize,
        axis: usize,
        start: usize,
    },
    SelectRows(usize, Vec<usize>),
    Reshape(usize),
    Custom(Arc<dyn CustomOp>, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients of a scalar with respect to every parameter leaf of a tape,
/// keyed by the parameter id given to [`Tape::param`].
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: usize) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn take(&mut self, id: usize) -> Option<Tensor> {
        self.grads.remove(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (usize, &Tensor)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug)]
pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
    params: BTreeMap<usize, usize>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn zip_map(a: &Tensor, b: &Tensor, mode: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    match mode {
        Bcast::Same => Tensor::from_parts(
            a.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        ),
        Bcast::LeftScalar => {
            let s = a.item();
            Tensor::from_parts(b.shape().to_vec(), b.data().iter().map(|y| f(s, *y)).collect())
        }
        Bcast::RightScalar => {
            let s = b.item();
            Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x, s)).collect())
        }
    }
}

fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor::from_parts(a.shape().to_vec(), a.data().iter().map(|x| f(*x)).collect())
}

fn sum_all(t: &Tensor) -> Tensor {
    Tensor::from_parts(Vec::new(), vec![t.data().iter().sum()])
}

/// Splits a shape around `axis` into (outer, axis length, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            params: BTreeMap::new(),
        }
    }

    pub fn id(&self) -> u64 {
        self.id
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn check(&self, v: Var) -> Result<usize> {
        if v.tape != self.id {
            return Err(Error::ForeignVar {
                var_tape: v.tape,
                tape: self.id,
            });
        }
        Ok(v.index)
    }

    fn push(&mut self, op_name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let needs_grad = match &op {
            Op::Constant => false,
            Op::Param(_) => true,
            other => parents(other).iter().any(|&p| self.nodes[p].needs_grad),
        };
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var {
            tape: self.id,
            index: self.nodes.len() - 1,
        })
    }

    /// Current value of a node.
    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let i = self.check(v)?;
        Ok(&self.nodes[i].value)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push("constant", value, Op::Constant)
            .expect("tensors are finite by construction")
    }

    /// Registers a differentiable leaf under `id`. Ids must be unique per tape.
    pub fn param(&mut self, id: usize, value: Tensor) -> Result<Var> {
        if self.params.contains_key(&id) {
            return Err(Error::invalid(format!("parameter id {id} registered twice")));
        }
        let v = self.push("param", value, Op::Param(id))?;
        self.params.insert(id, v.index);
        Ok(v)
    }

    fn binary(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize, Bcast)> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let (ta, tb) = (&self.nodes[ia].value, &self.nodes[ib].value);
        let mode = if ta.shape() == tb.shape() {
            Bcast::Same
        } else if ta.is_scalar() {
            Bcast::LeftScalar
        } else if tb.is_scalar() {
            Bcast::RightScalar
        } else {
            return Err(shape_err(op, ta, tb));
        };
        Ok((ia, ib, mode))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, m) = self.binary("add", a, b)?;
        let v = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, m, |x, y| x + y);
        self.push("add", v, Op::Add(ia, ib, m))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, m) = self.binary("sub", a, b)?;
        let v = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, m, |x, y| x - y);
        self.push("sub", v, Op::Sub(ia, ib, m))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib, m) = self.binary("mul", a, b)?;
        let v = zip_map(&self.nodes[ia].value, &self.nodes[ib].value, m, |x, y| x * y);
        self.push("mul", v, Op::Mul(ia, ib, m))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let i = self.check(a)?;
        let v = map(&self.nodes[i].value, |x| x + s);
        self.push("add_scalar", v, Op::AddScalar(i))
    }

    pub fn mul_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let i = self.check(a)?;
        let v = map(&self.nodes[i].value, |x| x * s);
        self.push("mul_scalar", v, Op::MulScalar(i, s))
    }

    /// `[m, k] × [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = kernels::matmul_t(&self.nodes[ia].value, &self.nodes[ib].value, false, false)?;
        self.push("matmul", v, Op::Matmul(ia, ib))
    }

    /// `x: [rows, f]` plus `bias: [f]` added to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        let [_, f] = dims2(tx, "add_bias", tb)?;
        if tb.shape() != [f] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_exact_mut(f) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("add_bias", v, Op::AddBias(ix, ib))
    }

    /// Valid cross-correlation, stride 1. See [`kernels::conv2d_valid`].
    pub fn conv2d(&mut self, x: Var, w: Var) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let v = kernels::conv2d_valid(&self.nodes[ix].value, &self.nodes[iw].value)?;
        self.push("conv2d", v, Op::Conv2d(ix, iw))
    }

    /// `x: [B, C, H, W]` plus `bias: [C]` per channel.
    pub fn add_channel_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (ix, ib) = (self.check(x)?, self.check(bias)?);
        let (tx, tb) = (&self.nodes[ix].value, &self.nodes[ib].value);
        if tx.rank() != 4 || tb.shape() != [tx.shape()[1]] {
            return Err(shape_err("add_channel_bias", tx, tb));
        }
        let c = tx.shape()[1];
        let hw = tx.shape()[2] * tx.shape()[3];
        let mut out = tx.data().to_vec();
        for (p, plane) in out.chunks_exact_mut(hw).enumerate() {
            let b = tb.data()[p % c];
            for o in plane {
                *o += b;
            }
        }
        let v = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push("add_channel_bias", v, Op::ChannelBias(ix, ib))
    }

    pub fn pad2d(&mut self, x: Var, pad: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = kernels::pad2d(&self.nodes[i].value, pad)?;
        self.push("pad2d", v, Op::Pad2d(i, pad))
    }

    /// Non-overlapping `k × k` mean pooling.
    pub fn mean_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let i = self.check(x)?;
        let v = kernels::mean_pool2d(&self.nodes[i].value, k)?;
        self.push("mean_pool2d", v, Op::MeanPool2d(i, k))
    }

    /// `[B, C, H, W]` → `[B, C]`.
    pub fn global_mean_pool(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = kernels::global_mean_pool(&self.nodes[i].value)?;
        self.push("global_mean_pool", v, Op::GlobalMeanPool(i))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, |x| x.max(0.0));
        self.push("relu", v, Op::Relu(i))
    }

    /// Elementwise clamp to `[lo, hi]`; no gradient where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, |x| x.clamp(lo, hi));
        self.push("clamp", v, Op::Clamp(i, lo, hi))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, sigmoid);
        self.push("sigmoid", v, Op::Sigmoid(i))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, f64::exp);
        self.push("exp", v, Op::Exp(i))
    }

    /// Natural log; non-positive inputs surface as a non-finite error.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, f64::ln);
        self.push("log", v, Op::Log(i))
    }

    /// Absolute value; the subgradient at zero is taken as zero.
    pub fn abs(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = map(&self.nodes[i].value, f64::abs);
        self.push("abs", v, Op::Abs(i))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let v = sum_all(&self.nodes[i].value);
        self.push("sum", v, Op::Sum(i))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        let v = Tensor::from_parts(Vec::new(), vec![t.data().iter().sum::<f64>() / t.len() as f64]);
        self.push("mean", v, Op::Mean(i))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("concat of zero tensors"));
        }
        let idx = parts.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let first = &self.nodes[idx[0]].value;
        if axis >= first.rank() {
            return Err(Error::invalid(format!(
                "concat axis {axis} out of range for rank {}",
                first.rank()
            )));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for &i in &idx {
            let t = &self.nodes[i].value;
            let compatible = t.rank() == first.rank()
                && t.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", first, t));
            }
            shape[axis] += t.shape()[axis];
        }
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &i in &idx {
                let t = &self.nodes[i].value;
                let chunk = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let v = Tensor::from_parts(shape, out);
        self.push("concat", v, Op::Concat(idx, axis))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        if axis >= t.rank() || start >= end || end > t.shape()[axis] {
            return Err(Error::invalid(format!(
                "slice {start}..{end} on axis {axis} of shape {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            out.extend_from_slice(&t.data()[(o * len + start) * inner..(o * len + end) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = end - start;
        let v = Tensor::from_parts(shape, out);
        self.push("slice", v, Op::Slice { x: i, axis, start })
    }

    /// Gathers rows (entries along axis 0) in the given order; repeats allowed.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let t = &self.nodes[i].value;
        if t.rank() == 0 || rows.is_empty() || rows.iter().any(|&r| r >= t.shape()[0]) {
            return Err(Error::invalid(format!(
                "row selection {rows:?} out of range for shape {:?}",
                t.shape()
            )));
        }
        let inner: usize = t.shape()[1..].iter().product();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&t.data()[r * inner..(r + 1) * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = rows.len();
        let v = Tensor::from_parts(shape, out);
        self.push("select_rows", v, Op::SelectRows(i, rows.to_vec()))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let i = self.check(x)?;
        let v = self.nodes[i].value.clone().reshape(shape.to_vec())?;
        self.push("reshape", v, Op::Reshape(i))
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp>, inputs: &[Var]) -> Result<Var> {
        let idx = inputs.iter().map(|&p| self.check(p)).collect::<Result<Vec<_>>>()?;
        let values: Vec<&Tensor> = idx.iter().map(|&i| &self.nodes[i].value).collect();
        let v = op.forward(&values)?;
        let name = op.name();
        self.push(name, v, Op::Custom(op, idx))
    }

    /// Reverse sweep from a scalar node. Every registered parameter receives
    /// an entry; parameters the output does not depend on get zeros.
    pub fn backward(&self, output: Var) -> Result<Gradients> {
        let out = self.check(output)?;
        let out_value = &self.nodes[out].value;
        if !out_value.is_scalar() {
            return Err(Error::NotScalar(out_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = Vec::new();
        adj.resize_with(out + 1, || None);
        adj[out] = Some(Tensor::from_parts(out_value.shape().to_vec(), vec![1.0]));

        let mut grads = BTreeMap::new();
        for i in (0..=out).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if let Op::Param(id) = node.op {
                if !g.all_finite() {
                    return Err(Error::NonFinite { op: "backward" });
                }
                grads.insert(id, g);
                continue;
            }
            self.propagate(i, &g, &mut adj)?;
        }
        for (&id, &node) in &self.params {
            grads
                .entry(id)
                .or_insert_with(|| Tensor::zeros(self.nodes[node].value.shape()));
        }
        Ok(Gradients { grads })
    }

    fn wants(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    fn propagate(&self, i: usize, g: &Tensor, adj: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let val = |j: usize| &self.nodes[j].value;
        match &node.op {
            Op::Constant | Op::Param(_) => {}
            &Op::Add(a, b, m) => {
                if self.wants(a) {
                    accumulate(adj, a, reduce_for(g, m, Side::Left, val(a).shape()));
                }
                if self.wants(b) {
                    accumulate(adj, b, reduce_for(g, m, Side::Right, val(b).shape()));
                }
            }
            &Op::Sub(a, b, m) => {
                if self.wants(a) {
                    accumulate(adj, a, reduce_for(g, m, Side::Left, val(a).shape()));
                }
                if self.wants(b) {
                    accumulate(adj, b, map(&reduce_for(g, m, Side::Right, val(b).shape()), |x| -x));
                }
            }
            &Op::Mul(a, b, m) => {
                if self.wants(a) {
                    let ga = zip_map(g, val(b), rhs_mode(m), |g, y| g * y);
                    accumulate(adj, a, reduce_for(&ga, m, Side::Left, val(a).shape()));
                }
                if self.wants(b) {
                    let gb = zip_map(g, val(a), lhs_as_rhs(m), |g, x| g * x);
                    accumulate(adj, b, reduce_for(&gb, m, Side::Right, val(b).shape()));
                }
            }
            &Op::AddScalar(a) => accumulate(adj, a, g.clone()),
            &Op::MulScalar(a, s) => accumulate(adj, a, map(g, |x| x * s)),
            &Op::Matmul(a, b) => {
                if self.wants(a) {
                    accumulate(adj, a, kernels::matmul_t(g, val(b), false, true)?);
                }
                if self.wants(b) {
                    accumulate(adj, b, kernels::matmul_t(val(a), g, true, false)?);
                }
            }
            &Op::AddBias(x, b) => {
                if self.wants(x) {
                    accumulate(adj, x, g.clone());
                }
                if self.wants(b) {
                    let f = val(b).len();
                    let mut gb = vec![0.0; f];
                    for row in g.data().chunks_exact(f) {
                        for (o, v) in gb.iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                    accumulate(adj, b, Tensor::from_parts(vec![f], gb));
                }
            }
            &Op::Conv2d(x, w) => {
                let (gx, gw) =
                    kernels::conv2d_backward(val(x), val(w), g, self.wants(x), self.wants(w));
                if let Some(gx) = gx {
                    accumulate(adj, x, gx);
                }
                if let Some(gw) = gw {
                    accumulate(adj, w, gw);
                }
            }
            &Op::ChannelBias(x, b) => {
                if self.wants(x) {
                    accumulate(adj, x, g.clone());
                }
                if self.wants(b) {
                    let c = val(b).len();
                    let hw = g.shape()[2] * g.shape()[3];
                    let mut gb = vec![0.0; c];
                    for (p, plane) in g.data().chunks_exact(hw).enumerate() {
                        gb[p % c] += plane.iter().sum::<f64>();
                    }
                    accumulate(adj, b, Tensor::from_parts(vec![c], gb));
                }
            }
            &Op::Pad2d(x, pad) => {
                accumulate(adj, x, kernels::pad2d_backward(g, val(x).shape(), pad));
            }
            &Op::MeanPool2d(x, k) => {
                accumulate(adj, x, kernels::mean_pool2d_backward(g, val(x).shape(), k));
            }
            &Op::GlobalMeanPool(x) => {
                accumulate(adj, x, kernels::global_mean_pool_backward(g, val(x).shape()));
            }
            &Op::Relu(x) => {
                let gx = zip_map(g, val(x), Bcast::Same, |g, x| if x > 0.0 { g } else { 0.0 });
                accumulate(adj, x, gx);
            }
            &Op::Clamp(x, lo, hi) => {
                let gx = zip_map(g, val(x), Bcast::Same, |g, x| if x > lo && x < hi { g } else { 0.0 });
                accumulate(adj, x, gx);
            }
            &Op::Sigmoid(x) => {
                let gx = zip_map(g, &node.value, Bcast::Same, |g, y| g * y * (1.0 - y));
                accumulate(adj, x, gx);
            }
            &Op::Exp(x) => {
                let gx = zip_map(g, &node.value, Bcast::Same, |g, y| g * y);
                accumulate(adj, x, gx);
            }
            &Op::Log(x) => {
                let gx = zip_map(g, val(x), Bcast::Same, |g, x| g / x);
                accumulate(adj, x, gx);
            }
            &Op::Abs(x) => {
                let gx = zip_map(g, val(x), Bcast::Same, |g, x| {
                    if x > 0.0 {
                        g
                    } else if x < 0.0 {
                        -g
                    } else {
                        0.0
                    }
                });
                accumulate(adj, x, gx);
            }
            &Op::Sum(x) => {
                accumulate(adj, x, Tensor::full(val(x).shape(), g.item()));
            }
            &Op::Mean(x) => {
                let n = val(x).len() as f64;
                accumulate(adj, x, Tensor::full(val(x).shape(), g.item() / n));
            }
            Op::Concat(idx, axis) => {
                let (outer, total, inner) = split_axis(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in idx {
                    let len = val(p).shape()[*axis];
                    if self.wants(p) {
                        let mut out = Vec::with_capacity(val(p).len());
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            out.extend_from_slice(&g.data()[base..base + len * inner]);
                        }
                        accumulate(adj, p, Tensor::from_parts(val(p).shape().to_vec(), out));
                    }
                    offset += len;
                }
            }
            &Op::Slice { x, axis, start } => {
                let (outer, len, inner) = split_axis(val(x).shape(), axis);
                let width = node.value.shape()[axis];
                let mut out = vec![0.0; val(x).len()];
                for o in 0..outer {
                    let dst = (o * len + start) * inner;
                    let src = o * width * inner;
                    out[dst..dst + width * inner]
                        .copy_from_slice(&g.data()[src..src + width * inner]);
                }
                accumulate(adj, x, Tensor::from_parts(val(x).shape().to_vec(), out));
            }
            Op::SelectRows(x, rows) => {
                let x = *x;
                let inner: usize = val(x).shape()[1..].iter().product();
                let mut out = vec![0.0; val(x).len()];
                for (k, &r) in rows.iter().enumerate() {
                    for (o, v) in out[r * inner..(r + 1) * inner]
                        .iter_mut()
                        .zip(&g.data()[k * inner..(k + 1) * inner])
                    {
                        *o += v;
                    }
                }
                accumulate(adj, x, Tensor::from_parts(val(x).shape().to_vec(), out));
            }
            &Op::Reshape(x) => {
                accumulate(adj, x, Tensor::from_parts(val(x).shape().to_vec(), g.data().to_vec()));
            }
            Op::Custom(op, idx) => {
                let inputs: Vec<&Tensor> = idx.iter().map(|&j| val(j)).collect();
                let grads = op.backward(&inputs, &node.value, g)?;
                if grads.len() != idx.len() {
                    return Err(Error::invalid(format!(
                        "custom op {} returned {} adjoints for {} inputs",
                        op.name(),
                        grads.len(),
                        idx.len()
                    )));
                }
                for (&p, gp) in idx.iter().zip(grads) {
                    if let (true, Some(gp)) = (self.wants(p), gp) {
                        if gp.shape() != val(p).shape() {
                            return Err(shape_err(op.name(), &gp, val(p)));
                        }
                        accumulate(adj, p, gp);
                    }
                }
            }
        }
        Ok(())
    }
}

fn parents(op: &Op) -> Vec<usize> {
    match op {
        Op::Constant | Op::Param(_) => Vec::new(),
        &Op::Add(a, b, _)
        | &Op::Sub(a, b, _)
        | &Op::Mul(a, b, _)
        | &Op::Matmul(a, b)
        | &Op::AddBias(a, b)
        | &Op::Conv2d(a, b)
        | &Op::ChannelBias(a, b) => vec![a, b],
        &Op::AddScalar(a)
        | &Op::MulScalar(a, _)
        | &Op::Pad2d(a, _)
        | &Op::MeanPool2d(a, _)
        | &Op::GlobalMeanPool(a)
        | &Op::Relu(a)
        | &Op::Clamp(a, ..)
        | &Op::Sigmoid(a)
        | &Op::Exp(a)
        | &Op::Log(a)
        | &Op::Abs(a)
        | &Op::Sum(a)
        | &Op::Mean(a)
        | &Op::Slice { x: a, .. }
        | &Op::SelectRows(a, _)
        | &Op::Reshape(a) => vec![a],
        Op::Concat(idx, _) | Op::Custom(_, idx) => idx.clone(),
    }
}

#[derive(Clone, Copy)]
enum Side {
    Left,
    Right,
}

/// Collapses an output-shaped adjoint onto an operand that was broadcast
/// from a scalar.
fn reduce_for(g: &Tensor, mode: Bcast, side: Side, shape: &[usize]) -> Tensor {
    match (mode, side) {
        (Bcast::LeftScalar, Side::Left) | (Bcast::RightScalar, Side::Right) => {
            Tensor::from_parts(shape.to_vec(), vec![g.data().iter().sum()])
        }
        _ => g.clone(),
    }
}

// For `g * other`, the other operand is a scalar exactly when it was broadcast.
fn rhs_mode(m: Bcast) -> Bcast {
    match m {
        Bcast::RightScalar => Bcast::RightScalar,
        _ => Bcast::Same,
    }
}

fn lhs_as_rhs(m: Bcast) -> Bcast {
    match m {
        Bcast::LeftScalar => Bcast::RightScalar,
        _ => Bcast::Same,
    }
}

fn accumulate(adj: &mut [Option<Tensor>], i: usize, g: Tensor) {
    match &mut adj[i] {
        Some(existing) => {
            for (a, b) in existing.data_mut().iter_mut().zip(g.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
