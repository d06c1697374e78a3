use std::cell::{Cell, Ref, RefCell};

use super::kernels::{self, ConvGeom};
use super::{reduce_broadcast, split_axis, ParamId, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Arithmetic precision of values recorded on a tape.
///
/// `F32` rounds every recorded value to the nearest single-precision number;
/// storage and gradients remain `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Precision {
    #[default]
    F64,
    F32,
}

/// Operation tag of a tape node. Indices refer to earlier nodes.
#[derive(Clone, Debug)]
pub enum Op {
    Leaf,
    Param(ParamId),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Softplus(usize),
    Relu(usize),
    Pow(usize, f64),
    AddScalar(usize),
    MulScalar(usize, f64),
    Clamp { a: usize, lo: f64, hi: f64 },
    Matmul(usize, usize),
    SumAll(usize),
    SumAxis { a: usize, axis: usize },
    Reshape(usize),
    BroadcastTo(usize),
    Concat { parts: Vec<usize>, axis: usize },
    Slice { a: usize, axis: usize, start: usize },
    Softmax { a: usize, axis: usize },
    LogSoftmax { a: usize, axis: usize },
    Conv2d { x: usize, w: usize },
    AvgPool2(usize),
    CumProd(usize),
    Gather { a: usize, index: Vec<usize> },
    PermuteRows { a: usize, perm: Vec<usize> },
    /// Kumaraswamy inverse-CDF transform of fixed uniform noise.
    Kumaraswamy { a: usize, b: usize, noise: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of a forward pass.
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    nonfinite: Cell<usize>,
    grad_enabled: bool,
    precision: Precision,
    /// Values cut by [`Var::detach`], in call order.
    detached: RefCell<Vec<Tensor>>,
    /// Values substituted for successive detach calls.
    replay: Option<Vec<Tensor>>,
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    pub(crate) tape: &'t Tape,
    pub(crate) id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            nonfinite: Cell::new(0),
            grad_enabled: true,
            precision: Precision::F64,
            detached: RefCell::new(Vec::new()),
            replay: None,
        }
    }

    /// A tape that records values only; [`Tape::backward`] is rejected.
    pub fn no_grad() -> Self {
        Tape {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn with_precision(mut self, precision: Precision) -> Self {
        self.precision = precision;
        self
    }

    /// Makes the `i`-th detach on this tape yield `values[i]` instead of the
    /// live value, so perturbed re-evaluations keep stop-gradient inputs at
    /// a reference point.
    pub fn replaying_detached(mut self, values: Vec<Tensor>) -> Self {
        self.replay = Some(values);
        self
    }

    /// Every value cut from the graph so far, in order.
    pub fn detached_values(&self) -> Vec<Tensor> {
        self.detached.borrow().clone()
    }

    pub(crate) fn detach_value(&self, live: Tensor) -> Tensor {
        let i = self.detached.borrow().len();
        let value = match self.replay.as_ref().and_then(|r| r.get(i)) {
            Some(v) if v.shape() == live.shape() => v.clone(),
            _ => live,
        };
        self.detached.borrow_mut().push(value.clone());
        value
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn precision(&self) -> Precision {
        self.precision
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Count of NaN or infinite values produced by recorded operations.
    pub fn nonfinite_count(&self) -> usize {
        self.nonfinite.get()
    }

    /// Drops every recorded node.
    pub fn clear(&self) {
        self.nodes.borrow_mut().clear();
        self.detached.borrow_mut().clear();
        self.nonfinite.set(0);
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a stored parameter as a differentiable leaf.
    pub fn param(&self, store: &ParamStore, id: ParamId) -> Var<'_> {
        self.push(store.value(id).clone(), Op::Param(id))
    }

    pub(crate) fn push(&self, mut value: Tensor, op: Op) -> Var<'_> {
        if self.precision == Precision::F32 {
            for v in value.data_mut() {
                *v = *v as f32 as f64;
            }
        }
        let bad = value.data().iter().filter(|v| !v.is_finite()).count();
        if bad > 0 {
            self.nonfinite.set(self.nonfinite.get() + bad);
        }
        let op = if self.grad_enabled {
            op
        } else {
            match op {
                Op::Param(_) => op,
                _ => Op::Leaf,
            }
        };
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub(crate) fn value_ref(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Parameter gradients are added to
    /// `store` (repeated calls accumulate); all node gradients are returned.
    pub fn backward(&self, loss: Var<'_>, store: &mut ParamStore) -> Result<Gradients> {
        if !self.grad_enabled {
            return Err(Error::contract("backward on a no-grad tape"));
        }
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::contract("loss was recorded on a different tape"));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(vec![1.0]);
        for id in (0..=loss.id).rev() {
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, id, &g, &mut grads, store);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

/// Per-node gradients from one backward sweep.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, zeros if unreachable.
    pub fn wrt(&self, v: Var<'_>) -> Tensor {
        let shape = v.shape();
        match self.grads.get(v.id).and_then(Option::as_ref) {
            Some(g) => Tensor::from_parts(shape, g.clone()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn reached(&self, v: Var<'_>) -> bool {
        matches!(self.grads.get(v.id), Some(Some(_)))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], id: usize, g: Vec<f64>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

fn broadcast_values(v: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if v.shape() == out_shape {
        return v.data().to_vec();
    }
    super::broadcast_index_map(v.shape(), out_shape)
        .into_iter()
        .map(|i| v.data()[i])
        .collect()
}

fn backward_node(
    nodes: &[Node],
    id: usize,
    g: &[f64],
    grads: &mut [Option<Vec<f64>>],
    store: &mut ParamStore,
) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Param(pid) => {
            let acc = store.grad_mut(*pid);
            acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a += b);
        }
        &Op::Add(a, b) => {
            accumulate(grads, a, reduce_broadcast(g, out.shape(), val(a).shape()));
            accumulate(grads, b, reduce_broadcast(g, out.shape(), val(b).shape()));
        }
        &Op::Sub(a, b) => {
            accumulate(grads, a, reduce_broadcast(g, out.shape(), val(a).shape()));
            let neg: Vec<f64> = g.iter().map(|v| -v).collect();
            accumulate(grads, b, reduce_broadcast(&neg, out.shape(), val(b).shape()));
        }
        &Op::Mul(a, b) => {
            let av = broadcast_values(val(a), out.shape());
            let bv = broadcast_values(val(b), out.shape());
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g * b).collect();
            let gb: Vec<f64> = g.iter().zip(&av).map(|(g, a)| g * a).collect();
            accumulate(grads, a, reduce_broadcast(&ga, out.shape(), val(a).shape()));
            accumulate(grads, b, reduce_broadcast(&gb, out.shape(), val(b).shape()));
        }
        &Op::Div(a, b) => {
            let av = broadcast_values(val(a), out.shape());
            let bv = broadcast_values(val(b), out.shape());
            let ga: Vec<f64> = g.iter().zip(&bv).map(|(g, b)| g / b).collect();
            let gb: Vec<f64> = g
                .iter()
                .zip(av.iter().zip(&bv))
                .map(|(g, (a, b))| -g * a / (b * b))
                .collect();
            accumulate(grads, a, reduce_broadcast(&ga, out.shape(), val(a).shape()));
            accumulate(grads, b, reduce_broadcast(&gb, out.shape(), val(b).shape()));
        }
        &Op::Neg(a) => accumulate(grads, a, g.iter().map(|v| -v).collect()),
        &Op::Exp(a) => accumulate(grads, a, zip_map(g, out.data(), |g, y| g * y)),
        &Op::Log(a) => accumulate(grads, a, zip_map(g, val(a).data(), |g, x| g / x)),
        &Op::Sigmoid(a) => accumulate(grads, a, zip_map(g, out.data(), |g, y| g * y * (1.0 - y))),
        &Op::Softplus(a) => {
            accumulate(grads, a, zip_map(g, val(a).data(), |g, x| g * sigmoid(x)))
        }
        &Op::Relu(a) => accumulate(
            grads,
            a,
            zip_map(g, val(a).data(), |g, x| if x > 0.0 { g } else { 0.0 }),
        ),
        &Op::Pow(a, p) => accumulate(
            grads,
            a,
            zip_map(g, val(a).data(), |g, x| g * p * x.powf(p - 1.0)),
        ),
        &Op::AddScalar(a) => accumulate(grads, a, g.to_vec()),
        &Op::MulScalar(a, c) => accumulate(grads, a, g.iter().map(|v| v * c).collect()),
        &Op::Clamp { a, lo, hi } => accumulate(
            grads,
            a,
            zip_map(g, val(a).data(), |g, x| if x >= lo && x <= hi { g } else { 0.0 }),
        ),
        &Op::Matmul(a, b) => {
            let (m, k) = (val(a).shape()[0], val(a).shape()[1]);
            let n = val(b).shape()[1];
            accumulate(grads, a, kernels::matmul_nt(g, val(b).data(), m, n, k));
            accumulate(grads, b, kernels::matmul_tn(val(a).data(), g, m, k, n));
        }
        &Op::SumAll(a) => accumulate(grads, a, vec![g[0]; val(a).len()]),
        &Op::SumAxis { a, axis } => {
            let (outer, n, inner) = split_axis(val(a).shape(), axis);
            let mut ga = vec![0.0; outer * n * inner];
            for o in 0..outer {
                for i in 0..n {
                    let dst = &mut ga[(o * n + i) * inner..][..inner];
                    dst.copy_from_slice(&g[o * inner..(o + 1) * inner]);
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::Reshape(a) => accumulate(grads, a, g.to_vec()),
        &Op::BroadcastTo(a) => {
            accumulate(grads, a, reduce_broadcast(g, out.shape(), val(a).shape()))
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_axis(out.shape(), *axis);
            let total = out.shape()[*axis];
            let mut offset = 0;
            for &p in parts {
                let n = val(p).shape()[*axis];
                let mut gp = Vec::with_capacity(outer * n * inner);
                for o in 0..outer {
                    gp.extend_from_slice(&g[(o * total + offset) * inner..][..n * inner]);
                }
                accumulate(grads, p, gp);
                offset += n;
            }
        }
        &Op::Slice { a, axis, start } => {
            let (outer, n_in, inner) = split_axis(val(a).shape(), axis);
            let n = out.shape()[axis];
            let mut ga = vec![0.0; outer * n_in * inner];
            for o in 0..outer {
                ga[(o * n_in + start) * inner..][..n * inner]
                    .copy_from_slice(&g[o * n * inner..][..n * inner]);
            }
            accumulate(grads, a, ga);
        }
        &Op::Softmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), axis);
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let dot: f64 = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                    for i in 0..n {
                        ga[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::LogSoftmax { a, axis } => {
            let (outer, n, inner) = split_axis(out.shape(), axis);
            let y = out.data();
            let mut ga = vec![0.0; y.len()];
            for o in 0..outer {
                for r in 0..inner {
                    let idx = |i: usize| (o * n + i) * inner + r;
                    let total: f64 = (0..n).map(|i| g[idx(i)]).sum();
                    for i in 0..n {
                        ga[idx(i)] = g[idx(i)] - y[idx(i)].exp() * total;
                    }
                }
            }
            accumulate(grads, a, ga);
        }
        &Op::Conv2d { x, w } => {
            let xs = val(x).shape();
            let ws = val(w).shape();
            let geom = ConvGeom {
                n: xs[0],
                h: xs[1],
                w: xs[2],
                c: xs[3],
                kh: ws[0],
                kw: ws[1],
            };
            let k = ws[3];
            let cols = kernels::im2col(val(x).data(), geom);
            let gw = kernels::matmul_tn(&cols, g, geom.positions(), geom.patch(), k);
            let gcols = kernels::matmul_nt(g, val(w).data(), geom.positions(), k, geom.patch());
            accumulate(grads, w, gw);
            accumulate(grads, x, kernels::col2im(&gcols, geom));
        }
        &Op::AvgPool2(a) => {
            let s = val(a).shape();
            accumulate(grads, a, kernels::avg_pool2_backward(g, s[0], s[1], s[2], s[3]));
        }
        &Op::CumProd(a) => {
            let x = val(a).data();
            let (outer, n, _) = split_axis(val(a).shape(), val(a).ndim() - 1);
            let mut ga = vec![0.0; x.len()];
            for o in 0..outer {
                let row = &x[o * n..(o + 1) * n];
                let grow = &g[o * n..(o + 1) * n];
                for j in 0..n {
                    // d/dx_j of prod_{k<=i} x_k, built without dividing by x_j
                    let mut before = 1.0;
                    for &v in &row[..j] {
                        before *= v;
                    }
                    let mut acc = 0.0;
                    let mut after = 1.0;
                    for i in j..n {
                        if i > j {
                            after *= row[i];
                        }
                        acc += grow[i] * before * after;
                    }
                    ga[o * n + j] = acc;
                }
            }
            accumulate(grads, a, ga);
        }
        Op::Gather { a, index } => {
            let width = val(*a).shape()[1];
            let mut ga = vec![0.0; val(*a).len()];
            for (i, &j) in index.iter().enumerate() {
                ga[i * width + j] += g[i];
            }
            accumulate(grads, *a, ga);
        }
        Op::PermuteRows { a, perm } => {
            let width = val(*a).len() / perm.len().max(1);
            let mut ga = vec![0.0; val(*a).len()];
            for (i, &src) in perm.iter().enumerate() {
                for c in 0..width {
                    ga[src * width + c] += g[i * width + c];
                }
            }
            accumulate(grads, *a, ga);
        }
        Op::Kumaraswamy { a, b, noise } => {
            let (av, bv) = (val(*a).data(), val(*b).data());
            let mut ga = vec![0.0; av.len()];
            let mut gb = vec![0.0; bv.len()];
            for i in 0..noise.len() {
                let u = out.data()[i];
                if u <= KUMARASWAMY_EPS || u >= 1.0 - KUMARASWAMY_EPS {
                    continue;
                }
                let log_w = (-noise[i]).ln_1p();
                let s = (log_w / bv[i]).exp();
                let v = -(log_w / bv[i]).exp_m1();
                ga[i] = g[i] * (-u * v.ln() / (av[i] * av[i]));
                gb[i] = g[i] * (u * s * log_w / (av[i] * v * bv[i] * bv[i]));
            }
            accumulate(grads, *a, ga);
            accumulate(grads, *b, gb);
        }
    }
}

/// Kumaraswamy draws are clamped to `[eps, 1 - eps]`.
pub(crate) const KUMARASWAMY_EPS: f64 = 1e-12;

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn zip_map(g: &[f64], x: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    g.iter().zip(x).map(|(&g, &x)| f(g, x)).collect()
}

pub(crate) fn check_same_tape(a: Var<'_>, b: Var<'_>) -> Result<()> {
    if std::ptr::eq(a.tape, b.tape) {
        Ok(())
    } else {
        Err(Error::contract("operands recorded on different tapes"))
    }
}
