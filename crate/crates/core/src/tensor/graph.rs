use std::cell::RefCell;
use std::rc::Rc;

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::TensorError;
use crate::parallel::Exec;

type Res<T> = Result<T, TensorError>;

/// Which way a temporal filter is read.
///
/// `Forward` reads `x[j + r·p]`; `Backward` reads `x[j − r·p]` over the valid
/// range, which is the forward read with the kernel reversed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ConvDirection {
    Forward,
    Backward,
}

#[derive(Debug, Clone, Copy)]
enum Unary {
    Tanh,
    Relu,
    Elu(f64),
    Sigmoid,
    Abs,
    Square,
}

impl Unary {
    fn name(self) -> &'static str {
        match self {
            Unary::Tanh => "tanh",
            Unary::Relu => "relu",
            Unary::Elu(_) => "elu",
            Unary::Sigmoid => "sigmoid",
            Unary::Abs => "abs",
            Unary::Square => "square",
        }
    }

    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    x
                } else {
                    alpha * x.exp_m1()
                }
            }
            Unary::Sigmoid => {
                if x >= 0.0 {
                    1.0 / (1.0 + (-x).exp())
                } else {
                    let e = x.exp();
                    e / (1.0 + e)
                }
            }
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
        }
    }

    /// dy/dx given input and output.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Elu(alpha) => {
                if x > 0.0 {
                    1.0
                } else {
                    y + alpha
                }
            }
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Square => 2.0 * x,
        }
    }
}

enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    MatMul(usize, usize),
    TransposeLast(usize),
    Reshape(usize),
    Unary(usize, Unary),
    Sum(usize),
    SumAxis(usize, usize),
    MaxAxis(usize, Vec<usize>),
    RowL2Normalize(usize, f64, Vec<f64>),
    RowSumNormalize(usize, f64, Vec<f64>),
    AdaptiveMaxPool(usize, Vec<usize>),
    Conv1d { x: usize, w: usize, dilation: usize },
    ReverseLast(usize),
    Concat(Vec<usize>, usize),
    Slice { input: usize, axis: usize, start: usize },
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    needs_grad: bool,
}

/// A single-threaded recording of evaluated operations.
///
/// Values are computed eagerly when an operation is called. Every operation
/// checks its output for NaN/Inf and fails with the operation's name.
pub struct Graph {
    nodes: RefCell<Vec<Node>>,
    exec: Exec,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g> {
    graph: &'g Graph,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let v = self.value();
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &v.shape())
            .finish()
    }
}

/// Gradients of a scalar with respect to every leaf that requires them.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    pub fn node_ids(&self) -> impl Iterator<Item = usize> + '_ {
        self.grads
            .iter()
            .enumerate()
            .filter_map(|(i, g)| g.as_ref().map(|_| i))
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return None;
        };
    }
    Some(out)
}

/// Per-axis strides of `shape` aligned to `out`, zero on broadcast axes.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let n = out.len();
    let mut strides = vec![0; n];
    let mut s = 1;
    for i in (0..shape.len()).rev() {
        let axis = i + n - shape.len();
        if shape[i] != 1 {
            strides[axis] = s;
        }
        s *= shape[i];
    }
    strides
}

/// Visits every output position with the matching offsets into two inputs.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let total: usize = out.iter().product();
    let nd = out.len();
    let mut idx = vec![0usize; nd];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..total {
        f(o, oa, ob);
        let mut d = nd;
        while d > 0 {
            d -= 1;
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

/// Sums a gradient of shape `out` back down to a broadcast input `shape`.
fn reduce_to(grad: &[f64], out: &[usize], shape: &[usize]) -> Vec<f64> {
    if out == shape {
        return grad.to_vec();
    }
    let n: usize = shape.iter().product();
    let mut r = vec![0.0; n];
    let s = aligned_strides(shape, out);
    let zeros = vec![0; out.len()];
    for_each_broadcast(out, &s, &zeros, |o, oa, _| r[oa] += grad[o]);
    r
}

fn batch_dims(shape: &[usize]) -> (&[usize], usize, usize) {
    let n = shape.len();
    (&shape[..n - 2], shape[n - 2], shape[n - 1])
}

impl Graph {
    pub fn new() -> Self {
        Self::with_exec(Exec::default())
    }

    pub fn with_exec(exec: Exec) -> Self {
        Graph {
            nodes: RefCell::new(Vec::new()),
            exec,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op, needs_grad: bool) -> Res<Var<'_>> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        if !value.all_finite() {
            return Err(TensorError::NonFinite { op: name, node: id });
        }
        nodes.push(Node {
            value: Rc::new(value),
            op,
            needs_grad,
        });
        Ok(Var { graph: self, id })
    }

    fn value_of(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    /// A leaf whose gradient is tracked.
    pub fn param(&self, value: Tensor) -> Res<Var<'_>> {
        self.push("param", value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&self, value: Tensor) -> Res<Var<'_>> {
        self.push("constant", value, Op::Leaf, false)
    }

    fn check_same(&self, v: Var<'_>, op: &'static str) -> Res<()> {
        if std::ptr::eq(self, v.graph) {
            Ok(())
        } else {
            Err(TensorError::InvalidArgument {
                op,
                reason: "operands belong to different graphs".into(),
            })
        }
    }

    fn binary(&self, name: &'static str, a: Var<'_>, b: Var<'_>, f: impl Fn(f64, f64) -> f64) -> Res<Var<'_>> {
        self.check_same(a, name)?;
        self.check_same(b, name)?;
        let (va, vb) = (self.value_of(a.id), self.value_of(b.id));
        let out_shape = broadcast_shape(va.shape(), vb.shape()).ok_or_else(|| TensorError::ShapeMismatch {
            op: name,
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        })?;
        let data = if va.shape() == vb.shape() {
            va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let total: usize = out_shape.iter().product();
            let mut data = vec![0.0; total];
            let sa = aligned_strides(va.shape(), &out_shape);
            let sb = aligned_strides(vb.shape(), &out_shape);
            let (da, db) = (va.data(), vb.data());
            for_each_broadcast(&out_shape, &sa, &sb, |o, ia, ib| data[o] = f(da[ia], db[ib]));
            data
        };
        let op = match name {
            "add" => Op::Add(a.id, b.id),
            "sub" => Op::Sub(a.id, b.id),
            _ => Op::Mul(a.id, b.id),
        };
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push(name, Tensor::from_parts(out_shape, data), op, needs)
    }

    fn unary(&self, a: Var<'_>, u: Unary) -> Res<Var<'_>> {
        let va = self.value_of(a.id);
        let out = va.map(|x| u.apply(x));
        self.push(u.name(), out, Op::Unary(a.id, u), self.needs(a.id))
    }

    fn matmul(&self, a: Var<'_>, b: Var<'_>) -> Res<Var<'_>> {
        self.check_same(b, "matmul")?;
        let (va, vb) = (self.value_of(a.id), self.value_of(b.id));
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            lhs: va.shape().to_vec(),
            rhs: vb.shape().to_vec(),
        };
        if va.ndim() < 2 || vb.ndim() < 2 {
            return Err(mismatch());
        }
        let (ba, m, k) = batch_dims(va.shape());
        let (bb, k2, n) = batch_dims(vb.shape());
        if k != k2 || (!ba.is_empty() && !bb.is_empty() && ba != bb) {
            return Err(mismatch());
        }
        let batch_shape = if ba.is_empty() { bb } else { ba };
        let batches: usize = batch_shape.iter().product();
        let data = if bb.is_empty() {
            kernels::gemm(self.exec, va.data(), vb.data(), batches * m, k, n)
        } else {
            let mut data = Vec::with_capacity(batches * m * n);
            for i in 0..batches {
                let a_i = if ba.is_empty() { va.data() } else { &va.data()[i * m * k..(i + 1) * m * k] };
                let b_i = &vb.data()[i * k * n..(i + 1) * k * n];
                data.extend(kernels::gemm(self.exec, a_i, b_i, m, k, n));
            }
            data
        };
        let mut shape = batch_shape.to_vec();
        shape.extend([m, n]);
        let needs = self.needs(a.id) || self.needs(b.id);
        self.push("matmul", Tensor::from_parts(shape, data), Op::MatMul(a.id, b.id), needs)
    }

    /// Gradients of the (scalar) `loss` with respect to every tracked leaf.
    pub fn backward(&self, loss: Var<'_>) -> Res<Gradients> {
        self.check_same(loss, "backward")?;
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.id].value.shape();
        if nodes[loss.id].value.len() != 1 {
            return Err(TensorError::NonScalarLoss(loss_shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.id] = Some(vec![1.0]);
        let mut leaves: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            let out = &node.value;
            let mut acc = |target: usize, contrib: Vec<f64>| {
                if !nodes[target].needs_grad {
                    return;
                }
                match &mut grads[target] {
                    Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
                    slot @ None => *slot = Some(contrib),
                }
            };
            match &node.op {
                Op::Leaf => {
                    leaves[id] = Some(Tensor::from_parts(out.shape().to_vec(), g));
                }
                Op::Add(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    acc(*a, reduce_to(&g, out.shape(), sa));
                    acc(*b, reduce_to(&g, out.shape(), sb));
                }
                Op::Sub(a, b) => {
                    let (sa, sb) = (nodes[*a].value.shape(), nodes[*b].value.shape());
                    acc(*a, reduce_to(&g, out.shape(), sa));
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    acc(*b, reduce_to(&neg, out.shape(), sb));
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let osh = out.shape();
                    let sa = aligned_strides(va.shape(), osh);
                    let sb = aligned_strides(vb.shape(), osh);
                    if nodes[*a].needs_grad {
                        let mut ga = vec![0.0; g.len()];
                        for_each_broadcast(osh, &sa, &sb, |o, _, ib| ga[o] = g[o] * vb.data()[ib]);
                        acc(*a, reduce_to(&ga, osh, va.shape()));
                    }
                    if nodes[*b].needs_grad {
                        let mut gb = vec![0.0; g.len()];
                        for_each_broadcast(osh, &sa, &sb, |o, ia, _| gb[o] = g[o] * va.data()[ia]);
                        acc(*b, reduce_to(&gb, osh, vb.shape()));
                    }
                }
                Op::Scale(a, c) => acc(*a, g.iter().map(|v| v * c).collect()),
                Op::Offset(a) | Op::Reshape(a) => acc(*a, g),
                Op::MatMul(a, b) => {
                    let (va, vb) = (&nodes[*a].value, &nodes[*b].value);
                    let (ba, m, k) = batch_dims(va.shape());
                    let (bb, _, n) = batch_dims(vb.shape());
                    let batches: usize = if ba.is_empty() { bb.iter().product() } else { ba.iter().product() };
                    if nodes[*a].needs_grad {
                        let ga = if bb.is_empty() {
                            let bt = kernels::transpose(vb.data(), k, n);
                            kernels::gemm(self.exec, &g, &bt, batches * m, n, k)
                        } else {
                            let mut ga = vec![0.0; if ba.is_empty() { m * k } else { batches * m * k }];
                            for i in 0..batches {
                                let bt = kernels::transpose(&vb.data()[i * k * n..(i + 1) * k * n], k, n);
                                let gi = kernels::gemm(self.exec, &g[i * m * n..(i + 1) * m * n], &bt, m, n, k);
                                let off = if ba.is_empty() { 0 } else { i * m * k };
                                ga[off..off + m * k].iter_mut().zip(&gi).for_each(|(x, y)| *x += y);
                            }
                            ga
                        };
                        acc(*a, ga);
                    }
                    if nodes[*b].needs_grad {
                        let gb = if bb.is_empty() {
                            let at = kernels::transpose(va.data(), batches * m, k);
                            kernels::gemm(self.exec, &at, &g, k, batches * m, n)
                        } else {
                            let mut gb = vec![0.0; batches * k * n];
                            for i in 0..batches {
                                let a_i = if ba.is_empty() { va.data() } else { &va.data()[i * m * k..(i + 1) * m * k] };
                                let at = kernels::transpose(a_i, m, k);
                                let gi = kernels::gemm(self.exec, &at, &g[i * m * n..(i + 1) * m * n], k, m, n);
                                gb[i * k * n..(i + 1) * k * n].copy_from_slice(&gi);
                            }
                            gb
                        };
                        acc(*b, gb);
                    }
                }
                Op::TransposeLast(a) => {
                    let (bs, r, c) = batch_dims(out.shape());
                    let batches: usize = bs.iter().product();
                    let mut ga = Vec::with_capacity(g.len());
                    for i in 0..batches {
                        ga.extend(kernels::transpose(&g[i * r * c..(i + 1) * r * c], r, c));
                    }
                    acc(*a, ga);
                }
                Op::Unary(a, u) => {
                    let x = nodes[*a].value.data();
                    let y = out.data();
                    let ga = g
                        .iter()
                        .zip(x.iter().zip(y))
                        .map(|(gv, (&xv, &yv))| gv * u.derivative(xv, yv))
                        .collect();
                    acc(*a, ga);
                }
                Op::Sum(a) => {
                    let n = nodes[*a].value.len();
                    acc(*a, vec![g[0]; n]);
                }
                Op::SumAxis(a, axis) => {
                    let shape = nodes[*a].value.shape();
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let mut ga = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] = g[o * inner + i];
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::MaxAxis(a, argmax) | Op::AdaptiveMaxPool(a, argmax) => {
                    let mut ga = vec![0.0; nodes[*a].value.len()];
                    for (gv, &src) in g.iter().zip(argmax) {
                        ga[src] += gv;
                    }
                    acc(*a, ga);
                }
                Op::RowL2Normalize(a, eps, norms) => {
                    let len = *out.shape().last().unwrap();
                    let y = out.data();
                    let mut ga = vec![0.0; g.len()];
                    for (r, &norm) in norms.iter().enumerate() {
                        let range = r * len..(r + 1) * len;
                        let (gr, yr) = (&g[range.clone()], &y[range.clone()]);
                        if norm > *eps {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for (j, o) in ga[range].iter_mut().enumerate() {
                                *o = (gr[j] - yr[j] * dot) / norm;
                            }
                        } else {
                            for (j, o) in ga[range].iter_mut().enumerate() {
                                *o = gr[j] / eps;
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::RowSumNormalize(a, floor, sums) => {
                    let len = *out.shape().last().unwrap();
                    let y = out.data();
                    let mut ga = vec![0.0; g.len()];
                    for (r, &s) in sums.iter().enumerate() {
                        let range = r * len..(r + 1) * len;
                        let (gr, yr) = (&g[range.clone()], &y[range.clone()]);
                        if s > *floor {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for (j, o) in ga[range].iter_mut().enumerate() {
                                *o = (gr[j] - dot) / s;
                            }
                        } else {
                            for (j, o) in ga[range].iter_mut().enumerate() {
                                *o = gr[j] / floor;
                            }
                        }
                    }
                    acc(*a, ga);
                }
                Op::Conv1d { x, w, dilation } => {
                    let (vx, vw) = (&nodes[*x].value, &nodes[*w].value);
                    let (rows, len) = (vx.shape()[0], vx.shape()[1]);
                    let (filters, width) = (vw.shape()[0], vw.shape()[1]);
                    let (dx, dw) = kernels::conv1d_backward(
                        &g,
                        vx.data(),
                        rows,
                        len,
                        vw.data(),
                        filters,
                        width,
                        *dilation,
                        nodes[*x].needs_grad,
                        nodes[*w].needs_grad,
                    );
                    if let Some(dx) = dx {
                        acc(*x, dx);
                    }
                    if let Some(dw) = dw {
                        acc(*w, dw);
                    }
                }
                Op::ReverseLast(a) => {
                    let len = *out.shape().last().unwrap();
                    let ga = g.chunks(len).flat_map(|c| c.iter().rev().copied()).collect();
                    acc(*a, ga);
                }
                Op::Concat(inputs, axis) => {
                    let outer: usize = out.shape()[..*axis].iter().product();
                    let chunks: Vec<usize> = inputs
                        .iter()
                        .map(|&i| nodes[i].value.shape()[*axis..].iter().product())
                        .collect();
                    let row: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&inp, &chunk) in inputs.iter().zip(&chunks) {
                        let mut gi = Vec::with_capacity(outer * chunk);
                        for o in 0..outer {
                            gi.extend_from_slice(&g[o * row + offset..o * row + offset + chunk]);
                        }
                        offset += chunk;
                        acc(inp, gi);
                    }
                }
                Op::Slice { input, axis, start } => {
                    let shape = nodes[*input].value.shape();
                    let (outer, len, inner) = axis_split(shape, *axis);
                    let take = out.shape()[*axis];
                    let mut gi = vec![0.0; outer * len * inner];
                    for o in 0..outer {
                        let src = &g[o * take * inner..(o + 1) * take * inner];
                        let dst = (o * len + start) * inner;
                        gi[dst..dst + take * inner].copy_from_slice(src);
                    }
                    acc(*input, gi);
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    let width = *out.shape().last().unwrap();
                    let gv = nodes[*gain].value.data();
                    let mut dx = vec![0.0; g.len()];
                    let mut dgain = vec![0.0; width];
                    let mut dbias = vec![0.0; width];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let range = r * width..(r + 1) * width;
                        let (gr, xr) = (&g[range.clone()], &xhat[range.clone()]);
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for j in 0..width {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dx += d * xr[j];
                            dgain[j] += gr[j] * xr[j];
                            dbias[j] += gr[j];
                        }
                        mean_d /= width as f64;
                        mean_dx /= width as f64;
                        for (j, o) in dx[range].iter_mut().enumerate() {
                            *o = rs * (gr[j] * gv[j] - mean_d - xr[j] * mean_dx);
                        }
                    }
                    acc(*x, dx);
                    acc(*gain, dgain);
                    acc(*bias, dbias);
                }
            }
        }
        Ok(Gradients { grads: leaves })
    }
}

/// (product of axes before, extent of axis, product of axes after)
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    )
}

impl<'g> Var<'g> {
    pub fn id(self) -> usize {
        self.id
    }

    pub fn graph(self) -> &'g Graph {
        self.graph
    }

    pub fn value(self) -> Rc<Tensor> {
        self.graph.value_of(self.id)
    }

    pub fn shape(self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn add(self, other: Var<'g>) -> Res<Var<'g>> {
        self.graph.binary("add", self, other, |a, b| a + b)
    }

    pub fn sub(self, other: Var<'g>) -> Res<Var<'g>> {
        self.graph.binary("sub", self, other, |a, b| a - b)
    }

    pub fn mul(self, other: Var<'g>) -> Res<Var<'g>> {
        self.graph.binary("mul", self, other, |a, b| a * b)
    }

    pub fn scale(self, c: f64) -> Res<Var<'g>> {
        let v = self.value().map(|x| x * c);
        self.graph.push("scale", v, Op::Scale(self.id, c), self.graph.needs(self.id))
    }

    pub fn add_scalar(self, c: f64) -> Res<Var<'g>> {
        let v = self.value().map(|x| x + c);
        self.graph.push("add_scalar", v, Op::Offset(self.id), self.graph.needs(self.id))
    }

    /// `1 - self`.
    pub fn one_minus(self) -> Res<Var<'g>> {
        self.scale(-1.0)?.add_scalar(1.0)
    }

    pub fn matmul(self, other: Var<'g>) -> Res<Var<'g>> {
        self.graph.matmul(self, other)
    }

    /// Swaps the last two axes.
    pub fn transpose(self) -> Res<Var<'g>> {
        let v = self.value();
        if v.ndim() < 2 {
            return Err(TensorError::InvalidArgument {
                op: "transpose",
                reason: format!("need rank >= 2, got {:?}", v.shape()),
            });
        }
        let (bs, r, c) = batch_dims(v.shape());
        let batches: usize = bs.iter().product();
        let mut data = Vec::with_capacity(v.len());
        for i in 0..batches {
            data.extend(kernels::transpose(&v.data()[i * r * c..(i + 1) * r * c], r, c));
        }
        let mut shape = bs.to_vec();
        shape.extend([c, r]);
        self.graph.push(
            "transpose",
            Tensor::from_parts(shape, data),
            Op::TransposeLast(self.id),
            self.graph.needs(self.id),
        )
    }

    pub fn reshape(self, shape: &[usize]) -> Res<Var<'g>> {
        let v = self.value();
        let t = v.reshape(shape).map_err(|_| TensorError::ShapeMismatch {
            op: "reshape",
            lhs: v.shape().to_vec(),
            rhs: shape.to_vec(),
        })?;
        self.graph.push("reshape", t, Op::Reshape(self.id), self.graph.needs(self.id))
    }

    pub fn tanh(self) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Tanh)
    }

    pub fn relu(self) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Relu)
    }

    pub fn elu(self, alpha: f64) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Elu(alpha))
    }

    pub fn sigmoid(self) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Sigmoid)
    }

    pub fn abs(self) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Abs)
    }

    pub fn square(self) -> Res<Var<'g>> {
        self.graph.unary(self, Unary::Square)
    }

    /// Sum of every entry, as a one-element tensor.
    pub fn sum(self) -> Res<Var<'g>> {
        let s: f64 = self.value().data().iter().sum();
        self.graph.push("sum", Tensor::scalar(s), Op::Sum(self.id), self.graph.needs(self.id))
    }

    /// Sum over `axis`, keeping it with extent 1.
    pub fn sum_axis(self, axis: usize) -> Res<Var<'g>> {
        let v = self.value();
        self.check_axis(axis, "sum_axis")?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    data[o * inner + i] += v.data()[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        self.graph.push(
            "sum_axis",
            Tensor::from_parts(shape, data),
            Op::SumAxis(self.id, axis),
            self.graph.needs(self.id),
        )
    }

    /// Maximum over `axis`, keeping it with extent 1.
    pub fn max_axis(self, axis: usize) -> Res<Var<'g>> {
        let v = self.value();
        self.check_axis(axis, "max_axis")?;
        let (outer, len, inner) = axis_split(v.shape(), axis);
        let mut data = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let src = (o * len + l) * inner + i;
                    if v.data()[src] > data[o * inner + i] {
                        data[o * inner + i] = v.data()[src];
                        argmax[o * inner + i] = src;
                    }
                }
            }
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = 1;
        self.graph.push(
            "max_axis",
            Tensor::from_parts(shape, data),
            Op::MaxAxis(self.id, argmax),
            self.graph.needs(self.id),
        )
    }

    fn check_axis(self, axis: usize, op: &'static str) -> Res<()> {
        let nd = self.value().ndim();
        if axis >= nd {
            return Err(TensorError::InvalidArgument {
                op,
                reason: format!("axis {axis} out of range for rank {nd}"),
            });
        }
        Ok(())
    }

    /// Divides each row (last axis) by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(self, eps: f64) -> Res<Var<'g>> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument {
                op: "row_l2_normalize",
                reason: "epsilon must be positive".into(),
            });
        }
        let v = self.value();
        let len = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        let mut norms = Vec::with_capacity(v.len() / len);
        for row in data.chunks_mut(len) {
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            let d = norm.max(eps);
            row.iter_mut().for_each(|x| *x /= d);
            norms.push(norm);
        }
        self.graph.push(
            "row_l2_normalize",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::RowL2Normalize(self.id, eps, norms),
            self.graph.needs(self.id),
        )
    }

    /// Divides each row (last axis) by `max(Σ row, floor)`.
    pub fn row_sum_normalize(self, floor: f64) -> Res<Var<'g>> {
        let v = self.value();
        let len = *v.shape().last().unwrap();
        let mut data = v.data().to_vec();
        let mut sums = Vec::with_capacity(v.len() / len);
        for row in data.chunks_mut(len) {
            let s: f64 = row.iter().sum();
            let d = s.max(floor);
            row.iter_mut().for_each(|x| *x /= d);
            sums.push(s);
        }
        self.graph.push(
            "row_sum_normalize",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::RowSumNormalize(self.id, floor, sums),
            self.graph.needs(self.id),
        )
    }

    /// Adaptive max pooling of the last axis down to `target` bins.
    ///
    /// Bin `i` spans `⌊i·L/P⌋ .. ⌊(i+1)·L/P⌋ − 1`, widened to one element when
    /// `P > L` would make it empty.
    pub fn adaptive_max_pool(self, target: usize) -> Res<Var<'g>> {
        let v = self.value();
        let len = *v.shape().last().unwrap();
        if target == 0 {
            return Err(TensorError::InvalidArgument {
                op: "adaptive_max_pool",
                reason: "target size must be positive".into(),
            });
        }
        let rows = v.len() / len;
        let mut data = Vec::with_capacity(rows * target);
        let mut argmax = Vec::with_capacity(rows * target);
        for r in 0..rows {
            let row = &v.data()[r * len..(r + 1) * len];
            for i in 0..target {
                let start = i * len / target;
                let end = ((i + 1) * len / target).max(start + 1);
                let (mut best, mut at) = (f64::NEG_INFINITY, start);
                for (j, &x) in row.iter().enumerate().take(end).skip(start) {
                    if x > best {
                        best = x;
                        at = j;
                    }
                }
                data.push(best);
                argmax.push(r * len + at);
            }
        }
        let mut shape = v.shape().to_vec();
        *shape.last_mut().unwrap() = target;
        self.graph.push(
            "adaptive_max_pool",
            Tensor::from_parts(shape, data),
            Op::AdaptiveMaxPool(self.id, argmax),
            self.graph.needs(self.id),
        )
    }

    /// Reverses the last axis.
    pub fn reverse_last(self) -> Res<Var<'g>> {
        let v = self.value();
        let len = *v.shape().last().unwrap();
        let data = v.data().chunks(len).flat_map(|c| c.iter().rev().copied()).collect();
        self.graph.push(
            "reverse_last",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::ReverseLast(self.id),
            self.graph.needs(self.id),
        )
    }

    /// Valid dilated convolution of each row of `self` (`rows × T`) with every
    /// filter in `kernel` (`filters × s`), giving `rows × filters × L_out`.
    pub fn conv1d(self, kernel: Var<'g>, dilation: usize, direction: ConvDirection) -> Res<Var<'g>> {
        self.graph.check_same(kernel, "conv1d")?;
        let (vx, vw) = (self.value(), kernel.value());
        if vx.ndim() != 2 || vw.ndim() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "conv1d",
                lhs: vx.shape().to_vec(),
                rhs: vw.shape().to_vec(),
            });
        }
        let (rows, len) = (vx.shape()[0], vx.shape()[1]);
        let (filters, width) = (vw.shape()[0], vw.shape()[1]);
        if dilation == 0 || dilation * (width - 1) >= len {
            return Err(TensorError::InvalidArgument {
                op: "conv1d",
                reason: format!(
                    "output length {len} - {dilation}*({width}-1) must be at least 1"
                ),
            });
        }
        let kernel = match direction {
            ConvDirection::Forward => kernel,
            ConvDirection::Backward => kernel.reverse_last()?,
        };
        let vw = kernel.value();
        let out_len = len - dilation * (width - 1);
        let data = kernels::conv1d(self.graph.exec, vx.data(), rows, len, vw.data(), filters, width, dilation);
        let needs = self.graph.needs(self.id) || self.graph.needs(kernel.id);
        self.graph.push(
            "conv1d",
            Tensor::from_parts(vec![rows, filters, out_len], data),
            Op::Conv1d {
                x: self.id,
                w: kernel.id,
                dilation,
            },
            needs,
        )
    }

    /// Entries `start .. start+len` along `axis`.
    pub fn slice(self, axis: usize, start: usize, len: usize) -> Res<Var<'g>> {
        let v = self.value();
        self.check_axis(axis, "slice")?;
        if len == 0 || start + len > v.shape()[axis] {
            return Err(TensorError::InvalidArgument {
                op: "slice",
                reason: format!("range {start}..{} exceeds extent {}", start + len, v.shape()[axis]),
            });
        }
        let (outer, full, inner) = axis_split(v.shape(), axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let from = (o * full + start) * inner;
            data.extend_from_slice(&v.data()[from..from + len * inner]);
        }
        let mut shape = v.shape().to_vec();
        shape[axis] = len;
        self.graph.push(
            "slice",
            Tensor::from_parts(shape, data),
            Op::Slice {
                input: self.id,
                axis,
                start,
            },
            self.graph.needs(self.id),
        )
    }

    /// Normalizes over the last axis with biased variance and `eps = 1e-5`,
    /// then applies `gain` and `bias` (both of the last axis' extent).
    pub fn layer_norm(self, gain: Var<'g>, bias: Var<'g>) -> Res<Var<'g>> {
        const EPS: f64 = 1e-5;
        let g = self.graph;
        g.check_same(gain, "layer_norm")?;
        g.check_same(bias, "layer_norm")?;
        let (v, vg, vb) = (self.value(), gain.value(), bias.value());
        let width = *v.shape().last().unwrap();
        if vg.shape() != [width] || vb.shape() != [width] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: v.shape().to_vec(),
                rhs: vg.shape().to_vec(),
            });
        }
        let mut xhat = Vec::with_capacity(v.len());
        let mut rstd = Vec::with_capacity(v.len() / width);
        let mut data = Vec::with_capacity(v.len());
        for row in v.data().chunks(width) {
            let mean = row.iter().sum::<f64>() / width as f64;
            let var = row.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / width as f64;
            let rs = 1.0 / (var + EPS).sqrt();
            for (j, &x) in row.iter().enumerate() {
                let xh = (x - mean) * rs;
                xhat.push(xh);
                data.push(xh * vg.data()[j] + vb.data()[j]);
            }
            rstd.push(rs);
        }
        let needs = g.needs(self.id) || g.needs(gain.id) || g.needs(bias.id);
        g.push(
            "layer_norm",
            Tensor::from_parts(v.shape().to_vec(), data),
            Op::LayerNorm {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                xhat,
                rstd,
            },
            needs,
        )
    }

    /// Inverted dropout: in training mode (`rng` present) each entry is zeroed
    /// with probability `p` and survivors are scaled by `1/(1-p)`.
    pub fn dropout<R: Rng + ?Sized>(self, p: f64, rng: Option<&mut R>) -> Res<Var<'g>> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                reason: format!("probability {p} outside [0, 1)"),
            });
        }
        let Some(rng) = rng else { return Ok(self) };
        if p == 0.0 {
            return Ok(self);
        }
        let v = self.value();
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..v.len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let mask = self.graph.constant(Tensor::from_parts(v.shape().to_vec(), mask))?;
        self.mul(mask)
    }
}

/// Concatenates along `axis`; all other extents must agree.
pub fn concat<'g>(parts: &[Var<'g>], axis: usize) -> Res<Var<'g>> {
    let first = *parts.first().ok_or(TensorError::InvalidArgument {
        op: "concat",
        reason: "no inputs".into(),
    })?;
    let g = first.graph;
    let values: Vec<Rc<Tensor>> = parts.iter().map(|p| p.value()).collect();
    let base = values[0].shape().to_vec();
    if axis >= base.len() {
        return Err(TensorError::InvalidArgument {
            op: "concat",
            reason: format!("axis {axis} out of range for rank {}", base.len()),
        });
    }
    for (p, v) in parts.iter().zip(&values) {
        g.check_same(*p, "concat")?;
        let s = v.shape();
        let compatible = s.len() == base.len()
            && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
        if !compatible {
            return Err(TensorError::ShapeMismatch {
                op: "concat",
                lhs: base.clone(),
                rhs: s.to_vec(),
            });
        }
    }
    let outer: usize = base[..axis].iter().product();
    let chunks: Vec<usize> = values.iter().map(|v| v.shape()[axis..].iter().product()).collect();
    let mut data = Vec::with_capacity(outer * chunks.iter().sum::<usize>());
    for o in 0..outer {
        for (v, &c) in values.iter().zip(&chunks) {
            data.extend_from_slice(&v.data()[o * c..(o + 1) * c]);
        }
    }
    let mut shape = base;
    shape[axis] = values.iter().map(|v| v.shape()[axis]).sum();
    let needs = parts.iter().any(|p| g.needs(p.id));
    g.push(
        "concat",
        Tensor::from_parts(shape, data),
        Op::Concat(parts.iter().map(|p| p.id).collect(), axis),
        needs,
    )
}

impl Graph {
    pub fn concat<'g>(&'g self, parts: &[Var<'g>], axis: usize) -> Res<Var<'g>> {
        concat(parts, axis)
    }
}

impl<'g> Var<'g> {
    /// `self · weight (+ bias)`, with `bias` broadcast over leading axes.
    pub fn linear(self, weight: Var<'g>, bias: Option<Var<'g>>) -> Res<Var<'g>> {
        let out = self.matmul(weight)?;
        match bias {
            Some(b) => out.add(b),
            None => Ok(out),
        }
    }
}
