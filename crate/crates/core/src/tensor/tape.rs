use std::cell::{Ref, RefCell};
use std::rc::Rc;

use super::kernels::{self, ConvGeom};
use super::{sigmoid, softmax_slice, softplus, Tensor};
use crate::error::{Error, Result};

/// Norm floor used by the cosine-similarity op.
pub const COSINE_EPS: f64 = 1e-8;

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Exp(usize),
    Log(usize),
    Sigmoid(usize),
    Relu(usize),
    Softplus(usize),
    Sum(usize),
    Mean(usize),
    SumAxis { x: usize, axis: usize },
    Softmax { x: usize, axis: usize },
    LogSoftmax { x: usize, axis: usize },
    MaskedSoftmax { x: usize },
    Matmul { a: usize, b: usize },
    MatmulNt { a: usize, b: usize },
    Permute { x: usize, perm: Vec<usize> },
    Reshape(usize),
    Narrow { x: usize, axis: usize, start: usize },
    IndexSelect { x: usize, axis: usize, indices: Rc<Vec<usize>> },
    Concat { xs: Vec<usize>, axis: usize },
    Expand { x: usize, axis: usize },
    Conv2d { x: usize, w: usize, b: Option<usize>, stride: usize },
    GlobalAvgPool(usize),
    UpsampleNearest2x(usize),
    UpsampleBilinear(usize),
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Cosine { a: usize, b: usize },
}

impl Op {
    fn inputs(&self) -> Vec<usize> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) => vec![*a, *b],
            Scale(x, _) | AddScalar(x) | Exp(x) | Log(x) | Sigmoid(x) | Relu(x) | Softplus(x)
            | Sum(x) | Mean(x) | Reshape(x) | GlobalAvgPool(x) | UpsampleNearest2x(x)
            | UpsampleBilinear(x) => vec![*x],
            SumAxis { x, .. }
            | Softmax { x, .. }
            | LogSoftmax { x, .. }
            | MaskedSoftmax { x }
            | Permute { x, .. }
            | Narrow { x, .. }
            | IndexSelect { x, .. }
            | Expand { x, .. } => vec![*x],
            Matmul { a, b } | MatmulNt { a, b } | Cosine { a, b } => vec![*a, *b],
            Concat { xs, .. } => xs.clone(),
            Conv2d { x, w, b, .. } => {
                let mut v = vec![*x, *w];
                v.extend(b);
                v
            }
            LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Ordered record of executed operations. One tape per forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients of the leaves reached by a backward pass.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, var: Var<'_>) -> Option<Tensor> {
        self.get_id(var.id)
    }

    pub fn get_id(&self, id: usize) -> Option<Tensor> {
        let g = self.grads.get(id)?.as_ref()?;
        Some(Tensor::new(self.shapes[id].clone(), g.clone()).expect("gradient shape"))
    }

    pub fn take_id(&mut self, id: usize) -> Option<Vec<f64>> {
        self.grads.get_mut(id)?.take()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            offset += src[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

/// `Ok(true)` when the operands swap roles: the left one is the trailing suffix.
fn broadcast_shapes(op: &'static str, a: &[usize], b: &[usize]) -> Result<bool> {
    if a.len() >= b.len() && a[a.len() - b.len()..] == *b {
        Ok(false)
    } else if b.len() > a.len() && b[b.len() - a.len()..] == *a {
        Ok(true)
    } else {
        Err(Error::dim(op, a, b))
    }
}

/// Batch/matrix geometry for `matmul` and `matmul_nt`.
#[derive(Clone, Copy, Debug)]
struct MmGeom {
    batch: usize,
    m: usize,
    k: usize,
    n: usize,
    /// Right operand shared across the batch.
    shared_b: bool,
}

fn mm_geom(op: &'static str, a: &[usize], b: &[usize], nt: bool) -> Result<(MmGeom, Vec<usize>)> {
    let err = || Error::dim(op, a, b);
    if a.len() < 2 || b.len() < 2 {
        return Err(err());
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (bk, n) = if nt {
        (b[b.len() - 1], b[b.len() - 2])
    } else {
        (b[b.len() - 2], b[b.len() - 1])
    };
    if k != bk {
        return Err(err());
    }
    let a_batch = &a[..a.len() - 2];
    let b_batch = &b[..b.len() - 2];
    let mut out_shape = a_batch.to_vec();
    out_shape.extend([m, n]);
    if b_batch.is_empty() {
        let rows: usize = a_batch.iter().product::<usize>() * m;
        return Ok((
            MmGeom {
                batch: 1,
                m: rows,
                k,
                n,
                shared_b: true,
            },
            out_shape,
        ));
    }
    if a_batch != b_batch {
        return Err(err());
    }
    Ok((
        MmGeom {
            batch: a_batch.iter().product(),
            m,
            k,
            n,
            shared_b: false,
        },
        out_shape,
    ))
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records a leaf. Parameters pass `requires_grad = true`.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.leaf(value, true)
    }

    fn push(&self, name: &'static str, value: Tensor, op: Op) -> Result<Var<'_>> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|&i| nodes[i].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var {
            tape: self,
            id: nodes.len() - 1,
        })
    }

    /// Sign of every ReLU input recorded so far, in tape order. Two evaluations with equal
    /// patterns lie on the same linear piece of every ReLU.
    pub fn relu_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::Relu(x) = n.op {
                out.extend(nodes[x].value.data().iter().map(|&v| v > 0.0));
            }
        }
        out
    }

    fn value(&self, id: usize) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[id].value)
    }

    /// Reverse sweep from a scalar `loss`. Drains the tape; leaf gradients are returned.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = std::mem::take(&mut *self.nodes.borrow_mut());
        if nodes[loss.id].value.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        let shapes: Vec<Vec<usize>> = nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![1.0]);
        for i in (0..=loss.id).rev() {
            if !nodes[i].requires_grad {
                grads[i] = None;
                continue;
            }
            if matches!(nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop(&nodes, i, &g, &mut grads);
        }
        Ok(Gradients { grads, shapes })
    }
}

fn acc<'g>(
    grads: &'g mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
) -> Option<&'g mut Vec<f64>> {
    if !nodes[id].requires_grad {
        return None;
    }
    Some(grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.numel()]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let y = &nodes[i].value;
    let val = |id: usize| &nodes[id].value;
    match &nodes[i].op {
        Op::Leaf => {}
        &Op::Add(a, b) | &Op::Sub(a, b) => {
            let sign = if matches!(nodes[i].op, Op::Sub(..)) { -1.0 } else { 1.0 };
            for (id, s) in [(a, 1.0), (b, sign)] {
                let n = val(id).numel();
                if let Some(ga) = acc(grads, nodes, id) {
                    for (j, gv) in g.iter().enumerate() {
                        ga[j % n] += s * gv;
                    }
                }
            }
        }
        &Op::Mul(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (na, nb) = (av.len(), bv.len());
            if let Some(ga) = acc(grads, nodes, a) {
                for (j, gv) in g.iter().enumerate() {
                    ga[j % na] += gv * bv[j % nb];
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (j, gv) in g.iter().enumerate() {
                    gb[j % nb] += gv * av[j % na];
                }
            }
        }
        &Op::Div(a, b) => {
            let (av, bv) = (val(a).data(), val(b).data());
            let (na, nb) = (av.len(), bv.len());
            if let Some(ga) = acc(grads, nodes, a) {
                for (j, gv) in g.iter().enumerate() {
                    ga[j % na] += gv / bv[j % nb];
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for (j, gv) in g.iter().enumerate() {
                    let d = bv[j % nb];
                    gb[j % nb] -= gv * av[j % na] / (d * d);
                }
            }
        }
        &Op::Scale(x, c) => {
            if let Some(gx) = acc(grads, nodes, x) {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += c * gv;
                }
            }
        }
        &Op::AddScalar(x) | &Op::Reshape(x) => {
            if let Some(gx) = acc(grads, nodes, x) {
                for (o, gv) in gx.iter_mut().zip(g) {
                    *o += gv;
                }
            }
        }
        &Op::Exp(x) | &Op::Sigmoid(x) | &Op::Relu(x) | &Op::Log(x) | &Op::Softplus(x) => {
            let xv = val(x).data();
            let yv = y.data();
            let op = &nodes[i].op;
            if let Some(gx) = acc(grads, nodes, x) {
                for j in 0..g.len() {
                    let d = match op {
                        Op::Exp(_) => yv[j],
                        Op::Sigmoid(_) => yv[j] * (1.0 - yv[j]),
                        Op::Relu(_) => {
                            if xv[j] > 0.0 {
                                1.0
                            } else {
                                0.0
                            }
                        }
                        Op::Log(_) => 1.0 / xv[j],
                        _ => sigmoid(xv[j]),
                    };
                    gx[j] += g[j] * d;
                }
            }
        }
        &Op::Sum(x) | &Op::Mean(x) => {
            let n = val(x).numel();
            let s = if matches!(nodes[i].op, Op::Mean(_)) {
                g[0] / n as f64
            } else {
                g[0]
            };
            if let Some(gx) = acc(grads, nodes, x) {
                for o in gx.iter_mut() {
                    *o += s;
                }
            }
        }
        &Op::SumAxis { x, axis } => {
            let (outer, len, inner) = split_axis(val(x).shape(), axis);
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for l in 0..len {
                        for n in 0..inner {
                            gx[(o * len + l) * inner + n] += g[o * inner + n];
                        }
                    }
                }
            }
        }
        &Op::Softmax { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let yv = y.data();
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + n;
                        let dot: f64 = (0..len).map(|l| g[idx(l)] * yv[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] += yv[idx(l)] * (g[idx(l)] - dot);
                        }
                    }
                }
            }
        }
        &Op::MaskedSoftmax { x } => {
            let len = *y.shape().last().unwrap();
            let yv = y.data();
            if let Some(gx) = acc(grads, nodes, x) {
                for r in 0..yv.len() / len {
                    let row = r * len..(r + 1) * len;
                    let dot = kernels::dot(&g[row.clone()], &yv[row.clone()]);
                    for j in row {
                        gx[j] += yv[j] * (g[j] - dot);
                    }
                }
            }
        }
        &Op::LogSoftmax { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), axis);
            let yv = y.data();
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for n in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + n;
                        let gsum: f64 = (0..len).map(|l| g[idx(l)]).sum();
                        for l in 0..len {
                            gx[idx(l)] += g[idx(l)] - yv[idx(l)].exp() * gsum;
                        }
                    }
                }
            }
        }
        &Op::Matmul { a, b } | &Op::MatmulNt { a, b } => {
            let nt = matches!(nodes[i].op, Op::MatmulNt { .. });
            let (av, bv) = (val(a), val(b));
            let (geo, _) = mm_geom("matmul", av.shape(), bv.shape(), nt).expect("recorded");
            let MmGeom { batch, m, k, n, shared_b } = geo;
            let b_stride = if shared_b { 0 } else { k * n };
            let (ad, bd) = (av.data(), bv.data());
            if let Some(ga) = acc(grads, nodes, a) {
                for t in 0..batch {
                    let go = &g[t * m * n..(t + 1) * m * n];
                    let bs = &bd[t * b_stride..t * b_stride + k * n];
                    let out = &mut ga[t * m * k..(t + 1) * m * k];
                    if nt {
                        // b is [n×k]
                        kernels::gemm_acc(go, bs, out, m, n, k);
                    } else {
                        kernels::gemm_nt_acc(go, bs, out, m, n, k);
                    }
                }
            }
            if let Some(gb) = acc(grads, nodes, b) {
                for t in 0..batch {
                    let go = &g[t * m * n..(t + 1) * m * n];
                    let as_ = &ad[t * m * k..(t + 1) * m * k];
                    let out = &mut gb[t * b_stride..t * b_stride + k * n];
                    if nt {
                        kernels::gemm_tn_acc(go, as_, out, m, n, k);
                    } else {
                        kernels::gemm_tn_acc(as_, go, out, m, k, n);
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            let mut inv = vec![0; perm.len()];
            for (d, &p) in perm.iter().enumerate() {
                inv[p] = d;
            }
            let (back, _) = permute_data(g, y.shape(), &inv);
            if let Some(gx) = acc(grads, nodes, *x) {
                for (o, v) in gx.iter_mut().zip(back) {
                    *o += v;
                }
            }
        }
        &Op::Narrow { x, axis, start } => {
            let (outer, len, inner) = split_axis(val(x).shape(), axis);
            let olen = y.shape()[axis];
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for l in 0..olen {
                        let src = (o * olen + l) * inner;
                        let dst = (o * len + start + l) * inner;
                        for n in 0..inner {
                            gx[dst + n] += g[src + n];
                        }
                    }
                }
            }
        }
        Op::IndexSelect { x, axis, indices } => {
            let (outer, len, inner) = split_axis(val(*x).shape(), *axis);
            let olen = indices.len();
            if let Some(gx) = acc(grads, nodes, *x) {
                for o in 0..outer {
                    for (l, &src_l) in indices.iter().enumerate() {
                        let src = (o * olen + l) * inner;
                        let dst = (o * len + src_l) * inner;
                        for n in 0..inner {
                            gx[dst + n] += g[src + n];
                        }
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for &x in xs {
                let len = val(x).shape()[*axis];
                if let Some(gx) = acc(grads, nodes, x) {
                    for o in 0..outer {
                        for l in 0..len {
                            let src = (o * total + offset + l) * inner;
                            let dst = (o * len + l) * inner;
                            for n in 0..inner {
                                gx[dst + n] += g[src + n];
                            }
                        }
                    }
                }
                offset += len;
            }
        }
        &Op::Expand { x, axis } => {
            let (outer, len, inner) = split_axis(y.shape(), axis);
            if let Some(gx) = acc(grads, nodes, x) {
                for o in 0..outer {
                    for l in 0..len {
                        for n in 0..inner {
                            gx[o * inner + n] += g[(o * len + l) * inner + n];
                        }
                    }
                }
            }
        }
        &Op::Conv2d { x, w, b, stride } => {
            let (xv, wv) = (val(x), val(w));
            let (nb, cin, h, wd) = dims4(xv.shape());
            let cout = wv.shape()[0];
            let k = wv.shape()[2];
            let geo = ConvGeom::new(cin, h, wd, k, stride);
            let (rows, cols_n) = (geo.col_rows(), geo.col_cols());
            let mut cols = vec![0.0; rows * cols_n];
            let need_w = nodes[w].requires_grad;
            let need_x = nodes[x].requires_grad;
            let mut dcols = vec![0.0; rows * cols_n];
            for f in 0..nb {
                let go = &g[f * cout * cols_n..(f + 1) * cout * cols_n];
                if need_w {
                    let xf = &xv.data()[f * cin * h * wd..(f + 1) * cin * h * wd];
                    kernels::im2col(xf, &geo, &mut cols);
                    let gw = acc(grads, nodes, w).unwrap();
                    kernels::gemm_nt_acc(go, &cols, gw, cout, cols_n, rows);
                }
                if need_x {
                    dcols.iter_mut().for_each(|v| *v = 0.0);
                    kernels::gemm_tn_acc(wv.data(), go, &mut dcols, cout, rows, cols_n);
                    let gx = acc(grads, nodes, x).unwrap();
                    kernels::col2im(
                        &dcols,
                        &geo,
                        &mut gx[f * cin * h * wd..(f + 1) * cin * h * wd],
                    );
                }
            }
            if let Some(b) = b {
                if let Some(gb) = acc(grads, nodes, b) {
                    for f in 0..nb {
                        for c in 0..cout {
                            let s = f * cout * cols_n + c * cols_n;
                            gb[c] += g[s..s + cols_n].iter().sum::<f64>();
                        }
                    }
                }
            }
        }
        &Op::GlobalAvgPool(x) => {
            let (nb, c, h, w) = dims4(val(x).shape());
            let hw = h * w;
            if let Some(gx) = acc(grads, nodes, x) {
                for f in 0..nb * c {
                    let s = g[f] / hw as f64;
                    for o in &mut gx[f * hw..(f + 1) * hw] {
                        *o += s;
                    }
                }
            }
        }
        &Op::UpsampleNearest2x(x) => {
            let (nb, c, h, w) = dims4(val(x).shape());
            if let Some(gx) = acc(grads, nodes, x) {
                for f in 0..nb * c {
                    for oy in 0..2 * h {
                        for ox in 0..2 * w {
                            gx[(f * h + oy / 2) * w + ox / 2] += g[(f * 2 * h + oy) * 2 * w + ox];
                        }
                    }
                }
            }
        }
        &Op::UpsampleBilinear(x) => {
            let xs = val(x).shape();
            let r = xs.len();
            let (h, w) = (xs[r - 2], xs[r - 1]);
            let (oh, ow) = (y.shape()[r - 2], y.shape()[r - 1]);
            let planes = val(x).numel() / (h * w);
            let ty = kernels::linear_taps(h, oh);
            let tx = kernels::linear_taps(w, ow);
            if let Some(gx) = acc(grads, nodes, x) {
                for p in 0..planes {
                    let base = p * h * w;
                    for (oy, &(y0, y1, wy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, wx)) in tx.iter().enumerate() {
                            let gv = g[(p * oh + oy) * ow + ox];
                            gx[base + y0 * w + x0] += gv * (1.0 - wy) * (1.0 - wx);
                            gx[base + y0 * w + x1] += gv * (1.0 - wy) * wx;
                            gx[base + y1 * w + x0] += gv * wy * (1.0 - wx);
                            gx[base + y1 * w + x1] += gv * wy * wx;
                        }
                    }
                }
            }
        }
        &Op::LayerNorm { x, gamma, beta, eps } => {
            let xv = val(x).data();
            let gam = val(gamma).data();
            let n = gam.len();
            let rows = xv.len() / n;
            let mut dx = vec![0.0; xv.len()];
            let mut dgam = vec![0.0; n];
            let mut dbeta = vec![0.0; n];
            let mut xhat = vec![0.0; n];
            let mut dxhat = vec![0.0; n];
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let gr = &g[r * n..(r + 1) * n];
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    xhat[j] = (row[j] - mean) * rstd;
                    dxhat[j] = gr[j] * gam[j];
                    dgam[j] += gr[j] * xhat[j];
                    dbeta[j] += gr[j];
                }
                let m1 = dxhat.iter().sum::<f64>() / n as f64;
                let m2 = kernels::dot(&dxhat, &xhat) / n as f64;
                for j in 0..n {
                    dx[r * n + j] = rstd * (dxhat[j] - m1 - xhat[j] * m2);
                }
            }
            for (id, d) in [(x, dx), (gamma, dgam), (beta, dbeta)] {
                if let Some(gt) = acc(grads, nodes, id) {
                    for (o, v) in gt.iter_mut().zip(d) {
                        *o += v;
                    }
                }
            }
        }
        &Op::Cosine { a, b } => {
            let (av, bv) = (val(a).data(), val(b).data());
            let dot = kernels::dot(av, bv);
            let na_raw = kernels::dot(av, av).sqrt();
            let nb_raw = kernels::dot(bv, bv).sqrt();
            let (na, nb) = (na_raw.max(COSINE_EPS), nb_raw.max(COSINE_EPS));
            // d/da [dot / (na nb)] = b/(na nb) - dot a / (na^3 nb) when the floor is inactive
            for (id, this, other, n_this, n_other, raw) in
                [(a, av, bv, na, nb, na_raw), (b, bv, av, nb, na, nb_raw)]
            {
                if let Some(gt) = acc(grads, nodes, id) {
                    let floor_active = raw < COSINE_EPS;
                    for j in 0..this.len() {
                        let mut d = other[j] / (n_this * n_other);
                        if !floor_active {
                            d -= dot * this[j] / (n_this * n_this * n_this * n_other);
                        }
                        gt[j] += g[0] * d;
                    }
                }
            }
        }
    }
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    (s[0], s[1], s[2], s[3])
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn value(&self) -> Ref<'t, Tensor> {
        self.tape.value(self.id)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().data()[0]
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn same_tape(&self, other: &Var<'_>) {
        assert!(
            std::ptr::eq(self.tape, other.tape),
            "operands recorded on different tapes"
        );
    }

    fn binary(
        &self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            let swap = broadcast_shapes(name, a.shape(), b.shape())?;
            let (big, small) = if swap { (&*b, &*a) } else { (&*a, &*b) };
            let n = small.numel();
            let sd = small.data();
            let data: Vec<f64> = big
                .data()
                .iter()
                .enumerate()
                .map(|(j, &bv)| {
                    if swap {
                        f(sd[j % n], bv)
                    } else {
                        f(bv, sd[j % n])
                    }
                })
                .collect();
            Tensor::new(big.shape().to_vec(), data)?
        };
        self.tape.push(name, value, op)
    }

    /// Elementwise sum; `other` may be a trailing suffix of `self` (or vice versa).
    pub fn add(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    pub fn div(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    fn unary(&self, name: &'static str, f: impl Fn(f64) -> f64, op: Op) -> Result<Var<'t>> {
        let value = self.value().map(f);
        self.tape.push(name, value, op)
    }

    pub fn scale(&self, c: f64) -> Result<Var<'t>> {
        self.unary("scale", |v| c * v, Op::Scale(self.id, c))
    }

    pub fn neg(&self) -> Result<Var<'t>> {
        self.scale(-1.0)
    }

    pub fn add_scalar(&self, c: f64) -> Result<Var<'t>> {
        self.unary("add_scalar", |v| v + c, Op::AddScalar(self.id))
    }

    pub fn exp(&self) -> Result<Var<'t>> {
        self.unary("exp", f64::exp, Op::Exp(self.id))
    }

    pub fn log(&self) -> Result<Var<'t>> {
        self.unary("log", f64::ln, Op::Log(self.id))
    }

    pub fn sigmoid(&self) -> Result<Var<'t>> {
        self.unary("sigmoid", sigmoid, Op::Sigmoid(self.id))
    }

    pub fn relu(&self) -> Result<Var<'t>> {
        self.unary("relu", |v| v.max(0.0), Op::Relu(self.id))
    }

    pub fn softplus(&self) -> Result<Var<'t>> {
        self.unary("softplus", softplus, Op::Softplus(self.id))
    }

    pub fn sum(&self) -> Result<Var<'t>> {
        let s = self.value().data().iter().sum();
        self.tape.push("sum", Tensor::scalar(s), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        let v = self.value();
        let m = v.data().iter().sum::<f64>() / v.numel() as f64;
        drop(v);
        self.tape.push("mean", Tensor::scalar(m), Op::Mean(self.id))
    }

    fn check_axis(&self, axis: usize) -> Result<Vec<usize>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(shape)
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let value = {
            let x = self.value();
            let xd = x.data();
            let mut out = vec![0.0; outer * inner];
            for o in 0..outer {
                for l in 0..len {
                    for n in 0..inner {
                        out[o * inner + n] += xd[(o * len + l) * inner + n];
                    }
                }
            }
            let mut s = shape.clone();
            s.remove(axis);
            Tensor::new(s, out)?
        };
        self.tape.push("sum_axis", value, Op::SumAxis { x: self.id, axis })
    }

    fn axis_map(&self, axis: usize, f: impl Fn(&[f64], &mut [f64])) -> Result<Tensor> {
        let shape = self.check_axis(axis)?;
        let (outer, len, inner) = split_axis(&shape, axis);
        let x = self.value();
        let xd = x.data();
        let mut out = vec![0.0; xd.len()];
        let mut buf = vec![0.0; len];
        let mut res = vec![0.0; len];
        for o in 0..outer {
            for n in 0..inner {
                for l in 0..len {
                    buf[l] = xd[(o * len + l) * inner + n];
                }
                f(&buf, &mut res);
                for l in 0..len {
                    out[(o * len + l) * inner + n] = res[l];
                }
            }
        }
        Tensor::new(shape, out)
    }

    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = self.axis_map(axis, softmax_slice)?;
        self.tape.push("softmax", value, Op::Softmax { x: self.id, axis })
    }

    pub fn log_softmax(&self, axis: usize) -> Result<Var<'t>> {
        let value = self.axis_map(axis, |x, out| {
            let max = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for (o, v) in out.iter_mut().zip(x) {
                *o = v - lse;
            }
        })?;
        self.tape
            .push("log_softmax", value, Op::LogSoftmax { x: self.id, axis })
    }

    /// Softmax over the last axis restricted to entries where `keep` is true.
    /// Masked entries receive exactly zero weight; a row with no kept entry is an error.
    pub fn masked_softmax(&self, keep: &[bool]) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if keep.len() != x.numel() {
                return Err(Error::dim("masked_softmax", x.shape(), &[keep.len()]));
            }
            let len = *x.shape().last().unwrap_or(&1);
            let xd = x.data();
            let mut out = vec![0.0; xd.len()];
            for r in 0..xd.len() / len {
                let row = r * len..(r + 1) * len;
                let max = row
                    .clone()
                    .filter(|&j| keep[j])
                    .map(|j| xd[j])
                    .fold(f64::NEG_INFINITY, f64::max);
                if max == f64::NEG_INFINITY {
                    return Err(Error::Contract(format!(
                        "attention row {r} has every key masked"
                    )));
                }
                let mut sum = 0.0;
                for j in row.clone() {
                    if keep[j] {
                        out[j] = (xd[j] - max).exp();
                        sum += out[j];
                    }
                }
                for j in row {
                    out[j] /= sum;
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.tape
            .push("masked_softmax", value, Op::MaskedSoftmax { x: self.id })
    }

    fn mm(&self, other: Var<'t>, nt: bool) -> Result<Var<'t>> {
        self.same_tape(&other);
        let name = if nt { "matmul_nt" } else { "matmul" };
        let value = {
            let (a, b) = (self.value(), other.value());
            let (geo, out_shape) = mm_geom(name, a.shape(), b.shape(), nt)?;
            let MmGeom { batch, m, k, n, shared_b } = geo;
            let b_stride = if shared_b { 0 } else { k * n };
            let mut out = vec![0.0; batch * m * n];
            for t in 0..batch {
                let av = &a.data()[t * m * k..(t + 1) * m * k];
                let bv = &b.data()[t * b_stride..t * b_stride + k * n];
                let ov = &mut out[t * m * n..(t + 1) * m * n];
                if nt {
                    kernels::gemm_nt_acc(av, bv, ov, m, k, n);
                } else {
                    kernels::gemm_acc(av, bv, ov, m, k, n);
                }
            }
            Tensor::new(out_shape, out)?
        };
        let op = if nt {
            Op::MatmulNt { a: self.id, b: other.id }
        } else {
            Op::Matmul { a: self.id, b: other.id }
        };
        self.tape.push(name, value, op)
    }

    /// `[.., m, k] · [.., k, n]`; a rank-2 right operand is shared across the batch.
    pub fn matmul(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.mm(other, false)
    }

    /// `[.., m, k] · [.., n, k]ᵀ`.
    pub fn matmul_nt(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.mm(other, true)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len() || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("invalid permutation {perm:?} for {shape:?}")));
        }
        let value = {
            let x = self.value();
            let (data, out_shape) = permute_data(x.data(), x.shape(), perm);
            Tensor::new(out_shape, data)?
        };
        self.tape.push(
            "permute",
            value,
            Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        )
    }

    /// Swaps the last two axes.
    pub fn transpose(&self) -> Result<Var<'t>> {
        let r = self.shape().len();
        if r < 2 {
            return Err(Error::Shape("transpose needs rank >= 2".into()));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(&perm)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = self.to_tensor().reshape(shape.to_vec())?;
        self.tape.push("reshape", value, Op::Reshape(self.id))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        if start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "narrow {start}..{} exceeds axis {axis} of {shape:?}",
                start + len
            )));
        }
        let indices: Vec<usize> = (start..start + len).collect();
        let value = gather(&self.value(), axis, &indices)?;
        self.tape
            .push("narrow", value, Op::Narrow { x: self.id, axis, start })
    }

    pub fn index_select(&self, axis: usize, indices: &[usize]) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= shape[axis]) {
            return Err(Error::Shape(format!(
                "index {bad} out of range for axis {axis} of {shape:?}"
            )));
        }
        let value = gather(&self.value(), axis, indices)?;
        self.tape.push(
            "index_select",
            value,
            Op::IndexSelect {
                x: self.id,
                axis,
                indices: Rc::new(indices.to_vec()),
            },
        )
    }

    pub fn concat(xs: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = xs
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let tape = first.tape;
        let value = {
            let vals: Vec<Ref<Tensor>> = xs.iter().map(|v| v.value()).collect();
            let base = vals[0].shape().to_vec();
            if axis >= base.len() {
                return Err(Error::Shape(format!("concat axis {axis} for {base:?}")));
            }
            let mut total = 0;
            for v in &vals {
                let s = v.shape();
                if s.len() != base.len()
                    || s.iter().zip(&base).enumerate().any(|(d, (a, b))| d != axis && a != b)
                {
                    return Err(Error::dim("concat", &base, s));
                }
                total += s[axis];
            }
            let (outer, _, inner) = split_axis(&base, axis);
            let mut out = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let len = v.shape()[axis];
                    out.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
                }
            }
            let mut shape = base;
            shape[axis] = total;
            Tensor::new(shape, out)?
        };
        tape.push(
            "concat",
            value,
            Op::Concat {
                xs: xs.iter().map(|v| v.id).collect(),
                axis,
            },
        )
    }

    /// Repeats a size-1 `axis` `n` times.
    pub fn expand(&self, axis: usize, n: usize) -> Result<Var<'t>> {
        let shape = self.check_axis(axis)?;
        if shape[axis] != 1 {
            return Err(Error::Shape(format!(
                "expand needs extent 1 on axis {axis}, got {shape:?}"
            )));
        }
        let value = gather(&self.value(), axis, &vec![0; n])?;
        self.tape.push("expand", value, Op::Expand { x: self.id, axis })
    }

    /// Zero-padded cross-correlation: input `[N, Cin, H, W]`, weight `[Cout, Cin, k, k]`
    /// with odd `k`, optional bias `[Cout]`.
    pub fn conv2d(&self, weight: Var<'t>, bias: Option<Var<'t>>, stride: usize) -> Result<Var<'t>> {
        if stride < 1 {
            return Err(Error::Parameter("conv2d stride must be >= 1".into()));
        }
        let value = {
            let (x, w) = (self.value(), weight.value());
            let (xs, ws) = (x.shape(), w.shape());
            if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] {
                return Err(Error::dim("conv2d", xs, ws));
            }
            let k = ws[2];
            if k % 2 == 0 {
                return Err(Error::Parameter(format!("conv2d kernel size {k} must be odd")));
            }
            let (nb, cin, h, wd) = dims4(xs);
            let cout = ws[0];
            let geo = ConvGeom::new(cin, h, wd, k, stride);
            let (rows, ncols) = (geo.col_rows(), geo.col_cols());
            let bias_v = match bias {
                Some(b) => {
                    let bv = b.value();
                    if bv.shape() != [cout] {
                        return Err(Error::dim("conv2d bias", bv.shape(), &[cout]));
                    }
                    Some(bv.data().to_vec())
                }
                None => None,
            };
            let mut cols = vec![0.0; rows * ncols];
            let mut out = vec![0.0; nb * cout * ncols];
            for f in 0..nb {
                kernels::im2col(&x.data()[f * cin * h * wd..(f + 1) * cin * h * wd], &geo, &mut cols);
                let of = &mut out[f * cout * ncols..(f + 1) * cout * ncols];
                if let Some(bv) = &bias_v {
                    for c in 0..cout {
                        of[c * ncols..(c + 1) * ncols].iter_mut().for_each(|v| *v = bv[c]);
                    }
                }
                kernels::gemm_acc(w.data(), &cols, of, cout, rows, ncols);
            }
            Tensor::new([nb, cout, geo.ho, geo.wo], out)?
        };
        self.tape.push(
            "conv2d",
            value,
            Op::Conv2d {
                x: self.id,
                w: weight.id,
                b: bias.map(|b| b.id),
                stride,
            },
        )
    }

    /// Spatial mean of `[N, C, H, W]` giving `[N, C]`.
    pub fn global_avg_pool(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() != 4 {
                return Err(Error::Shape(format!("global_avg_pool needs rank 4, got {:?}", x.shape())));
            }
            let (nb, c, h, w) = dims4(x.shape());
            let hw = h * w;
            let data = x
                .data()
                .chunks(hw)
                .map(|p| p.iter().sum::<f64>() / hw as f64)
                .collect();
            Tensor::new([nb, c], data)?
        };
        self.tape.push("global_avg_pool", value, Op::GlobalAvgPool(self.id))
    }

    pub fn upsample_nearest2x(&self) -> Result<Var<'t>> {
        let value = {
            let x = self.value();
            if x.rank() != 4 {
                return Err(Error::Shape(format!("upsample needs rank 4, got {:?}", x.shape())));
            }
            let (nb, c, h, w) = dims4(x.shape());
            let xd = x.data();
            let mut out = Vec::with_capacity(4 * xd.len());
            for f in 0..nb * c {
                for oy in 0..2 * h {
                    for ox in 0..2 * w {
                        out.push(xd[(f * h + oy / 2) * w + ox / 2]);
                    }
                }
            }
            Tensor::new([nb, c, 2 * h, 2 * w], out)?
        };
        self.tape
            .push("upsample_nearest2x", value, Op::UpsampleNearest2x(self.id))
    }

    /// Bilinear resize of the last two axes, half-pixel centres.
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Result<Var<'t>> {
        let value = bilinear_resize(&self.value(), oh, ow)?;
        self.tape
            .push("upsample_bilinear", value, Op::UpsampleBilinear(self.id))
    }

    /// Normalises the last axis, then applies elementwise `gamma` and `beta`.
    pub fn layer_norm(&self, gamma: Var<'t>, beta: Var<'t>, eps: f64) -> Result<Var<'t>> {
        let value = {
            let (x, g, b) = (self.value(), gamma.value(), beta.value());
            let n = g.numel();
            if x.shape().last() != Some(&n) || b.numel() != n {
                return Err(Error::dim("layer_norm", x.shape(), g.shape()));
            }
            let mut out = vec![0.0; x.numel()];
            for (row, o) in x.data().chunks(n).zip(out.chunks_mut(n)) {
                let mean = row.iter().sum::<f64>() / n as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                let rstd = 1.0 / (var + eps).sqrt();
                for j in 0..n {
                    o[j] = (row[j] - mean) * rstd * g.data()[j] + b.data()[j];
                }
            }
            Tensor::new(x.shape().to_vec(), out)?
        };
        self.tape.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x: self.id,
                gamma: gamma.id,
                beta: beta.id,
                eps,
            },
        )
    }

    /// ⟨a,b⟩ / (max(‖a‖,ε)·max(‖b‖,ε)) as a scalar.
    pub fn cosine_similarity(&self, other: Var<'t>) -> Result<Var<'t>> {
        self.same_tape(&other);
        let value = {
            let (a, b) = (self.value(), other.value());
            if a.shape() != b.shape() {
                return Err(Error::dim("cosine_similarity", a.shape(), b.shape()));
            }
            Tensor::scalar(super::cosine(a.data(), b.data(), COSINE_EPS))
        };
        self.tape.push(
            "cosine_similarity",
            value,
            Op::Cosine {
                a: self.id,
                b: other.id,
            },
        )
    }
}

fn gather(x: &Tensor, axis: usize, indices: &[usize]) -> Result<Tensor> {
    let (outer, len, inner) = split_axis(x.shape(), axis);
    let xd = x.data();
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &l in indices {
            let s = (o * len + l) * inner;
            out.extend_from_slice(&xd[s..s + inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Tensor::new(shape, out)
}

/// Bilinear resize of the last two axes of a plain tensor, half-pixel centres.
pub fn bilinear_resize(x: &Tensor, oh: usize, ow: usize) -> Result<Tensor> {
    let xs = x.shape();
    let r = xs.len();
    if r < 2 || oh == 0 || ow == 0 {
        return Err(Error::Shape(format!("bilinear resize of {xs:?} to {oh}x{ow}")));
    }
    let (h, w) = (xs[r - 2], xs[r - 1]);
    let planes = x.numel() / (h * w);
    let ty = kernels::linear_taps(h, oh);
    let tx = kernels::linear_taps(w, ow);
    let xd = x.data();
    let mut out = Vec::with_capacity(planes * oh * ow);
    for p in 0..planes {
        let base = p * h * w;
        for &(y0, y1, wy) in &ty {
            for &(x0, x1, wx) in &tx {
                let top = xd[base + y0 * w + x0] * (1.0 - wx) + xd[base + y0 * w + x1] * wx;
                let bot = xd[base + y1 * w + x0] * (1.0 - wx) + xd[base + y1 * w + x1] * wx;
                out.push(top * (1.0 - wy) + bot * wy);
            }
        }
    }
    let mut shape = xs.to_vec();
    shape[r - 2] = oh;
    shape[r - 1] = ow;
    Tensor::new(shape, out)
}
