//! Tape-based reverse-mode automatic differentiation.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Every
//! operation evaluates eagerly and rejects non-finite results.

use rayon::prelude::*;

use super::tensor::{matmul_acc, matmul_at_acc, matmul_bt_acc, Tensor};
use super::TensorError;

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    MatMul(Var, Var),
    Exp(Var),
    Ln(Var),
    Relu(Var),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    MaxAxis { x: Var, argmax: Vec<usize> },
    NormAxis(Var, usize),
    Dot(Var, Var),
    Broadcast { x: Var, source: Vec<usize> },
    Concat { parts: Vec<Var>, axis: usize },
    Conv2d { x: Var, w: Var, geom: ConvGeom },
    MeanPool(Var),
    Reshape(Var),
    Transpose(Var),
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    needs_grad: bool,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeom {
    batch: usize,
    in_ch: usize,
    h: usize,
    w: usize,
    out_ch: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    out_h: usize,
    out_w: usize,
}

impl ConvGeom {
    fn patch(&self) -> usize {
        self.in_ch * self.kh * self.kw
    }

    fn positions(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// A single-use computation graph.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    adjoints: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.adjoints.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient with respect to `v`, zero-filled when `v` did not influence the root.
    pub fn wrt(&self, v: Var) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[v.0]))
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn without_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    s.remove(axis);
    s
}

/// For each element of `target`, the flat index of the `source` element it
/// reads under trailing-dimension broadcasting.
fn broadcast_map(source: &[usize], target: &[usize]) -> Option<Vec<usize>> {
    if source.len() > target.len() {
        return None;
    }
    let lead = target.len() - source.len();
    let mut strides = vec![0usize; target.len()];
    let mut acc = 1;
    for i in (0..source.len()).rev() {
        let (s, t) = (source[i], target[lead + i]);
        if s == t {
            strides[lead + i] = acc;
        } else if s != 1 {
            return None;
        }
        acc *= s;
    }
    let numel: usize = target.iter().product();
    let mut map = Vec::with_capacity(numel);
    let mut idx = vec![0usize; target.len()];
    for _ in 0..numel {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..target.len()).rev() {
            idx[d] += 1;
            if idx[d] < target[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Some(map)
}

fn im2col(x: &[f64], g: &ConvGeom) -> Vec<f64> {
    let positions = g.positions();
    let mut cols = vec![0.0; g.patch() * positions];
    for c in 0..g.in_ch {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let src_row = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            dst[oy * g.out_w + ox] = src_row[ix as usize];
                        }
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeom, dx: &mut [f64]) {
    let positions = g.positions();
    for c in 0..g.in_ch {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * positions..(row + 1) * positions];
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for ox in 0..g.out_w {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix >= 0 && ix < g.w as isize {
                            plane[iy as usize * g.w + ix as usize] += src[oy * g.out_w + ox];
                        }
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Tensor>], v: Var, grad: Tensor) {
    match &mut adj[v.0] {
        Some(existing) => {
            for (e, g) in existing.data_mut().iter_mut().zip(grad.data()) {
                *e += g;
            }
        }
        slot @ None => *slot = Some(grad),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Constant leaf; no gradient is propagated into it.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Input,
            value: t,
            needs_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            op: Op::Param,
            value: t,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant copy of `v`'s current value (stop-gradient).
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.nodes[v.0].value.clone();
        self.input(t)
    }

    fn next_id(&self) -> usize {
        self.nodes.len()
    }

    fn mismatch(&self, op: &'static str, detail: String) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            node: self.next_id(),
            detail,
        }
    }

    fn push(&mut self, name: &'static str, op: Op, value: Tensor) -> Result<Var, TensorError> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite {
                op: name,
                node: self.next_id(),
            });
        }
        let needs_grad = self.parents(&op).iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            op,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn parents(&self, op: &Op) -> Vec<Var> {
        match op {
            Op::Input | Op::Param => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::MatMul(a, b)
            | Op::Dot(a, b) => vec![*a, *b],
            Op::Conv2d { x, w, .. } => vec![*x, *w],
            Op::Scale(x, _)
            | Op::Offset(x)
            | Op::Exp(x)
            | Op::Ln(x)
            | Op::Relu(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::SumAxis(x, _)
            | Op::NormAxis(x, _)
            | Op::MeanPool(x)
            | Op::Reshape(x)
            | Op::Transpose(x) => vec![*x],
            Op::MaxAxis { x, .. } | Op::Broadcast { x, .. } => vec![*x],
            Op::Concat { parts, .. } => parts.clone(),
        }
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(self.mismatch(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, op, value)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.zip_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Multiply by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v * c);
        self.push("scale", Op::Scale(x, c), value)
    }

    /// Add a constant.
    pub fn offset(&mut self, x: Var, c: f64) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v + c);
        self.push("offset", Op::Offset(x), value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.mismatch("matmul", format!("{:?} x {:?}", ta.shape(), tb.shape())));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), m, k, n, &mut out);
        self.push("matmul", Op::MatMul(a, b), Tensor::from_parts(vec![m, n], out))
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(f64::exp);
        self.push("exp", Op::Exp(x), value)
    }

    pub fn ln(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(f64::ln);
        self.push("ln", Op::Ln(x), value)
    }

    /// Rectifier; the subgradient at exactly zero is taken as zero.
    pub fn relu(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push("relu", Op::Relu(x), value)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, TensorError> {
        let value = Tensor::scalar(self.value(x).sum());
        self.push("sum", Op::Sum(x), value)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        let value = Tensor::scalar(t.sum() / t.numel() as f64);
        self.push("mean", Op::Mean(x), value)
    }

    fn check_axis(&self, name: &'static str, x: Var, axis: usize) -> Result<(), TensorError> {
        let shape = self.value(x).shape();
        if axis >= shape.len() {
            return Err(self.mismatch(name, format!("axis {axis} out of range for {shape:?}")));
        }
        Ok(())
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("sum_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += t.data()[(o * len + l) * inner + i];
                }
            }
        }
        let value = Tensor::from_parts(without_axis(t.shape(), axis), out);
        self.push("sum_axis", Op::SumAxis(x, axis), value)
    }

    /// Maximum along `axis` (removing it). The gradient flows to the first
    /// maximal element.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let (value, argmax) = self.max_with_index(x, axis)?;
        self.push("max_axis", Op::MaxAxis { x, argmax }, value)
    }

    /// Maximum values along `axis` together with the flat source index of each.
    pub fn max_with_index(&self, x: Var, axis: usize) -> Result<(Tensor, Vec<usize>), TensorError> {
        self.check_axis("max_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let mut best = (o * len) * inner + i;
                for l in 1..len {
                    let idx = (o * len + l) * inner + i;
                    if t.data()[idx] > t.data()[best] {
                        best = idx;
                    }
                }
                out.push(t.data()[best]);
                argmax.push(best);
            }
        }
        Ok((Tensor::from_parts(without_axis(t.shape(), axis), out), argmax))
    }

    /// Euclidean norm along `axis`, removing it.
    pub fn norm_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        self.check_axis("norm_axis", x, axis)?;
        let t = self.value(x);
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    let v = t.data()[(o * len + l) * inner + i];
                    out[o * inner + i] += v * v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = v.sqrt());
        let value = Tensor::from_parts(without_axis(t.shape(), axis), out);
        self.push("norm_axis", Op::NormAxis(x, axis), value)
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 1 || ta.shape() != tb.shape() {
            return Err(self.mismatch("dot", format!("{:?} . {:?}", ta.shape(), tb.shape())));
        }
        let d: f64 = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).sum();
        self.push("dot", Op::Dot(a, b), Tensor::scalar(d))
    }

    /// Broadcast to `shape` by aligning trailing dimensions; size-1 and
    /// missing leading dimensions are repeated.
    pub fn broadcast(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x);
        let Some(map) = broadcast_map(t.shape(), shape) else {
            return Err(self.mismatch("broadcast", format!("{:?} -> {shape:?}", t.shape())));
        };
        let data = map.iter().map(|&i| t.data()[i]).collect();
        let source = t.shape().to_vec();
        self.push(
            "broadcast",
            Op::Broadcast { x, source },
            Tensor::from_parts(shape.to_vec(), data),
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, TensorError> {
        let Some(&first) = parts.first() else {
            return Err(self.mismatch("concat", "no inputs".into()));
        };
        self.check_axis("concat", first, axis)?;
        let base = self.value(first).shape().to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            if s.len() != base.len()
                || s.iter().enumerate().any(|(i, &d)| i != axis && d != base[i])
            {
                return Err(self.mismatch("concat", format!("{base:?} vs {s:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let chunk = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        self.push(
            "concat",
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(shape, data),
        )
    }

    /// 2-D cross-correlation of `x: [B, C, H, W]` with `w: [O, C, kh, kw]`,
    /// symmetric zero padding `pad`, giving `[B, O, H', W']`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var, TensorError> {
        let (tx, tw) = (self.value(x), self.value(w));
        let (xs, ws) = (tx.shape(), tw.shape());
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(self.mismatch("conv2d", format!("input {xs:?}, kernel {ws:?}")));
        }
        let (h, wd, kh, kw) = (xs[2], xs[3], ws[2], ws[3]);
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return Err(self.mismatch("conv2d", format!("kernel {ws:?} larger than padded input {xs:?}")));
        }
        let geom = ConvGeom {
            batch: xs[0],
            in_ch: xs[1],
            h,
            w: wd,
            out_ch: ws[0],
            kh,
            kw,
            stride,
            pad,
            out_h: (h + 2 * pad - kh) / stride + 1,
            out_w: (wd + 2 * pad - kw) / stride + 1,
        };
        let in_plane = geom.in_ch * h * wd;
        let out_plane = geom.out_ch * geom.positions();
        let outputs: Vec<Vec<f64>> = (0..geom.batch)
            .into_par_iter()
            .map(|b| {
                let cols = im2col(&tx.data()[b * in_plane..(b + 1) * in_plane], &geom);
                let mut out = vec![0.0; out_plane];
                matmul_acc(tw.data(), &cols, geom.out_ch, geom.patch(), geom.positions(), &mut out);
                out
            })
            .collect();
        let value = Tensor::from_parts(
            vec![geom.batch, geom.out_ch, geom.out_h, geom.out_w],
            outputs.concat(),
        );
        self.push("conv2d", Op::Conv2d { x, w, geom }, value)
    }

    /// Spatial mean of `[B, C, H, W]`, giving `[B, C]`.
    pub fn mean_pool(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 4 {
            return Err(self.mismatch("mean_pool", format!("{:?}", t.shape())));
        }
        let s = t.shape();
        let area = s[2] * s[3];
        let data = t
            .data()
            .chunks(area)
            .map(|c| c.iter().sum::<f64>() / area as f64)
            .collect();
        let value = Tensor::from_parts(vec![s[0], s[1]], data);
        self.push("mean_pool", Op::MeanPool(x), value)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(x).clone();
        let from = t.shape().to_vec();
        let value = t
            .reshape(shape)
            .map_err(|_| self.mismatch("reshape", format!("{from:?} -> {shape:?}")))?;
        self.push("reshape", Op::Reshape(x), value)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, TensorError> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(self.mismatch("transpose", format!("{:?}", t.shape())));
        }
        let value = t.transpose2();
        self.push("transpose", Op::Transpose(x), value)
    }

    /// Divide each slice along `axis` by its Euclidean norm.
    pub fn normalize_axis(&mut self, x: Var, axis: usize) -> Result<Var, TensorError> {
        let shape = self.value(x).shape().to_vec();
        let norms = self.norm_axis(x, axis)?;
        let mut kept = shape.clone();
        kept[axis] = 1;
        let norms = self.reshape(norms, &kept)?;
        let norms = self.broadcast(norms, &shape)?;
        self.div(x, norms)
    }

    /// Reverse sweep from a one-element `root`.
    pub fn backward(&self, root: Var) -> Result<Gradients, TensorError> {
        let root_value = self.value(root);
        if root_value.numel() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[root.0] = Some(Tensor::full(root_value.shape(), 1.0));
        for id in (0..=root.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[id].take() else { continue };
            self.propagate(node, &g, &mut adj);
            adj[id] = Some(g);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients {
            adjoints: adj,
            shapes,
        })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, node: &Node, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let out = &node.value;
        let like = |v: Var, data: Vec<f64>| Tensor::from_parts(self.value(v).shape().to_vec(), data);
        match &node.op {
            Op::Input | Op::Param => {}
            Op::Add(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.clone());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    accumulate(adj, *a, g.clone());
                }
                if self.wants(*b) {
                    accumulate(adj, *b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    accumulate(adj, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = g.data().iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    accumulate(adj, *b, like(*b, d));
                }
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let d = g.data().iter().zip(tb.data()).map(|(g, y)| g / y).collect();
                    accumulate(adj, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let d = g
                        .data()
                        .iter()
                        .zip(ta.data().iter().zip(tb.data()))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    accumulate(adj, *b, like(*b, d));
                }
            }
            Op::Scale(x, c) => accumulate(adj, *x, g.map(|v| v * c)),
            Op::Offset(x) => accumulate(adj, *x, g.clone()),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.wants(*a) {
                    let mut d = vec![0.0; m * k];
                    matmul_bt_acc(g.data(), tb.data(), m, n, k, &mut d);
                    accumulate(adj, *a, like(*a, d));
                }
                if self.wants(*b) {
                    let mut d = vec![0.0; k * n];
                    matmul_at_acc(ta.data(), g.data(), m, k, n, &mut d);
                    accumulate(adj, *b, like(*b, d));
                }
            }
            Op::Exp(x) => {
                let d = g.data().iter().zip(out.data()).map(|(g, e)| g * e).collect();
                accumulate(adj, *x, like(*x, d));
            }
            Op::Ln(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, v)| g / v)
                    .collect();
                accumulate(adj, *x, like(*x, d));
            }
            Op::Relu(x) => {
                let d = g
                    .data()
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(g, &v)| if v > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(adj, *x, like(*x, d));
            }
            Op::Sum(x) => {
                let shape = self.value(*x).shape();
                accumulate(adj, *x, Tensor::full(shape, g.data()[0]));
            }
            Op::Mean(x) => {
                let t = self.value(*x);
                accumulate(adj, *x, Tensor::full(t.shape(), g.data()[0] / t.numel() as f64));
            }
            Op::SumAxis(x, axis) => {
                let shape = self.value(*x).shape();
                let (outer, len, inner) = split_axis(shape, *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            d[(o * len + l) * inner + i] = g.data()[o * inner + i];
                        }
                    }
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::MaxAxis { x, argmax } => {
                let mut d = vec![0.0; self.value(*x).numel()];
                for (&src, &gv) in argmax.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::NormAxis(x, axis) => {
                let t = self.value(*x);
                let (outer, len, inner) = split_axis(t.shape(), *axis);
                let mut d = vec![0.0; t.numel()];
                for o in 0..outer {
                    for i in 0..inner {
                        let norm = out.data()[o * inner + i];
                        if norm == 0.0 {
                            continue;
                        }
                        let scale = g.data()[o * inner + i] / norm;
                        for l in 0..len {
                            let idx = (o * len + l) * inner + i;
                            d[idx] = scale * t.data()[idx];
                        }
                    }
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::Dot(a, b) => {
                let gv = g.data()[0];
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    accumulate(adj, *a, tb.map(|v| v * gv));
                }
                if self.wants(*b) {
                    accumulate(adj, *b, ta.map(|v| v * gv));
                }
            }
            Op::Broadcast { x, source } => {
                let map = broadcast_map(source, out.shape()).expect("validated in forward");
                let mut d = vec![0.0; source.iter().product()];
                for (&src, &gv) in map.iter().zip(g.data()) {
                    d[src] += gv;
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).shape()[*axis];
                    if self.wants(p) {
                        let mut d = Vec::with_capacity(outer * len * inner);
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            d.extend_from_slice(&g.data()[start..start + len * inner]);
                        }
                        accumulate(adj, p, like(p, d));
                    }
                    offset += len;
                }
            }
            Op::Conv2d { x, w, geom } => self.conv_backward(*x, *w, geom, g, adj),
            Op::MeanPool(x) => {
                let s = self.value(*x).shape();
                let area = s[2] * s[3];
                let mut d = Vec::with_capacity(s.iter().product());
                for &gv in g.data() {
                    d.extend(std::iter::repeat_n(gv / area as f64, area));
                }
                accumulate(adj, *x, like(*x, d));
            }
            Op::Reshape(x) => accumulate(adj, *x, like(*x, g.data().to_vec())),
            Op::Transpose(x) => accumulate(adj, *x, g.transpose2()),
        }
    }

    fn conv_backward(&self, x: Var, w: Var, geom: &ConvGeom, g: &Tensor, adj: &mut [Option<Tensor>]) {
        let (tx, tw) = (self.value(x), self.value(w));
        let in_plane = geom.in_ch * geom.h * geom.w;
        let out_plane = geom.out_ch * geom.positions();
        let (want_x, want_w) = (self.wants(x), self.wants(w));
        let per_sample: Vec<(Option<Vec<f64>>, Option<Vec<f64>>)> = (0..geom.batch)
            .into_par_iter()
            .map(|b| {
                let gb = &g.data()[b * out_plane..(b + 1) * out_plane];
                let dw = want_w.then(|| {
                    let cols = im2col(&tx.data()[b * in_plane..(b + 1) * in_plane], geom);
                    let mut dw = vec![0.0; geom.out_ch * geom.patch()];
                    matmul_bt_acc(gb, &cols, geom.out_ch, geom.positions(), geom.patch(), &mut dw);
                    dw
                });
                let dx = want_x.then(|| {
                    let mut dcols = vec![0.0; geom.patch() * geom.positions()];
                    matmul_at_acc(tw.data(), gb, geom.out_ch, geom.patch(), geom.positions(), &mut dcols);
                    let mut dx = vec![0.0; in_plane];
                    col2im(&dcols, geom, &mut dx);
                    dx
                });
                (dx, dw)
            })
            .collect();
        if want_w {
            let mut dw = vec![0.0; tw.numel()];
            for (_, part) in &per_sample {
                for (acc, v) in dw.iter_mut().zip(part.as_ref().expect("computed")) {
                    *acc += v;
                }
            }
            accumulate(adj, w, Tensor::from_parts(tw.shape().to_vec(), dw));
        }
        if want_x {
            let mut dx = Vec::with_capacity(tx.numel());
            for (part, _) in per_sample {
                dx.extend(part.expect("computed"));
            }
            accumulate(adj, x, Tensor::from_parts(tx.shape().to_vec(), dx));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn ln_inverts_exp() {
        let mut g = Graph::new();
        let x = g.input(Tensor::scalar(3.7));
        let e = g.exp(x).unwrap();
        let l = g.ln(e).unwrap();
        assert!(close(g.value(l).data()[0], 3.7, 1e-12));
    }

    #[test]
    fn matmul_against_hand_product() {
        let mut g = Graph::new();
        let a = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let b = g.input(Tensor::matrix(3, 2, vec![1.0, 0.0, 0.0, 1.0, 0.0, 0.0]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 2.0, 4.0, 5.0]);
    }

    #[test]
    fn matmul_rejects_bad_inner_dims() {
        let mut g = Graph::new();
        let a = g.input(Tensor::zeros(&[2, 3]));
        let b = g.input(Tensor::zeros(&[2, 3]));
        match g.matmul(a, b) {
            Err(TensorError::ShapeMismatch { op, node, .. }) => {
                assert_eq!(op, "matmul");
                assert_eq!(node, 2);
            }
            other => panic!("expected mismatch, got {other:?}"),
        }
    }

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.wrt(x).data(), &[6.0]);
    }

    #[test]
    fn relu_sum_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[-1.0, 2.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(x).data(), &[0.0, 1.0]);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[0.0]));
        let r = g.relu(x).unwrap();
        let s = g.sum(r).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[0.0]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0]));
        let y = g.exp(x).unwrap();
        assert!(matches!(g.backward(y), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn non_finite_results_are_rejected() {
        let mut g = Graph::new();
        let x = g.input(Tensor::vector(&[0.0]));
        assert!(matches!(g.ln(x), Err(TensorError::NonFinite { op: "ln", .. })));
    }

    #[test]
    fn broadcast_row_vector() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(&[1.0, 2.0, 3.0]));
        let b = g.broadcast(x, &[2, 3]).unwrap();
        assert_eq!(g.value(b).data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = g.sum(b).unwrap();
        assert_eq!(g.backward(s).unwrap().wrt(x).data(), &[2.0, 2.0, 2.0]);
        assert!(g.broadcast(x, &[3, 2]).is_err());
    }

    #[test]
    fn concat_splits_gradient() {
        let mut g = Graph::new();
        let a = g.param(Tensor::matrix(2, 1, vec![1.0, 2.0]).unwrap());
        let b = g.param(Tensor::matrix(2, 2, vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
        let w = g.input(Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let p = g.mul(c, w).unwrap();
        let s = g.sum(p).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.wrt(a).data(), &[1.0, 4.0]);
        assert_eq!(grads.wrt(b).data(), &[2.0, 3.0, 5.0, 6.0]);
    }

    #[test]
    fn conv_identity_kernel_copies_input() {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[1, 1, 2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap());
        let mut k = vec![0.0; 9];
        k[4] = 1.0;
        let w = g.param(Tensor::new(&[1, 1, 3, 3], k).unwrap());
        let y = g.conv2d(x, w, 1, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[1, 1, 2, 3]);
        assert_eq!(g.value(y).data(), g.value(x).data());
    }

    #[test]
    fn strided_conv_output_shape() {
        let mut g = Graph::new();
        let x = g.input(Tensor::zeros(&[2, 3, 9, 8]));
        let w = g.param(Tensor::zeros(&[4, 3, 3, 3]));
        let y = g.conv2d(x, w, 2, 1).unwrap();
        assert_eq!(g.value(y).shape(), &[2, 4, 5, 4]);
        let bad = g.param(Tensor::zeros(&[4, 2, 3, 3]));
        assert!(g.conv2d(x, bad, 1, 1).is_err());
    }

    #[test]
    fn max_axis_routes_to_first_maximum() {
        let mut g = Graph::new();
        let x = g.param(Tensor::matrix(2, 3, vec![1.0, 5.0, 5.0, 7.0, 0.0, 2.0]).unwrap());
        let m = g.max_axis(x, 1).unwrap();
        assert_eq!(g.value(m).data(), &[5.0, 7.0]);
        let s = g.sum(m).unwrap();
        assert_eq!(
            g.backward(s).unwrap().wrt(x).data(),
            &[0.0, 1.0, 0.0, 1.0, 0.0, 0.0]
        );
    }

    #[test]
    fn detach_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.0));
        let d = g.detach(x);
        let y = g.mul(x, d).unwrap();
        assert_eq!(g.backward(y).unwrap().wrt(x).data(), &[2.0]);
    }
}
