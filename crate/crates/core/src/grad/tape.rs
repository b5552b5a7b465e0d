use std::collections::HashMap;

use super::kernel::gemm;
use super::tensor::Tensor;
use crate::error::{dim_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

/// Primitive operations the tape knows how to differentiate.
#[derive(Clone, Debug, PartialEq)]
pub enum Primitive {
    /// Elementwise sum; the second operand may be broadcast over leading axes.
    Add,
    Sub,
    Mul,
    /// `[.., n, k] x [k, m]` or batched `[B, n, k] x [B, k, m]`.
    MatMul,
    /// Swap the last two axes.
    Transpose,
    Concat { axis: usize },
    Slice { axis: usize, start: usize, len: usize },
    /// Gather along axis 0; indices may repeat.
    IndexSelect { indices: Vec<usize> },
    Reshape { shape: Vec<usize> },
    MeanAll,
    Relu,
    Tanh,
    /// Unit-normalize along the last axis.
    L2Normalize,
    Scale(f64),
    /// Softmax along the last axis.
    SoftmaxRows,
    /// Mean cross-entropy of `[N, C]` logits against class targets.
    SoftmaxCe { targets: Vec<usize> },
}

#[derive(Debug)]
enum Saved {
    None,
    /// Row norms for `L2Normalize`.
    Norms(Vec<f64>),
    /// Softmax probabilities for `SoftmaxCe`.
    Probs(Tensor),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Option<Primitive>,
    inputs: Vec<usize>,
    requires_grad: bool,
    saved: Saved,
}

/// Define-by-run reverse-mode tape. Nodes are appended in evaluation order,
/// so every node's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar loss with respect to the trainable leaves of a tape.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<usize, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v.0)
    }

    pub fn get_mut(&mut self, v: Var) -> Option<&mut Tensor> {
        self.grads.get_mut(&v.0)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

const NORM_EPS: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient (data, frozen weights).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            inputs: Vec::new(),
            requires_grad,
            saved: Saved::None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Evaluate `op` on `inputs` and append it to the tape.
    pub fn record(&mut self, op: Primitive, inputs: &[Var]) -> Result<Var> {
        let arity = match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul | Primitive::MatMul => Some(2),
            Primitive::Concat { .. } => None,
            _ => Some(1),
        };
        if let Some(n) = arity {
            if inputs.len() != n {
                return Err(Error::Usage(format!(
                    "{:?} takes {} inputs, got {}",
                    op,
                    n,
                    inputs.len()
                )));
            }
        } else if inputs.is_empty() {
            return Err(Error::Usage("concat needs at least one input".into()));
        }
        let (value, saved) = self.forward(&op, inputs)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: Some(op),
            inputs: inputs.iter().map(|v| v.0).collect(),
            requires_grad,
            saved,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Add, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::Mul, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Primitive::MatMul, &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Transpose, &[a])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.record(Primitive::Concat { axis }, parts)
    }

    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.record(Primitive::Slice { axis, start, len }, &[a])
    }

    pub fn index_select(&mut self, a: Var, indices: Vec<usize>) -> Result<Var> {
        self.record(Primitive::IndexSelect { indices }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        self.record(
            Primitive::Reshape {
                shape: shape.to_vec(),
            },
            &[a],
        )
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::MeanAll, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Relu, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::Tanh, &[a])
    }

    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::L2Normalize, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        self.record(Primitive::Scale(factor), &[a])
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        self.record(Primitive::SoftmaxRows, &[a])
    }

    pub fn softmax_ce(&mut self, logits: Var, targets: Vec<usize>) -> Result<Var> {
        self.record(Primitive::SoftmaxCe { targets }, &[logits])
    }

    fn forward(&self, op: &Primitive, inputs: &[Var]) -> Result<(Tensor, Saved)> {
        let x = &self.nodes[inputs[0].0].value;
        let out = match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let y = &self.nodes[inputs[1].0].value;
                check_broadcast(x.shape(), y.shape())?;
                let yd = y.data();
                let period = yd.len().max(1);
                let data = x
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &a)| {
                        let b = yd[i % period];
                        match op {
                            Primitive::Add => a + b,
                            Primitive::Sub => a - b,
                            _ => a * b,
                        }
                    })
                    .collect();
                Tensor::new(x.shape().to_vec(), data)?
            }
            Primitive::MatMul => matmul_forward(x, &self.nodes[inputs[1].0].value)?,
            Primitive::Transpose => transpose_last(x)?,
            Primitive::Concat { axis } => {
                let parts: Vec<&Tensor> = inputs.iter().map(|v| &self.nodes[v.0].value).collect();
                concat_forward(&parts, *axis)?
            }
            Primitive::Slice { axis, start, len } => slice_forward(x, *axis, *start, *len)?,
            Primitive::IndexSelect { indices } => index_select_forward(x, indices)?,
            Primitive::Reshape { shape } => x.clone().reshaped(shape)?,
            Primitive::MeanAll => {
                if x.numel() == 0 {
                    return Err(dim_err!("mean_all of an empty tensor"));
                }
                Tensor::scalar(x.mean())
            }
            Primitive::Relu => x.map(|v| v.max(0.0)),
            Primitive::Tanh => x.map(f64::tanh),
            Primitive::Scale(f) => x.map(|v| v * f),
            Primitive::L2Normalize => {
                let w = last_dim(x)?;
                let mut data = x.data().to_vec();
                let mut norms = Vec::with_capacity(data.len() / w.max(1));
                for row in data.chunks_mut(w.max(1)) {
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let d = n.max(NORM_EPS);
                    row.iter_mut().for_each(|v| *v /= d);
                    norms.push(n);
                }
                return Ok((Tensor::new(x.shape().to_vec(), data)?, Saved::Norms(norms)));
            }
            Primitive::SoftmaxRows => {
                let w = last_dim(x)?;
                let mut data = x.data().to_vec();
                for row in data.chunks_mut(w.max(1)) {
                    softmax_in_place(row);
                }
                Tensor::new(x.shape().to_vec(), data)?
            }
            Primitive::SoftmaxCe { targets } => {
                if x.rank() != 2 {
                    return Err(dim_err!("softmax_ce needs [N, C] logits, got {:?}", x.shape()));
                }
                let (n, c) = (x.shape()[0], x.shape()[1]);
                if targets.len() != n || n == 0 {
                    return Err(dim_err!("softmax_ce: {} targets for {} rows", targets.len(), n));
                }
                let mut probs = x.data().to_vec();
                let mut loss = 0.0;
                for (row, &t) in probs.chunks_mut(c).zip(targets) {
                    if t >= c {
                        return Err(dim_err!("target {} out of range for {} classes", t, c));
                    }
                    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                    let lse = mx + row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln();
                    loss += lse - row[t];
                    softmax_in_place(row);
                }
                let probs = Tensor::new(vec![n, c], probs)?;
                return Ok((Tensor::scalar(loss / n as f64), Saved::Probs(probs)));
            }
        };
        Ok((out, Saved::None))
    }

    /// Reverse sweep from a scalar `loss`. Returns gradients for every
    /// trainable leaf that the loss depends on; intermediate gradients are
    /// dropped as soon as they have been propagated.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));
        let mut out = Gradients::default();
        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(op) = &node.op else {
                out.grads.insert(id, g);
                continue;
            };
            let input_grads = self.backward_op(node, op, &g)?;
            for (&inp, ig) in node.inputs.iter().zip(input_grads) {
                let Some(ig) = ig else { continue };
                if !self.nodes[inp].requires_grad {
                    continue;
                }
                match &mut grads[inp] {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(ig.data())
                        .for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(ig),
                }
            }
        }
        Ok(out)
    }

    fn backward_op(&self, node: &Node, op: &Primitive, g: &Tensor) -> Result<Vec<Option<Tensor>>> {
        let input = |i: usize| &self.nodes[node.inputs[i]].value;
        let wants = |i: usize| self.nodes[node.inputs[i]].requires_grad;
        let out = match op {
            Primitive::Add | Primitive::Sub | Primitive::Mul => {
                let (x, y) = (input(0), input(1));
                let period = y.numel().max(1);
                let gx = if wants(0) {
                    Some(match op {
                        Primitive::Mul => {
                            let yd = y.data();
                            let data = g
                                .data()
                                .iter()
                                .enumerate()
                                .map(|(i, gv)| gv * yd[i % period])
                                .collect();
                            Tensor::new(x.shape().to_vec(), data)?
                        }
                        _ => g.clone(),
                    })
                } else {
                    None
                };
                let gy = if wants(1) {
                    let mut acc = vec![0.0; y.numel()];
                    let xd = x.data();
                    for (i, gv) in g.data().iter().enumerate() {
                        let j = i % period;
                        acc[j] += match op {
                            Primitive::Add => *gv,
                            Primitive::Sub => -gv,
                            _ => gv * xd[i],
                        };
                    }
                    Some(Tensor::new(y.shape().to_vec(), acc)?)
                } else {
                    None
                };
                vec![gx, gy]
            }
            Primitive::MatMul => {
                let (a, b) = matmul_backward(input(0), input(1), g, wants(0), wants(1))?;
                vec![a, b]
            }
            Primitive::Transpose => vec![Some(transpose_last(g)?)],
            Primitive::Concat { axis } => {
                let mut start = 0;
                let mut parts = Vec::with_capacity(node.inputs.len());
                for i in 0..node.inputs.len() {
                    let len = input(i).shape()[*axis];
                    parts.push(if wants(i) {
                        Some(slice_forward(g, *axis, start, len)?)
                    } else {
                        None
                    });
                    start += len;
                }
                parts
            }
            Primitive::Slice { axis, start, len } => {
                let x = input(0);
                let mut gx = Tensor::zeros(x.shape());
                let (outer, dim, inner) = split_axis(x.shape(), *axis);
                let gd = g.data();
                let xd = gx.data_mut();
                for o in 0..outer {
                    let src = &gd[o * len * inner..(o + 1) * len * inner];
                    let dst = &mut xd[(o * dim + start) * inner..(o * dim + start + len) * inner];
                    dst.copy_from_slice(src);
                }
                vec![Some(gx)]
            }
            Primitive::IndexSelect { indices } => {
                let x = input(0);
                let mut gx = Tensor::zeros(x.shape());
                let row = x.numel() / x.shape()[0].max(1);
                let gd = g.data();
                let xd = gx.data_mut();
                for (k, &i) in indices.iter().enumerate() {
                    for (d, s) in xd[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&gd[k * row..(k + 1) * row])
                    {
                        *d += s;
                    }
                }
                vec![Some(gx)]
            }
            Primitive::Reshape { .. } => vec![Some(g.clone().reshaped(input(0).shape())?)],
            Primitive::MeanAll => {
                let x = input(0);
                vec![Some(Tensor::full(x.shape(), g.item() / x.numel() as f64))]
            }
            Primitive::Relu => {
                let x = input(0);
                let data = x
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&xv, &gv)| if xv > 0.0 { gv } else { 0.0 })
                    .collect();
                vec![Some(Tensor::new(x.shape().to_vec(), data)?)]
            }
            Primitive::Tanh => {
                let y = &node.value;
                let data = y
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&yv, &gv)| gv * (1.0 - yv * yv))
                    .collect();
                vec![Some(Tensor::new(y.shape().to_vec(), data)?)]
            }
            Primitive::Scale(f) => vec![Some(g.map(|v| v * f))],
            Primitive::L2Normalize => {
                let Saved::Norms(norms) = &node.saved else {
                    unreachable!("l2_normalize saves row norms")
                };
                let y = &node.value;
                let w = last_dim(y)?.max(1);
                let mut data = vec![0.0; y.numel()];
                for (r, n) in norms.iter().enumerate() {
                    let ys = &y.data()[r * w..(r + 1) * w];
                    let gs = &g.data()[r * w..(r + 1) * w];
                    let out = &mut data[r * w..(r + 1) * w];
                    if *n > NORM_EPS {
                        let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                        for i in 0..w {
                            out[i] = (gs[i] - ys[i] * dot) / n;
                        }
                    } else {
                        for i in 0..w {
                            out[i] = gs[i] / NORM_EPS;
                        }
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), data)?)]
            }
            Primitive::SoftmaxRows => {
                let y = &node.value;
                let w = last_dim(y)?.max(1);
                let mut data = vec![0.0; y.numel()];
                for ((out, ys), gs) in data
                    .chunks_mut(w)
                    .zip(y.data().chunks(w))
                    .zip(g.data().chunks(w))
                {
                    let dot: f64 = ys.iter().zip(gs).map(|(a, b)| a * b).sum();
                    for i in 0..w {
                        out[i] = ys[i] * (gs[i] - dot);
                    }
                }
                vec![Some(Tensor::new(y.shape().to_vec(), data)?)]
            }
            Primitive::SoftmaxCe { targets } => {
                let Saved::Probs(p) = &node.saved else {
                    unreachable!("softmax_ce saves probabilities")
                };
                let (n, c) = (p.shape()[0], p.shape()[1]);
                let s = g.item() / n as f64;
                let mut data = p.data().to_vec();
                for (r, &t) in targets.iter().enumerate() {
                    data[r * c + t] -= 1.0;
                }
                data.iter_mut().for_each(|v| *v *= s);
                vec![Some(Tensor::new(vec![n, c], data)?)]
            }
        };
        Ok(out)
    }
}

fn check_broadcast(a: &[usize], b: &[usize]) -> Result<()> {
    if b.len() <= a.len() && a[a.len() - b.len()..] == *b {
        Ok(())
    } else {
        Err(dim_err!("cannot broadcast {:?} onto {:?}", b, a))
    }
}

fn last_dim(x: &Tensor) -> Result<usize> {
    x.shape()
        .last()
        .copied()
        .ok_or_else(|| dim_err!("row-wise op on a scalar"))
}

fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// `(outer, dim, inner)` sizes around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn transpose_last(x: &Tensor) -> Result<Tensor> {
    let r = x.rank();
    if r < 2 {
        return Err(dim_err!("transpose needs rank >= 2, got {:?}", x.shape()));
    }
    let (rows, cols) = (x.shape()[r - 2], x.shape()[r - 1]);
    let batch = x.numel() / (rows * cols).max(1);
    let mut data = vec![0.0; x.numel()];
    let xd = x.data();
    for b in 0..batch {
        let base = b * rows * cols;
        for i in 0..rows {
            for j in 0..cols {
                data[base + j * rows + i] = xd[base + i * cols + j];
            }
        }
    }
    let mut shape = x.shape().to_vec();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, data)
}

fn concat_forward(parts: &[&Tensor], axis: usize) -> Result<Tensor> {
    let first = parts[0].shape();
    if axis >= first.len() {
        return Err(dim_err!("concat axis {} out of range for {:?}", axis, first));
    }
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.len()
            || s[..axis] != first[..axis]
            || s[axis + 1..] != first[axis + 1..]
        {
            return Err(dim_err!("concat along {}: {:?} vs {:?}", axis, first, s));
        }
        total += s[axis];
    }
    let (outer, _, inner) = split_axis(first, axis);
    let mut data = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let len = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * len..(o + 1) * len]);
        }
    }
    let mut shape = first.to_vec();
    shape[axis] = total;
    Tensor::new(shape, data)
}

fn slice_forward(x: &Tensor, axis: usize, start: usize, len: usize) -> Result<Tensor> {
    if axis >= x.rank() || start + len > x.shape()[axis] {
        return Err(dim_err!(
            "slice [{}..{}) on axis {} of {:?}",
            start,
            start + len,
            axis,
            x.shape()
        ));
    }
    let (outer, dim, inner) = split_axis(x.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        data.extend_from_slice(&x.data()[(o * dim + start) * inner..(o * dim + start + len) * inner]);
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = len;
    Tensor::new(shape, data)
}

fn index_select_forward(x: &Tensor, indices: &[usize]) -> Result<Tensor> {
    if x.rank() == 0 {
        return Err(dim_err!("index_select on a scalar"));
    }
    let n = x.shape()[0];
    let row = x.numel() / n.max(1);
    let mut data = Vec::with_capacity(indices.len() * row);
    for &i in indices {
        if i >= n {
            return Err(dim_err!("index {} out of range for axis of length {}", i, n));
        }
        data.extend_from_slice(&x.data()[i * row..(i + 1) * row]);
    }
    let mut shape = x.shape().to_vec();
    shape[0] = indices.len();
    Tensor::new(shape, data)
}

/// Row count, inner dim and batch layout of a matmul.
enum MatMulKind {
    /// `[.., n, k] x [k, m]`: left operand flattened to `rows x k`.
    Shared { rows: usize, k: usize, m: usize },
    /// `[B, n, k] x [B, k, m]`.
    Batched { b: usize, n: usize, k: usize, m: usize },
}

fn matmul_kind(a: &[usize], b: &[usize]) -> Result<MatMulKind> {
    let err = || dim_err!("matmul {:?} x {:?}", a, b);
    if a.len() < 2 {
        return Err(err());
    }
    let k = a[a.len() - 1];
    match b.len() {
        2 if b[0] == k => Ok(MatMulKind::Shared {
            rows: a[..a.len() - 1].iter().product(),
            k,
            m: b[1],
        }),
        3 if a.len() == 3 && a[0] == b[0] && b[1] == k => Ok(MatMulKind::Batched {
            b: a[0],
            n: a[1],
            k,
            m: b[2],
        }),
        _ => Err(err()),
    }
}

fn matmul_forward(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    match matmul_kind(a.shape(), b.shape())? {
        MatMulKind::Shared { rows, k, m } => {
            let mut out = vec![0.0; rows * m];
            gemm(rows, k, m, a.data(), k, 1, b.data(), m, 1, &mut out, false);
            let mut shape = a.shape().to_vec();
            *shape.last_mut().unwrap() = m;
            Tensor::new(shape, out)
        }
        MatMulKind::Batched { b: nb, n, k, m } => {
            let mut out = vec![0.0; nb * n * m];
            for i in 0..nb {
                gemm(
                    n,
                    k,
                    m,
                    &a.data()[i * n * k..],
                    k,
                    1,
                    &b.data()[i * k * m..],
                    m,
                    1,
                    &mut out[i * n * m..(i + 1) * n * m],
                    false,
                );
            }
            Tensor::new(vec![nb, n, m], out)
        }
    }
}

fn matmul_backward(
    a: &Tensor,
    b: &Tensor,
    g: &Tensor,
    want_a: bool,
    want_b: bool,
) -> Result<(Option<Tensor>, Option<Tensor>)> {
    let (mut ga, mut gb) = (None, None);
    match matmul_kind(a.shape(), b.shape())? {
        MatMulKind::Shared { rows, k, m } => {
            if want_a {
                // dA = dC · Bᵀ
                let mut d = vec![0.0; rows * k];
                gemm(rows, m, k, g.data(), m, 1, b.data(), 1, m, &mut d, false);
                ga = Some(Tensor::new(a.shape().to_vec(), d)?);
            }
            if want_b {
                // dB = Aᵀ · dC
                let mut d = vec![0.0; k * m];
                gemm(k, rows, m, a.data(), 1, k, g.data(), m, 1, &mut d, false);
                gb = Some(Tensor::new(b.shape().to_vec(), d)?);
            }
        }
        MatMulKind::Batched { b: nb, n, k, m } => {
            if want_a {
                let mut d = vec![0.0; nb * n * k];
                for i in 0..nb {
                    gemm(
                        n,
                        m,
                        k,
                        &g.data()[i * n * m..],
                        m,
                        1,
                        &b.data()[i * k * m..],
                        1,
                        m,
                        &mut d[i * n * k..(i + 1) * n * k],
                        false,
                    );
                }
                ga = Some(Tensor::new(a.shape().to_vec(), d)?);
            }
            if want_b {
                let mut d = vec![0.0; nb * k * m];
                for i in 0..nb {
                    gemm(
                        k,
                        n,
                        m,
                        &a.data()[i * n * k..],
                        1,
                        k,
                        &g.data()[i * n * m..],
                        m,
                        1,
                        &mut d[i * k * m..(i + 1) * k * m],
                        false,
                    );
                }
                gb = Some(Tensor::new(b.shape().to_vec(), d)?);
            }
        }
    }
    Ok((ga, gb))
}
