//! Dynamic reverse-mode tape.
//!
//! Every op appends a node holding its forward value. Nodes are stored in
//! creation order, which is a topological order, so `backward` is a single
//! reverse sweep. Gradients are only propagated into nodes that transitively
//! depend on a leaf created with `requires_grad = true`.

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use rand::Rng;

use super::tensor::numel;
use super::{Real, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    /// `y` broadcast onto the shape of `x`; `map[i]` is the `y` index for output `i`.
    BroadcastAdd {
        x: Var,
        y: Var,
        map: Rc<[usize]>,
    },
    Scale(Var, T),
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        shared_b: bool,
        trans_b: bool,
    },
    Gather {
        x: Var,
        index: Rc<[usize]>,
    },
    Concat {
        parts: Vec<Var>,
        outer: usize,
        chunks: Vec<usize>,
    },
    Reshape(Var),
    Sum(Var),
    Mean {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Softmax {
        x: Var,
        cols: usize,
    },
    Gelu(Var),
    Log(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cols: usize,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<usize>,
        sample_weights: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::BroadcastAdd { .. } => "broadcast_add",
            Op::Scale(..) => "scale",
            Op::MatMul { .. } => "matmul",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape(..) => "reshape",
            Op::Sum(..) => "sum",
            Op::Mean { .. } => "mean",
            Op::Softmax { .. } => "softmax",
            Op::Gelu(..) => "gelu",
            Op::Log(..) => "log",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::BroadcastAdd { x, y, .. } => vec![*x, *y],
            Op::MatMul { a, b, .. } => vec![*a, *b],
            Op::Concat { parts, .. } => parts.clone(),
            Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
            Op::Scale(x, _)
            | Op::Gather { x, .. }
            | Op::Reshape(x)
            | Op::Sum(x)
            | Op::Mean { x, .. }
            | Op::Softmax { x, .. }
            | Op::Gelu(x)
            | Op::Log(x)
            | Op::Dropout { x, .. } => vec![*x],
            Op::CrossEntropy { logits, .. } => vec![*logits],
        }
    }
}

struct Node<T> {
    value: Vec<T>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded computation for one forward pass.
pub struct Graph<T> {
    nodes: RefCell<Vec<Node<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Per-node adjoints produced by [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape { op, lhs: lhs.to_vec(), rhs: rhs.to_vec() }
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044_715);
    let half = T::of(0.5);
    let one = T::one();
    let x3 = x * x * x;
    let t = (c * (x + k * x3)).tanh();
    let y = half * x * (one + t);
    let dy = half * (one + t) + half * x * (one - t * t) * c * (one + T::of(3.0) * k * x * x);
    (y, dy)
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: RefCell::new(Vec::new()) }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].shape.clone()
    }

    pub fn value(&self, v: Var) -> Ref<'_, [T]> {
        Ref::map(self.nodes.borrow(), |n| n[v.0].value.as_slice())
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push(&self, value: Vec<T>, shape: Vec<usize>, op: Op<T>) -> Result<Var> {
        debug_assert_eq!(value.len(), numel(&shape));
        let inputs = op.inputs();
        let mut nodes = self.nodes.borrow_mut();
        if cfg!(debug_assertions) && value.iter().any(|x| !x.is_finite()) {
            let inputs_finite = inputs.iter().all(|i| nodes[i.0].value.iter().all(|x| x.is_finite()));
            if inputs_finite {
                return Err(Error::NonFinite(op.name().to_string()));
            }
        }
        let requires_grad = inputs.iter().any(|i| nodes[i.0].requires_grad);
        nodes.push(Node { value, shape, op, requires_grad });
        Ok(Var(nodes.len() - 1))
    }

    /// Registers an input or parameter tensor.
    pub fn leaf(&self, t: &Tensor<T>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: t.data().to_vec(), shape: t.shape().to_vec(), op: Op::Leaf, requires_grad });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, t: &Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    fn binary(&self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let (na, nb) = (&nodes[a.0], &nodes[b.0]);
            if na.shape != nb.shape {
                return Err(shape_err(name, &na.shape, &nb.shape));
            }
            let v: Vec<T> = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
            (v, na.shape.clone())
        };
        self.push(value, shape, op)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// `x + y` with `y` broadcast to `x`'s shape, numpy-style (right-aligned,
    /// size-1 or equal dims). Used for bias, position embeddings and masks.
    pub fn add_broadcast(&self, x: Var, y: Var) -> Result<Var> {
        let (xs, ys) = (self.shape(x), self.shape(y));
        if xs == ys {
            return self.add(x, y);
        }
        if ys.len() > xs.len() {
            return Err(shape_err("broadcast_add", &xs, &ys));
        }
        let offset = xs.len() - ys.len();
        for (i, &d) in ys.iter().enumerate() {
            if d != 1 && d != xs[offset + i] {
                return Err(shape_err("broadcast_add", &xs, &ys));
            }
        }
        // strides of y expressed per x axis (0 for broadcast axes)
        let mut ystride = vec![0usize; xs.len()];
        let mut s = 1;
        for i in (0..ys.len()).rev() {
            if ys[i] != 1 {
                ystride[offset + i] = s;
            }
            s *= ys[i];
        }
        let total = numel(&xs);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; xs.len()];
        for _ in 0..total {
            map.push(idx.iter().zip(&ystride).map(|(i, s)| i * s).sum());
            for ax in (0..xs.len()).rev() {
                idx[ax] += 1;
                if idx[ax] < xs[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let map: Rc<[usize]> = map.into();
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, yv) = (&nodes[x.0].value, &nodes[y.0].value);
            xv.iter().zip(map.iter()).map(|(&a, &j)| a + yv[j]).collect()
        };
        self.push(value, xs, Op::BroadcastAdd { x, y, map })
    }

    pub fn scale(&self, x: Var, c: T) -> Result<Var> {
        let (value, shape) = {
            let nodes = self.nodes.borrow();
            let n = &nodes[x.0];
            (n.value.iter().map(|&v| v * c).collect(), n.shape.clone())
        };
        self.push(value, shape, Op::Scale(x, c))
    }

    /// Batched matrix product.
    ///
    /// `a` has shape `[..., m, k]`. `b` is either `[k, n]` (shared across the
    /// batch) or `[..., k, n]` with the same leading dims as `a`. With
    /// `trans_b` the trailing two dims of `b` are read as `[n, k]`.
    pub fn matmul_ext(&self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (br, bc) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (kb, n) = if trans_b { (bc, br) } else { (br, bc) };
        if k != kb {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let batch_dims = &sa[..sa.len() - 2];
        let batch = numel(batch_dims);
        let shared_b = sb.len() == 2;
        if !shared_b && sb[..sb.len() - 2] != *batch_dims {
            return Err(shape_err("matmul", &sa, &sb));
        }
        let mut out_shape = batch_dims.to_vec();
        out_shape.extend([m, n]);
        let mut value = vec![T::zero(); batch * m * n];
        {
            let nodes = self.nodes.borrow();
            let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
            let (rsb, csb) = if trans_b { (1, k) } else { (n, 1) };
            if shared_b {
                T::gemm(batch * m, k, n, av, k, 1, bv, rsb, csb, T::zero(), &mut value, n, 1);
            } else {
                for i in 0..batch {
                    T::gemm(
                        m,
                        k,
                        n,
                        &av[i * m * k..(i + 1) * m * k],
                        k,
                        1,
                        &bv[i * k * n..(i + 1) * k * n],
                        rsb,
                        csb,
                        T::zero(),
                        &mut value[i * m * n..(i + 1) * m * n],
                        n,
                        1,
                    );
                }
            }
        }
        self.push(value, out_shape, Op::MatMul { a, b, batch, m, k, n, shared_b, trans_b })
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false)
    }

    /// `x·Wᵀ (+ bias)` for `W` stored as `[out, in]`.
    pub fn linear(&self, x: Var, weight: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_ext(x, weight, true)?;
        match bias {
            Some(b) => self.add_broadcast(y, b),
            None => Ok(y),
        }
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`. Backward scatters-adds.
    pub fn gather(&self, x: Var, index: Rc<[usize]>, shape: Vec<usize>) -> Result<Var> {
        if numel(&shape) != index.len() {
            return Err(shape_err("gather", &shape, &[index.len()]));
        }
        let value = {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            if let Some(&bad) = index.iter().find(|&&i| i >= xv.len()) {
                return Err(Error::validation(format!("gather index {bad} out of range for {} elements", xv.len())));
            }
            index.iter().map(|&i| xv[i]).collect()
        };
        self.push(value, shape, Op::Gather { x, index })
    }

    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x);
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len() || axes.iter().any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(shape_err("permute", &shape, axes));
        }
        let (index, out_shape) = permute_index(&shape, axes);
        self.gather(x, index.into(), out_shape)
    }

    /// Swaps the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", &self.shape(x), &[]));
        }
        let mut axes: Vec<usize> = (0..r).collect();
        axes.swap(r - 2, r - 1);
        self.permute(x, &axes)
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let (value, old) = {
            let nodes = self.nodes.borrow();
            (nodes[x.0].value.clone(), nodes[x.0].shape.clone())
        };
        if numel(&old) != numel(shape) {
            return Err(shape_err("reshape", &old, shape));
        }
        self.push(value, shape.to_vec(), Op::Reshape(x))
    }

    /// Sub-range `[start, start+len)` along `axis`.
    pub fn narrow(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() || start + len > shape[axis] || len == 0 {
            return Err(shape_err("narrow", &shape, &[axis, start, len]));
        }
        let outer = numel(&shape[..axis]);
        let inner = numel(&shape[axis + 1..]);
        let mut index = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner;
            for j in start..start + len {
                index.extend((0..inner).map(|i| base + j * inner + i));
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        self.gather(x, index.into(), out_shape)
    }

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().map(|&p| self.shape(p)).ok_or_else(|| Error::validation("concat of zero tensors"))?;
        if axis >= first.len() {
            return Err(shape_err("concat", &first, &[axis]));
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        let mut chunks = Vec::with_capacity(parts.len());
        let inner = numel(&first[axis + 1..]);
        let outer = numel(&first[..axis]);
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(shape_err("concat", &first, &s));
            }
            out_shape[axis] += s[axis];
            chunks.push(s[axis] * inner);
        }
        let value = {
            let nodes = self.nodes.borrow();
            let mut v = Vec::with_capacity(numel(&out_shape));
            for o in 0..outer {
                for (&p, &c) in parts.iter().zip(&chunks) {
                    v.extend_from_slice(&nodes[p.0].value[o * c..(o + 1) * c]);
                }
            }
            v
        };
        self.push(value, out_shape, Op::Concat { parts: parts.to_vec(), outer, chunks })
    }

    pub fn sum(&self, x: Var) -> Result<Var> {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![s], vec![1], Op::Sum(x))
    }

    /// Mean over `axis`; the axis is removed from the output shape (a
    /// rank-1 input yields shape `[1]`).
    pub fn mean(&self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x);
        if axis >= shape.len() {
            return Err(shape_err("mean", &shape, &[axis]));
        }
        let outer = numel(&shape[..axis]);
        let len = shape[axis];
        let inner = numel(&shape[axis + 1..]);
        let mut value = vec![T::zero(); outer * inner];
        {
            let nodes = self.nodes.borrow();
            let xv = &nodes[x.0].value;
            let scale = T::one() / T::of(len as f64);
            for o in 0..outer {
                for j in 0..len {
                    let src = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                    for (d, &s) in value[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
            value.iter_mut().for_each(|v| *v *= scale);
        }
        let mut out_shape: Vec<usize> = shape.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        self.push(value, out_shape, Op::Mean { x, outer, len, inner })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let cols = *shape.last().expect("non-empty shape");
        let mut value = self.value(x).to_vec();
        for row in value.chunks_mut(cols) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            row.iter_mut().for_each(|v| *v /= z);
        }
        self.push(value, shape, Op::Softmax { x, cols })
    }

    pub fn gelu(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let value = self.value(x).iter().map(|&v| gelu_parts(v).0).collect();
        self.push(value, shape, Op::Gelu(x))
    }

    pub fn log(&self, x: Var) -> Result<Var> {
        let shape = self.shape(x);
        let value = self.value(x).iter().map(|&v| v.ln()).collect();
        self.push(value, shape, Op::Log(x))
    }

    /// Layer normalization over the last axis with learnable gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let shape = self.shape(x);
        let cols = *shape.last().expect("non-empty shape");
        for p in [gain, bias] {
            let ps = self.shape(p);
            if ps != [cols] {
                return Err(shape_err("layer_norm", &shape, &ps));
            }
        }
        let eps = T::of(LAYER_NORM_EPS);
        let (value, xhat, rstd) = {
            let nodes = self.nodes.borrow();
            let (xv, g, b) = (&nodes[x.0].value, &nodes[gain.0].value, &nodes[bias.0].value);
            let rows = xv.len() / cols;
            let mut value = vec![T::zero(); xv.len()];
            let mut xhat = vec![T::zero(); xv.len()];
            let mut rstd = vec![T::zero(); rows];
            let nc = T::of(cols as f64);
            for r in 0..rows {
                let row = &xv[r * cols..(r + 1) * cols];
                let mean = row.iter().copied().sum::<T>() / nc;
                let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nc;
                let rs = T::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for c in 0..cols {
                    let h = (row[c] - mean) * rs;
                    xhat[r * cols + c] = h;
                    value[r * cols + c] = h * g[c] + b[c];
                }
            }
            (value, xhat, rstd)
        };
        self.push(value, shape, Op::LayerNorm { x, gain, bias, cols, xhat, rstd })
    }

    /// Inverted dropout. Identity when `train` is false or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&self, x: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::validation(format!("dropout probability {p} outside [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let shape = self.shape(x);
        let keep = T::of(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..numel(&shape)).map(|_| if rng.random::<f64>() >= p { keep } else { T::zero() }).collect();
        let value = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        self.push(value, shape, Op::Dropout { x, mask })
    }

    /// Class-weighted softmax cross-entropy averaged over the batch.
    ///
    /// `logits` is `[batch, classes]`; the loss is
    /// `mean_i w[y_i] · −log softmax(logits_i)[y_i]`.
    pub fn cross_entropy(&self, logits: Var, labels: &[usize], class_weights: &[T]) -> Result<Var> {
        let shape = self.shape(logits);
        if shape.len() != 2 || shape[0] != labels.len() {
            return Err(shape_err("cross_entropy", &shape, &[labels.len()]));
        }
        let classes = shape[1];
        if class_weights.len() != classes {
            return Err(shape_err("cross_entropy", &shape, &[class_weights.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= classes) {
            return Err(Error::validation(format!("label {bad} outside [0, {classes})")));
        }
        if class_weights.iter().any(|&w| !(w > T::zero())) {
            return Err(Error::validation("class weights must be positive"));
        }
        let mut probs = self.value(logits).to_vec();
        let mut loss = T::zero();
        let batch = T::of(labels.len() as f64);
        for (row, &y) in probs.chunks_mut(classes).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += class_weights[y] * (lse - row[y]);
            row.iter_mut().for_each(|v| *v = (*v - lse).exp());
        }
        let sample_weights = labels.iter().map(|&y| class_weights[y] / batch).collect();
        self.push(
            vec![loss / batch],
            vec![1],
            Op::CrossEntropy { logits, probs, labels: labels.to_vec(), sample_weights },
        )
    }

    /// Scaled dot-product attention, `softmax(QKᵀ/√d + mask)·V`.
    ///
    /// `q`, `k`, `v` are `[batch, heads, tokens, head_dim]`; `mask` must
    /// broadcast onto the score tensor `[batch, heads, tokens, tokens]`.
    pub fn attention(&self, q: Var, k: Var, v: Var, mask: Option<Var>) -> Result<Var> {
        let (sq, sk, sv) = (self.shape(q), self.shape(k), self.shape(v));
        if sq.len() != 4 || sk != sv || sq[..2] != sk[..2] || sq[3] != sk[3] {
            return Err(shape_err("attention", &sq, &sk));
        }
        let scores = self.matmul_ext(q, k, true)?;
        let scores = self.scale(scores, T::one() / T::of(sq[3] as f64).sqrt())?;
        let scores = match mask {
            Some(m) => self.add_broadcast(scores, m)?,
            None => scores,
        };
        let weights = self.softmax(scores)?;
        self.matmul(weights, v)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::validation(format!(
                "backward requires a scalar loss, got shape {:?}",
                nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        let wants = |v: Var| nodes[v.0].requires_grad;

        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if let Op::Leaf = node.op {
                grads[id] = Some(g);
                continue;
            }
            let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
                let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
                f(slot);
            };
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, T::one())] {
                        if wants(v) {
                            acc(v, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &x)| *d += sign * x));
                        }
                    }
                }
                Op::Sub(a, b) => {
                    for (v, sign) in [(*a, T::one()), (*b, -T::one())] {
                        if wants(v) {
                            acc(v, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &x)| *d += sign * x));
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if wants(*a) {
                        let bv = &nodes[b.0].value;
                        acc(*a, &mut |s| {
                            for ((d, &x), &y) in s.iter_mut().zip(&g).zip(bv) {
                                *d += x * y;
                            }
                        });
                    }
                    if wants(*b) {
                        let av = &nodes[a.0].value;
                        acc(*b, &mut |s| {
                            for ((d, &x), &y) in s.iter_mut().zip(&g).zip(av) {
                                *d += x * y;
                            }
                        });
                    }
                }
                Op::BroadcastAdd { x, y, map } => {
                    if wants(*x) {
                        acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &v)| *d += v));
                    }
                    if wants(*y) {
                        acc(*y, &mut |s| {
                            for (&j, &v) in map.iter().zip(&g) {
                                s[j] += v;
                            }
                        });
                    }
                }
                Op::Scale(x, c) => {
                    let c = *c;
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &v)| *d += c * v));
                }
                &Op::MatMul { a, b, batch, m, k, n, shared_b, trans_b } => {
                    let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                    if wants(a) {
                        // dA = dC · B_usedᵀ
                        let (rsb, csb) = if trans_b { (k, 1) } else { (1, n) };
                        acc(a, &mut |s| {
                            if shared_b {
                                T::gemm(batch * m, n, k, &g, n, 1, bv, rsb, csb, T::one(), s, k, 1);
                            } else {
                                for i in 0..batch {
                                    T::gemm(
                                        m,
                                        n,
                                        k,
                                        &g[i * m * n..(i + 1) * m * n],
                                        n,
                                        1,
                                        &bv[i * k * n..(i + 1) * k * n],
                                        rsb,
                                        csb,
                                        T::one(),
                                        &mut s[i * m * k..(i + 1) * m * k],
                                        k,
                                        1,
                                    );
                                }
                            }
                        });
                    }
                    if wants(b) {
                        acc(b, &mut |s| {
                            let rows = if shared_b { batch * m } else { m };
                            let reps = if shared_b { 1 } else { batch };
                            for i in 0..reps {
                                let ga = &g[i * rows * n..(i + 1) * rows * n];
                                let aa = &av[i * rows * k..(i + 1) * rows * k];
                                let sb = &mut s[i * k * n..(i + 1) * k * n];
                                if trans_b {
                                    // dB[n,k] += dCᵀ · A
                                    T::gemm(n, rows, k, ga, 1, n, aa, k, 1, T::one(), sb, k, 1);
                                } else {
                                    // dB[k,n] += Aᵀ · dC
                                    T::gemm(k, rows, n, aa, 1, k, ga, n, 1, T::one(), sb, n, 1);
                                }
                            }
                        });
                    }
                }
                Op::Gather { x, index } => {
                    acc(*x, &mut |s| {
                        for (&j, &v) in index.iter().zip(&g) {
                            s[j] += v;
                        }
                    });
                }
                Op::Concat { parts, outer, chunks } => {
                    let total: usize = chunks.iter().sum();
                    let mut offset = 0;
                    for (&p, &c) in parts.iter().zip(chunks) {
                        if wants(p) {
                            acc(p, &mut |s| {
                                for o in 0..*outer {
                                    let src = &g[o * total + offset..o * total + offset + c];
                                    s[o * c..(o + 1) * c].iter_mut().zip(src).for_each(|(d, &v)| *d += v);
                                }
                            });
                        }
                        offset += c;
                    }
                }
                Op::Reshape(x) => {
                    acc(*x, &mut |s| s.iter_mut().zip(&g).for_each(|(d, &v)| *d += v));
                }
                Op::Sum(x) => {
                    let g0 = g[0];
                    acc(*x, &mut |s| s.iter_mut().for_each(|d| *d += g0));
                }
                &Op::Mean { x, outer, len, inner } => {
                    let scale = T::one() / T::of(len as f64);
                    acc(x, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * inner..(o + 1) * inner];
                            for j in 0..len {
                                let dst = &mut s[(o * len + j) * inner..(o * len + j + 1) * inner];
                                dst.iter_mut().zip(src).for_each(|(d, &v)| *d += v * scale);
                            }
                        }
                    });
                }
                &Op::Softmax { x, cols } => {
                    let y = &node.value;
                    acc(x, &mut |s| {
                        for ((sr, yr), gr) in s.chunks_mut(cols).zip(y.chunks(cols)).zip(g.chunks(cols)) {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            for ((d, &yy), &gg) in sr.iter_mut().zip(yr).zip(gr) {
                                *d += yy * (gg - dot);
                            }
                        }
                    });
                }
                Op::Gelu(x) => {
                    let xv = &nodes[x.0].value;
                    acc(*x, &mut |s| {
                        for ((d, &v), &gg) in s.iter_mut().zip(xv).zip(&g) {
                            *d += gg * gelu_parts(v).1;
                        }
                    });
                }
                Op::Log(x) => {
                    let xv = &nodes[x.0].value;
                    acc(*x, &mut |s| {
                        for ((d, &v), &gg) in s.iter_mut().zip(xv).zip(&g) {
                            *d += gg / v;
                        }
                    });
                }
                Op::LayerNorm { x, gain, bias, cols, xhat, rstd } => {
                    let cols = *cols;
                    let gv = &nodes[gain.0].value;
                    if wants(*x) {
                        let nc = T::of(cols as f64);
                        acc(*x, &mut |s| {
                            for (r, &rs) in rstd.iter().enumerate() {
                                let range = r * cols..(r + 1) * cols;
                                let (gr, hr) = (&g[range.clone()], &xhat[range.clone()]);
                                let mut m1 = T::zero();
                                let mut m2 = T::zero();
                                for c in 0..cols {
                                    let dh = gr[c] * gv[c];
                                    m1 += dh;
                                    m2 += dh * hr[c];
                                }
                                m1 /= nc;
                                m2 /= nc;
                                for (c, d) in s[range].iter_mut().enumerate() {
                                    let dh = gr[c] * gv[c];
                                    *d += rs * (dh - m1 - hr[c] * m2);
                                }
                            }
                        });
                    }
                    if wants(*gain) {
                        acc(*gain, &mut |s| {
                            for (gr, hr) in g.chunks(cols).zip(xhat.chunks(cols)) {
                                for c in 0..cols {
                                    s[c] += gr[c] * hr[c];
                                }
                            }
                        });
                    }
                    if wants(*bias) {
                        acc(*bias, &mut |s| {
                            for gr in g.chunks(cols) {
                                s.iter_mut().zip(gr).for_each(|(d, &v)| *d += v);
                            }
                        });
                    }
                }
                Op::Dropout { x, mask } => {
                    acc(*x, &mut |s| {
                        for ((d, &m), &gg) in s.iter_mut().zip(mask).zip(&g) {
                            *d += m * gg;
                        }
                    });
                }
                Op::CrossEntropy { logits, probs, labels, sample_weights } => {
                    let classes = probs.len() / labels.len();
                    let g0 = g[0];
                    acc(*logits, &mut |s| {
                        for (i, (&y, &w)) in labels.iter().zip(sample_weights).enumerate() {
                            for c in 0..classes {
                                let onehot = if c == y { T::one() } else { T::zero() };
                                s[i * classes + c] += g0 * w * (probs[i * classes + c] - onehot);
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gather index realizing an axis permutation of a row-major tensor.
pub fn permute_index(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        strides[i] = strides[i + 1] * shape[i + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let out_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let total = numel(shape);
    let mut index = Vec::with_capacity(total);
    let mut idx = vec![0usize; rank];
    for _ in 0..total {
        index.push(idx.iter().zip(&out_strides).map(|(i, s)| i * s).sum());
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    (index, out_shape)
}
