use std::cell::{Cell, RefCell};
use std::collections::HashMap;
use std::f64::consts::{FRAC_1_SQRT_2, PI};
use std::ops::Range;
use std::rc::Rc;

use super::kernels::{matmul_into, transpose};
use super::{numel, split_axis, Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, c: f64 },
    ScaleBy { x: Var, s: Var },
    MatMul { a: Var, b: Var },
    Transpose { x: Var },
    Permute { x: Var, axes: Vec<usize> },
    Reshape { x: Var },
    Softmax { x: Var, axis: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu { x: Var },
    Sigmoid { x: Var },
    MeanAxis { x: Var, axis: usize },
    SumAll { x: Var },
    MeanAll { x: Var },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Gather { x: Var, axis: usize, indices: Vec<usize> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Mse { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<usize>, probs: Vec<f64> },
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } | Op::MatMul { a, b } => {
                vec![*a, *b]
            }
            Op::Mse { a, b } => vec![*a, *b],
            Op::ScaleBy { x, s } => vec![*x, *s],
            Op::LayerNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Op::Concat { parts, .. } => parts.clone(),
            Op::CrossEntropy { logits, .. } => vec![*logits],
            Op::Scale { x, .. }
            | Op::Transpose { x }
            | Op::Permute { x, .. }
            | Op::Reshape { x }
            | Op::Softmax { x, .. }
            | Op::Gelu { x }
            | Op::Sigmoid { x }
            | Op::MeanAxis { x, .. }
            | Op::SumAll { x }
            | Op::MeanAll { x }
            | Op::Slice { x, .. }
            | Op::Gather { x, .. }
            | Op::L2Normalize { x, .. } => vec![*x],
        }
    }
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Single-use record of executed primitives.
///
/// Nodes are appended in execution order, so every node's inputs have
/// smaller indices. [`Tape::backward`] may run once.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    consumed: Cell<bool>,
}

/// Gradients of every `requires_grad` leaf, zero-filled when unreached.
#[derive(Debug, Default)]
pub struct Gradients {
    grads: HashMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidShape {
            op,
            shape: shape.to_vec(),
            reason: format!("axis {axis} out of range"),
        });
    }
    Ok(())
}

fn is_suffix(short: &[usize], long: &[usize]) -> bool {
    short.len() <= long.len() && long[long.len() - short.len()..] == *short
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> (Vec<f64>, Vec<usize>) {
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for d in (0..idx.len()).rev() {
            idx[d] += 1;
            offset += src_strides[d];
            if idx[d] < out_shape[d] {
                break;
            }
            offset -= src_strides[d] * out_shape[d];
            idx[d] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_value(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * FRAC_1_SQRT_2))
}

fn gelu_deriv(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * FRAC_1_SQRT_2)) + x * (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

pub fn sigmoid_value(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sum `g` (shaped like the broadcast output) down to the suffix shape of size `n`.
fn reduce_to_suffix(g: &[f64], n: usize) -> Vec<f64> {
    let mut out = vec![0.0; n];
    for chunk in g.chunks_exact(n) {
        for (o, v) in out.iter_mut().zip(chunk) {
            *o += v;
        }
    }
    out
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

    pub fn is_consumed(&self) -> bool {
        self.consumed.get()
    }

    /// Records a leaf; it is differentiable iff `t.requires_grad()`.
    pub fn var(&self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad();
        self.push(t, Op::Leaf, requires_grad)
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Input handles of the record that produced `v`.
    pub fn inputs(&self, v: Var) -> Vec<Var> {
        self.nodes.borrow()[v.0].op.inputs()
    }

    fn push(&self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.zero_grad();
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        // Nothing upstream needs a gradient: keep only the value.
        let op = if requires_grad { op } else { Op::Leaf };
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var(id)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    fn binary_broadcast(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let av = self.value(a);
        let bv = self.value(b);
        if !is_suffix(bv.shape(), av.shape()) {
            return Err(shape_err(op, av.shape(), bv.shape()));
        }
        let n = bv.numel();
        let data: Vec<f64> = av
            .data()
            .chunks_exact(n)
            .flat_map(|chunk| chunk.iter().zip(bv.data()).map(|(&x, &y)| f(x, y)))
            .collect();
        Tensor::new(av.shape().to_vec(), data)
    }

    /// `a + b`, where `b`'s shape must equal `a`'s or be a trailing suffix of it.
    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("add", a, b, |x, y| x + y)?;
        Ok(self.push(out, Op::Add { a, b }, self.any_grad(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("sub", a, b, |x, y| x - y)?;
        Ok(self.push(out, Op::Sub { a, b }, self.any_grad(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary_broadcast("mul", a, b, |x, y| x * y)?;
        Ok(self.push(out, Op::Mul { a, b }, self.any_grad(&[a, b])))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| v * c).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Scale { x, c }, self.any_grad(&[x]))
    }

    /// Multiply every entry of `x` by the single-element tensor `s`.
    pub fn scale_by(&self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s);
        let c = sv.item()?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|v| c * v).collect();
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::ScaleBy { x, s }, self.any_grad(&[x, s])))
    }

    /// Batched matrix product over the last two axes.
    ///
    /// Batch axes must match, or either operand may be a plain matrix.
    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        let (ash, bsh) = (av.shape(), bv.shape());
        if ash.len() < 2 || bsh.len() < 2 {
            return Err(shape_err("matmul", ash, bsh));
        }
        let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
        let (k2, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
        if k != k2 {
            return Err(shape_err("matmul", ash, bsh));
        }
        let a_batch = &ash[..ash.len() - 2];
        let b_batch = &bsh[..bsh.len() - 2];
        let out = if b_batch.is_empty() {
            let rows = numel(a_batch) * m;
            let mut c = vec![0.0; rows * n];
            matmul_into(rows, k, n, av.data(), bv.data(), &mut c);
            let mut shape = ash[..ash.len() - 1].to_vec();
            shape.push(n);
            Tensor::new(shape, c)?
        } else {
            if !a_batch.is_empty() && a_batch != b_batch {
                return Err(shape_err("matmul", ash, bsh));
            }
            let batch = numel(b_batch);
            let a_step = if a_batch.is_empty() { 0 } else { m * k };
            let mut c = vec![0.0; batch * m * n];
            for i in 0..batch {
                matmul_into(
                    m,
                    k,
                    n,
                    &av.data()[i * a_step..i * a_step + m * k],
                    &bv.data()[i * k * n..(i + 1) * k * n],
                    &mut c[i * m * n..(i + 1) * m * n],
                );
            }
            let mut shape = b_batch.to_vec();
            shape.extend_from_slice(&[m, n]);
            Tensor::new(shape, c)?
        };
        Ok(self.push(out, Op::MatMul { a, b }, self.any_grad(&[a, b])))
    }

    /// Swap the last two axes.
    pub fn transpose(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let sh = xv.shape();
        if sh.len() < 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: sh.to_vec(),
                reason: "rank must be at least 2".into(),
            });
        }
        let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
        let mut data = Vec::with_capacity(xv.numel());
        for block in xv.data().chunks_exact(r * c) {
            data.extend(transpose(r, c, block));
        }
        let mut shape = sh.to_vec();
        let len = shape.len();
        shape.swap(len - 2, len - 1);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Transpose { x }, self.any_grad(&[x])))
    }

    /// Reorder axes: output axis `i` is input axis `axes[i]`.
    pub fn permute(&self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut seen = axes.to_vec();
        seen.sort_unstable();
        if seen != (0..xv.rank()).collect::<Vec<_>>() {
            return Err(TensorError::InvalidArgument(format!(
                "permute: {axes:?} is not a permutation of rank {}",
                xv.rank()
            )));
        }
        let (data, shape) = permute_data(xv.data(), xv.shape(), axes);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            self.any_grad(&[x]),
        ))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push(out, Op::Reshape { x }, self.any_grad(&[x])))
    }

    /// Numerically stable softmax along `axis` (max subtracted first).
    pub fn softmax(&self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, false)
    }

    /// Softmax over the last axis of `[.., S, S]` scores where key `j > i` is excluded.
    pub fn softmax_causal(&self, x: Var) -> Result<Var> {
        let sh = self.shape(x);
        if sh.len() < 2 || sh[sh.len() - 1] != sh[sh.len() - 2] {
            return Err(TensorError::InvalidShape {
                op: "softmax_causal",
                shape: sh,
                reason: "expected square trailing axes".into(),
            });
        }
        self.softmax_impl(x, sh.len() - 1, true)
    }

    fn softmax_impl(&self, x: Var, axis: usize, causal: bool) -> Result<Var> {
        let xv = self.value(x);
        check_axis("softmax", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let src = xv.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            // Causal rows only ever use the last axis, so inner == 1.
            let limit = if causal { (o % dim) + 1 } else { dim };
            for i in 0..inner {
                let at = |j: usize| (o * dim + j) * inner + i;
                let max = (0..limit).map(|j| src[at(j)]).fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..limit {
                    let e = (src[at(j)] - max).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..limit {
                    out[at(j)] /= sum;
                }
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, self.any_grad(&[x])))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::InvalidArgument("layer_norm: eps must be > 0".into()));
        }
        let xv = self.value(x);
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let d = *xv.shape().last().ok_or_else(|| shape_err("layer_norm", xv.shape(), gv.shape()))?;
        if gv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), gv.shape()));
        }
        if bv.shape() != [d] {
            return Err(shape_err("layer_norm", xv.shape(), bv.shape()));
        }
        let rows = xv.numel() / d;
        let mut out = Vec::with_capacity(xv.numel());
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for row in xv.data().chunks_exact(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            rstd.push(r);
            for (j, v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(gv.data()[j] * h + bv.data()[j]);
            }
        }
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            self.any_grad(&[x, gamma, beta]),
        ))
    }

    /// Exact GELU, `x · Φ(x)`.
    pub fn gelu(&self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| gelu_value(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Gelu { x }, self.any_grad(&[x]))
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| sigmoid_value(v)).collect();
        let out = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        self.push(out, Op::Sigmoid { x }, self.any_grad(&[x]))
    }

    /// Mean over `axis`, removing it.
    pub fn mean_axis(&self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        check_axis("mean_axis", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..dim {
                let src = &xv.data()[(o * dim + j) * inner..(o * dim + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *acc += v;
                }
            }
        }
        for v in &mut out {
            *v /= dim as f64;
        }
        let mut shape = xv.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::new(shape, out)?;
        Ok(self.push(out, Op::MeanAxis { x, axis }, self.any_grad(&[x])))
    }

    pub fn sum(&self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll { x }, self.any_grad(&[x]))
    }

    pub fn mean(&self, x: Var) -> Var {
        let xv = self.value(x);
        let s = xv.data().iter().sum::<f64>() / xv.numel() as f64;
        self.push(Tensor::scalar(s), Op::MeanAll { x }, self.any_grad(&[x]))
    }

    /// Concatenate along `axis`; all other axes must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or_else(|| {
            TensorError::InvalidArgument("concat of zero tensors".into())
        })?);
        check_axis("concat", &first, axis)?;
        let values: Vec<Rc<Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
        let mut total = 0;
        for v in &values {
            let sh = v.shape();
            if sh.len() != first.len()
                || sh.iter().zip(&first).enumerate().any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(shape_err("concat", &first, sh));
            }
            total += sh[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in &values {
                let chunk = v.shape()[axis] * inner;
                data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            self.any_grad(parts),
        ))
    }

    /// Contiguous range along `axis`.
    pub fn slice(&self, x: Var, axis: usize, range: Range<usize>) -> Result<Var> {
        let xv = self.value(x);
        check_axis("slice", xv.shape(), axis)?;
        let (outer, dim, inner) = split_axis(xv.shape(), axis);
        if range.start >= range.end || range.end > dim {
            return Err(TensorError::IndexOutOfRange {
                op: "slice",
                index: range.end,
                bound: dim,
            });
        }
        let len = range.end - range.start;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let start = (o * dim + range.start) * inner;
            data.extend_from_slice(&xv.data()[start..start + len * inner]);
        }
        let mut shape = xv.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(
            out,
            Op::Slice {
                x,
                axis,
                start: range.start,
            },
            self.any_grad(&[x]),
        ))
    }

    /// Index-select along `axis`; indices may repeat.
    pub fn gather(&self, x: Var, axis: usize, indices: &[usize]) -> Result<Var> {
        let out = self.value(x).select(axis, indices)?;
        Ok(self.push(
            out,
            Op::Gather {
                x,
                axis,
                indices: indices.to_vec(),
            },
            self.any_grad(&[x]),
        ))
    }

    /// Scale each vector along the last axis to unit Euclidean norm.
    pub fn l2_normalize(&self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv.shape().last().ok_or_else(|| TensorError::NotScalar {
            shape: xv.shape().to_vec(),
        })?;
        let mut norms = Vec::with_capacity(xv.numel() / d);
        let mut data = Vec::with_capacity(xv.numel());
        for (r, row) in xv.data().chunks_exact(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(TensorError::ZeroNorm { row: r });
            }
            norms.push(n);
            data.extend(row.iter().map(|v| v / n));
        }
        let out = Tensor::new(xv.shape().to_vec(), data)?;
        Ok(self.push(out, Op::L2Normalize { x, norms }, self.any_grad(&[x])))
    }

    /// Mean of squared differences over all entries.
    pub fn mse(&self, a: Var, b: Var) -> Result<Var> {
        let av = self.value(a);
        let bv = self.value(b);
        if av.shape() != bv.shape() {
            return Err(shape_err("mse", av.shape(), bv.shape()));
        }
        let s = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / av.numel() as f64;
        Ok(self.push(Tensor::scalar(s), Op::Mse { a, b }, self.any_grad(&[a, b])))
    }

    /// Mean over rows of `-log softmax(logits)[row, target]`.
    pub fn cross_entropy(&self, logits: Var, targets: &[usize]) -> Result<Var> {
        let lv = self.value(logits);
        let sh = lv.shape();
        if sh.len() != 2 || sh[0] != targets.len() {
            return Err(shape_err("cross_entropy", sh, &[targets.len()]));
        }
        let c = sh[1];
        let mut probs = Vec::with_capacity(lv.numel());
        let mut loss = 0.0;
        for (row, &t) in lv.data().chunks_exact(c).zip(targets) {
            if t >= c {
                return Err(TensorError::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    bound: c,
                });
            }
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            loss += lse - row[t];
            probs.extend(row.iter().map(|v| (v - lse).exp()));
        }
        loss /= targets.len() as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            self.any_grad(&[logits]),
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_value = &nodes[loss.0].value;
        if loss_value.numel() != 1 {
            return Err(TensorError::NotScalar {
                shape: loss_value.shape().to_vec(),
            });
        }
        if self.consumed.replace(true) {
            return Err(TensorError::TapeConsumed);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        let mut out = HashMap::new();
        for id in (0..=loss.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let g = grads[id]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                let t = Tensor::new(node.value.shape().to_vec(), g)?;
                out.insert(Var(id), t);
                continue;
            }
            let Some(g) = grads[id].take() else {
                continue;
            };
            backprop(&nodes, &mut grads, node, &g);
        }
        // Leaves recorded after the loss are off-path by construction.
        for (id, node) in nodes.iter().enumerate().skip(loss.0 + 1) {
            if node.requires_grad && matches!(node.op, Op::Leaf) {
                out.insert(Var(id), Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(&contrib) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

fn backprop(nodes: &[Node], grads: &mut [Option<Vec<f64>>], node: &Node, g: &[f64]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let needs = |v: Var| nodes[v.0].requires_grad;
    let y = &node.value;
    match &node.op {
        Op::Leaf => {}
        Op::Add { a, b } | Op::Sub { a, b } => {
            let sign = if matches!(node.op, Op::Sub { .. }) { -1.0 } else { 1.0 };
            if needs(*a) {
                accumulate(nodes, grads, *a, g.to_vec());
            }
            if needs(*b) {
                let mut gb = reduce_to_suffix(g, val(*b).numel());
                if sign < 0.0 {
                    gb.iter_mut().for_each(|v| *v = -*v);
                }
                accumulate(nodes, grads, *b, gb);
            }
        }
        Op::Mul { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let n = bv.numel();
            if needs(*a) {
                let ga = g
                    .chunks_exact(n)
                    .flat_map(|c| c.iter().zip(bv.data()).map(|(gi, bi)| gi * bi))
                    .collect();
                accumulate(nodes, grads, *a, ga);
            }
            if needs(*b) {
                let prod: Vec<f64> = g.iter().zip(av.data()).map(|(gi, ai)| gi * ai).collect();
                accumulate(nodes, grads, *b, reduce_to_suffix(&prod, n));
            }
        }
        Op::Scale { x, c } => {
            accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect());
        }
        Op::ScaleBy { x, s } => {
            let (xv, sv) = (val(*x), val(*s));
            let c = sv.data()[0];
            if needs(*x) {
                accumulate(nodes, grads, *x, g.iter().map(|v| v * c).collect());
            }
            if needs(*s) {
                let d: f64 = g.iter().zip(xv.data()).map(|(gi, xi)| gi * xi).sum();
                accumulate(nodes, grads, *s, vec![d]);
            }
        }
        Op::MatMul { a, b } => matmul_backward(nodes, grads, *a, *b, g),
        Op::Transpose { x } => {
            let sh = y.shape();
            let (r, c) = (sh[sh.len() - 2], sh[sh.len() - 1]);
            let mut gx = Vec::with_capacity(g.len());
            for block in g.chunks_exact(r * c) {
                gx.extend(transpose(r, c, block));
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Permute { x, axes } => {
            let mut inverse = vec![0; axes.len()];
            for (i, &a) in axes.iter().enumerate() {
                inverse[a] = i;
            }
            let (gx, _) = permute_data(g, y.shape(), &inverse);
            accumulate(nodes, grads, *x, gx);
        }
        Op::Reshape { x } => accumulate(nodes, grads, *x, g.to_vec()),
        Op::Softmax { x, axis, .. } => {
            let (outer, dim, inner) = split_axis(y.shape(), *axis);
            let yd = y.data();
            let mut gx = vec![0.0; g.len()];
            for o in 0..outer {
                for i in 0..inner {
                    let at = |j: usize| (o * dim + j) * inner + i;
                    let dot: f64 = (0..dim).map(|j| yd[at(j)] * g[at(j)]).sum();
                    for j in 0..dim {
                        gx[at(j)] = yd[at(j)] * (g[at(j)] - dot);
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            rstd,
        } => {
            let gv = val(*gamma);
            let d = gv.numel();
            if needs(*gamma) {
                let mut gg = vec![0.0; d];
                for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                    for j in 0..d {
                        gg[j] += gr[j] * hr[j];
                    }
                }
                accumulate(nodes, grads, *gamma, gg);
            }
            if needs(*beta) {
                accumulate(nodes, grads, *beta, reduce_to_suffix(g, d));
            }
            if needs(*x) {
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), r) in g.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let dxhat: Vec<f64> = gr.iter().zip(gv.data()).map(|(a, b)| a * b).collect();
                    let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                    let mean_dh = dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    gx.extend(
                        dxhat
                            .iter()
                            .zip(hr)
                            .map(|(dh, h)| r * (dh - mean_d - h * mean_dh)),
                    );
                }
                accumulate(nodes, grads, *x, gx);
            }
        }
        Op::Gelu { x } => {
            let gx = g
                .iter()
                .zip(val(*x).data())
                .map(|(gi, &xi)| gi * gelu_deriv(xi))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::Sigmoid { x } => {
            let gx = g
                .iter()
                .zip(y.data())
                .map(|(gi, s)| gi * s * (1.0 - s))
                .collect();
            accumulate(nodes, grads, *x, gx);
        }
        Op::MeanAxis { x, axis } => {
            let xs = val(*x).shape();
            let (outer, dim, inner) = split_axis(xs, *axis);
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for j in 0..dim {
                    for i in 0..inner {
                        gx[(o * dim + j) * inner + i] = g[o * inner + i] / dim as f64;
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::SumAll { x } => {
            accumulate(nodes, grads, *x, vec![g[0]; val(*x).numel()]);
        }
        Op::MeanAll { x } => {
            let n = val(*x).numel();
            accumulate(nodes, grads, *x, vec![g[0] / n as f64; n]);
        }
        Op::Concat { parts, axis } => {
            let (outer, total, inner) = split_axis(y.shape(), *axis);
            let mut offset = 0;
            for &p in parts {
                let len = val(p).shape()[*axis];
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..outer {
                        let start = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[start..start + len * inner]);
                    }
                    accumulate(nodes, grads, p, gp);
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            let len = y.shape()[*axis];
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                let dst = (o * dim + start) * inner;
                gx[dst..dst + len * inner]
                    .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Gather { x, axis, indices } => {
            let (outer, dim, inner) = split_axis(val(*x).shape(), *axis);
            let mut gx = vec![0.0; outer * dim * inner];
            for o in 0..outer {
                for (k, &idx) in indices.iter().enumerate() {
                    let src = (o * indices.len() + k) * inner;
                    let dst = (o * dim + idx) * inner;
                    for i in 0..inner {
                        gx[dst + i] += g[src + i];
                    }
                }
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::L2Normalize { x, norms } => {
            let d = g.len() / norms.len();
            let mut gx = Vec::with_capacity(g.len());
            for ((gr, yr), n) in g.chunks_exact(d).zip(y.data().chunks_exact(d)).zip(norms) {
                let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                gx.extend(gr.iter().zip(yr).map(|(gi, yi)| (gi - yi * dot) / n));
            }
            accumulate(nodes, grads, *x, gx);
        }
        Op::Mse { a, b } => {
            let (av, bv) = (val(*a), val(*b));
            let scale = 2.0 * g[0] / av.numel() as f64;
            let diff: Vec<f64> = av
                .data()
                .iter()
                .zip(bv.data())
                .map(|(x, y)| scale * (x - y))
                .collect();
            if needs(*b) {
                accumulate(nodes, grads, *b, diff.iter().map(|v| -v).collect());
            }
            if needs(*a) {
                accumulate(nodes, grads, *a, diff);
            }
        }
        Op::CrossEntropy {
            logits,
            targets,
            probs,
        } => {
            let c = probs.len() / targets.len();
            let scale = g[0] / targets.len() as f64;
            let mut gx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
            for (r, &t) in targets.iter().enumerate() {
                gx[r * c + t] -= scale;
            }
            accumulate(nodes, grads, *logits, gx);
        }
    }
}

fn matmul_backward(nodes: &[Node], grads: &mut [Option<Vec<f64>>], a: Var, b: Var, g: &[f64]) {
    let av = &nodes[a.0].value;
    let bv = &nodes[b.0].value;
    let (ash, bsh) = (av.shape(), bv.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let need_a = nodes[a.0].requires_grad;
    let need_b = nodes[b.0].requires_grad;
    if bsh.len() == 2 {
        let rows = av.numel() / k;
        if need_a {
            let bt = transpose(k, n, bv.data());
            let mut ga = vec![0.0; rows * k];
            matmul_into(rows, n, k, g, &bt, &mut ga);
            accumulate(nodes, grads, a, ga);
        }
        if need_b {
            let at = transpose(rows, k, av.data());
            let mut gb = vec![0.0; k * n];
            matmul_into(k, rows, n, &at, g, &mut gb);
            accumulate(nodes, grads, b, gb);
        }
        return;
    }
    let batch = bv.numel() / (k * n);
    let a_batched = ash.len() > 2;
    let mut ga = vec![0.0; av.numel()];
    let mut gb = vec![0.0; bv.numel()];
    let mut tmp_a = vec![0.0; m * k];
    let mut tmp_b = vec![0.0; k * n];
    for i in 0..batch {
        let a_off = if a_batched { i * m * k } else { 0 };
        let a_i = &av.data()[a_off..a_off + m * k];
        let b_i = &bv.data()[i * k * n..(i + 1) * k * n];
        let g_i = &g[i * m * n..(i + 1) * m * n];
        if need_a {
            let bt = transpose(k, n, b_i);
            matmul_into(m, n, k, g_i, &bt, &mut tmp_a);
            for (dst, v) in ga[a_off..a_off + m * k].iter_mut().zip(&tmp_a) {
                *dst += v;
            }
        }
        if need_b {
            let at = transpose(m, k, a_i);
            matmul_into(k, m, n, &at, g_i, &mut tmp_b);
            gb[i * k * n..(i + 1) * k * n].copy_from_slice(&tmp_b);
        }
    }
    if need_a {
        accumulate(nodes, grads, a, ga);
    }
    if need_b {
        accumulate(nodes, grads, b, gb);
    }
}
