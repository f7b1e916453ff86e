//! Tape-based reverse-mode differentiation over a fixed set of tensor ops.
//!
//! Nodes are appended in evaluation order, so the tape is already a
//! topological order and `backward` is a single reverse sweep. Gradients are
//! only materialized for nodes that (transitively) depend on a leaf created
//! with `requires_grad`.

use super::kernels::{gemm, transpose};
use super::{Real, ShapeError, Tensor, LAYER_NORM_EPS, NORM_EPS};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    MulScalar(Var, Var),
    MatMul { a: Var, b: Var, trans_b: bool },
    Transpose(Var),
    Reshape(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax(Var),
    Gelu(Var),
    Mean { input: Var, axis: usize },
    Sum { input: Var, axis: usize },
    L2Normalize { input: Var, norms: Vec<F> },
    Log(Var),
    Exp(Var),
    LogSumExp(Var),
    Pick { input: Var, indices: Vec<usize> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Gradients of a scalar with respect to the leaves of a graph.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    shapes: Vec<Vec<usize>>,
}

impl<F: Real> Gradients<F> {
    /// Gradient for a leaf, or `None` if it does not require grad.
    pub fn get(&self, v: Var) -> Option<Tensor<F>> {
        self.grads
            .get(v.0)?
            .as_ref()
            .map(|g| Tensor::new(self.shapes[v.0].clone(), g.clone()).expect("gradient shape"))
    }

    /// Gradient for a leaf, zeros if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var) -> Tensor<F> {
        self.get(v)
            .unwrap_or_else(|| Tensor::zeros(self.shapes[v.0].clone()))
    }
}

/// Dimensions around `axis`: `(outer, axis_len, inner)`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn removed_axis(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out = shape.to_vec();
    out.remove(axis);
    if out.is_empty() {
        out.push(1);
    }
    out
}

/// Sum `g` (of the broadcast shape) down to a suffix of length `small_len`.
fn reduce_to<F: Real>(g: &[F], small_len: usize) -> Vec<F> {
    if g.len() == small_len {
        return g.to_vec();
    }
    let mut out = vec![F::zero(); small_len];
    for chunk in g.chunks(small_len) {
        for (o, &x) in out.iter_mut().zip(chunk) {
            *o = *o + x;
        }
    }
    out
}

fn add_into<F: Real>(slot: &mut Option<Vec<F>>, len: usize, delta: &[F]) {
    let buf = slot.get_or_insert_with(|| vec![F::zero(); len]);
    for (b, &d) in buf.iter_mut().zip(delta) {
        *b = *b + d;
    }
}

fn slot_mut<F: Real>(slot: &mut Option<Vec<F>>, len: usize) -> &mut Vec<F> {
    slot.get_or_insert_with(|| vec![F::zero(); len])
}

const GELU_C: f64 = 0.044_715;

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let half = F::lit(0.5);
    let k = F::lit((2.0 / std::f64::consts::PI).sqrt());
    let c = F::lit(GELU_C);
    let x3 = x * x * x;
    let t = (k * (x + c * x3)).tanh();
    let y = half * x * (F::one() + t);
    let dy = half * (F::one() + t)
        + half * x * (F::one() - t * t) * k * (F::one() + F::lit(3.0) * c * x * x);
    (y, dy)
}

/// A tape of tensor operations.
pub struct Graph<F: Real = f32> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value.data()[0]
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(F, F) -> F,
    ) -> Result<(Tensor<F>, bool), ShapeError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let a_big = if sa == sb || is_suffix(sb, sa) {
            true
        } else if is_suffix(sa, sb) {
            false
        } else {
            return Err(ShapeError::new(name, sa, sb));
        };
        let (va, vb) = (self.value(a), self.value(b));
        let shape = if a_big { sa.to_vec() } else { sb.to_vec() };
        let data = if a_big {
            let m = vb.len().max(1);
            va.data()
                .iter()
                .enumerate()
                .map(|(i, &x)| f(x, vb.data()[i % m]))
                .collect()
        } else {
            let m = va.len().max(1);
            vb.data()
                .iter()
                .enumerate()
                .map(|(i, &y)| f(va.data()[i % m], y))
                .collect()
        };
        let rg = self.rg(a) || self.rg(b);
        Ok((Tensor::new(shape, data).expect("binary shape"), rg))
    }

    /// Elementwise sum; either operand may be a suffix-broadcast of the other.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (t, rg) = self.binary("add", a, b, |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (t, rg) = self.binary("sub", a, b, |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        let (t, rg) = self.binary("mul", a, b, |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())
            .expect("scale");
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// Multiply every element of `a` by the one-element node `s`.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var, ShapeError> {
        if self.value(s).len() != 1 {
            return Err(ShapeError::new("mul_scalar", self.shape(a), self.shape(s)));
        }
        let c = self.scalar(s);
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| x * c).collect())
            .expect("mul_scalar");
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::MulScalar(a, s), rg))
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, ShapeError> {
        let name = if trans_b { "matmul_nt" } else { "matmul" };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(ShapeError::new(name, &sa, &sb));
        }
        let k = sa[sa.len() - 1];
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        if k != kb {
            return Err(ShapeError::new(name, &sa, &sb));
        }
        let mut out_shape = sa[..sa.len() - 1].to_vec();
        out_shape.push(n);
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![F::zero(); out_shape.iter().product()];
        if sb.len() == 2 {
            let m = va.len() / k.max(1);
            gemm(false, trans_b, m, n, k, va, vb, &mut out);
        } else {
            if sa[..sa.len() - 2] != sb[..sb.len() - 2] {
                return Err(ShapeError::new(name, &sa, &sb));
            }
            let m = sa[sa.len() - 2];
            let batches: usize = sa[..sa.len() - 2].iter().product();
            for bi in 0..batches {
                gemm(
                    false,
                    trans_b,
                    m,
                    n,
                    k,
                    &va[bi * m * k..(bi + 1) * m * k],
                    &vb[bi * k * n..(bi + 1) * k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                );
            }
        }
        let rg = self.rg(a) || self.rg(b);
        let t = Tensor::new(out_shape, out).expect("matmul shape");
        Ok(self.push(t, Op::MatMul { a, b, trans_b }, rg))
    }

    /// `a · b`; `b` is either `[k, n]` (shared) or batched like `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` over the last two axes of `b`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, ShapeError> {
        self.matmul_impl(a, b, true)
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var, ShapeError> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(ShapeError::new("transpose", &s, &[]));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(src.len());
        for chunk in src.chunks(r * c) {
            data.extend(transpose(chunk, r, c));
        }
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 1, l - 2);
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(shape, data).expect("transpose"), Op::Transpose(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, ShapeError> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, ShapeError> {
        let Some(&first) = inputs.first() else {
            return Err(ShapeError::new("concat", &[], &[]));
        };
        let s0 = self.shape(first).to_vec();
        if axis >= s0.len() {
            return Err(ShapeError::new("concat", &s0, &[axis]));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != s0.len()
                || s[..axis] != s0[..axis]
                || s[axis + 1..] != s0[axis + 1..]
            {
                return Err(ShapeError::new("concat", &s0, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut shape = s0.clone();
        shape[axis] = total;
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                data.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = inputs.iter().any(|&v| self.rg(v));
        let t = Tensor::new(shape, data).expect("concat");
        Ok(self.push(
            t,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// `input[.., start..start + len, ..]` along `axis`.
    pub fn slice(&mut self, input: Var, axis: usize, start: usize, len: usize) -> Result<Var, ShapeError> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(ShapeError::new("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(input).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * n * inner + start * inner;
            data.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(input);
        let t = Tensor::new(shape, data).expect("slice");
        Ok(self.push(t, Op::Slice { input, axis, start }, rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var, ShapeError> {
        let s = self.shape(x).to_vec();
        let d = *s.last().unwrap_or(&0);
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(ShapeError::new("layer_norm", &s, self.shape(gamma)));
        }
        let eps = F::lit(LAYER_NORM_EPS);
        let dn = F::from_usize(d).unwrap();
        let (xv, gv, bv) = (self.value(x), self.value(gamma), self.value(beta));
        let rows = xv.len() / d.max(1);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..rows {
            let row = &xv.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<F>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv.data()[j] + bv.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let t = Tensor::new(s, out).expect("layer_norm");
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.row_len();
        let mut out = v.data().to_vec();
        for row in out.chunks_mut(d.max(1)) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z = z + *x;
            }
            row.iter_mut().for_each(|x| *x = *x / z);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("softmax");
        let rg = self.rg(a);
        self.push(t, Op::Softmax(a), rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::new(
            v.shape().to_vec(),
            v.data().iter().map(|&x| gelu_parts(x).0).collect(),
        )
        .expect("gelu");
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    fn reduce(&mut self, input: Var, axis: usize, mean: bool) -> Result<Var, ShapeError> {
        let s = self.shape(input).to_vec();
        if axis >= s.len() {
            return Err(ShapeError::new(if mean { "mean" } else { "sum" }, &s, &[axis]));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let src = self.value(input).data();
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..n {
                let row = &src[(o * n + i) * inner..(o * n + i + 1) * inner];
                for (acc, &x) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + x;
                }
            }
        }
        if mean {
            let scale = F::one() / F::from_usize(n.max(1)).unwrap();
            out.iter_mut().for_each(|x| *x = *x * scale);
        }
        let rg = self.rg(input);
        let t = Tensor::new(removed_axis(&s, axis), out).expect("reduce");
        let op = if mean {
            Op::Mean { input, axis }
        } else {
            Op::Sum { input, axis }
        };
        Ok(self.push(t, op, rg))
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, input: Var, axis: usize) -> Result<Var, ShapeError> {
        self.reduce(input, axis, true)
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, input: Var, axis: usize) -> Result<Var, ShapeError> {
        self.reduce(input, axis, false)
    }

    /// Mean of every element, as a one-element node.
    pub fn mean_all(&mut self, input: Var) -> Var {
        let n = self.value(input).len();
        let flat = self.reshape(input, &[n]).expect("flatten");
        self.mean(flat, 0).expect("mean of flat")
    }

    /// Scale each last-axis row to unit L2 norm.
    pub fn l2_normalize(&mut self, input: Var) -> Var {
        let v = self.value(input);
        let d = v.row_len().max(1);
        let eps = F::lit(NORM_EPS);
        let mut out = v.data().to_vec();
        let mut norms = Vec::with_capacity(out.len() / d);
        for row in out.chunks_mut(d) {
            let n = row.iter().map(|&x| x * x).sum::<F>().sqrt().max(eps);
            norms.push(n);
            row.iter_mut().for_each(|x| *x = *x / n);
        }
        let t = Tensor::new(v.shape().to_vec(), out).expect("l2_normalize");
        let rg = self.rg(input);
        self.push(t, Op::L2Normalize { input, norms }, rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())
            .expect("unary");
        let rg = self.rg(a);
        self.push(t, op, rg)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, F::ln, Op::Log(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, F::exp, Op::Exp(a))
    }

    /// Numerically stable `log Σ exp` over the last axis. Rows may contain
    /// `-inf` entries (masked out), but not only `-inf`.
    pub fn logsumexp(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let d = v.row_len().max(1);
        let out: Vec<F> = v
            .data()
            .chunks(d)
            .map(|row| {
                let m = row.iter().copied().fold(F::neg_infinity(), F::max);
                let z: F = row.iter().map(|&x| (x - m).exp()).sum();
                m + z.ln()
            })
            .collect();
        let s = v.shape();
        let shape = removed_axis(s, s.len() - 1);
        let t = Tensor::new(shape, out).expect("logsumexp");
        let rg = self.rg(a);
        self.push(t, Op::LogSumExp(a), rg)
    }

    /// `out[r] = input[r, indices[r]]` for a 2-D input.
    pub fn pick(&mut self, input: Var, indices: &[usize]) -> Result<Var, ShapeError> {
        let s = self.shape(input).to_vec();
        if s.len() != 2 || s[0] != indices.len() || indices.iter().any(|&i| i >= s[1]) {
            return Err(ShapeError::new("pick", &s, &[indices.len()]));
        }
        let v = self.value(input).data();
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| v[r * s[1] + c])
            .collect();
        let rg = self.rg(input);
        let t = Tensor::new(vec![indices.len()], out).expect("pick");
        Ok(self.push(
            t,
            Op::Pick {
                input,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element node.
    pub fn backward(&self, loss: Var) -> Gradients<F> {
        assert_eq!(self.value(loss).len(), 1, "backward from a non-scalar node");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<F>>> = (0..n).map(|_| None).collect();
        if self.rg(loss) {
            grads[loss.0] = Some(vec![F::one()]);
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
        }
        Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
        }
    }

    fn backprop_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let len_of = |v: Var| self.nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) => {
                let neg = matches!(node.op, Op::Sub(..));
                if self.rg(*a) {
                    let d = reduce_to(g, len_of(*a));
                    add_into(&mut grads[a.0], d.len(), &d);
                }
                if self.rg(*b) {
                    let mut d = reduce_to(g, len_of(*b));
                    if neg {
                        d.iter_mut().for_each(|x| *x = -*x);
                    }
                    add_into(&mut grads[b.0], d.len(), &d);
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let (la, lb) = (va.len().max(1), vb.len().max(1));
                if self.rg(*a) {
                    let full: Vec<F> = g.iter().enumerate().map(|(i, &x)| x * vb[i % lb]).collect();
                    let d = reduce_to(&full, va.len());
                    add_into(&mut grads[a.0], d.len(), &d);
                }
                if self.rg(*b) {
                    let full: Vec<F> = g.iter().enumerate().map(|(i, &x)| x * va[i % la]).collect();
                    let d = reduce_to(&full, vb.len());
                    add_into(&mut grads[b.0], d.len(), &d);
                }
            }
            Op::Scale(a, c) => {
                let buf = slot_mut(&mut grads[a.0], g.len());
                for (o, &x) in buf.iter_mut().zip(g) {
                    *o = *o + x * *c;
                }
            }
            Op::MulScalar(a, s) => {
                let c = self.scalar(*s);
                if self.rg(*a) {
                    let buf = slot_mut(&mut grads[a.0], g.len());
                    for (o, &x) in buf.iter_mut().zip(g) {
                        *o = *o + x * c;
                    }
                }
                if self.rg(*s) {
                    let ds: F = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&x, &y)| x * y)
                        .sum();
                    add_into(&mut grads[s.0], 1, &[ds]);
                }
            }
            Op::MatMul { a, b, trans_b } => self.backprop_matmul(*a, *b, *trans_b, g, grads),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let buf = slot_mut(&mut grads[a.0], g.len());
                // g has shape [.., c, r]
                for (bi, chunk) in g.chunks(r * c).enumerate() {
                    let t = transpose(chunk, c, r);
                    for (o, &x) in buf[bi * r * c..(bi + 1) * r * c].iter_mut().zip(&t) {
                        *o = *o + x;
                    }
                }
            }
            Op::Reshape(a) => add_into(&mut grads[a.0], g.len(), g),
            Op::Concat { inputs, axis } => {
                let out_shape = node.value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut offset = 0;
                for &v in inputs {
                    let n = self.shape(v)[*axis];
                    if self.rg(v) {
                        let buf = slot_mut(&mut grads[v.0], outer * n * inner);
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..(o * total + offset + n) * inner];
                            for (d, &x) in buf[o * n * inner..(o + 1) * n * inner].iter_mut().zip(src) {
                                *d = *d + x;
                            }
                        }
                    }
                    offset += n;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.shape(*input);
                let (outer, n, inner) = split_axis(s, *axis);
                let len = node.value.shape()[*axis];
                let buf = slot_mut(&mut grads[input.0], outer * n * inner);
                for o in 0..outer {
                    let base = o * n * inner + start * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    for (d, &x) in buf[base..base + len * inner].iter_mut().zip(src) {
                        *d = *d + x;
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).len();
                let dn = F::from_usize(d).unwrap();
                let gv = self.value(*gamma).data();
                let rows = g.len() / d.max(1);
                if self.rg(*gamma) || self.rg(*beta) {
                    let mut dg = vec![F::zero(); d];
                    let mut db = vec![F::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            let gy = g[r * d + j];
                            dg[j] = dg[j] + gy * xhat[r * d + j];
                            db[j] = db[j] + gy;
                        }
                    }
                    if self.rg(*gamma) {
                        add_into(&mut grads[gamma.0], d, &dg);
                    }
                    if self.rg(*beta) {
                        add_into(&mut grads[beta.0], d, &db);
                    }
                }
                if self.rg(*x) {
                    let buf = slot_mut(&mut grads[x.0], g.len());
                    let mut dxhat = vec![F::zero(); d];
                    for r in 0..rows {
                        let mut s1 = F::zero();
                        let mut s2 = F::zero();
                        for j in 0..d {
                            dxhat[j] = g[r * d + j] * gv[j];
                            s1 = s1 + dxhat[j];
                            s2 = s2 + dxhat[j] * xhat[r * d + j];
                        }
                        let k = rstd[r] / dn;
                        for j in 0..d {
                            let v = k * (dn * dxhat[j] - s1 - xhat[r * d + j] * s2);
                            buf[r * d + j] = buf[r * d + j] + v;
                        }
                    }
                }
            }
            Op::Softmax(a) => {
                let y = node.value.data();
                let d = node.value.row_len().max(1);
                let buf = slot_mut(&mut grads[a.0], g.len());
                for ((gr, yr), br) in g.chunks(d).zip(y.chunks(d)).zip(buf.chunks_mut(d)) {
                    let dot: F = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        br[j] = br[j] + yr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = self.value(*a).data();
                let buf = slot_mut(&mut grads[a.0], g.len());
                for ((o, &gy), &x) in buf.iter_mut().zip(g).zip(xv) {
                    *o = *o + gy * gelu_parts(x).1;
                }
            }
            Op::Mean { input, axis } | Op::Sum { input, axis } => {
                let s = self.shape(*input);
                let (outer, n, inner) = split_axis(s, *axis);
                let scale = if matches!(node.op, Op::Mean { .. }) {
                    F::one() / F::from_usize(n.max(1)).unwrap()
                } else {
                    F::one()
                };
                let buf = slot_mut(&mut grads[input.0], outer * n * inner);
                for o in 0..outer {
                    let src = &g[o * inner..(o + 1) * inner];
                    for i in 0..n {
                        let dst = &mut buf[(o * n + i) * inner..(o * n + i + 1) * inner];
                        for (d, &x) in dst.iter_mut().zip(src) {
                            *d = *d + x * scale;
                        }
                    }
                }
            }
            Op::L2Normalize { input, norms } => {
                let y = node.value.data();
                let d = node.value.row_len().max(1);
                let eps = F::lit(NORM_EPS);
                let buf = slot_mut(&mut grads[input.0], g.len());
                for (r, ((gr, yr), br)) in g
                    .chunks(d)
                    .zip(y.chunks(d))
                    .zip(buf.chunks_mut(d))
                    .enumerate()
                {
                    let n = norms[r];
                    let dot: F = if n > eps {
                        gr.iter().zip(yr).map(|(&a, &b)| a * b).sum()
                    } else {
                        F::zero()
                    };
                    for j in 0..d {
                        br[j] = br[j] + (gr[j] - yr[j] * dot) / n;
                    }
                }
            }
            Op::Log(a) => {
                let xv = self.value(*a).data();
                let buf = slot_mut(&mut grads[a.0], g.len());
                for ((o, &gy), &x) in buf.iter_mut().zip(g).zip(xv) {
                    *o = *o + gy / x;
                }
            }
            Op::Exp(a) => {
                let y = node.value.data();
                let buf = slot_mut(&mut grads[a.0], g.len());
                for ((o, &gy), &yv) in buf.iter_mut().zip(g).zip(y) {
                    *o = *o + gy * yv;
                }
            }
            Op::LogSumExp(a) => {
                let xv = self.value(*a);
                let d = xv.row_len().max(1);
                let lse = node.value.data();
                let buf = slot_mut(&mut grads[a.0], xv.len());
                for (r, (xr, br)) in xv.data().chunks(d).zip(buf.chunks_mut(d)).enumerate() {
                    for j in 0..d {
                        br[j] = br[j] + g[r] * (xr[j] - lse[r]).exp();
                    }
                }
            }
            Op::Pick { input, indices } => {
                let cols = self.shape(*input)[1];
                let buf = slot_mut(&mut grads[input.0], indices.len() * cols);
                for (r, &c) in indices.iter().enumerate() {
                    buf[r * cols + c] = buf[r * cols + c] + g[r];
                }
            }
        }
    }

    fn backprop_matmul(&self, a: Var, b: Var, trans_b: bool, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let k = sa[sa.len() - 1];
        let n = if trans_b { sb[sb.len() - 2] } else { sb[sb.len() - 1] };
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let (batches, m) = if sb.len() == 2 {
            (1, va.len() / k.max(1))
        } else {
            (sa[..sa.len() - 2].iter().product(), sa[sa.len() - 2])
        };
        let b_stride = if sb.len() == 2 { 0 } else { k * n };
        if self.rg(a) {
            let buf = slot_mut(&mut grads[a.0], va.len());
            for bi in 0..batches {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let bb = &vb[bi * b_stride..bi * b_stride + k * n];
                let da = &mut buf[bi * m * k..(bi + 1) * m * k];
                // dA = dC · op(B)ᵀ
                gemm(false, !trans_b, m, k, n, gb, bb, da);
            }
        }
        if self.rg(b) {
            let buf = slot_mut(&mut grads[b.0], vb.len());
            for bi in 0..batches {
                let gb = &g[bi * m * n..(bi + 1) * m * n];
                let ab = &va[bi * m * k..(bi + 1) * m * k];
                let db = &mut buf[bi * b_stride..bi * b_stride + k * n];
                if trans_b {
                    // dB = dCᵀ · A  ([n, k])
                    gemm(true, false, n, k, m, gb, ab, db);
                } else {
                    // dB = Aᵀ · dC  ([k, n])
                    gemm(true, false, k, n, m, ab, gb, db);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::zeros(vec![5]));
        let y = g.softmax(x);
        assert!(g.value(y).data().iter().all(|&p| (p - 0.2).abs() < 1e-15));
    }

    #[test]
    fn l2_normalize_gives_unit_rows() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.1, 9.0]));
        let y = g.l2_normalize(x);
        let yv = g.value(y);
        for r in 0..2 {
            let n: f64 = yv.row(r).iter().map(|v| v * v).sum();
            assert!((n - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 2]));
        let err = g.matmul(a, b).unwrap_err();
        assert_eq!((err.lhs.clone(), err.rhs.clone()), (vec![2, 3], vec![4, 2]));
        assert!(err.to_string().contains("[2, 3]") && err.to_string().contains("[4, 2]"));
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn broadcast_add_reduces_gradient() {
        let mut g = Graph::<f64>::new();
        let a = g.leaf(Tensor::zeros(vec![3, 2]), true);
        let b = g.leaf(t(&[2], &[1.0, 2.0]), true);
        let c = g.add(a, b).unwrap();
        let s = g.mean_all(c);
        let grads = g.backward(s);
        let gb = grads.get(b).unwrap();
        assert!((gb.data()[0] - 0.5).abs() < 1e-12);
        assert_eq!(grads.get(a).unwrap().data().len(), 6);
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let w = g.leaf(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let x = g.leaf(t(&[1, 2], &[1.0, 1.0]), true);
        let y = g.matmul(x, w).unwrap();
        let s = g.mean_all(y);
        let grads = g.backward(s);
        assert!(grads.get(w).is_none());
        assert_eq!(grads.get(x).unwrap().data(), &[1.5, 3.5]);
    }

    #[test]
    fn logsumexp_tolerates_masked_entries() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[1, 3], &[0.0, f64::NEG_INFINITY, 0.0]), true);
        let y = g.logsumexp(x);
        assert!((g.scalar(y) - 2f64.ln()).abs() < 1e-12);
        let grads = g.backward(y);
        assert_eq!(grads.get(x).unwrap().data(), &[0.5, 0.0, 0.5]);
    }
}
