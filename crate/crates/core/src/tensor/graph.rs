use std::sync::Arc;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    DivScalar(Var, Var),
    Relu(Var),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    MeanRows(Var),
    Pick {
        x: Var,
        idx: Vec<usize>,
    },
    Mse(Var, Var),
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    AttnScores {
        q: Var,
        k: Var,
        heads: usize,
        scale: f64,
        mask: Arc<[bool]>,
    },
    MaskedSoftmax(Var),
    AttnContext {
        p: Var,
        v: Var,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recorded computation. Nodes are appended in evaluation order, which is
/// a topological order, so the backward pass is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that required one.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push(value, op, needs)
    }

    /// A constant input; never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable leaf.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let out = self.value(a).matmul(self.value(b))?;
        Ok(self.push_op(out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m×k]`, `b: [n×k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_nt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::matmul_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let out = Tensor::new([m, n], out)?;
        Ok(self.push_op(out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        Ok(self.push_op(out, Op::Transpose(a), &[a]))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor {
            shape: ta.shape().to_vec(),
            data,
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        Ok(self.push_op(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        Ok(self.push_op(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        Ok(self.push_op(out, Op::Mul(a, b), &[a, b]))
    }

    fn row_check(&self, op: &'static str, x: Var, r: Var) -> Result<usize> {
        let d = self.value(x).cols();
        if self.value(r).len() != d {
            return Err(Error::dim(op, self.shape(x), self.shape(r)));
        }
        Ok(d)
    }

    /// `x[.., d] + b[d]` broadcast over rows.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let d = self.row_check("add_row", x, b)?;
        let mut out = self.value(x).clone();
        let bv = self.value(b).data();
        for (i, o) in out.data.iter_mut().enumerate() {
            *o += bv[i % d];
        }
        Ok(self.push_op(out, Op::AddRow(x, b), &[x, b]))
    }

    /// `x[.., d] * s[d]` broadcast over rows.
    pub fn mul_row(&mut self, x: Var, s: Var) -> Result<Var> {
        let d = self.row_check("mul_row", x, s)?;
        let mut out = self.value(x).clone();
        let sv = self.value(s).data();
        for (i, o) in out.data.iter_mut().enumerate() {
            *o *= sv[i % d];
        }
        Ok(self.push_op(out, Op::MulRow(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).map(|v| v * c);
        self.push_op(out, Op::Scale(x, c), &[x])
    }

    /// `x / s` for a one-element `s`.
    pub fn div_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = self.value(s).item()?;
        if sv == 0.0 || !sv.is_finite() {
            return Err(Error::Numeric {
                op: "div_scalar",
                detail: format!("divisor {sv}"),
            });
        }
        let out = self.value(x).map(|v| v / sv);
        Ok(self.push_op(out, Op::DivScalar(x, s), &[x, s]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push_op(out, Op::Relu(x), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::gelu);
        self.push_op(out, Op::Gelu(x), &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::sigmoid);
        self.push_op(out, Op::Sigmoid(x), &[x])
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let out = self.value(x).map(kernels::softplus);
        self.push_op(out, Op::Softplus(x), &[x])
    }

    fn check_finite(&self, op: &'static str, x: Var) -> Result<()> {
        if !self.value(x).all_finite() {
            return Err(Error::Numeric {
                op,
                detail: "non-finite input".into(),
            });
        }
        Ok(())
    }

    /// Softmax over the last dimension, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("softmax", x)?;
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c == 0 {
            return Err(Error::dim("softmax", self.shape(x), &[1]));
        }
        out.data.chunks_mut(c).for_each(kernels::softmax_inplace);
        Ok(self.push_op(out, Op::Softmax(x), &[x]))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        self.check_finite("log_softmax", x)?;
        let mut out = self.value(x).clone();
        let c = out.cols();
        if c == 0 {
            return Err(Error::dim("log_softmax", self.shape(x), &[1]));
        }
        out.data
            .chunks_mut(c)
            .for_each(kernels::log_softmax_inplace);
        Ok(self.push_op(out, Op::LogSoftmax(x), &[x]))
    }

    /// Layer normalization over the last dimension followed by a per-feature
    /// affine transform.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let d = self.row_check("layer_norm", x, gain)?;
        self.row_check("layer_norm", x, bias)?;
        if eps <= 0.0 {
            return Err(Error::Parameter(format!(
                "layer_norm eps {eps} must be > 0"
            )));
        }
        let xv = self.value(x);
        let n = xv.len();
        let mut out = vec![0.0; n];
        let mut xhat = vec![0.0; n];
        let mut inv_std = vec![0.0; xv.rows()];
        kernels::layer_norm_rows(
            xv.data(),
            d,
            self.value(gain).data(),
            self.value(bias).data(),
            eps,
            &mut out,
            &mut xhat,
            &mut inv_std,
        );
        let out = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push_op(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Selects rows of a 2-D tensor; also serves as embedding lookup.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        if xv.rank() != 2 {
            return Err(Error::dim("gather_rows", xv.shape(), &[0, 0]));
        }
        let (r, c) = (xv.shape()[0], xv.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            if i >= r {
                return Err(Error::Range { id: i, size: r });
            }
            data.extend_from_slice(xv.row(i));
        }
        let out = Tensor::new([idx.len(), c], data)?;
        Ok(self.push_op(
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Stacks 2-D tensors with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Usage("concat_rows of nothing".into()))?;
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rank() != 2 || v.cols() != c {
                return Err(Error::dim("concat_rows", self.shape(first), v.shape()));
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new([rows, c], data)?;
        Ok(self.push_op(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        Ok(self.push_op(out, Op::Reshape(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push_op(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.data().iter().sum::<f64>() / v.len().max(1) as f64;
        self.push_op(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Column means of a `[n, d]` tensor as `[1, d]`.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let v = self.value(x);
        let (n, d) = (v.rows(), v.cols());
        if n == 0 {
            return Err(Error::Usage("mean_rows of an empty tensor".into()));
        }
        let mut out = vec![0.0; d];
        for r in 0..n {
            for (o, x) in out.iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        out.iter_mut().for_each(|o| *o /= n as f64);
        let out = Tensor::new([1, d], out)?;
        Ok(self.push_op(out, Op::MeanRows(x), &[x]))
    }

    /// Gathers individual elements by flat index into a 1-D tensor.
    pub fn pick(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let mut data = Vec::with_capacity(idx.len());
        for &i in idx {
            data.push(*v.data().get(i).ok_or(Error::Range {
                id: i,
                size: v.len(),
            })?);
        }
        let out = Tensor::new([idx.len()], data)?;
        Ok(self.push_op(
            out,
            Op::Pick {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        ))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.len().max(1) as f64;
        let s = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push_op(Tensor::scalar(s), Op::Mse(a, b), &[a, b]))
    }

    /// Unit-L2 rows; an all-zero row maps to zeros.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = out.cols();
        let mut norms = Vec::with_capacity(out.rows());
        for row in out.data.chunks_mut(c.max(1)) {
            let n = kernels::dot(row, row).sqrt();
            norms.push(n);
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        self.push_op(out, Op::L2NormalizeRows { x, norms }, &[x])
    }

    /// Scaled multi-head dot-product scores `[heads, T, S]` for queries
    /// `[T, d]` and keys `[S, d]`. Entries where `mask[t*S + s]` is false are
    /// recorded as 0 and excluded from the gradient.
    pub fn attn_scores(&mut self, q: Var, k: Var, heads: usize, mask: Arc<[bool]>) -> Result<Var> {
        let (qv, kv) = (self.value(q), self.value(k));
        if qv.rank() != 2 || kv.rank() != 2 || qv.cols() != kv.cols() {
            return Err(Error::dim("attn_scores", qv.shape(), kv.shape()));
        }
        let (t, s, d) = (qv.rows(), kv.rows(), qv.cols());
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "hidden {d} not divisible by {heads} heads"
            )));
        }
        if mask.len() != t * s {
            return Err(Error::dim("attn_scores mask", &[t, s], &[mask.len()]));
        }
        let dh = d / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = vec![0.0; heads * t * s];
        for h in 0..heads {
            for i in 0..t {
                let qi = &qv.row(i)[h * dh..(h + 1) * dh];
                for j in 0..s {
                    if mask[i * s + j] {
                        let kj = &kv.row(j)[h * dh..(h + 1) * dh];
                        out[(h * t + i) * s + j] = scale * kernels::dot(qi, kj);
                    }
                }
            }
        }
        let out = Tensor::new([heads, t, s], out)?;
        Ok(self.push_op(
            out,
            Op::AttnScores {
                q,
                k,
                heads,
                scale,
                mask,
            },
            &[q, k],
        ))
    }

    /// Softmax over the last axis of `[heads, T, S]` restricted to allowed
    /// entries; disallowed entries behave as −∞ and come out as exactly 0.
    pub fn masked_softmax(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        self.check_finite("masked_softmax", x)?;
        let mut out = self.value(x).clone();
        let s = out.cols();
        if s == 0 || !mask.len().is_multiple_of(s) {
            return Err(Error::dim("masked_softmax", out.shape(), &[mask.len()]));
        }
        let t = mask.len() / s;
        for (ri, row) in out.data.chunks_mut(s).enumerate() {
            let m = &mask[(ri % t) * s..(ri % t + 1) * s];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &ok)| ok)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::Numeric {
                    op: "masked_softmax",
                    detail: format!("row {} has no allowed entry", ri % t),
                });
            }
            let mut sum = 0.0;
            for (v, &ok) in row.iter_mut().zip(m) {
                *v = if ok { (*v - max).exp() } else { 0.0 };
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        Ok(self.push_op(out, Op::MaskedSoftmax(x), &[x]))
    }

    /// Per-head weighted sum of values: `p: [heads, T, S]`, `v: [S, d]` → `[T, d]`.
    pub fn attn_context(&mut self, p: Var, v: Var, heads: usize) -> Result<Var> {
        let (pv, vv) = (self.value(p), self.value(v));
        if pv.rank() != 3 || vv.rank() != 2 || pv.shape()[0] != heads || pv.shape()[2] != vv.rows()
        {
            return Err(Error::dim("attn_context", pv.shape(), vv.shape()));
        }
        let (t, s, d) = (pv.shape()[1], pv.shape()[2], vv.cols());
        let dh = d / heads;
        let mut out = vec![0.0; t * d];
        for h in 0..heads {
            for i in 0..t {
                let prow = &pv.data()[(h * t + i) * s..(h * t + i + 1) * s];
                let orow = &mut out[i * d + h * dh..i * d + (h + 1) * dh];
                for (j, &pj) in prow.iter().enumerate() {
                    if pj == 0.0 {
                        continue;
                    }
                    let vj = &vv.row(j)[h * dh..(h + 1) * dh];
                    for (o, &x) in orow.iter_mut().zip(vj) {
                        *o += pj * x;
                    }
                }
            }
        }
        let out = Tensor::new([t, d], out)?;
        Ok(self.push_op(out, Op::AttnContext { p, v, heads }, &[p, v]))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones(lv.shape().to_vec()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc(grads, *a, |ga| {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul_nt(gd, bv.data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                });
                self.acc(grads, *b, |gb| {
                    kernels::matmul_tn_acc(av.data(), gd, gb, m, k, n)
                });
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                self.acc(grads, *a, |ga| {
                    let mut tmp = vec![0.0; m * k];
                    kernels::matmul(gd, bv.data(), &mut tmp, m, n, k);
                    add_into(ga, &tmp);
                });
                self.acc(grads, *b, |gb| {
                    kernels::matmul_tn_acc(gd, av.data(), gb, m, n, k)
                });
            }
            Op::Transpose(a) => {
                let (r, c) = (out.shape()[0], out.shape()[1]);
                self.acc(grads, *a, |ga| {
                    let mut tmp = vec![0.0; r * c];
                    kernels::transpose(gd, &mut tmp, r, c);
                    add_into(ga, &tmp);
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| add_into(gb, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |ga| add_into(ga, gd));
                self.acc(grads, *b, |gb| {
                    gb.iter_mut().zip(gd).for_each(|(x, g)| *x -= g)
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * bv[i];
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] += gd[i] * av[i];
                    }
                });
            }
            Op::AddRow(x, b) => {
                self.acc(grads, *x, |gx| add_into(gx, gd));
                self.acc(grads, *b, |gb| {
                    let d = gb.len();
                    for (i, g) in gd.iter().enumerate() {
                        gb[i % d] += g;
                    }
                });
            }
            Op::MulRow(x, s) => {
                let (xv, sv) = (self.value(*x).data(), self.value(*s).data());
                let d = sv.len();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * sv[i % d];
                    }
                });
                self.acc(grads, *s, |gs| {
                    for i in 0..gd.len() {
                        gs[i % d] += gd[i] * xv[i];
                    }
                });
            }
            Op::Scale(x, c) => {
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(a, g)| *a += c * g)
                });
            }
            Op::DivScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    gx.iter_mut().zip(gd).for_each(|(a, g)| *a += g / sv)
                });
                self.acc(grads, *s, |gs| {
                    gs[0] -= gd.iter().zip(xv).map(|(g, x)| g * x).sum::<f64>() / (sv * sv);
                });
            }
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        if xv[i] > 0.0 {
                            gx[i] += gd[i];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * kernels::gelu_grad(xv[i]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = out.data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Softplus(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |gx| {
                    for i in 0..gx.len() {
                        gx[i] += gd[i] * kernels::sigmoid(xv[i]);
                    }
                });
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = out.data();
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for r in 0..y.len() / c {
                        let (yr, gr) = (&y[r * c..(r + 1) * c], &gd[r * c..(r + 1) * c]);
                        let dot = kernels::dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogSoftmax(x) => {
                let y = out.data();
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for r in 0..y.len() / c {
                        let gr = &gd[r * c..(r + 1) * c];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..c {
                            gx[r * c + j] += gr[j] - y[r * c + j].exp() * gsum;
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                self.acc(grads, *x, |gx| {
                    for r in 0..inv_std.len() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let xr = &xhat[r * d..(r + 1) * d];
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            m1 += gh;
                            m2 += gh * xr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            let gh = gr[j] * gv[j];
                            gx[r * d + j] += inv_std[r] * (gh - m1 - xr[j] * m2);
                        }
                    }
                });
                self.acc(grads, *gain, |gg| {
                    for (i, g) in gd.iter().enumerate() {
                        gg[i % d] += g * xhat[i];
                    }
                });
                self.acc(grads, *bias, |gb| {
                    for (i, g) in gd.iter().enumerate() {
                        gb[i % d] += g;
                    }
                });
            }
            Op::Gather { x, idx } => {
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &i) in idx.iter().enumerate() {
                        add_into(&mut gx[i * c..(i + 1) * c], &gd[r * c..(r + 1) * c]);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for p in parts {
                    let n = self.value(*p).len();
                    self.acc(grads, *p, |gp| add_into(gp, &gd[off..off + n]));
                    off += n;
                }
            }
            Op::Reshape(x) => {
                self.acc(grads, *x, |gx| add_into(gx, gd));
            }
            Op::Sum(x) => {
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += gd[0]));
            }
            Op::Mean(x) => {
                let n = self.value(*x).len().max(1) as f64;
                self.acc(grads, *x, |gx| gx.iter_mut().for_each(|a| *a += gd[0] / n));
            }
            Op::MeanRows(x) => {
                let xv = self.value(*x);
                let (n, d) = (xv.rows(), xv.cols());
                self.acc(grads, *x, |gx| {
                    for r in 0..n {
                        for j in 0..d {
                            gx[r * d + j] += gd[j] / n as f64;
                        }
                    }
                });
            }
            Op::Pick { x, idx } => {
                self.acc(grads, *x, |gx| {
                    for (k, &i) in idx.iter().enumerate() {
                        gx[i] += gd[k];
                    }
                });
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let n = av.len().max(1) as f64;
                let c = 2.0 * gd[0] / n;
                self.acc(grads, *a, |ga| {
                    for i in 0..ga.len() {
                        ga[i] += c * (av[i] - bv[i]);
                    }
                });
                self.acc(grads, *b, |gb| {
                    for i in 0..gb.len() {
                        gb[i] -= c * (av[i] - bv[i]);
                    }
                });
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = out.data();
                let c = out.cols();
                self.acc(grads, *x, |gx| {
                    for (r, &n) in norms.iter().enumerate() {
                        if n == 0.0 {
                            continue;
                        }
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &gd[r * c..(r + 1) * c];
                        let dot = kernels::dot(yr, gr);
                        for j in 0..c {
                            gx[r * c + j] += (gr[j] - yr[j] * dot) / n;
                        }
                    }
                });
            }
            Op::AttnScores {
                q,
                k,
                heads,
                scale,
                mask,
            } => {
                let (qv, kv) = (self.value(*q), self.value(*k));
                let (t, s, d) = (qv.rows(), kv.rows(), qv.cols());
                let dh = d / heads;
                self.acc(grads, *q, |gq| {
                    for h in 0..*heads {
                        for i in 0..t {
                            for j in 0..s {
                                if !mask[i * s + j] {
                                    continue;
                                }
                                let gij = gd[(h * t + i) * s + j] * scale;
                                if gij == 0.0 {
                                    continue;
                                }
                                let kj = &kv.row(j)[h * dh..(h + 1) * dh];
                                let gqi = &mut gq[i * d + h * dh..i * d + (h + 1) * dh];
                                gqi.iter_mut().zip(kj).for_each(|(a, b)| *a += gij * b);
                            }
                        }
                    }
                });
                self.acc(grads, *k, |gk| {
                    for h in 0..*heads {
                        for i in 0..t {
                            let qi = &qv.row(i)[h * dh..(h + 1) * dh];
                            for j in 0..s {
                                if !mask[i * s + j] {
                                    continue;
                                }
                                let gij = gd[(h * t + i) * s + j] * scale;
                                if gij == 0.0 {
                                    continue;
                                }
                                let gkj = &mut gk[j * d + h * dh..j * d + (h + 1) * dh];
                                gkj.iter_mut().zip(qi).for_each(|(a, b)| *a += gij * b);
                            }
                        }
                    }
                });
            }
            Op::AttnContext { p, v, heads } => {
                let (pv, vv) = (self.value(*p), self.value(*v));
                let (t, s, d) = (pv.shape()[1], pv.shape()[2], vv.cols());
                let dh = d / heads;
                self.acc(grads, *p, |gp| {
                    for h in 0..*heads {
                        for i in 0..t {
                            let gi = &gd[i * d + h * dh..i * d + (h + 1) * dh];
                            for j in 0..s {
                                let vj = &vv.row(j)[h * dh..(h + 1) * dh];
                                gp[(h * t + i) * s + j] += kernels::dot(gi, vj);
                            }
                        }
                    }
                });
                self.acc(grads, *v, |gv| {
                    for h in 0..*heads {
                        for i in 0..t {
                            let gi = &gd[i * d + h * dh..i * d + (h + 1) * dh];
                            for j in 0..s {
                                let pij = pv.data()[(h * t + i) * s + j];
                                if pij == 0.0 {
                                    continue;
                                }
                                let gvj = &mut gv[j * d + h * dh..j * d + (h + 1) * dh];
                                gvj.iter_mut().zip(gi).for_each(|(a, b)| *a += pij * b);
                            }
                        }
                    }
                });
            }
        }
    }

    /// Accumulates into the gradient buffer of `v` if it needs one.
    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = &mut grads[v.0];
        let buf = slot.get_or_insert_with(|| Tensor::zeros(self.nodes[v.0].value.shape().to_vec()));
        f(buf.data_mut());
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
}
