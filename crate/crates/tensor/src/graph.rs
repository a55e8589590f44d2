//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every op whose inputs require gradients, in execution
//! order, which is already a topological order. [`Graph::backward`] walks the
//! tape once in reverse. Intermediate gradients are dropped as soon as they
//! have been propagated; only leaf gradients are returned.

use crate::error::{Result, TensorError};
use crate::kernels::{self, Operand};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum UnaryKind {
    Relu,
    Tanh,
    Sigmoid,
    Exp,
    Log,
    Softplus,
    Sqrt,
    Square,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    BatchMatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Binary { kind: BinaryKind, a: Var, b: Var },
    Affine { x: Var, scale: f32 },
    Unary { kind: UnaryKind, x: Var },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f32>, rstd: Vec<f32> },
    Dropout { x: Var, mask: Vec<f32> },
    Sum { x: Var },
    SumAxis { x: Var, outer: usize, len: usize, inner: usize },
    Concat { inputs: Vec<(Var, usize)>, outer: usize, inner: usize },
    Slice { x: Var, outer: usize, len: usize, start: usize, take: usize, inner: usize },
    Reshape { x: Var },
    Permute { x: Var, src: Vec<usize> },
    IndexRows { x: Var, ids: Vec<usize>, inner: usize },
    PickLast { x: Var, idx: Vec<usize> },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Leaf gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f32>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Index mapping from a broadcast output position to an input position.
enum Bcast {
    Same,
    /// Input equals the trailing dims of the output.
    Suffix(usize),
    /// Input equals the leading dims of the output; value is the inner size.
    Prefix(usize),
    General(Vec<usize>),
}

impl Bcast {
    fn new(out: &[usize], inp: &[usize]) -> Self {
        if out == inp {
            return Bcast::Same;
        }
        let r = out.len();
        let mut padded = vec![1usize; r - inp.len()];
        padded.extend_from_slice(inp);
        let first = padded.iter().position(|&d| d != 1).unwrap_or(r);
        if padded[first..] == out[first..] {
            return Bcast::Suffix(padded[first..].iter().product());
        }
        let last = padded.iter().rposition(|&d| d != 1).map_or(0, |l| l + 1);
        if padded[..last] == out[..last] {
            return Bcast::Prefix(out[last..].iter().product());
        }
        // general strided mapping
        let mut strides = vec![0usize; r];
        let mut acc = 1;
        for d in (0..r).rev() {
            strides[d] = if padded[d] == 1 { 0 } else { acc };
            acc *= padded[d];
        }
        let n: usize = out.iter().product();
        let mut map = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            map.push(off);
            for d in (0..r).rev() {
                counter[d] += 1;
                off += strides[d];
                if counter[d] < out[d] {
                    break;
                }
                off -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        Bcast::General(map)
    }

    #[inline(always)]
    fn get(&self, i: usize) -> usize {
        match self {
            Bcast::Same => i,
            Bcast::Suffix(n) => i % n,
            Bcast::Prefix(inner) => i / inner,
            Bcast::General(m) => m[i],
        }
    }
}

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let r = a.len().max(b.len());
    let mut out = vec![0; r];
    for i in 0..r {
        let da = if i + a.len() >= r { a[i + a.len() - r] } else { 1 };
        let db = if i + b.len() >= r { b[i + b.len() - r] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(TensorError::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        };
    }
    Ok(out)
}

fn reduce_to(map: &Bcast, n_in: usize, g: impl Iterator<Item = f32>) -> Vec<f32> {
    if let Bcast::Same = map {
        return g.collect();
    }
    let mut acc = vec![0f64; n_in];
    for (i, v) in g.enumerate() {
        acc[map.get(i)] += v as f64;
    }
    acc.into_iter().map(|v| v as f32).collect()
}

fn softplus(x: f32) -> f32 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into(slot: &mut Option<Vec<f32>>, g: Vec<f32>) {
    match slot {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        None => *slot = Some(g),
    }
}

/// Computation tape. Not thread-safe; one graph per forward/backward pass.
pub struct Graph {
    nodes: Vec<Node>,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::with_capacity(256),
        }
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
        self.nodes[v.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `x`; gradients do not flow through it.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|&v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn data(&self, v: Var) -> &[f32] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra ----

    /// `a[..., k] x b[k, n] -> [..., n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sb.len() != 2 || *sa.last().unwrap() != sb[0] {
            return Err(TensorError::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let (k, n) = (sb[0], sb[1]);
        let m = self.value(a).numel() / k;
        let mut out = vec![0f32; m * n];
        kernels::gemm(
            m,
            k,
            n,
            Operand::plain(self.data(a)),
            Operand::plain(self.data(b)),
            &mut out,
            false,
        );
        let mut shape = sa;
        *shape.last_mut().unwrap() = n;
        let t = Tensor::new(shape, out)?;
        self.push("matmul", t, Op::MatMul { a, b, m, k, n }, &[a, b])
    }

    /// Batched product of rank-3 tensors: `[B,m,k] x [B,k,n]`, or
    /// `[B,m,k] x [B,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let bad = || TensorError::Shape {
            op: "bmm",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(bad());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let kb = if trans_b { sb[2] } else { sb[1] };
        if kb != k {
            return Err(bad());
        }
        let mut out = vec![0f32; batch * m * n];
        kernels::batched_gemm(
            batch,
            m,
            k,
            n,
            self.data(a),
            false,
            self.data(b),
            trans_b,
            &mut out,
            false,
        );
        let t = Tensor::new(vec![batch, m, n], out)?;
        self.push(
            "bmm",
            t,
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            },
            &[a, b],
        )
    }

    // ---- elementwise ----

    fn binary(&mut self, kind: BinaryKind, name: &'static str, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape(name, self.shape(a), self.shape(b))?;
        let ma = Bcast::new(&out_shape, self.shape(a));
        let mb = Bcast::new(&out_shape, self.shape(b));
        let (ad, bd) = (self.data(a), self.data(b));
        let n: usize = out_shape.iter().product();
        let f = |x: f32, y: f32| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let out: Vec<f32> = match (&ma, &mb) {
            (Bcast::Same, Bcast::Same) => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            _ => (0..n).map(|i| f(ad[ma.get(i)], bd[mb.get(i)])).collect(),
        };
        if kind == BinaryKind::Div && bd.contains(&0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(name, t, Op::Binary { kind, a, b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, "add", a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, "sub", a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, "mul", a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, "div", a, b)
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f32, shift: f32) -> Result<Var> {
        let out: Vec<f32> = self.data(x).iter().map(|&v| scale * v + shift).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("affine", t, Op::Affine { x, scale }, &[x])
    }

    pub fn scale(&mut self, x: Var, s: f32) -> Result<Var> {
        self.affine(x, s, 0.0)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.affine(x, -1.0, 0.0)
    }

    fn unary(&mut self, kind: UnaryKind, name: &'static str, x: Var) -> Result<Var> {
        let xd = self.data(x);
        match kind {
            UnaryKind::Log if xd.iter().any(|&v| v <= 0.0 || v.is_nan()) => {
                return Err(TensorError::Domain {
                    op: "log",
                    detail: "argument must be strictly positive".into(),
                })
            }
            UnaryKind::Sqrt if xd.iter().any(|&v| v < 0.0 || v.is_nan()) => {
                return Err(TensorError::Domain {
                    op: "sqrt",
                    detail: "argument must be non-negative".into(),
                })
            }
            UnaryKind::Softplus if xd.iter().any(|v| !v.is_finite()) => {
                return Err(TensorError::Domain {
                    op: "softplus",
                    detail: "argument must be finite".into(),
                })
            }
            _ => {}
        }
        let out: Vec<f32> = xd
            .iter()
            .map(|&v| match kind {
                UnaryKind::Relu => v.max(0.0),
                UnaryKind::Tanh => v.tanh(),
                UnaryKind::Sigmoid => sigmoid(v),
                UnaryKind::Exp => v.exp(),
                UnaryKind::Log => v.ln(),
                UnaryKind::Softplus => softplus(v),
                UnaryKind::Sqrt => v.sqrt(),
                UnaryKind::Square => v * v,
            })
            .collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(name, t, Op::Unary { kind, x }, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, "relu", x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, "tanh", x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, "sigmoid", x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, "exp", x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, "log", x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, "softplus", x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, "sqrt", x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, "square", x)
    }

    // ---- normalisation ----

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let mut s = 0f64;
            for v in row.iter_mut() {
                *v = (*v - mx).exp();
                s += *v as f64;
            }
            let inv = (1.0 / s) as f32;
            row.iter_mut().for_each(|v| *v *= inv);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("softmax", t, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x).cols();
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(c) {
            let mx = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
            let s: f64 = row.iter().map(|&v| ((v - mx) as f64).exp()).sum();
            let lse = mx + s.ln() as f32;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("log_softmax", t, Op::LogSoftmax { x }, &[x])
    }

    /// Layer normalisation over the last axis followed by `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        let d = self.value(x).cols();
        if self.value(gamma).numel() != d || self.value(beta).numel() != d {
            return Err(TensorError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xd = self.data(x);
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let rows = xd.len() / d;
        let mut xhat = vec![0f32; xd.len()];
        let mut rstd = vec![0f32; rows];
        let mut out = vec![0f32; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().map(|&v| v as f64).sum::<f64>() / d as f64;
            let var = row
                .iter()
                .map(|&v| (v as f64 - mean).powi(2))
                .sum::<f64>()
                / d as f64;
            let rs = 1.0 / (var + eps as f64).sqrt();
            rstd[r] = rs as f32;
            for j in 0..d {
                let h = ((row[j] as f64 - mean) * rs) as f32;
                xhat[r * d + j] = h;
                out[r * d + j] = gd[j] * h + bd[j];
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push(
            "layer_norm",
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    /// Inverted dropout: kept units are scaled by `1 / (1 - rate)`.
    /// `rate == 0` returns `x` unchanged.
    pub fn dropout(&mut self, x: Var, rate: f32, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TensorError::Domain {
                op: "dropout",
                detail: format!("rate {rate} outside [0, 1)"),
            });
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let scale = 1.0 / keep;
        let mask: Vec<f32> = (0..self.value(x).numel())
            .map(|_| if rng.uniform_f32() < keep { scale } else { 0.0 })
            .collect();
        let out: Vec<f32> = self.data(x).iter().zip(&mask).map(|(a, m)| a * m).collect();
        let t = Tensor::new(self.shape(x).to_vec(), out)?;
        self.push("dropout", t, Op::Dropout { x, mask }, &[x])
    }

    // ---- reductions ----

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s: f64 = self.data(x).iter().map(|&v| v as f64).sum();
        self.push("sum", Tensor::scalar(s as f32), Op::Sum { x }, &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.value(x).numel() as f32;
        let s = self.sum(x)?;
        self.scale(s, 1.0 / n)
    }

    /// Sum over `axis`, removing it. Reducing a rank-1 tensor yields shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(TensorError::Contract(format!(
                "sum_axis: axis {axis} out of range for {shape:?}"
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut acc = vec![0f64; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                let base = (o * len + l) * inner;
                for i in 0..inner {
                    acc[o * inner + i] += xd[base + i] as f64;
                }
            }
        }
        let mut out_shape: Vec<usize> = shape
            .iter()
            .enumerate()
            .filter(|&(d, _)| d != axis)
            .map(|(_, &s)| s)
            .collect();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, acc.into_iter().map(|v| v as f32).collect())?;
        self.push(
            "sum_axis",
            t,
            Op::SumAxis {
                x,
                outer,
                len,
                inner,
            },
            &[x],
        )
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = self.shape(x).get(axis).copied().unwrap_or(1) as f32;
        let s = self.sum_axis(x, axis)?;
        self.scale(s, 1.0 / n)
    }

    // ---- shape ----

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(inputs[0]).to_vec();
        if axis >= first.len() {
            return Err(TensorError::Contract(format!(
                "concat: axis {axis} out of range for {first:?}"
            )));
        }
        let mut total = 0;
        let mut parts = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            parts.push((v, s[axis]));
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &(v, len) in &parts {
                let d = self.data(v);
                out.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let t = Tensor::new(shape, out)?;
        self.push(
            "concat",
            t,
            Op::Concat {
                inputs: parts,
                outer,
                inner,
            },
            inputs,
        )
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, take: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || take == 0 || start + take > shape[axis] {
            return Err(TensorError::Contract(format!(
                "slice: [{start}, {}) on axis {axis} of {shape:?}",
                start + take
            )));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * take * inner);
        for o in 0..outer {
            let base = (o * len + start) * inner;
            out.extend_from_slice(&xd[base..base + take * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = take;
        let t = Tensor::new(new_shape, out)?;
        self.push(
            "slice",
            t,
            Op::Slice {
                x,
                outer,
                len,
                start,
                take,
                inner,
            },
            &[x],
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", t, Op::Reshape { x }, &[x])
    }

    /// General axis permutation: output axis `d` is input axis `perm[d]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let r = shape.len();
        let mut seen = vec![false; r];
        if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true))
        {
            return Err(TensorError::Contract(format!(
                "permute: invalid permutation {perm:?} for rank {r}"
            )));
        }
        let mut in_strides = vec![1usize; r];
        for d in (0..r.saturating_sub(1)).rev() {
            in_strides[d] = in_strides[d + 1] * shape[d + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let n = self.value(x).numel();
        let mut src = Vec::with_capacity(n);
        let mut counter = vec![0usize; r];
        let mut off = 0usize;
        for _ in 0..n {
            src.push(off);
            for d in (0..r).rev() {
                counter[d] += 1;
                off += strides[d];
                if counter[d] < out_shape[d] {
                    break;
                }
                off -= strides[d] * counter[d];
                counter[d] = 0;
            }
        }
        let xd = self.data(x);
        let out: Vec<f32> = src.iter().map(|&i| xd[i]).collect();
        let t = Tensor::new(out_shape, out)?;
        self.push("permute", t, Op::Permute { x, src }, &[x])
    }

    /// Select rows of the leading axis (embedding lookup when `x` is a table).
    pub fn index_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ids.is_empty() {
            return Err(TensorError::Contract("index_rows: no ids".into()));
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= shape[0]) {
            return Err(TensorError::Contract(format!(
                "index_rows: id {bad} out of range for {} rows",
                shape[0]
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(ids.len() * inner);
        for &i in ids {
            out.extend_from_slice(&xd[i * inner..(i + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape[0] = ids.len();
        let t = Tensor::new(new_shape, out)?;
        self.push(
            "index_rows",
            t,
            Op::IndexRows {
                x,
                ids: ids.to_vec(),
                inner,
            },
            &[x],
        )
    }

    /// For each row along the last axis, the element at `idx[row]`.
    pub fn pick_last(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let c = self.value(x).cols();
        let rows = self.value(x).rows();
        if idx.len() != rows || idx.iter().any(|&i| i >= c) {
            return Err(TensorError::Contract(format!(
                "pick_last: {} indices for {rows} rows of width {c}",
                idx.len()
            )));
        }
        let xd = self.data(x);
        let out: Vec<f32> = idx.iter().enumerate().map(|(r, &i)| xd[r * c + i]).collect();
        let shape = self.shape(x);
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let t = Tensor::new(out_shape, out)?;
        self.push(
            "pick_last",
            t,
            Op::PickLast {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    // ---- backward ----

    /// Reverse sweep from a scalar `loss`. Returns gradients for every leaf
    /// that requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(TensorError::Contract("backward on empty graph".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(TensorError::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut leaves: Vec<Option<Vec<f32>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads: leaves });
        }
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaves[i] = Some(g);
                }
                continue;
            }
            self.propagate(node, g, &mut grads);
        }
        Ok(Gradients { grads: leaves })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: Vec<f32>, grads: &mut [Option<Vec<f32>>]) {
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                if self.wants(a) {
                    let mut ga = vec![0f32; m * k];
                    kernels::gemm(
                        m,
                        n,
                        k,
                        Operand::plain(&g),
                        Operand::t(self.data(b)),
                        &mut ga,
                        false,
                    );
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0f32; k * n];
                    kernels::gemm(
                        k,
                        m,
                        n,
                        Operand::t(self.data(a)),
                        Operand::plain(&g),
                        &mut gb,
                        false,
                    );
                    add_into(&mut grads[b.0], gb);
                }
            }
            &Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                n,
                trans_b,
            } => {
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    // dA = dC * op(B)^T
                    let mut ga = vec![0f32; batch * m * k];
                    kernels::batched_gemm(batch, m, n, k, &g, false, bd, !trans_b, &mut ga, false);
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let mut gb = vec![0f32; batch * k * n];
                    if trans_b {
                        // B is [n,k]: dB = dC^T * A
                        kernels::batched_gemm(batch, n, m, k, &g, true, ad, false, &mut gb, false);
                    } else {
                        kernels::batched_gemm(batch, k, m, n, ad, true, &g, false, &mut gb, false);
                    }
                    add_into(&mut grads[b.0], gb);
                }
            }
            &Op::Binary { kind, a, b } => {
                let out_shape = node.value.shape();
                let (ad, bd) = (self.data(a), self.data(b));
                let ma = Bcast::new(out_shape, self.shape(a));
                let mb = Bcast::new(out_shape, self.shape(b));
                if self.wants(a) {
                    let ga = match kind {
                        BinaryKind::Add | BinaryKind::Sub => reduce_to(&ma, ad.len(), g.iter().copied()),
                        BinaryKind::Mul => reduce_to(
                            &ma,
                            ad.len(),
                            g.iter().enumerate().map(|(i, &gi)| gi * bd[mb.get(i)]),
                        ),
                        BinaryKind::Div => reduce_to(
                            &ma,
                            ad.len(),
                            g.iter().enumerate().map(|(i, &gi)| gi / bd[mb.get(i)]),
                        ),
                    };
                    add_into(&mut grads[a.0], ga);
                }
                if self.wants(b) {
                    let gb = match kind {
                        BinaryKind::Add => reduce_to(&mb, bd.len(), g.iter().copied()),
                        BinaryKind::Sub => reduce_to(&mb, bd.len(), g.iter().map(|&v| -v)),
                        BinaryKind::Mul => reduce_to(
                            &mb,
                            bd.len(),
                            g.iter().enumerate().map(|(i, &gi)| gi * ad[ma.get(i)]),
                        ),
                        BinaryKind::Div => reduce_to(
                            &mb,
                            bd.len(),
                            g.iter().enumerate().map(|(i, &gi)| {
                                let bv = bd[mb.get(i)];
                                -gi * ad[ma.get(i)] / (bv * bv)
                            }),
                        ),
                    };
                    add_into(&mut grads[b.0], gb);
                }
            }
            &Op::Affine { x, scale } => {
                add_into(&mut grads[x.0], g.iter().map(|v| v * scale).collect());
            }
            &Op::Unary { kind, x } => {
                let xd = self.data(x);
                let gx: Vec<f32> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let (xv, yv) = (xd[i], y[i]);
                        gi * match kind {
                            UnaryKind::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            UnaryKind::Tanh => 1.0 - yv * yv,
                            UnaryKind::Sigmoid => yv * (1.0 - yv),
                            UnaryKind::Exp => yv,
                            UnaryKind::Log => 1.0 / xv,
                            UnaryKind::Softplus => sigmoid(xv),
                            UnaryKind::Sqrt => 0.5 / yv,
                            UnaryKind::Square => 2.0 * xv,
                        }
                    })
                    .collect();
                add_into(&mut grads[x.0], gx);
            }
            &Op::Softmax { x } => {
                let c = node.value.cols();
                let mut gx = vec![0f32; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| (*a as f64) * (*b as f64)).sum();
                    let dot = dot as f32;
                    for j in 0..c {
                        out[j] = yr[j] * (gr[j] - dot);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            &Op::LogSoftmax { x } => {
                let c = node.value.cols();
                let mut gx = vec![0f32; g.len()];
                for ((gr, yr), out) in g.chunks(c).zip(y.chunks(c)).zip(gx.chunks_mut(c)) {
                    let s: f64 = gr.iter().map(|&v| v as f64).sum();
                    let s = s as f32;
                    for j in 0..c {
                        out[j] = gr[j] - yr[j].exp() * s;
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = node.value.cols();
                let gd = self.data(*gamma);
                if self.wants(*gamma) || self.wants(*beta) {
                    let mut gg = vec![0f64; d];
                    let mut gb = vec![0f64; d];
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] += (gr[j] * hr[j]) as f64;
                            gb[j] += gr[j] as f64;
                        }
                    }
                    if self.wants(*gamma) {
                        add_into(&mut grads[gamma.0], gg.iter().map(|&v| v as f32).collect());
                    }
                    if self.wants(*beta) {
                        add_into(&mut grads[beta.0], gb.iter().map(|&v| v as f32).collect());
                    }
                }
                if self.wants(*x) {
                    let mut gx = vec![0f32; g.len()];
                    for (r, ((gr, hr), out)) in g
                        .chunks(d)
                        .zip(xhat.chunks(d))
                        .zip(gx.chunks_mut(d))
                        .enumerate()
                    {
                        let mut m1 = 0f64;
                        let mut m2 = 0f64;
                        for j in 0..d {
                            let dh = (gr[j] * gd[j]) as f64;
                            m1 += dh;
                            m2 += dh * hr[j] as f64;
                        }
                        let (m1, m2) = ((m1 / d as f64) as f32, (m2 / d as f64) as f32);
                        for j in 0..d {
                            out[j] = rstd[r] * (gr[j] * gd[j] - m1 - hr[j] * m2);
                        }
                    }
                    add_into(&mut grads[x.0], gx);
                }
            }
            Op::Dropout { x, mask } => {
                add_into(&mut grads[x.0], g.iter().zip(mask).map(|(a, m)| a * m).collect());
            }
            &Op::Sum { x } => {
                let n = self.value(x).numel();
                add_into(&mut grads[x.0], vec![g[0]; n]);
            }
            &Op::SumAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let mut gx = vec![0f32; outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        let base = (o * len + l) * inner;
                        gx[base..base + inner].copy_from_slice(&g[o * inner..(o + 1) * inner]);
                    }
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::Concat {
                inputs,
                outer,
                inner,
            } => {
                let total: usize = inputs.iter().map(|p| p.1).sum();
                let mut offset = 0;
                for &(v, len) in inputs {
                    if self.wants(v) {
                        let mut gv = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let base = (o * total + offset) * inner;
                            gv.extend_from_slice(&g[base..base + len * inner]);
                        }
                        add_into(&mut grads[v.0], gv);
                    }
                    offset += len;
                }
            }
            &Op::Slice {
                x,
                outer,
                len,
                start,
                take,
                inner,
            } => {
                let mut gx = vec![0f32; outer * len * inner];
                for o in 0..outer {
                    let base = (o * len + start) * inner;
                    gx[base..base + take * inner]
                        .copy_from_slice(&g[o * take * inner..(o + 1) * take * inner]);
                }
                add_into(&mut grads[x.0], gx);
            }
            &Op::Reshape { x } => add_into(&mut grads[x.0], g),
            Op::Permute { x, src } => {
                let mut gx = vec![0f32; g.len()];
                for (j, &s) in src.iter().enumerate() {
                    gx[s] = g[j];
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::IndexRows { x, ids, inner } => {
                let mut gx = vec![0f32; self.value(*x).numel()];
                for (r, &i) in ids.iter().enumerate() {
                    let dst = &mut gx[i * inner..(i + 1) * inner];
                    dst.iter_mut()
                        .zip(&g[r * inner..(r + 1) * inner])
                        .for_each(|(a, b)| *a += b);
                }
                add_into(&mut grads[x.0], gx);
            }
            Op::PickLast { x, idx } => {
                let c = self.value(*x).cols();
                let mut gx = vec![0f32; self.value(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[r * c + i] = g[r];
                }
                add_into(&mut grads[x.0], gx);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_returns_input() {
        let mut g = Graph::new();
        let eye = g.constant(t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]));
        let a_data = [0.5, -1.0, 2.0, 3.0, 0.25, -4.0, 1.5, 7.0, -2.5];
        let a = g.constant(t(&[3, 3], &a_data));
        let c = g.matmul(eye, a).unwrap();
        assert_eq!(g.value(c).data(), &a_data);
    }

    #[test]
    fn relu_definition() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![-1.0, 0.0, 2.0]));
        let y = g.relu(x).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 4], &[1.0, 2.0, 3.0, 4.0, -50.0, 0.0, 50.0, 3.0]));
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(4) {
            let s: f32 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn sum_gives_ones_gradient() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, -2.0, 3.5]), true);
        let s = g.sum(x).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn half_square_gradient_is_identity() {
        let mut g = Graph::new();
        let xs = [0.3, -1.2, 4.0, 0.0];
        let x = g.leaf(Tensor::from_vec(xs.to_vec()), true);
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        let l = g.scale(s, 0.5).unwrap();
        let grads = g.backward(l).unwrap();
        for (a, b) in grads.get(x).unwrap().iter().zip(xs) {
            assert!((a - b).abs() < 1e-6);
        }
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::from_vec(vec![1.0, 2.0]), true);
        assert!(matches!(g.backward(x), Err(TensorError::Contract(_))));
    }

    #[test]
    fn shape_mismatch_reports_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(vec![2, 3]));
        let b = g.constant(Tensor::zeros(vec![4, 5]));
        match g.matmul(a, b) {
            Err(TensorError::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![4, 5]);
            }
            other => panic!("unexpected {other:?}"),
        }
        assert!(g.add(a, b).is_err());
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::from_vec(vec![1.0, 0.0]));
        assert!(matches!(g.log(x), Err(TensorError::Domain { .. })));
        let y = g.constant(Tensor::from_vec(vec![f32::NAN]));
        assert!(matches!(g.softplus(y), Err(TensorError::Domain { .. })));
    }

    #[test]
    fn broadcasting_variants() {
        let mut g = Graph::new();
        let a = g.constant(t(&[2, 3], &[1., 2., 3., 4., 5., 6.]));
        let row = g.constant(t(&[3], &[10., 20., 30.]));
        let col = g.constant(t(&[2, 1], &[100., 200.]));
        let mid = g.constant(t(&[2, 1, 3], &[1., 1., 1., 2., 2., 2.]));
        let s = g.add(a, row).unwrap();
        assert_eq!(g.value(s).data(), &[11., 22., 33., 14., 25., 36.]);
        let s = g.add(a, col).unwrap();
        assert_eq!(g.value(s).data(), &[101., 102., 103., 204., 205., 206.]);
        let big = g.constant(Tensor::ones(vec![2, 2, 3]));
        let s = g.mul(big, mid).unwrap();
        assert_eq!(g.value(s).data(), &[1., 1., 1., 1., 1., 1., 2., 2., 2., 2., 2., 2.]);
        // [2,1,3] x [1,2,1] -> general mapping
        let other = g.constant(t(&[1, 2, 1], &[0., 10.]));
        let s = g.add(mid, other).unwrap();
        assert_eq!(g.shape(s), &[2, 2, 3]);
        assert_eq!(g.value(s).data(), &[1., 1., 1., 11., 11., 11., 2., 2., 2., 12., 12., 12.]);
    }

    #[test]
    fn permute_round_trip() {
        let mut g = Graph::new();
        let data: Vec<f32> = (0..24).map(|v| v as f32).collect();
        let x = g.constant(t(&[2, 3, 4], &data));
        let p = g.permute(x, &[2, 0, 1]).unwrap();
        assert_eq!(g.shape(p), &[4, 2, 3]);
        // p[k, i, j] = x[i, j, k]
        assert_eq!(g.value(p).data()[1 * 6 + 1 * 3 + 2], data[1 * 12 + 2 * 4 + 1]);
        let back = g.permute(p, &[1, 2, 0]).unwrap();
        assert_eq!(g.value(back).data(), &data[..]);
    }

    #[test]
    fn dropout_rate_zero_is_identity() {
        let mut g = Graph::new();
        let mut rng = Rng::seed(1);
        let x = g.constant(Tensor::from_vec(vec![1.0, 2.0, 3.0]));
        let y = g.dropout(x, 0.0, &mut rng).unwrap();
        assert_eq!(x, y);
        assert!(g.dropout(x, 1.0, &mut rng).is_err());
    }

    #[test]
    fn layer_norm_statistics() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 5], &[1., 2., 3., 4., 50., -3., 0.1, 0.2, 9., 1.]));
        let gamma = g.constant(Tensor::ones(vec![5]));
        let beta = g.constant(Tensor::zeros(vec![5]));
        let y = g.layer_norm(x, gamma, beta, 1e-5).unwrap();
        for row in g.value(y).data().chunks(5) {
            let m: f64 = row.iter().map(|&v| v as f64).sum::<f64>() / 5.0;
            let v: f64 = row.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / 5.0;
            assert!(m.abs() < 1e-5);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }
}
