//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Tape`] is built fresh for every forward pass. Each op appends a node
//! holding its output value plus whatever it needs for the backward rule;
//! [`Tape::backward`] then walks the nodes once in reverse. Parameter values
//! are borrowed from the [`ParamStore`] rather than copied, so a tape lives
//! no longer than the store it reads from.

use std::borrow::Cow;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::tensor::{gemm, sigmoid, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Softmax(Var),
    Sigmoid(Var),
    Swish(Var),
    Glu(Var),
    DepthwiseConv1d {
        x: Var,
        kernel: Var,
    },
    Transpose(Var),
    Reshape(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    MaskMul {
        x: Var,
        mask: Vec<f64>,
    },
    StraightThrough(Var),
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    SumSquares(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax(_) => "softmax",
            Op::Sigmoid(_) => "sigmoid",
            Op::Swish(_) => "swish",
            Op::Glu(_) => "glu",
            Op::DepthwiseConv1d { .. } => "depthwise_conv1d",
            Op::Transpose(_) => "transpose",
            Op::Reshape(_) => "reshape",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::MaskMul { .. } => "mask_mul",
            Op::StraightThrough(_) => "straight_through",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(_) => "sum",
            Op::SumSquares(_) => "sum_squares",
        }
    }
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

/// Result of [`Tape::backward`]: per-node gradients plus the per-parameter sums.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: ParamGrads,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` lies on a
    /// differentiable path to the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn params(&self) -> &ParamGrads {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads {
        self.params
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// First recorded node holding a NaN or infinity, with the name of the
    /// operation that produced it.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .position(|n| !n.value.is_finite())
            .map(|i| (Var(i), self.nodes[i].op.name()))
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Cow::Owned(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Constant, false)
    }

    /// Leaf that receives a gradient but is not a registered parameter.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, true)
    }

    pub fn param(&mut self, store: &'a ParamStore, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(store.value(id)),
            op: Op::Param(id),
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `x` cut off from the graph (stop-gradient).
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| f(*x, *y)).collect();
        let out = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let ng = self.ng(&[a, b]);
        self.push(out, op, ng)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|v| f(*v)).collect())
            .expect("same shape");
        let ng = self.ng(&[x]);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.map(x, Op::Scale(x, c), |v| c * v)
    }

    /// `x + b` with `b` broadcast over every row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tx.last_dim();
        if tb.len() != n {
            return Err(Error::dim(format!(
                "bias of length {} for last dim {n}",
                tb.len()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            row.iter_mut().zip(tb.data()).for_each(|(v, b)| *v += b);
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x, b]);
        Ok(self.push(out, Op::AddBias(x, b), ng))
    }

    /// Normalizes each row over the last axis, then applies `gamma * xhat + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(Error::dim(format!("layer_norm affine params must have length {d}")));
        }
        if eps <= 0.0 {
            return Err(Error::config("layer_norm eps must be positive"));
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for (r, row) in tx.data().chunks(d).enumerate() {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + b[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let ng = self.ng(&[x, gamma, beta]);
        Ok(self.push(out, Op::LayerNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Softmax over the last axis, stabilized by subtracting the row max.
    pub fn softmax(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let d = tx.last_dim();
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
        }
        let out = Tensor::new(tx.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(out, Op::Softmax(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), sigmoid)
    }

    /// `x * sigmoid(x)`.
    pub fn swish(&mut self, x: Var) -> Var {
        self.map(x, Op::Swish(x), |v| v * sigmoid(v))
    }

    /// Gated linear unit over the last axis: first half times sigmoid of the second.
    pub fn glu(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.last_dim();
        if d % 2 != 0 {
            return Err(Error::dim(format!("glu needs an even last dim, got {d}")));
        }
        let c = d / 2;
        let mut out = Vec::with_capacity(tx.len() / 2);
        for row in tx.data().chunks(d) {
            out.extend((0..c).map(|j| row[j] * sigmoid(row[c + j])));
        }
        let mut shape = tx.shape().to_vec();
        *shape.last_mut().unwrap() = c;
        let out = Tensor::new(shape, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Glu(x), ng))
    }

    /// Per-channel 1D convolution of `x: [c, t]` with `kernel: [c, k]`,
    /// zero-padded so the output keeps length `t`. `k` must be odd.
    pub fn depthwise_conv1d(&mut self, x: Var, kernel: Var) -> Result<Var> {
        let (c, t) = self.value(x).dims2()?;
        let (kc, k) = self.value(kernel).dims2()?;
        if kc != c {
            return Err(Error::dim(format!("kernel has {kc} channels, input has {c}")));
        }
        if k % 2 == 0 {
            return Err(Error::config(format!("depthwise kernel size must be odd, got {k}")));
        }
        let (xd, kd) = (self.value(x).data(), self.value(kernel).data());
        let pad = k / 2;
        let mut out = vec![0.0; c * t];
        for ch in 0..c {
            let xr = &xd[ch * t..(ch + 1) * t];
            let kr = &kd[ch * k..(ch + 1) * k];
            for (i, o) in out[ch * t..(ch + 1) * t].iter_mut().enumerate() {
                let mut acc = 0.0;
                for (j, w) in kr.iter().enumerate() {
                    let src = i as isize + j as isize - pad as isize;
                    if src >= 0 && (src as usize) < t {
                        acc += w * xr[src as usize];
                    }
                }
                *o = acc;
            }
        }
        let out = Tensor::matrix(c, t, out)?;
        let ng = self.ng(&[x, kernel]);
        Ok(self.push(out, Op::DepthwiseConv1d { x, kernel }, ng))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose2()?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Transpose(x), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::Reshape(x), ng))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.value(x).dims2()?;
        if len == 0 || start + len > c {
            return Err(Error::dim(format!("column slice {start}..{} of {c}", start + len)));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for row in xd.chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::matrix(r, len, out)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, ng))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let (r, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let (pr, pc) = self.value(*p).dims2()?;
            if pr != r {
                return Err(Error::dim(format!("concat row mismatch {pr} vs {r}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (p, w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(*p).data()[i * w..(i + 1) * w]);
            }
        }
        let out = Tensor::matrix(r, total, out)?;
        let ng = self.ng(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Element-wise product with a constant mask.
    pub fn mask_mul(&mut self, x: Var, mask: Vec<f64>) -> Result<Var> {
        let tx = self.value(x);
        if mask.len() != tx.len() {
            return Err(Error::dim("mask length differs from input"));
        }
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let ng = self.ng(&[x]);
        Ok(self.push(out, Op::MaskMul { x, mask }, ng))
    }

    /// Inverted dropout: zero each entry with probability `rate`, scale
    /// survivors by `1 / (1 - rate)`. Identity when `rng` is `None`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: Option<&mut ChaCha8Rng>) -> Var {
        match rng {
            Some(rng) if rate > 0.0 => {
                let keep = 1.0 - rate;
                let mask = (0..self.value(x).len())
                    .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
                    .collect();
                self.mask_mul(x, mask).expect("mask sized from input")
            }
            _ => x,
        }
    }

    /// Forward value of `target`, gradient routed to `source` unchanged.
    pub fn straight_through(&mut self, source: Var, target: Var) -> Result<Var> {
        self.same_shape(source, target, "straight_through")?;
        let out = self.value(target).clone();
        let ng = self.ng(&[source]);
        Ok(self.push(out, Op::StraightThrough(source), ng))
    }

    /// Rows of `table: [k, d]` selected by `indices`, giving `[indices.len(), d]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (k, d) = self.value(table).dims2()?;
        if indices.is_empty() {
            return Err(Error::dim("gather of zero rows"));
        }
        if let Some(bad) = indices.iter().find(|&&i| i >= k) {
            return Err(Error::dim(format!("row index {bad} out of range for {k} rows")));
        }
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            out.extend_from_slice(&td[i * d..(i + 1) * d]);
        }
        let out = Tensor::matrix(indices.len(), d, out)?;
        let ng = self.ng(&[table]);
        Ok(self.push(out, Op::GatherRows { table, indices: indices.to_vec() }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s = self.value(x).norm_sq();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumSquares(x), ng)
    }

    /// Back-propagates from the scalar `loss` through every node once, in
    /// reverse recording order.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params = ParamGrads::default();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                params.add(*id, g);
            }
        }
        Ok(Gradients { nodes: grads, params })
    }

    fn backward_node(&self, node: &Node<'a>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let n = self.value(*b).last_dim();
                if let Some(da) = self.slot(grads, *a) {
                    gemm(m, n, k, g, false, self.value(*b).data(), true, da, 1.0);
                }
                if let Some(db) = self.slot(grads, *b) {
                    gemm(k, m, n, self.value(*a).data(), true, g, false, db, 1.0);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                self.acc(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(x, c) => self.acc(grads, *x, g.iter().map(|v| c * v)),
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.iter().copied());
                if let Some(db) = self.slot(grads, *b) {
                    let n = db.len();
                    for row in g.chunks(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
                let d = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if let Some(dg) = self.slot(grads, *gamma) {
                    for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *beta) {
                    for gr in g.chunks(d) {
                        db.iter_mut().zip(gr).for_each(|(b, v)| *b += v);
                    }
                }
                if let Some(dx) = self.slot(grads, *x) {
                    let df = d as f64;
                    for (r, (gr, hr)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        let mut s1 = 0.0;
                        let mut s2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            s1 += dh;
                            s2 += dh * hr[j];
                        }
                        let inv = inv_std[r];
                        for j in 0..d {
                            let dh = gr[j] * gam[j];
                            dx[r * d + j] += inv / df * (df * dh - s1 - hr[j] * s2);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let d = node.value.last_dim();
                    for ((dr, gr), yr) in dx.chunks_mut(d).zip(g.chunks(d)).zip(out.chunks(d)) {
                        let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                        for j in 0..d {
                            dr[j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                self.acc(grads, *x, g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)));
            }
            Op::Swish(x) => {
                let vx = self.value(*x).data();
                self.acc(
                    grads,
                    *x,
                    g.iter().zip(vx).map(|(g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (1.0 - s))
                    }),
                );
            }
            Op::Glu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let vx = self.value(*x).data();
                    let c = node.value.last_dim();
                    for ((dr, gr), xr) in
                        dx.chunks_mut(2 * c).zip(g.chunks(c)).zip(vx.chunks(2 * c))
                    {
                        for j in 0..c {
                            let s = sigmoid(xr[c + j]);
                            dr[j] += gr[j] * s;
                            dr[c + j] += gr[j] * xr[j] * s * (1.0 - s);
                        }
                    }
                }
            }
            Op::DepthwiseConv1d { x, kernel } => {
                let (c, t) = self.value(*x).dims2().unwrap();
                let k = self.value(*kernel).last_dim();
                let pad = k / 2;
                let (xd, kd) = (self.value(*x).data(), self.value(*kernel).data());
                let mut dx = self.slot(grads, *x).map(std::mem::take);
                if let Some(dk) = self.slot(grads, *kernel) {
                    for ch in 0..c {
                        for i in 0..t {
                            let go = g[ch * t + i];
                            for j in 0..k {
                                let src = i as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    dk[ch * k + j] += go * xd[ch * t + src as usize];
                                }
                            }
                        }
                    }
                }
                if let Some(dxv) = dx.as_mut() {
                    for ch in 0..c {
                        for i in 0..t {
                            let go = g[ch * t + i];
                            for j in 0..k {
                                let src = i as isize + j as isize - pad as isize;
                                if src >= 0 && (src as usize) < t {
                                    dxv[ch * t + src as usize] += go * kd[ch * k + j];
                                }
                            }
                        }
                    }
                    grads[x.0] = dx;
                }
            }
            Op::Transpose(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let (r, c) = node.value.dims2().unwrap();
                    for i in 0..r {
                        for j in 0..c {
                            dx[j * r + i] += g[i * c + j];
                        }
                    }
                }
            }
            Op::Reshape(x) | Op::StraightThrough(x) => self.acc(grads, *x, g.iter().copied()),
            Op::SliceCols { x, start } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let len = node.value.last_dim();
                    let c = self.value(*x).last_dim();
                    for (dr, gr) in dx.chunks_mut(c).zip(g.chunks(len)) {
                        for j in 0..len {
                            dr[start + j] += gr[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).last_dim();
                    if let Some(dp) = self.slot(grads, *p) {
                        for (dr, gr) in dp.chunks_mut(w).zip(g.chunks(total)) {
                            for j in 0..w {
                                dr[j] += gr[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::MaskMul { x, mask } => {
                self.acc(grads, *x, g.iter().zip(mask).map(|(g, m)| g * m));
            }
            Op::GatherRows { table, indices } => {
                if let Some(dt) = self.slot(grads, *table) {
                    let d = node.value.last_dim();
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            dt[i * d + j] += g[r * d + j];
                        }
                    }
                }
            }
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc(grads, *x, std::iter::repeat(g0));
            }
            Op::SumSquares(x) => {
                let g0 = g[0];
                let vx = self.value(*x).data();
                self.acc(grads, *x, vx.iter().map(|v| 2.0 * v * g0));
            }
        }
    }

    /// Gradient buffer for `v`, allocated on first use; `None` when `v`
    /// does not need a gradient.
    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn acc(&self, grads: &mut [Option<Vec<f64>>], v: Var, g: impl Iterator<Item = f64>) {
        if let Some(buf) = self.slot(grads, v) {
            buf.iter_mut().zip(g).for_each(|(b, v)| *b += v);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_arithmetic() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2, 1], &[3.0, 4.0]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[11.0]);
        assert!(tape.matmul(a, a).is_err());
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[1, 2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, g, b, 1e-300).unwrap();
        assert_eq!(tape.value(y).data(), &[-1.0, 1.0]);

        let g4 = tape.constant(Tensor::full(&[4], 1.0));
        let b4 = tape.constant(Tensor::zeros(&[4]));
        let c = tape.constant(Tensor::full(&[2, 4], 7.5));
        let y = tape.layer_norm(c, g4, b4, 1e-5).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
        assert!(tape.layer_norm(c, g, b, 1e-5).is_err());
        assert!(tape.layer_norm(c, g4, b4, 0.0).is_err());
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 0.0, 0.0]));
        let y = tape.softmax(x);
        for v in tape.value(y).data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = tape.constant(t(&[2], &[1000.0, 0.0]));
        let y = tape.softmax(x);
        let d = tape.value(y).data();
        assert!((d[0] - 1.0).abs() < 1e-12 && d[1].abs() < 1e-12);
    }

    #[test]
    fn swish_and_glu_values() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[3], &[0.0, 20.0, -1.0]));
        let y = tape.swish(x);
        let d = tape.value(y).data();
        assert_eq!(d[0], 0.0);
        assert!((d[1] - 20.0).abs() < 1e-6);
        // -1 * sigma(-1), evaluated independently in extended precision.
        assert!((d[2] - -0.268_941_421_369_995_1).abs() < 1e-15);

        let x = tape.constant(t(&[1, 2], &[2.0, 1.0]));
        let y = tape.glu(x).unwrap();
        assert!((tape.value(y).data()[0] - 1.462_117_157_260_009_8).abs() < 1e-15);

        let x = tape.constant(t(&[2, 2], &[5.0, 0.0, -3.0, -1e9]));
        let y = tape.glu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[2.5, 0.0]);

        let odd = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        assert!(tape.glu(odd).is_err());
    }

    #[test]
    fn depthwise_conv_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[1, 5], 1.0));
        let k = tape.constant(Tensor::full(&[1, 3], 1.0));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        assert_eq!(tape.value(y).data(), &[2.0, 3.0, 3.0, 3.0, 2.0]);

        let x = tape.constant(t(&[2, 4], &[1.0, -2.0, 3.0, 0.5, 4.0, 4.0, -1.0, 2.0]));
        let k = tape.constant(t(&[2, 5], &[0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0]));
        let y = tape.depthwise_conv1d(x, k).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let even = tape.constant(Tensor::full(&[2, 2], 1.0));
        assert!(matches!(tape.depthwise_conv1d(x, even), Err(Error::Config(_))));
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.input(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let s = tape.sum(x);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[1.0; 4]);

        let mut tape = Tape::new();
        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap(), &[2.0, 4.0]);

        assert!(matches!(tape.backward(sq), Err(Error::Usage(_))));
    }

    #[test]
    fn repeated_backward_accumulates_into_params() {
        let mut store = ParamStore::new();
        let id = store.add("w", t(&[2], &[1.0, 2.0])).unwrap();
        let snapshot = store.clone();
        let mut tape = Tape::new();
        let w = tape.param(&snapshot, id);
        let l = tape.sum_squares(w);
        for _ in 0..2 {
            let g = tape.backward(l).unwrap();
            store.accumulate(g.params(), 1.0);
        }
        assert_eq!(store.get(id).grad.data(), &[4.0, 8.0]);
    }

    #[test]
    fn straight_through_and_gather() {
        let mut tape = Tape::new();
        let src = tape.input(t(&[2, 2], &[0.1, 0.2, 0.3, 0.4]));
        let table = tape.input(t(&[3, 2], &[0.0, 0.0, 1.0, 1.0, 2.0, 2.0]));
        let picked = tape.gather_rows(table, &[2, 2]).unwrap();
        let target = tape.detach(picked);
        let st = tape.straight_through(src, target).unwrap();
        assert_eq!(tape.value(st).data(), &[2.0, 2.0, 2.0, 2.0]);
        let s = tape.sum(st);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(src).unwrap(), &[1.0; 4]);
        assert!(g.get(table).is_none());

        let s = tape.sum(picked);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(table).unwrap(), &[0.0, 0.0, 0.0, 0.0, 2.0, 2.0]);
        assert!(tape.gather_rows(table, &[3]).is_err());
    }

    #[test]
    fn dropout_respects_mode() {
        use rand::SeedableRng;
        let mut tape = Tape::new();
        let x = tape.input(Tensor::full(&[1000], 1.0));
        assert_eq!(tape.dropout(x, 0.1, None), x);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = tape.dropout(x, 0.5, Some(&mut rng));
        let v = tape.value(y).data();
        assert!(v.iter().all(|&a| a == 0.0 || a == 2.0));
        let kept = v.iter().filter(|&&a| a > 0.0).count();
        assert!((400..600).contains(&kept));
    }
}
