use rayon::prelude::*;

use crate::autodiff::param::{ParamId, ParamStore};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Kind of a recorded operation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OpKind {
    Constant,
    Input,
    Param,
    MatMul,
    Transpose,
    Add,
    Sub,
    AddBias,
    Scale,
    ScaleRows,
    Mul,
    Relu,
    Concat,
    L2Normalize,
    SumRows,
    Mean,
    Exp,
    Reshape,
    Conv2d,
    AvgPool2d,
    SoftmaxCrossEntropy,
}

#[derive(Debug)]
enum Op {
    Constant,
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Mul(Var, Var),
    Relu(Var),
    Concat { a: Var, b: Var, axis: usize },
    L2Normalize { x: Var, norms: Vec<f64> },
    SumRows(Var),
    Mean(Var),
    Exp(Var),
    Reshape(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeometry,
    },
    AvgPool2d { x: Var, kh: usize, kw: usize },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Option<Vec<bool>>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Constant => OpKind::Constant,
            Op::Input => OpKind::Input,
            Op::Param(_) => OpKind::Param,
            Op::MatMul(..) => OpKind::MatMul,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::AddBias(..) => OpKind::AddBias,
            Op::Scale(..) => OpKind::Scale,
            Op::ScaleRows(..) => OpKind::ScaleRows,
            Op::Mul(..) => OpKind::Mul,
            Op::Relu(_) => OpKind::Relu,
            Op::Concat { .. } => OpKind::Concat,
            Op::L2Normalize { .. } => OpKind::L2Normalize,
            Op::SumRows(_) => OpKind::SumRows,
            Op::Mean(_) => OpKind::Mean,
            Op::Exp(_) => OpKind::Exp,
            Op::Reshape(_) => OpKind::Reshape,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::AvgPool2d { .. } => OpKind::AvgPool2d,
            Op::SoftmaxCrossEntropy { .. } => OpKind::SoftmaxCrossEntropy,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Define-by-run record of tensor operations. Build a fresh tape per step.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by a backward pass.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// On/off state of every ReLU output on the tape, in recording order.
    pub fn relu_pattern(&self) -> Vec<bool> {
        self.nodes
            .iter()
            .filter(|n| matches!(n.op, Op::Relu(_)))
            .flat_map(|n| n.value.data().iter().map(|&v| v > 0.0))
            .collect()
    }

    fn check(&self, v: Var) -> Result<&Tensor> {
        self.nodes
            .get(v.0)
            .map(|n| &n.value)
            .ok_or(Error::UnknownVar(v.0, self.nodes.len()))
    }

    fn push(&mut self, op: Op, value: Tensor) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite {
                op: op_name(op.kind()),
            });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A leaf that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t)
    }

    /// A leaf whose gradient is reported in [`Gradients`].
    pub fn input(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Input, t)
    }

    /// Binds a trainable parameter; `backward` accumulates into it.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node {
            op: Op::Param(id),
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a parameter value as a constant (no gradient).
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let value = store.value(id).clone();
        self.nodes.push(Node {
            op: Op::Constant,
            value,
        });
        Var(self.nodes.len() - 1)
    }

    /// Stop-gradient: same values, but backward deposits nothing upstream.
    pub fn detach(&mut self, x: Var) -> Result<Var> {
        if self.check(x).is_ok() && self.kind(x) == OpKind::Constant {
            return Ok(x);
        }
        let v = self.check(x)?.clone();
        self.push(Op::Constant, v)
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        self.push(Op::MatMul(a, b), Tensor::raw(vec![m, n], out))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (m, n) = t.dims2("transpose")?;
        let out = transpose_raw(t.data(), m, n);
        self.push(Op::Transpose(x), Tensor::raw(vec![n, m], out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("add", a, b, |x, y| x + y)?;
        self.push(Op::Add(a, b), out)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("sub", a, b, |x, y| x - y)?;
        self.push(Op::Sub(a, b), out)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same("mul", a, b, |x, y| x * y)?;
        self.push(Op::Mul(a, b), out)
    }

    /// `[m, n] + [n]`, broadcasting the bias over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.check(x)?, self.check(bias)?);
        let (_, n) = tx.dims2("add_bias")?;
        if tb.numel() != n {
            return Err(mismatch("add_bias", tx, tb));
        }
        let b = tb.data();
        let out: Vec<f64> = tx
            .data()
            .chunks(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, c)| v + c))
            .collect();
        let out = tx.with_data(out);
        self.push(Op::AddBias(x, bias), out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        if !c.is_finite() {
            return Err(Error::NonFinite { op: "scale" });
        }
        let t = self.check(x)?;
        let out = t.with_data(t.data().iter().map(|v| v * c).collect());
        self.push(Op::Scale(x, c), out)
    }

    /// Multiplies row `i` (first axis) by `coef[i]`.
    pub fn scale_rows(&mut self, x: Var, coef: &[f64]) -> Result<Var> {
        let t = self.check(x)?;
        let rows = t.shape().first().copied().unwrap_or(1);
        if coef.len() != rows {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                lhs: t.shape().to_vec(),
                rhs: vec![coef.len()],
            });
        }
        if coef.iter().any(|c| !c.is_finite()) {
            return Err(Error::NonFinite { op: "scale_rows" });
        }
        let width = t.numel() / rows;
        let out: Vec<f64> = t
            .data()
            .chunks(width)
            .zip(coef)
            .flat_map(|(row, c)| row.iter().map(move |v| v * c))
            .collect();
        let out = t.with_data(out);
        self.push(Op::ScaleRows(x, coef.to_vec()), out)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let out = t.with_data(t.data().iter().map(|&v| v.max(0.0)).collect());
        self.push(Op::Relu(x), out)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let out = t.with_data(t.data().iter().map(|v| v.exp()).collect());
        self.push(Op::Exp(x), out)
    }

    /// Concatenates along `axis`. Vectors use axis 0; matrices axis 0 (rows) or 1 (features).
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Result<Var> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        let out = match (ta.shape(), tb.shape(), axis) {
            ([_], [_], 0) => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::vector(d)
            }
            ([ma, na], [mb, nb], 0) if na == nb => {
                let mut d = ta.data().to_vec();
                d.extend_from_slice(tb.data());
                Tensor::raw(vec![ma + mb, *na], d)
            }
            ([ma, na], [mb, nb], 1) if ma == mb => {
                let mut d = Vec::with_capacity(ta.numel() + tb.numel());
                for (ra, rb) in ta.data().chunks(*na).zip(tb.data().chunks(*nb)) {
                    d.extend_from_slice(ra);
                    d.extend_from_slice(rb);
                }
                Tensor::raw(vec![*ma, na + nb], d)
            }
            _ => return Err(mismatch("concat", ta, tb)),
        };
        self.push(Op::Concat { a, b, axis }, out)
    }

    /// Concatenates along the last (feature) axis.
    pub fn concat_features(&mut self, a: Var, b: Var) -> Result<Var> {
        let axis = self.check(a)?.shape().len().saturating_sub(1);
        self.concat(a, b, axis)
    }

    /// Scales each row (last axis) to unit Euclidean norm. Zero rows are an error.
    pub fn l2_normalize(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let width = *t.shape().last().unwrap_or(&1);
        let mut norms = Vec::with_capacity(t.numel() / width);
        let mut out = Vec::with_capacity(t.numel());
        for (row_idx, row) in t.data().chunks(width).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n == 0.0 {
                return Err(Error::ZeroNorm {
                    op: "l2_normalize",
                    row: row_idx,
                });
            }
            norms.push(n);
            out.extend(row.iter().map(|v| v / n));
        }
        let out = t.with_data(out);
        self.push(Op::L2Normalize { x, norms }, out)
    }

    /// `[m, n] -> [m, 1]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let (m, n) = t.dims2("sum_rows")?;
        let out: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        self.push(Op::SumRows(x), Tensor::raw(vec![m, 1], out))
    }

    /// Mean over all elements.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.check(x)?;
        let m = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(x), Tensor::scalar(m))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.check(x)?;
        let out = t.reshape(shape.to_vec())?;
        self.push(Op::Reshape(x), out)
    }

    /// Direct 2-D convolution. `input` is `[N, C, H, W]`, `weight` is `[O, C, KH, KW]`,
    /// `bias` is `[O]`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (ti, tw) = (self.check(input)?, self.check(weight)?);
        let (n, c, h, w) = match ti.shape() {
            &[n, c, h, w] => (n, c, h, w),
            _ => return Err(mismatch("conv2d", ti, tw)),
        };
        let (o, kh, kw) = match tw.shape() {
            &[o, wc, kh, kw] if wc == c => (o, kh, kw),
            _ => return Err(mismatch("conv2d", ti, tw)),
        };
        if stride == 0 || h + 2 * padding < kh || w + 2 * padding < kw {
            return Err(Error::InvalidShape {
                op: "conv2d",
                msg: format!("kernel {kh}x{kw} does not fit input {h}x{w} (padding {padding}, stride {stride})"),
            });
        }
        let bias_data = match bias {
            Some(b) => {
                let tb = self.check(b)?;
                if tb.numel() != o {
                    return Err(mismatch("conv2d", tw, tb));
                }
                Some(tb.data())
            }
            None => None,
        };
        let geom = ConvGeometry {
            n,
            c,
            h,
            w,
            o,
            kh,
            kw,
            ho: (h + 2 * padding - kh) / stride + 1,
            wo: (w + 2 * padding - kw) / stride + 1,
            stride,
            padding,
        };
        let out = conv2d_forward(ti.data(), tw.data(), bias_data, &geom);
        self.push(
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            },
            Tensor::raw(vec![n, o, geom.ho, geom.wo], out),
        )
    }

    /// Non-overlapping average pooling with a `kh x kw` window (stride = window).
    pub fn avg_pool2d(&mut self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let t = self.check(x)?;
        let (n, c, h, w) = match t.shape() {
            &[n, c, h, w] if kh >= 1 && kw >= 1 && h >= kh && w >= kw => (n, c, h, w),
            s => {
                return Err(Error::InvalidShape {
                    op: "avg_pool2d",
                    msg: format!("window {kh}x{kw} does not fit shape {s:?}"),
                })
            }
        };
        let (ho, wo) = (h / kh, w / kw);
        let scale = 1.0 / (kh * kw) as f64;
        let mut out = vec![0.0; n * c * ho * wo];
        for (plane, dst) in t.data().chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for dy in 0..kh {
                        let row = &plane[(oy * kh + dy) * w + ox * kw..][..kw];
                        s += row.iter().sum::<f64>();
                    }
                    dst[oy * wo + ox] = s * scale;
                }
            }
        }
        self.push(
            Op::AvgPool2d { x, kh, kw },
            Tensor::raw(vec![n, c, ho, wo], out),
        )
    }

    /// Mean softmax cross-entropy over rows of `[m, c]` logits.
    ///
    /// `mask[i * c + j] == true` removes logit `(i, j)` from the softmax entirely.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<Vec<bool>>,
    ) -> Result<Var> {
        let t = self.check(logits)?;
        let (m, c) = t.dims2("softmax_cross_entropy")?;
        if targets.len() != m {
            return Err(Error::ShapeMismatch {
                op: "softmax_cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(mk) = &mask {
            if mk.len() != m * c {
                return Err(Error::ShapeMismatch {
                    op: "softmax_cross_entropy",
                    lhs: t.shape().to_vec(),
                    rhs: vec![mk.len()],
                });
            }
        }
        let excluded = |i: usize, j: usize| mask.as_ref().is_some_and(|mk| mk[i * c + j]);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for (i, (row, &target)) in t.data().chunks(c).zip(targets).enumerate() {
            if target >= c || excluded(i, target) {
                return Err(Error::InvalidShape {
                    op: "softmax_cross_entropy",
                    msg: format!("target {target} invalid for row {i}"),
                });
            }
            let max = (0..c)
                .filter(|&j| !excluded(i, j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                if !excluded(i, j) {
                    let e = (row[j] - max).exp();
                    probs[i * c + j] = e;
                    z += e;
                }
            }
            for p in &mut probs[i * c..(i + 1) * c] {
                *p /= z;
            }
            total += max + z.ln() - row[target];
        }
        let loss = Tensor::scalar(total / m as f64);
        self.push(
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask,
                probs,
            },
            loss,
        )
    }

    fn zip_same(
        &self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.check(a)?, self.check(b)?);
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        Ok(ta.with_data(
            ta.data()
                .iter()
                .zip(tb.data())
                .map(|(&x, &y)| f(x, y))
                .collect(),
        ))
    }

    /// Reverse pass without touching any parameter store.
    pub fn grad(&self, loss: Var) -> Result<Gradients> {
        self.run_backward(loss)
    }

    /// Reverse pass; parameter gradients are accumulated into `store`.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<Gradients> {
        let grads = self.run_backward(loss)?;
        for (node, g) in self.nodes.iter().zip(&grads.grads) {
            if let (Op::Param(id), Some(g)) = (&node.op, g) {
                store.accumulate(*id, g);
            }
        }
        Ok(grads)
    }

    fn run_backward(&self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::EmptyTape);
        }
        let lt = self.check(loss)?;
        if !lt.is_scalar() {
            return Err(Error::NotScalar(lt.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[loss.0] = Some(lt.with_data(vec![1.0]));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        match op {
            Op::Constant | Op::Input | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(self, *a) {
                    let bt = transpose_raw(tb.data(), k, n);
                    let ga = matmul_raw(g.data(), &bt, m, n, k);
                    accumulate(grads, *a, ta.with_data(ga));
                }
                if wants(self, *b) {
                    let at = transpose_raw(ta.data(), m, k);
                    let gb = matmul_raw(&at, g.data(), k, m, n);
                    accumulate(grads, *b, tb.with_data(gb));
                }
            }
            Op::Transpose(x) => {
                let (m, n) = (g.shape()[0], g.shape()[1]);
                let gx = transpose_raw(g.data(), m, n);
                accumulate(grads, *x, val(*x).with_data(gx));
            }
            Op::Add(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.clone());
                accumulate(grads, *b, g.with_data(g.data().iter().map(|v| -v).collect()));
            }
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.clone());
                let n = val(*b).numel();
                let mut gb = vec![0.0; n];
                for row in g.data().chunks(n) {
                    for (acc, v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                accumulate(grads, *b, val(*b).with_data(gb));
            }
            Op::Scale(x, c) => {
                accumulate(grads, *x, g.with_data(g.data().iter().map(|v| v * c).collect()));
            }
            Op::ScaleRows(x, coef) => {
                let width = g.numel() / coef.len();
                let gx: Vec<f64> = g
                    .data()
                    .chunks(width)
                    .zip(coef)
                    .flat_map(|(row, c)| row.iter().map(move |v| v * c))
                    .collect();
                accumulate(grads, *x, g.with_data(gx));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (val(*a), val(*b));
                if wants(self, *a) {
                    let ga = g.data().iter().zip(tb.data()).map(|(u, v)| u * v).collect();
                    accumulate(grads, *a, g.with_data(ga));
                }
                if wants(self, *b) {
                    let gb = g.data().iter().zip(ta.data()).map(|(u, v)| u * v).collect();
                    accumulate(grads, *b, g.with_data(gb));
                }
            }
            Op::Relu(x) => {
                let gx = g
                    .data()
                    .iter()
                    .zip(val(*x).data())
                    .map(|(d, &v)| if v > 0.0 { *d } else { 0.0 })
                    .collect();
                accumulate(grads, *x, g.with_data(gx));
            }
            Op::Exp(x) => {
                let gx = g.data().iter().zip(out.data()).map(|(d, e)| d * e).collect();
                accumulate(grads, *x, g.with_data(gx));
            }
            Op::Concat { a, b, axis } => {
                let (ta, tb) = (val(*a), val(*b));
                let (ga, gb) = match (ta.shape().len(), axis) {
                    (2, 1) => {
                        let (na, nb) = (ta.shape()[1], tb.shape()[1]);
                        let mut ga = Vec::with_capacity(ta.numel());
                        let mut gb = Vec::with_capacity(tb.numel());
                        for row in g.data().chunks(na + nb) {
                            ga.extend_from_slice(&row[..na]);
                            gb.extend_from_slice(&row[na..]);
                        }
                        (ga, gb)
                    }
                    _ => {
                        let (ga, gb) = g.data().split_at(ta.numel());
                        (ga.to_vec(), gb.to_vec())
                    }
                };
                accumulate(grads, *a, ta.with_data(ga));
                accumulate(grads, *b, tb.with_data(gb));
            }
            Op::L2Normalize { x, norms } => {
                let width = *out.shape().last().unwrap_or(&1);
                let mut gx = Vec::with_capacity(out.numel());
                for ((y, d), n) in out.data().chunks(width).zip(g.data().chunks(width)).zip(norms) {
                    let yd: f64 = y.iter().zip(d).map(|(a, b)| a * b).sum();
                    gx.extend(y.iter().zip(d).map(|(yi, di)| (di - yi * yd) / n));
                }
                accumulate(grads, *x, g.with_data(gx));
            }
            Op::SumRows(x) => {
                let tx = val(*x);
                let n = tx.shape()[1];
                let gx = g
                    .data()
                    .iter()
                    .flat_map(|&d| std::iter::repeat_n(d, n))
                    .collect();
                accumulate(grads, *x, tx.with_data(gx));
            }
            Op::Mean(x) => {
                let tx = val(*x);
                let d = g.item() / tx.numel() as f64;
                accumulate(grads, *x, tx.with_data(vec![d; tx.numel()]));
            }
            Op::Reshape(x) => {
                accumulate(grads, *x, val(*x).with_data(g.data().to_vec()));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
            } => {
                let (ti, tw) = (val(*input), val(*weight));
                let want_input = wants(self, *input);
                let (gi, gw) = conv2d_backward(ti.data(), tw.data(), g.data(), geom, want_input);
                if let Some(gi) = gi {
                    accumulate(grads, *input, ti.with_data(gi));
                }
                accumulate(grads, *weight, tw.with_data(gw));
                if let Some(b) = bias {
                    let plane = geom.ho * geom.wo;
                    let mut gb = vec![0.0; geom.o];
                    for (i, chunk) in g.data().chunks(plane).enumerate() {
                        gb[i % geom.o] += chunk.iter().sum::<f64>();
                    }
                    accumulate(grads, *b, val(*b).with_data(gb));
                }
            }
            Op::AvgPool2d { x, kh, kw } => {
                let tx = val(*x);
                let (h, w) = (tx.shape()[2], tx.shape()[3]);
                let (ho, wo) = (out.shape()[2], out.shape()[3]);
                let scale = 1.0 / (kh * kw) as f64;
                let mut gx = vec![0.0; tx.numel()];
                for (dst, src) in gx.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let d = src[oy * wo + ox] * scale;
                            for dy in 0..*kh {
                                for v in &mut dst[(oy * kh + dy) * w + ox * kw..][..*kw] {
                                    *v += d;
                                }
                            }
                        }
                    }
                }
                accumulate(grads, *x, tx.with_data(gx));
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                mask,
                probs,
            } => {
                let tl = val(*logits);
                let c = tl.shape()[1];
                let m = targets.len();
                let d = g.item() / m as f64;
                let mut gl: Vec<f64> = probs.iter().map(|p| p * d).collect();
                for (i, &t) in targets.iter().enumerate() {
                    gl[i * c + t] -= d;
                }
                if let Some(mk) = mask {
                    for (v, &ex) in gl.iter_mut().zip(mk) {
                        if ex {
                            *v = 0.0;
                        }
                    }
                }
                accumulate(grads, *logits, tl.with_data(gl));
            }
        }
    }
}

fn wants(tape: &Tape, v: Var) -> bool {
    tape.nodes[v.0].op.kind() != OpKind::Constant
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

pub fn op_name(kind: OpKind) -> &'static str {
    match kind {
        OpKind::Constant => "constant",
        OpKind::Input => "input",
        OpKind::Param => "param",
        OpKind::MatMul => "matmul",
        OpKind::Transpose => "transpose",
        OpKind::Add => "add",
        OpKind::Sub => "sub",
        OpKind::AddBias => "add_bias",
        OpKind::Scale => "scale",
        OpKind::ScaleRows => "scale_rows",
        OpKind::Mul => "mul",
        OpKind::Relu => "relu",
        OpKind::Concat => "concat",
        OpKind::L2Normalize => "l2_normalize",
        OpKind::SumRows => "sum_rows",
        OpKind::Mean => "mean",
        OpKind::Exp => "exp",
        OpKind::Reshape => "reshape",
        OpKind::Conv2d => "conv2d",
        OpKind::AvgPool2d => "avg_pool2d",
        OpKind::SoftmaxCrossEntropy => "softmax_cross_entropy",
    }
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for (arow, orow) in a.chunks(k).zip(out.chunks_mut(n)) {
        for (&av, brow) in arow.iter().zip(b.chunks(n)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

/// Output columns `ox` for which `ox * stride + kj - padding` lands in `[0, w)`.
fn valid_range(kj: usize, w: usize, wo: usize, stride: usize, padding: usize) -> (usize, usize) {
    let lo = if kj >= padding {
        0
    } else {
        (padding - kj).div_ceil(stride)
    };
    let hi = if w + padding > kj {
        ((w + padding - kj - 1) / stride + 1).min(wo)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &[f64], wt: &[f64], bias: Option<&[f64]>, g: &ConvGeometry) -> Vec<f64> {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let mut out = vec![0.0; g.n * g.o * plane_out];
    let yr: Vec<_> = (0..g.kh).map(|ki| valid_range(ki, g.h, g.ho, g.stride, g.padding)).collect();
    let xr: Vec<_> = (0..g.kw).map(|kj| valid_range(kj, g.w, g.wo, g.stride, g.padding)).collect();
    out.par_chunks_mut(g.o * plane_out).enumerate().for_each(|(ni, sample)| {
        for oi in 0..g.o {
            let dst = &mut sample[oi * plane_out..][..plane_out];
            if let Some(b) = bias {
                dst.fill(b[oi]);
            }
            for ci in 0..g.c {
                let src = &x[(ni * g.c + ci) * plane_in..][..plane_in];
                let kbase = (oi * g.c + ci) * g.kh * g.kw;
                for ki in 0..g.kh {
                    let (ylo, yhi) = yr[ki];
                    for kj in 0..g.kw {
                        let wv = wt[kbase + ki * g.kw + kj];
                        let (xlo, xhi) = xr[kj];
                        for oy in ylo..yhi {
                            let iy = oy * g.stride + ki - g.padding;
                            let srow = &src[iy * g.w..][..g.w];
                            let drow = &mut dst[oy * g.wo..][..g.wo];
                            if g.stride == 1 {
                                let off = xlo + kj - g.padding;
                                let len = xhi - xlo;
                                for (d, s) in drow[xlo..xhi].iter_mut().zip(&srow[off..off + len]) {
                                    *d += wv * s;
                                }
                            } else {
                                for ox in xlo..xhi {
                                    drow[ox] += wv * srow[ox * g.stride + kj - g.padding];
                                }
                            }
                        }
                    }
                }
            }
        }
    });
    out
}

/// Samples are processed in parallel; per-sample weight gradients are then summed in sample
/// order, so the result is the same for any thread count.
fn conv2d_backward(
    x: &[f64],
    wt: &[f64],
    gout: &[f64],
    g: &ConvGeometry,
    want_input: bool,
) -> (Option<Vec<f64>>, Vec<f64>) {
    let plane_in = g.h * g.w;
    let plane_out = g.ho * g.wo;
    let yr: Vec<_> = (0..g.kh).map(|ki| valid_range(ki, g.h, g.ho, g.stride, g.padding)).collect();
    let xr: Vec<_> = (0..g.kw).map(|kj| valid_range(kj, g.w, g.wo, g.stride, g.padding)).collect();
    let per_sample: Vec<(Option<Vec<f64>>, Vec<f64>)> = (0..g.n)
        .into_par_iter()
        .map(|ni| {
            let mut gx = want_input.then(|| vec![0.0; g.c * plane_in]);
            let mut gw = vec![0.0; wt.len()];
            for oi in 0..g.o {
                let go = &gout[(ni * g.o + oi) * plane_out..][..plane_out];
                for ci in 0..g.c {
                    let src = &x[(ni * g.c + ci) * plane_in..][..plane_in];
                    let kbase = (oi * g.c + ci) * g.kh * g.kw;
                    for ki in 0..g.kh {
                        let (ylo, yhi) = yr[ki];
                        for kj in 0..g.kw {
                            let widx = kbase + ki * g.kw + kj;
                            let wv = wt[widx];
                            let (xlo, xhi) = xr[kj];
                            let mut acc = 0.0;
                            for oy in ylo..yhi {
                                let iy = oy * g.stride + ki - g.padding;
                                let grow = &go[oy * g.wo..][..g.wo];
                                for ox in xlo..xhi {
                                    let ix = ox * g.stride + kj - g.padding;
                                    acc += src[iy * g.w + ix] * grow[ox];
                                }
                                if let Some(gx) = gx.as_mut() {
                                    let drow = &mut gx[ci * plane_in + iy * g.w..][..g.w];
                                    for ox in xlo..xhi {
                                        drow[ox * g.stride + kj - g.padding] += wv * grow[ox];
                                    }
                                }
                            }
                            gw[widx] += acc;
                        }
                    }
                }
            }
            (gx, gw)
        })
        .collect();
    let mut gw = vec![0.0; wt.len()];
    let mut gx = want_input.then(|| Vec::with_capacity(x.len()));
    for (sx, sw) in per_sample {
        for (a, b) in gw.iter_mut().zip(sw) {
            *a += b;
        }
        if let (Some(all), Some(sx)) = (gx.as_mut(), sx) {
            all.extend(sx);
        }
    }
    (gx, gw)
}
