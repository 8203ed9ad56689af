use std::collections::BTreeMap;

use crate::error::{AutodiffError, Result};
use crate::kernels::{self, ConvShape};
use crate::linalg::Lu;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value stored on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Conv2d {
        input: Var,
        weight: Var,
        shape: ConvShape,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    LogAbs(Var),
    Sigmoid(Var),
    LogSigmoid(Var),
    Sum(Var),
    SumRows(Var),
    Mean(Var),
    ChannelSplit {
        input: Var,
        start: usize,
    },
    ChannelConcat(Vec<Var>),
    Reshape(Var),
    Broadcast {
        input: Var,
        outer: usize,
        inner: usize,
    },
    Squeeze(Var),
    Unsqueeze(Var),
    LogAbsDet(Var),
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Option<Op<T>>,
    requires_grad: bool,
}

/// Gradients of one backward pass, keyed by the leaf they belong to.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(&var)
    }

    pub fn remove(&mut self, var: Var) -> Option<Tensor<T>> {
        self.grads.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Tensor<T>)> {
        self.grads.iter().map(|(&v, t)| (v, t))
    }
}

/// Eagerly evaluated, append-only operation record.
///
/// Nodes are appended after their inputs, so insertion order is a
/// topological order and backward is a single reverse sweep.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    check_finite: bool,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            check_finite: false,
        }
    }

    /// Fail any op whose result contains NaN or infinity.
    pub fn with_finite_checks(mut self) -> Self {
        self.check_finite = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Leaf whose gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(value, false)
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn dims(&self, var: Var) -> &[usize] {
        self.nodes[var.0].value.dims()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push_leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: None,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(
        &mut self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        inputs: &[Var],
    ) -> Result<Var> {
        if self.check_finite && !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op: requires_grad.then_some(op),
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), name, f)?;
        self.push(name, value, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(name, value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary("scale", a, |x| x * s, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let s = T::of(s);
        self.unary("add_scalar", a, |x| x + s, Op::AddScalar(a))
    }

    /// `(m,k) · (k,n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (da, db) = (self.dims(a), self.dims(b));
        if da.len() != 2 || db.len() != 2 || da[1] != db[0] {
            return Err(AutodiffError::shape("matmul", da, db));
        }
        let (m, k, n) = (da[0], da[1], db[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        let value = Tensor::new(vec![m, n], out)?;
        self.push("matmul", value, Op::MatMul(a, b), &[a, b])
    }

    /// Same-padded stride-1 convolution of `(n,ci,h,w)` by `(co,ci,k,k)`, `k ∈ {1, 3}`.
    pub fn conv2d(&mut self, input: Var, weight: Var) -> Result<Var> {
        let (di, dw) = (self.dims(input), self.dims(weight));
        let ok = di.len() == 4
            && dw.len() == 4
            && dw[1] == di[1]
            && dw[2] == dw[3]
            && matches!(dw[2], 1 | 3);
        if !ok {
            return Err(AutodiffError::shape("conv2d", di, dw));
        }
        let shape = ConvShape {
            batch: di[0],
            in_ch: di[1],
            out_ch: dw[0],
            height: di[2],
            width: di[3],
            kernel: dw[2],
        };
        let out =
            kernels::conv2d_forward(self.value(input).data(), self.value(weight).data(), shape);
        let value = Tensor::new(
            vec![shape.batch, shape.out_ch, shape.height, shape.width],
            out,
        )?;
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                shape,
            },
            &[input, weight],
        )
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(
            "relu",
            a,
            |x| if x > T::zero() { x } else { T::zero() },
            Op::Relu(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary("tanh", a, |x| x.tanh(), Op::Tanh(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, |x| x.exp(), Op::Exp(a))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, |x| x.ln(), Op::Log(a))
    }

    /// `ln |x|`.
    pub fn log_abs(&mut self, a: Var) -> Result<Var> {
        self.unary("log_abs", a, |x| x.abs().ln(), Op::LogAbs(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    /// `ln σ(x)` evaluated without forming σ(x).
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("log_sigmoid", a, log_sigmoid, Op::LogSigmoid(a))
    }

    /// Sum of all entries into a zero-dimensional tensor.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push("sum", value, Op::Sum(a), &[a])
    }

    /// Sum over every axis except the first: `(n, …)` → `(n)`.
    pub fn sum_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.dims().is_empty() {
            return Err(AutodiffError::invalid(
                "sum_rows",
                "needs at least one axis",
            ));
        }
        let n = t.dims()[0];
        let data = (0..n).map(|i| t.sample(i).iter().copied().sum()).collect();
        let value = Tensor::new(vec![n], data)?;
        self.push("sum_rows", value, Op::SumRows(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(AutodiffError::invalid("mean", "empty tensor"));
        }
        let value = Tensor::scalar(t.sum() / T::of(t.numel() as f64));
        self.push("mean", value, Op::Mean(a), &[a])
    }

    /// Channels `start..start+len` along axis 1.
    pub fn channel_split(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let d = t.dims();
        if d.len() < 2 || start + len > d[1] || len == 0 {
            return Err(AutodiffError::invalid(
                "channel_split",
                format!(
                    "range {start}..{} outside channel axis of {d:?}",
                    start + len
                ),
            ));
        }
        let (n, c) = (d[0], d[1]);
        let inner: usize = d[2..].iter().product();
        let mut data = Vec::with_capacity(n * len * inner);
        for b in 0..n {
            let base = (b * c + start) * inner;
            data.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut dims = d.to_vec();
        dims[1] = len;
        let value = Tensor::new(dims, data)?;
        self.push(
            "channel_split",
            value,
            Op::ChannelSplit { input: a, start },
            &[a],
        )
    }

    /// Concatenate along axis 1; all other axes must agree.
    pub fn channel_concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| AutodiffError::invalid("channel_concat", "no inputs"))?;
        let d0 = self.dims(*first).to_vec();
        if d0.len() < 2 {
            return Err(AutodiffError::invalid(
                "channel_concat",
                format!("rank too low: {d0:?}"),
            ));
        }
        let mut total_c = 0;
        for &p in parts {
            let d = self.dims(p);
            if d.len() != d0.len() || d[0] != d0[0] || d[2..] != d0[2..] {
                return Err(AutodiffError::shape("channel_concat", &d0, d));
            }
            total_c += d[1];
        }
        let n = d0[0];
        let inner: usize = d0[2..].iter().product();
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for &p in parts {
                let t = self.value(p);
                let block = t.dims()[1] * inner;
                data.extend_from_slice(&t.data()[b * block..(b + 1) * block]);
            }
        }
        let mut dims = d0;
        dims[1] = total_c;
        let value = Tensor::new(dims, data)?;
        self.push(
            "channel_concat",
            value,
            Op::ChannelConcat(parts.to_vec()),
            parts,
        )
    }

    pub fn reshape(&mut self, a: Var, dims: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(dims)?;
        self.push("reshape", value, Op::Reshape(a), &[a])
    }

    /// Repeat `a` to dims `outer ++ a.dims ++ inner`.
    pub fn broadcast(&mut self, a: Var, outer: &[usize], inner: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (no, ni): (usize, usize) = (outer.iter().product(), inner.iter().product());
        let mut data = Vec::with_capacity(no * t.numel() * ni);
        for _ in 0..no {
            for &v in t.data() {
                data.extend(std::iter::repeat(v).take(ni));
            }
        }
        let dims: Vec<usize> = outer.iter().chain(t.dims()).chain(inner).copied().collect();
        let value = Tensor::new(dims, data)?;
        let op = Op::Broadcast {
            input: a,
            outer: no,
            inner: ni,
        };
        self.push("broadcast", value, op, &[a])
    }

    /// Space-to-depth `(n,c,h,w)` → `(n,4c,h/2,w/2)`.
    pub fn squeeze(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if d.len() != 4 || d[2] % 2 != 0 || d[3] % 2 != 0 {
            return Err(AutodiffError::shape("squeeze", &d, &[0, 0, 2, 2]));
        }
        let data = kernels::squeeze2x2(self.value(a).data(), d[0], d[1], d[2], d[3]);
        let value = Tensor::new(vec![d[0], 4 * d[1], d[2] / 2, d[3] / 2], data)?;
        self.push("squeeze", value, Op::Squeeze(a), &[a])
    }

    /// Depth-to-space `(n,4c,h,w)` → `(n,c,2h,2w)`.
    pub fn unsqueeze(&mut self, a: Var) -> Result<Var> {
        let d = self.dims(a).to_vec();
        if d.len() != 4 || d[1] % 4 != 0 {
            return Err(AutodiffError::shape("unsqueeze", &d, &[0, 4, 0, 0]));
        }
        let data = kernels::unsqueeze2x2(self.value(a).data(), d[0], d[1] / 4, 2 * d[2], 2 * d[3]);
        let value = Tensor::new(vec![d[0], d[1] / 4, 2 * d[2], 2 * d[3]], data)?;
        self.push("unsqueeze", value, Op::Unsqueeze(a), &[a])
    }

    /// `ln |det W|` of a square matrix, rejecting `|det W| < min_abs_det`.
    pub fn log_abs_det(&mut self, a: Var, min_abs_det: f64) -> Result<Var> {
        let d = self.dims(a);
        if d.len() != 2 || d[0] != d[1] {
            return Err(AutodiffError::shape("log_abs_det", d, &[d[0], d[0]]));
        }
        let lu = Lu::factor(self.value(a).data(), d[0])?;
        let det = lu.det();
        if lu.is_singular() || det.abs() < min_abs_det {
            return Err(AutodiffError::Singular {
                op: "log_abs_det",
                det,
            });
        }
        let value = Tensor::scalar(T::of(lu.log_abs_det()));
        self.push("log_abs_det", value, Op::LogAbsDet(a), &[a])
    }

    /// Reverse sweep from a one-element output.
    ///
    /// Every leaf registered with [`Tape::param`] gets an entry, zero when the
    /// output does not depend on it. Constants never appear.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        let out = self.value(output);
        if out.numel() != 1 {
            return Err(AutodiffError::NonScalar(out.dims().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; output.0 + 1];
        grads[output.0] = Some(Tensor::ones(out.dims()));
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            let Some(op) = &node.op else { continue };
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(op, &node.value, &g, &mut grads)?;
        }
        let mut result = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate().take(output.0 + 1) {
            if node.op.is_none() && node.requires_grad {
                let g = grads[idx]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(node.value.dims()));
                result.grads.insert(Var(idx), g);
            }
        }
        for (idx, node) in self.nodes.iter().enumerate().skip(output.0 + 1) {
            if node.op.is_none() && node.requires_grad {
                result
                    .grads
                    .insert(Var(idx), Tensor::zeros(node.value.dims()));
            }
        }
        Ok(result)
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn propagate(
        &self,
        op: &Op<T>,
        out: &Tensor<T>,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
    ) -> Result<()> {
        match op {
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.zip_map(vb, "mul", |x, y| x * y)?);
                self.accumulate(grads, *b, g.zip_map(va, "mul", |x, y| x * y)?);
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.accumulate(grads, *a, g.map(|x| x * s));
            }
            Op::AddScalar(a) => self.accumulate(grads, *a, g.clone()),
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (va.dims()[0], va.dims()[1], vb.dims()[1]);
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); m * k];
                    kernels::matmul_nt(g.data(), vb.data(), &mut ga, m, n, k);
                    self.accumulate(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); k * n];
                    kernels::matmul_tn(va.data(), g.data(), &mut gb, k, m, n);
                    self.accumulate(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Conv2d {
                input,
                weight,
                shape,
            } => {
                let (want_in, want_w) = (self.requires_grad(*input), self.requires_grad(*weight));
                let (gi, gw) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*weight).data(),
                    g.data(),
                    *shape,
                    want_in,
                    want_w,
                );
                if want_in {
                    self.accumulate(grads, *input, Tensor::new(self.dims(*input).to_vec(), gi)?);
                }
                if want_w {
                    self.accumulate(
                        grads,
                        *weight,
                        Tensor::new(self.dims(*weight).to_vec(), gw)?,
                    );
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(
                        x,
                        "relu",
                        |gv, xv| if xv > T::zero() { gv } else { T::zero() },
                    )?,
                );
            }
            Op::Tanh(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(out, "tanh", |gv, y| gv * (T::one() - y * y))?,
                );
            }
            Op::Exp(a) => self.accumulate(grads, *a, g.zip_map(out, "exp", |gv, y| gv * y)?),
            Op::Log(a) | Op::LogAbs(a) => {
                let x = self.value(*a);
                self.accumulate(grads, *a, g.zip_map(x, "log", |gv, xv| gv / xv)?);
            }
            Op::Sigmoid(a) => {
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(out, "sigmoid", |gv, y| gv * y * (T::one() - y))?,
                );
            }
            Op::LogSigmoid(a) => {
                let x = self.value(*a);
                self.accumulate(
                    grads,
                    *a,
                    g.zip_map(x, "log_sigmoid", |gv, xv| gv * sigmoid(-xv))?,
                );
            }
            Op::Sum(a) => {
                let gv = g.data()[0];
                self.accumulate(grads, *a, Tensor::full(self.dims(*a), gv));
            }
            Op::SumRows(a) => {
                let d = self.dims(*a).to_vec();
                let stride = self.value(*a).numel() / d[0];
                let ga = Tensor::from_fn(&d, |i| g.data()[i / stride]);
                self.accumulate(grads, *a, ga);
            }
            Op::Mean(a) => {
                let x = self.value(*a);
                let gv = g.data()[0] / T::of(x.numel() as f64);
                self.accumulate(grads, *a, Tensor::full(x.dims(), gv));
            }
            Op::ChannelSplit { input, start } => {
                let d = self.dims(*input).to_vec();
                let (n, c) = (d[0], d[1]);
                let inner: usize = d[2..].iter().product();
                let len = g.dims()[1];
                let mut ga = vec![T::zero(); n * c * inner];
                for b in 0..n {
                    let dst = (b * c + start) * inner;
                    let src = b * len * inner;
                    ga[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                }
                self.accumulate(grads, *input, Tensor::new(d, ga)?);
            }
            Op::ChannelConcat(parts) => {
                let d = g.dims();
                let (n, c) = (d[0], d[1]);
                let inner: usize = d[2..].iter().product();
                let mut offset = 0;
                for &p in parts {
                    let pc = self.dims(p)[1];
                    if self.requires_grad(p) {
                        let mut gp = Vec::with_capacity(n * pc * inner);
                        for b in 0..n {
                            let base = (b * c + offset) * inner;
                            gp.extend_from_slice(&g.data()[base..base + pc * inner]);
                        }
                        self.accumulate(grads, p, Tensor::new(self.dims(p).to_vec(), gp)?);
                    }
                    offset += pc;
                }
            }
            Op::Reshape(a) => {
                let ga = g.clone().reshape(self.dims(*a))?;
                self.accumulate(grads, *a, ga);
            }
            Op::Broadcast {
                input,
                outer,
                inner,
            } => {
                let x = self.value(*input);
                let m = x.numel();
                let mut ga = vec![T::zero(); m];
                for o in 0..*outer {
                    for (s, acc) in ga.iter_mut().enumerate() {
                        let base = (o * m + s) * inner;
                        *acc = *acc + g.data()[base..base + inner].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, *input, Tensor::new(x.dims().to_vec(), ga)?);
            }
            Op::Squeeze(a) => {
                let d = self.dims(*a);
                let data = kernels::unsqueeze2x2(g.data(), d[0], d[1], d[2], d[3]);
                self.accumulate(grads, *a, Tensor::new(d.to_vec(), data)?);
            }
            Op::Unsqueeze(a) => {
                let d = out.dims();
                let data = kernels::squeeze2x2(g.data(), d[0], d[1], d[2], d[3]);
                self.accumulate(grads, *a, Tensor::new(self.dims(*a).to_vec(), data)?);
            }
            Op::LogAbsDet(a) => {
                // d ln|det W| / dW = W⁻ᵀ
                let w = self.value(*a);
                let n = w.dims()[0];
                let inv: Vec<T> = Lu::factor(w.data(), n)?.inverse();
                let gv = g.data()[0];
                let ga = Tensor::from_fn(&[n, n], |idx| gv * inv[(idx % n) * n + idx / n]);
                self.accumulate(grads, *a, ga);
            }
        }
        Ok(())
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub(crate) fn log_sigmoid<T: Scalar>(x: T) -> T {
    // ln σ(x) = -softplus(-x)
    if x >= T::zero() {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}
