//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records every operation in creation order, so parents always
//! precede children and a single reverse sweep visits nodes in topological
//! order. Values are computed eagerly; [`Tape::backward`] walks the record
//! once and accumulates gradients additively at shared nodes.
//!
//! Gradients are only propagated into subgraphs that reach a node created with
//! [`Tape::param`]; constants and anything derived solely from constants are
//! skipped.

use std::borrow::Cow;
use std::cell::{Ref, RefCell};

use crate::error::{contract, Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Valid,
    Same,
}

#[derive(Clone, Copy, Debug)]
struct ConvGeometry {
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    kh: usize,
    kw: usize,
    out_c: usize,
    stride: usize,
    pad_top: usize,
    pad_left: usize,
    out_h: usize,
    out_w: usize,
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Softplus(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxCrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
    Reshape(Var),
    Transpose(Var),
    Slice { src: Var, start: usize },
    Gather { src: Var, index: Vec<usize> },
    Concat(Vec<Var>),
    Conv2d { input: Var, kernel: Var, geo: ConvGeometry },
    MaxPool2 { input: Var, argmax: Vec<usize> },
    /// Scalar node whose derivative w.r.t. `input` was computed in the forward pass.
    LocalGrad { input: Var, local: Tensor },
}

struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Record of a forward computation. Leaves may borrow their values, so
/// registering large parameters costs no copy.
#[derive(Default)]
pub struct Tape<'a> {
    nodes: RefCell<Vec<Node<'a>>>,
}

/// Gradients of a scalar loss with respect to every parameter leaf of a tape.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient w.r.t. a parameter leaf. Panics if `v` was not created with [`Tape::param`].
    pub fn wrt(&self, v: Var) -> &Tensor {
        self.get(v).expect("gradient requested for a non-parameter node")
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn accumulate(slot: &mut Option<Tensor>, contribution: Tensor) {
    match slot {
        Some(g) => g.add_assign(&contribution),
        None => *slot = Some(contribution),
    }
}

fn accumulate_with(slot: &mut Option<Tensor>, shape: &[usize], f: impl FnOnce(&mut [f64])) {
    let g = slot.get_or_insert_with(|| Tensor::zeros(shape.to_vec()));
    f(g.data_mut());
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.push_cow(Cow::Owned(value), op, requires_grad)
    }

    fn push_cow(&self, value: Cow<'a, Tensor>, op: Op, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// Differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf borrowing its value.
    pub fn param_ref(&self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// Constant leaf borrowing its value.
    pub fn constant_ref(&self, value: &'a Tensor) -> Var {
        self.push_cow(Cow::Borrowed(value), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes.borrow()[v.0].value.data()[0]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let (sa, sb) = (nodes[a.0].value.shape(), nodes[b.0].value.shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let nodes = self.nodes.borrow();
        let (x, y) = (&nodes[a.0].value, &nodes[b.0].value);
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape().to_vec(), data)
    }

    fn unary(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        self.nodes.borrow()[a.0].value.map(f)
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("add", a, b, |x, y| x + y)?;
        Ok(self.push(v, Op::Add(a, b), self.rg(&[a, b])))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("sub", a, b, |x, y| x - y)?;
        Ok(self.push(v, Op::Sub(a, b), self.rg(&[a, b])))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip_with("mul", a, b, |x, y| x * y)?;
        ensure_finite(&v, "mul")?;
        Ok(self.push(v, Op::Mul(a, b), self.rg(&[a, b])))
    }

    /// Adds a bias vector along the last axis of `x`.
    pub fn add_bias(&self, x: Var, bias: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (xv, bv) = (&nodes[x.0].value, &nodes[bias.0].value);
            let last = *xv.shape().last().unwrap_or(&0);
            if bv.len() != last || bv.rank() != 1 {
                return Err(Error::Shape {
                    op: "add_bias",
                    lhs: xv.shape().to_vec(),
                    rhs: bv.shape().to_vec(),
                });
            }
            let mut out = Tensor::clone(xv);
            for row in out.data_mut().chunks_mut(last.max(1)) {
                for (o, b) in row.iter_mut().zip(bv.data()) {
                    *o += b;
                }
            }
            out
        };
        Ok(self.push(value, Op::AddBias(x, bias), self.rg(&[x, bias])))
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| c * x);
        self.push(v, Op::Scale(a, c), self.rg(&[a]))
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        let v = self.unary(a, |x| x + c);
        self.push(v, Op::AddScalar(a), self.rg(&[a]))
    }

    pub fn neg(&self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            nodes[a.0].value.matmul(&nodes[b.0].value)?
        };
        ensure_finite(&v, "matmul")?;
        Ok(self.push(v, Op::MatMul(a, b), self.rg(&[a, b])))
    }

    pub fn relu(&self, a: Var) -> Var {
        let v = self.unary(a, |x| x.max(0.0));
        self.push(v, Op::Relu(a), self.rg(&[a]))
    }

    /// `log(1 + exp(x))`, evaluated without overflow.
    pub fn softplus(&self, a: Var) -> Var {
        let v = self.unary(a, softplus);
        self.push(v, Op::Softplus(a), self.rg(&[a]))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let v = self.unary(a, sigmoid);
        self.push(v, Op::Sigmoid(a), self.rg(&[a]))
    }

    pub fn exp(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::exp);
        ensure_finite(&v, "exp")?;
        Ok(self.push(v, Op::Exp(a), self.rg(&[a])))
    }

    pub fn log(&self, a: Var) -> Result<Var> {
        let v = self.unary(a, f64::ln);
        ensure_finite(&v, "log")?;
        Ok(self.push(v, Op::Log(a), self.rg(&[a])))
    }

    pub fn square(&self, a: Var) -> Var {
        let v = self.unary(a, |x| x * x);
        self.push(v, Op::Square(a), self.rg(&[a]))
    }

    pub fn sum(&self, a: Var) -> Var {
        let s = self.nodes.borrow()[a.0].value.sum();
        self.push(Tensor::scalar(s), Op::Sum(a), self.rg(&[a]))
    }

    pub fn mean(&self, a: Var) -> Var {
        let s = {
            let nodes = self.nodes.borrow();
            let t = &nodes[a.0].value;
            t.sum() / t.len().max(1) as f64
        };
        self.push(Tensor::scalar(s), Op::Mean(a), self.rg(&[a]))
    }

    /// Mean negative log-softmax of the labelled class, with max-subtracted log-sum-exp.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = {
            let nodes = self.nodes.borrow();
            let l = &nodes[logits.0].value;
            let (n, c) = l.dims2()?;
            if labels.len() != n {
                return Err(Error::Shape {
                    op: "softmax_cross_entropy",
                    lhs: l.shape().to_vec(),
                    rhs: vec![labels.len()],
                });
            }
            let mut probs = vec![0.0; n * c];
            let mut total = 0.0;
            for (i, &y) in labels.iter().enumerate() {
                if y >= c {
                    return Err(Error::Index {
                        what: "label",
                        index: y,
                        bound: c,
                    });
                }
                let row = l.row(i);
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for (p, &x) in probs[i * c..(i + 1) * c].iter_mut().zip(row) {
                    *p = (x - max).exp();
                    z += *p;
                }
                for p in &mut probs[i * c..(i + 1) * c] {
                    *p /= z;
                }
                total += max + z.ln() - row[y];
            }
            (total / n as f64, probs)
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite("softmax_cross_entropy".into()));
        }
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            self.rg(&[logits]),
        ))
    }

    pub fn reshape(&self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let v = Tensor::clone(&self.nodes.borrow()[a.0].value).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a), self.rg(&[a])))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let v = self.nodes.borrow()[a.0].value.transpose()?;
        Ok(self.push(v, Op::Transpose(a), self.rg(&[a])))
    }

    /// Contiguous range of the flattened source, reshaped to `shape`.
    pub fn slice(&self, src: Var, start: usize, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let len: usize = shape.iter().product();
        let v = {
            let nodes = self.nodes.borrow();
            let s = &nodes[src.0].value;
            if start + len > s.len() {
                return Err(Error::Shape {
                    op: "slice",
                    lhs: s.shape().to_vec(),
                    rhs: vec![start, len],
                });
            }
            Tensor::new(shape, s.data()[start..start + len].to_vec())?
        };
        Ok(self.push(v, Op::Slice { src, start }, self.rg(&[src])))
    }

    /// Picks flat elements of `src` by index into a vector.
    pub fn gather(&self, src: Var, index: &[usize]) -> Result<Var> {
        let v = {
            let nodes = self.nodes.borrow();
            let s = nodes[src.0].value.data();
            let mut out = Vec::with_capacity(index.len());
            for &i in index {
                let x = s.get(i).ok_or(Error::Index {
                    what: "gather",
                    index: i,
                    bound: s.len(),
                })?;
                out.push(*x);
            }
            Tensor::vector(out)
        };
        Ok(self.push(
            v,
            Op::Gather {
                src,
                index: index.to_vec(),
            },
            self.rg(&[src]),
        ))
    }

    /// Flattens and concatenates into a vector.
    pub fn concat(&self, parts: &[Var]) -> Var {
        let data = {
            let nodes = self.nodes.borrow();
            let mut data = Vec::with_capacity(parts.iter().map(|v| nodes[v.0].value.len()).sum());
            for v in parts {
                data.extend_from_slice(nodes[v.0].value.data());
            }
            data
        };
        self.push(Tensor::vector(data), Op::Concat(parts.to_vec()), self.rg(parts))
    }

    /// Stacks equally sized tensors as the rows of a matrix.
    pub fn stack(&self, rows: &[Var]) -> Result<Var> {
        if rows.is_empty() {
            return Err(contract("stack of zero tensors"));
        }
        let n = self.nodes.borrow()[rows[0].0].value.len();
        for r in rows {
            let len = self.nodes.borrow()[r.0].value.len();
            if len != n {
                return Err(Error::Shape {
                    op: "stack",
                    lhs: vec![n],
                    rhs: vec![len],
                });
            }
        }
        let flat = self.concat(rows);
        self.reshape(flat, vec![rows.len(), n])
    }

    /// Cross-correlation of an `N×H×W×Cin` input with a `kh×kw×Cin×Cout` kernel.
    pub fn conv2d(&self, input: Var, kernel: Var, stride: usize, padding: Padding) -> Result<Var> {
        if stride == 0 {
            return Err(contract("conv2d stride must be positive"));
        }
        let (geo, out) = {
            let nodes = self.nodes.borrow();
            let (x, k) = (&nodes[input.0].value, &nodes[kernel.0].value);
            let (&[n, h, w, c], &[kh, kw, kc, out_c]) = (x.shape(), k.shape()) else {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            };
            if kc != c {
                return Err(Error::Shape {
                    op: "conv2d",
                    lhs: x.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            }
            let (out_h, pad_h) = conv_extent(h, kh, stride, padding);
            let (out_w, pad_w) = conv_extent(w, kw, stride, padding);
            if kh > h + pad_h || kw > w + pad_w {
                return Err(Error::Shape {
                    op: "conv2d (kernel larger than padded input)",
                    lhs: x.shape().to_vec(),
                    rhs: k.shape().to_vec(),
                });
            }
            let geo = ConvGeometry {
                n,
                h,
                w,
                c,
                kh,
                kw,
                out_c,
                stride,
                pad_top: pad_h / 2,
                pad_left: pad_w / 2,
                out_h,
                out_w,
            };
            let cols = im2col(x.data(), &geo);
            let rows = n * out_h * out_w;
            let mut out = vec![0.0; rows * out_c];
            gemm(&cols, k.data(), rows, kh * kw * c, out_c, &mut out);
            (geo, Tensor::new(vec![n, out_h, out_w, out_c], out)?)
        };
        ensure_finite(&out, "conv2d")?;
        Ok(self.push(out, Op::Conv2d { input, kernel, geo }, self.rg(&[input, kernel])))
    }

    /// 2×2 max pooling with stride 2 over an `N×H×W×C` input.
    pub fn max_pool2(&self, input: Var) -> Result<Var> {
        let (out, argmax) = {
            let nodes = self.nodes.borrow();
            let x = &nodes[input.0].value;
            let &[n, h, w, c] = x.shape() else {
                return Err(contract(format!("max_pool2 expects rank 4, got {:?}", x.shape())));
            };
            let (oh, ow) = (h / 2, w / 2);
            if oh == 0 || ow == 0 {
                return Err(Error::Shape {
                    op: "max_pool2",
                    lhs: x.shape().to_vec(),
                    rhs: vec![2, 2],
                });
            }
            let mut out = vec![0.0; n * oh * ow * c];
            let mut argmax = vec![0; out.len()];
            let d = x.data();
            for b in 0..n {
                for i in 0..oh {
                    for j in 0..ow {
                        for ch in 0..c {
                            let mut best = usize::MAX;
                            for di in 0..2 {
                                for dj in 0..2 {
                                    let idx = ((b * h + 2 * i + di) * w + 2 * j + dj) * c + ch;
                                    if best == usize::MAX || d[idx] > d[best] {
                                        best = idx;
                                    }
                                }
                            }
                            let o = ((b * oh + i) * ow + j) * c + ch;
                            out[o] = d[best];
                            argmax[o] = best;
                        }
                    }
                }
            }
            (Tensor::new(vec![n, oh, ow, c], out)?, argmax)
        };
        Ok(self.push(out, Op::MaxPool2 { input, argmax }, self.rg(&[input])))
    }

    /// Records a scalar `value` that depends on `input` with known derivative `local`.
    pub fn scalar_with_grad(&self, input: Var, value: f64, local: Tensor) -> Result<Var> {
        let shape = self.shape(input);
        if local.shape() != shape.as_slice() {
            return Err(Error::Shape {
                op: "scalar_with_grad",
                lhs: shape,
                rhs: local.shape().to_vec(),
            });
        }
        if !value.is_finite() {
            return Err(Error::NonFinite("scalar_with_grad".into()));
        }
        Ok(self.push(Tensor::scalar(value), Op::LocalGrad { input, local }, self.rg(&[input])))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.0].value.len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape().to_vec(), 1.0));
        }

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let val = |v: Var| &nodes[v.0].value;
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Add(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.clone());
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        accumulate(&mut grads[b.0], g.map(|x| -x));
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], g);
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let gb = elementwise(&g, val(*b), |g, y| g * y);
                        accumulate(&mut grads[a.0], gb);
                    }
                    if needs(*b) {
                        let ga = elementwise(&g, val(*a), |g, x| g * x);
                        accumulate(&mut grads[b.0], ga);
                    }
                }
                Op::AddBias(x, b) => {
                    if needs(*b) {
                        let n = val(*b).len();
                        accumulate_with(&mut grads[b.0], val(*b).shape(), |gb| {
                            for row in g.data().chunks(n.max(1)) {
                                for (o, v) in gb.iter_mut().zip(row) {
                                    *o += v;
                                }
                            }
                        });
                    }
                    if needs(*x) {
                        accumulate(&mut grads[x.0], g);
                    }
                }
                Op::Scale(a, c) => {
                    let c = *c;
                    accumulate(&mut grads[a.0], g.map(|x| c * x));
                }
                Op::AddScalar(a) => accumulate(&mut grads[a.0], g),
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2()?;
                    let (_, n) = val(*b).dims2()?;
                    if needs(*a) {
                        accumulate_with(&mut grads[a.0], val(*a).shape(), |ga| {
                            gemm_nt(g.data(), val(*b).data(), m, n, k, ga)
                        });
                    }
                    if needs(*b) {
                        accumulate_with(&mut grads[b.0], val(*b).shape(), |gb| {
                            gemm_tn(val(*a).data(), g.data(), m, k, n, gb)
                        });
                    }
                }
                Op::Relu(a) => {
                    let ga = elementwise(&g, val(*a), |g, x| if x > 0.0 { g } else { 0.0 });
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Softplus(a) => {
                    let ga = elementwise(&g, val(*a), |g, x| g * sigmoid(x));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sigmoid(a) => {
                    let ga = elementwise(&g, &node.value, |g, s| g * s * (1.0 - s));
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Exp(a) => {
                    let ga = elementwise(&g, &node.value, |g, e| g * e);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Log(a) => {
                    let ga = elementwise(&g, val(*a), |g, x| g / x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Square(a) => {
                    let ga = elementwise(&g, val(*a), |g, x| 2.0 * g * x);
                    accumulate(&mut grads[a.0], ga);
                }
                Op::Sum(a) => {
                    let s = g.item();
                    accumulate_with(&mut grads[a.0], val(*a).shape(), |ga| {
                        ga.iter_mut().for_each(|x| *x += s)
                    });
                }
                Op::Mean(a) => {
                    let s = g.item() / val(*a).len().max(1) as f64;
                    accumulate_with(&mut grads[a.0], val(*a).shape(), |ga| {
                        ga.iter_mut().for_each(|x| *x += s)
                    });
                }
                Op::SoftmaxCrossEntropy { logits, labels, probs } => {
                    let (n, c) = val(*logits).dims2()?;
                    let s = g.item() / n as f64;
                    accumulate_with(&mut grads[logits.0], val(*logits).shape(), |gl| {
                        for (i, &y) in labels.iter().enumerate() {
                            for j in 0..c {
                                let onehot = if j == y { 1.0 } else { 0.0 };
                                gl[i * c + j] += s * (probs[i * c + j] - onehot);
                            }
                        }
                    });
                }
                Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], g.reshape(shape)?);
                }
                Op::Transpose(a) => accumulate(&mut grads[a.0], g.transpose()?),
                Op::Slice { src, start } => {
                    let start = *start;
                    accumulate_with(&mut grads[src.0], val(*src).shape(), |gs| {
                        for (o, v) in gs[start..start + g.len()].iter_mut().zip(g.data()) {
                            *o += v;
                        }
                    });
                }
                Op::Gather { src, index } => {
                    accumulate_with(&mut grads[src.0], val(*src).shape(), |gs| {
                        for (&i, v) in index.iter().zip(g.data()) {
                            gs[i] += v;
                        }
                    });
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = val(*p).len();
                        if needs(*p) {
                            let chunk = &g.data()[off..off + len];
                            accumulate_with(&mut grads[p.0], val(*p).shape(), |gp| {
                                for (o, v) in gp.iter_mut().zip(chunk) {
                                    *o += v;
                                }
                            });
                        }
                        off += len;
                    }
                }
                Op::Conv2d { input, kernel, geo } => {
                    let rows = geo.n * geo.out_h * geo.out_w;
                    let patch = geo.kh * geo.kw * geo.c;
                    if needs(*kernel) {
                        let cols = im2col(val(*input).data(), geo);
                        accumulate_with(&mut grads[kernel.0], val(*kernel).shape(), |gk| {
                            gemm_tn(&cols, g.data(), rows, patch, geo.out_c, gk)
                        });
                    }
                    if needs(*input) {
                        let mut dcols = vec![0.0; rows * patch];
                        gemm_nt(g.data(), val(*kernel).data(), rows, geo.out_c, patch, &mut dcols);
                        accumulate_with(&mut grads[input.0], val(*input).shape(), |gi| {
                            col2im(&dcols, geo, gi)
                        });
                    }
                }
                Op::MaxPool2 { input, argmax } => {
                    accumulate_with(&mut grads[input.0], val(*input).shape(), |gi| {
                        for (&idx, v) in argmax.iter().zip(g.data()) {
                            gi[idx] += v;
                        }
                    });
                }
                Op::LocalGrad { input, local } => {
                    let s = g.item();
                    accumulate_with(&mut grads[input.0], local.shape(), |gi| {
                        for (o, v) in gi.iter_mut().zip(local.data()) {
                            *o += s * v;
                        }
                    });
                }
            }
        }

        // Parameter leaves that the loss never reached get explicit zeros.
        for (i, node) in nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad {
                if grads[i].is_none() {
                    grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
                }
            } else {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn ensure_finite(value: &Tensor, op: &str) -> Result<()> {
    if value.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite(op.to_string()))
    }
}

fn elementwise(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g.data().iter().zip(x.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::new(x.shape().to_vec(), data).expect("matching shapes")
}

/// Output extent and total padding for one spatial axis.
fn conv_extent(input: usize, kernel: usize, stride: usize, padding: Padding) -> (usize, usize) {
    match padding {
        Padding::Valid => {
            if kernel > input {
                (0, 0)
            } else {
                ((input - kernel) / stride + 1, 0)
            }
        }
        Padding::Same => {
            let out = input.div_ceil(stride);
            let needed = ((out - 1) * stride + kernel).saturating_sub(input);
            (out, needed)
        }
    }
}

fn im2col(x: &[f64], g: &ConvGeometry) -> Vec<f64> {
    let patch = g.kh * g.kw * g.c;
    let mut cols = vec![0.0; g.n * g.out_h * g.out_w * patch];
    for b in 0..g.n {
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let row = ((b * g.out_h + oi) * g.out_w + oj) * patch;
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        let src = ((b * g.h + ii as usize) * g.w + jj as usize) * g.c;
                        let dst = row + (ki * g.kw + kj) * g.c;
                        cols[dst..dst + g.c].copy_from_slice(&x[src..src + g.c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], g: &ConvGeometry, out: &mut [f64]) {
    let patch = g.kh * g.kw * g.c;
    for b in 0..g.n {
        for oi in 0..g.out_h {
            for oj in 0..g.out_w {
                let row = ((b * g.out_h + oi) * g.out_w + oj) * patch;
                for ki in 0..g.kh {
                    let ii = (oi * g.stride + ki) as isize - g.pad_top as isize;
                    if ii < 0 || ii >= g.h as isize {
                        continue;
                    }
                    for kj in 0..g.kw {
                        let jj = (oj * g.stride + kj) as isize - g.pad_left as isize;
                        if jj < 0 || jj >= g.w as isize {
                            continue;
                        }
                        let dst = ((b * g.h + ii as usize) * g.w + jj as usize) * g.c;
                        let src = row + (ki * g.kw + kj) * g.c;
                        for (o, v) in out[dst..dst + g.c].iter_mut().zip(&cols[src..src + g.c]) {
                            *o += v;
                        }
                    }
                }
            }
        }
    }
}

/// Largest relative disagreement between the tape gradient of `f` at `x` and
/// central finite differences with step `h`.
///
/// Each coordinate contributes `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn gradient_check<'a, F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: Fn(&Tape<'a>, Var) -> Result<Var>,
{
    let tape = Tape::new();
    let xv = tape.param(x.clone());
    let out = f(&tape, xv)?;
    let analytic = tape.backward(out)?.wrt(xv).clone();

    let eval = |t: &Tensor| -> Result<f64> {
        let tape = Tape::new();
        let v = tape.constant(t.clone());
        let out = f(&tape, v)?;
        Ok(tape.item(out))
    };

    let mut worst: f64 = 0.0;
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic.data()[i];
        let rel = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// Uniform in [-2, 2] with every |x| >= 1e-3, away from ReLU kinks.
    fn kink_free(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = rng.random_range(-2.0..2.0);
                if v.abs() >= 1e-3 {
                    break v;
                }
            })
            .collect();
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn chain_rule_fixtures() {
        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(3.0));
        let loss = tape.square(x);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).item(), 6.0);

        let tape = Tape::new();
        let x = tape.param(Tensor::scalar(2.0));
        let y = tape.param(Tensor::scalar(5.0));
        let unused = tape.param(Tensor::scalar(1.0));
        let xy = tape.mul(x, y).unwrap();
        let loss = tape.add(xy, y).unwrap();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).item(), 5.0);
        assert_eq!(g.wrt(y).item(), 3.0);
        assert_eq!(g.wrt(unused).item(), 0.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn relu_values_and_kink() {
        let tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 2.5, 0.0]));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.5, 0.0]);
        let s = tape.sum(r);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_fixtures() {
        let tape = Tape::new();
        let l = tape.constant(Tensor::zeros(vec![1, 10]));
        let ce = tape.softmax_cross_entropy(l, &[3]).unwrap();
        assert!((tape.item(ce) - 10f64.ln()).abs() < 1e-12);

        let mut sat = Tensor::zeros(vec![1, 10]);
        sat.data_mut()[4] = 1000.0;
        let l = tape.constant(sat);
        let ce = tape.softmax_cross_entropy(l, &[4]).unwrap();
        assert!(tape.item(ce) < 1e-9);

        let l = tape.constant(Tensor::zeros(vec![1, 3]));
        assert!(matches!(
            tape.softmax_cross_entropy(l, &[3]),
            Err(Error::Index { .. })
        ));
    }

    #[test]
    fn cross_entropy_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = kink_free(vec![3, 4], &mut rng);
        let err = gradient_check(|t, v| t.softmax_cross_entropy(v, &[0, 3, 1]), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "rel err {err}");
    }

    #[test]
    fn gradient_check_of_sum_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = kink_free(vec![5], &mut rng);
        let err = gradient_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-9, "{err}");
        let err = gradient_check(|t, v| Ok(t.sum(t.square(v))), &x, 1e-5).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn smooth_primitives_pass_gradient_checks() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = kink_free(vec![3, 4], &mut rng);
        let w = kink_free(vec![4, 2], &mut rng);
        let b = kink_free(vec![4], &mut rng);
        let pos = x.map(|v| v.abs() + 0.5);

        let cases: Vec<(&str, Box<dyn Fn(&Tape, Var) -> Result<Var>>, &Tensor)> = vec![
            ("softplus", Box::new(|t, v| Ok(t.sum(t.softplus(v)))), &x),
            ("sigmoid", Box::new(|t, v| Ok(t.sum(t.sigmoid(v)))), &x),
            ("exp", Box::new(|t, v| Ok(t.sum(t.exp(v)?))), &x),
            ("log", Box::new(|t, v| Ok(t.sum(t.log(v)?))), &pos),
            ("square", Box::new(|t, v| Ok(t.mean(t.square(v)))), &x),
            ("scale", Box::new(|t, v| Ok(t.sum(t.add_scalar(t.scale(v, -1.7), 0.3)))), &x),
            (
                "mul",
                Box::new(|t, v| {
                    let s = t.square(v);
                    Ok(t.sum(t.mul(v, s)?))
                }),
                &x,
            ),
            (
                "matmul-left",
                Box::new(|t, v| {
                    let wv = t.constant(w.clone());
                    let y = t.matmul(v, wv)?;
                    Ok(t.sum(t.square(y)))
                }),
                &x,
            ),
            (
                "matmul-right",
                Box::new(|t, v| {
                    let xv = t.constant(x.clone());
                    let y = t.matmul(xv, v)?;
                    Ok(t.sum(t.square(y)))
                }),
                &w,
            ),
            (
                "add_bias",
                Box::new(|t, v| {
                    let xv = t.constant(x.clone());
                    let y = t.add_bias(xv, v)?;
                    Ok(t.sum(t.square(y)))
                }),
                &b,
            ),
            (
                "slice-concat-stack",
                Box::new(|t, v| {
                    let a = t.slice(v, 2, vec![2, 3])?;
                    let c = t.slice(v, 0, vec![6])?;
                    let s = t.stack(&[a, c])?;
                    let tr = t.transpose(s)?;
                    let cat = t.concat(&[tr, v]);
                    Ok(t.sum(t.square(cat)))
                }),
                &x,
            ),
            (
                "gather",
                Box::new(|t, v| {
                    let g = t.gather(v, &[5, 0, 5, 3])?;
                    Ok(t.sum(t.square(g)))
                }),
                &x,
            ),
        ];
        for (name, f, input) in cases {
            let err = gradient_check(|t, v| f(t, v), input, 1e-5).unwrap();
            assert!(err < 1e-6, "{name}: rel err {err}");
        }
    }

    #[test]
    fn relu_gradient_away_from_kinks() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = kink_free(vec![20], &mut rng);
        let err = gradient_check(|t, v| Ok(t.sum(t.square(t.relu(v)))), &x, 1e-5).unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn conv2d_fixtures() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::new(vec![1, 2, 2, 1], vec![1., 2., 3., 4.]).unwrap());
        let k = tape.constant(Tensor::full(vec![2, 2, 1, 1], 1.0));
        let y = tape.conv2d(x, k, 1, Padding::Valid).unwrap();
        assert_eq!(tape.shape(y), vec![1, 1, 1, 1]);
        assert_eq!(tape.item(y), 10.0);

        let big = tape.constant(Tensor::zeros(vec![3, 3, 1, 1]));
        assert!(tape.conv2d(x, big, 1, Padding::Valid).is_err());

        // identity 1x1 kernel over two channels
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = Tensor::randn(vec![2, 3, 3, 2], 0.0, 1.0, &mut rng);
        let xi = tape.constant(img.clone());
        let eye = tape.constant(Tensor::eye(2).reshape(vec![1, 1, 2, 2]).unwrap());
        let y = tape.conv2d(xi, eye, 1, Padding::Same).unwrap();
        assert_eq!(*tape.value(y), img);
    }

    #[test]
    fn conv2d_and_pool_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = kink_free(vec![2, 6, 5, 2], &mut rng);
        let ker = kink_free(vec![3, 3, 2, 3], &mut rng);
        for (stride, pad) in [(1, Padding::Valid), (2, Padding::Same), (1, Padding::Same)] {
            let k2 = ker.clone();
            let err = gradient_check(
                |t, v| {
                    let k = t.constant(k2.clone());
                    let y = t.conv2d(v, k, stride, pad)?;
                    Ok(t.sum(t.square(y)))
                },
                &img,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "input grad {stride} {pad:?}: {err}");
            let i2 = img.clone();
            let err = gradient_check(
                |t, v| {
                    let x = t.constant(i2.clone());
                    let y = t.conv2d(x, v, stride, pad)?;
                    Ok(t.sum(t.square(y)))
                },
                &ker,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-6, "kernel grad {stride} {pad:?}: {err}");
        }
        let err = gradient_check(
            |t, v| {
                let p = t.max_pool2(v)?;
                Ok(t.sum(t.square(p)))
            },
            &img,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "pool: {err}");
    }

    #[test]
    fn pool_ties_route_to_first_index() {
        let tape = Tape::new();
        let x = tape.param(Tensor::full(vec![1, 2, 2, 1], 1.0));
        let p = tape.max_pool2(x).unwrap();
        let s = tape.sum(p);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(x).data(), &[1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x0 = kink_free(vec![6], &mut rng);
        let grad_of = |which: u8| {
            let tape = Tape::new();
            let x = tape.param(x0.clone());
            let a = tape.sum(tape.square(x));
            let b = tape.sum(tape.softplus(x));
            let loss = match which {
                0 => a,
                1 => b,
                _ => tape.add(a, b).unwrap(),
            };
            tape.backward(loss).unwrap().wrt(x).clone()
        };
        let (ga, gb, gab) = (grad_of(0), grad_of(1), grad_of(2));
        for i in 0..6 {
            assert!((ga.data()[i] + gb.data()[i] - gab.data()[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn forward_is_bit_identical_across_calls() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let a = Tensor::randn(vec![17, 33], 0.0, 1.0, &mut rng);
        let b = Tensor::randn(vec![33, 9], 0.0, 1.0, &mut rng);
        let run = || {
            let t = Tape::new();
            let (x, y) = (t.constant(a.clone()), t.constant(b.clone()));
            let z = t.matmul(x, y).unwrap();
            let r = t.softplus(z);
            let v = t.value(r).clone();
            v
        };
        assert_eq!(run().data(), run().data());
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::scalar(0.0));
        assert!(matches!(tape.log(x), Err(Error::NonFinite(_))));
    }
}
