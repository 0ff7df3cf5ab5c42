//! Reverse-mode differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape is always topologically
//! sorted. Every backward rule is expressed with tape ops, which lets
//! [`Tape::grad`] record its own work (`create_graph`) and be differentiated
//! again. The single exception is [`Var::laplace_bits`], whose partials are
//! recorded as constants: its gradient is exact, its second derivative is not.

use std::cell::{Cell, RefCell};
use std::sync::Arc;

use super::kernels::{self, ConvGeom};
use super::laplace;
use super::tensor::{numel_of, Real, Tensor};
use crate::error::{shape_err, Error, Result};

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Constant,
    Add,
    Sub,
    Mul,
    Div,
    Neg,
    Scale(f64),
    Offset,
    Exp,
    Ln,
    Pow(f64),
    Relu,
    Abs,
    ClampMin(f64),
    Ste,
    Matmul,
    Transpose,
    SumMid { outer: usize, mid: usize, inner: usize },
    ExpandMid { outer: usize, mid: usize, inner: usize },
    Reshape,
    Conv(ConvGeom),
    ConvInputAdj(ConvGeom),
    ConvKernelAdj(ConvGeom),
    AvgPool { n: usize, h: usize, w: usize, c: usize },
    AvgPoolAdj { n: usize, h: usize, w: usize, c: usize },
    Gather { idx: Arc<[isize]> },
    ScatterAdd { idx: Arc<[isize]> },
    Concat,
    LaplaceBits { width: f64 },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op,
    parents: Vec<usize>,
    requires_grad: bool,
}

/// Operation recorder. One tape per forward/backward pass; not shared across threads.
pub struct Tape<F: Real> {
    nodes: RefCell<Vec<Node<F>>>,
    recording: Cell<bool>,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, F: Real> {
    tape: &'t Tape<F>,
    id: usize,
}

impl<F: Real> std::fmt::Debug for Var<'_, F> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{} {:?}", self.id, self.value())
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            recording: Cell::new(true),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_raw(value, Op::Leaf, vec![], true)
    }

    /// A value that never receives gradient.
    pub fn constant(&self, value: Tensor<F>) -> Var<'_, F> {
        self.push_raw(value, Op::Constant, vec![], false)
    }

    pub fn scalar(&self, value: F) -> Var<'_, F> {
        self.constant(Tensor::scalar(value))
    }

    fn push_raw(&self, value: Tensor<F>, op: Op, parents: Vec<usize>, requires_grad: bool) -> Var<'_, F> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node {
            value,
            op,
            parents,
            requires_grad,
        });
        Var { tape: self, id }
    }

    fn push(&self, value: Tensor<F>, op: Op, parents: &[Var<'_, F>]) -> Var<'_, F> {
        let requires_grad = self.recording.get() && {
            let nodes = self.nodes.borrow();
            parents.iter().any(|p| nodes[p.id].requires_grad)
        };
        self.push_raw(value, op, parents.iter().map(|p| p.id).collect(), requires_grad)
    }

    fn var(&self, id: usize) -> Var<'_, F> {
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Tensor<F> {
        self.nodes.borrow()[id].value.clone()
    }

    /// Flat concatenation of several values into one rank-1 value.
    pub fn concat(&self, parts: &[Var<'_, F>]) -> Result<Var<'_, F>> {
        if parts.is_empty() {
            return Err(shape_err("concat", "no inputs"));
        }
        let mut data = Vec::new();
        for p in parts {
            data.extend_from_slice(p.value().data());
        }
        let n = data.len();
        Ok(self.push(Tensor::from_parts(vec![n], data), Op::Concat, parts))
    }

    /// Gradients of the scalar `loss` with respect to `wrt`.
    ///
    /// With `create_graph` the backward computation is itself recorded and the
    /// returned values can be differentiated again. Inputs that `loss` does not
    /// depend on get a zero gradient.
    pub fn grad<'t>(&'t self, loss: Var<'t, F>, wrt: &[Var<'t, F>], create_graph: bool) -> Result<Vec<Var<'t, F>>> {
        let loss_shape = loss.shape();
        if numel_of(&loss_shape) != 1 {
            return Err(shape_err("grad", format!("loss must be scalar, got {loss_shape:?}")));
        }
        let end = loss.id;
        let lo = wrt.iter().map(|w| w.id).min().unwrap_or(end).min(end);

        // needs[i]: node i lies on a path from some wrt input.
        let mut needs = vec![false; end + 1 - lo];
        {
            let nodes = self.nodes.borrow();
            for w in wrt {
                if w.id <= end {
                    needs[w.id - lo] = true;
                }
            }
            for i in lo..=end {
                if needs[i - lo] || !nodes[i].requires_grad {
                    continue;
                }
                needs[i - lo] = nodes[i].parents.iter().any(|&p| p >= lo && needs[p - lo]);
            }
        }

        let saved = self.recording.replace(create_graph);
        let result = (|| {
            let mut adj: Vec<Option<usize>> = vec![None; end + 1 - lo];
            adj[end - lo] = Some(self.constant(Tensor::ones(loss_shape.clone())).id);
            for i in (lo..=end).rev() {
                if !needs[i - lo] {
                    continue;
                }
                let Some(g) = adj[i - lo] else { continue };
                let (op, parents) = {
                    let nodes = self.nodes.borrow();
                    (nodes[i].op.clone(), nodes[i].parents.clone())
                };
                if parents.is_empty() {
                    continue;
                }
                let mask: Vec<bool> = parents.iter().map(|&p| p >= lo && needs[p - lo]).collect();
                let grads = self.backward(&op, i, &parents, self.var(g), &mask)?;
                for ((&p, gp), &m) in parents.iter().zip(grads).zip(&mask) {
                    let (Some(gp), true) = (gp, m) else { continue };
                    let slot = &mut adj[p - lo];
                    *slot = Some(match *slot {
                        None => gp.id,
                        Some(prev) => self.var(prev).add(gp)?.id,
                    });
                }
            }
            Ok(wrt
                .iter()
                .map(|w| match (w.id <= end).then(|| adj[w.id - lo]).flatten() {
                    Some(id) => self.var(id),
                    None => self.constant(Tensor::zeros(w.shape())),
                })
                .collect())
        })();
        self.recording.set(saved);
        result
    }

    /// Plain gradient values (no graph recording).
    pub fn gradients<'t>(&'t self, loss: Var<'t, F>, wrt: &[Var<'t, F>]) -> Result<Vec<Tensor<F>>> {
        Ok(self.grad(loss, wrt, false)?.into_iter().map(|v| v.value()).collect())
    }

    fn backward<'t>(
        &'t self,
        op: &Op,
        id: usize,
        parents: &[usize],
        g: Var<'t, F>,
        need: &[bool],
    ) -> Result<Vec<Option<Var<'t, F>>>> {
        let p = |k: usize| self.var(parents[k]);
        let out = self.var(id);
        let want = |k: usize| need[k];
        let mask_const = |pred: &dyn Fn(F) -> F| -> Var<'t, F> {
            let x = self.value_of(parents[0]);
            self.constant(x.map(pred))
        };
        Ok(match op {
            Op::Leaf | Op::Constant => vec![],
            Op::Add => vec![Some(g), Some(g)],
            Op::Sub => vec![Some(g), Some(g.neg()?)],
            Op::Mul => vec![
                if want(0) { Some(g.mul(p(1))?) } else { None },
                if want(1) { Some(g.mul(p(0))?) } else { None },
            ],
            Op::Div => vec![
                if want(0) { Some(g.div(p(1))?) } else { None },
                if want(1) { Some(g.mul(out)?.div(p(1))?.neg()?) } else { None },
            ],
            Op::Neg => vec![Some(g.neg()?)],
            Op::Scale(c) => vec![Some(g.scale(F::of(*c))?)],
            Op::Offset | Op::Ste | Op::Reshape => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                vec![Some(g.reshape(&shape)?)]
            }
            Op::Exp => vec![Some(g.mul(out)?)],
            Op::Ln => vec![Some(g.div(p(0))?)],
            Op::Pow(e) => vec![Some(g.mul(p(0).pow(F::of(*e - 1.0))?.scale(F::of(*e))?)?)],
            Op::Relu => vec![Some(g.mul(mask_const(&|x| if x > F::zero() { F::one() } else { F::zero() }))?)],
            Op::Abs => vec![Some(g.mul(mask_const(&|x| {
                if x > F::zero() {
                    F::one()
                } else if x < F::zero() {
                    -F::one()
                } else {
                    F::zero()
                }
            }))?)],
            Op::ClampMin(c) => {
                let c = F::of(*c);
                vec![Some(g.mul(mask_const(&|x| if x > c { F::one() } else { F::zero() }))?)]
            }
            Op::Matmul => vec![
                if want(0) { Some(g.matmul(p(1).transpose()?)?) } else { None },
                if want(1) { Some(p(0).transpose()?.matmul(g)?) } else { None },
            ],
            Op::Transpose => vec![Some(g.transpose()?)],
            Op::SumMid { outer, mid, inner } => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                vec![Some(g.expand_mid(*outer, *mid, *inner, &shape)?)]
            }
            Op::ExpandMid { outer, mid, inner } => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                vec![Some(g.sum_mid(*outer, *mid, *inner, &shape)?)]
            }
            Op::Conv(geom) => vec![
                if want(0) { Some(conv_op(self, Op::ConvInputAdj(*geom), g, p(1))?) } else { None },
                if want(1) { Some(conv_op(self, Op::ConvKernelAdj(*geom), p(0), g)?) } else { None },
            ],
            Op::ConvInputAdj(geom) => vec![
                if want(0) { Some(conv_op(self, Op::Conv(*geom), g, p(1))?) } else { None },
                if want(1) { Some(conv_op(self, Op::ConvKernelAdj(*geom), g, p(0))?) } else { None },
            ],
            Op::ConvKernelAdj(geom) => vec![
                if want(0) { Some(conv_op(self, Op::ConvInputAdj(*geom), p(1), g)?) } else { None },
                if want(1) { Some(conv_op(self, Op::Conv(*geom), p(0), g)?) } else { None },
            ],
            Op::AvgPool { n, h, w, c } => {
                let data = kernels::avg_pool2_adjoint(g.value().data(), *n, *h, *w, *c);
                let t = Tensor::from_parts(vec![*n, *h, *w, *c], data);
                let op = Op::AvgPoolAdj { n: *n, h: *h, w: *w, c: *c };
                vec![Some(self.push(t, op, &[g]))]
            }
            Op::AvgPoolAdj { n, h, w, c } => {
                let data = kernels::avg_pool2(g.value().data(), *n, *h, *w, *c);
                let t = Tensor::from_parts(vec![*n, *h / 2, *w / 2, *c], data);
                let op = Op::AvgPool { n: *n, h: *h, w: *w, c: *c };
                vec![Some(self.push(t, op, &[g]))]
            }
            Op::Gather { idx } => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                vec![Some(g.scatter_add(idx.clone(), &shape)?)]
            }
            Op::ScatterAdd { idx } => {
                let shape = self.value_of(parents[0]).shape().to_vec();
                vec![Some(g.gather(idx.clone(), &shape)?)]
            }
            Op::Concat => {
                let mut offset = 0isize;
                let mut grads = Vec::with_capacity(parents.len());
                for (k, &pid) in parents.iter().enumerate() {
                    let shape = self.value_of(pid).shape().to_vec();
                    let n = numel_of(&shape) as isize;
                    grads.push(if want(k) {
                        let idx: Arc<[isize]> = (offset..offset + n).collect();
                        Some(g.gather(idx, &shape)?)
                    } else {
                        None
                    });
                    offset += n;
                }
                grads
            }
            Op::LaplaceBits { width } => {
                let (x, mu, b) = (self.value_of(parents[0]), self.value_of(parents[1]), self.value_of(parents[2]));
                let width = F::of(*width);
                let scale = -F::one() / F::of(std::f64::consts::LN_2);
                let n = x.numel();
                let (mut dx, mut dmu, mut db) = (Vec::with_capacity(n), Vec::with_capacity(n), Vec::with_capacity(n));
                for i in 0..n {
                    let (a, m, s) = laplace::bin_log_prob_grad(x.data()[i], mu.data()[i], b.data()[i], width);
                    dx.push(a * scale);
                    dmu.push(m * scale);
                    db.push(s * scale);
                }
                let shape = x.shape().to_vec();
                let mut out = Vec::with_capacity(3);
                for (k, d) in [dx, dmu, db].into_iter().enumerate() {
                    out.push(if want(k) {
                        Some(g.mul(self.constant(Tensor::from_parts(shape.clone(), d)))?)
                    } else {
                        None
                    });
                }
                out
            }
        })
    }
}

fn conv_op<'t, F: Real>(tape: &'t Tape<F>, op: Op, a: Var<'t, F>, b: Var<'t, F>) -> Result<Var<'t, F>> {
    let (av, bv) = (a.value(), b.value());
    let (data, shape) = match &op {
        Op::Conv(g) => (
            kernels::conv_forward(g, av.data(), bv.data()),
            vec![g.batch, g.height, g.width, g.cout],
        ),
        Op::ConvInputAdj(g) => (
            kernels::conv_input_adjoint(g, av.data(), bv.data()),
            vec![g.batch, g.height, g.width, g.cin],
        ),
        Op::ConvKernelAdj(g) => (
            kernels::conv_kernel_adjoint(g, av.data(), bv.data()),
            vec![g.kh, g.kw, g.cin, g.cout],
        ),
        _ => unreachable!("not a convolution op"),
    };
    Ok(tape.push(Tensor::from_parts(shape, data), op, &[a, b]))
}

impl<'t, F: Real> Var<'t, F> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<F> {
        self.tape
    }

    pub fn value(&self) -> Tensor<F> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn numel(&self) -> usize {
        self.tape.nodes.borrow()[self.id].value.numel()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> Result<F> {
        self.value().item()
    }

    fn unary(self, op: Op, f: impl Fn(F) -> F) -> Result<Self> {
        let v = self.value().map(f);
        Ok(self.tape.push(v, op, &[self]))
    }

    fn binary(self, other: Self, op: Op, name: &'static str, f: impl Fn(F, F) -> F) -> Result<Self> {
        let v = self.value().zip_with(&other.value(), name, f)?;
        Ok(self.tape.push(v, op, &[self, other]))
    }

    pub fn add(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Add, "add", |a, b| a + b)
    }

    pub fn sub(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Sub, "sub", |a, b| a - b)
    }

    pub fn mul(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Mul, "mul", |a, b| a * b)
    }

    pub fn div(self, other: Self) -> Result<Self> {
        self.binary(other, Op::Div, "div", |a, b| a / b)
    }

    pub fn neg(self) -> Result<Self> {
        self.unary(Op::Neg, |a| -a)
    }

    pub fn scale(self, c: F) -> Result<Self> {
        self.unary(Op::Scale(c.as_f64()), |a| a * c)
    }

    pub fn offset(self, c: F) -> Result<Self> {
        self.unary(Op::Offset, |a| a + c)
    }

    pub fn exp(self) -> Result<Self> {
        self.unary(Op::Exp, |a| a.exp())
    }

    pub fn ln(self) -> Result<Self> {
        self.unary(Op::Ln, |a| a.ln())
    }

    pub fn pow(self, e: F) -> Result<Self> {
        self.unary(Op::Pow(e.as_f64()), |a| a.powf(e))
    }

    pub fn square(self) -> Result<Self> {
        self.mul(self)
    }

    /// `max(x, 0)`; the subgradient at 0 is 0.
    pub fn relu(self) -> Result<Self> {
        self.unary(Op::Relu, |a| if a > F::zero() { a } else { F::zero() })
    }

    pub fn abs(self) -> Result<Self> {
        self.unary(Op::Abs, |a| a.abs())
    }

    /// `max(x, c)`.
    pub fn clamp_min(self, c: F) -> Result<Self> {
        self.unary(Op::ClampMin(c.as_f64()), |a| if a > c { a } else { c })
    }

    /// Straight-through rounding: forward `floor(x + 1/2)`, identity backward.
    pub fn round_ste(self) -> Result<Self> {
        let half = F::of(0.5);
        self.unary(Op::Ste, |a| (a + half).floor())
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Self> {
        let v = self.value().reshape(shape.to_vec())?;
        Ok(self.tape.push(v, Op::Reshape, &[self]))
    }

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(self, other: Self) -> Result<Self> {
        let (a, b) = (self.value(), other.value());
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let data = kernels::matmul(a.data(), b.data(), m, k, n);
        Ok(self.tape.push(Tensor::from_parts(vec![m, n], data), Op::Matmul, &[self, other]))
    }

    pub fn transpose(self) -> Result<Self> {
        let a = self.value();
        let s = a.shape();
        if s.len() != 2 {
            return Err(shape_err("transpose", format!("rank-2 input required, got {s:?}")));
        }
        let (rows, cols) = (s[0], s[1]);
        let data = kernels::transpose(a.data(), rows, cols);
        Ok(self.tape.push(Tensor::from_parts(vec![cols, rows], data), Op::Transpose, &[self]))
    }

    /// Views the value as `[outer, mid, inner]` and sums the middle axis.
    pub fn sum_mid(self, outer: usize, mid: usize, inner: usize, out_shape: &[usize]) -> Result<Self> {
        let a = self.value();
        if outer * mid * inner != a.numel() || numel_of(out_shape) != outer * inner {
            return Err(shape_err(
                "sum_mid",
                format!("{:?} as [{outer},{mid},{inner}] -> {out_shape:?}", a.shape()),
            ));
        }
        let data = kernels::sum_mid(a.data(), outer, mid, inner);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape.to_vec(), data),
            Op::SumMid { outer, mid, inner },
            &[self],
        ))
    }

    /// Inverse layout of [`Var::sum_mid`]: repeats an `[outer, inner]` value `mid` times.
    pub fn expand_mid(self, outer: usize, mid: usize, inner: usize, out_shape: &[usize]) -> Result<Self> {
        let a = self.value();
        if outer * inner != a.numel() || numel_of(out_shape) != outer * mid * inner {
            return Err(shape_err(
                "expand_mid",
                format!("{:?} as [{outer},{inner}] x{mid} -> {out_shape:?}", a.shape()),
            ));
        }
        let data = kernels::expand_mid(a.data(), outer, mid, inner);
        Ok(self.tape.push(
            Tensor::from_parts(out_shape.to_vec(), data),
            Op::ExpandMid { outer, mid, inner },
            &[self],
        ))
    }

    pub fn sum(self) -> Result<Self> {
        let n = self.numel();
        self.sum_mid(1, n, 1, &[1])
    }

    pub fn mean(self) -> Result<Self> {
        let n = self.numel();
        self.sum()?.scale(F::one() / F::of(n as f64))
    }

    /// Broadcasts a single-element value to `shape`.
    pub fn broadcast(self, shape: &[usize]) -> Result<Self> {
        self.expand_mid(1, numel_of(shape), 1, shape)
    }

    /// Adds a per-channel vector `[c]` to a value whose last dim is `c`.
    pub fn add_channel_bias(self, bias: Self) -> Result<Self> {
        let shape = self.shape();
        let c = *shape.last().ok_or_else(|| shape_err("bias", "empty shape"))?;
        if bias.numel() != c {
            return Err(shape_err("bias", format!("bias {:?} for value {shape:?}", bias.shape())));
        }
        let rows = numel_of(&shape) / c;
        self.add(bias.expand_mid(1, rows, c, &shape)?)
    }

    /// Same-padded 2-D convolution: NHWC input, `[kh, kw, cin, cout]` kernel, odd kernel sides.
    pub fn conv2d(self, kernel: Self) -> Result<Self> {
        let (x, k) = (self.value(), kernel.value());
        let (sx, sk) = (x.shape(), k.shape());
        if sx.len() != 4 || sk.len() != 4 {
            return Err(shape_err("conv2d", format!("input {sx:?}, kernel {sk:?}: need rank 4")));
        }
        if sk[0] % 2 == 0 || sk[1] % 2 == 0 {
            return Err(shape_err("conv2d", format!("kernel sides must be odd, got {}x{}", sk[0], sk[1])));
        }
        if sx[3] != sk[2] {
            return Err(shape_err(
                "conv2d",
                format!("input has {} channels, kernel expects {}", sx[3], sk[2]),
            ));
        }
        let geom = ConvGeom {
            batch: sx[0],
            height: sx[1],
            width: sx[2],
            cin: sx[3],
            cout: sk[3],
            kh: sk[0],
            kw: sk[1],
        };
        conv_op(self.tape, Op::Conv(geom), self, kernel)
    }

    /// 2x2 average pooling with stride 2 over NHWC; spatial dims must be even.
    pub fn avg_pool2(self) -> Result<Self> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 4 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(shape_err("avg_pool2", format!("need NHWC with even H, W; got {s:?}")));
        }
        let (n, h, w, c) = (s[0], s[1], s[2], s[3]);
        let data = kernels::avg_pool2(x.data(), n, h, w, c);
        Ok(self.tape.push(
            Tensor::from_parts(vec![n, h / 2, w / 2, c], data),
            Op::AvgPool { n, h, w, c },
            &[self],
        ))
    }

    /// `out[i] = self[idx[i]]` over the flattened value, 0 where `idx[i] < 0`.
    pub fn gather(self, idx: Arc<[isize]>, out_shape: &[usize]) -> Result<Self> {
        let x = self.value();
        if numel_of(out_shape) != idx.len() {
            return Err(shape_err("gather", format!("{} indices for shape {out_shape:?}", idx.len())));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.numel() as isize) {
            return Err(shape_err("gather", format!("index {bad} out of range {}", x.numel())));
        }
        let data = kernels::gather(x.data(), &idx);
        Ok(self.tape.push(Tensor::from_parts(out_shape.to_vec(), data), Op::Gather { idx }, &[self]))
    }

    /// Adjoint of [`Var::gather`].
    pub fn scatter_add(self, idx: Arc<[isize]>, out_shape: &[usize]) -> Result<Self> {
        let g = self.value();
        let len = numel_of(out_shape);
        if g.numel() != idx.len() || idx.iter().any(|&i| i >= len as isize) {
            return Err(shape_err("scatter_add", format!("{} indices into {out_shape:?}", idx.len())));
        }
        let data = kernels::scatter_add(g.data(), &idx, len);
        Ok(self.tape.push(Tensor::from_parts(out_shape.to_vec(), data), Op::ScatterAdd { idx }, &[self]))
    }

    /// Elementwise code length in bits of `self` under Laplace(`mu`, `b`)
    /// integrated over bins of `width` centred on each value.
    pub fn laplace_bits(self, mu: Self, b: Self, width: F) -> Result<Self> {
        let (x, m, s) = (self.value(), mu.value(), b.value());
        if x.shape() != m.shape() || x.shape() != s.shape() {
            return Err(shape_err(
                "laplace_bits",
                format!("{:?}, {:?}, {:?}", x.shape(), m.shape(), s.shape()),
            ));
        }
        if s.data().iter().any(|&v| !(v > F::zero())) {
            return Err(Error::InvalidArgument("laplace scale must be positive".into()));
        }
        let data = (0..x.numel())
            .map(|i| laplace::bin_bits(x.data()[i], m.data()[i], s.data()[i], width))
            .collect();
        Ok(self.tape.push(
            Tensor::from_parts(x.shape().to_vec(), data),
            Op::LaplaceBits { width: width.as_f64() },
            &[self, mu, b],
        ))
    }
}
