use std::cell::RefCell;
use std::collections::BTreeMap;

use super::gemm::{gemm, Mat};
use super::{conv_out_len, Tensor};
use crate::error::{Error, Result};

/// Identifier of a trainable parameter; gradients are keyed by it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

#[derive(Clone, Copy, Debug)]
enum Op {
    Leaf(Option<ParamId>),
    MatMul { a: usize, b: usize, b_transposed: bool },
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddBias { x: usize, bias: usize },
    Relu(usize),
    Tanh(usize),
    Square(usize),
    Abs(usize),
    Sum(usize),
    Mean(usize),
    Reshape(usize),
    Conv1d { x: usize, k: usize, stride: usize },
    Conv2d { x: usize, k: usize, stride: usize },
    BatchedDot { a: usize, t: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Default)]
struct Inner {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Records a forward computation for one reverse pass.
///
/// A tape is single-use: [`Var::backward`] consumes it.
#[derive(Default)]
pub struct Tape {
    inner: RefCell<Inner>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

/// Gradients of a scalar loss with respect to every parameter leaf on the tape.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    map: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.map.get(&id)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.map.iter().map(|(k, v)| (*k, v))
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, value: Tensor, op: Op) -> usize {
        let mut inner = self.inner.borrow_mut();
        inner.nodes.push(Node { value, op });
        inner.nodes.len() - 1
    }

    fn var(&self, id: usize) -> Var<'_> {
        Var { tape: self, id }
    }

    /// Records an untracked input.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        let id = self.push(value, Op::Leaf(None));
        self.var(id)
    }

    /// Records a trainable parameter. Registering the same id twice sums the
    /// two gradient contributions.
    pub fn param(&self, id: ParamId, value: Tensor) -> Var<'_> {
        let node = self.push(value, Op::Leaf(Some(id)));
        self.var(node)
    }

    pub fn len(&self) -> usize {
        self.inner.borrow().nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn binary_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() {
        Ok(a.shape().to_vec())
    } else if b.len() == 1 {
        Ok(a.shape().to_vec())
    } else if a.len() == 1 {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        })
    }
}

fn broadcast_zip(a: &Tensor, b: &Tensor, shape: Vec<usize>, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let n: usize = shape.iter().product();
    let (ad, bd) = (a.data(), b.data());
    let data = (0..n)
        .map(|i| {
            let x = if ad.len() == 1 { ad[0] } else { ad[i] };
            let y = if bd.len() == 1 { bd[0] } else { bd[i] };
            f(x, y)
        })
        .collect();
    Tensor { shape, data }
}

/// `[N, C, L]` view of a rank-2 or rank-3 conv1d input.
fn conv1d_dims(x: &[usize]) -> Option<(usize, usize, usize, bool)> {
    match *x {
        [c, l] => Some((1, c, l, false)),
        [n, c, l] => Some((n, c, l, true)),
        _ => None,
    }
}

fn conv2d_dims(x: &[usize]) -> Option<(usize, usize, usize, usize, bool)> {
    match *x {
        [c, h, w] => Some((1, c, h, w, false)),
        [n, c, h, w] => Some((n, c, h, w, true)),
        _ => None,
    }
}

struct Conv1dGeom {
    n: usize,
    c: usize,
    l: usize,
    o: usize,
    w: usize,
    stride: usize,
    out: usize,
}

impl Conv1dGeom {
    fn im2col(&self, x: &[f64], sample: usize, cols: &mut [f64]) {
        let base = sample * self.c * self.l;
        for ch in 0..self.c {
            for k in 0..self.w {
                let row = (ch * self.w + k) * self.out;
                let src = base + ch * self.l + k;
                for j in 0..self.out {
                    cols[row + j] = x[src + j * self.stride];
                }
            }
        }
    }

    fn col2im_add(&self, cols: &[f64], sample: usize, dx: &mut [f64]) {
        let base = sample * self.c * self.l;
        for ch in 0..self.c {
            for k in 0..self.w {
                let row = (ch * self.w + k) * self.out;
                let dst = base + ch * self.l + k;
                for j in 0..self.out {
                    dx[dst + j * self.stride] += cols[row + j];
                }
            }
        }
    }
}

struct Conv2dGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    oh: usize,
    ow: usize,
}

impl Conv2dGeom {
    fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn for_each(&self, sample: usize, mut f: impl FnMut(usize, usize)) {
        let base = sample * self.c * self.h * self.w;
        let px = self.pixels();
        for ch in 0..self.c {
            for p in 0..self.kh {
                for q in 0..self.kw {
                    let row = ((ch * self.kh + p) * self.kw + q) * px;
                    for i in 0..self.oh {
                        let src = base + (ch * self.h + i * self.stride + p) * self.w + q;
                        for j in 0..self.ow {
                            f(row + i * self.ow + j, src + j * self.stride);
                        }
                    }
                }
            }
        }
    }
}

impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    /// Copy of the recorded value.
    pub fn value(&self) -> Tensor {
        self.tape.inner.borrow().nodes[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor) -> R) -> R {
        f(&self.tape.inner.borrow().nodes[self.id].value)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.with_value(|t| t.shape().to_vec())
    }

    fn same_tape(&self, other: &Var<'t>) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::ForeignVar)
        }
    }

    fn unary(self, op: Op, f: impl Fn(&Tensor) -> Tensor) -> Var<'t> {
        let value = self.with_value(f);
        let id = self.tape.push(value, op);
        self.tape.var(id)
    }

    fn binary(
        self,
        other: Var<'t>,
        op: Op,
        f: impl Fn(&Tensor, &Tensor) -> Result<Tensor>,
    ) -> Result<Var<'t>> {
        self.same_tape(&other)?;
        let value = {
            let inner = self.tape.inner.borrow();
            let (a, b) = (&inner.nodes[self.id].value, &inner.nodes[other.id].value);
            f(a, b)?
        };
        let id = self.tape.push(value, op);
        Ok(self.tape.var(id))
    }

    /// Matrix product of two rank-2 tensors.
    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, false)
    }

    /// `self × otherᵀ` without materializing the transpose.
    pub fn matmul_t(self, other: Var<'t>) -> Result<Var<'t>> {
        self.matmul_impl(other, true)
    }

    fn matmul_impl(self, other: Var<'t>, b_transposed: bool) -> Result<Var<'t>> {
        let op = Op::MatMul {
            a: self.id,
            b: other.id,
            b_transposed,
        };
        self.binary(other, op, |a, b| {
            let mismatch = || Error::ShapeMismatch {
                op: if b_transposed { "matmul_t" } else { "matmul" },
                lhs: a.shape().to_vec(),
                rhs: b.shape().to_vec(),
            };
            let ([m, k], [r, c]) = (a.shape(), b.shape()) else {
                return Err(mismatch());
            };
            let (m, k, r, c) = (*m, *k, *r, *c);
            let (kb, n) = if b_transposed { (c, r) } else { (r, c) };
            if k != kb {
                return Err(mismatch());
            }
            let mut out = vec![0.0; m * n];
            let bm = Mat::new(b.data(), r, c);
            let bm = if b_transposed { bm.t() } else { bm };
            gemm(Mat::new(a.data(), m, k), bm, 0.0, &mut out);
            Ok(Tensor {
                shape: vec![m, n],
                data: out,
            })
        })
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let shape = self.shape();
        let [r, c] = shape[..] else {
            return Err(Error::InvalidShape {
                shape,
                reason: "transpose needs rank 2".into(),
            });
        };
        Ok(self.unary(Op::Transpose(self.id), |t| transpose(t.data(), r, c)))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Add(self.id, other.id), |a, b| {
            Ok(broadcast_zip(a, b, binary_shape("add", a, b)?, |x, y| x + y))
        })
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Sub(self.id, other.id), |a, b| {
            Ok(broadcast_zip(a, b, binary_shape("sub", a, b)?, |x, y| x - y))
        })
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, Op::Mul(self.id, other.id), |a, b| {
            Ok(broadcast_zip(a, b, binary_shape("mul", a, b)?, |x, y| x * y))
        })
    }

    pub fn scale(self, c: f64) -> Var<'t> {
        self.unary(Op::Scale(self.id, c), |t| t.map(|v| c * v))
    }

    /// Adds a rank-1 bias to every row of a rank-2 tensor.
    pub fn add_bias(self, bias: Var<'t>) -> Result<Var<'t>> {
        let op = Op::AddBias {
            x: self.id,
            bias: bias.id,
        };
        self.binary(bias, op, |x, b| {
            let ok = x.rank() == 2 && b.rank() == 1 && x.shape()[1] == b.len();
            if !ok {
                return Err(Error::ShapeMismatch {
                    op: "add_bias",
                    lhs: x.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let n = b.len();
            let mut out = x.clone();
            for row in out.data.chunks_mut(n) {
                row.iter_mut().zip(b.data()).for_each(|(v, bb)| *v += bb);
            }
            Ok(out)
        })
    }

    pub fn relu(self) -> Var<'t> {
        self.unary(Op::Relu(self.id), |t| t.map(|v| v.max(0.0)))
    }

    pub fn tanh(self) -> Var<'t> {
        self.unary(Op::Tanh(self.id), |t| t.map(f64::tanh))
    }

    pub fn square(self) -> Var<'t> {
        self.unary(Op::Square(self.id), |t| t.map(|v| v * v))
    }

    pub fn abs(self) -> Var<'t> {
        self.unary(Op::Abs(self.id), |t| t.map(f64::abs))
    }

    pub fn sum(self) -> Var<'t> {
        self.unary(Op::Sum(self.id), |t| Tensor::scalar(t.data().iter().sum()))
    }

    pub fn mean(self) -> Var<'t> {
        self.unary(Op::Mean(self.id), |t| {
            Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
        })
    }

    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let value = self.value().reshaped(shape)?;
        let id = self.tape.push(value, Op::Reshape(self.id));
        Ok(self.tape.var(id))
    }

    /// Valid (unpadded) 1D convolution.
    ///
    /// `self` is `[C, L]` or batched `[N, C, L]`; `kernel` is `[O, C, W]`.
    pub fn conv1d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        if stride == 0 {
            return Err(Error::invalid("conv1d stride must be positive"));
        }
        let op = Op::Conv1d {
            x: self.id,
            k: kernel.id,
            stride,
        };
        self.binary(kernel, op, |x, k| {
            let g = conv1d_geom(x.shape(), k.shape(), stride)?;
            let mut out = vec![0.0; g.n * g.o * g.out];
            let mut cols = vec![0.0; g.c * g.w * g.out];
            for s in 0..g.n {
                g.im2col(x.data(), s, &mut cols);
                let dst = &mut out[s * g.o * g.out..(s + 1) * g.o * g.out];
                gemm(
                    Mat::new(k.data(), g.o, g.c * g.w),
                    Mat::new(&cols, g.c * g.w, g.out),
                    0.0,
                    dst,
                );
            }
            let batched = x.rank() == 3;
            let shape = if batched {
                vec![g.n, g.o, g.out]
            } else {
                vec![g.o, g.out]
            };
            Ok(Tensor { shape, data: out })
        })
    }

    /// Valid (unpadded) 2D convolution.
    ///
    /// `self` is `[C, H, W]` or batched `[N, C, H, W]`; `kernel` is
    /// `[O, C, KH, KW]`.
    pub fn conv2d(self, kernel: Var<'t>, stride: usize) -> Result<Var<'t>> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let op = Op::Conv2d {
            x: self.id,
            k: kernel.id,
            stride,
        };
        self.binary(kernel, op, |x, k| {
            let g = conv2d_geom(x.shape(), k.shape(), stride)?;
            let (patch, px) = (g.patch(), g.pixels());
            let mut out = vec![0.0; g.n * g.o * px];
            let mut cols = vec![0.0; patch * px];
            let xd = x.data();
            for s in 0..g.n {
                g.for_each(s, |ci, xi| cols[ci] = xd[xi]);
                let dst = &mut out[s * g.o * px..(s + 1) * g.o * px];
                gemm(
                    Mat::new(k.data(), g.o, patch),
                    Mat::new(&cols, patch, px),
                    0.0,
                    dst,
                );
            }
            let shape = if x.rank() == 4 {
                vec![g.n, g.o, g.oh, g.ow]
            } else {
                vec![g.o, g.oh, g.ow]
            };
            Ok(Tensor { shape, data: out })
        })
    }

    /// Per-sample dot products: `self` is `[B, P]`, `rows` is `[B·S, P]`,
    /// and the result is `[B, S]` with `out[b, s] = self[b] · rows[b·S + s]`.
    pub fn batched_dot(self, rows: Var<'t>) -> Result<Var<'t>> {
        let op = Op::BatchedDot {
            a: self.id,
            t: rows.id,
        };
        self.binary(rows, op, |a, t| {
            let mismatch = || Error::ShapeMismatch {
                op: "batched_dot",
                lhs: a.shape().to_vec(),
                rhs: t.shape().to_vec(),
            };
            let ([b, p], [r, p2]) = (a.shape(), t.shape()) else {
                return Err(mismatch());
            };
            if p != p2 || r % b != 0 {
                return Err(mismatch());
            }
            let (b, p, s) = (*b, *p, r / b);
            let mut out = vec![0.0; b * s];
            for i in 0..b {
                let ai = &a.data()[i * p..(i + 1) * p];
                for j in 0..s {
                    let tj = &t.data()[(i * s + j) * p..(i * s + j + 1) * p];
                    out[i * s + j] = ai.iter().zip(tj).map(|(x, y)| x * y).sum();
                }
            }
            Ok(Tensor {
                shape: vec![b, s],
                data: out,
            })
        })
    }

    /// Reverse-mode accumulation from this scalar. Consumes the tape.
    pub fn backward(self) -> Result<Gradients> {
        {
            let mut inner = self.tape.inner.borrow_mut();
            if inner.consumed {
                return Err(Error::GraphConsumed);
            }
            let loss = &inner.nodes[self.id].value;
            if loss.len() != 1 {
                return Err(Error::NonScalarLoss(loss.shape().to_vec()));
            }
            inner.consumed = true;
        }
        let inner = self.tape.inner.borrow();
        Ok(reverse_pass(&inner.nodes, self.id))
    }
}

fn transpose(data: &[f64], r: usize, c: usize) -> Tensor {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = data[i * c + j];
        }
    }
    Tensor {
        shape: vec![c, r],
        data: out,
    }
}

fn conv1d_geom(x: &[usize], k: &[usize], stride: usize) -> Result<Conv1dGeom> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv1d",
        lhs: x.to_vec(),
        rhs: k.to_vec(),
    };
    let (n, c, l, _) = conv1d_dims(x).ok_or_else(mismatch)?;
    let [o, kc, w] = *k else {
        return Err(mismatch());
    };
    if kc != c {
        return Err(mismatch());
    }
    if w > l {
        return Err(Error::KernelTooWide {
            op: "conv1d",
            kernel: w,
            input: l,
        });
    }
    Ok(Conv1dGeom {
        n,
        c,
        l,
        o,
        w,
        stride,
        out: conv_out_len(l, w, stride),
    })
}

fn conv2d_geom(x: &[usize], k: &[usize], stride: usize) -> Result<Conv2dGeom> {
    let mismatch = || Error::ShapeMismatch {
        op: "conv2d",
        lhs: x.to_vec(),
        rhs: k.to_vec(),
    };
    let (n, c, h, w, _) = conv2d_dims(x).ok_or_else(mismatch)?;
    let [o, kc, kh, kw] = *k else {
        return Err(mismatch());
    };
    if kc != c {
        return Err(mismatch());
    }
    if kh > h || kw > w {
        return Err(Error::KernelTooWide {
            op: "conv2d",
            kernel: kh.max(kw),
            input: if kh > h { h } else { w },
        });
    }
    Ok(Conv2dGeom {
        n,
        c,
        h,
        w,
        o,
        kh,
        kw,
        stride,
        oh: conv_out_len(h, kh, stride),
        ow: conv_out_len(w, kw, stride),
    })
}

fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], id: usize) -> &'a mut [f64] {
    grads[id].get_or_insert_with(|| vec![0.0; nodes[id].value.len()])
}

/// Adds the gradient of a broadcast binary operand: `local(i)` is the
/// derivative factor for output element `i`.
fn acc_broadcast(
    grads: &mut [Option<Vec<f64>>],
    nodes: &[Node],
    id: usize,
    g: &[f64],
    local: impl Fn(usize) -> f64,
) {
    let dst = slot(grads, nodes, id);
    if dst.len() == g.len() {
        for (i, d) in dst.iter_mut().enumerate() {
            *d += g[i] * local(i);
        }
    } else {
        dst[0] += g.iter().enumerate().map(|(i, gi)| gi * local(i)).sum::<f64>();
    }
}

fn bcast(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn reverse_pass(nodes: &[Node], root: usize) -> Gradients {
    let mut grads: Vec<Option<Vec<f64>>> = vec![None; root + 1];
    grads[root] = Some(vec![1.0]);
    let mut out: BTreeMap<ParamId, Tensor> = BTreeMap::new();

    for id in (0..=root).rev() {
        let Some(g) = grads[id].take() else {
            continue;
        };
        let node = &nodes[id];
        let val = |i: usize| &nodes[i].value;
        match node.op {
            Op::Leaf(Some(pid)) => {
                let shape = node.value.shape().to_vec();
                match out.get_mut(&pid) {
                    Some(t) => t.data.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => {
                        out.insert(pid, Tensor { shape, data: g });
                    }
                }
            }
            Op::Leaf(None) => {}
            Op::MatMul { a, b, b_transposed } => {
                let (av, bv) = (val(a), val(b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let (r, c) = (bv.shape()[0], bv.shape()[1]);
                let n = if b_transposed { r } else { c };
                let gm = Mat::new(&g, m, n);
                let bm = Mat::new(bv.data(), r, c);
                // dA = G · op(B)ᵀ
                let da = slot(&mut grads, nodes, a);
                gemm(gm, if b_transposed { bm } else { bm.t() }, 1.0, da);
                let am = Mat::new(av.data(), m, k);
                let db = slot(&mut grads, nodes, b);
                if b_transposed {
                    // B is [n, k]: dB = Gᵀ · A
                    gemm(gm.t(), am, 1.0, db);
                } else {
                    // B is [k, n]: dB = Aᵀ · G
                    gemm(am.t(), gm, 1.0, db);
                }
            }
            Op::Transpose(x) => {
                let s = node.value.shape();
                let t = transpose(&g, s[0], s[1]);
                let dx = slot(&mut grads, nodes, x);
                dx.iter_mut().zip(t.data()).for_each(|(d, v)| *d += v);
            }
            Op::Add(a, b) => {
                acc_broadcast(&mut grads, nodes, a, &g, |_| 1.0);
                acc_broadcast(&mut grads, nodes, b, &g, |_| 1.0);
            }
            Op::Sub(a, b) => {
                acc_broadcast(&mut grads, nodes, a, &g, |_| 1.0);
                acc_broadcast(&mut grads, nodes, b, &g, |_| -1.0);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a), val(b));
                acc_broadcast(&mut grads, nodes, a, &g, |i| bcast(bv, i));
                acc_broadcast(&mut grads, nodes, b, &g, |i| bcast(av, i));
            }
            Op::Scale(x, c) => {
                let dx = slot(&mut grads, nodes, x);
                dx.iter_mut().zip(&g).for_each(|(d, v)| *d += c * v);
            }
            Op::AddBias { x, bias } => {
                let n = val(bias).len();
                let dx = slot(&mut grads, nodes, x);
                dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
                let db = slot(&mut grads, nodes, bias);
                for row in g.chunks(n) {
                    db.iter_mut().zip(row).for_each(|(d, v)| *d += v);
                }
            }
            Op::Relu(x) => {
                let xv = val(x).data();
                let dx = slot(&mut grads, nodes, x);
                for i in 0..dx.len() {
                    if xv[i] > 0.0 {
                        dx[i] += g[i];
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                let dx = slot(&mut grads, nodes, x);
                for i in 0..dx.len() {
                    dx[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Square(x) => {
                let xv = val(x).data();
                let dx = slot(&mut grads, nodes, x);
                for i in 0..dx.len() {
                    dx[i] += 2.0 * xv[i] * g[i];
                }
            }
            Op::Abs(x) => {
                let xv = val(x).data();
                let dx = slot(&mut grads, nodes, x);
                for i in 0..dx.len() {
                    dx[i] += g[i] * sign0(xv[i]);
                }
            }
            Op::Sum(x) => {
                let dx = slot(&mut grads, nodes, x);
                dx.iter_mut().for_each(|d| *d += g[0]);
            }
            Op::Mean(x) => {
                let dx = slot(&mut grads, nodes, x);
                let s = g[0] / dx.len() as f64;
                dx.iter_mut().for_each(|d| *d += s);
            }
            Op::Reshape(x) => {
                let dx = slot(&mut grads, nodes, x);
                dx.iter_mut().zip(&g).for_each(|(d, v)| *d += v);
            }
            Op::Conv1d { x, k, stride } => {
                let (xv, kv) = (val(x), val(k));
                let geo = conv1d_geom(xv.shape(), kv.shape(), stride).expect("checked in forward");
                let rows = geo.c * geo.w;
                let mut cols = vec![0.0; rows * geo.out];
                let mut dcols = vec![0.0; rows * geo.out];
                let mut dk = vec![0.0; kv.len()];
                let mut dx = vec![0.0; xv.len()];
                for s in 0..geo.n {
                    let gs = Mat::new(&g[s * geo.o * geo.out..(s + 1) * geo.o * geo.out], geo.o, geo.out);
                    geo.im2col(xv.data(), s, &mut cols);
                    gemm(gs, Mat::new(&cols, rows, geo.out).t(), 1.0, &mut dk);
                    gemm(Mat::new(kv.data(), geo.o, rows).t(), gs, 0.0, &mut dcols);
                    geo.col2im_add(&dcols, s, &mut dx);
                }
                add_into(slot(&mut grads, nodes, k), &dk);
                add_into(slot(&mut grads, nodes, x), &dx);
            }
            Op::Conv2d { x, k, stride } => {
                let (xv, kv) = (val(x), val(k));
                let geo = conv2d_geom(xv.shape(), kv.shape(), stride).expect("checked in forward");
                let (patch, px) = (geo.patch(), geo.pixels());
                let mut cols = vec![0.0; patch * px];
                let mut dcols = vec![0.0; patch * px];
                let mut dk = vec![0.0; kv.len()];
                let mut dx = vec![0.0; xv.len()];
                let xd = xv.data();
                for s in 0..geo.n {
                    let gs = Mat::new(&g[s * geo.o * px..(s + 1) * geo.o * px], geo.o, px);
                    geo.for_each(s, |ci, xi| cols[ci] = xd[xi]);
                    gemm(gs, Mat::new(&cols, patch, px).t(), 1.0, &mut dk);
                    gemm(Mat::new(kv.data(), geo.o, patch).t(), gs, 0.0, &mut dcols);
                    geo.for_each(s, |ci, xi| dx[xi] += dcols[ci]);
                }
                add_into(slot(&mut grads, nodes, k), &dk);
                add_into(slot(&mut grads, nodes, x), &dx);
            }
            Op::BatchedDot { a, t } => {
                let (av, tv) = (val(a), val(t));
                let (b, p) = (av.shape()[0], av.shape()[1]);
                let s = tv.shape()[0] / b;
                let mut da = vec![0.0; av.len()];
                let mut dt = vec![0.0; tv.len()];
                for i in 0..b {
                    for j in 0..s {
                        let gij = g[i * s + j];
                        let row = (i * s + j) * p;
                        for q in 0..p {
                            da[i * p + q] += gij * tv.data()[row + q];
                            dt[row + q] += gij * av.data()[i * p + q];
                        }
                    }
                }
                add_into(slot(&mut grads, nodes, a), &da);
                add_into(slot(&mut grads, nodes, t), &dt);
            }
        }
    }

    // Parameters that the loss does not depend on still get a (zero) entry.
    for node in &nodes[..=root] {
        if let Op::Leaf(Some(pid)) = node.op {
            out.entry(pid)
                .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        }
    }
    for node in &nodes[root + 1..] {
        if let Op::Leaf(Some(pid)) = node.op {
            out.entry(pid)
                .or_insert_with(|| Tensor::zeros(node.value.shape().to_vec()));
        }
    }
    Gradients { map: out }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

/// Sign with the subgradient 0 chosen at the origin.
pub(crate) fn sign0(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
