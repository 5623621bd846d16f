use std::cell::RefCell;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Backward rule of a recorded node. Indices refer to earlier tape nodes.
#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    Relu(usize),
    Conv2d {
        x: usize,
        w: usize,
        geom: ConvGeom,
        c_out: usize,
        // im2col buffers per sample; empty for the 1x1/stride-1 fast path.
        cols: Vec<T>,
    },
    Depthwise {
        x: usize,
        w: usize,
        geom: ConvGeom,
    },
    ScaleChannels(usize, usize),
    AddChannels(usize, usize),
    Concat {
        a: usize,
        b: usize,
        ca: usize,
        cb: usize,
        inner: usize,
    },
    BatchNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
    },
    GlobalAvgPool(usize),
    Reshape(usize),
    StraightThrough(usize),
    Linear {
        x: usize,
        w: usize,
        b: Option<usize>,
    },
    SoftmaxCrossEntropy {
        logits: usize,
        probs: Vec<T>,
        labels: Vec<usize>,
    },
    SoftTargetKl {
        logits: usize,
        q: Vec<T>,
        p: Vec<T>,
        temperature: T,
    },
    Sum(usize),
    Mean(usize),
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Record of executed operations. Gradients are filled by [`Tape::backward`]
/// and read back per variable.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: RefCell<Vec<Node<T>>>,
    grads: RefCell<Vec<Option<Vec<T>>>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy)]
pub struct Var<'t, T> {
    tape: &'t Tape<T>,
    id: usize,
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            grads: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records `t` as an input. It receives a gradient iff
    /// `t.requires_grad()`.
    pub fn leaf(&self, t: Tensor<T>) -> Var<'_, T> {
        let needs = t.requires_grad();
        let mut value = t;
        value.zero_grad();
        self.push_unchecked(value, Op::Leaf, needs)
    }

    /// Records `t` as a constant that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var<'_, T> {
        let mut value = t;
        value.set_requires_grad(false);
        value.zero_grad();
        self.push_unchecked(value, Op::Leaf, false)
    }

    fn push_unchecked(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var<'_, T> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn push(
        &self,
        name: &'static str,
        value: Tensor<T>,
        op: Op<T>,
        needs_grad: bool,
    ) -> Result<Var<'_, T>> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: name });
        }
        Ok(self.push_unchecked(value, op, needs_grad))
    }

    fn needs(&self, ids: &[usize]) -> bool {
        let nodes = self.nodes.borrow();
        ids.iter().any(|&i| nodes[i].needs_grad)
    }

    /// Reverse-mode sweep from a scalar `loss`. Gradients replace any from a
    /// previous sweep. Nodes not reachable from `loss`, or recorded as
    /// constants, get no gradient.
    pub fn backward(&self, loss: Var<'_, T>) -> Result<()> {
        let nodes = self.nodes.borrow();
        let shape = nodes[loss.id].value.shape();
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        if nodes[loss.id].needs_grad {
            grads[loss.id] = Some(vec![T::one()]);
        }
        for i in (0..=loss.id).rev() {
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, i, &g, &mut grads);
            grads[i] = Some(g);
        }
        *self.grads.borrow_mut() = grads;
        Ok(())
    }
}

fn acc<'g, T: Scalar>(
    nodes: &[Node<T>],
    grads: &'g mut [Option<Vec<T>>],
    id: usize,
) -> Option<&'g mut Vec<T>> {
    if !nodes[id].needs_grad {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |id: usize| nodes[id].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (m, k, n) = (
                nodes[*a].value.shape()[0],
                nodes[*a].value.shape()[1],
                nodes[*b].value.shape()[1],
            );
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::gemm_nt(g, val(*b), ga, m, n, k);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                kernels::gemm_tn(val(*a), g, gb, k, m, n);
            }
        }
        Op::Add(a, b) => {
            for id in [*a, *b] {
                if let Some(ga) = acc(nodes, grads, id) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y);
            }
        }
        Op::Mul(a, b) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, &y), &bv) in ga.iter_mut().zip(g).zip(val(*b)) {
                    *x += y * bv;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((x, &y), &av) in gb.iter_mut().zip(g).zip(val(*a)) {
                    *x += y * av;
                }
            }
        }
        Op::Scale(a, c) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
            }
        }
        Op::Relu(a) => {
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((x, &y), &v) in ga.iter_mut().zip(g).zip(val(*a)) {
                    if v > T::zero() {
                        *x += y;
                    }
                }
            }
        }
        Op::Conv2d {
            x,
            w,
            geom,
            c_out,
            cols,
        } => {
            let n = nodes[*x].value.shape()[0];
            let (pl, pos, il) = (geom.patch_len(), geom.positions(), geom.in_len());
            let fast = cols.is_empty();
            if let Some(gw) = acc(nodes, grads, *w) {
                for s in 0..n {
                    let c = if fast {
                        &val(*x)[s * il..(s + 1) * il]
                    } else {
                        &cols[s * pl * pos..(s + 1) * pl * pos]
                    };
                    kernels::gemm_nt(
                        &g[s * c_out * pos..(s + 1) * c_out * pos],
                        c,
                        gw,
                        *c_out,
                        pos,
                        pl,
                    );
                }
            }
            if nodes[*x].needs_grad {
                let wv = val(*w);
                let gx = acc(nodes, grads, *x).expect("needs_grad checked");
                let mut dcols = vec![T::zero(); pl * pos];
                for s in 0..n {
                    let go = &g[s * c_out * pos..(s + 1) * c_out * pos];
                    if fast {
                        kernels::gemm_tn(wv, go, &mut gx[s * il..(s + 1) * il], pl, *c_out, pos);
                    } else {
                        dcols.iter_mut().for_each(|v| *v = T::zero());
                        kernels::gemm_tn(wv, go, &mut dcols, pl, *c_out, pos);
                        kernels::col2im(&dcols, geom, &mut gx[s * il..(s + 1) * il]);
                    }
                }
            }
        }
        Op::Depthwise { x, w, geom } => {
            let n = nodes[*x].value.shape()[0];
            let (il, ol) = (geom.in_len(), geom.channels * geom.positions());
            let xv = val(*x);
            let wv = val(*w);
            let mut gx = if nodes[*x].needs_grad {
                Some(vec![T::zero(); xv.len()])
            } else {
                None
            };
            let mut gw = if nodes[*w].needs_grad {
                Some(vec![T::zero(); wv.len()])
            } else {
                None
            };
            for s in 0..n {
                kernels::depthwise_backward(
                    &xv[s * il..(s + 1) * il],
                    wv,
                    geom,
                    &g[s * ol..(s + 1) * ol],
                    gx.as_mut().map(|v| &mut v[s * il..(s + 1) * il]),
                    gw.as_deref_mut(),
                );
            }
            if let (Some(src), Some(dst)) = (gx, acc(nodes, grads, *x)) {
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
            if let (Some(src), Some(dst)) = (gw, acc(nodes, grads, *w)) {
                dst.iter_mut().zip(src).for_each(|(a, b)| *a += b);
            }
        }
        Op::ScaleChannels(x, s) => {
            let shape = nodes[*x].value.shape();
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>().max(1));
            let sv = val(*s).to_vec();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (q, (dp, gp)) in gx.chunks_mut(inner).zip(g.chunks(inner)).enumerate() {
                    let k = sv[q % c];
                    dp.iter_mut().zip(gp).for_each(|(d, &y)| *d += y * k);
                }
            }
            if nodes[*s].needs_grad {
                let xs = val(*x);
                let gs = acc(nodes, grads, *s).expect("needs_grad checked");
                for (q, (gp, xp)) in g.chunks(inner).zip(xs.chunks(inner)).enumerate() {
                    let mut a = T::zero();
                    gp.iter().zip(xp).for_each(|(&y, &v)| a += y * v);
                    gs[q % c] += a;
                }
            }
        }
        Op::AddChannels(x, b) => {
            let shape = nodes[*x].value.shape();
            let (c, inner) = (shape[1], shape[2..].iter().product::<usize>().max(1));
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &y)| *d += y);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for (q, gp) in g.chunks(inner).enumerate() {
                    gb[q % c] += gp.iter().copied().fold(T::zero(), |a, y| a + y);
                }
            }
        }
        Op::Concat {
            a,
            b,
            ca,
            cb,
            inner,
        } => {
            let n = nodes[*a].value.shape()[0];
            let (la, lb) = (ca * inner, cb * inner);
            if let Some(ga) = acc(nodes, grads, *a) {
                for s in 0..n {
                    let src = &g[s * (la + lb)..s * (la + lb) + la];
                    ga[s * la..(s + 1) * la]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &y)| *d += y);
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for s in 0..n {
                    let src = &g[s * (la + lb) + la..(s + 1) * (la + lb)];
                    gb[s * lb..(s + 1) * lb]
                        .iter_mut()
                        .zip(src)
                        .for_each(|(d, &y)| *d += y);
                }
            }
        }
        Op::BatchNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
        } => {
            let shape = nodes[*x].value.shape();
            let (n, c, inner) = (
                shape[0],
                shape[1],
                shape[2..].iter().product::<usize>().max(1),
            );
            let m = T::of((n * inner) as f64);
            let gv = val(*gamma).to_vec();
            let mut sum_g = vec![T::zero(); c];
            let mut sum_gx = vec![T::zero(); c];
            for (q, (gp, hp)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                let (mut sg, mut sgx) = (T::zero(), T::zero());
                for (&y, &xh) in gp.iter().zip(hp) {
                    sg += y;
                    sgx += y * xh;
                }
                sum_g[q % c] += sg;
                sum_gx[q % c] += sgx;
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                for (q, ((dp, gp), hp)) in gx
                    .chunks_mut(inner)
                    .zip(g.chunks(inner))
                    .zip(xhat.chunks(inner))
                    .enumerate()
                {
                    let ch = q % c;
                    let k = gv[ch] * inv_std[ch];
                    if *train {
                        let (a, sg, sgx) = (k / m, sum_g[ch], sum_gx[ch]);
                        for ((d, &y), &xh) in dp.iter_mut().zip(gp).zip(hp) {
                            *d += a * (m * y - sg - xh * sgx);
                        }
                    } else {
                        dp.iter_mut().zip(gp).for_each(|(d, &y)| *d += k * y);
                    }
                }
            }
            if let Some(gg) = acc(nodes, grads, *gamma) {
                gg.iter_mut().zip(&sum_gx).for_each(|(d, &v)| *d += v);
            }
            if let Some(gb) = acc(nodes, grads, *beta) {
                gb.iter_mut().zip(&sum_g).for_each(|(d, &v)| *d += v);
            }
        }
        Op::GlobalAvgPool(x) => {
            let shape = nodes[*x].value.shape();
            let inner: usize = shape[2..].iter().product::<usize>().max(1);
            let inv = T::one() / T::of(inner as f64);
            if let Some(gx) = acc(nodes, grads, *x) {
                for (dp, &y) in gx.chunks_mut(inner).zip(g) {
                    dp.iter_mut().for_each(|d| *d += y * inv);
                }
            }
        }
        Op::Reshape(x) | Op::StraightThrough(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().zip(g).for_each(|(d, &y)| *d += y);
            }
        }
        Op::Linear { x, w, b } => {
            let (n, fin) = (nodes[*x].value.shape()[0], nodes[*x].value.shape()[1]);
            let fout = nodes[*w].value.shape()[0];
            if let Some(gx) = acc(nodes, grads, *x) {
                kernels::gemm_nn(g, val(*w), gx, n, fout, fin);
            }
            if let Some(gw) = acc(nodes, grads, *w) {
                kernels::gemm_tn(g, val(*x), gw, fout, n, fin);
            }
            if let Some(b) = b {
                if let Some(gb) = acc(nodes, grads, *b) {
                    for row in g.chunks(fout) {
                        gb.iter_mut().zip(row).for_each(|(d, &y)| *d += y);
                    }
                }
            }
        }
        Op::SoftmaxCrossEntropy {
            logits,
            probs,
            labels,
        } => {
            let n = labels.len();
            let k = probs.len() / n;
            let scale = g[0] / T::of(n as f64);
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (s, &lab) in labels.iter().enumerate() {
                    for j in 0..k {
                        let onehot = if j == lab { T::one() } else { T::zero() };
                        gl[s * k + j] += scale * (probs[s * k + j] - onehot);
                    }
                }
            }
        }
        Op::SoftTargetKl {
            logits,
            q,
            p,
            temperature,
        } => {
            let n = nodes[*logits].value.shape()[0];
            let scale = g[0] / (T::of(n as f64) * *temperature);
            if let Some(gl) = acc(nodes, grads, *logits) {
                for ((d, &qv), &pv) in gl.iter_mut().zip(q).zip(p) {
                    *d += scale * (qv - pv);
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                gx.iter_mut().for_each(|d| *d += g[0]);
            }
        }
        Op::Mean(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                let v = g[0] / T::of(gx.len() as f64);
                gx.iter_mut().for_each(|d| *d += v);
            }
        }
    }
}

fn row_softmax<T: Scalar>(logits: &[T], k: usize, inv_t: T) -> Vec<T> {
    let mut out = vec![T::zero(); logits.len()];
    for (row, dst) in logits.chunks(k).zip(out.chunks_mut(k)) {
        let mx = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v * inv_t));
        let mut z = T::zero();
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v * inv_t - mx).exp();
            z += *d;
        }
        dst.iter_mut().for_each(|d| *d /= z);
    }
    out
}

/// Row-wise softmax of a `[N, K]` logit matrix at temperature `t`.
pub(crate) fn softmax_rows<T: Scalar>(logits: &Tensor<T>, t: T) -> Vec<T> {
    row_softmax(logits.data(), logits.shape()[1], T::one() / t)
}

fn require_same(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn require_rank(op: &'static str, shape: &[usize], rank: usize) -> Result<()> {
    if shape.len() != rank {
        return Err(Error::shape(
            op,
            format!("expected rank {rank}, got {shape:?}"),
        ));
    }
    Ok(())
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<T> {
        self.tape
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    /// Copy of the forward value.
    pub fn value(&self) -> Tensor<T> {
        self.tape.nodes.borrow()[self.id].value.clone()
    }

    pub fn with_value<R>(&self, f: impl FnOnce(&Tensor<T>) -> R) -> R {
        f(&self.tape.nodes.borrow()[self.id].value)
    }

    pub fn item(&self) -> T {
        self.with_value(|t| t.data()[0])
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].needs_grad
    }

    /// Gradient from the last [`Tape::backward`], shaped like the value.
    pub fn grad(&self) -> Option<Tensor<T>> {
        let g = self.tape.grads.borrow().get(self.id).cloned().flatten()?;
        Tensor::from_vec(self.shape(), g).ok()
    }

    pub fn backward(&self) -> Result<()> {
        self.tape.backward(*self)
    }

    fn binary(
        &self,
        other: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            require_same(name, a.shape(), b.shape())?;
            let data = a
                .data()
                .iter()
                .zip(b.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::from_vec(a.shape().to_vec(), data)?
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        self.tape.push(name, value, op, needs)
    }

    fn unary(&self, name: &'static str, value: Tensor<T>, op: Op<T>) -> Result<Self> {
        let needs = self.tape.needs(&[self.id]);
        self.tape.push(name, value, op, needs)
    }

    pub fn matmul(&self, rhs: Var<'t, T>) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            nodes[self.id].value.matmul(&nodes[rhs.id].value)?
        };
        let needs = self.tape.needs(&[self.id, rhs.id]);
        self.tape
            .push("matmul", value, Op::MatMul(self.id, rhs.id), needs)
    }

    pub fn add(&self, rhs: Var<'t, T>) -> Result<Self> {
        self.binary(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: Var<'t, T>) -> Result<Self> {
        self.binary(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&self, rhs: Var<'t, T>) -> Result<Self> {
        self.binary(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn scale(&self, c: T) -> Result<Self> {
        let value = self.with_value(|t| t.map(|v| v * c));
        self.unary("scale", value, Op::Scale(self.id, c))
    }

    pub fn relu(&self) -> Result<Self> {
        let value = self.with_value(|t| t.map(|v| v.max(T::zero())));
        self.unary("relu", value, Op::Relu(self.id))
    }

    /// Cross-correlation of `[N,C,H,W]` input with `[C_out,C,k,k]` weight.
    pub fn conv2d(&self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Self> {
        let (value, op) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            require_rank("conv2d", x.shape(), 4)?;
            require_rank("conv2d", w.shape(), 4)?;
            let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let (c_out, k) = (w.shape()[0], w.shape()[2]);
            if w.shape()[1] != c || w.shape()[3] != k {
                return Err(Error::shape(
                    "conv2d",
                    format!("input {:?}, weight {:?}", x.shape(), w.shape()),
                ));
            }
            let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
            let (pl, pos, il) = (geom.patch_len(), geom.positions(), geom.in_len());
            let fast = k == 1 && stride == 1 && pad == 0;
            let mut out = vec![T::zero(); n * c_out * pos];
            let mut cols = if fast {
                Vec::new()
            } else {
                vec![T::zero(); n * pl * pos]
            };
            for s in 0..n {
                let xs = &x.data()[s * il..(s + 1) * il];
                let col: &[T] = if fast {
                    xs
                } else {
                    let dst = &mut cols[s * pl * pos..(s + 1) * pl * pos];
                    kernels::im2col(xs, &geom, dst);
                    dst
                };
                kernels::gemm_nn(
                    w.data(),
                    col,
                    &mut out[s * c_out * pos..(s + 1) * c_out * pos],
                    c_out,
                    pl,
                    pos,
                );
            }
            let value = Tensor::from_vec(vec![n, c_out, geom.out_h, geom.out_w], out)?;
            let op = Op::Conv2d {
                x: self.id,
                w: weight.id,
                geom,
                c_out,
                cols,
            };
            (value, op)
        };
        let needs = self.tape.needs(&[self.id, weight.id]);
        self.tape.push("conv2d", value, op, needs)
    }

    /// Per-channel convolution with a `[C,1,k,k]` weight.
    pub fn depthwise_conv2d(&self, weight: Var<'t, T>, stride: usize, pad: usize) -> Result<Self> {
        let (value, geom) = {
            let nodes = self.tape.nodes.borrow();
            let (x, w) = (&nodes[self.id].value, &nodes[weight.id].value);
            require_rank("depthwise_conv2d", x.shape(), 4)?;
            require_rank("depthwise_conv2d", w.shape(), 4)?;
            let (n, c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2], x.shape()[3]);
            let k = w.shape()[2];
            if w.shape()[0] != c || w.shape()[1] != 1 || w.shape()[3] != k {
                return Err(Error::shape(
                    "depthwise_conv2d",
                    format!("input {:?}, weight {:?}", x.shape(), w.shape()),
                ));
            }
            let geom = ConvGeom::new(c, h, wd, k, stride, pad)?;
            let (il, ol) = (geom.in_len(), c * geom.positions());
            let mut out = vec![T::zero(); n * ol];
            for s in 0..n {
                kernels::depthwise_forward(
                    &x.data()[s * il..(s + 1) * il],
                    w.data(),
                    &geom,
                    &mut out[s * ol..(s + 1) * ol],
                );
            }
            (
                Tensor::from_vec(vec![n, c, geom.out_h, geom.out_w], out)?,
                geom,
            )
        };
        let needs = self.tape.needs(&[self.id, weight.id]);
        let op = Op::Depthwise {
            x: self.id,
            w: weight.id,
            geom,
        };
        self.tape.push("depthwise_conv2d", value, op, needs)
    }

    fn channel_op(
        &self,
        v: Var<'t, T>,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<Tensor<T>> {
        let nodes = self.tape.nodes.borrow();
        let (x, s) = (&nodes[self.id].value, &nodes[v.id].value);
        if x.shape().len() < 2 || s.shape() != [x.shape()[1]] {
            return Err(Error::shape(
                name,
                format!("input {:?}, per-channel {:?}", x.shape(), s.shape()),
            ));
        }
        let (c, inner) = (x.shape()[1], x.shape()[2..].iter().product::<usize>());
        let mut data = Vec::with_capacity(x.len());
        for (q, xp) in x.data().chunks(inner.max(1)).enumerate() {
            let sv = s.data()[q % c];
            data.extend(xp.iter().map(|&xv| f(xv, sv)));
        }
        Tensor::from_vec(x.shape().to_vec(), data)
    }

    /// Multiplies channel `c` of `[N,C,..]` by `s[c]`.
    pub fn scale_channels(&self, s: Var<'t, T>) -> Result<Self> {
        let value = self.channel_op(s, "scale_channels", |x, s| x * s)?;
        let needs = self.tape.needs(&[self.id, s.id]);
        self.tape.push(
            "scale_channels",
            value,
            Op::ScaleChannels(self.id, s.id),
            needs,
        )
    }

    /// Adds `b[c]` to channel `c` of `[N,C,..]`.
    pub fn add_channels(&self, b: Var<'t, T>) -> Result<Self> {
        let value = self.channel_op(b, "add_channels", |x, b| x + b)?;
        let needs = self.tape.needs(&[self.id, b.id]);
        self.tape
            .push("add_channels", value, Op::AddChannels(self.id, b.id), needs)
    }

    /// Concatenates along axis 1 with `self` occupying the leading channels.
    pub fn concat_channels(&self, other: Var<'t, T>) -> Result<Self> {
        let (value, ca, cb, inner) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (sa, sb) = (a.shape(), b.shape());
            if sa.len() < 2 || sa.len() != sb.len() || sa[0] != sb[0] || sa[2..] != sb[2..] {
                return Err(Error::shape("concat_channels", format!("{sa:?} vs {sb:?}")));
            }
            let (n, ca, cb, inner) = (sa[0], sa[1], sb[1], sa[2..].iter().product::<usize>());
            let mut out = Vec::with_capacity(a.len() + b.len());
            for s in 0..n {
                out.extend_from_slice(&a.data()[s * ca * inner..(s + 1) * ca * inner]);
                out.extend_from_slice(&b.data()[s * cb * inner..(s + 1) * cb * inner]);
            }
            let mut shape = sa.to_vec();
            shape[1] = ca + cb;
            (Tensor::from_vec(shape, out)?, ca, cb, inner)
        };
        let needs = self.tape.needs(&[self.id, other.id]);
        let op = Op::Concat {
            a: self.id,
            b: other.id,
            ca,
            cb,
            inner,
        };
        self.tape.push("concat_channels", value, op, needs)
    }

    /// Batch normalization over axes (0, 2, 3, ..) using batch statistics.
    /// Returns the output plus the batch mean and biased variance per channel.
    pub fn batchnorm_train(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        eps: T,
    ) -> Result<(Self, Vec<T>, Vec<T>)> {
        let (n, c, inner) = self.bn_dims(gamma, beta)?;
        let m = T::of((n * inner) as f64);
        let (mean, var) = self.with_value(|x| {
            let mut mean = vec![T::zero(); c];
            let mut var = vec![T::zero(); c];
            for (q, xp) in x.data().chunks(inner).enumerate() {
                mean[q % c] += xp.iter().copied().fold(T::zero(), |a, v| a + v);
            }
            mean.iter_mut().for_each(|v| *v /= m);
            for (q, xp) in x.data().chunks(inner).enumerate() {
                let mu = mean[q % c];
                var[q % c] += xp.iter().fold(T::zero(), |a, &v| a + (v - mu) * (v - mu));
            }
            var.iter_mut().for_each(|v| *v /= m);
            (mean, var)
        });
        let out = self.bn_apply(gamma, beta, &mean, &var, eps, true)?;
        Ok((out, mean, var))
    }

    /// Batch normalization with fixed running statistics.
    pub fn batchnorm_eval(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
    ) -> Result<Self> {
        let (_, c, _) = self.bn_dims(gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(Error::shape(
                "batchnorm",
                format!("{c} channels, stats {}/{}", mean.len(), var.len()),
            ));
        }
        self.bn_apply(gamma, beta, mean, var, eps, false)
    }

    fn bn_dims(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<(usize, usize, usize)> {
        let shape = self.shape();
        if shape.len() < 2 || gamma.shape() != [shape[1]] || beta.shape() != [shape[1]] {
            return Err(Error::shape(
                "batchnorm",
                format!(
                    "input {shape:?}, gamma {:?}, beta {:?}",
                    gamma.shape(),
                    beta.shape()
                ),
            ));
        }
        Ok((
            shape[0],
            shape[1],
            shape[2..].iter().product::<usize>().max(1),
        ))
    }

    fn bn_apply(
        &self,
        gamma: Var<'t, T>,
        beta: Var<'t, T>,
        mean: &[T],
        var: &[T],
        eps: T,
        train: bool,
    ) -> Result<Self> {
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let (value, xhat) = {
            let nodes = self.tape.nodes.borrow();
            let x = &nodes[self.id].value;
            let (gv, bv) = (nodes[gamma.id].value.data(), nodes[beta.id].value.data());
            let (c, inner) = (mean.len(), x.shape()[2..].iter().product::<usize>());
            let mut xhat = Vec::with_capacity(x.len());
            let mut out = Vec::with_capacity(x.len());
            for (q, xp) in x.data().chunks(inner.max(1)).enumerate() {
                let ch = q % c;
                for &v in xp {
                    let xh = (v - mean[ch]) * inv_std[ch];
                    xhat.push(xh);
                    out.push(gv[ch] * xh + bv[ch]);
                }
            }
            (Tensor::from_vec(x.shape().to_vec(), out)?, xhat)
        };
        let needs = self.tape.needs(&[self.id, gamma.id, beta.id]);
        let op = Op::BatchNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
            train,
        };
        self.tape.push("batchnorm", value, op, needs)
    }

    /// `[N,C,H,W] -> [N,C]` spatial mean.
    pub fn global_avg_pool(&self) -> Result<Self> {
        let value = self.with_value(|x| -> Result<Tensor<T>> {
            let s = x.shape();
            if s.len() < 3 {
                return Err(Error::shape("global_avg_pool", format!("{s:?}")));
            }
            let inner: usize = s[2..].iter().product();
            let inv = T::one() / T::of(inner as f64);
            let data = x
                .data()
                .chunks(inner)
                .map(|c| c.iter().copied().sum::<T>() * inv)
                .collect();
            Tensor::from_vec(vec![s[0], s[1]], data)
        })?;
        self.unary("global_avg_pool", value, Op::GlobalAvgPool(self.id))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let value = self.value().reshape(shape)?;
        self.unary("reshape", value, Op::Reshape(self.id))
    }

    /// Forward applies `f`; backward passes gradients through unchanged.
    pub fn straight_through(
        &self,
        f: impl FnOnce(&Tensor<T>) -> Result<Tensor<T>>,
    ) -> Result<Self> {
        let value = self.with_value(|x| -> Result<Tensor<T>> {
            let y = f(x)?;
            require_same("straight_through", x.shape(), y.shape())?;
            Ok(y)
        })?;
        self.unary("straight_through", value, Op::StraightThrough(self.id))
    }

    /// `x[N,in] * w[out,in]^T + b[out]`.
    pub fn linear(&self, w: Var<'t, T>, b: Option<Var<'t, T>>) -> Result<Self> {
        let value = {
            let nodes = self.tape.nodes.borrow();
            let (x, wv) = (&nodes[self.id].value, &nodes[w.id].value);
            require_rank("linear", x.shape(), 2)?;
            require_rank("linear", wv.shape(), 2)?;
            let (n, fin, fout) = (x.shape()[0], x.shape()[1], wv.shape()[0]);
            if wv.shape()[1] != fin {
                return Err(Error::shape(
                    "linear",
                    format!("input {:?}, weight {:?}", x.shape(), wv.shape()),
                ));
            }
            let mut out = vec![T::zero(); n * fout];
            if let Some(b) = b {
                let bv = &nodes[b.id].value;
                if bv.shape() != [fout] {
                    return Err(Error::shape(
                        "linear",
                        format!("bias {:?} for {fout} outputs", bv.shape()),
                    ));
                }
                for row in out.chunks_mut(fout) {
                    row.copy_from_slice(bv.data());
                }
            }
            kernels::gemm_nt(x.data(), wv.data(), &mut out, n, fin, fout);
            Tensor::from_vec(vec![n, fout], out)?
        };
        let mut ids = vec![self.id, w.id];
        ids.extend(b.map(|b| b.id));
        let needs = self.tape.needs(&ids);
        let op = Op::Linear {
            x: self.id,
            w: w.id,
            b: b.map(|b| b.id),
        };
        self.tape.push("linear", value, op, needs)
    }

    /// Mean softmax cross-entropy of `[N,K]` logits against class labels.
    pub fn softmax_cross_entropy(&self, labels: &[usize]) -> Result<Self> {
        let (value, probs) = self.with_value(|x| -> Result<(Tensor<T>, Vec<T>)> {
            require_rank("softmax_cross_entropy", x.shape(), 2)?;
            let (n, k) = (x.shape()[0], x.shape()[1]);
            if labels.len() != n {
                return Err(Error::shape(
                    "softmax_cross_entropy",
                    format!("{n} rows, {} labels", labels.len()),
                ));
            }
            if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
                return Err(Error::invalid(format!(
                    "label {bad} out of range for {k} classes"
                )));
            }
            let probs = softmax_rows(x, T::one());
            let tiny = T::min_positive_value();
            let loss = labels
                .iter()
                .enumerate()
                .map(|(s, &l)| -(probs[s * k + l].max(tiny)).ln())
                .sum::<T>()
                / T::of(n as f64);
            Ok((Tensor::scalar(loss), probs))
        })?;
        let op = Op::SoftmaxCrossEntropy {
            logits: self.id,
            probs,
            labels: labels.to_vec(),
        };
        self.unary("softmax_cross_entropy", value, op)
    }

    /// Mean over rows of `KL(p || softmax(self / t))` where `p` is a fixed
    /// `[N,K]` probability matrix.
    pub fn soft_target_kl(&self, p: &Tensor<T>, t: T) -> Result<Self> {
        let (value, q) = self.with_value(|x| -> Result<(Tensor<T>, Vec<T>)> {
            require_rank("soft_target_kl", x.shape(), 2)?;
            require_same("soft_target_kl", x.shape(), p.shape())?;
            let n = x.shape()[0];
            let q = softmax_rows(x, t);
            let tiny = T::min_positive_value();
            let kl = p
                .data()
                .iter()
                .zip(&q)
                .filter(|(&pv, _)| pv > T::zero())
                .map(|(&pv, &qv)| pv * (pv.ln() - qv.max(tiny).ln()))
                .sum::<T>()
                / T::of(n as f64);
            Ok((Tensor::scalar(kl), q))
        })?;
        let op = Op::SoftTargetKl {
            logits: self.id,
            q,
            p: p.data().to_vec(),
            temperature: t,
        };
        self.unary("soft_target_kl", value, op)
    }

    pub fn sum(&self) -> Result<Self> {
        let value = self.with_value(|x| Tensor::scalar(x.data().iter().copied().sum()));
        self.unary("sum", value, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Result<Self> {
        let value = self.with_value(|x| {
            Tensor::scalar(x.data().iter().copied().sum::<T>() / T::of(x.len() as f64))
        });
        self.unary("mean", value, Op::Mean(self.id))
    }
}
