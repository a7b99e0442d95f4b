//! Reverse-mode autodiff over a fixed set of primitives.
//!
//! A [`Tape`] records operations in execution order, so every node's inputs
//! precede it. [`Tape::backward`] walks the record in reverse and returns the
//! gradient of a scalar loss with respect to every node that needs one.
//!
//! Rows of a rank-2 node may hold several sequences stacked end to end; the
//! sequence-aware primitives ([`Tape::conv1d`], [`Tape::linear_attention`])
//! take the segment lengths explicitly.

use std::rc::Rc;

use crate::error::{AttentionError, AutodiffError};
use crate::feature_map::{taylor2_backward, VectorMap};
use crate::linear_attention::{accumulate, attend_backward, readout};
use crate::tensor::{kernels, softmax_cross_entropy, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    Sum(NodeId),
    Cumsum(NodeId),
    Conv1d { x: NodeId, w: NodeId, segments: Rc<[usize]>, causal: bool },
    Gelu(NodeId),
    Silu(NodeId),
    Gather(NodeId, Rc<[usize]>),
    Taylor2 { x: NodeId, heads: usize },
    LinearAttention { q: NodeId, k: NodeId, v: NodeId, heads: usize, causal: bool, segments: Rc<[usize]> },
    SoftmaxCe { logits: NodeId, grad: Tensor<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

/// Gradient buffers produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, id: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        match self.grads.get(id.0) {
            None => Err(AutodiffError::UnknownNode(id.0)),
            Some(None) => Err(AutodiffError::Disconnected(id.0)),
            Some(Some(g)) => Ok(g),
        }
    }

    pub fn take(&mut self, id: NodeId) -> Result<Tensor<T>, AutodiffError> {
        match self.grads.get_mut(id.0) {
            None => Err(AutodiffError::UnknownNode(id.0)),
            Some(slot) => slot.take().ok_or(AutodiffError::Disconnected(id.0)),
        }
    }
}

fn check_segments(segments: &[usize], rows: usize) -> Result<(), AutodiffError> {
    let total: usize = segments.iter().sum();
    if total != rows {
        return Err(AttentionError::Length { what: "segments", expected: rows, got: total }.into());
    }
    Ok(())
}

fn shape_err(op: &'static str, a: &[usize], b: &[usize]) -> AutodiffError {
    crate::error::TensorError::ShapeMismatch { op, left: a.to_vec(), right: b.to_vec() }.into()
}

/// Copies columns `c0..c0+w` of rows `r0..r0+n` into a dense `n × w` buffer.
fn block<T: Real>(x: &Tensor<T>, r0: usize, n: usize, c0: usize, w: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(n * w);
    for i in r0..r0 + n {
        out.extend_from_slice(&x.row(i)[c0..c0 + w]);
    }
    out
}

fn add_block<T: Real>(x: &mut Tensor<T>, r0: usize, n: usize, c0: usize, w: usize, src: &[T]) {
    for i in 0..n {
        for (o, &s) in x.row_mut(r0 + i)[c0..c0 + w].iter_mut().zip(&src[i * w..(i + 1) * w]) {
            *o = *o + s;
        }
    }
}

fn grad_slot<'a, T: Real>(grads: &'a mut [Option<Tensor<T>>], nodes: &[Node<T>], id: NodeId) -> &'a mut Tensor<T> {
    grads[id.0].get_or_insert_with(|| Tensor::zeros(nodes[id.0].value.shape()))
}

fn conv_src(i: usize, t: usize, len: usize, causal: bool) -> Option<usize> {
    if causal {
        i.checked_sub(t)
    } else {
        Some((i + len * t - t) % len)
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, id: NodeId) -> Result<&Tensor<T>, AutodiffError> {
        self.nodes.get(id.0).map(|n| &n.value).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn node(&self, id: NodeId) -> Result<&Node<T>, AutodiffError> {
        self.nodes.get(id.0).ok_or(AutodiffError::UnknownNode(id.0))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[NodeId]) -> Result<NodeId, AutodiffError> {
        value.check_finite("autodiff forward")?;
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(NodeId(self.nodes.len() - 1))
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: true });
        NodeId(self.nodes.len() - 1)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.matmul(self.value(b)?)?;
        self.push(v, Op::MatMul(a, b), &[a, b])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.add(self.value(b)?)?;
        self.push(v, Op::Add(a, b), &[a, b])
    }

    /// Adds the length-`d` vector `b` to every row of `a: n×d`.
    pub fn add_bias(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let (av, bv) = (self.value(a)?, self.value(b)?);
        let (n, d) = av.dims2()?;
        if bv.len() != d {
            return Err(shape_err("add_bias", av.shape(), bv.shape()));
        }
        let mut v = av.clone();
        for i in 0..n {
            for (o, &x) in v.row_mut(i).iter_mut().zip(bv.data()) {
                *o = *o + x;
            }
        }
        self.push(v, Op::AddBias(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.mul(self.value(b)?)?;
        self.push(v, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.scale(s);
        self.push(v, Op::Scale(a, s), &[a])
    }

    pub fn sum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = Tensor::scalar(self.value(a)?.sum());
        self.push(v, Op::Sum(a), &[a])
    }

    pub fn cumsum(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.cumsum_rows()?;
        self.push(v, Op::Cumsum(a), &[a])
    }

    /// Depthwise convolution with taps `w: k×d`, tap `t` reading position
    /// `i − t` of the same segment. Causal mode drops reads before the segment
    /// start; otherwise indices wrap around the segment.
    pub fn conv1d(&mut self, x: NodeId, w: NodeId, segments: &[usize], causal: bool) -> Result<NodeId, AutodiffError> {
        let (xv, wv) = (self.value(x)?, self.value(w)?);
        let (rows, d) = xv.dims2()?;
        let (taps, dw) = wv.dims2()?;
        if dw != d {
            return Err(shape_err("conv1d", xv.shape(), wv.shape()));
        }
        check_segments(segments, rows)?;
        let mut out = Tensor::zeros(&[rows, d]);
        let mut start = 0;
        for &len in segments {
            for i in 0..len {
                for t in 0..taps {
                    let Some(src) = conv_src(i, t, len, causal) else { continue };
                    let (xr, wr) = (xv.row(start + src), wv.row(t));
                    for ((o, &xa), &wa) in out.row_mut(start + i).iter_mut().zip(xr).zip(wr) {
                        *o = *o + xa * wa;
                    }
                }
            }
            start += len;
        }
        self.push(out, Op::Conv1d { x, w, segments: segments.into(), causal }, &[x, w])
    }

    pub fn gelu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.gelu();
        self.push(v, Op::Gelu(a), &[a])
    }

    pub fn silu(&mut self, a: NodeId) -> Result<NodeId, AutodiffError> {
        let v = self.value(a)?.silu();
        self.push(v, Op::Silu(a), &[a])
    }

    /// Selects rows of `x` (embedding lookup, last-position pick).
    pub fn gather(&mut self, x: NodeId, index: &[usize]) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x)?;
        let (rows, d) = xv.dims2()?;
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            if i >= rows {
                return Err(AutodiffError::IndexOutOfRange { index: i, rows });
            }
            data.extend_from_slice(xv.row(i));
        }
        let v = Tensor::new(&[index.len(), d], data)?;
        self.push(v, Op::Gather(x, index.into()), &[x])
    }

    /// Second-order Taylor feature map applied to each of `heads` column blocks.
    pub fn taylor2(&mut self, x: NodeId, heads: usize) -> Result<NodeId, AutodiffError> {
        let xv = self.value(x)?;
        let (rows, w) = xv.dims2()?;
        if heads == 0 || w % heads != 0 {
            return Err(AttentionError::Invalid(format!("width {w} not divisible by {heads} heads")).into());
        }
        let f = w / heads;
        let fd = VectorMap::Taylor2.output_dim(f);
        let mut out = Tensor::zeros(&[rows, heads * fd]);
        for i in 0..rows {
            let (src, dst) = (xv.row(i), out.row_mut(i));
            for h in 0..heads {
                VectorMap::Taylor2.apply_into(&src[h * f..(h + 1) * f], &mut dst[h * fd..(h + 1) * fd]);
            }
        }
        self.push(out, Op::Taylor2 { x, heads }, &[x])
    }

    /// Multi-head linear attention on featurized queries and keys
    /// (`rows × H·D`) and values (`rows × H·d_v`), run per segment.
    pub fn linear_attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        heads: usize,
        causal: bool,
        segments: &[usize],
    ) -> Result<NodeId, AutodiffError> {
        let (qv, kv, vv) = (self.value(q)?, self.value(k)?, self.value(v)?);
        let (rows, wq) = qv.dims2()?;
        let (rk, wk) = kv.dims2()?;
        let (rv, wv) = vv.dims2()?;
        if rk != rows || rv != rows || wk != wq {
            return Err(shape_err("linear_attention", qv.shape(), kv.shape()));
        }
        if heads == 0 || wq % heads != 0 || wv % heads != 0 {
            return Err(AttentionError::Invalid(format!("widths not divisible by {heads} heads")).into());
        }
        check_segments(segments, rows)?;
        let (fd, dv) = (wq / heads, wv / heads);
        let mut out = Tensor::zeros(&[rows, wv]);
        let mut s = vec![T::zero(); fd * dv];
        let mut z = vec![T::zero(); fd];
        let mut start = 0;
        for &len in segments {
            for h in 0..heads {
                s.iter_mut().for_each(|x| *x = T::zero());
                z.iter_mut().for_each(|x| *x = T::zero());
                if !causal {
                    for i in start..start + len {
                        accumulate(&mut s, &mut z, &kv.row(i)[h * fd..(h + 1) * fd], &vv.row(i)[h * dv..(h + 1) * dv]);
                    }
                }
                for i in start..start + len {
                    if causal {
                        accumulate(&mut s, &mut z, &kv.row(i)[h * fd..(h + 1) * fd], &vv.row(i)[h * dv..(h + 1) * dv]);
                    }
                    let y = &mut out.row_mut(i)[h * dv..(h + 1) * dv];
                    readout(&qv.row(i)[h * fd..(h + 1) * fd], &s, &z, T::zero(), i - start, y)?;
                }
            }
            start += len;
        }
        let op = Op::LinearAttention { q, k, v, heads, causal, segments: segments.into() };
        self.push(out, op, &[q, k, v])
    }

    /// Mean cross-entropy over rows with a target; rows with `None` are ignored.
    pub fn softmax_ce(&mut self, logits: NodeId, targets: &[Option<usize>]) -> Result<NodeId, AutodiffError> {
        let (loss, grad) = softmax_cross_entropy(self.value(logits)?, targets)?;
        self.push(Tensor::scalar(loss), Op::SoftmaxCe { logits, grad }, &[logits])
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients<T>, AutodiffError> {
        let ln = self.node(loss)?;
        if ln.value.len() != 1 {
            return Err(AutodiffError::NonScalarLoss(ln.value.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ln.value.shape(), T::one()));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[idx] = Some(g);
        }
        for (slot, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<(), AutodiffError> {
        let val = |id: NodeId| &self.nodes[id.0].value;
        let wants = |id: NodeId| self.nodes[id.0].requires_grad;
        macro_rules! acc {
            ($id:expr) => {
                grad_slot(grads, &self.nodes, $id)
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                let (m, k) = av.dims2()?;
                let n = bv.cols();
                if wants(*a) {
                    kernels::matmul_nt_acc(g.data(), bv.data(), acc!(*a).data_mut(), m, n, k);
                }
                if wants(*b) {
                    kernels::matmul_tn_acc(av.data(), g.data(), acc!(*b).data_mut(), m, k, n);
                }
            }
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if wants(id) {
                        acc!(id).add_assign(g)?;
                    }
                }
            }
            Op::AddBias(a, b) => {
                if wants(*a) {
                    acc!(*a).add_assign(g)?;
                }
                if wants(*b) {
                    let cs = g.sum_rows()?;
                    for (o, c) in acc!(*b).data_mut().iter_mut().zip(cs) {
                        *o = *o + c;
                    }
                }
            }
            Op::Mul(a, b) => {
                for (x, y) in [(*a, *b), (*b, *a)] {
                    if wants(x) {
                        let other = val(y);
                        for ((o, &gv), &ov) in acc!(x).data_mut().iter_mut().zip(g.data()).zip(other.data()) {
                            *o = *o + gv * ov;
                        }
                    }
                }
            }
            Op::Scale(a, s) => {
                if wants(*a) {
                    for (o, &gv) in acc!(*a).data_mut().iter_mut().zip(g.data()) {
                        *o = *o + gv * *s;
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    let gv = g.item()?;
                    acc!(*a).data_mut().iter_mut().for_each(|o| *o = *o + gv);
                }
            }
            Op::Cumsum(a) => {
                if wants(*a) {
                    // Reverse prefix sums.
                    let (n, d) = g.dims2()?;
                    let target = acc!(*a);
                    let mut run = vec![T::zero(); d];
                    for i in (0..n).rev() {
                        for ((r, &gv), o) in run.iter_mut().zip(g.row(i)).zip(target.row_mut(i)) {
                            *r = *r + gv;
                            *o = *o + *r;
                        }
                    }
                }
            }
            Op::Conv1d { x, w, segments, causal } => {
                let (xv, wv) = (val(*x), val(*w));
                let taps = wv.rows();
                let mut start = 0;
                for &len in segments.iter() {
                    for i in 0..len {
                        for t in 0..taps {
                            let Some(src) = conv_src(i, t, len, *causal) else { continue };
                            let gr = g.row(start + i);
                            if wants(*x) {
                                let gx = acc!(*x);
                                for ((o, &gv), &wa) in gx.row_mut(start + src).iter_mut().zip(gr).zip(wv.row(t)) {
                                    *o = *o + gv * wa;
                                }
                            }
                            if wants(*w) {
                                let gw = acc!(*w);
                                for ((o, &gv), &xa) in gw.row_mut(t).iter_mut().zip(gr).zip(xv.row(start + src)) {
                                    *o = *o + gv * xa;
                                }
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Gelu(a) | Op::Silu(a) => {
                if wants(*a) {
                    let d: fn(T) -> T = match node.op {
                        Op::Gelu(_) => kernels::gelu_grad,
                        _ => kernels::silu_grad,
                    };
                    let xv = val(*a);
                    for ((o, &gv), &xa) in acc!(*a).data_mut().iter_mut().zip(g.data()).zip(xv.data()) {
                        *o = *o + gv * d(xa);
                    }
                }
            }
            Op::Gather(x, index) => {
                if wants(*x) {
                    let gx = acc!(*x);
                    for (r, &i) in index.iter().enumerate() {
                        for (o, &gv) in gx.row_mut(i).iter_mut().zip(g.row(r)) {
                            *o = *o + gv;
                        }
                    }
                }
            }
            Op::Taylor2 { x, heads } => {
                if wants(*x) {
                    let xv = val(*x);
                    let (rows, w) = xv.dims2()?;
                    let f = w / heads;
                    let fd = VectorMap::Taylor2.output_dim(f);
                    let gx = acc!(*x);
                    for i in 0..rows {
                        for h in 0..*heads {
                            taylor2_backward(
                                &xv.row(i)[h * f..(h + 1) * f],
                                &g.row(i)[h * fd..(h + 1) * fd],
                                &mut gx.row_mut(i)[h * f..(h + 1) * f],
                            );
                        }
                    }
                }
            }
            Op::LinearAttention { q, k, v, heads, causal, segments } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let fd = qv.cols() / heads;
                let dv = vv.cols() / heads;
                let mut start = 0;
                for &len in segments.iter() {
                    for h in 0..*heads {
                        let pq = block(qv, start, len, h * fd, fd);
                        let pk = block(kv, start, len, h * fd, fd);
                        let pv = block(vv, start, len, h * dv, dv);
                        let gy = block(g, start, len, h * dv, dv);
                        let (gq, gk, gvv) = attend_backward(&pq, &pk, &pv, &gy, len, fd, dv, *causal, T::zero())?;
                        if wants(*q) {
                            add_block(acc!(*q), start, len, h * fd, fd, &gq);
                        }
                        if wants(*k) {
                            add_block(acc!(*k), start, len, h * fd, fd, &gk);
                        }
                        if wants(*v) {
                            add_block(acc!(*v), start, len, h * dv, dv, &gvv);
                        }
                    }
                    start += len;
                }
            }
            Op::SoftmaxCe { logits, grad } => {
                if wants(*logits) {
                    let gv = g.item()?;
                    for (o, &c) in acc!(*logits).data_mut().iter_mut().zip(grad.data()) {
                        *o = *o + gv * c;
                    }
                }
            }
        }
        Ok(())
    }
}

/// Central differences `(f(θ + h·e) − f(θ − h·e)) / 2h` for every coordinate
/// of every parameter tensor.
///
/// # Panics
/// If `h` is not positive.
pub fn finite_diff_grad<T: Real>(mut f: impl FnMut(&[Tensor<T>]) -> T, params: &[Tensor<T>], h: T) -> Vec<Tensor<T>> {
    assert!(h > T::zero(), "finite-difference step must be positive");
    let mut work = params.to_vec();
    let two_h = h + h;
    let mut out = Vec::with_capacity(params.len());
    for p in 0..params.len() {
        let mut g = Tensor::zeros(params[p].shape());
        for i in 0..params[p].len() {
            let orig = params[p].data()[i];
            work[p].data_mut()[i] = orig + h;
            let plus = f(&work);
            work[p].data_mut()[i] = orig - h;
            let minus = f(&work);
            work[p].data_mut()[i] = orig;
            g.data_mut()[i] = (plus - minus) / two_h;
        }
        out.push(g);
    }
    out
}

/// Largest elementwise relative error `|a − b| / max(|a|, |b|, floor)`.
pub fn max_rel_err<T: Real>(a: &Tensor<T>, b: &Tensor<T>, floor: f64) -> f64 {
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| {
            let (x, y) = (x.as_f64(), y.as_f64());
            (x - y).abs() / x.abs().max(y.abs()).max(floor)
        })
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::new(shape, (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Runs `build` on a fresh tape, returning the loss value.
    fn eval(build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId, params: &[Tensor<f64>]) -> f64 {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        tape.value(loss).unwrap().item().unwrap()
    }

    fn check(build: &dyn Fn(&mut Tape<f64>, &[NodeId]) -> NodeId, params: &[Tensor<f64>]) {
        let mut tape = Tape::<f64>::new();
        let ids: Vec<_> = params.iter().map(|p| tape.param(p.clone())).collect();
        let loss = build(&mut tape, &ids);
        let grads = tape.backward(loss).unwrap();
        let fd = finite_diff_grad(|p| eval(build, p), params, 1e-4);
        for (id, want) in ids.iter().zip(&fd) {
            let got = grads.wrt(*id).unwrap();
            let err = max_rel_err(got, want, 1e-3);
            assert!(err <= 1e-5, "rel err {err}");
        }
    }

    #[test]
    fn square_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(x).unwrap().item().unwrap(), 6.0);
    }

    #[test]
    fn uniform_cross_entropy_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[1, 4]));
        let l = tape.softmax_ce(x, &[Some(2)]).unwrap();
        assert!((tape.value(l).unwrap().item().unwrap() - 4f64.ln()).abs() < 1e-12);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[0.25, 0.25, -0.75, 0.25]);
    }

    #[test]
    fn errors() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros(&[2, 2]));
        let unused = tape.param(Tensor::zeros(&[1]));
        assert!(matches!(tape.backward(x), Err(AutodiffError::NonScalarLoss(_))));
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.wrt(unused).unwrap_err(), AutodiffError::Disconnected(1));
        assert_eq!(g.wrt(NodeId(99)).unwrap_err(), AutodiffError::UnknownNode(99));
        assert!(matches!(tape.backward(NodeId(50)), Err(AutodiffError::UnknownNode(50))));
        assert!(tape.gather(x, &[2]).is_err());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let c = tape.constant(Tensor::scalar(2.0));
        let p = tape.param(Tensor::scalar(5.0));
        let y = tape.mul(c, p).unwrap();
        let g = tape.backward(y).unwrap();
        assert_eq!(g.wrt(p).unwrap().item().unwrap(), 2.0);
        assert!(g.wrt(c).is_err());
    }

    #[test]
    fn finite_diff_examples() {
        let g = finite_diff_grad(|p| p[0].item().unwrap().powi(2), &[Tensor::<f64>::scalar(1.0)], 1e-4);
        assert!((g[0].item().unwrap() - 2.0).abs() < 1e-7);
        let g = finite_diff_grad(|p| 3.0 * p[0].item().unwrap(), &[Tensor::<f64>::scalar(0.7)], 1e-4);
        assert!((g[0].item().unwrap() - 3.0).abs() < 1e-10);
    }

    #[test]
    fn primitives_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random(&mut rng, &[4, 3]);
            let b = random(&mut rng, &[3, 5]);
            let c = random(&mut rng, &[4, 3]);
            let bias = random(&mut rng, &[3]);
            let w = random(&mut rng, &[3, 3]);
            let w_row = random(&mut rng, &[4, 5]);
            let seg: &[usize] = &[3, 1];

            check(
                &|t, p| {
                    let y = t.matmul(p[0], p[1]).unwrap();
                    let y = t.mul(y, y).unwrap();
                    t.sum(y).unwrap()
                },
                &[a.clone(), b.clone()],
            );
            check(
                &|t, p| {
                    let y = t.add(p[0], p[1]).unwrap();
                    let y = t.mul(y, y).unwrap();
                    t.sum(y).unwrap()
                },
                &[a.clone(), c.clone()],
            );
            check(
                &|t, p| {
                    let y = t.add_bias(p[0], p[1]).unwrap();
                    let y = t.gelu(y).unwrap();
                    t.sum(y).unwrap()
                },
                &[a.clone(), bias.clone()],
            );
            check(
                &|t, p| {
                    let y = t.scale(p[0], 0.3).unwrap();
                    let y = t.silu(y).unwrap();
                    t.sum(y).unwrap()
                },
                std::slice::from_ref(&a),
            );
            check(
                &|t, p| {
                    let y = t.cumsum(p[0]).unwrap();
                    let y = t.mul(y, y).unwrap();
                    t.sum(y).unwrap()
                },
                std::slice::from_ref(&a),
            );
            for causal in [true, false] {
                check(
                    &|t, p| {
                        let y = t.conv1d(p[0], p[1], seg, causal).unwrap();
                        let y = t.mul(y, y).unwrap();
                        t.sum(y).unwrap()
                    },
                    &[a.clone(), w.clone()],
                );
            }
            check(
                &|t, p| {
                    let y = t.gather(p[0], &[3, 0, 3]).unwrap();
                    let y = t.mul(y, y).unwrap();
                    t.sum(y).unwrap()
                },
                std::slice::from_ref(&a),
            );
            let targets = [Some(1), None, Some(4), Some(0)];
            check(&|t, p| t.softmax_ce(p[0], &targets).unwrap(), std::slice::from_ref(&w_row));
        }
    }

    #[test]
    fn attention_primitives_match_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(100 + seed);
            let q = random(&mut rng, &[5, 4]);
            let k = random(&mut rng, &[5, 4]);
            let v = random(&mut rng, &[5, 6]);
            let r = random(&mut rng, &[5, 6]);
            let seg: &[usize] = &[2, 3];
            check(
                &|t, p| {
                    let y = t.taylor2(p[0], 2).unwrap();
                    let y = t.mul(y, y).unwrap();
                    t.sum(y).unwrap()
                },
                std::slice::from_ref(&q),
            );
            for causal in [true, false] {
                let rr = r.clone();
                check(
                    &move |t, p| {
                        let fq = t.taylor2(p[0], 2).unwrap();
                        let fk = t.taylor2(p[1], 2).unwrap();
                        let y = t.linear_attention(fq, fk, p[2], 2, causal, seg).unwrap();
                        let r = t.constant(rr.clone());
                        let y = t.mul(y, r).unwrap();
                        t.sum(y).unwrap()
                    },
                    &[q.clone(), k.clone(), v.clone()],
                );
            }
        }
    }

    #[test]
    fn composite_matches_finite_differences() {
        for seed in 0..20 {
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            let x = random(&mut rng, &[6, 4]);
            let w1 = random(&mut rng, &[4, 8]);
            let w2 = random(&mut rng, &[8, 8]);
            let w3 = random(&mut rng, &[8, 5]);
            let b = random(&mut rng, &[8]);
            check(
                &|t, p| {
                    let h = t.matmul(p[0], p[1]).unwrap();
                    let h = t.add_bias(h, p[4]).unwrap();
                    let h = t.gelu(h).unwrap();
                    let h = t.matmul(h, p[2]).unwrap();
                    let h = t.silu(h).unwrap();
                    let h = t.matmul(h, p[3]).unwrap();
                    t.softmax_ce(h, &[Some(0), Some(1), None, Some(2), Some(3), Some(4)]).unwrap()
                },
                &[x, w1, w2, w3, b],
            );
        }
    }

    #[test]
    fn linear_attention_op_matches_eager() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let q = random(&mut rng, &[7, 4]);
        let k = random(&mut rng, &[7, 4]);
        let v = random(&mut rng, &[7, 4]);
        let mut tape = Tape::<f64>::new();
        let (qi, ki, vi) = (tape.constant(q.clone()), tape.constant(k.clone()), tape.constant(v.clone()));
        let (fq, fk) = (tape.taylor2(qi, 2).unwrap(), tape.taylor2(ki, 2).unwrap());
        let y = tape.linear_attention(fq, fk, vi, 2, true, &[7]).unwrap();
        let mh = crate::linear_attention::MultiHead { heads: 2, map: VectorMap::Taylor2, causal: true };
        let want = mh.forward(&q, &k, &v).unwrap();
        assert!(max_rel_err(tape.value(y).unwrap(), &want, 1e-12) < 1e-12);
    }
}
