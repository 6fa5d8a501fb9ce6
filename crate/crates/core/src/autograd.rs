//! Tape-based reverse-mode differentiation over [`Mat`] values.
//!
//! A [`Graph`] records every operation applied during a forward pass.
//! Calling [`Graph::backward`] on a scalar node walks the tape in reverse and
//! returns gradients for every node that depends on a trainable input.

use std::collections::HashMap;

use crate::dsp::{self, StftPlan};
use crate::nn::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::{gemm_into, Mat};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Query/key row ranges of one attention group (one batch item).
#[derive(Clone, Copy, Debug)]
pub struct AttnSegment {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Tanh(Var),
    Exp(Var),
    Square(Var),
    LayerNorm { x: Var, inv_std: Vec<T> },
    ExpandSegments { m: Var, lens: Vec<usize> },
    Gather { table: Var, idx: Vec<usize> },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols { x: Var, start: usize },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: Vec<AttnSegment>,
        probs: Vec<Mat<T>>,
    },
    Frames { x: Var, kernel: usize, stride: usize, pad: usize },
    OverlapAdd { f: Var, kernel: usize, stride: usize, pad: usize },
    Sum(Var),
    /// Scalar loss whose local gradient w.r.t. its single input was
    /// computed during the forward pass.
    Loss { input: Var, local_grad: Mat<T> },
}

struct Node<T> {
    value: Mat<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    params: HashMap<usize, Var>,
    track: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Mat<T>>>,
    params: HashMap<usize, Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Mat<T>> {
        self.grads[v.0].as_ref()
    }

    /// Gradient for parameter `id` of the store the graph read from.
    pub fn param(&self, id: usize) -> Option<&Mat<T>> {
        self.params.get(&id).and_then(|v| self.get(*v))
    }

    /// Adds every parameter gradient into `acc` (one slot per store entry).
    pub fn accumulate_into(&self, acc: &mut [Option<Mat<T>>]) {
        for (&id, &v) in &self.params {
            if let Some(g) = self.get(v) {
                match &mut acc[id] {
                    Some(a) => a.add_assign(g),
                    slot @ None => *slot = Some(g.clone()),
                }
            }
        }
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records operations for backpropagation.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: true,
        }
    }

    /// A graph for inference: nothing requires gradients and no
    /// backward-only state is kept.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            track: false,
        }
    }

    pub fn value(&self, v: Var) -> &Mat<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Mat<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Mat::zeros(0, 0))
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    fn push(&mut self, value: Mat<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.track,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, false)
    }

    /// A free leaf that receives a gradient (used by gradient checks).
    pub fn variable(&mut self, m: Mat<T>) -> Var {
        self.push(m, Op::Leaf, true)
    }

    /// Leaf bound to parameter `id` of `store`; repeated calls share a node.
    pub fn param(&mut self, store: &ParamStore<T>, id: usize) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param, store.is_trainable(id));
        self.params.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Mat::zeros(va.rows, vb.cols);
        gemm_into(va, false, vb, false, &mut out, T::zero());
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::Mul(a, b), rg)
    }

    /// `a + row` with `row` (1 x n) broadcast over all rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (self.value(a), self.value(row));
        assert_eq!((vr.rows, vr.cols), (1, va.cols), "add_row expects a 1x{} row", va.cols);
        let mut out = va.clone();
        for r in 0..out.rows {
            for (o, &b) in out.row_mut(r).iter_mut().zip(&vr.data) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(row);
        self.push(out, Op::AddRow(a, row), rg)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, s), rg)
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * sigmoid(x));
        let rg = self.rg(a);
        self.push(out, Op::Silu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        let rg = self.rg(a);
        self.push(out, Op::Exp(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        let rg = self.rg(a);
        self.push(out, Op::Square(a), rg)
    }

    /// Per-row normalisation to zero mean and unit variance (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Var {
        let va = self.value(a);
        let n = T::from_usize(va.cols).unwrap();
        let mut out = va.clone();
        let mut inv_std = Vec::with_capacity(va.rows);
        for r in 0..va.rows {
            let row = out.row_mut(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<T>() / n;
            let is = T::one() / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm { x: a, inv_std }, rg)
    }

    /// Repeats row `i` of `m` `lens[i]` times, stacking the copies.
    pub fn expand_segments(&mut self, m: Var, lens: &[usize]) -> Var {
        let vm = self.value(m);
        assert_eq!(vm.rows, lens.len(), "one segment length per row");
        let total: usize = lens.iter().sum();
        let mut out = Mat::zeros(total, vm.cols);
        let mut r = 0;
        for (i, &l) in lens.iter().enumerate() {
            for _ in 0..l {
                out.row_mut(r).copy_from_slice(vm.row(i));
                r += 1;
            }
        }
        let rg = self.rg(m);
        self.push(out, Op::ExpandSegments { m, lens: lens.to_vec() }, rg)
    }

    /// Row lookup: output row `r` is `table[idx[r]]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Var {
        let vt = self.value(table);
        let mut out = Mat::zeros(idx.len(), vt.cols);
        for (r, &i) in idx.iter().enumerate() {
            out.row_mut(r).copy_from_slice(vt.row(i));
        }
        let rg = self.rg(table);
        self.push(out, Op::Gather { table, idx: idx.to_vec() }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|&p| self.value(p).cols).sum();
        let mut out = Mat::zeros(rows, cols);
        let mut off = 0;
        for &p in parts {
            let vp = self.value(p);
            assert_eq!(vp.rows, rows, "concat_cols height mismatch");
            for r in 0..rows {
                out.row_mut(r)[off..off + vp.cols].copy_from_slice(vp.row(r));
            }
            off += vp.cols;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let refs: Vec<&Mat<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Mat::vstack(&refs);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let out = self.value(x).cols_range(start, len);
        let rg = self.rg(x);
        self.push(out, Op::SliceCols { x, start }, rg)
    }

    /// Multi-head scaled dot-product attention. Each segment attends only
    /// within its own query/key row ranges.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, segs: &[AttnSegment]) -> Var {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols;
        assert_eq!(vk.cols, d, "key width");
        assert_eq!(vv.cols, d, "value width");
        assert_eq!(vk.rows, vv.rows, "key/value rows");
        assert_eq!(d % heads, 0, "width divisible by heads");
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        let keep = rg && self.track;
        let mut out: Mat<T> = Mat::zeros(vq.rows, d);
        let mut probs = Vec::new();
        for s in segs {
            for h in 0..heads {
                let mut p: Mat<T> = Mat::zeros(s.q_len, s.k_len);
                // SAFETY: views stay inside q/k/v/out by construction of the segments.
                unsafe {
                    T::gemm(
                        s.q_len,
                        dh,
                        s.k_len,
                        scale,
                        vq.data.as_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                        vk.data.as_ptr().add(s.k_start * d + h * dh),
                        1,
                        d as isize,
                        T::zero(),
                        p.data.as_mut_ptr(),
                        s.k_len as isize,
                        1,
                    );
                }
                softmax_rows(&mut p);
                unsafe {
                    T::gemm(
                        s.q_len,
                        s.k_len,
                        dh,
                        T::one(),
                        p.data.as_ptr(),
                        s.k_len as isize,
                        1,
                        vv.data.as_ptr().add(s.k_start * d + h * dh),
                        d as isize,
                        1,
                        T::zero(),
                        out.data.as_mut_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
                if keep {
                    probs.push(p);
                }
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs: segs.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Strided framing of each row of `x` (batch x len) into
    /// `(batch * len / stride) x kernel`, zero-padded by `pad` on the left.
    pub fn frames(&mut self, x: Var, kernel: usize, stride: usize, pad: usize) -> Var {
        let out = frames_forward(self.value(x), kernel, stride, pad);
        let rg = self.rg(x);
        self.push(out, Op::Frames { x, kernel, stride, pad }, rg)
    }

    /// Transposed framing: overlap-adds `(batch * n) x kernel` frames into
    /// `batch` rows of `n * stride` samples.
    pub fn overlap_add(&mut self, f: Var, batch: usize, kernel: usize, stride: usize, pad: usize) -> Var {
        let out = overlap_add_forward(self.value(f), batch, kernel, stride, pad);
        let rg = self.rg(f);
        self.push(out, Op::OverlapAdd { f, kernel, stride, pad }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        let rg = self.rg(a);
        self.push(Mat::filled(1, 1, s), Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n.max(1)).unwrap())
    }

    /// `sum_r w_r * ||pred_r - target_r||^2`.
    pub fn weighted_sq_err(&mut self, pred: Var, target: &Mat<T>, row_w: &[T]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "weighted_sq_err shape");
        assert_eq!(row_w.len(), vp.rows, "one weight per row");
        let two = T::c(2.0);
        let mut grad = Mat::zeros(vp.rows, vp.cols);
        let mut loss = T::zero();
        for r in 0..vp.rows {
            let w = row_w[r];
            if w == T::zero() {
                continue;
            }
            for c in 0..vp.cols {
                let d = vp.at(r, c) - target.at(r, c);
                loss += w * d * d;
                grad.set(r, c, two * w * d);
            }
        }
        self.loss_node(pred, loss, grad)
    }

    /// Mean absolute error against a constant target.
    pub fn l1_loss(&mut self, pred: Var, target: &Mat<T>) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "l1 shape");
        let n = T::from_usize(vp.len()).unwrap();
        let mut loss = T::zero();
        let grad = vp.zip_map(target, |p, t| {
            let d = p - t;
            loss += d.abs();
            sign(d) / n
        });
        self.loss_node(pred, loss / n, grad)
    }

    /// Multi-resolution STFT magnitude loss (linear L1 + log L1) of each
    /// waveform row against a constant target.
    pub fn stft_loss(&mut self, pred: Var, target: &Mat<T>, plans: &[StftPlan<T>]) -> Var {
        let vp = self.value(pred);
        assert_eq!(vp.shape(), target.shape(), "stft_loss shape");
        let mut total = T::zero();
        let mut grad = Mat::zeros(vp.rows, vp.cols);
        for plan in plans {
            for r in 0..vp.rows {
                let (l, g) = dsp::stft_mag_loss_and_grad(plan, vp.row(r), target.row(r));
                total += l / T::from_usize(vp.rows).unwrap();
                for (acc, gv) in grad.row_mut(r).iter_mut().zip(g) {
                    *acc += gv / T::from_usize(vp.rows).unwrap();
                }
            }
        }
        self.loss_node(pred, total, grad)
    }

    /// Mean softmax cross-entropy of logit rows against (soft) target rows.
    pub fn softmax_xent(&mut self, logits: Var, targets: &Mat<T>) -> Var {
        let vl = self.value(logits);
        assert_eq!(vl.shape(), targets.shape(), "xent shape");
        let mut p = vl.clone();
        softmax_rows(&mut p);
        let n = T::from_usize(vl.rows).unwrap();
        let mut loss = T::zero();
        let tiny = T::c(1e-30);
        for (pv, tv) in p.data.iter().zip(&targets.data) {
            if *tv > T::zero() {
                loss -= *tv * (*pv + tiny).ln();
            }
        }
        let grad = p.zip_map(targets, |a, b| (a - b) / n);
        self.loss_node(logits, loss / n, grad)
    }

    fn loss_node(&mut self, input: Var, loss: T, local_grad: Mat<T>) -> Var {
        let rg = self.rg(input);
        let local_grad = if rg { local_grad } else { Mat::zeros(0, 0) };
        self.push(Mat::filled(1, 1, loss), Op::Loss { input, local_grad }, rg)
    }

    /// Reverse pass from the scalar node `root`.
    pub fn backward(&self, root: Var) -> Gradients<T> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Option<Mat<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Mat::filled(1, 1, T::one()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn backprop_node(&self, node: &Node<T>, g: &Mat<T>, grads: &mut [Option<Mat<T>>]) {
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                if self.rg(*a) {
                    let ga = grad_buf(grads, *a, va.rows, va.cols);
                    gemm_into(g, false, vb, true, ga, T::one());
                }
                if self.rg(*b) {
                    let gb = grad_buf(grads, *b, vb.rows, vb.cols);
                    gemm_into(va, true, g, false, gb, T::one());
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g);
                self.acc(grads, *b, g);
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g);
                if self.rg(*b) {
                    self.acc(grads, *b, &g.map(|x| -x));
                }
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = g.zip_map(self.value(*b), |x, y| x * y);
                    self.acc(grads, *a, &d);
                }
                if self.rg(*b) {
                    let d = g.zip_map(self.value(*a), |x, y| x * y);
                    self.acc(grads, *b, &d);
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, g);
                if self.rg(*row) {
                    let mut s = Mat::zeros(1, g.cols);
                    for r in 0..g.rows {
                        for (acc, &x) in s.data.iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                    self.acc(grads, *row, &s);
                }
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, &g.map(|x| x * s));
            }
            Op::Silu(a) => {
                let d = g.zip_map(self.value(*a), |gy, x| {
                    let sg = sigmoid(x);
                    gy * sg * (T::one() + x * (T::one() - sg))
                });
                self.acc(grads, *a, &d);
            }
            Op::Tanh(a) => {
                let d = g.zip_map(&node.value, |gy, y| gy * (T::one() - y * y));
                self.acc(grads, *a, &d);
            }
            Op::Exp(a) => {
                let d = g.zip_map(&node.value, |gy, y| gy * y);
                self.acc(grads, *a, &d);
            }
            Op::Square(a) => {
                let two = T::c(2.0);
                let d = g.zip_map(self.value(*a), |gy, x| two * gy * x);
                self.acc(grads, *a, &d);
            }
            Op::LayerNorm { x, inv_std } => {
                let y = &node.value;
                let n = T::from_usize(y.cols).unwrap();
                let mut d = Mat::zeros(y.rows, y.cols);
                for r in 0..y.rows {
                    let (gr, yr) = (g.row(r), y.row(r));
                    let mg = gr.iter().copied().sum::<T>() / n;
                    let mgy = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum::<T>() / n;
                    for ((o, &gv), &yv) in d.row_mut(r).iter_mut().zip(gr).zip(yr) {
                        *o = inv_std[r] * (gv - mg - yv * mgy);
                    }
                }
                self.acc(grads, *x, &d);
            }
            Op::ExpandSegments { m, lens } => {
                if self.rg(*m) {
                    let vm = self.value(*m);
                    let gm = grad_buf(grads, *m, vm.rows, vm.cols);
                    let mut r = 0;
                    for (i, &l) in lens.iter().enumerate() {
                        for _ in 0..l {
                            for (acc, &x) in gm.row_mut(i).iter_mut().zip(g.row(r)) {
                                *acc += x;
                            }
                            r += 1;
                        }
                    }
                }
            }
            Op::Gather { table, idx } => {
                if self.rg(*table) {
                    let vt = self.value(*table);
                    let gt = grad_buf(grads, *table, vt.rows, vt.cols);
                    for (r, &i) in idx.iter().enumerate() {
                        for (acc, &x) in gt.row_mut(i).iter_mut().zip(g.row(r)) {
                            *acc += x;
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).cols;
                    if self.rg(p) {
                        let part = g.cols_range(off, w);
                        self.acc(grads, p, &part);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let h = self.value(p).rows;
                    if self.rg(p) {
                        let part = g.rows_range(off, off + h);
                        self.acc(grads, p, &part);
                    }
                    off += h;
                }
            }
            Op::SliceCols { x, start } => {
                let vx = self.value(*x);
                let gx = grad_buf(grads, *x, vx.rows, vx.cols);
                for r in 0..g.rows {
                    for (acc, &v) in gx.row_mut(r)[*start..*start + g.cols].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                heads,
                segs,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *heads, segs, probs, grads),
            Op::Frames { x, kernel, stride, pad } => {
                let vx = self.value(*x);
                let d = overlap_add_forward(g, vx.rows, *kernel, *stride, *pad);
                self.acc(grads, *x, &d);
            }
            Op::OverlapAdd { f, kernel, stride, pad } => {
                let d = frames_forward(g, *kernel, *stride, *pad);
                self.acc(grads, *f, &d);
            }
            Op::Sum(a) => {
                let va = self.value(*a);
                let d = Mat::filled(va.rows, va.cols, g.data[0]);
                self.acc(grads, *a, &d);
            }
            Op::Loss { input, local_grad } => {
                let s = g.data[0];
                self.acc(grads, *input, &local_grad.map(|x| x * s));
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &Mat<T>,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        segs: &[AttnSegment],
        probs: &[Mat<T>],
        grads: &mut [Option<Mat<T>>],
    ) {
        let (vq, vk, vv) = (self.value(q), self.value(k), self.value(v));
        let d = vq.cols;
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut gq: Mat<T> = Mat::zeros(vq.rows, d);
        let mut gk: Mat<T> = Mat::zeros(vk.rows, d);
        let mut gv: Mat<T> = Mat::zeros(vv.rows, d);
        let mut pi = 0;
        for s in segs {
            for h in 0..heads {
                let p = &probs[pi];
                pi += 1;
                let mut dp: Mat<T> = Mat::zeros(s.q_len, s.k_len);
                // SAFETY: identical view arithmetic to the forward pass.
                unsafe {
                    // dP = dO_h V_h^T
                    T::gemm(
                        s.q_len,
                        dh,
                        s.k_len,
                        T::one(),
                        g.data.as_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                        vv.data.as_ptr().add(s.k_start * d + h * dh),
                        1,
                        d as isize,
                        T::zero(),
                        dp.data.as_mut_ptr(),
                        s.k_len as isize,
                        1,
                    );
                    // dV_h += P^T dO_h
                    T::gemm(
                        s.k_len,
                        s.q_len,
                        dh,
                        T::one(),
                        p.data.as_ptr(),
                        1,
                        s.k_len as isize,
                        g.data.as_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gv.data.as_mut_ptr().add(s.k_start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
                // dS = P * (dP - rowsum(dP * P)), folded with the logit scale.
                for r in 0..s.q_len {
                    let pr = p.row(r);
                    let dot: T = dp.row(r).iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dp.row_mut(r).iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                unsafe {
                    // dQ_h += dS K_h
                    T::gemm(
                        s.q_len,
                        s.k_len,
                        dh,
                        T::one(),
                        dp.data.as_ptr(),
                        s.k_len as isize,
                        1,
                        vk.data.as_ptr().add(s.k_start * d + h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gq.data.as_mut_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                    );
                    // dK_h += dS^T Q_h
                    T::gemm(
                        s.k_len,
                        s.q_len,
                        dh,
                        T::one(),
                        dp.data.as_ptr(),
                        1,
                        s.k_len as isize,
                        vq.data.as_ptr().add(s.q_start * d + h * dh),
                        d as isize,
                        1,
                        T::one(),
                        gk.data.as_mut_ptr().add(s.k_start * d + h * dh),
                        d as isize,
                        1,
                    );
                }
            }
        }
        if self.rg(q) {
            self.acc(grads, q, &gq);
        }
        if self.rg(k) {
            self.acc(grads, k, &gk);
        }
        if self.rg(v) {
            self.acc(grads, v, &gv);
        }
    }

    fn acc(&self, grads: &mut [Option<Mat<T>>], v: Var, g: &Mat<T>) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(a) => a.add_assign(g),
            slot @ None => *slot = Some(g.clone()),
        }
    }
}

fn grad_buf<T: Scalar>(grads: &mut [Option<Mat<T>>], v: Var, rows: usize, cols: usize) -> &mut Mat<T> {
    grads[v.0].get_or_insert_with(|| Mat::zeros(rows, cols))
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

#[inline]
fn sign<T: Scalar>(x: T) -> T {
    if x > T::zero() {
        T::one()
    } else if x < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn softmax_rows<T: Scalar>(m: &mut Mat<T>) {
    for r in 0..m.rows {
        let row = m.row_mut(r);
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut s = T::zero();
        for x in row.iter_mut() {
            *x = (*x - mx).exp();
            s += *x;
        }
        for x in row.iter_mut() {
            *x = *x / s;
        }
    }
}

fn frames_forward<T: Scalar>(x: &Mat<T>, kernel: usize, stride: usize, pad: usize) -> Mat<T> {
    let len = x.cols;
    assert_eq!(len % stride, 0, "length {len} not a multiple of stride {stride}");
    let n = len / stride;
    let mut out = Mat::zeros(x.rows * n, kernel);
    for b in 0..x.rows {
        let src = x.row(b);
        for i in 0..n {
            let dst = out.row_mut(b * n + i);
            let start = (i * stride) as isize - pad as isize;
            for (j, o) in dst.iter_mut().enumerate() {
                let s = start + j as isize;
                if s >= 0 && (s as usize) < len {
                    *o = src[s as usize];
                }
            }
        }
    }
    out
}

fn overlap_add_forward<T: Scalar>(f: &Mat<T>, batch: usize, kernel: usize, stride: usize, pad: usize) -> Mat<T> {
    assert_eq!(f.cols, kernel, "frame width");
    assert_eq!(f.rows % batch, 0, "frames divisible by batch");
    let n = f.rows / batch;
    let len = n * stride;
    let mut out = Mat::zeros(batch, len);
    for b in 0..batch {
        let dst = out.row_mut(b);
        for i in 0..n {
            let src = f.row(b * n + i);
            let start = (i * stride) as isize - pad as isize;
            for (j, &v) in src.iter().enumerate() {
                let s = start + j as isize;
                if s >= 0 && (s as usize) < len {
                    dst[s as usize] += v;
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central finite differences of a scalar function of one input matrix.
    fn numeric_grad(x: &Mat<f64>, f: &dyn Fn(&Mat<f64>) -> f64) -> Mat<f64> {
        let h = 1e-6;
        let mut g = Mat::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += h;
            let mut m = x.clone();
            m.data[i] -= h;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * h);
        }
        g
    }

    fn check(x: Mat<f64>, build: &dyn Fn(&mut Graph<f64>, Var) -> Var) {
        let f = |m: &Mat<f64>| {
            let mut gr = Graph::new();
            let v = gr.variable(m.clone());
            let out = build(&mut gr, v);
            gr.scalar(out)
        };
        let mut gr = Graph::new();
        let v = gr.variable(x.clone());
        let out = build(&mut gr, v);
        let grads = gr.backward(out);
        let analytic = grads.get(v).cloned().unwrap_or_else(|| Mat::zeros(x.rows, x.cols));
        let numeric = numeric_grad(&x, &f);
        let err = analytic.max_abs_diff(&numeric);
        let scale = numeric.data.iter().fold(1e-3f64, |a, b| a.max(b.abs()));
        assert!(err / scale < 1e-5, "gradient mismatch {err} (scale {scale})");
    }

    fn rnd(rows: usize, cols: usize, seed: u64) -> Mat<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Mat::randn(rows, cols, 1.0, &mut rng)
    }

    #[test]
    fn elementwise_ops_match_finite_differences() {
        let w = rnd(3, 4, 1);
        check(rnd(3, 4, 2), &|g, x| {
            let c = g.constant(w.clone());
            let a = g.mul(x, c);
            let b = g.silu(a);
            let t = g.tanh(x);
            let e = g.exp(t);
            let s = g.add(b, e);
            let q = g.square(s);
            let d = g.sub(q, x);
            g.mean(d)
        });
    }

    #[test]
    fn matmul_and_broadcasts_match_finite_differences() {
        let w = rnd(4, 5, 3);
        let row = rnd(1, 5, 4);
        check(rnd(3, 4, 5), &|g, x| {
            let wv = g.constant(w.clone());
            let rv = g.constant(row.clone());
            let y = g.matmul(x, wv);
            let y = g.add_row(y, rv);
            let n = g.layer_norm(y, 1e-5);
            let s = g.slice_cols(n, 1, 3);
            let e = g.expand_segments(x, &[2, 0, 1]);
            let c = g.concat_cols(&[s, x]);
            let r = g.concat_rows(&[c, c]);
            let gt = g.gather(x, &[2, 2, 0]);
            let a = g.square(r);
            let b = g.square(e);
            let sa = g.sum(a);
            let sb = g.sum(b);
            let sg = g.sum(gt);
            let t = g.add(sa, sb);
            g.add(t, sg)
        });
    }

    #[test]
    fn matmul_rhs_gradient() {
        let a = rnd(3, 4, 6);
        check(rnd(4, 2, 7), &|g, x| {
            let av = g.constant(a.clone());
            let y = g.matmul(av, x);
            let y = g.square(y);
            g.sum(y)
        });
    }

    #[test]
    fn attention_matches_finite_differences() {
        let segs = [
            AttnSegment { q_start: 0, q_len: 3, k_start: 0, k_len: 2 },
            AttnSegment { q_start: 3, q_len: 2, k_start: 2, k_len: 3 },
        ];
        let kv = rnd(5, 4, 8);
        let target = rnd(5, 4, 9);
        // gradient w.r.t. queries
        check(rnd(5, 4, 10), &|g, x| {
            let k = g.constant(kv.clone());
            let o = g.attention(x, k, k, 2, &segs);
            g.weighted_sq_err(o, &target, &[1.0; 5])
        });
        // gradient w.r.t. shared keys/values
        let q = rnd(5, 4, 11);
        check(kv.clone(), &|g, x| {
            let qv = g.constant(q.clone());
            let o = g.attention(qv, x, x, 2, &segs);
            g.weighted_sq_err(o, &target, &[1.0, 0.5, 0.0, 2.0, 1.0])
        });
    }

    #[test]
    fn framing_pair_matches_finite_differences() {
        let target = rnd(2, 12, 12);
        check(rnd(2, 12, 13), &|g, x| {
            let f = g.frames(x, 6, 3, 1);
            let f = g.tanh(f);
            let y = g.overlap_add(f, 2, 6, 3, 1);
            g.l1_loss(y, &target)
        });
    }

    #[test]
    fn softmax_xent_matches_finite_differences() {
        let t = Mat::from_vec(2, 3, vec![1.0, 0.0, 0.0, 0.2, 0.3, 0.5]);
        check(rnd(2, 3, 14), &|g, x| g.softmax_xent(x, &t));
    }

    #[test]
    fn stft_loss_matches_finite_differences() {
        let plans = vec![StftPlan::<f64>::new(8, 4)];
        let target = rnd(1, 32, 15);
        check(rnd(1, 32, 16), &|g, x| g.stft_loss(x, &target, &plans));
    }

    #[test]
    fn inference_graph_tracks_nothing() {
        let mut g = Graph::<f32>::inference();
        let x = g.variable(Mat::filled(2, 2, 1.0));
        let y = g.square(x);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert!(grads.get(x).is_none());
    }
}
