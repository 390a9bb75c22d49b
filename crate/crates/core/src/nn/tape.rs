//! Reverse-mode automatic differentiation over 2-D tensors.

use super::params::{Gradients, ParamId, ParamSet, StatUpdate};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Row-blocked multi-head attention layout, see [`Graph::attention`].
#[derive(Debug, Clone, PartialEq)]
pub struct AttnLayout {
    pub heads: usize,
    /// Query rows per block.
    pub q_block: usize,
    /// Key rows per block.
    pub k_block: usize,
    /// Key feasibility, one flag per key row (`true` = attendable).
    pub mask: Option<Vec<bool>>,
}

#[derive(Debug, Clone)]
enum Op<T> {
    Const,
    Input,
    Param(ParamId),
    MatMul(Var, Var, bool, bool),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Gather(Var, Vec<usize>),
    SumRows(Var),
    SumCols(Var),
    SumAll(Var),
    SumList(Vec<Var>),
    Softmax(Var),
    LogSoftmax(Var, Option<Vec<bool>>),
    Pick(Var, usize),
    BatchNorm {
        x: Var,
        w: Var,
        b: Var,
        xhat: Tensor<T>,
        inv_std: Vec<T>,
        batch_stats: bool,
    },
    GroupedLinear(Var, Var, usize),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttnLayout,
        probs: Vec<T>,
        scale: T,
    },
}

struct Node<T> {
    value: Option<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward_seeded`].
pub struct Backward<T> {
    pub params: Gradients<T>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Backward<T> {
    /// Gradient reaching an [`Graph::input`] leaf.
    pub fn input_grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads[v.0].as_ref()
    }
}

/// A recorded computation. Parameters are borrowed, not copied, and each
/// parameter gets one leaf per graph.
pub struct Graph<'p, T> {
    params: &'p ParamSet<T>,
    nodes: Vec<Node<T>>,
    param_vars: Vec<Option<Var>>,
    stat_updates: Vec<StatUpdate<T>>,
}

impl<'p, T: Real> Graph<'p, T> {
    pub fn new(params: &'p ParamSet<T>) -> Self {
        Self {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            stat_updates: Vec::new(),
        }
    }

    pub fn params(&self) -> &'p ParamSet<T> {
        self.params
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        let node = &self.nodes[v.0];
        match (&node.value, &node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.value(*id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    /// Scalar value of a `1 x 1` node.
    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "scalar() on non-scalar node");
        t.data()[0]
    }

    pub fn take_stat_updates(&mut self) -> Vec<StatUpdate<T>> {
        std::mem::take(&mut self.stat_updates)
    }

    pub(crate) fn push_stat_update(&mut self, u: StatUpdate<T>) {
        self.stat_updates.push(u);
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let needs_grad = self.op_needs_grad(&op);
        self.nodes.push(Node {
            value: Some(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn op_needs_grad(&self, op: &Op<T>) -> bool {
        match op {
            Op::Const => false,
            Op::Input => true,
            Op::Param(id) => self.params.get(*id).trainable,
            Op::MatMul(a, b, ..)
            | Op::Add(a, b)
            | Op::AddRow(a, b)
            | Op::Mul(a, b)
            | Op::MulRow(a, b) => self.ng(*a) || self.ng(*b),
            Op::GroupedLinear(a, b, _) => self.ng(*a) || self.ng(*b),
            Op::Scale(a, _)
            | Op::Relu(a)
            | Op::Tanh(a)
            | Op::SliceCols(a, _)
            | Op::SliceRows(a, _)
            | Op::Gather(a, _)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::SumAll(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a, _)
            | Op::Pick(a, _) => self.ng(*a),
            Op::ConcatCols(vs) | Op::ConcatRows(vs) | Op::SumList(vs) => {
                vs.iter().any(|v| self.ng(*v))
            }
            Op::BatchNorm { x, w, b, .. } => self.ng(*x) || self.ng(*w) || self.ng(*b),
            Op::Attention { q, k, v, .. } => self.ng(*q) || self.ng(*k) || self.ng(*v),
        }
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Const)
    }

    /// Leaf whose gradient is reported by [`Graph::backward_seeded`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_vars[id.0] {
            return v;
        }
        let needs_grad = self.params.get(id).trainable;
        self.nodes.push(Node {
            value: None,
            op: Op::Param(id),
            needs_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        v
    }

    /// `op(a) * op(b)`, transposing where flagged.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let out = self.value(a).matmul(ta, self.value(b), tb);
        self.push(out, Op::MatMul(a, b, ta, tb))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    /// Row-wise linear map `x W^T` for a weight stored `out x in`.
    pub fn linear(&mut self, x: Var, w: Var) -> Var {
        self.matmul_t(x, false, w, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        self.push(out, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `r` to every row of `a`.
    pub fn add_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.rows(), 1);
        assert_eq!(row.cols(), self.value(a).cols());
        let row = row.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&row) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, r))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (x, y) = (self.value(a), self.value(b));
        assert_eq!(x.shape(), y.shape());
        let data = x
            .data()
            .iter()
            .zip(y.data())
            .map(|(&p, &q)| p * q)
            .collect();
        let out = Tensor::from_vec(x.rows(), x.cols(), data);
        self.push(out, Op::Mul(a, b))
    }

    /// Multiplies every row of `a` elementwise by the `1 x c` row `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Var {
        let row = self.value(r);
        assert_eq!(row.shape(), (1, self.value(a).cols()));
        let row = row.data().to_vec();
        let mut out = self.value(a).clone();
        for i in 0..out.rows() {
            for (x, &b) in out.row_mut(i).iter_mut().zip(&row) {
                *x = *x * b;
            }
        }
        self.push(out, Op::MulRow(a, r))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.max(T::zero()));
        self.push(out, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a))
    }

    pub fn concat_cols(&mut self, vs: &[Var]) -> Var {
        let rows = self.value(vs[0]).rows();
        let cols: usize = vs.iter().map(|&v| self.value(v).cols()).sum();
        let mut out = Tensor::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &v in vs {
                let t = self.value(v);
                assert_eq!(t.rows(), rows, "concat_cols row mismatch");
                out.row_mut(r)[off..off + t.cols()].copy_from_slice(t.row(r));
                off += t.cols();
            }
        }
        self.push(out, Op::ConcatCols(vs.to_vec()))
    }

    pub fn concat_rows(&mut self, vs: &[Var]) -> Var {
        let cols = self.value(vs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &v in vs {
            let t = self.value(v);
            assert_eq!(t.cols(), cols, "concat_rows column mismatch");
            data.extend_from_slice(t.data());
            rows += t.rows();
        }
        self.push(
            Tensor::from_vec(rows, cols, data),
            Op::ConcatRows(vs.to_vec()),
        )
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let t = self.value(a);
        assert!(start + width <= t.cols());
        let mut out = Tensor::zeros(t.rows(), width);
        for r in 0..t.rows() {
            out.row_mut(r)
                .copy_from_slice(&t.row(r)[start..start + width]);
        }
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, count: usize) -> Var {
        let t = self.value(a);
        assert!(start + count <= t.rows());
        let c = t.cols();
        let out = Tensor::from_vec(count, c, t.data()[start * c..(start + count) * c].to_vec());
        self.push(out, Op::SliceRows(a, start))
    }

    /// Stacks the listed rows of `a` (repetition allowed).
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Var {
        let t = self.value(a);
        let mut data = Vec::with_capacity(idx.len() * t.cols());
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::from_vec(idx.len(), t.cols(), data);
        self.push(out, Op::Gather(a, idx.to_vec()))
    }

    /// Column sums as a `1 x c` row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let mut out = Tensor::zeros(1, t.cols());
        for r in 0..t.rows() {
            for (o, &x) in out.data_mut().iter_mut().zip(t.row(r)) {
                *o += x;
            }
        }
        self.push(out, Op::SumRows(a))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let n = self.value(a).rows();
        assert!(n > 0, "mean over zero rows");
        let s = self.sum_rows(a);
        self.scale(s, T::one() / T::of(n as f64))
    }

    /// Row sums as an `r x 1` column.
    pub fn sum_cols(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let data = (0..t.rows())
            .map(|r| t.row(r).iter().copied().sum())
            .collect();
        let out = Tensor::from_vec(t.rows(), 1, data);
        self.push(out, Op::SumCols(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(a))
    }

    pub fn sum_list(&mut self, vs: &[Var]) -> Var {
        let mut out = self.value(vs[0]).clone();
        for &v in &vs[1..] {
            out.add_assign(self.value(v));
        }
        self.push(out, Op::SumList(vs.to_vec()))
    }

    /// Row-wise softmax over the entries where `mask` is `true`; excluded
    /// entries are exactly 0.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let t = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), t.len(), "mask length");
        }
        let mut out = t.clone();
        if let Some(m) = mask {
            for (x, &ok) in out.data_mut().iter_mut().zip(m) {
                if !ok {
                    *x = T::neg_infinity();
                }
            }
        }
        for r in 0..t.rows() {
            softmax_in_place(out.row_mut(r));
        }
        self.push(out, Op::Softmax(a))
    }

    /// Row-wise log-softmax over the entries where `mask` is `true`.
    /// Excluded entries get `-inf` and receive zero gradient.
    pub fn log_softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Var {
        let t = self.value(a);
        if let Some(m) = mask {
            assert_eq!(m.len(), t.len(), "mask length");
        }
        let mut out = t.clone();
        let cols = t.cols();
        for r in 0..t.rows() {
            let row = out.row_mut(r);
            let allowed = |j: usize| mask.map_or(true, |m| m[r * cols + j]);
            let max = (0..cols)
                .filter(|&j| allowed(j))
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            assert!(
                max > T::neg_infinity(),
                "log_softmax over an all-masked row"
            );
            let lse = max
                + (0..cols)
                    .filter(|&j| allowed(j))
                    .map(|j| (row[j] - max).exp())
                    .sum::<T>()
                    .ln();
            for (j, x) in row.iter_mut().enumerate() {
                *x = if allowed(j) {
                    *x - lse
                } else {
                    T::neg_infinity()
                };
            }
        }
        self.push(out, Op::LogSoftmax(a, mask.map(|m| m.to_vec())))
    }

    /// Element at flat index `idx` as a `1 x 1` node.
    pub fn pick(&mut self, a: Var, idx: usize) -> Var {
        let x = self.value(a).data()[idx];
        self.push(Tensor::from_vec(1, 1, vec![x]), Op::Pick(a, idx))
    }

    /// Per-column normalisation `w * (x - mean) / sqrt(var + eps) + b`.
    /// With `stats = None` the batch statistics of `x` are used (biased
    /// variance); otherwise the given running `(mean, var)` are constants.
    pub fn batch_norm(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        eps: T,
        stats: Option<(&[T], &[T])>,
    ) -> Var {
        let t = self.value(x);
        let (n, c) = t.shape();
        let (mean, var): (Vec<T>, Vec<T>) = match stats {
            Some((m, v)) => (m.to_vec(), v.to_vec()),
            None => {
                assert!(n >= 2, "batch norm in train mode needs at least 2 rows");
                self.column_stats(x)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = t.clone();
        for r in 0..n {
            for (j, x) in xhat.row_mut(r).iter_mut().enumerate() {
                *x = (*x - mean[j]) * inv_std[j];
            }
        }
        let (wv, bv) = (self.value(w).data().to_vec(), self.value(b).data().to_vec());
        assert_eq!((wv.len(), bv.len()), (c, c));
        let mut out = xhat.clone();
        for r in 0..n {
            for (j, x) in out.row_mut(r).iter_mut().enumerate() {
                *x = wv[j] * *x + bv[j];
            }
        }
        let batch_stats = stats.is_none();
        self.push(
            out,
            Op::BatchNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
                batch_stats,
            },
        )
    }

    /// Mean and biased variance per column, as used by train-mode batch norm.
    pub fn column_stats(&self, x: Var) -> (Vec<T>, Vec<T>) {
        let t = self.value(x);
        let (n, c) = t.shape();
        let nn = T::of(n as f64);
        let mut mean = vec![T::zero(); c];
        let mut var = vec![T::zero(); c];
        for r in 0..n {
            for (m, &v) in mean.iter_mut().zip(t.row(r)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m = *m / nn);
        for r in 0..n {
            for ((s, &v), &m) in var.iter_mut().zip(t.row(r)).zip(&mean) {
                *s += (v - m) * (v - m);
            }
        }
        var.iter_mut().for_each(|s| *s = *s / nn);
        (mean, var)
    }

    /// Head-sliced projection: column block `h` of `x` (width `d_in / heads`)
    /// is mapped by row block `h` of `w` (`heads * d_out x d_in / heads`).
    pub fn grouped_linear(&mut self, x: Var, w: Var, heads: usize) -> Var {
        let (xt, wt) = (self.value(x), self.value(w));
        let (r, din_all) = xt.shape();
        let (dout_all, din) = wt.shape();
        assert!(
            heads > 0 && din_all == heads * din && dout_all % heads == 0,
            "grouped_linear shapes"
        );
        let dout = dout_all / heads;
        let mut out = Tensor::zeros(r, dout_all);
        for h in 0..heads {
            T::gemm(
                r,
                din,
                dout,
                T::one(),
                &xt.data()[h * din..],
                din_all as isize,
                1,
                &wt.data()[h * dout * din..],
                1,
                din as isize,
                T::zero(),
                &mut out.data_mut()[h * dout..],
                dout_all as isize,
                1,
            );
        }
        self.push(out, Op::GroupedLinear(x, w, heads))
    }

    /// Scaled dot-product attention per head and per row block:
    /// `softmax(q k^T / sqrt(d_key)) v` where query block `b` only sees key
    /// block `b`, and masked keys get weight exactly 0.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: AttnLayout) -> Var {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let h = layout.heads;
        let (rq, qw) = qt.shape();
        let (rk, kw) = kt.shape();
        let (rv, vw) = vt.shape();
        let (qb, kb) = (layout.q_block, layout.k_block);
        assert!(
            qw == kw && rk == rv && qw % h == 0 && vw % h == 0,
            "attention shapes"
        );
        assert!(
            qb > 0 && kb > 0 && rq % qb == 0 && rk % kb == 0 && rq / qb == rk / kb,
            "attention blocks"
        );
        if let Some(m) = &layout.mask {
            assert_eq!(m.len(), rk, "attention mask length");
        }
        let (dk, dv) = (qw / h, vw / h);
        let nb = rq / qb;
        let scale = T::one() / T::of(dk as f64).sqrt();
        let mut probs = vec![T::zero(); nb * h * qb * kb];
        let mut out = Tensor::zeros(rq, vw);
        for b in 0..nb {
            for hh in 0..h {
                let p = &mut probs[(b * h + hh) * qb * kb..(b * h + hh + 1) * qb * kb];
                T::gemm(
                    qb,
                    dk,
                    kb,
                    scale,
                    &qt.data()[b * qb * qw + hh * dk..],
                    qw as isize,
                    1,
                    &kt.data()[b * kb * kw + hh * dk..],
                    1,
                    kw as isize,
                    T::zero(),
                    p,
                    kb as isize,
                    1,
                );
                for i in 0..qb {
                    let row = &mut p[i * kb..(i + 1) * kb];
                    if let Some(m) = &layout.mask {
                        for (j, x) in row.iter_mut().enumerate() {
                            if !m[b * kb + j] {
                                *x = T::neg_infinity();
                            }
                        }
                    }
                    softmax_in_place(row);
                }
                T::gemm(
                    qb,
                    kb,
                    dv,
                    T::one(),
                    p,
                    kb as isize,
                    1,
                    &vt.data()[b * kb * vw + hh * dv..],
                    vw as isize,
                    1,
                    T::zero(),
                    &mut out.data_mut()[b * qb * vw + hh * dv..],
                    vw as isize,
                    1,
                );
            }
        }
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                scale,
            },
        )
    }

    /// Attention weights of the last [`Graph::attention`] node `a`, for
    /// block `b` and head `h`, as a `q_block x k_block` matrix.
    pub fn attention_weights(&self, a: Var, b: usize, h: usize) -> Tensor<T> {
        match &self.nodes[a.0].op {
            Op::Attention { layout, probs, .. } => {
                let n = layout.q_block * layout.k_block;
                let off = (b * layout.heads + h) * n;
                Tensor::from_vec(layout.q_block, layout.k_block, probs[off..off + n].to_vec())
            }
            _ => panic!("not an attention node"),
        }
    }

    /// Gradients of the `1 x 1` node `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar loss");
        self.backward_seeded(&[(loss, Tensor::filled(1, 1, T::one()))])
            .params
    }

    /// Back-propagates the given output gradients.
    pub fn backward_seeded(&self, seeds: &[(Var, Tensor<T>)]) -> Backward<T> {
        let mut grads: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (v, g) in seeds {
            assert_eq!(self.shape(*v), g.shape(), "seed shape");
            accumulate(&mut grads, *v, g.clone());
        }
        let mut params = Gradients::new(self.params.len());
        let last = seeds.iter().map(|(v, _)| v.0).max().unwrap_or(0);
        for i in (0..=last.min(self.nodes.len().saturating_sub(1))).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let g = match &node.op {
                Op::Input => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads, &mut params);
        }
        Backward { params, grads }
    }

    fn backward_node(
        &self,
        i: usize,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        params: &mut Gradients<T>,
    ) {
        let node = &self.nodes[i];
        let out = node.value.as_ref();
        let ng = |v: &Var| self.nodes[v.0].needs_grad;
        match &node.op {
            Op::Const | Op::Input => {}
            Op::Param(id) => params.accumulate(*id, g),
            Op::MatMul(a, b, ta, tb) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(a) {
                    let da = if *ta {
                        bv.matmul(*tb, g, true)
                    } else {
                        g.matmul(false, bv, !*tb)
                    };
                    accumulate(grads, *a, da);
                }
                if ng(b) {
                    let db = if *tb {
                        g.matmul(true, av, *ta)
                    } else {
                        av.matmul(!*ta, g, false)
                    };
                    accumulate(grads, *b, db);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if ng(v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::AddRow(a, r) => {
                if ng(a) {
                    accumulate(grads, *a, g.clone());
                }
                if ng(r) {
                    accumulate(grads, *r, col_sums(g));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if ng(a) {
                    accumulate(grads, *a, zip_map(g, bv, |x, y| x * y));
                }
                if ng(b) {
                    accumulate(grads, *b, zip_map(g, av, |x, y| x * y));
                }
            }
            Op::MulRow(a, r) => {
                let (av, rv) = (self.value(*a), self.value(*r));
                if ng(a) {
                    let mut da = g.clone();
                    for k in 0..da.rows() {
                        for (x, &y) in da.row_mut(k).iter_mut().zip(rv.data()) {
                            *x = *x * y;
                        }
                    }
                    accumulate(grads, *a, da);
                }
                if ng(r) {
                    accumulate(grads, *r, col_sums(&zip_map(g, av, |x, y| x * y)));
                }
            }
            Op::Scale(a, s) => accumulate(grads, *a, g.map(|x| x * *s)),
            Op::Relu(a) => {
                let y = out.unwrap();
                accumulate(
                    grads,
                    *a,
                    zip_map(g, y, |x, y| if y > T::zero() { x } else { T::zero() }),
                );
            }
            Op::Tanh(a) => {
                let y = out.unwrap();
                accumulate(grads, *a, zip_map(g, y, |x, y| x * (T::one() - y * y)));
            }
            Op::ConcatCols(vs) => {
                let mut off = 0;
                for v in vs {
                    let w = self.value(*v).cols();
                    if ng(v) {
                        let mut d = Tensor::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            d.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        accumulate(grads, *v, d);
                    }
                    off += w;
                }
            }
            Op::ConcatRows(vs) => {
                let c = g.cols();
                let mut off = 0;
                for v in vs {
                    let n = self.value(*v).rows();
                    if ng(v) {
                        accumulate(
                            grads,
                            *v,
                            Tensor::from_vec(n, c, g.data()[off * c..(off + n) * c].to_vec()),
                        );
                    }
                    off += n;
                }
            }
            Op::SliceCols(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for k in 0..r {
                    d.row_mut(k)[*start..*start + g.cols()].copy_from_slice(g.row(k));
                }
                accumulate(grads, *a, d);
            }
            Op::SliceRows(a, start) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[start * c..(start + g.rows()) * c].copy_from_slice(g.data());
                accumulate(grads, *a, d);
            }
            Op::Gather(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for (k, &src) in idx.iter().enumerate() {
                    for (x, &y) in d.row_mut(src).iter_mut().zip(g.row(k)) {
                        *x += y;
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::SumRows(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for k in 0..r {
                    d.row_mut(k).copy_from_slice(g.data());
                }
                accumulate(grads, *a, d);
            }
            Op::SumCols(a) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                for k in 0..r {
                    let v = g.data()[k];
                    d.row_mut(k).iter_mut().for_each(|x| *x = v);
                }
                accumulate(grads, *a, d);
            }
            Op::SumAll(a) => {
                let (r, c) = self.shape(*a);
                accumulate(grads, *a, Tensor::filled(r, c, g.data()[0]));
            }
            Op::SumList(vs) => {
                for v in vs {
                    if ng(v) {
                        accumulate(grads, *v, g.clone());
                    }
                }
            }
            Op::Softmax(a) => {
                let y = out.unwrap();
                let mut d = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let dot: T = g.row(r).iter().zip(y.row(r)).map(|(&a, &b)| a * b).sum();
                    for (j, x) in d.row_mut(r).iter_mut().enumerate() {
                        *x = y.get(r, j) * (g.get(r, j) - dot);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::LogSoftmax(a, mask) => {
                let y = out.unwrap();
                let cols = y.cols();
                let mut d = Tensor::zeros(y.rows(), cols);
                for r in 0..y.rows() {
                    let allowed = |j: usize| mask.as_ref().map_or(true, |m| m[r * cols + j]);
                    let gs: T = (0..cols).filter(|&j| allowed(j)).map(|j| g.get(r, j)).sum();
                    for j in (0..cols).filter(|&j| allowed(j)) {
                        d.set(r, j, g.get(r, j) - y.get(r, j).exp() * gs);
                    }
                }
                accumulate(grads, *a, d);
            }
            Op::Pick(a, idx) => {
                let (r, c) = self.shape(*a);
                let mut d = Tensor::zeros(r, c);
                d.data_mut()[*idx] = g.data()[0];
                accumulate(grads, *a, d);
            }
            Op::BatchNorm {
                x,
                w,
                b,
                xhat,
                inv_std,
                batch_stats,
            } => {
                let (n, c) = xhat.shape();
                let wv = self.value(*w).data();
                if ng(w) {
                    accumulate(grads, *w, col_sums(&zip_map(g, xhat, |a, b| a * b)));
                }
                if ng(b) {
                    accumulate(grads, *b, col_sums(g));
                }
                if ng(x) {
                    let mut dx = Tensor::zeros(n, c);
                    if *batch_stats {
                        let nn = T::of(n as f64);
                        let mut sum_d = vec![T::zero(); c];
                        let mut sum_dx = vec![T::zero(); c];
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g.get(r, j) * wv[j];
                                sum_d[j] += dh;
                                sum_dx[j] += dh * xhat.get(r, j);
                            }
                        }
                        for r in 0..n {
                            for j in 0..c {
                                let dh = g.get(r, j) * wv[j];
                                dx.set(
                                    r,
                                    j,
                                    inv_std[j] / nn
                                        * (nn * dh - sum_d[j] - xhat.get(r, j) * sum_dx[j]),
                                );
                            }
                        }
                    } else {
                        for r in 0..n {
                            for j in 0..c {
                                dx.set(r, j, g.get(r, j) * wv[j] * inv_std[j]);
                            }
                        }
                    }
                    accumulate(grads, *x, dx);
                }
            }
            Op::GroupedLinear(x, w, heads) => {
                let (xt, wt) = (self.value(*x), self.value(*w));
                let (r, din_all) = xt.shape();
                let (dout_all, din) = wt.shape();
                let dout = dout_all / heads;
                if ng(x) {
                    let mut dx = Tensor::zeros(r, din_all);
                    for h in 0..*heads {
                        T::gemm(
                            r,
                            dout,
                            din,
                            T::one(),
                            &g.data()[h * dout..],
                            dout_all as isize,
                            1,
                            &wt.data()[h * dout * din..],
                            din as isize,
                            1,
                            T::zero(),
                            &mut dx.data_mut()[h * din..],
                            din_all as isize,
                            1,
                        );
                    }
                    accumulate(grads, *x, dx);
                }
                if ng(w) {
                    let mut dw = Tensor::zeros(dout_all, din);
                    for h in 0..*heads {
                        T::gemm(
                            dout,
                            r,
                            din,
                            T::one(),
                            &g.data()[h * dout..],
                            1,
                            dout_all as isize,
                            &xt.data()[h * din..],
                            din_all as isize,
                            1,
                            T::zero(),
                            &mut dw.data_mut()[h * dout * din..],
                            din as isize,
                            1,
                        );
                    }
                    accumulate(grads, *w, dw);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                layout,
                probs,
                scale,
            } => self.backward_attention(g, grads, (*q, *k, *v), layout, probs, *scale),
        }
    }

    fn backward_attention(
        &self,
        g: &Tensor<T>,
        grads: &mut [Option<Tensor<T>>],
        (q, k, v): (Var, Var, Var),
        layout: &AttnLayout,
        probs: &[T],
        scale: T,
    ) {
        let (qt, kt, vt) = (self.value(q), self.value(k), self.value(v));
        let h = layout.heads;
        let (rq, qw) = qt.shape();
        let (rk, vw) = vt.shape();
        let (qb, kb) = (layout.q_block, layout.k_block);
        let (dk, dv) = (qw / h, vw / h);
        let nb = rq / qb;
        let mut dq = Tensor::zeros(rq, qw);
        let mut dk_t = Tensor::zeros(rk, qw);
        let mut dv_t = Tensor::zeros(rk, vw);
        let mut dp = vec![T::zero(); qb * kb];
        for b in 0..nb {
            for hh in 0..h {
                let p = &probs[(b * h + hh) * qb * kb..(b * h + hh + 1) * qb * kb];
                let g_off = b * qb * vw + hh * dv;
                let v_off = b * kb * vw + hh * dv;
                // dP = dO V^T
                T::gemm(
                    qb,
                    dv,
                    kb,
                    T::one(),
                    &g.data()[g_off..],
                    vw as isize,
                    1,
                    &vt.data()[v_off..],
                    1,
                    vw as isize,
                    T::zero(),
                    &mut dp,
                    kb as isize,
                    1,
                );
                // dV += P^T dO
                T::gemm(
                    kb,
                    qb,
                    dv,
                    T::one(),
                    p,
                    1,
                    kb as isize,
                    &g.data()[g_off..],
                    vw as isize,
                    1,
                    T::one(),
                    &mut dv_t.data_mut()[v_off..],
                    vw as isize,
                    1,
                );
                for i in 0..qb {
                    let pr = &p[i * kb..(i + 1) * kb];
                    let dr = &mut dp[i * kb..(i + 1) * kb];
                    let dot: T = pr.iter().zip(dr.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pp) in dr.iter_mut().zip(pr) {
                        *d = pp * (*d - dot);
                    }
                }
                let q_off = b * qb * qw + hh * dk;
                let k_off = b * kb * qw + hh * dk;
                // dQ += dS K * scale
                T::gemm(
                    qb,
                    kb,
                    dk,
                    scale,
                    &dp,
                    kb as isize,
                    1,
                    &kt.data()[k_off..],
                    qw as isize,
                    1,
                    T::one(),
                    &mut dq.data_mut()[q_off..],
                    qw as isize,
                    1,
                );
                // dK += dS^T Q * scale
                T::gemm(
                    kb,
                    qb,
                    dk,
                    scale,
                    &dp,
                    1,
                    kb as isize,
                    &qt.data()[q_off..],
                    qw as isize,
                    1,
                    T::one(),
                    &mut dk_t.data_mut()[k_off..],
                    qw as isize,
                    1,
                );
            }
        }
        if self.nodes[q.0].needs_grad {
            accumulate(grads, q, dq);
        }
        if self.nodes[k.0].needs_grad {
            accumulate(grads, k, dk_t);
        }
        if self.nodes[v.0].needs_grad {
            accumulate(grads, v, dv_t);
        }
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    assert_eq!(a.shape(), b.shape());
    let data = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| f(x, y))
        .collect();
    Tensor::from_vec(a.rows(), a.cols(), data)
}

fn col_sums<T: Real>(g: &Tensor<T>) -> Tensor<T> {
    let mut out = Tensor::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, &x) in out.data_mut().iter_mut().zip(g.row(r)) {
            *o += x;
        }
    }
    out
}

/// Softmax in place; `-inf` entries become exactly 0.
pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    assert!(max > T::neg_infinity(), "softmax over an all-masked row");
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = if *x == T::neg_infinity() {
            T::zero()
        } else {
            (*x - max).exp()
        };
        sum += *x;
    }
    row.iter_mut().for_each(|x| *x = *x / sum);
}
