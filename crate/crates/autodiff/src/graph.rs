//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every operation eagerly: values are computed when the
//! op is added, and [`Graph::backward`] walks the tape in reverse. Parameters
//! enter the tape through [`Graph::param`] and their gradients come back as
//! [`ParamGrads`]; every other node gradient is also kept so tests can probe
//! intermediate values (logits, decoder inputs, ...).

use std::collections::HashMap;

use crate::params::{ParamGrads, ParamId, ParamStore};
use crate::real::Real;
use crate::tensor::Tensor;

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Shape of a batched multi-head attention call: `batch` independent
/// sequences, `q_len` queries attending to `kv_len` keys each.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub kv_len: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Gelu(Var),
    Silu(Var),
    Exp(Var),
    Square(Var),
    Sigmoid(Var),
    LayerNorm {
        x: Var,
        /// normalized values and per-row inverse std
        xhat: Tensor<T>,
        rstd: Vec<T>,
    },
    GatherRows(Var, Vec<usize>),
    ConcatRows(Vec<Var>),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        /// per-row weight already divided by the weight total
        weights: Vec<T>,
        probs: Tensor<T>,
    },
    SqErr {
        pred: Var,
        target: Tensor<T>,
        denom: T,
    },
    SumAll(Var),
    StraightThrough(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradients for every node reached by [`Graph::backward`].
pub struct Gradients<T> {
    nodes: Vec<Option<Tensor<T>>>,
    params: ParamGrads<T>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss w.r.t. a node, or `None` when the node does not
    /// influence the loss through differentiable paths.
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn params(&self) -> &ParamGrads<T> {
        &self.params
    }

    pub fn into_params(self) -> ParamGrads<T> {
        self.params
    }
}

#[derive(Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
    n_params: usize,
    attention_pairs: u64,
    bytes: usize,
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    // tanh approximation; returns (value, derivative)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let x3 = x * x * x;
    let inner = c * (x + a * x3);
    let th = inner.tanh();
    let val = half * x * (T::one() + th);
    let d = half * (T::one() + th)
        + half * x * (T::one() - th * th) * c * (T::one() + T::lit(3.0) * a * x * x);
    (val, d)
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
            n_params: 0,
            attention_pairs: 0,
            bytes: 0,
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.bytes += value.len() * std::mem::size_of::<T>();
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum over attention calls of `batch * q_len * kv_len`.
    pub fn attention_pairs(&self) -> u64 {
        self.attention_pairs
    }

    /// Bytes held by node values on the tape.
    pub fn live_bytes(&self) -> usize {
        self.bytes
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is tracked (for probing losses w.r.t. inputs).
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Brings a parameter onto the tape. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        self.n_params = self.n_params.max(store.len());
        let v = self.push(store.get(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    /// Copy of the value without gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let t = self.value(x).clone();
        self.constant(t)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).matmul(self.value(b));
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

    /// Adds a `1 x cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, xv.cols()), "add_row expects a 1 x cols row");
        let mut out = xv.clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &b) in chunk.iter_mut().zip(rv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::AddRow(x, row), rg)
    }

    /// Multiplies every row of `x` elementwise by a `1 x cols` row.
    pub fn mul_row(&mut self, x: Var, row: Var) -> Var {
        let xv = self.value(x);
        let rv = self.value(row);
        assert_eq!(rv.shape(), (1, xv.cols()), "mul_row expects a 1 x cols row");
        let mut out = xv.clone();
        let cols = out.cols();
        for chunk in out.data_mut().chunks_mut(cols) {
            for (o, &g) in chunk.iter_mut().zip(rv.data()) {
                *o *= g;
            }
        }
        let rg = self.rg(x) || self.rg(row);
        self.push(out, Op::MulRow(x, row), rg)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::lit(s);
        let out = self.value(x).map(|v| v * s);
        let rg = self.rg(x);
        self.push(out, Op::Scale(x, s), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::lit(c);
        let out = self.value(x).map(|v| v + c);
        let rg = self.rg(x);
        self.push(out, Op::AddScalar(x), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        let rg = self.rg(x);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * sigmoid(v));
        let rg = self.rg(x);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v.exp());
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn square(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| v * v);
        let rg = self.rg(x);
        self.push(out, Op::Square(x), rg)
    }

    /// Row-wise normalization to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let n = T::lit(cols as f64);
        let eps = T::lit(eps);
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            for (o, &v) in xhat.row_mut(r).iter_mut().zip(row) {
                *o = (v - mean) * rs;
            }
            rstd.push(rs);
        }
        let rg = self.rg(x);
        self.push(
            xhat.clone(),
            Op::LayerNorm { x, xhat, rstd },
            rg,
        )
    }

    /// Picks rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let xv = self.value(x);
        assert!(
            idx.iter().all(|&i| i < xv.rows()),
            "gather_rows index out of range"
        );
        let out = xv.select_rows(idx);
        let rg = self.rg(x);
        self.push(out, Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals);
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::ConcatRows(parts.to_vec()), rg)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let rg = self.rg(x);
        self.push(Tensor::from_vec(1, 1, vec![s]), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Forward value is `replacement`; the gradient passes to `x` unchanged.
    /// This is the straight-through estimator used by vector quantization.
    pub fn straight_through(&mut self, x: Var, replacement: Tensor<T>) -> Var {
        assert_eq!(
            self.value(x).shape(),
            replacement.shape(),
            "straight_through shape mismatch"
        );
        let rg = self.rg(x);
        self.push(replacement, Op::StraightThrough(x), rg)
    }

    /// Batched scaled dot-product attention without masking.
    ///
    /// `q` is `(batch * q_len) x d`, `k` and `v` are `(batch * kv_len) x d`,
    /// and `d` is split evenly across `heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Var {
        let AttnShape {
            batch,
            q_len,
            kv_len,
            heads,
        } = shape;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        assert_eq!(qv.rows(), batch * q_len, "query rows mismatch");
        assert_eq!(kv.rows(), batch * kv_len, "key rows mismatch");
        assert_eq!(vv.shape(), kv.shape(), "key/value shape mismatch");
        assert_eq!(kv.cols(), d, "key width mismatch");
        assert!(heads > 0 && d.is_multiple_of(heads), "width not divisible by heads");
        let dh = d / heads;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut probs = vec![T::zero(); batch * heads * q_len * kv_len];
        let mut out = Tensor::<T>::zeros(batch * q_len, d);
        let ds = d as isize;
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * q_len * kv_len;
                let p = &mut probs[p_off..p_off + q_len * kv_len];
                // SAFETY: offsets index head `h` of sequence `b`; extents stay in bounds.
                unsafe {
                    T::gemm(
                        q_len,
                        dh,
                        kv_len,
                        scale,
                        qv.data().as_ptr().add(b * q_len * d + h * dh),
                        ds,
                        1,
                        kv.data().as_ptr().add(b * kv_len * d + h * dh),
                        1,
                        ds,
                        T::zero(),
                        p.as_mut_ptr(),
                        kv_len as isize,
                        1,
                    );
                }
                for row in p.chunks_mut(kv_len) {
                    let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                    let mut s = T::zero();
                    for x in row.iter_mut() {
                        *x = (*x - m).exp();
                        s += *x;
                    }
                    for x in row.iter_mut() {
                        *x /= s;
                    }
                }
                unsafe {
                    T::gemm(
                        q_len,
                        kv_len,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        kv_len as isize,
                        1,
                        vv.data().as_ptr().add(b * kv_len * d + h * dh),
                        ds,
                        1,
                        T::zero(),
                        out.data_mut().as_mut_ptr().add(b * q_len * d + h * dh),
                        ds,
                        1,
                    );
                }
            }
        }
        self.attention_pairs += (batch * q_len * kv_len) as u64;
        let rg = self.rg(q) || self.rg(k) || self.rg(v);
        self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            rg,
        )
    }

    /// Weighted mean softmax cross-entropy: `sum_i w_i * CE_i / sum_i w_i`.
    /// Rows with zero weight contribute nothing, including to the gradient.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Var {
        let lv = self.value(logits);
        let (rows, cols) = lv.shape();
        assert_eq!(targets.len(), rows, "one target per row");
        assert_eq!(weights.len(), rows, "one weight per row");
        let total: f64 = weights.iter().sum();
        let norm: Vec<T> = weights
            .iter()
            .map(|&w| if total > 0.0 { T::lit(w / total) } else { T::zero() })
            .collect();
        let mut probs = Tensor::zeros(rows, cols);
        let mut loss = T::zero();
        for r in 0..rows {
            let row = lv.row(r);
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            let pr = probs.row_mut(r);
            for (p, &x) in pr.iter_mut().zip(row) {
                *p = (x - m).exp();
                s += *p;
            }
            for p in pr.iter_mut() {
                *p /= s;
            }
            assert!(targets[r] < cols, "target index out of range");
            if norm[r] != T::zero() {
                let logp = row[targets[r]] - m - s.ln();
                loss -= norm[r] * logp;
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::from_vec(1, 1, vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: norm,
                probs,
            },
            rg,
        )
    }

    /// `sum((pred - target)^2) / denom`.
    pub fn sq_err(&mut self, pred: Var, target: Tensor<T>, denom: f64) -> Var {
        let pv = self.value(pred);
        assert_eq!(pv.shape(), target.shape(), "sq_err shape mismatch");
        let denom = T::lit(denom);
        let s = pv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / denom;
        let rg = self.rg(pred);
        self.push(
            Tensor::from_vec(1, 1, vec![s]),
            Op::SqErr {
                pred,
                target,
                denom,
            },
            rg,
        )
    }

    /// Mean over rows of the per-row squared error (summed over columns).
    pub fn sq_err_rows(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let rows = self.value(pred).rows().max(1) as f64;
        self.sq_err(pred, target, rows)
    }

    /// Mean over all elements of the squared error.
    pub fn mse(&mut self, pred: Var, target: Tensor<T>) -> Var {
        let n = self.value(pred).len().max(1) as f64;
        self.sq_err(pred, target, n)
    }

    pub fn scalar(&self, v: Var) -> T {
        let t = self.value(v);
        assert_eq!(t.shape(), (1, 1), "not a scalar");
        t.data()[0]
    }

    /// Back-propagates from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward from non-scalar");
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<T>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, T::one()));

        fn acc<T: Real>(grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&g),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let (lower, upper) = grads.split_at_mut(i);
            let Some(gout) = upper[0].as_ref() else {
                continue;
            };
            match &node.op {
                Op::Leaf | Op::Param => {}
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    if self.rg(*a) {
                        // dA = dY B^T
                        let (m, k) = av.shape();
                        let nn = bv.cols();
                        let mut da = Tensor::zeros(m, k);
                        if m > 0 && k > 0 {
                            unsafe {
                                T::gemm(
                                    m,
                                    nn,
                                    k,
                                    T::one(),
                                    gout.data().as_ptr(),
                                    nn as isize,
                                    1,
                                    bv.data().as_ptr(),
                                    1,
                                    nn as isize,
                                    T::zero(),
                                    da.data_mut().as_mut_ptr(),
                                    k as isize,
                                    1,
                                );
                            }
                        }
                        acc(lower, *a, da);
                    }
                    if self.rg(*b) {
                        // dB = A^T dY
                        let (m, k) = av.shape();
                        let nn = bv.cols();
                        let mut db = Tensor::zeros(k, nn);
                        if k > 0 && nn > 0 {
                            unsafe {
                                T::gemm(
                                    k,
                                    m,
                                    nn,
                                    T::one(),
                                    av.data().as_ptr(),
                                    1,
                                    k as isize,
                                    gout.data().as_ptr(),
                                    nn as isize,
                                    1,
                                    T::zero(),
                                    db.data_mut().as_mut_ptr(),
                                    nn as isize,
                                    1,
                                );
                            }
                        }
                        acc(lower, *b, db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        acc(lower, *a, gout.clone());
                    }
                    if self.rg(*b) {
                        acc(lower, *b, gout.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        acc(lower, *a, gout.clone());
                    }
                    if self.rg(*b) {
                        acc(lower, *b, gout.map(|x| -x));
                    }
                }
                Op::Mul(a, b) => {
                    if self.rg(*a) {
                        acc(lower, *a, gout.zip_map(self.value(*b), |g, y| g * y));
                    }
                    if self.rg(*b) {
                        acc(lower, *b, gout.zip_map(self.value(*a), |g, x| g * x));
                    }
                }
                Op::AddRow(x, row) => {
                    if self.rg(*row) {
                        let cols = gout.cols();
                        let mut dr = Tensor::zeros(1, cols);
                        for chunk in gout.data().chunks(cols) {
                            for (d, &g) in dr.data_mut().iter_mut().zip(chunk) {
                                *d += g;
                            }
                        }
                        acc(lower, *row, dr);
                    }
                    if self.rg(*x) {
                        acc(lower, *x, gout.clone());
                    }
                }
                Op::MulRow(x, row) => {
                    let xv = self.value(*x);
                    let rv = self.value(*row);
                    let cols = gout.cols();
                    if self.rg(*row) {
                        let mut dr = Tensor::zeros(1, cols);
                        for (gc, xc) in gout.data().chunks(cols).zip(xv.data().chunks(cols)) {
                            for ((d, &g), &xx) in dr.data_mut().iter_mut().zip(gc).zip(xc) {
                                *d += g * xx;
                            }
                        }
                        acc(lower, *row, dr);
                    }
                    if self.rg(*x) {
                        let mut dx = gout.clone();
                        for chunk in dx.data_mut().chunks_mut(cols) {
                            for (d, &r) in chunk.iter_mut().zip(rv.data()) {
                                *d *= r;
                            }
                        }
                        acc(lower, *x, dx);
                    }
                }
                Op::Scale(x, s) => {
                    let s = *s;
                    acc(lower, *x, gout.map(|g| g * s));
                }
                Op::AddScalar(x) => acc(lower, *x, gout.clone()),
                Op::Gelu(x) => {
                    let d = gout.zip_map(self.value(*x), |g, xx| g * gelu_parts(xx).1);
                    acc(lower, *x, d);
                }
                Op::Silu(x) => {
                    let d = gout.zip_map(self.value(*x), |g, xx| {
                        let s = sigmoid(xx);
                        g * (s + xx * s * (T::one() - s))
                    });
                    acc(lower, *x, d);
                }
                Op::Sigmoid(x) => {
                    let d = gout.zip_map(&node.value, |g, y| g * y * (T::one() - y));
                    acc(lower, *x, d);
                }
                Op::Exp(x) => {
                    let d = gout.zip_map(&node.value, |g, y| g * y);
                    acc(lower, *x, d);
                }
                Op::Square(x) => {
                    let two = T::lit(2.0);
                    let d = gout.zip_map(self.value(*x), |g, xx| two * g * xx);
                    acc(lower, *x, d);
                }
                Op::LayerNorm { x, xhat, rstd } => {
                    let (rows, cols) = xhat.shape();
                    let n = T::lit(cols as f64);
                    let mut dx = Tensor::zeros(rows, cols);
                    for (r, &rs) in rstd.iter().enumerate().take(rows) {
                        let g = gout.row(r);
                        let xh = xhat.row(r);
                        let mean_g = g.iter().copied().sum::<T>() / n;
                        let mean_gx = g.iter().zip(xh).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for ((o, &gi), &xi) in dx.row_mut(r).iter_mut().zip(g).zip(xh) {
                            *o = rs * (gi - mean_g - xi * mean_gx);
                        }
                    }
                    acc(lower, *x, dx);
                }
                Op::GatherRows(x, idx) => {
                    let (rows, cols) = self.value(*x).shape();
                    let mut dx = Tensor::zeros(rows, cols);
                    for (o, &src) in idx.iter().enumerate() {
                        let g = gout.row(o);
                        for (d, &gv) in dx.row_mut(src).iter_mut().zip(g) {
                            *d += gv;
                        }
                    }
                    acc(lower, *x, dx);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let r = self.value(p).rows();
                        if self.rg(p) {
                            let idx: Vec<usize> = (start..start + r).collect();
                            acc(lower, p, gout.select_rows(&idx));
                        }
                        start += r;
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    shape,
                    probs,
                } => {
                    let (dq, dk, dv) = self.attention_backward(*q, *k, *v, *shape, probs, gout);
                    if self.rg(*q) {
                        acc(lower, *q, dq);
                    }
                    if self.rg(*k) {
                        acc(lower, *k, dk);
                    }
                    if self.rg(*v) {
                        acc(lower, *v, dv);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    weights,
                    probs,
                } => {
                    let g0 = gout.data()[0];
                    let mut dl = Tensor::zeros(probs.rows(), probs.cols());
                    for r in 0..probs.rows() {
                        let w = weights[r];
                        if w == T::zero() {
                            continue;
                        }
                        let out = dl.row_mut(r);
                        for (o, &p) in out.iter_mut().zip(probs.row(r)) {
                            *o = g0 * w * p;
                        }
                        out[targets[r]] -= g0 * w;
                    }
                    acc(lower, *logits, dl);
                }
                Op::SqErr {
                    pred,
                    target,
                    denom,
                } => {
                    let c = gout.data()[0] * T::lit(2.0) / *denom;
                    let d = self.value(*pred).zip_map(target, |p, t| c * (p - t));
                    acc(lower, *pred, d);
                }
                Op::SumAll(x) => {
                    let (r, c) = self.value(*x).shape();
                    acc(lower, *x, Tensor::filled(r, c, gout.data()[0]));
                }
                Op::StraightThrough(x) => acc(lower, *x, gout.clone()),
            }
        }

        let mut pgrads: Vec<Option<Tensor<T>>> = (0..self.n_params).map(|_| None).collect();
        for (&pid, &var) in &self.param_vars {
            if let Some(g) = grads[var.0].clone() {
                pgrads[pid.index()] = Some(g);
            }
        }
        Gradients {
            nodes: grads,
            params: ParamGrads::new(pgrads),
        }
    }

    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: &[T],
        gout: &Tensor<T>,
    ) -> (Tensor<T>, Tensor<T>, Tensor<T>) {
        let AttnShape {
            batch,
            q_len,
            kv_len,
            heads,
        } = shape;
        let qv = self.value(q);
        let kv = self.value(k);
        let vv = self.value(v);
        let d = qv.cols();
        let dh = d / heads;
        let ds = d as isize;
        let scale = T::lit(1.0 / (dh as f64).sqrt());
        let mut dq = Tensor::<T>::zeros(qv.rows(), d);
        let mut dk = Tensor::<T>::zeros(kv.rows(), d);
        let mut dv = Tensor::<T>::zeros(vv.rows(), d);
        let mut dp = vec![T::zero(); q_len * kv_len];
        for b in 0..batch {
            for h in 0..heads {
                let p_off = (b * heads + h) * q_len * kv_len;
                let p = &probs[p_off..p_off + q_len * kv_len];
                let qo = b * q_len * d + h * dh;
                let ko = b * kv_len * d + h * dh;
                // SAFETY: same extents as the forward pass.
                unsafe {
                    // dP = dO V^T
                    T::gemm(
                        q_len,
                        dh,
                        kv_len,
                        T::one(),
                        gout.data().as_ptr().add(qo),
                        ds,
                        1,
                        vv.data().as_ptr().add(ko),
                        1,
                        ds,
                        T::zero(),
                        dp.as_mut_ptr(),
                        kv_len as isize,
                        1,
                    );
                    // dV = P^T dO
                    T::gemm(
                        kv_len,
                        q_len,
                        dh,
                        T::one(),
                        p.as_ptr(),
                        1,
                        kv_len as isize,
                        gout.data().as_ptr().add(qo),
                        ds,
                        1,
                        T::one(),
                        dv.data_mut().as_mut_ptr().add(ko),
                        ds,
                        1,
                    );
                }
                // dS = P * (dP - rowsum(dP * P))
                for (dprow, prow) in dp.chunks_mut(kv_len).zip(p.chunks(kv_len)) {
                    let dot = dprow.iter().zip(prow).map(|(&a, &b)| a * b).sum::<T>();
                    for (x, &pp) in dprow.iter_mut().zip(prow) {
                        *x = pp * (*x - dot);
                    }
                }
                unsafe {
                    // dQ = scale * dS K
                    T::gemm(
                        q_len,
                        kv_len,
                        dh,
                        scale,
                        dp.as_ptr(),
                        kv_len as isize,
                        1,
                        kv.data().as_ptr().add(ko),
                        ds,
                        1,
                        T::one(),
                        dq.data_mut().as_mut_ptr().add(qo),
                        ds,
                        1,
                    );
                    // dK = scale * dS^T Q
                    T::gemm(
                        kv_len,
                        q_len,
                        dh,
                        scale,
                        dp.as_ptr(),
                        1,
                        kv_len as isize,
                        qv.data().as_ptr().add(qo),
                        ds,
                        1,
                        T::one(),
                        dk.data_mut().as_mut_ptr().add(ko),
                        ds,
                        1,
                    );
                }
            }
        }
        (dq, dk, dv)
    }
}
