//! Reverse-mode differentiation over whole matrices.
//!
//! A [`Tape`] records every primitive in evaluation order; [`Tape::backward`]
//! replays it in reverse. Leaves are either trainable parameters or
//! constants. Constants (frozen weights, inputs) never receive a gradient and
//! nodes that depend only on constants are skipped during the reverse sweep.
//!
//! Besides the generic algebra the tape has fused primitives for the pieces
//! of a transformer block (layer norm, multi-head attention, mean pooling,
//! softmax cross-entropy) and for the masked expert sum, each with a
//! hand-written adjoint.

use std::borrow::Cow;

use super::matrix::{gemm_nn, softmax_in_place, Matrix};
use crate::error::{shape_err, Error, Result};
use crate::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, T),
    Hadamard(Var, Var),
    Transpose(Var),
    Sum(Var),
    AssembleDelta {
        bt: Var,
        a: Var,
        lambda: Option<Var>,
        coef: Vec<T>,
        sub_rank: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Matrix<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    Attention {
        qkv: Var,
        tokens: usize,
        heads: usize,
        probs: Vec<T>,
    },
    SegmentMean {
        x: Var,
        group: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Matrix<T>,
    },
}

struct Node<'a, T: Scalar> {
    value: Cow<'a, Matrix<T>>,
    op: Op<T>,
    needs_grad: bool,
    param: bool,
}

/// Records matrix operations for one forward pass.
pub struct Tape<'a, T: Scalar> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients of every trainable leaf, keyed by its [`Var`].
#[derive(Debug)]
pub struct Gradients<T: Scalar> {
    grads: Vec<(Var, Matrix<T>)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Matrix<T>> {
        self.grads.iter().find(|(k, _)| *k == v).map(|(_, g)| g)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix<T>> {
        let pos = self.grads.iter().position(|(k, _)| *k == v)?;
        Some(self.grads.swap_remove(pos).1)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (Var, &Matrix<T>)> {
        self.grads.iter().map(|(v, g)| (*v, g))
    }
}

impl<T: Scalar> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Scalar> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Cow<'a, Matrix<T>>, op: Op<T>, needs_grad: bool, param: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
            param,
        });
        Var(self.nodes.len() - 1)
    }

    fn derived(&mut self, value: Matrix<T>, op: Op<T>, name: &'static str, inputs: &[Var]) -> Result<Var> {
        let value = value.finite(name)?;
        let needs = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push(Cow::Owned(value), op, needs, false))
    }

    /// Registers a trainable leaf borrowed from the model.
    pub fn param(&mut self, m: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, true, true)
    }

    pub fn param_owned(&mut self, m: Matrix<T>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, true, true)
    }

    /// Registers a frozen leaf; it never appears in the gradient map.
    pub fn constant(&mut self, m: &'a Matrix<T>) -> Var {
        self.push(Cow::Borrowed(m), Op::Leaf, false, false)
    }

    pub fn constant_owned(&mut self, m: Matrix<T>) -> Var {
        self.push(Cow::Owned(m), Op::Leaf, false, false)
    }

    pub fn value(&self, v: Var) -> &Matrix<T> {
        &self.nodes[v.0].value
    }

    pub fn is_param(&self, v: Var) -> bool {
        self.nodes[v.0].param
    }

    /// Value of a `1 × 1` node.
    pub fn scalar(&self, v: Var) -> Result<T> {
        let m = self.value(v);
        if m.shape() != (1, 1) {
            return Err(Error::Contract(format!("expected scalar node, got {:?}", m.shape())));
        }
        Ok(m.get(0, 0))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.derived(out, Op::MatMul(a, b), "matmul", &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        self.derived(out, Op::Add(a, b), "add", &[a, b])
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_row_bias(self.value(bias))?;
        self.derived(out, Op::AddRowBias(x, bias), "add_row_bias", &[x, bias])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).scale(s)?;
        self.derived(out, Op::Scale(x, s), "scale", &[x])
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).hadamard(self.value(b))?;
        self.derived(out, Op::Hadamard(a, b), "hadamard", &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose();
        self.derived(out, Op::Transpose(x), "transpose", &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Matrix::row_vector(vec![self.value(x).sum()]);
        self.derived(out, Op::Sum(x), "sum", &[x])
    }

    /// Masked, coefficient-weighted expert sum `Σ_k coef_k·λ_k·B_kᵀA_k`.
    ///
    /// `bt` stacks each expert's `b` factor as `sub_rank` rows of length
    /// `d_in`, `a` stacks the matching rows of length `d_out`. `lambda` is a
    /// `1 × n_experts` row; when absent the coefficients are used alone.
    /// Experts with `coef_k == 0` contribute nothing and get zero gradient.
    pub fn assemble_delta(
        &mut self,
        bt: Var,
        a: Var,
        lambda: Option<Var>,
        coef: &[T],
        sub_rank: usize,
    ) -> Result<Var> {
        let (btm, am) = (self.value(bt), self.value(a));
        if btm.rows() != am.rows() || sub_rank == 0 || btm.rows() != coef.len() * sub_rank {
            return Err(shape_err(
                "assemble_delta",
                format!(
                    "b {:?}, a {:?}, {} coefficients of sub-rank {sub_rank}",
                    btm.shape(),
                    am.shape(),
                    coef.len()
                ),
            ));
        }
        let lam = match lambda {
            Some(l) => {
                let lm = self.value(l);
                if lm.shape() != (1, coef.len()) {
                    return Err(shape_err(
                        "assemble_delta",
                        format!("lambda {:?} for {} experts", lm.shape(), coef.len()),
                    ));
                }
                Some(lm.data().to_vec())
            }
            None => None,
        };
        let weights = effective_weights(coef, lam.as_deref());
        let out = weighted_outer_sum(btm, am, &weights, sub_rank);
        let mut inputs = vec![bt, a];
        inputs.extend(lambda);
        self.derived(
            out,
            Op::AssembleDelta {
                bt,
                a,
                lambda,
                coef: coef.to_vec(),
                sub_rank,
            },
            "assemble_delta",
            &inputs,
        )
    }

    /// Row-wise layer normalization with `1 × cols` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let xm = self.value(x);
        let (rows, cols) = xm.shape();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.shape() != (1, cols) || b.shape() != (1, cols) {
            return Err(shape_err(
                "layer_norm",
                format!("gain {:?}, bias {:?} for {cols} columns", g.shape(), b.shape()),
            ));
        }
        let n = T::of(cols as f64);
        let mut xhat = Matrix::zeros(rows, cols);
        let mut out = Matrix::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for i in 0..rows {
            let row = xm.row(i);
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let r = T::one() / (var + eps).sqrt();
            rstd.push(r);
            for j in 0..cols {
                let h = (row[j] - mean) * r;
                xhat.set(i, j, h);
                out.set(i, j, h * g.data()[j] + b.data()[j]);
            }
        }
        self.derived(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            "layer_norm",
            &[x, gain, bias],
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let xm = self.value(x);
        let data = xm.data().iter().map(|&v| gelu(v)).collect();
        let out = Matrix::new(xm.rows(), xm.cols(), data)?;
        self.derived(out, Op::Gelu(x), "gelu", &[x])
    }

    /// Multi-head self-attention over a fused `[Q | K | V]` projection.
    ///
    /// `qkv` holds `sequences · tokens` rows of width `3·d`; rows of one
    /// sequence are contiguous. Returns the concatenated head outputs.
    pub fn attention(&mut self, qkv: Var, tokens: usize, heads: usize) -> Result<Var> {
        let m = self.value(qkv);
        let (rows, width) = m.shape();
        if tokens == 0 || heads == 0 || rows % tokens != 0 || width % 3 != 0 || (width / 3) % heads != 0 {
            return Err(shape_err(
                "attention",
                format!("{rows}x{width} with {tokens} tokens and {heads} heads"),
            ));
        }
        let d = width / 3;
        let dh = d / heads;
        let inv = T::one() / T::of(dh as f64).sqrt();
        let seqs = rows / tokens;
        let mut probs = vec![T::zero(); seqs * heads * tokens * tokens];
        let mut out = Matrix::zeros(rows, d);
        let q_at = |i: usize, h: usize| &m.row(i)[h * dh..(h + 1) * dh];
        let k_at = |i: usize, h: usize| &m.row(i)[d + h * dh..d + (h + 1) * dh];
        let v_at = |i: usize, h: usize| &m.row(i)[2 * d + h * dh..2 * d + (h + 1) * dh];
        for s in 0..seqs {
            let base = s * tokens;
            for h in 0..heads {
                let p_block = &mut probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
                for i in 0..tokens {
                    let q = q_at(base + i, h);
                    let p_row = &mut p_block[i * tokens..(i + 1) * tokens];
                    for (j, p) in p_row.iter_mut().enumerate() {
                        *p = dot(q, k_at(base + j, h)) * inv;
                    }
                    softmax_in_place(p_row);
                    let o = &mut out.row_mut(base + i)[h * dh..(h + 1) * dh];
                    for (j, &p) in p_row.iter().enumerate() {
                        for (oc, &vc) in o.iter_mut().zip(v_at(base + j, h)) {
                            *oc += p * vc;
                        }
                    }
                }
            }
        }
        self.derived(
            out,
            Op::Attention {
                qkv,
                tokens,
                heads,
                probs,
            },
            "attention",
            &[qkv],
        )
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn segment_mean(&mut self, x: Var, group: usize) -> Result<Var> {
        let xm = self.value(x);
        if group == 0 || !xm.rows().is_multiple_of(group) {
            return Err(shape_err(
                "segment_mean",
                format!("{} rows in groups of {group}", xm.rows()),
            ));
        }
        let groups = xm.rows() / group;
        let inv = T::one() / T::of(group as f64);
        let mut out = Matrix::zeros(groups, xm.cols());
        for g in 0..groups {
            let o = out.row_mut(g);
            for t in 0..group {
                for (oc, &v) in o.iter_mut().zip(xm.row(g * group + t)) {
                    *oc += v;
                }
            }
            for oc in o.iter_mut() {
                *oc *= inv;
            }
        }
        self.derived(out, Op::SegmentMean { x, group }, "segment_mean", &[x])
    }

    /// Mean softmax cross-entropy of `logits` rows against `labels`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let z = self.value(logits);
        if z.rows() != labels.len() || z.rows() == 0 {
            return Err(shape_err(
                "cross_entropy",
                format!("{} rows for {} labels", z.rows(), labels.len()),
            ));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= z.cols()) {
            return Err(shape_err("cross_entropy", format!("label {bad} with {} classes", z.cols())));
        }
        let probs = z.softmax_rows();
        let mut loss = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = z.row(i);
            let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[y];
        }
        loss /= T::of(labels.len() as f64);
        self.derived(
            Matrix::row_vector(vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            "cross_entropy",
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`.
    ///
    /// Every trainable leaf gets exactly one gradient; leaves the loss does
    /// not reach get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).shape() != (1, 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Matrix<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Matrix::filled(1, 1, T::one()));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            for (input, contribution) in self.adjoint(node, &g)? {
                accumulate(&mut grads[input.0], contribution)?;
            }
            grads[idx] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .enumerate()
            .filter(|(_, n)| n.param)
            .map(|(i, n)| {
                let g = grads[i]
                    .take()
                    .unwrap_or_else(|| Matrix::zeros(n.value.rows(), n.value.cols()));
                (Var(i), g)
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Contributions of one node's output gradient `g` to its inputs.
    fn adjoint(&self, node: &Node<'a, T>, g: &Matrix<T>) -> Result<Vec<(Var, Matrix<T>)>> {
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.matmul_nt(self.value(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, self.value(*a).matmul_tn(g)?));
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        out.push((*v, g.clone()));
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if self.wants(*x) {
                    out.push((*x, g.clone()));
                }
                if self.wants(*bias) {
                    out.push((*bias, column_sums(g)));
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    out.push((*x, g.scale(*s)?));
                }
            }
            Op::Hadamard(a, b) => {
                if self.wants(*a) {
                    out.push((*a, g.hadamard(self.value(*b))?));
                }
                if self.wants(*b) {
                    out.push((*b, g.hadamard(self.value(*a))?));
                }
            }
            Op::Transpose(x) => {
                if self.wants(*x) {
                    out.push((*x, g.transpose()));
                }
            }
            Op::Sum(x) => {
                let xm = self.value(*x);
                out.push((*x, Matrix::filled(xm.rows(), xm.cols(), g.get(0, 0))));
            }
            Op::AssembleDelta {
                bt,
                a,
                lambda,
                coef,
                sub_rank,
            } => {
                let (btm, am) = (self.value(*bt), self.value(*a));
                let lam = lambda.map(|l| self.value(l).data().to_vec());
                let weights = effective_weights(coef, lam.as_deref());
                // P = Bᵀ·G with rows of bt, Q = G·Aᵀ; both before weighting.
                let mut p = Matrix::zeros(btm.rows(), g.cols());
                gemm_nn(btm, g, &mut p);
                if self.wants(*a) {
                    let mut da = p.clone();
                    for r in 0..da.rows() {
                        let w = weights[r / sub_rank];
                        da.row_mut(r).iter_mut().for_each(|v| *v *= w);
                    }
                    out.push((*a, da));
                }
                if self.wants(*bt) {
                    let q = g.matmul_nt(am)?;
                    let mut dbt = q.transpose();
                    for r in 0..dbt.rows() {
                        let w = weights[r / sub_rank];
                        dbt.row_mut(r).iter_mut().for_each(|v| *v *= w);
                    }
                    out.push((*bt, dbt));
                }
                if let Some(l) = lambda {
                    if self.wants(*l) {
                        let mut dl = Matrix::zeros(1, coef.len());
                        for (k, &c) in coef.iter().enumerate() {
                            let mut acc = T::zero();
                            for r in k * sub_rank..(k + 1) * sub_rank {
                                acc += dot(p.row(r), am.row(r));
                            }
                            dl.set(0, k, c * acc);
                        }
                        out.push((*l, dl));
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let gm = self.value(*gain);
                let (rows, cols) = g.shape();
                if self.wants(*x) {
                    let n = T::of(cols as f64);
                    let mut dx = Matrix::zeros(rows, cols);
                    let mut dxh = vec![T::zero(); cols];
                    for i in 0..rows {
                        let (gr, hr) = (g.row(i), xhat.row(i));
                        for j in 0..cols {
                            dxh[j] = gr[j] * gm.data()[j];
                        }
                        let mean_d = dxh.iter().copied().sum::<T>() / n;
                        let mean_dh = dxh.iter().zip(hr).map(|(&d, &h)| d * h).sum::<T>() / n;
                        let o = dx.row_mut(i);
                        for j in 0..cols {
                            o[j] = rstd[i] * (dxh[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                    out.push((*x, dx));
                }
                if self.wants(*gain) {
                    out.push((*gain, column_sums(&g.hadamard(xhat)?)));
                }
                if self.wants(*bias) {
                    out.push((*bias, column_sums(g)));
                }
            }
            Op::Gelu(x) => {
                let xm = self.value(*x);
                let data = xm
                    .data()
                    .iter()
                    .zip(g.data())
                    .map(|(&v, &gv)| gv * gelu_grad(v))
                    .collect();
                out.push((*x, Matrix::new(xm.rows(), xm.cols(), data)?));
            }
            Op::Attention {
                qkv,
                tokens,
                heads,
                probs,
            } => {
                out.push((*qkv, attention_adjoint(self.value(*qkv), g, *tokens, *heads, probs)));
            }
            Op::SegmentMean { x, group } => {
                let xm = self.value(*x);
                let inv = T::one() / T::of(*group as f64);
                let mut dx = Matrix::zeros(xm.rows(), xm.cols());
                for r in 0..xm.rows() {
                    for (d, &gv) in dx.row_mut(r).iter_mut().zip(g.row(r / group)) {
                        *d = gv * inv;
                    }
                }
                out.push((*x, dx));
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = g.get(0, 0) / T::of(labels.len() as f64);
                let mut dz = probs.clone();
                for (i, &y) in labels.iter().enumerate() {
                    let row = dz.row_mut(i);
                    row[y] -= T::one();
                    row.iter_mut().for_each(|v| *v *= scale);
                }
                out.push((*logits, dz));
            }
        }
        for (_, m) in &out {
            if !m.is_finite() {
                return Err(Error::NonFinite("backward"));
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(slot: &mut Option<Matrix<T>>, g: Matrix<T>) -> Result<()> {
    match slot {
        None => *slot = Some(g),
        Some(acc) => {
            if acc.shape() != g.shape() {
                return Err(shape_err("backward", "gradient shape mismatch"));
            }
            for (a, &v) in acc.data_mut().iter_mut().zip(g.data()) {
                *a += v;
            }
        }
    }
    Ok(())
}

pub(crate) fn effective_weights<T: Scalar>(coef: &[T], lambda: Option<&[T]>) -> Vec<T> {
    match lambda {
        Some(l) => coef.iter().zip(l).map(|(&c, &l)| c * l).collect(),
        None => coef.to_vec(),
    }
}

/// `Σ_r w_{r/s} · bt[r]ᵀ a[r]`, computed as `btᵀ · (W a)` through the same
/// kernel as `gemm_nn`, so unit weights reproduce the dense product bit for bit.
pub(crate) fn weighted_outer_sum<T: Scalar>(
    bt: &Matrix<T>,
    a: &Matrix<T>,
    weights: &[T],
    sub_rank: usize,
) -> Matrix<T> {
    let (rank, d_in, d_out) = (bt.rows(), bt.cols(), a.cols());
    let mut wa = a.clone();
    for r in 0..rank {
        let w = weights[r / sub_rank];
        if w != T::one() {
            wa.row_mut(r).iter_mut().for_each(|v| *v *= w);
        }
    }
    let mut out = Matrix::zeros(d_in, d_out);
    T::gemm_acc(d_in, rank, d_out, bt.data(), 1, d_in as isize, wa.data(), d_out as isize, 1, out.data_mut(), d_out as isize);
    out
}

fn column_sums<T: Scalar>(g: &Matrix<T>) -> Matrix<T> {
    let mut out = Matrix::zeros(1, g.cols());
    for i in 0..g.rows() {
        for (o, &v) in out.data_mut().iter_mut().zip(g.row(i)) {
            *o += v;
        }
    }
    out
}

fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

fn gelu<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k, half) = (T::of(GELU_C), T::of(GELU_K), T::of(0.5));
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

fn attention_adjoint<T: Scalar>(
    qkv: &Matrix<T>,
    g: &Matrix<T>,
    tokens: usize,
    heads: usize,
    probs: &[T],
) -> Matrix<T> {
    let (rows, width) = qkv.shape();
    let d = width / 3;
    let dh = d / heads;
    let inv = T::one() / T::of(dh as f64).sqrt();
    let mut dqkv = Matrix::zeros(rows, width);
    let mut dp = vec![T::zero(); tokens];
    for s in 0..rows / tokens {
        let base = s * tokens;
        for h in 0..heads {
            let (qo, ko, vo, go) = (h * dh, d + h * dh, 2 * d + h * dh, h * dh);
            let p_block = &probs[(s * heads + h) * tokens * tokens..][..tokens * tokens];
            for i in 0..tokens {
                let p_row = &p_block[i * tokens..(i + 1) * tokens];
                let g_row = &g.row(base + i)[go..go + dh];
                for j in 0..tokens {
                    dp[j] = dot(g_row, &qkv.row(base + j)[vo..vo + dh]);
                    // dV_j += p_ij · dO_i
                    let dv = &mut dqkv.row_mut(base + j)[vo..vo + dh];
                    for (o, &gv) in dv.iter_mut().zip(g_row) {
                        *o += p_row[j] * gv;
                    }
                }
                let centre = dot(p_row, &dp);
                for j in 0..tokens {
                    let ds = p_row[j] * (dp[j] - centre) * inv;
                    if ds == T::zero() {
                        continue;
                    }
                    for c in 0..dh {
                        let kv = qkv.get(base + j, ko + c);
                        let qv = qkv.get(base + i, qo + c);
                        let dq = dqkv.get(base + i, qo + c) + ds * kv;
                        dqkv.set(base + i, qo + c, dq);
                        let dk = dqkv.get(base + j, ko + c) + ds * qv;
                        dqkv.set(base + j, ko + c, dk);
                    }
                }
            }
        }
    }
    dqkv
}
