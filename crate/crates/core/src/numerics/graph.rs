//! Dynamic reverse-mode tape.
//!
//! Every op evaluates eagerly and appends a node; [`Graph::backward`] walks the
//! nodes in reverse. A fresh graph is built per forward pass because the prune
//! mask changes the computation from image to image.

use std::borrow::Cow;

use super::{ParamSet, Scalar, Tensor};
use crate::error::{Error, Result};

/// Additive pre-softmax term for masked key columns.
pub const MASK_VALUE: f64 = -1000.0;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<F> {
    Input,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    MaskedSoftmax(Var),
    GatherRows {
        x: Var,
        rows: Vec<usize>,
    },
    AssembleTokens {
        patches: Var,
        cls: Var,
        pos: Var,
        batch: usize,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<F>,
    },
    Sum(Var),
}

#[derive(Debug)]
struct Node<'p, F: Scalar> {
    shape: Vec<usize>,
    value: Cow<'p, [F]>,
    op: Op<F>,
    needs_grad: bool,
}

/// Recording of one forward computation.
///
/// `'p` is the lifetime of borrowed parameter storage; binding a [`ParamSet`]
/// does not copy its values.
#[derive(Debug)]
pub struct Graph<'p, F: Scalar> {
    nodes: Vec<Node<'p, F>>,
    macs: u64,
}

impl<F: Scalar> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Scalar> Graph<'p, F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            macs: 0,
        }
    }

    /// Multiply-accumulates executed by matrix products so far.
    pub fn macs(&self) -> u64 {
        self.macs
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v), self.value(v).to_vec()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'p, [F]>, op: Op<F>, needs_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Owned input; gradients are tracked when `t.requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let needs = t.requires_grad;
        self.push(t.shape, Cow::Owned(t.values), Op::Input, needs)
    }

    /// Owned input that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.push(t.shape, Cow::Owned(t.values), Op::Input, false)
    }

    /// Borrowed parameter input.
    pub fn param(&mut self, t: &'p Tensor<F>, trainable: bool) -> Var {
        let needs = trainable && t.requires_grad;
        self.push(t.shape.clone(), Cow::Borrowed(&t.values), Op::Input, needs)
    }

    /// Binds every tensor of `params` in order.
    pub fn bind(&mut self, params: &'p ParamSet<F>, trainable: bool) -> Vec<Var> {
        params.tensors().iter().map(|t| self.param(t, trainable)).collect()
    }

    /// `[m, k] x [k, n] -> [m, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(
            sa.len() == 2 && sb.len() == 2 && sa[1] == sb[0],
            "matmul shapes {sa:?} x {sb:?}"
        );
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![F::zero(); m * n];
        F::gemm(
            m,
            k,
            n,
            F::one(),
            self.value(a),
            k as isize,
            1,
            self.value(b),
            n as isize,
            1,
            F::zero(),
            &mut out,
            n as isize,
            1,
        );
        self.macs += (m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        self.push(vec![m, n], Cow::Owned(out), Op::MatMul(a, b), ng)
    }

    /// Adds a length-`n` bias to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-scalar input");
        assert_eq!(self.value(bias).len(), n, "bias width");
        let b = self.value(bias);
        let out: Vec<F> = self
            .value(x)
            .chunks_exact(n)
            .flat_map(|row| row.iter().zip(b).map(|(v, b)| *v + *b))
            .collect();
        let ng = self.ng(&[x, bias]);
        self.push(shape, Cow::Owned(out), Op::AddBias(x, bias), ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x + *y).collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Add(a, b), ng)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "mul shapes");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| *x * *y).collect();
        let ng = self.ng(&[a, b]);
        self.push(self.shape(a).to_vec(), Cow::Owned(out), Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let out = self.value(x).iter().map(|v| *v * s).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Scale(x, s), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| gelu(*v)).collect();
        let ng = self.ng(&[x]);
        self.push(self.shape(x).to_vec(), Cow::Owned(out), Op::Gelu(x), ng)
    }

    /// Row-wise layer normalization over the last dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-scalar input");
        assert_eq!(self.value(gain).len(), n);
        assert_eq!(self.value(bias).len(), n);
        let rows = self.value(x).len() / n;
        let inv_n = F::one() / F::of(n as f64);
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); rows * n];
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mean = row.iter().copied().sum::<F>() * inv_n;
                let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<F>() * inv_n;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    out[r * n + j] = g[j] * h + b[j];
                }
            }
        }
        let ng = self.ng(&[x, gain, bias]);
        let (xhat, rstd) = if ng { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            shape,
            Cow::Owned(out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            ng,
        )
    }

    /// `[batch*tokens, heads*dh] -> [batch*heads, tokens, dh]`
    pub fn split_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let d = self.shape(x)[1];
        assert_eq!(self.shape(x)[0], batch * tokens);
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..tokens {
                let src = &xv[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                for h in 0..heads {
                    let dst = ((b * heads + h) * tokens + t) * dh;
                    out[dst..dst + dh].copy_from_slice(&src[h * dh..(h + 1) * dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![batch * heads, tokens, dh],
            Cow::Owned(out),
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            },
            ng,
        )
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, tokens: usize, heads: usize) -> Var {
        let s = self.shape(x);
        assert_eq!(s, [batch * heads, tokens, s[2]]);
        let dh = s[2];
        let d = dh * heads;
        let xv = self.value(x);
        let mut out = vec![F::zero(); xv.len()];
        for b in 0..batch {
            for t in 0..tokens {
                for h in 0..heads {
                    let src = ((b * heads + h) * tokens + t) * dh;
                    let dst = (b * tokens + t) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&xv[src..src + dh]);
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![batch * tokens, d],
            Cow::Owned(out),
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            },
            ng,
        )
    }

    /// Batched product `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0],
            "bmm shapes {sa:?} x {sb:?}"
        );
        let (g, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        assert_eq!(if trans_b { sb[2] } else { sb[1] }, k, "bmm inner dim");
        let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
        let mut out = vec![F::zero(); g * m * n];
        {
            let (av, bv) = (self.value(a), self.value(b));
            for i in 0..g {
                F::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    &av[i * m * k..(i + 1) * m * k],
                    k as isize,
                    1,
                    &bv[i * k * n..(i + 1) * k * n],
                    rsb,
                    csb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                    n as isize,
                    1,
                );
            }
        }
        self.macs += (g * m * k * n) as u64;
        let ng = self.ng(&[a, b]);
        self.push(vec![g, m, n], Cow::Owned(out), Op::Bmm { a, b, trans_b }, ng)
    }

    /// Softmax over the last dimension after adding an additive mask.
    ///
    /// `mask` holds one row of width `n` per `rows_per_mask` consecutive input
    /// rows. Entries are `0` (keep) or [`MASK_VALUE`]; a mask row with no zero
    /// entry is rejected.
    pub fn masked_softmax(&mut self, x: Var, mask: &[F], rows_per_mask: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("non-scalar input");
        let rows = self.value(x).len() / n;
        if rows_per_mask == 0 || mask.len() * rows_per_mask != rows * n {
            return Err(Error::Shape(format!(
                "mask of {} entries does not cover {rows} rows of width {n}",
                mask.len()
            )));
        }
        if mask.chunks_exact(n).any(|m| m.iter().all(|v| *v != F::zero())) {
            return Err(Error::FullyMaskedRow);
        }
        let mut out = vec![F::zero(); rows * n];
        let xv = self.value(x);
        for r in 0..rows {
            let mrow = &mask[(r / rows_per_mask) * n..(r / rows_per_mask + 1) * n];
            softmax_row(&xv[r * n..(r + 1) * n], mrow, &mut out[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        Ok(self.push(shape, Cow::Owned(out), Op::MaskedSoftmax(x), ng))
    }

    /// Selects rows of a 2-D node.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2);
        let n = s[1];
        let xv = self.value(x);
        let mut out = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            out.extend_from_slice(&xv[r * n..(r + 1) * n]);
        }
        let ng = self.ng(&[x]);
        self.push(
            vec![rows.len(), n],
            Cow::Owned(out),
            Op::GatherRows { x, rows: rows.to_vec() },
            ng,
        )
    }

    /// Builds `[batch*(n+1), d]` token rows: the class token followed by the
    /// `n` patch tokens of each image, plus positional embeddings.
    pub fn assemble_tokens(&mut self, patches: Var, cls: Var, pos: Var, batch: usize) -> Var {
        let d = self.value(cls).len();
        let tokens = self.value(pos).len() / d;
        assert_eq!(self.value(pos).len(), tokens * d);
        assert_eq!(self.value(patches).len(), batch * (tokens - 1) * d);
        let (pv, cv, posv) = (self.value(patches), self.value(cls), self.value(pos));
        let mut out = vec![F::zero(); batch * tokens * d];
        for b in 0..batch {
            for t in 0..tokens {
                let dst = &mut out[(b * tokens + t) * d..(b * tokens + t + 1) * d];
                let src = if t == 0 {
                    cv
                } else {
                    let r = b * (tokens - 1) + t - 1;
                    &pv[r * d..(r + 1) * d]
                };
                for j in 0..d {
                    dst[j] = src[j] + posv[t * d + j];
                }
            }
        }
        let ng = self.ng(&[patches, cls, pos]);
        self.push(
            vec![batch * tokens, d],
            Cow::Owned(out),
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            },
            ng,
        )
    }

    /// Mean cross-entropy of `[b, c]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let s = self.shape(logits);
        assert_eq!(s.len(), 2);
        let (b, c) = (s[0], s[1]);
        assert_eq!(labels.len(), b, "one label per row");
        let lv = self.value(logits);
        let mut probs = vec![F::zero(); b * c];
        let zero_mask = vec![F::zero(); c];
        let mut loss = F::zero();
        for r in 0..b {
            let row = &lv[r * c..(r + 1) * c];
            softmax_row(row, &zero_mask, &mut probs[r * c..(r + 1) * c]);
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = max + row.iter().map(|v| (*v - max).exp()).sum::<F>().ln();
            loss += lse - row[labels[r]];
        }
        loss /= F::of(b as f64);
        let ng = self.ng(&[logits]);
        self.push(
            vec![1],
            Cow::Owned(vec![loss]),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            ng,
        )
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let ng = self.ng(&[x]);
        self.push(vec![1], Cow::Owned(vec![s]), Op::Sum(x), ng)
    }

    /// Backpropagates from a scalar node.
    pub fn backward(&self, root: Var) -> Grads<F> {
        assert_eq!(self.value(root).len(), 1, "backward needs a scalar root");
        self.backward_with(root, vec![F::one()])
    }

    /// Backpropagates an explicit output cotangent `seed` from `root`.
    pub fn backward_with(&self, root: Var, seed: Vec<F>) -> Grads<F> {
        assert_eq!(seed.len(), self.value(root).len(), "seed length");
        let mut grads: Vec<Option<Vec<F>>> = Vec::new();
        grads.resize_with(root.0 + 1, || None);
        if self.nodes[root.0].needs_grad {
            grads[root.0] = Some(seed);
        }
        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Input) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
        }
        Grads { grads }
    }

    fn backprop_node(&self, i: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Input => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if let Some(da) = self.slot(grads, *a) {
                    F::gemm(
                        m,
                        n,
                        k,
                        F::one(),
                        g,
                        n as isize,
                        1,
                        self.value(*b),
                        1,
                        n as isize,
                        F::one(),
                        da,
                        k as isize,
                        1,
                    );
                }
                if let Some(db) = self.slot(grads, *b) {
                    F::gemm(
                        k,
                        m,
                        n,
                        F::one(),
                        self.value(*a),
                        1,
                        k as isize,
                        g,
                        n as isize,
                        1,
                        F::one(),
                        db,
                        n as isize,
                        1,
                    );
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                }
                if let Some(db) = self.slot(grads, *bias) {
                    let n = db.len();
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(d) = self.slot(grads, v) {
                        d.iter_mut().zip(g).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::Mul(a, b) => {
                if let Some(da) = self.slot(grads, *a) {
                    let bv = self.value(*b);
                    for j in 0..g.len() {
                        da[j] += g[j] * bv[j];
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    let av = self.value(*a);
                    for j in 0..g.len() {
                        db[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().zip(g).for_each(|(d, v)| *d += *v * *s);
                }
            }
            Op::Gelu(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let xv = self.value(*x);
                    for j in 0..g.len() {
                        dx[j] += g[j] * gelu_grad(xv[j]);
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
                let n = self.value(*gain).len();
                let gv = self.value(*gain);
                if let Some(dx) = self.slot(grads, *x) {
                    let inv_n = F::one() / F::of(n as f64);
                    for (r, rs) in rstd.iter().enumerate() {
                        let gr = &g[r * n..(r + 1) * n];
                        let hr = &xhat[r * n..(r + 1) * n];
                        let mut mean_d = F::zero();
                        let mut mean_dh = F::zero();
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            mean_d += d;
                            mean_dh += d * hr[j];
                        }
                        mean_d *= inv_n;
                        mean_dh *= inv_n;
                        for j in 0..n {
                            let d = gr[j] * gv[j];
                            dx[r * n + j] += *rs * (d - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if let Some(dg) = self.slot(grads, *gain) {
                    for (gr, hr) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if let Some(db) = self.slot(grads, *bias) {
                    for gr in g.chunks_exact(n) {
                        db.iter_mut().zip(gr).for_each(|(d, v)| *d += *v);
                    }
                }
            }
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let d = dx.len() / (batch * tokens);
                    let dh = d / heads;
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let src = ((b * heads + h) * tokens + t) * dh;
                                let dst = (b * tokens + t) * d + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let d = dx.len() / (batch * tokens);
                    let dh = d / heads;
                    for b in 0..*batch {
                        for t in 0..*tokens {
                            for h in 0..*heads {
                                let dst = ((b * heads + h) * tokens + t) * dh;
                                let src = (b * tokens + t) * d + h * dh;
                                for j in 0..dh {
                                    dx[dst + j] += g[src + j];
                                }
                            }
                        }
                    }
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (groups, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.shape[2];
                let (av, bv) = (self.value(*a), self.value(*b));
                if let Some(da) = self.slot(grads, *a) {
                    // da = g . B^T
                    let (rs, cs) = if *trans_b { (k as isize, 1) } else { (1, n as isize) };
                    for i in 0..groups {
                        F::gemm(
                            m,
                            n,
                            k,
                            F::one(),
                            &g[i * m * n..(i + 1) * m * n],
                            n as isize,
                            1,
                            &bv[i * k * n..(i + 1) * k * n],
                            rs,
                            cs,
                            F::one(),
                            &mut da[i * m * k..(i + 1) * m * k],
                            k as isize,
                            1,
                        );
                    }
                }
                if let Some(db) = self.slot(grads, *b) {
                    for i in 0..groups {
                        let ga = &av[i * m * k..(i + 1) * m * k];
                        let gg = &g[i * m * n..(i + 1) * m * n];
                        let out = &mut db[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            // db = g^T . a  (n x k)
                            F::gemm(
                                n,
                                m,
                                k,
                                F::one(),
                                gg,
                                1,
                                n as isize,
                                ga,
                                k as isize,
                                1,
                                F::one(),
                                out,
                                k as isize,
                                1,
                            );
                        } else {
                            // db = a^T . g  (k x n)
                            F::gemm(
                                k,
                                m,
                                n,
                                F::one(),
                                ga,
                                1,
                                k as isize,
                                gg,
                                n as isize,
                                1,
                                F::one(),
                                out,
                                n as isize,
                                1,
                            );
                        }
                    }
                }
            }
            Op::MaskedSoftmax(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = *node.shape.last().expect("non-scalar");
                    let y = &node.value;
                    for r in 0..y.len() / n {
                        let yr = &y[r * n..(r + 1) * n];
                        let gr = &g[r * n..(r + 1) * n];
                        let dot: F = yr.iter().zip(gr).map(|(a, b)| *a * *b).sum();
                        for j in 0..n {
                            dx[r * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                }
            }
            Op::GatherRows { x, rows } => {
                if let Some(dx) = self.slot(grads, *x) {
                    let n = node.shape[1];
                    for (i, &r) in rows.iter().enumerate() {
                        for j in 0..n {
                            dx[r * n + j] += g[i * n + j];
                        }
                    }
                }
            }
            Op::AssembleTokens {
                patches,
                cls,
                pos,
                batch,
            } => {
                let d = self.value(*cls).len();
                let tokens = self.value(*pos).len() / d;
                if let Some(dp) = self.slot(grads, *patches) {
                    for b in 0..*batch {
                        for t in 1..tokens {
                            let src = (b * tokens + t) * d;
                            let dst = (b * (tokens - 1) + t - 1) * d;
                            for j in 0..d {
                                dp[dst + j] += g[src + j];
                            }
                        }
                    }
                }
                if let Some(dc) = self.slot(grads, *cls) {
                    for b in 0..*batch {
                        for j in 0..d {
                            dc[j] += g[b * tokens * d + j];
                        }
                    }
                }
                if let Some(dpos) = self.slot(grads, *pos) {
                    for row in g.chunks_exact(tokens * d) {
                        dpos.iter_mut().zip(row).for_each(|(a, v)| *a += *v);
                    }
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if let Some(dl) = self.slot(grads, *logits) {
                    let c = self.shape(*logits)[1];
                    let scale = g[0] / F::of(labels.len() as f64);
                    for (r, &y) in labels.iter().enumerate() {
                        for j in 0..c {
                            let onehot = if j == y { F::one() } else { F::zero() };
                            dl[r * c + j] += (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(dx) = self.slot(grads, *x) {
                    dx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
        }
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<F>>], v: Var) -> Option<&'g mut Vec<F>> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![F::zero(); len]))
    }
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Grads<F> {
    pub fn wrt(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds gradients of bound parameters into their tensors' grad buffers.
    pub fn accumulate_into(&self, params: &mut ParamSet<F>, vars: &[Var]) {
        assert_eq!(params.len(), vars.len(), "binding does not match parameter set");
        for (t, v) in params.tensors_mut().iter_mut().zip(vars) {
            if let Some(g) = self.wrt(*v) {
                t.accumulate_grad(g);
            }
        }
    }

    /// Detaches gradients for bound parameters, in binding order.
    pub fn collect(&self, vars: &[Var]) -> Vec<Option<Vec<F>>> {
        vars.iter().map(|v| self.wrt(*v).map(<[F]>::to_vec)).collect()
    }
}

pub(crate) fn softmax_row<F: Scalar>(x: &[F], mask: &[F], out: &mut [F]) {
    let max = x.iter().zip(mask).map(|(v, m)| *v + *m).fold(F::neg_infinity(), F::max);
    let mut total = F::zero();
    for ((o, v), m) in out.iter_mut().zip(x).zip(mask) {
        *o = (*v + *m - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

pub(crate) fn gelu<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    half * x * (F::one() + (c * (x + a * x * x * x)).act_tanh())
}

fn gelu_grad<F: Scalar>(x: F) -> F {
    let (c, a, half) = (F::of(GELU_C), F::of(GELU_A), F::of(0.5));
    let t = (c * (x + a * x * x * x)).act_tanh();
    half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + F::of(3.0) * a * x * x)
}
