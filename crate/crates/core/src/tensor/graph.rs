//! Reverse-mode automatic differentiation over a closed op set.
//!
//! A [`Graph`] is a tape: nodes are appended in evaluation order, so the
//! reverse of insertion order is a reverse topological order and
//! [`Graph::backward`] visits every node exactly once.

use super::kernels::{self, KeySet};
use super::Tensor;
use crate::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Silu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        /// Per-row `(mean, rstd)`.
        stats: Vec<(f32, f32)>,
    },
    ConcatCols(Var, Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    CausalAttention {
        q: Var,
        k: Var,
        v: Var,
        n_heads: usize,
        window: usize,
        probs: Vec<f32>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
    },
    DotConst {
        x: Var,
        weights: Vec<f32>,
    },
    WeightedSum(Vec<(Var, f32)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f32>>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Trainable leaf; receives a gradient on backward.
    pub fn param(&mut self, t: &Tensor) -> Var {
        let mut value = t.clone();
        value.clear_grad();
        self.push(value, Op::Leaf, true)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).add(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let out = self.value(x).add_bias(self.value(bias))?;
        let rg = self.needs(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    /// `x · w + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.value(x).silu();
        let rg = self.needs(&[x]);
        self.push(out, Op::Silu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax();
        let rg = self.needs(&[x]);
        self.push(out, Op::Softmax(x), rg)
    }

    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let c = xv.cols();
        let (g, b) = (self.value(gain), self.value(bias));
        if g.len() != c || b.len() != c {
            return Err(Error::dim("layernorm", "gain/bias length must equal cols"));
        }
        let mut out = vec![0.0; xv.len()];
        let mut stats = Vec::with_capacity(xv.rows());
        for (o, row) in out.chunks_mut(c).zip(xv.data().chunks(c)) {
            stats.push(kernels::layernorm_row(o, row, g.data(), b.data()));
        }
        let out = Tensor::from_op(xv.shape().to_vec(), out);
        let rg = self.needs(&[x, gain, bias]);
        Ok(self.push(out, Op::LayerNorm { x, gain, bias, stats }, rg))
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).concat_cols(self.value(b))?;
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::ConcatCols(a, b), rg))
    }

    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = self.value(table).embedding_lookup(ids)?;
        let rg = self.needs(&[table]);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Causal multi-head attention over `rows / window` independent windows.
    ///
    /// `q`, `k`, `v` are `[rows × d]` with rows grouped window by window.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, n_heads: usize, window: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let d = qv.cols();
        let rows = qv.rows();
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(Error::dim("causal_attention", "q, k, v shapes differ"));
        }
        if window == 0 || rows % window != 0 || d % n_heads != 0 {
            return Err(Error::dim(
                "causal_attention",
                format!("rows {rows}, window {window}, d {d}, heads {n_heads}"),
            ));
        }
        let key_sets: Vec<KeySet> = (0..window).map(KeySet::causal).collect();
        let mut out = Vec::with_capacity(rows * d);
        let mut probs = Vec::new();
        for w in 0..rows / window {
            let span = w * window * d..(w + 1) * window * d;
            let (o, p) = kernels::attend(
                &qv.data()[span.clone()],
                &kv.data()[span.clone()],
                &vv.data()[span],
                d,
                n_heads,
                &key_sets,
            );
            out.extend(o);
            probs.extend(p);
        }
        let out = Tensor::from_op(qv.shape().to_vec(), out);
        let rg = self.needs(&[q, k, v]);
        Ok(self.push(
            out,
            Op::CausalAttention {
                q,
                k,
                v,
                n_heads,
                window,
                probs,
            },
            rg,
        ))
    }

    /// Mean cross-entropy of `logits` rows against `targets`; a scalar `[1]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let loss = self.value(logits).cross_entropy(targets)?;
        let rg = self.needs(&[logits]);
        Ok(self.push(
            Tensor::from_op(vec![1], vec![loss]),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// `Σ x ⊙ weights`; a scalar `[1]`.
    pub fn dot_const(&mut self, x: Var, weights: Vec<f32>) -> Result<Var> {
        let xv = self.value(x);
        if xv.len() != weights.len() {
            return Err(Error::dim("dot_const", "weights length differs"));
        }
        let s: f64 = xv.data().iter().zip(&weights).map(|(&a, &b)| a as f64 * b as f64).sum();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::from_op(vec![1], vec![s as f32]),
            Op::DotConst { x, weights },
            rg,
        ))
    }

    /// `Σ λ_i · s_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(Var, f32)]) -> Result<Var> {
        let mut s = 0.0f64;
        for &(v, w) in terms {
            let t = self.value(v);
            if t.len() != 1 {
                return Err(Error::dim("weighted_sum", "terms must be scalars"));
            }
            s += t.data()[0] as f64 * w as f64;
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.needs(&vars);
        Ok(self.push(
            Tensor::from_op(vec![1], vec![s as f32]),
            Op::WeightedSum(terms.to_vec()),
            rg,
        ))
    }

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn acc(grads: &mut [Option<Vec<f32>>], v: Var, len: usize) -> &mut Vec<f32> {
        grads[v.0].get_or_insert_with(|| vec![0.0; len])
    }

    /// Back-propagates from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::dim("backward", "loss must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f32>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(gout) = grads[idx].take() else {
                continue;
            };
            let nodes = &self.nodes;
            let val = |v: Var| &nodes[v.0].value;
            let rg = |v: Var| nodes[v.0].requires_grad;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (av, bv) = (val(*a), val(*b));
                    let (m, k, n) = (av.rows(), av.cols(), bv.shape()[1]);
                    if rg(*a) {
                        let bt = kernels::transpose(bv.data(), k, n);
                        let ga = Self::acc(&mut grads, *a, m * k);
                        kernels::matmul_acc(ga, &gout, &bt, m, n, k);
                    }
                    if rg(*b) {
                        let gb = Self::acc(&mut grads, *b, k * n);
                        kernels::matmul_tn_acc(gb, av.data(), &gout, m, k, n);
                    }
                }
                Op::Add(a, b) => {
                    for v in [*a, *b] {
                        if rg(v) {
                            let g = Self::acc(&mut grads, v, gout.len());
                            g.iter_mut().zip(&gout).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::AddBias(x, b) => {
                    if rg(*x) {
                        let g = Self::acc(&mut grads, *x, gout.len());
                        g.iter_mut().zip(&gout).for_each(|(x, y)| *x += y);
                    }
                    if rg(*b) {
                        let c = val(*b).len();
                        let g = Self::acc(&mut grads, *b, c);
                        for row in gout.chunks(c) {
                            g.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                        }
                    }
                }
                Op::Silu(x) => {
                    if rg(*x) {
                        let xv = val(*x).data();
                        let g = Self::acc(&mut grads, *x, xv.len());
                        for ((gi, &go), &xi) in g.iter_mut().zip(&gout).zip(xv) {
                            *gi += go * kernels::silu_grad(xi);
                        }
                    }
                }
                Op::Softmax(x) => {
                    if rg(*x) {
                        let y = node.value.data();
                        let c = node.value.cols();
                        let g = Self::acc(&mut grads, *x, y.len());
                        for ((gr, yr), gor) in g.chunks_mut(c).zip(y.chunks(c)).zip(gout.chunks(c)) {
                            let dot: f32 = yr.iter().zip(gor).map(|(a, b)| a * b).sum();
                            for ((gi, &yi), &goi) in gr.iter_mut().zip(yr).zip(gor) {
                                *gi += yi * (goi - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, stats } => {
                    let xv = val(*x);
                    let c = xv.cols();
                    let gv = val(*gain).data().to_vec();
                    if rg(*gain) || rg(*bias) {
                        let mut dg = vec![0.0f32; c];
                        let mut db = vec![0.0f32; c];
                        for ((row, gor), &(mean, rstd)) in xv.data().chunks(c).zip(gout.chunks(c)).zip(stats) {
                            for j in 0..c {
                                dg[j] += gor[j] * (row[j] - mean) * rstd;
                                db[j] += gor[j];
                            }
                        }
                        if rg(*gain) {
                            let g = Self::acc(&mut grads, *gain, c);
                            g.iter_mut().zip(&dg).for_each(|(a, b)| *a += b);
                        }
                        if rg(*bias) {
                            let g = Self::acc(&mut grads, *bias, c);
                            g.iter_mut().zip(&db).for_each(|(a, b)| *a += b);
                        }
                    }
                    if rg(*x) {
                        let g = Self::acc(&mut grads, *x, xv.len());
                        let n = c as f32;
                        for ((gr, (row, gor)), &(mean, rstd)) in
                            g.chunks_mut(c).zip(xv.data().chunks(c).zip(gout.chunks(c))).zip(stats)
                        {
                            // dx = rstd * (dxhat - mean(dxhat) - xhat * mean(dxhat * xhat))
                            let mut sum_dxhat = 0.0f32;
                            let mut sum_dxhat_xhat = 0.0f32;
                            for j in 0..c {
                                let dxhat = gor[j] * gv[j];
                                let xhat = (row[j] - mean) * rstd;
                                sum_dxhat += dxhat;
                                sum_dxhat_xhat += dxhat * xhat;
                            }
                            for j in 0..c {
                                let dxhat = gor[j] * gv[j];
                                let xhat = (row[j] - mean) * rstd;
                                gr[j] += rstd * (dxhat - sum_dxhat / n - xhat * sum_dxhat_xhat / n);
                            }
                        }
                    }
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (val(*a).cols(), val(*b).cols());
                    let rows = val(*a).rows();
                    if rg(*a) {
                        let g = Self::acc(&mut grads, *a, rows * ca);
                        for r in 0..rows {
                            for j in 0..ca {
                                g[r * ca + j] += gout[r * (ca + cb) + j];
                            }
                        }
                    }
                    if rg(*b) {
                        let g = Self::acc(&mut grads, *b, rows * cb);
                        for r in 0..rows {
                            for j in 0..cb {
                                g[r * cb + j] += gout[r * (ca + cb) + ca + j];
                            }
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if rg(*table) {
                        let tv = val(*table);
                        let d = tv.cols();
                        let g = Self::acc(&mut grads, *table, tv.len());
                        for (r, &id) in ids.iter().enumerate() {
                            let dst = &mut g[id * d..(id + 1) * d];
                            dst.iter_mut().zip(&gout[r * d..(r + 1) * d]).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::CausalAttention {
                    q,
                    k,
                    v,
                    n_heads,
                    window,
                    probs,
                } => {
                    let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                    let d = qv.cols();
                    let rows = qv.rows();
                    let key_sets: Vec<KeySet> = (0..*window).map(KeySet::causal).collect();
                    let per_window_probs: usize = key_sets.iter().map(KeySet::len).sum::<usize>() * n_heads;
                    let mut dq = vec![0.0; rows * d];
                    let mut dk = vec![0.0; rows * d];
                    let mut dv = vec![0.0; rows * d];
                    for w in 0..rows / window {
                        let span = w * window * d..(w + 1) * window * d;
                        kernels::attend_backward(
                            &gout[span.clone()],
                            &qv.data()[span.clone()],
                            &kv.data()[span.clone()],
                            &vv.data()[span.clone()],
                            &probs[w * per_window_probs..(w + 1) * per_window_probs],
                            d,
                            *n_heads,
                            &key_sets,
                            &mut dq[span.clone()],
                            &mut dk[span.clone()],
                            &mut dv[span],
                        );
                    }
                    for (var, gv) in [(*q, dq), (*k, dk), (*v, dv)] {
                        if rg(var) {
                            let g = Self::acc(&mut grads, var, rows * d);
                            g.iter_mut().zip(&gv).for_each(|(a, b)| *a += b);
                        }
                    }
                }
                Op::CrossEntropy { logits, targets } => {
                    if rg(*logits) {
                        let lv = val(*logits);
                        let c = lv.cols();
                        let scale = gout[0] / targets.len() as f32;
                        let g = Self::acc(&mut grads, *logits, lv.len());
                        for (r, &t) in targets.iter().enumerate() {
                            let mut p = lv.row(r).to_vec();
                            kernels::softmax_in_place(&mut p);
                            p[t] -= 1.0;
                            for (gi, pi) in g[r * c..(r + 1) * c].iter_mut().zip(&p) {
                                *gi += scale * pi;
                            }
                        }
                    }
                }
                Op::DotConst { x, weights } => {
                    if rg(*x) {
                        let g = Self::acc(&mut grads, *x, weights.len());
                        for (gi, &w) in g.iter_mut().zip(weights) {
                            *gi += gout[0] * w;
                        }
                    }
                }
                Op::WeightedSum(terms) => {
                    for &(v, w) in terms {
                        if rg(v) {
                            let g = Self::acc(&mut grads, v, 1);
                            g[0] += gout[0] * w;
                        }
                    }
                }
            }
            // Leaves keep their gradient; intermediates are consumed.
            if matches!(self.nodes[idx].op, Op::Leaf) {
                grads[idx] = Some(gout);
            }
        }
        self.grads = grads;
        Ok(())
    }
}
