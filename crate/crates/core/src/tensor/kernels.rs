//! Slice-level kernels shared by the eager path and the autodiff tape.
//!
//! Every reduction runs in a fixed sequential order so that a row's result
//! never depends on how many other rows were computed alongside it. This is
//! what makes cached, uncached and tree-masked forwards agree bit for bit.

/// `out[m×n] += a[m×k] · b[k×n]`, accumulating each element over `k` in order.
pub fn matmul_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (kk, &a_ik) in a_row.iter().enumerate() {
            let b_row = &b[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

pub fn matmul(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

pub fn transpose(a: &[f32], rows: usize, cols: usize) -> Vec<f32> {
    let mut out = vec![0.0; rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`, accumulating over `m` in order.
pub fn matmul_tn_acc(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let b_row = &b[i * n..(i + 1) * n];
        for kk in 0..k {
            let a_ik = a[i * k + kk];
            if a_ik == 0.0 {
                continue;
            }
            let out_row = &mut out[kk * n..(kk + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o += a_ik * bv;
            }
        }
    }
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

#[inline]
pub fn silu_grad(x: f32) -> f32 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

/// In-place max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0f32;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// `ln Σ exp(row)` with max subtraction, accumulated in `f64`.
pub fn log_sum_exp(row: &[f32]) -> f64 {
    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max) as f64;
    let sum: f64 = row.iter().map(|&v| (v as f64 - max).exp()).sum();
    max + sum.ln()
}

pub const LAYERNORM_EPS: f32 = 1e-5;

/// Row statistics `(mean, 1/sqrt(var + eps))` with biased variance.
pub fn layernorm_stats(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f64;
    let mean = row.iter().map(|&v| v as f64).sum::<f64>() / n;
    let var = row
        .iter()
        .map(|&v| {
            let c = v as f64 - mean;
            c * c
        })
        .sum::<f64>()
        / n;
    (mean as f32, (1.0 / (var + LAYERNORM_EPS as f64).sqrt()) as f32)
}

pub fn layernorm_row(out: &mut [f32], row: &[f32], gain: &[f32], bias: &[f32]) -> (f32, f32) {
    let (mean, rstd) = layernorm_stats(row);
    for (((o, &x), &g), &b) in out.iter_mut().zip(row).zip(gain).zip(bias) {
        *o = (x - mean) * rstd * g + b;
    }
    (mean, rstd)
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Indices of the `k` largest elements, ordered by value descending then index ascending.
pub fn top_k(row: &[f32], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    let cmp = |a: &usize, b: &usize| {
        row[*b]
            .partial_cmp(&row[*a])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(b))
    };
    let k = k.min(row.len());
    if k < idx.len() && k > 0 {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_by(cmp);
    idx.truncate(k);
    idx
}

/// Keys visible to one query row: all of `0..prefix`, then each index in
/// `extra` (ascending, each `>= prefix`).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct KeySet {
    pub prefix: usize,
    pub extra: Vec<usize>,
}

impl KeySet {
    pub fn causal(upto_inclusive: usize) -> Self {
        KeySet {
            prefix: upto_inclusive + 1,
            extra: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.prefix + self.extra.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.prefix).chain(self.extra.iter().copied())
    }

    pub fn contains(&self, key: usize) -> bool {
        key < self.prefix || self.extra.binary_search(&key).is_ok()
    }
}

/// Multi-head scaled dot-product attention over explicit key sets.
///
/// `q` is `[T×d]`, `keys`/`values` are `[S×d]`. Row `t` attends to
/// `key_sets[t]`. Returns the `[T×d]` output and the attention
/// probabilities laid out per `(t, head)` in key-set iteration order.
pub fn attend(
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    d: usize,
    n_heads: usize,
    key_sets: &[KeySet],
) -> (Vec<f32>, Vec<f32>) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let t_rows = key_sets.len();
    let total: usize = key_sets.iter().map(|ks| ks.len()).sum::<usize>() * n_heads;
    let mut probs = Vec::with_capacity(total);
    let mut out = vec![0.0f32; t_rows * d];
    let mut scores: Vec<f32> = Vec::new();
    for (t, ks) in key_sets.iter().enumerate() {
        for h in 0..n_heads {
            let off = h * dh;
            let qh = &q[t * d + off..t * d + off + dh];
            scores.clear();
            for j in ks.iter() {
                let kh = &keys[j * d + off..j * d + off + dh];
                let mut acc = 0.0f32;
                for (&a, &b) in qh.iter().zip(kh) {
                    acc += a * b;
                }
                scores.push(acc * scale);
            }
            softmax_in_place(&mut scores);
            let out_h = &mut out[t * d + off..t * d + off + dh];
            for (p, j) in scores.iter().zip(ks.iter()) {
                let vh = &values[j * d + off..j * d + off + dh];
                for (o, &v) in out_h.iter_mut().zip(vh) {
                    *o += p * v;
                }
            }
            probs.extend_from_slice(&scores);
        }
    }
    (out, probs)
}

/// Backward of [`attend`]; accumulates into `dq`, `dk`, `dv`.
#[allow(clippy::too_many_arguments)]
pub fn attend_backward(
    dout: &[f32],
    q: &[f32],
    keys: &[f32],
    values: &[f32],
    probs: &[f32],
    d: usize,
    n_heads: usize,
    key_sets: &[KeySet],
    dq: &mut [f32],
    dk: &mut [f32],
    dv: &mut [f32],
) {
    let dh = d / n_heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let mut cursor = 0;
    let mut dp: Vec<f32> = Vec::new();
    for (t, ks) in key_sets.iter().enumerate() {
        let n = ks.len();
        for h in 0..n_heads {
            let off = h * dh;
            let p = &probs[cursor..cursor + n];
            cursor += n;
            let do_h = &dout[t * d + off..t * d + off + dh];
            dp.clear();
            for (pj, j) in p.iter().zip(ks.iter()) {
                let vh = &values[j * d + off..j * d + off + dh];
                let mut acc = 0.0f32;
                for (&g, &v) in do_h.iter().zip(vh) {
                    acc += g * v;
                }
                dp.push(acc);
                let dvh = &mut dv[j * d + off..j * d + off + dh];
                for (o, &g) in dvh.iter_mut().zip(do_h) {
                    *o += pj * g;
                }
            }
            let dot: f32 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
            for ((pj, dpj), j) in p.iter().zip(&dp).zip(ks.iter()) {
                let ds = pj * (dpj - dot) * scale;
                if ds == 0.0 {
                    continue;
                }
                let kh = &keys[j * d + off..j * d + off + dh];
                let qh = &q[t * d + off..t * d + off + dh];
                let dqh = &mut dq[t * d + off..t * d + off + dh];
                for (o, &kv) in dqh.iter_mut().zip(kh) {
                    *o += ds * kv;
                }
                let dkh = &mut dk[j * d + off..j * d + off + dh];
                for (o, &qv) in dkh.iter_mut().zip(qh) {
                    *o += ds * qv;
                }
            }
        }
    }
}
