//! MultiHead scaled dot-product attention with explicit backward pass.
//!
//! Inputs are processed as `items` independent instances stacked along the
//! row axis: queries `[items*n_q x d_in_q]`, keys/values `[items*n_k x d_in_kv]`.
//! Heads are concatenated directly; there is no output projection.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::gemm::{gemm_nn, gemm_nt, gemm_tn};
use crate::numerics::{softmax_backward_row, softmax_in_place, Real, Rng, Tensor};

/// Additive score for disallowed key positions.
pub const MASK_VALUE: f64 = -1e9;

/// Projection matrices for all heads. Head `i` owns columns
/// `i*d_k .. (i+1)*d_k` of each matrix, i.e. `w_q = [W^q_1 | ... | W^q_l]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MultiHeadParams<F = f32> {
    pub heads: usize,
    pub w_q: Tensor<F>,
    pub w_k: Tensor<F>,
    pub w_v: Tensor<F>,
}

impl<F: Real> MultiHeadParams<F> {
    pub fn new(heads: usize, w_q: Tensor<F>, w_k: Tensor<F>, w_v: Tensor<F>) -> Result<Self> {
        let p = Self {
            heads,
            w_q,
            w_k,
            w_v,
        };
        p.validate()?;
        Ok(p)
    }

    fn validate(&self) -> Result<()> {
        for w in [&self.w_q, &self.w_k, &self.w_v] {
            if w.shape().len() != 2 {
                return Err(Error::InvalidDimension("projection must be a matrix".into()));
            }
        }
        let d_m = self.w_q.shape()[1];
        if self.w_k.shape()[1] != d_m || self.w_v.shape()[1] != d_m {
            return Err(Error::dims(self.w_q.shape(), self.w_v.shape(), "head widths"));
        }
        if self.w_k.shape()[0] != self.w_v.shape()[0] {
            return Err(Error::dims(self.w_k.shape(), self.w_v.shape(), "key/value inputs"));
        }
        if self.heads == 0 || !d_m.is_multiple_of(self.heads) {
            return Err(Error::InvalidDimension(format!(
                "{} heads do not divide model width {d_m}",
                self.heads
            )));
        }
        Ok(())
    }

    /// Glorot-uniform init of each per-head matrix `[d_in x d_k]`.
    pub fn init(d_in_q: usize, d_in_kv: usize, d_m: usize, heads: usize, rng: &mut Rng) -> Result<Self> {
        if heads == 0 || !d_m.is_multiple_of(heads) {
            return Err(Error::InvalidDimension(format!(
                "{heads} heads do not divide model width {d_m}"
            )));
        }
        let d_k = d_m / heads;
        let w_q = glorot(d_in_q, d_m, d_in_q, d_k, rng);
        let w_k = glorot(d_in_kv, d_m, d_in_kv, d_k, rng);
        let w_v = glorot(d_in_kv, d_m, d_in_kv, d_k, rng);
        Self::new(heads, w_q, w_k, w_v)
    }

    pub fn d_model(&self) -> usize {
        self.w_q.shape()[1]
    }

    pub fn head_dim(&self) -> usize {
        self.d_model() / self.heads
    }

    pub fn d_in_q(&self) -> usize {
        self.w_q.shape()[0]
    }

    pub fn d_in_kv(&self) -> usize {
        self.w_k.shape()[0]
    }

    pub fn cast<G: Real>(&self) -> MultiHeadParams<G> {
        MultiHeadParams {
            heads: self.heads,
            w_q: self.w_q.cast(),
            w_k: self.w_k.cast(),
            w_v: self.w_v.cast(),
        }
    }
}

/// Uniform on `+-sqrt(6 / (fan_in + fan_out))`.
pub(crate) fn glorot<F: Real>(
    rows: usize,
    cols: usize,
    fan_in: usize,
    fan_out: usize,
    rng: &mut Rng,
) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..rows * cols).map(|_| F::of(rng.symmetric(bound))).collect();
    Tensor::new(vec![rows, cols], data).expect("positive dims")
}

/// Which key positions each query may attend to, per stacked item.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AttentionMask {
    pub items: usize,
    pub n_q: usize,
    pub n_k: usize,
    allowed: Vec<bool>,
}

impl AttentionMask {
    pub fn new(items: usize, n_q: usize, n_k: usize, allowed: Vec<bool>) -> Result<Self> {
        if allowed.len() != items * n_q * n_k {
            return Err(Error::dims(&[allowed.len()], &[items, n_q, n_k], "mask grid"));
        }
        Ok(Self {
            items,
            n_q,
            n_k,
            allowed,
        })
    }

    /// Key `j` of item `b` visible to every query iff `pad_mask[b*n_k + j]`.
    pub fn key_padding(pad_mask: &[bool], n_q: usize, n_k: usize) -> Self {
        let items = pad_mask.len() / n_k;
        let mut allowed = Vec::with_capacity(items * n_q * n_k);
        for keys in pad_mask.chunks(n_k) {
            for _ in 0..n_q {
                allowed.extend_from_slice(keys);
            }
        }
        Self {
            items,
            n_q,
            n_k,
            allowed,
        }
    }

    /// Causal pattern (`j <= i`) intersected with key padding.
    pub fn causal_padded(pad_mask: &[bool], n: usize) -> Self {
        let items = pad_mask.len() / n;
        let mut allowed = Vec::with_capacity(items * n * n);
        for keys in pad_mask.chunks(n) {
            for i in 0..n {
                allowed.extend(keys.iter().enumerate().map(|(j, &k)| j <= i && k));
            }
        }
        Self {
            items,
            n_q: n,
            n_k: n,
            allowed,
        }
    }

    pub fn allowed(&self, item: usize, i: usize, j: usize) -> bool {
        self.allowed[(item * self.n_q + i) * self.n_k + j]
    }

    fn item_grid(&self, item: usize) -> &[bool] {
        let s = self.n_q * self.n_k;
        &self.allowed[item * s..(item + 1) * s]
    }

    /// Rows as nested vectors (item 0 only), for display and tests.
    pub fn grid(&self, item: usize) -> Vec<Vec<bool>> {
        self.item_grid(item)
            .chunks(self.n_k)
            .map(|r| r.to_vec())
            .collect()
    }
}

/// Lower-triangular mask: query `i` sees keys `j <= i`.
pub fn causal_mask(n: usize) -> AttentionMask {
    AttentionMask::causal_padded(&vec![true; n], n)
}

/// Post-softmax weights `[heads x n_q x n_k]` for one item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionTrace {
    pub heads: usize,
    pub n_q: usize,
    pub n_k: usize,
    /// `weights[h][i][j]`.
    pub weights: Vec<Vec<Vec<f64>>>,
}

impl AttentionTrace {
    pub fn row_sums(&self) -> impl Iterator<Item = f64> + '_ {
        self.weights.iter().flatten().map(|r| r.iter().sum())
    }

    /// Head-averaged `[n_q x n_k]` grid.
    pub fn head_average(&self) -> Vec<Vec<f64>> {
        let mut avg = vec![vec![0.0; self.n_k]; self.n_q];
        for head in &self.weights {
            for (a, r) in avg.iter_mut().zip(head) {
                for (x, &w) in a.iter_mut().zip(r) {
                    *x += w;
                }
            }
        }
        let inv = 1.0 / self.heads as f64;
        avg.iter_mut().flatten().for_each(|x| *x *= inv);
        avg
    }
}

/// Saved forward state of one attention call.
#[derive(Clone, Debug)]
pub struct AttentionCache<F> {
    pub items: usize,
    pub n_q: usize,
    pub n_k: usize,
    q: Tensor<F>,
    k: Tensor<F>,
    v: Tensor<F>,
    qp: Tensor<F>,
    kp: Tensor<F>,
    vp: Tensor<F>,
    /// `[items x heads x n_q x n_k]`.
    probs: Vec<F>,
    heads: usize,
}

impl<F: Real> AttentionCache<F> {
    pub fn trace(&self, item: usize) -> AttentionTrace {
        let per_head = self.n_q * self.n_k;
        let base = item * self.heads * per_head;
        let weights = (0..self.heads)
            .map(|h| {
                let p = &self.probs[base + h * per_head..base + (h + 1) * per_head];
                p.chunks(self.n_k)
                    .map(|r| r.iter().map(|x| x.as_f64()).collect())
                    .collect()
            })
            .collect();
        AttentionTrace {
            heads: self.heads,
            n_q: self.n_q,
            n_k: self.n_k,
            weights,
        }
    }
}

fn gather_head<F: Real>(src: &Tensor<F>, row0: usize, rows: usize, col0: usize, width: usize) -> Vec<F> {
    let mut out = Vec::with_capacity(rows * width);
    for r in row0..row0 + rows {
        out.extend_from_slice(&src.row(r)[col0..col0 + width]);
    }
    out
}

fn check_rows<F: Real>(t: &Tensor<F>, rows: usize, cols: usize, what: &'static str) -> Result<()> {
    if t.shape() != [rows, cols] {
        return Err(Error::dims(t.shape(), &[rows, cols], what));
    }
    Ok(())
}

/// Batched forward pass over `items` stacked instances.
pub fn multihead_forward<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    params: &MultiHeadParams<F>,
    items: usize,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor<F>, AttentionCache<F>)> {
    if items == 0 || !q.rows().is_multiple_of(items) || !k.rows().is_multiple_of(items) {
        return Err(Error::dims(&[q.rows(), k.rows()], &[items], "stacked attention items"));
    }
    let n_q = q.rows() / items;
    let n_k = k.rows() / items;
    let (d_m, heads, d_k) = (params.d_model(), params.heads, params.head_dim());
    check_rows(q, items * n_q, params.d_in_q(), "attention queries")?;
    check_rows(k, items * n_k, params.d_in_kv(), "attention keys")?;
    check_rows(v, items * n_k, params.d_in_kv(), "attention values")?;
    if let Some(m) = mask {
        if (m.items, m.n_q, m.n_k) != (items, n_q, n_k) {
            return Err(Error::dims(&[m.items, m.n_q, m.n_k], &[items, n_q, n_k], "attention mask"));
        }
        for b in 0..items {
            if let Some(i) = m.item_grid(b).chunks(n_k).position(|r| !r.iter().any(|&a| a)) {
                return Err(Error::Masking(format!("query {i} of item {b} has no visible key")));
            }
        }
    }

    let project = |x: &Tensor<F>, w: &Tensor<F>| {
        let mut out = Tensor::zeros(&[x.rows(), d_m]);
        gemm_nn(x.rows(), x.cols(), d_m, x.data(), w.data(), out.data_mut(), false);
        out
    };
    let qp = project(q, &params.w_q);
    let kp = project(k, &params.w_k);
    let vp = project(v, &params.w_v);
    let scale = F::of(1.0 / (d_k as f64).sqrt());
    let mask_value = F::of(MASK_VALUE);

    let blocks: Vec<Result<(Vec<F>, Vec<F>)>> = (0..items)
        .into_par_iter()
        .map(|b| {
            let mut out = vec![F::zero(); n_q * d_m];
            let mut probs = vec![F::zero(); heads * n_q * n_k];
            let mut oh = vec![F::zero(); n_q * d_k];
            for h in 0..heads {
                let qh = gather_head(&qp, b * n_q, n_q, h * d_k, d_k);
                let kh = gather_head(&kp, b * n_k, n_k, h * d_k, d_k);
                let vh = gather_head(&vp, b * n_k, n_k, h * d_k, d_k);
                let p = &mut probs[h * n_q * n_k..(h + 1) * n_q * n_k];
                gemm_nt(n_q, d_k, n_k, &qh, &kh, p, false);
                for (idx, s) in p.iter_mut().enumerate() {
                    *s *= scale;
                    if let Some(m) = mask {
                        if !m.allowed(b, idx / n_k, idx % n_k) {
                            *s += mask_value;
                        }
                    }
                }
                if p.iter().any(|s| !s.is_finite()) {
                    return Err(Error::Numeric(format!("non-finite attention score in item {b}")));
                }
                for row in p.chunks_exact_mut(n_k) {
                    softmax_in_place(row);
                }
                gemm_nn(n_q, n_k, d_k, p, &vh, &mut oh, false);
                for i in 0..n_q {
                    out[i * d_m + h * d_k..i * d_m + (h + 1) * d_k]
                        .copy_from_slice(&oh[i * d_k..(i + 1) * d_k]);
                }
            }
            Ok((out, probs))
        })
        .collect();

    let mut out = Tensor::zeros(&[items * n_q, d_m]);
    let mut probs = Vec::with_capacity(items * heads * n_q * n_k);
    for (b, blk) in blocks.into_iter().enumerate() {
        let (o, p) = blk?;
        out.data_mut()[b * n_q * d_m..(b + 1) * n_q * d_m].copy_from_slice(&o);
        probs.extend(p);
    }
    let strip = |t: &Tensor<F>| {
        let mut t = t.clone();
        t.clear_grad();
        t
    };
    let cache = AttentionCache {
        items,
        n_q,
        n_k,
        q: strip(q),
        k: strip(k),
        v: strip(v),
        qp,
        kp,
        vp,
        probs,
        heads,
    };
    Ok((out, cache))
}

/// Backward pass. Projection gradients are accumulated into the gradient
/// slots of `params`; input gradients `(dq, dk, dv)` are returned.
pub fn multihead_backward<F: Real>(
    params: &mut MultiHeadParams<F>,
    cache: &AttentionCache<F>,
    d_out: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    let (items, n_q, n_k) = (cache.items, cache.n_q, cache.n_k);
    let (d_m, heads, d_k) = (params.d_model(), params.heads, params.head_dim());
    check_rows(d_out, items * n_q, d_m, "attention output gradient")?;
    let scale = F::of(1.0 / (d_k as f64).sqrt());

    let blocks: Vec<(Vec<F>, Vec<F>, Vec<F>)> = (0..items)
        .into_par_iter()
        .map(|b| {
            let mut dq = vec![F::zero(); n_q * d_m];
            let mut dk = vec![F::zero(); n_k * d_m];
            let mut dv = vec![F::zero(); n_k * d_m];
            let mut dp = vec![F::zero(); n_q * n_k];
            let mut ds = vec![F::zero(); n_q * n_k];
            let mut tmp_q = vec![F::zero(); n_q * d_k];
            let mut tmp_k = vec![F::zero(); n_k * d_k];
            for h in 0..heads {
                let qh = gather_head(&cache.qp, b * n_q, n_q, h * d_k, d_k);
                let kh = gather_head(&cache.kp, b * n_k, n_k, h * d_k, d_k);
                let vh = gather_head(&cache.vp, b * n_k, n_k, h * d_k, d_k);
                let doh = gather_head(d_out, b * n_q, n_q, h * d_k, d_k);
                let base = (b * heads + h) * n_q * n_k;
                let p = &cache.probs[base..base + n_q * n_k];

                // dV = P^T dO
                gemm_tn(n_k, n_q, d_k, p, &doh, &mut tmp_k, false);
                scatter(&mut dv, &tmp_k, n_k, d_m, h * d_k, d_k);
                // dP = dO V^T, then through the softmax
                gemm_nt(n_q, d_k, n_k, &doh, &vh, &mut dp, false);
                for ((pr, dpr), dsr) in p
                    .chunks_exact(n_k)
                    .zip(dp.chunks_exact(n_k))
                    .zip(ds.chunks_exact_mut(n_k))
                {
                    softmax_backward_row(pr, dpr, dsr);
                }
                ds.iter_mut().for_each(|x| *x *= scale);
                // dQ = dS K, dK = dS^T Q
                gemm_nn(n_q, n_k, d_k, &ds, &kh, &mut tmp_q, false);
                scatter(&mut dq, &tmp_q, n_q, d_m, h * d_k, d_k);
                gemm_tn(n_k, n_q, d_k, &ds, &qh, &mut tmp_k, false);
                scatter(&mut dk, &tmp_k, n_k, d_m, h * d_k, d_k);
            }
            (dq, dk, dv)
        })
        .collect();

    let mut dqp = Tensor::zeros(&[items * n_q, d_m]);
    let mut dkp = Tensor::zeros(&[items * n_k, d_m]);
    let mut dvp = Tensor::zeros(&[items * n_k, d_m]);
    for (b, (dq, dk, dv)) in blocks.into_iter().enumerate() {
        dqp.data_mut()[b * n_q * d_m..(b + 1) * n_q * d_m].copy_from_slice(&dq);
        dkp.data_mut()[b * n_k * d_m..(b + 1) * n_k * d_m].copy_from_slice(&dk);
        dvp.data_mut()[b * n_k * d_m..(b + 1) * n_k * d_m].copy_from_slice(&dv);
    }

    let backprop = |x: &Tensor<F>, w: &mut Tensor<F>, dproj: &Tensor<F>| {
        let (rows, d_in) = (x.rows(), x.cols());
        let mut dw = vec![F::zero(); d_in * d_m];
        gemm_tn(d_in, rows, d_m, x.data(), dproj.data(), &mut dw, false);
        w.accumulate_grad(&dw);
        let mut dx = Tensor::zeros(&[rows, d_in]);
        gemm_nt(rows, d_m, d_in, dproj.data(), w.data(), dx.data_mut(), false);
        dx
    };
    let dq = backprop(&cache.q, &mut params.w_q, &dqp);
    let dk = backprop(&cache.k, &mut params.w_k, &dkp);
    let dv = backprop(&cache.v, &mut params.w_v, &dvp);
    Ok((dq, dk, dv))
}

fn scatter<F: Real>(dst: &mut [F], src: &[F], rows: usize, stride: usize, col0: usize, width: usize) {
    for r in 0..rows {
        dst[r * stride + col0..r * stride + col0 + width].copy_from_slice(&src[r * width..(r + 1) * width]);
    }
}

/// Single-instance convenience wrapper returning the attention trace.
pub fn multihead<F: Real>(
    q: &Tensor<F>,
    k: &Tensor<F>,
    v: &Tensor<F>,
    params: &MultiHeadParams<F>,
    mask: Option<&AttentionMask>,
) -> Result<(Tensor<F>, AttentionTrace)> {
    let (out, cache) = multihead_forward(q, k, v, params, 1, mask)?;
    Ok((out, cache.trace(0)))
}
