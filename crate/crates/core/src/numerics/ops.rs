//! Forward and backward passes for the dense primitives.
//!
//! Every backward function returns fresh gradient tensors; callers decide
//! whether to accumulate them into a parameter's gradient slot.

use super::gemm::{gemm_nn, gemm_nt, gemm_tn};
use super::{Real, Rng, Tensor};
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-6;

fn matrix_dims<F: Real>(t: &Tensor<F>, what: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        other => Err(Error::InvalidDimension(format!(
            "{what} must be a matrix, got shape {other:?}"
        ))),
    }
}

/// Matrix product `a[m x k] * b[k x n]`.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (k2, n) = matrix_dims(b, "matmul rhs")?;
    if k != k2 {
        return Err(Error::dims(a.shape(), b.shape(), "matmul inner dimensions"));
    }
    let mut c = Tensor::zeros(&[m, n]);
    gemm_nn(m, k, n, a.data(), b.data(), c.data_mut(), false);
    Ok(c)
}

/// Gradients of `c = a * b`: `(dc * b^T, a^T * dc)`.
pub fn matmul_backward<F: Real>(
    a: &Tensor<F>,
    b: &Tensor<F>,
    dc: &Tensor<F>,
) -> Result<(Tensor<F>, Tensor<F>)> {
    let (m, k) = matrix_dims(a, "matmul lhs")?;
    let (_, n) = matrix_dims(b, "matmul rhs")?;
    if dc.shape() != [m, n] {
        return Err(Error::dims(dc.shape(), &[m, n], "matmul upstream gradient"));
    }
    let mut da = Tensor::zeros(&[m, k]);
    gemm_nt(m, n, k, dc.data(), b.data(), da.data_mut(), false);
    let mut db = Tensor::zeros(&[k, n]);
    gemm_tn(k, m, n, a.data(), dc.data(), db.data_mut(), false);
    Ok((da, db))
}

/// Row-wise softmax in place, with max subtraction.
pub(crate) fn softmax_in_place<F: Real>(row: &mut [F]) {
    let max = row.iter().copied().fold(F::neg_infinity(), F::max);
    let mut sum = F::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = F::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

/// `dx = y * (dy - <dy, y>)` for one softmax row.
pub(crate) fn softmax_backward_row<F: Real>(y: &[F], dy: &[F], dx: &mut [F]) {
    let dot: F = y.iter().zip(dy).map(|(&a, &b)| a * b).sum();
    for ((d, &yi), &dyi) in dx.iter_mut().zip(y).zip(dy) {
        *d = yi * (dyi - dot);
    }
}

pub fn softmax_rows<F: Real>(x: &Tensor<F>) -> Result<Tensor<F>> {
    if !x.all_finite() {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let mut y = x.clone();
    y.clear_grad();
    let n = y.cols();
    for row in y.data_mut().chunks_exact_mut(n) {
        softmax_in_place(row);
    }
    Ok(y)
}

pub fn softmax_rows_backward<F: Real>(y: &Tensor<F>, dy: &Tensor<F>) -> Result<Tensor<F>> {
    if y.shape() != dy.shape() {
        return Err(Error::dims(y.shape(), dy.shape(), "softmax backward"));
    }
    let n = y.cols();
    let mut dx = Tensor::zeros(y.shape());
    for ((yr, dyr), dxr) in y
        .data()
        .chunks_exact(n)
        .zip(dy.data().chunks_exact(n))
        .zip(dx.data_mut().chunks_exact_mut(n))
    {
        softmax_backward_row(yr, dyr, dxr);
    }
    Ok(dx)
}

/// Saved state of a layer-norm forward pass.
#[derive(Clone, Debug)]
pub struct LayerNormCache<F> {
    /// Standardized input, same shape as `x`.
    pub normalized: Tensor<F>,
    /// `1 / sqrt(var + eps)` per row.
    pub inv_std: Vec<F>,
}

pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<(Tensor<F>, LayerNormCache<F>)> {
    let d = x.cols();
    if d < 2 {
        return Err(Error::InvalidDimension(format!(
            "layer norm needs at least 2 features, got {d}"
        )));
    }
    if gain.len() != d || bias.len() != d {
        return Err(Error::dims(gain.shape(), &[d], "layer norm gain/bias"));
    }
    let rows = x.rows();
    let dn = F::of(d as f64);
    let mut normalized = Tensor::zeros(x.shape());
    let mut y = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(rows);
    for r in 0..rows {
        let xr = x.row(r);
        let mean = xr.iter().copied().sum::<F>() / dn;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / dn;
        let is = F::one() / (var + eps).sqrt();
        inv_std.push(is);
        let nr = normalized.row_mut(r);
        for (n, &v) in nr.iter_mut().zip(xr) {
            *n = (v - mean) * is;
        }
        let nr = normalized.row(r).to_vec();
        for (j, o) in y.row_mut(r).iter_mut().enumerate() {
            *o = gain.data()[j] * nr[j] + bias.data()[j];
        }
    }
    Ok((y, LayerNormCache { normalized, inv_std }))
}

/// Returns `(dx, dgain, dbias)`.
pub fn layer_norm_backward<F: Real>(
    dy: &Tensor<F>,
    gain: &Tensor<F>,
    cache: &LayerNormCache<F>,
) -> Result<(Tensor<F>, Tensor<F>, Tensor<F>)> {
    if dy.shape() != cache.normalized.shape() {
        return Err(Error::dims(
            dy.shape(),
            cache.normalized.shape(),
            "layer norm backward",
        ));
    }
    let d = dy.cols();
    let dn = F::of(d as f64);
    let mut dx = Tensor::zeros(dy.shape());
    let mut dgain = Tensor::zeros(&[d]);
    let mut dbias = Tensor::zeros(&[d]);
    let mut dxhat = vec![F::zero(); d];
    for r in 0..dy.rows() {
        let dyr = dy.row(r);
        let nr = cache.normalized.row(r);
        for j in 0..d {
            dgain.data_mut()[j] += dyr[j] * nr[j];
            dbias.data_mut()[j] += dyr[j];
            dxhat[j] = dyr[j] * gain.data()[j];
        }
        let mean_dxhat = dxhat.iter().copied().sum::<F>() / dn;
        let mean_dxhat_n = dxhat.iter().zip(nr).map(|(&a, &b)| a * b).sum::<F>() / dn;
        let is = cache.inv_std[r];
        for (j, o) in dx.row_mut(r).iter_mut().enumerate() {
            *o = is * (dxhat[j] - mean_dxhat - nr[j] * mean_dxhat_n);
        }
    }
    Ok((dx, dgain, dbias))
}

pub fn relu<F: Real>(x: &Tensor<F>) -> Tensor<F> {
    x.map(|v| if v > F::zero() { v } else { F::zero() })
}

/// Gradient gated by `x > 0`; the subgradient at exactly zero is zero.
pub fn relu_backward<F: Real>(x: &Tensor<F>, dy: &Tensor<F>) -> Tensor<F> {
    let mut dx = dy.clone();
    dx.clear_grad();
    for (d, &v) in dx.data_mut().iter_mut().zip(x.data()) {
        if v <= F::zero() {
            *d = F::zero();
        }
    }
    dx
}

/// Per-element survivor scale: `0` for dropped, `1/(1-rate)` for kept.
#[derive(Clone, Debug)]
pub struct DropoutMask<F> {
    pub scale: Vec<F>,
}

/// Inverted dropout. Returns `None` for the mask when the op is an identity.
pub fn dropout<F: Real>(
    x: &Tensor<F>,
    rate: f64,
    rng: &mut Rng,
    training: bool,
) -> Result<(Tensor<F>, Option<DropoutMask<F>>)> {
    if !(0.0..1.0).contains(&rate) {
        return Err(Error::InvalidHyperparameter(format!(
            "dropout rate {rate} must lie in [0, 1)"
        )));
    }
    if !training || rate == 0.0 {
        return Ok((x.clone(), None));
    }
    let keep = F::of(1.0 / (1.0 - rate));
    let scale: Vec<F> = (0..x.len())
        .map(|_| if rng.uniform() < rate { F::zero() } else { keep })
        .collect();
    let mut y = x.clone();
    y.clear_grad();
    for (v, &s) in y.data_mut().iter_mut().zip(&scale) {
        *v *= s;
    }
    Ok((y, Some(DropoutMask { scale })))
}

pub fn dropout_backward<F: Real>(dy: &Tensor<F>, mask: Option<&DropoutMask<F>>) -> Tensor<F> {
    let mut dx = dy.clone();
    dx.clear_grad();
    if let Some(m) = mask {
        for (d, &s) in dx.data_mut().iter_mut().zip(&m.scale) {
            *d *= s;
        }
    }
    dx
}

/// Index of the largest element; the lowest index wins ties.
pub fn argmax<F: Real>(row: &[F]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Masked mean cross-entropy over softmax of `logits` rows.
///
/// Returns the mean loss over unmasked positions and its exact gradient with
/// respect to the logits. Masked rows get zero loss and zero gradient.
pub fn cross_entropy_logits<F: Real>(
    logits: &Tensor<F>,
    targets: &[usize],
    mask: &[bool],
) -> Result<(F, Tensor<F>)> {
    let (t, v) = matrix_dims(logits, "logits")?;
    if targets.len() != t || mask.len() != t {
        return Err(Error::dims(&[t], &[targets.len(), mask.len()], "targets/mask length"));
    }
    let count = mask.iter().filter(|&&m| m).count();
    if count == 0 {
        return Err(Error::Masking("cross-entropy needs at least one unmasked position".into()));
    }
    let inv = F::one() / F::of(count as f64);
    let mut loss = F::zero();
    let mut dlogits = Tensor::zeros(&[t, v]);
    for r in 0..t {
        if !mask[r] {
            continue;
        }
        let target = targets[r];
        if target >= v {
            return Err(Error::OutOfVocabulary { id: target, size: v });
        }
        let row = logits.row(r);
        let max = row.iter().copied().fold(F::neg_infinity(), F::max);
        let sum: F = row.iter().map(|&x| (x - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += (log_z - row[target]) * inv;
        let dr = dlogits.row_mut(r);
        for (d, &x) in dr.iter_mut().zip(row) {
            *d = (x - log_z).exp() * inv;
        }
        dr[target] -= inv;
    }
    if !loss.is_finite() {
        return Err(Error::Numeric("cross-entropy loss is not finite".into()));
    }
    Ok((loss, dlogits))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t2(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_small_case() {
        let b = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        assert_eq!(matmul(&Tensor::eye(2), &b).unwrap(), b);
        let c = matmul(&b, &t2(&[&[1.0], &[1.0]])).unwrap();
        assert_eq!(c.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let err = matmul(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[2, 3])).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_examples() {
        let y = softmax_rows(&t2(&[&[0.0, 0.0]])).unwrap();
        assert_eq!(y.data(), &[0.5, 0.5]);
        let y = softmax_rows(&t2(&[&[3.7]])).unwrap();
        assert_eq!(y.data(), &[1.0]);
        // exp(k) / (e + e^2 + e^3) evaluated directly.
        let z: f64 = [1.0f64, 2.0, 3.0].iter().map(|v| v.exp()).sum();
        let want = [1f64.exp() / z, 2f64.exp() / z, 3f64.exp() / z];
        let y = softmax_rows(&t2(&[&[1.0, 2.0, 3.0]])).unwrap();
        for (a, b) in y.data().iter().zip(want) {
            assert!((a - b).abs() < 1e-12);
        }
        for (a, b) in y.data().iter().zip([0.09003, 0.24473, 0.66524]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn softmax_rejects_non_finite() {
        assert!(matches!(
            softmax_rows(&t2(&[&[f64::NAN, 0.0]])),
            Err(Error::Numeric(_))
        ));
    }

    #[test]
    fn layer_norm_examples() {
        let ones = Tensor::filled(&[2], 1.0);
        let zeros = Tensor::zeros(&[2]);
        let (y, _) = layer_norm(&t2(&[&[-1.0, 1.0]]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let (y, _) = layer_norm(&t2(&[&[5.0, 5.0]]), &ones, &zeros, 1e-6).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0]);
        let (y, _) = layer_norm(&t2(&[&[1.0, 3.0]]), &ones, &zeros, 0.0).unwrap();
        assert_eq!(y.data(), &[-1.0, 1.0]);
        let one = Tensor::filled(&[1], 1.0);
        let err = layer_norm(&t2(&[&[1.0]]), &one, &Tensor::zeros(&[1]), 1e-6).unwrap_err();
        assert!(matches!(err, Error::InvalidDimension(_)));
    }

    #[test]
    fn relu_examples() {
        let x = Tensor::vector(vec![-1.0f64, 0.0, 2.0]).unwrap();
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        let neg = Tensor::vector(vec![-3.0f64, -0.5]).unwrap();
        assert_eq!(relu(&neg).data(), &[0.0, 0.0]);
        let x = Tensor::vector(vec![-1.0f64, 2.0]).unwrap();
        let g = relu_backward(&x, &Tensor::filled(&[2], 1.0));
        assert_eq!(g.data(), &[0.0, 1.0]);
        let at_zero = relu_backward(&Tensor::vector(vec![0.0f64]).unwrap(), &Tensor::filled(&[1], 1.0));
        assert_eq!(at_zero.data(), &[0.0]);
    }

    #[test]
    fn dropout_identities_and_errors() {
        let x = Tensor::<f32>::filled(&[4, 5], 1.5);
        let mut rng = Rng::new(1);
        assert_eq!(dropout(&x, 0.0, &mut rng, true).unwrap().0, x);
        assert_eq!(dropout(&x, 0.9, &mut rng, false).unwrap().0, x);
        assert!(matches!(
            dropout(&x, 1.0, &mut rng, true),
            Err(Error::InvalidHyperparameter(_))
        ));
    }

    #[test]
    fn dropout_statistics() {
        let n = 100_000;
        let x = Tensor::<f64>::filled(&[n], 1.0);
        let (y, mask) = dropout(&x, 0.5, &mut Rng::new(2024), true).unwrap();
        assert!(mask.is_some());
        let mean = y.data().iter().sum::<f64>() / n as f64;
        let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        assert!((zeros - 0.5).abs() < 0.01, "zero fraction {zeros}");
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::filled(&[1, 4], 0.3);
        let (loss, _) = cross_entropy_logits(&logits, &[2], &[true]).unwrap();
        assert!((loss - 4f64.ln()).abs() < 1e-12);

        let mut saturated = Tensor::<f64>::zeros(&[1, 4]);
        saturated.set(&[0, 1], 1e6);
        let (loss, _) = cross_entropy_logits(&saturated, &[1], &[true]).unwrap();
        assert!(loss.abs() < 1e-12);

        let err = cross_entropy_logits(&logits, &[4], &[true]).unwrap_err();
        assert!(matches!(err, Error::OutOfVocabulary { id: 4, size: 4 }));
    }

    #[test]
    fn cross_entropy_masked_rows_are_inert() {
        let logits = t2(&[&[0.1, 0.2, 0.3], &[5.0, -2.0, 1.0]]);
        let (loss_a, g) = cross_entropy_logits(&logits, &[0, 99], &[true, false]).unwrap();
        assert!(g.row(1).iter().all(|&v| v == 0.0));
        let (loss_b, _) = cross_entropy_logits(
            &t2(&[&[0.1, 0.2, 0.3]]),
            &[0],
            &[true],
        )
        .unwrap();
        assert_eq!(loss_a, loss_b);
    }

    #[test]
    fn argmax_lowest_index_wins() {
        assert_eq!(argmax(&[1.0, 3.0, 3.0, 2.0]), 1);
        assert_eq!(argmax(&[0.0f32]), 0);
    }
}
