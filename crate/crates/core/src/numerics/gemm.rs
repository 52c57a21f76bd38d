//! Slice-level matrix products used by every layer.
//!
//! All kernels keep a fixed accumulation order per output element, so the
//! value of an output row never depends on the contents of other rows. Row
//! blocks are distributed over the rayon pool when the product is large.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 16;
const ROW_BLOCK: usize = 8;

#[inline]
fn axpy<F: Real>(alpha: F, x: &[F], y: &mut [F]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn rows_nn<F: Real>(k: usize, n: usize, a: &[F], b: &[F], c: &mut [F], accumulate: bool) {
    for (a_row, c_row) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        if !accumulate {
            c_row.iter_mut().for_each(|x| *x = F::zero());
        }
        for (p, &a_ip) in a_row.iter().enumerate() {
            if a_ip != F::zero() {
                axpy(a_ip, &b[p * n..(p + 1) * n], c_row);
            }
        }
    }
}

/// `C[m x n] (+)= A[m x k] * B[k x n]`.
pub fn gemm_nn<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .zip(a.par_chunks(ROW_BLOCK * k))
            .for_each(|(c_blk, a_blk)| rows_nn(k, n, a_blk, b, c_blk, accumulate));
    } else {
        rows_nn(k, n, a, b, c, accumulate);
    }
}

/// `C[m x n] (+)= A[m x k] * B^T` where `B` is stored as `[n x k]`.
pub fn gemm_nt<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    debug_assert_eq!(b.len(), n * k);
    let mut bt = vec![F::zero(); k * n];
    for j in 0..n {
        for p in 0..k {
            bt[p * n + j] = b[j * k + p];
        }
    }
    gemm_nn(m, k, n, a, &bt, c, accumulate);
}

/// `C[m x n] (+)= A^T * B` where `A` is stored as `[k x m]` and `B` as `[k x n]`.
pub fn gemm_tn<F: Real>(
    m: usize,
    k: usize,
    n: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let kernel = |i0: usize, c_blk: &mut [F]| {
        if !accumulate {
            c_blk.iter_mut().for_each(|x| *x = F::zero());
        }
        let rows = c_blk.len() / n;
        for r in 0..k {
            let b_row = &b[r * n..(r + 1) * n];
            let a_row = &a[r * m..(r + 1) * m];
            for (di, c_row) in c_blk.chunks_exact_mut(n).enumerate().take(rows) {
                let a_ri = a_row[i0 + di];
                if a_ri != F::zero() {
                    axpy(a_ri, b_row, c_row);
                }
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > ROW_BLOCK {
        c.par_chunks_mut(ROW_BLOCK * n)
            .enumerate()
            .for_each(|(blk, c_blk)| kernel(blk * ROW_BLOCK, c_blk));
    } else {
        kernel(0, c);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn seq(n: usize, s: f64) -> Vec<f64> {
        (0..n).map(|i| ((i as f64 + s) * 0.37).sin()).collect()
    }

    #[test]
    fn variants_agree_with_naive_product() {
        // Large enough to cross the parallel threshold.
        for &(m, k, n) in &[(3, 4, 2), (1, 1, 1), (70, 40, 30)] {
            let a = seq(m * k, 0.5);
            let b = seq(k * n, 1.5);
            let want = naive(m, k, n, &a, &b);

            let mut c = vec![0.0; m * n];
            gemm_nn(m, k, n, &a, &b, &mut c, false);
            let err = c.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);

            let mut bt = vec![0.0; k * n];
            for p in 0..k {
                for j in 0..n {
                    bt[j * k + p] = b[p * n + j];
                }
            }
            let mut c = vec![0.0; m * n];
            gemm_nt(m, k, n, &a, &bt, &mut c, false);
            let err = c.iter().zip(&want).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(err < 1e-12);

            let mut at = vec![0.0; k * m];
            for i in 0..m {
                for p in 0..k {
                    at[p * m + i] = a[i * k + p];
                }
            }
            let mut c = vec![1.0; m * n];
            gemm_tn(m, k, n, &at, &b, &mut c, true);
            let err = c
                .iter()
                .zip(&want)
                .map(|(x, y)| (x - 1.0 - y).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12);
        }
    }
}
