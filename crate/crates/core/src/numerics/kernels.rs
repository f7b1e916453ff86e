//! Row-major GEMM. Every output row is produced by one thread with a fixed
//! summation order, so results are bitwise independent of the thread count.

use rayon::prelude::*;

use super::Real;

const PAR_THRESHOLD: usize = 1 << 18;

/// `c += op(a) · op(b)` where `op(a)` is `m×k` and `op(b)` is `k×n`.
///
/// `a` is stored `[m, k]`, or `[k, m]` when `ta`; `b` is stored `[k, n]`, or
/// `[n, k]` when `tb`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm<F: Real>(
    ta: bool,
    tb: bool,
    m: usize,
    n: usize,
    k: usize,
    a: &[F],
    b: &[F],
    c: &mut [F],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if m == 0 || n == 0 || k == 0 {
        return;
    }
    let transposed;
    let b = if tb {
        transposed = transpose(b, n, k);
        &transposed[..]
    } else {
        b
    };
    let row = |i: usize, c_row: &mut [F]| {
        for p in 0..k {
            let coef = if ta { a[p * m + i] } else { a[i * k + p] };
            if coef == F::zero() {
                continue;
            }
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + coef * bv;
            }
        }
    };
    if m * n * k >= PAR_THRESHOLD && rayon::current_num_threads() > 1 {
        c.par_chunks_mut(n)
            .enumerate()
            .for_each(|(i, c_row)| row(i, c_row));
    } else {
        for (i, c_row) in c.chunks_mut(n).enumerate() {
            row(i, c_row);
        }
    }
}

/// Transpose a row-major `[rows, cols]` buffer.
pub(crate) fn transpose<F: Real>(x: &[F], rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); x.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = x[r * cols + c];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(ta: bool, tb: bool, m: usize, n: usize, k: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    let av = if ta { a[p * m + i] } else { a[i * k + p] };
                    let bv = if tb { b[j * k + p] } else { b[p * n + j] };
                    c[i * n + j] += av * bv;
                }
            }
        }
        c
    }

    #[test]
    fn all_transpose_variants_match_naive() {
        let (m, n, k) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
        for ta in [false, true] {
            for tb in [false, true] {
                let mut c = vec![0.0; m * n];
                gemm(ta, tb, m, n, k, &a, &b, &mut c);
                let want = naive(ta, tb, m, n, k, &a, &b);
                for (x, y) in c.iter().zip(&want) {
                    assert!((x - y).abs() < 1e-12, "ta={ta} tb={tb}");
                }
            }
        }
    }
}
