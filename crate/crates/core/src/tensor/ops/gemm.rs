//! Row-major GEMM kernels.
//!
//! Every output element accumulates its products in ascending `k` order, so
//! results do not depend on how rows are partitioned across threads.

use rayon::prelude::*;

use crate::tensor::Element;

/// Work (in multiply-adds) below which kernels stay on the calling thread.
const PAR_THRESHOLD: usize = 1 << 16;

/// `c[m×n] (+)= a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |(i, crow): (usize, &mut [T])| {
        if !accumulate {
            crow.fill(T::zero());
        }
        let arow = &a[i * k..(i + 1) * k];
        for (kk, &aik) in arow.iter().enumerate() {
            let brow = &b[kk * n..(kk + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += aik * bv;
            }
        }
    };
    if m * k * n >= PAR_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(row);
    } else {
        c.chunks_mut(n).enumerate().for_each(row);
    }
}

pub(crate) fn transpose<T: Element>(rows: usize, cols: usize, src: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = src[r * cols + c];
        }
    }
    out
}

/// `c[m×n] (+)= aᵀ · b` with `a` stored as `[k×m]`.
pub(crate) fn gemm_tn<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let at = transpose(k, m, a);
    gemm_nn(m, k, n, &at, b, c, accumulate);
}

/// `c[m×n] (+)= a · bᵀ` with `b` stored as `[n×k]`.
pub(crate) fn gemm_nt<T: Element>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    b: &[T],
    c: &mut [T],
    accumulate: bool,
) {
    let bt = transpose(n, k, b);
    gemm_nn(m, k, n, a, &bt, c, accumulate);
}
