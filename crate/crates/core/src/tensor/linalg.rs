//! Raw dense kernels shared by the tensor ops.
//!
//! Every kernel writes each output element from exactly one task with a
//! fixed-order inner reduction, so parallel and sequential execution produce
//! bitwise identical results. The global switch exists for the
//! `--deterministic` mode, which forces the sequential paths outright.

use std::sync::atomic::{AtomicBool, Ordering};

use rayon::prelude::*;

use super::Element;

static PARALLEL: AtomicBool = AtomicBool::new(true);

/// Disable (or re-enable) data-parallel kernel paths process-wide.
pub fn set_parallel_enabled(enabled: bool) {
    PARALLEL.store(enabled, Ordering::SeqCst);
}

pub fn parallel_enabled() -> bool {
    PARALLEL.load(Ordering::SeqCst)
}

const PAR_FLOPS_THRESHOLD: usize = 1 << 18;

/// C[m,n] = A[m,k] * B[k,n], all row-major.
pub(crate) fn gemm<E: Element>(a: &[E], b: &[E], m: usize, k: usize, n: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    let row = |ci: &mut [E], i: usize| {
        ci.fill(E::zero());
        let arow = &a[i * k..(i + 1) * k];
        for (p, &apv) in arow.iter().enumerate() {
            if apv == E::zero() {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in ci.iter_mut().zip(brow) {
                *cv = *cv + apv * bv;
            }
        }
    };
    if parallel_enabled() && m * k * n >= PAR_FLOPS_THRESHOLD && m > 1 {
        c.par_chunks_mut(n).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(n).enumerate() {
            row(ci, i);
        }
    }
}

/// C[m,j] = sum_n A[m,n] * B[j,n] — i.e. A * B^T without materializing B^T.
pub(crate) fn gemm_nt<E: Element>(a: &[E], b: &[E], m: usize, n: usize, j: usize, c: &mut [E]) {
    debug_assert_eq!(a.len(), m * n);
    debug_assert_eq!(b.len(), j * n);
    debug_assert_eq!(c.len(), m * j);
    let row = |ci: &mut [E], i: usize| {
        let arow = &a[i * n..(i + 1) * n];
        for (q, cv) in ci.iter_mut().enumerate() {
            let brow = &b[q * n..(q + 1) * n];
            let mut acc = E::zero();
            for (&av, &bv) in arow.iter().zip(brow) {
                acc = acc + av * bv;
            }
            *cv = acc;
        }
    };
    if parallel_enabled() && m * n * j >= PAR_FLOPS_THRESHOLD && m > 1 {
        c.par_chunks_mut(j).enumerate().for_each(|(i, ci)| row(ci, i));
    } else {
        for (i, ci) in c.chunks_mut(j).enumerate() {
            row(ci, i);
        }
    }
}

/// Run `f` for every index in `0..count`, each writing only its own chunk.
pub(crate) fn for_each_disjoint<E, F>(out: &mut [E], chunk: usize, count: usize, heavy: bool, f: F)
where
    E: Element,
    F: Fn(usize, &mut [E]) + Send + Sync,
{
    debug_assert_eq!(out.len(), chunk * count);
    if parallel_enabled() && heavy && count > 1 {
        out.par_chunks_mut(chunk).enumerate().for_each(|(i, c)| f(i, c));
    } else {
        for (i, c) in out.chunks_mut(chunk).enumerate() {
            f(i, c);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
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

    #[test]
    fn gemm_matches_naive() {
        let (m, k, n) = (5, 7, 3);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut c = vec![0.0; m * n];
        gemm(&a, &b, m, k, n, &mut c);
        let expect = naive(&a, &b, m, k, n);
        for (x, y) in c.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_nt_matches_transposed_gemm() {
        let (m, n, j) = (4, 6, 5);
        let a: Vec<f64> = (0..m * n).map(|i| (i as f64 * 0.21).sin()).collect();
        let b: Vec<f64> = (0..j * n).map(|i| (i as f64 * 0.13).cos()).collect();
        let mut bt = vec![0.0; n * j];
        for q in 0..j {
            for p in 0..n {
                bt[p * j + q] = b[q * n + p];
            }
        }
        let mut c1 = vec![0.0; m * j];
        gemm_nt(&a, &b, m, n, j, &mut c1);
        let c2 = naive(&a, &bt, m, n, j);
        for (x, y) in c1.iter().zip(&c2) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}
