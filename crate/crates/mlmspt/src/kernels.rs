//! Dense compute kernels behind the tape ops.
//!
//! Every kernel has a sequential implementation (`*_seq`) that is always
//! compiled, and a rayon implementation (`*_par`) behind the `parallel`
//! feature. The undecorated name dispatches on problem size. Parallel
//! variants split work so each output element is written by exactly one
//! task with a fixed inner summation order, so results are bit-identical
//! to the sequential path regardless of thread count.

use crate::scalar::Scalar;

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Minimum multiply-add count before a matmul goes parallel.
/// Below this the rayon spawn overhead dominates.
pub const PAR_MIN_MADDS: usize = 1 << 17;

/// Minimum row count before row-wise maps (softmax) go parallel.
pub const PAR_MIN_ROWS: usize = 64;

#[cfg(feature = "parallel")]
#[inline]
fn par_worthwhile(madds: usize) -> bool {
    madds >= PAR_MIN_MADDS && rayon::current_num_threads() > 1
}

// ── General matrix products ─────────────────────────────────────────

/// out = A·B (+= when `acc`), A is m×k, B is k×n, all row-major.
pub fn gemm_nn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    if par_worthwhile(m * k * n) {
        gemm_nn_par(a, b, out, m, k, n, acc);
        return;
    }
    gemm_nn_seq(a, b, out, m, k, n, acc);
}

pub fn gemm_nn_seq<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    for i in 0..m {
        gemm_nn_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n, acc);
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_nn_par<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| gemm_nn_row(a_row, b, out_row, k, n, acc));
}

// ikj order: stream rows of B through one output row, which vectorizes well.
#[inline]
fn gemm_nn_row<S: Scalar>(a_row: &[S], b: &[S], out_row: &mut [S], k: usize, n: usize, acc: bool) {
    if !acc {
        out_row.fill(S::zero());
    }
    for p in 0..k {
        let scale = a_row[p];
        if scale == S::zero() {
            continue;
        }
        let b_row = &b[p * n..(p + 1) * n];
        for j in 0..n {
            out_row[j] += scale * b_row[j];
        }
    }
}

/// out = A·Bᵀ (+= when `acc`), A is m×k, B is n×k, out is m×n.
pub fn gemm_nt<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    #[cfg(feature = "parallel")]
    if par_worthwhile(m * k * n) {
        gemm_nt_par(a, b, out, m, k, n, acc);
        return;
    }
    gemm_nt_seq(a, b, out, m, k, n, acc);
}

pub fn gemm_nt_seq<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    for i in 0..m {
        gemm_nt_row(&a[i * k..(i + 1) * k], b, &mut out[i * n..(i + 1) * n], k, n, acc);
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_nt_par<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    out.par_chunks_mut(n)
        .zip(a.par_chunks(k))
        .for_each(|(out_row, a_row)| gemm_nt_row(a_row, b, out_row, k, n, acc));
}

#[inline]
fn gemm_nt_row<S: Scalar>(a_row: &[S], b: &[S], out_row: &mut [S], k: usize, n: usize, acc: bool) {
    for j in 0..n {
        let b_row = &b[j * k..(j + 1) * k];
        let mut dot = S::zero();
        for p in 0..k {
            dot += a_row[p] * b_row[p];
        }
        if acc {
            out_row[j] += dot;
        } else {
            out_row[j] = dot;
        }
    }
}

/// out = Aᵀ·B (+= when `acc`), A is m×k, B is m×n, out is k×n.
pub fn gemm_tn<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    #[cfg(feature = "parallel")]
    if par_worthwhile(m * k * n) {
        gemm_tn_par(a, b, out, m, k, n, acc);
        return;
    }
    gemm_tn_seq(a, b, out, m, k, n, acc);
}

pub fn gemm_tn_seq<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    for p in 0..k {
        gemm_tn_row(a, b, &mut out[p * n..(p + 1) * n], p, m, k, n, acc);
    }
}

#[cfg(feature = "parallel")]
pub fn gemm_tn_par<S: Scalar>(a: &[S], b: &[S], out: &mut [S], m: usize, k: usize, n: usize, acc: bool) {
    out.par_chunks_mut(n)
        .enumerate()
        .for_each(|(p, out_row)| gemm_tn_row(a, b, out_row, p, m, k, n, acc));
}

#[inline]
fn gemm_tn_row<S: Scalar>(a: &[S], b: &[S], out_row: &mut [S], p: usize, m: usize, k: usize, n: usize, acc: bool) {
    if !acc {
        out_row.fill(S::zero());
    }
    for i in 0..m {
        let scale = a[i * k + p];
        if scale == S::zero() {
            continue;
        }
        let b_row = &b[i * n..(i + 1) * n];
        for j in 0..n {
            out_row[j] += scale * b_row[j];
        }
    }
}

// ── Row-wise softmax ────────────────────────────────────────────────

/// Exp-normalizes each row of `x` (rows×cols) into `out`, subtracting the
/// row max first so large logits cannot overflow.
pub fn softmax_rows<S: Scalar>(x: &[S], out: &mut [S], rows: usize, cols: usize) {
    debug_assert_eq!(x.len(), rows * cols);
    debug_assert_eq!(out.len(), rows * cols);
    #[cfg(feature = "parallel")]
    if rows >= PAR_MIN_ROWS && rayon::current_num_threads() > 1 {
        softmax_rows_par(x, out, rows, cols);
        return;
    }
    softmax_rows_seq(x, out, rows, cols);
}

pub fn softmax_rows_seq<S: Scalar>(x: &[S], out: &mut [S], rows: usize, cols: usize) {
    for (x_row, out_row) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)) {
        softmax_row(x_row, out_row);
    }
}

#[cfg(feature = "parallel")]
pub fn softmax_rows_par<S: Scalar>(x: &[S], out: &mut [S], rows: usize, cols: usize) {
    let _ = rows;
    out.par_chunks_mut(cols)
        .zip(x.par_chunks(cols))
        .for_each(|(out_row, x_row)| softmax_row(x_row, out_row));
}

#[inline]
fn softmax_row<S: Scalar>(x_row: &[S], out_row: &mut [S]) {
    let mut max = x_row[0];
    for &v in &x_row[1..] {
        if v > max {
            max = v;
        }
    }
    let mut sum = S::zero();
    for (o, &v) in out_row.iter_mut().zip(x_row) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    let inv = S::one() / sum;
    for o in out_row.iter_mut() {
        *o *= inv;
    }
}

// ── Pairwise squared distances ──────────────────────────────────────

/// Squared Euclidean distance between two xyz triples.
#[inline]
pub fn dist2<S: Scalar>(a: &[S], b: &[S]) -> S {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

/// For every point, shrink its stored minimum squared distance if the new
/// anchor point is closer. `points` is n×3 row-major.
pub fn min_dist2_update<S: Scalar>(points: &[S], anchor: &[S; 3], min_d2: &mut [S]) {
    #[cfg(feature = "parallel")]
    if min_d2.len() >= 2048 && rayon::current_num_threads() > 1 {
        min_d2
            .par_iter_mut()
            .zip(points.par_chunks(3))
            .for_each(|(d, p)| {
                let nd = dist2(p, anchor);
                if nd < *d {
                    *d = nd;
                }
            });
        return;
    }
    min_dist2_update_seq(points, anchor, min_d2);
}

pub fn min_dist2_update_seq<S: Scalar>(points: &[S], anchor: &[S; 3], min_d2: &mut [S]) {
    for (d, p) in min_d2.iter_mut().zip(points.chunks_exact(3)) {
        let nd = dist2(p, anchor);
        if nd < *d {
            *d = nd;
        }
    }
}

// ── Per-item parallel map ───────────────────────────────────────────

/// Maps `f` over `0..n` collecting results in index order. Used for
/// per-query and per-sample work (kNN queries, clouds in a batch); output
/// order is fixed so downstream reductions are deterministic.
pub fn map_indexed<T, F>(n: usize, f: F) -> Vec<T>
where
    T: Send,
    F: Fn(usize) -> T + Sync + Send,
{
    #[cfg(feature = "parallel")]
    if n > 1 && rayon::current_num_threads() > 1 {
        return (0..n).into_par_iter().map(f).collect();
    }
    (0..n).map(f).collect()
}
