//! Dense kernels behind the graph operations.
//!
//! Matmul exploits spike sparsity: zero entries in the left operand are
//! skipped and exact ones turn the inner update into a pure row addition,
//! so binary activations cost accumulates instead of multiply-accumulates.
//! Row-level parallelism keeps results bit-identical regardless of the
//! worker count because each output row is reduced by a single thread in a
//! fixed order.

use rayon::prelude::*;

use crate::scalar::Scalar;

/// Minimum per-thread row count before fanning out to the pool.
const PAR_ROW_MIN: usize = 8;

/// C[m,n] = A[m,k] @ B[k,n]
pub fn matmul<S: Scalar>(a: &[S], b: &[S], m: usize, k: usize, n: usize) -> Vec<S> {
    let mut out = vec![S::zero(); m * n];
    let one = S::one();
    let zero = S::zero();
    let row_job = |i: usize, out_row: &mut [S]| {
        for p in 0..k {
            let x = a[i * k + p];
            if x == zero {
                continue;
            }
            let b_row = &b[p * n..p * n + n];
            if x == one {
                for (o, &w) in out_row.iter_mut().zip(b_row) {
                    *o += w;
                }
            } else {
                for (o, &w) in out_row.iter_mut().zip(b_row) {
                    *o += x * w;
                }
            }
        }
    };
    if m >= PAR_ROW_MIN * 2 {
        out.par_chunks_mut(n).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in out.chunks_mut(n).enumerate() {
            row_job(i, row);
        }
    }
    out
}

/// dA[m,k] += G[m,n] @ B[k,n]^T, i.e. dA[i,p] = dot(G[i,:], B[p,:])
pub fn matmul_grad_lhs<S: Scalar>(g: &[S], b: &[S], m: usize, k: usize, n: usize, da: &mut [S]) {
    let row_job = |i: usize, da_row: &mut [S]| {
        let g_row = &g[i * n..i * n + n];
        for (p, slot) in da_row.iter_mut().enumerate() {
            let b_row = &b[p * n..p * n + n];
            let mut acc = S::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc += gv * bv;
            }
            *slot += acc;
        }
    };
    if m >= PAR_ROW_MIN * 2 {
        da.par_chunks_mut(k).enumerate().for_each(|(i, row)| row_job(i, row));
    } else {
        for (i, row) in da.chunks_mut(k).enumerate() {
            row_job(i, row);
        }
    }
}

/// dB[k,n] += A[m,k]^T @ G[m,n], skipping zero activations in A.
pub fn matmul_grad_rhs<S: Scalar>(a: &[S], g: &[S], m: usize, k: usize, n: usize, db: &mut [S]) {
    let one = S::one();
    let zero = S::zero();
    let row_job = |p: usize, db_row: &mut [S]| {
        for i in 0..m {
            let x = a[i * k + p];
            if x == zero {
                continue;
            }
            let g_row = &g[i * n..i * n + n];
            if x == one {
                for (o, &gv) in db_row.iter_mut().zip(g_row) {
                    *o += gv;
                }
            } else {
                for (o, &gv) in db_row.iter_mut().zip(g_row) {
                    *o += x * gv;
                }
            }
        }
    };
    if k >= PAR_ROW_MIN * 2 {
        db.par_chunks_mut(n).enumerate().for_each(|(p, row)| row_job(p, row));
    } else {
        for (p, row) in db.chunks_mut(n).enumerate() {
            row_job(p, row);
        }
    }
}

/// Per-head channel dot of two binary rows via bit packing and popcount.
///
/// `q` and `k` hold `rows` rows of `d` channels each, entries exactly 0 or 1.
/// The output holds `rows * heads` sums, one per (row, head).
pub fn binary_head_dot<S: Scalar>(q: &[S], k: &[S], rows: usize, d: usize, heads: usize) -> Vec<S> {
    let dh = d / heads;
    let one = S::one();
    let mut out = vec![S::zero(); rows * heads];
    for r in 0..rows {
        let q_row = &q[r * d..(r + 1) * d];
        let k_row = &k[r * d..(r + 1) * d];
        for h in 0..heads {
            let mut count = 0u32;
            let mut j = h * dh;
            let end = (h + 1) * dh;
            while j < end {
                let chunk = (end - j).min(64);
                let mut qw = 0u64;
                let mut kw = 0u64;
                for bit in 0..chunk {
                    if q_row[j + bit] == one {
                        qw |= 1u64 << bit;
                    }
                    if k_row[j + bit] == one {
                        kw |= 1u64 << bit;
                    }
                }
                count += (qw & kw).count_ones();
                j += chunk;
            }
            out[r * heads + h] = S::from_f64_c(count as f64);
        }
    }
    out
}

/// Arithmetic reference for the same per-head dot, valid for any real input.
pub fn real_head_dot<S: Scalar>(q: &[S], k: &[S], rows: usize, d: usize, heads: usize) -> Vec<S> {
    let dh = d / heads;
    let mut out = vec![S::zero(); rows * heads];
    for r in 0..rows {
        for h in 0..heads {
            let mut acc = S::zero();
            for j in h * dh..(h + 1) * dh {
                acc += q[r * d + j] * k[r * d + j];
            }
            out[r * heads + h] = acc;
        }
    }
    out
}
