//! Raw math kernels behind the autodiff ops.
//!
//! Every kernel has a sequential implementation and, with the `parallel`
//! feature, a rayon variant that splits work over independent output rows.
//! The per-row arithmetic is identical in both, so results are bit-exact
//! regardless of thread count — parallel reductions over floats are never
//! used.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

/// Work threshold (multiply-accumulates) below which the parallel variants
/// fall back to the sequential loop. A rayon scope costs tens of
/// microseconds in wakeups, so splitting pays off only when the matrix is
/// worth a few hundred microseconds of arithmetic.
pub const PAR_MIN_MACS: usize = 1 << 22;

// ── matmul: C[m×n] = A[m×k] · B[k×n] ─────────────────────────────────

pub fn matmul_seq(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_par(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    if m * k * n < PAR_MIN_MACS {
        return matmul_seq(out, a, b, m, k, n);
    }
    out.par_chunks_exact_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_row(out_row, &a[i * k..(i + 1) * k], b, n);
    });
}

/// out_row[j] = Σ_p a_row[p] · b[p, j] — the axpy form vectorizes well.
#[inline]
fn matmul_row(out_row: &mut [f32], a_row: &[f32], b: &[f32], n: usize) {
    out_row.fill(0.0);
    for (p, &aip) in a_row.iter().enumerate() {
        let b_row = &b[p * n..(p + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aip * bv;
        }
    }
}

pub fn matmul(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    return matmul_par(out, a, b, m, k, n);
    #[cfg(not(feature = "parallel"))]
    matmul_seq(out, a, b, m, k, n);
}

// ── matmul_nt: C[m×n] = A[m×k] · B[n×k]ᵀ ─────────────────────────────

pub fn matmul_nt_seq(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for (i, out_row) in out.chunks_exact_mut(n).enumerate() {
        matmul_nt_row(out_row, &a[i * k..(i + 1) * k], b, k);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_nt_par(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    if m * k * n < PAR_MIN_MACS {
        return matmul_nt_seq(out, a, b, m, k, n);
    }
    out.par_chunks_exact_mut(n).enumerate().for_each(|(i, out_row)| {
        matmul_nt_row(out_row, &a[i * k..(i + 1) * k], b, k);
    });
}

#[inline]
fn matmul_nt_row(out_row: &mut [f32], a_row: &[f32], b: &[f32], k: usize) {
    for (j, o) in out_row.iter_mut().enumerate() {
        *o = dot(a_row, &b[j * k..(j + 1) * k]);
    }
}

pub fn matmul_nt(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    return matmul_nt_par(out, a, b, m, k, n);
    #[cfg(not(feature = "parallel"))]
    matmul_nt_seq(out, a, b, m, k, n);
}

// ── matmul_tn: C[k×n] = A[m×k]ᵀ · B[m×n] ─────────────────────────────

pub fn matmul_tn_seq(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    for (p, out_row) in out.chunks_exact_mut(n).enumerate() {
        matmul_tn_row(out_row, p, a, b, k, n);
    }
}

#[cfg(feature = "parallel")]
pub fn matmul_tn_par(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    if m * k * n < PAR_MIN_MACS {
        return matmul_tn_seq(out, a, b, m, k, n);
    }
    out.par_chunks_exact_mut(n).enumerate().for_each(|(p, out_row)| {
        matmul_tn_row(out_row, p, a, b, k, n);
    });
}

/// out_row = Σ_i a[i, p] · b[i, :], i.e. row p of AᵀB.
#[inline]
fn matmul_tn_row(out_row: &mut [f32], p: usize, a: &[f32], b: &[f32], k: usize, n: usize) {
    out_row.fill(0.0);
    let m = b.len() / n;
    for i in 0..m {
        let aip = a[i * k + p];
        let b_row = &b[i * n..(i + 1) * n];
        for (o, &bv) in out_row.iter_mut().zip(b_row) {
            *o += aip * bv;
        }
    }
}

pub fn matmul_tn(out: &mut [f32], a: &[f32], b: &[f32], m: usize, k: usize, n: usize) {
    #[cfg(feature = "parallel")]
    return matmul_tn_par(out, a, b, m, k, n);
    #[cfg(not(feature = "parallel"))]
    matmul_tn_seq(out, a, b, m, k, n);
}

#[inline]
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    // Four partial sums unlock SIMD without changing results across calls.
    let mut acc = [0.0f32; 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

/// y += alpha * x
#[inline]
pub fn axpy(y: &mut [f32], alpha: f32, x: &[f32]) {
    debug_assert_eq!(y.len(), x.len());
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

/// Stable softmax of `row` in place (max-subtraction).
pub fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = 1.0 / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

/// log(Σ exp(x)) with max-subtraction.
pub fn log_sum_exp(row: &[f32]) -> f32 {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let sum: f32 = row.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f32], b: &[f32], m: usize, k: usize, n: usize) -> Vec<f32> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                c[i * n + j] = s;
            }
        }
        c
    }

    fn fill(len: usize, seed: f32) -> Vec<f32> {
        (0..len).map(|i| ((i as f32) * 0.37 + seed).sin()).collect()
    }

    #[test]
    fn matmul_matches_naive() {
        let (m, k, n) = (7, 5, 9);
        let a = fill(m * k, 0.1);
        let b = fill(k * n, 0.7);
        let mut out = vec![0.0; m * n];
        matmul_seq(&mut out, &a, &b, m, k, n);
        let want = naive(&a, &b, m, k, n);
        assert!(out
            .iter()
            .zip(&want)
            .all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[test]
    fn transposed_forms_match_plain_form() {
        let (m, k, n) = (6, 4, 5);
        let a = fill(m * k, 0.2);
        let b = fill(k * n, 0.9);
        // nt: build Bᵀ explicitly, multiply the plain way.
        let mut bt = vec![0.0; n * k];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        let mut via_nt = vec![0.0; m * n];
        matmul_nt_seq(&mut via_nt, &a, &bt, m, k, n);
        let want = naive(&a, &b, m, k, n);
        assert!(via_nt.iter().zip(&want).all(|(x, y)| (x - y).abs() < 1e-5));

        // tn: (Aᵀ·B) where A is [m×k], B is [m×n].
        let b2 = fill(m * n, 0.4);
        let mut via_tn = vec![0.0; k * n];
        matmul_tn_seq(&mut via_tn, &a, &b2, m, k, n);
        let mut at = vec![0.0; k * m];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        let want_tn = naive(&at, &b2, k, m, n);
        assert!(via_tn
            .iter()
            .zip(&want_tn)
            .all(|(x, y)| (x - y).abs() < 1e-5));
    }

    #[cfg(feature = "parallel")]
    #[test]
    fn parallel_is_bit_identical_to_sequential() {
        // Above the MAC threshold so the rayon path actually engages.
        let (m, k, n) = (96, 64, 96);
        let a = fill(m * k, 0.3);
        let b = fill(k * n, 0.6);
        let mut seq = vec![0.0; m * n];
        let mut par = vec![0.0; m * n];
        matmul_seq(&mut seq, &a, &b, m, k, n);
        matmul_par(&mut par, &a, &b, m, k, n);
        assert_eq!(seq, par);

        let bt = fill(n * k, 0.5);
        let mut seq_nt = vec![0.0; m * n];
        let mut par_nt = vec![0.0; m * n];
        matmul_nt_seq(&mut seq_nt, &a, &bt, m, k, n);
        matmul_nt_par(&mut par_nt, &a, &bt, m, k, n);
        assert_eq!(seq_nt, par_nt);

        let b2 = fill(m * n, 0.8);
        let mut seq_tn = vec![0.0; k * n];
        let mut par_tn = vec![0.0; k * n];
        matmul_tn_seq(&mut seq_tn, &a, &b2, m, k, n);
        matmul_tn_par(&mut par_tn, &a, &b2, m, k, n);
        assert_eq!(seq_tn, par_tn);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut row = vec![1000.0, 0.0];
        softmax_in_place(&mut row);
        assert!((row[0] - 1.0).abs() < 1e-6);
        assert!(row[1].abs() < 1e-6);
    }
}
