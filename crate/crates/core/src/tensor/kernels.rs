//! Raw row-major kernels shared by the tape.
//!
//! Every kernel accumulates each output element over the reduction index in
//! ascending order, so results are reproducible bit-for-bit on one target.

use super::Scalar;

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 32;

/// `out[rows×n] += A · b[red×n]` where `A[r][p] = a[r*rs + p*cs]`.
///
/// Output tiles are held in registers across the reduction, which keeps
/// the per-element summation order of the plain triple loop.
#[allow(clippy::too_many_arguments)]
fn gemm_acc<T: Scalar>(a: &[T], rs: usize, cs: usize, b: &[T], out: &mut [T], rows: usize, red: usize, n: usize) {
    let mut i0 = 0;
    while i0 < rows {
        let tr = TILE_ROWS.min(rows - i0);
        let mut j0 = 0;
        while j0 < n {
            let tc = TILE_COLS.min(n - j0);
            if tr == TILE_ROWS && tc == TILE_COLS {
                let mut acc = [[T::zero(); TILE_COLS]; TILE_ROWS];
                for (r, acc_row) in acc.iter_mut().enumerate() {
                    let o = (i0 + r) * n + j0;
                    acc_row.copy_from_slice(&out[o..o + TILE_COLS]);
                }
                for p in 0..red {
                    let b_tile: &[T; TILE_COLS] = b[p * n + j0..p * n + j0 + TILE_COLS].try_into().expect("tile");
                    for (r, acc_row) in acc.iter_mut().enumerate() {
                        let av = a[(i0 + r) * rs + p * cs];
                        for (x, &bv) in acc_row.iter_mut().zip(b_tile) {
                            *x += av * bv;
                        }
                    }
                }
                for (r, acc_row) in acc.iter().enumerate() {
                    let o = (i0 + r) * n + j0;
                    out[o..o + TILE_COLS].copy_from_slice(acc_row);
                }
            } else {
                for r in i0..i0 + tr {
                    let out_row = &mut out[r * n + j0..r * n + j0 + tc];
                    for p in 0..red {
                        let av = a[r * rs + p * cs];
                        for (x, &bv) in out_row.iter_mut().zip(&b[p * n + j0..p * n + j0 + tc]) {
                            *x += av * bv;
                        }
                    }
                }
            }
            j0 += tc;
        }
        i0 += tr;
    }
}

/// `out[m×n] += a[m×k] · b[k×n]`.
pub fn matmul_into<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    gemm_acc(a, k, 1, b, out, m, k, n);
}

/// `out[k×n] += aᵀ · b` for `a[m×k]`, `b[m×n]`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(out.len(), k * n);
    gemm_acc(a, 1, k, b, out, k, m, n);
}

/// Transpose of a `rows×cols` matrix.
pub fn transpose_2d<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); a.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}
