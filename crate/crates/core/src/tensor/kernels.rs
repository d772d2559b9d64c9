//! Dense kernels shared by the eager and taped paths.
//!
//! Every reduction runs in a fixed left-to-right order so results are
//! bit-reproducible: `out[i][j]` accumulates `a[i][p] * b[p][j]` for
//! `p = 0, 1, ..`.

use crate::error::{Error, Result};

const TILE_ROWS: usize = 4;
const TILE_COLS: usize = 8;

/// `out += a[m×k] · b[k×n]`.
///
/// Register-tiled; each output element still accumulates its products in
/// increasing `p` with separate multiplies and adds, so the result is
/// bitwise that of the naive triple loop whatever instruction set runs it.
pub fn matmul_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    assert!(out.len() == m * n && a.len() == m * k && b.len() == k * n);
    #[cfg(target_arch = "x86_64")]
    {
        if std::arch::is_x86_feature_detected!("avx2") {
            // SAFETY: the running CPU supports AVX2.
            unsafe { matmul_acc_avx2(out, a, b, m, k, n) };
            return;
        }
    }
    matmul_acc_tiled(out, a, b, m, k, n);
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    matmul_acc_tiled(out, a, b, m, k, n);
}

#[inline(always)]
fn matmul_acc_tiled(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    let full_rows = m - m % TILE_ROWS;
    let full_cols = n - n % TILE_COLS;
    for i0 in (0..full_rows).step_by(TILE_ROWS) {
        let a_rows: [&[f64]; TILE_ROWS] =
            std::array::from_fn(|r| &a[(i0 + r) * k..(i0 + r + 1) * k]);
        for j0 in (0..full_cols).step_by(TILE_COLS) {
            let mut acc = [[0.0; TILE_COLS]; TILE_ROWS];
            for (r, row) in acc.iter_mut().enumerate() {
                row.copy_from_slice(&out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS]);
            }
            for (p, b_full) in b.chunks_exact(n).enumerate() {
                let b_row: &[f64; TILE_COLS] =
                    b_full[j0..j0 + TILE_COLS].try_into().expect("tile width");
                for (row, a_row) in acc.iter_mut().zip(&a_rows) {
                    let x = a_row[p];
                    for (o, &y) in row.iter_mut().zip(b_row) {
                        *o += x * y;
                    }
                }
            }
            for (r, row) in acc.iter().enumerate() {
                out[(i0 + r) * n + j0..(i0 + r) * n + j0 + TILE_COLS].copy_from_slice(row);
            }
        }
        for i in i0..i0 + TILE_ROWS {
            narrow_columns(out, a, b, i, k, n, full_cols);
        }
    }
    for i in full_rows..m {
        let mut j0 = 0;
        while j0 + TILE_COLS <= n {
            row_tile(out, a, b, i, k, n, j0);
            j0 += TILE_COLS;
        }
        narrow_columns(out, a, b, i, k, n, j0);
    }
}

/// One row times columns `j0..j0 + TILE_COLS`.
#[inline(always)]
fn row_tile(out: &mut [f64], a: &[f64], b: &[f64], i: usize, k: usize, n: usize, j0: usize) {
    let mut acc = [0.0; TILE_COLS];
    acc.copy_from_slice(&out[i * n + j0..i * n + j0 + TILE_COLS]);
    for p in 0..k {
        let x = a[i * k + p];
        for (o, &y) in acc.iter_mut().zip(&b[p * n + j0..p * n + j0 + TILE_COLS]) {
            *o += x * y;
        }
    }
    out[i * n + j0..i * n + j0 + TILE_COLS].copy_from_slice(&acc);
}

/// One row times the trailing columns `j0..n` (fewer than a tile).
#[inline(always)]
fn narrow_columns(out: &mut [f64], a: &[f64], b: &[f64], i: usize, k: usize, n: usize, j0: usize) {
    let width = n - j0;
    if width == 0 {
        return;
    }
    let mut acc = [0.0; TILE_COLS];
    let acc = &mut acc[..width];
    acc.copy_from_slice(&out[i * n + j0..i * n + n]);
    for p in 0..k {
        let x = a[i * k + p];
        for (o, &y) in acc.iter_mut().zip(&b[p * n + j0..p * n + n]) {
            *o += x * y;
        }
    }
    out[i * n + j0..i * n + n].copy_from_slice(acc);
}

pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    matmul_acc(&mut out, a, b, m, k, n);
    out
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

/// `out += aᵀ · b` where `a` is `m×k` and `b` is `m×n`; `out` is `k×n`.
/// Products are summed in increasing row order of `a`.
pub fn matmul_tn_acc(out: &mut [f64], a: &[f64], b: &[f64], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), k * n);
    let at = transpose(a, m, k);
    matmul_acc(out, &at, b, k, m, n);
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Scalar relaxed Bernoulli sample; see [`super::Tape::gumbel_sigmoid`].
pub fn gumbel_sigmoid(logit: f64, u: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&u) {
        return Err(Error::Contract(format!("gumbel noise {u} outside [0, 1]")));
    }
    let u = u.clamp(1e-6, 1.0 - 1e-6);
    let s = sigmoid(logit);
    let on = s * u;
    Ok(on / (on + (1.0 - s) * (1.0 - u)))
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).fold(0.0, |acc, (x, y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut s = 0.0;
                for p in 0..k {
                    s += a[i * k + p] * b[p * n + j];
                }
                out[i * n + j] = s;
            }
        }
        out
    }

    #[test]
    fn matches_triple_loop_bitwise() {
        for (m, k, n) in [(3, 5, 4), (4, 7, 8), (9, 3, 19), (64, 64, 2), (5, 2, 64), (1, 1, 1)] {
            let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
            let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.91).cos()).collect();
            let mut out: Vec<f64> = (0..m * n).map(|i| i as f64 * 0.1).collect();
            let mut expect = out.clone();
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        expect[i * n + j] += a[i * k + p] * b[p * n + j];
                    }
                }
            }
            matmul_acc(&mut out, &a, &b, m, k, n);
            assert_eq!(out, expect, "{m}x{k}x{n}");
            assert_eq!(matmul(&a, &b, m, k, n), naive(&a, &b, m, k, n));
        }
    }

    #[test]
    fn transposed_product() {
        let a: Vec<f64> = (0..6).map(f64::from).collect();
        let b: Vec<f64> = (0..8).map(|i| f64::from(i) * 0.5).collect();
        let mut out = vec![0.0; 3 * 4];
        matmul_tn_acc(&mut out, &a, &b, 2, 3, 4);
        assert_eq!(out, naive(&transpose(&a, 2, 3), &b, 3, 2, 4));
    }
}
