//! Recovery of a skew-symmetric stream matrix from a divergence-free drift.
//!
//! Per time slice we solve `(α − Δ) S_ij = ∂_i b_j − ∂_j b_i` spectrally with
//! zero spatial mean, so that `Σ_j ∂_j S_ij = b_i − b̄_i` when α = 0.

use crate::environment::{relative_divergence, row_divergence};
use crate::grid::{max_abs, MatrixField, SpaceTimeGrid};
use crate::spectral::SpatialSpectrum;
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use thiserror::Error;

/// Relative divergence accepted on input.
pub const DIVERGENCE_TOLERANCE: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum StreamError {
    #[error("drift is not divergence-free: relative max divergence {0:e}")]
    Divergence(f64),
    #[error("regularization alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("drift field must have {expected} components of length {len}")]
    Shape { expected: usize, len: usize },
}

#[derive(Debug, Clone)]
pub struct StreamRecovery {
    pub s_rec: MatrixField,
    /// Max-norm of `div(s_rec) − (b − b̄)`.
    pub residual: f64,
    /// `residual` divided by the max-norm of b (zero for b ≡ 0).
    pub relative_residual: f64,
    pub alpha: f64,
    pub warnings: Vec<String>,
}

/// Direct solve, α = 0.
pub fn solve_stream_matrix(b: &[Vec<f64>], grid: &SpaceTimeGrid) -> Result<StreamRecovery, StreamError> {
    solve(b, grid, 0.0)
}

/// Regularized solve of `(α − Δ) S = curl source`.
pub fn solve_stream_regularized(b: &[Vec<f64>], grid: &SpaceTimeGrid, alpha: f64) -> Result<StreamRecovery, StreamError> {
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(StreamError::Alpha(alpha));
    }
    solve(b, grid, alpha)
}

fn solve(b: &[Vec<f64>], grid: &SpaceTimeGrid, alpha: f64) -> Result<StreamRecovery, StreamError> {
    let d = grid.d;
    let len = grid.len();
    if b.len() != d || b.iter().any(|c| c.len() != len) {
        return Err(StreamError::Shape { expected: d, len });
    }
    let div = relative_divergence(grid, b);
    if div > DIVERGENCE_TOLERANCE {
        return Err(StreamError::Divergence(div));
    }
    let mut warnings = Vec::new();
    if d == 2 {
        warnings.push(
            "d = 2: the whole-space existence argument needs d >= 3; the periodic solve is well-posed but the result is a torus surrogate"
                .to_string(),
        );
    }

    let spec = SpatialSpectrum::new(d, grid.n_x, grid.length);
    let ns = grid.slice_len();
    let pairs: Vec<(usize, usize)> = (0..d).flat_map(|i| (i + 1..d).map(move |j| (i, j))).collect();

    let slices: Vec<Vec<Vec<f64>>> = (0..grid.n_t)
        .into_par_iter()
        .map(|t| {
            let range = t * ns..(t + 1) * ns;
            let bh: Vec<Vec<Complex64>> = b.iter().map(|c| spec.to_spectrum(&c[range.clone()])).collect();
            pairs
                .iter()
                .map(|&(i, j)| {
                    let sh: Vec<Complex64> = (0..ns)
                        .map(|p| {
                            if spec.is_null_mode(p) {
                                return Complex64::default();
                            }
                            let k = spec.wavevector(p);
                            let num = Complex64::new(0.0, k[i]) * bh[j][p] - Complex64::new(0.0, k[j]) * bh[i][p];
                            num / (alpha + spec.k_squared(p))
                        })
                        .collect();
                    spec.to_real(sh)
                })
                .collect()
        })
        .collect();

    let mut s_rec = MatrixField::zeros(d, len);
    for (t, slice) in slices.into_iter().enumerate() {
        for (&(i, j), v) in pairs.iter().zip(slice) {
            let range = t * ns..(t + 1) * ns;
            for (dst, &x) in s_rec.comp_mut(i, j)[range.clone()].iter_mut().zip(&v) {
                *dst = x;
            }
            for (dst, &x) in s_rec.comp_mut(j, i)[range].iter_mut().zip(&v) {
                *dst = -x;
            }
        }
    }

    let residual = normalization_residual(grid, &s_rec, b);
    let scale = b.iter().map(|c| max_abs(c)).fold(0.0, f64::max);
    let relative_residual = if scale > 0.0 { residual / scale } else { residual };
    Ok(StreamRecovery { s_rec, residual, relative_residual, alpha, warnings })
}

/// Max-norm of `div(s) + b̄ − b`, with b̄ the spatial average of b per slice.
pub fn normalization_residual(grid: &SpaceTimeGrid, s: &MatrixField, b: &[Vec<f64>]) -> f64 {
    let ns = grid.slice_len();
    let div = row_divergence(grid, s);
    let mut worst = 0.0_f64;
    for (dc, bc) in div.iter().zip(b) {
        for t in 0..grid.n_t {
            let r = t * ns..(t + 1) * ns;
            let bbar = bc[r.clone()].iter().sum::<f64>() / ns as f64;
            for (x, y) in dc[r.clone()].iter().zip(&bc[r]) {
                worst = worst.max((x + bbar - y).abs());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn spatially_constant_drift_gives_zero_stream() {
        let grid = SpaceTimeGrid::new(2, 8, 4, 1.0, 1.0).unwrap();
        let b: Vec<Vec<f64>> = (0..2)
            .map(|i| (0..grid.len()).map(|n| (n / grid.slice_len()) as f64 + i as f64).collect())
            .collect();
        let rec = solve_stream_matrix(&b, &grid).unwrap();
        assert!(rec.s_rec.comps.iter().all(|c| max_abs(c) == 0.0));
        assert!(rec.residual < 1e-14);
    }

    #[test]
    fn rejects_compressible_drift() {
        let grid = SpaceTimeGrid::new(2, 8, 4, 1.0, 1.0).unwrap();
        let mut b = vec![vec![0.0; grid.len()]; 2];
        for n in 0..grid.len() {
            let x = grid.unravel_spatial(n % grid.slice_len())[0] as f64 * grid.h();
            b[0][n] = (2.0 * PI * x).sin();
        }
        assert!(matches!(solve_stream_matrix(&b, &grid), Err(StreamError::Divergence(_))));
    }
}
