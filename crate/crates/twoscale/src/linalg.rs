//! Small dense matrices (d ≤ a handful) used for effective coefficients and
//! covariance estimates.

use serde::{Deserialize, Serialize};

/// Square matrix, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SquareMatrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl SquareMatrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        Self::scaled_identity(n, 1.0)
    }

    pub fn scaled_identity(n: usize, s: f64) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = s;
        }
        m
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Self {
        let n = rows.len();
        let data = rows.iter().flat_map(|r| {
            assert_eq!(r.len(), n, "matrix rows must be square");
            r.iter().copied()
        });
        Self { n, data: data.collect() }
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        self.data.chunks(self.n).map(<[f64]>::to_vec).collect()
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.n);
        for i in 0..self.n {
            for j in 0..self.n {
                t.set(i, j, self.get(j, i));
            }
        }
        t
    }

    pub fn symmetric_part(&self) -> Self {
        let t = self.transpose();
        self.lincomb(0.5, &t, 0.5)
    }

    /// `a * self + b * other`.
    pub fn lincomb(&self, a: f64, other: &Self, b: f64) -> Self {
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Self { n: self.n, data }
    }

    pub fn apply(&self, v: &[f64]) -> Vec<f64> {
        (0..self.n).map(|i| (0..self.n).map(|j| self.get(i, j) * v[j]).sum()).collect()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// Largest absolute entry of `self - other`.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.lincomb(1.0, other, -1.0).max_abs()
    }

    /// Eigenvalues of the symmetric part, ascending.
    pub fn sym_eigenvalues(&self) -> Vec<f64> {
        sym_eigenvalues(self.n, &self.symmetric_part().data)
    }

    /// Spectral norm (largest singular value).
    /// Nearest positive semidefinite matrix in Frobenius norm (negative
    /// eigenvalues of the symmetric part set to zero).
    pub fn psd_projection(&self) -> Self {
        let n = self.n;
        let sym = self.symmetric_part();
        let (values, vectors) = sym_eigen(n, &sym.data);
        let mut out = Self::zeros(n);
        for (c, &lam) in values.iter().enumerate() {
            if lam <= 0.0 {
                continue;
            }
            for i in 0..n {
                for j in 0..n {
                    out.data[i * n + j] += lam * vectors[i * n + c] * vectors[j * n + c];
                }
            }
        }
        out
    }

    pub fn spectral_norm(&self) -> f64 {
        let ata = self.transpose().matmul(self);
        sym_eigenvalues(self.n, &ata.data).last().copied().unwrap_or(0.0).max(0.0).sqrt()
    }

    pub fn matmul(&self, other: &Self) -> Self {
        let n = self.n;
        let mut m = Self::zeros(n);
        for i in 0..n {
            for j in 0..n {
                m.data[i * n + j] = (0..n).map(|k| self.get(i, k) * other.get(k, j)).sum();
            }
        }
        m
    }
}

/// Eigenvalues of a symmetric n×n matrix (row-major) by cyclic Jacobi
/// rotations, ascending.
pub fn sym_eigenvalues(n: usize, m: &[f64]) -> Vec<f64> {
    sym_eigen(n, m).0
}

/// Eigenvalues (ascending) and the matching orthonormal eigenvectors, stored
/// as the columns of a row-major n×n array.
pub fn sym_eigen(n: usize, m: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let mut a = m.to_vec();
    let mut v = vec![0.0; n * n];
    for i in 0..n {
        v[i * n + i] = 1.0;
    }
    for _sweep in 0..64 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i * n + j] * a[i * n + j])
            .sum();
        let scale: f64 = a.iter().map(|x| x * x).sum::<f64>();
        if off <= 1e-30 * scale.max(f64::MIN_POSITIVE) {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                let apq = a[p * n + q];
                if apq == 0.0 {
                    continue;
                }
                let theta = (a[q * n + q] - a[p * n + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[k * n + p];
                    let akq = a[k * n + q];
                    a[k * n + p] = c * akp - s * akq;
                    a[k * n + q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let vkp = v[k * n + p];
                    let vkq = v[k * n + q];
                    v[k * n + p] = c * vkp - s * vkq;
                    v[k * n + q] = s * vkp + c * vkq;
                }
                for k in 0..n {
                    let apk = a[p * n + k];
                    let aqk = a[q * n + k];
                    a[p * n + k] = c * apk - s * aqk;
                    a[q * n + k] = s * apk + c * aqk;
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[i * n + i].total_cmp(&a[j * n + j]));
    let values = order.iter().map(|&i| a[i * n + i]).collect();
    let mut vectors = vec![0.0; n * n];
    for (col, &src) in order.iter().enumerate() {
        for k in 0..n {
            vectors[k * n + col] = v[k * n + src];
        }
    }
    (values, vectors)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jacobi_matches_closed_form_2x2() {
        let (a, b, c) = (2.0, 0.7, 1.1);
        let ev = sym_eigenvalues(2, &[a, b, b, c]);
        let mid = 0.5 * (a + c);
        let r = ((0.5 * (a - c)).powi(2) + b * b).sqrt();
        assert!((ev[0] - (mid - r)).abs() < 1e-14);
        assert!((ev[1] - (mid + r)).abs() < 1e-14);
    }

    #[test]
    fn eigenvectors_reconstruct_matrix() {
        let m = [2.0, 0.3, -0.5, 0.3, 1.0, 0.2, -0.5, 0.2, 3.0];
        let (vals, vecs) = sym_eigen(3, &m);
        for i in 0..3 {
            for j in 0..3 {
                let r: f64 = (0..3).map(|c| vals[c] * vecs[i * 3 + c] * vecs[j * 3 + c]).sum();
                assert!((r - m[i * 3 + j]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn psd_projection_clips_negative_part() {
        let m = SquareMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, -2.0]]);
        let p = m.psd_projection();
        assert!(p.max_abs_diff(&SquareMatrix::from_rows(&[vec![1.0, 0.0], vec![0.0, 0.0]])) < 1e-14);
    }

    #[test]
    fn jacobi_diagonal_3x3() {
        let ev = sym_eigenvalues(3, &[3.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 2.0]);
        assert_eq!(ev, vec![1.0, 2.0, 3.0]);
    }
}
