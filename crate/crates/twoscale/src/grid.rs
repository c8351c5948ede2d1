//! Periodic space-time lattice.
//!
//! Fields are stored as flat `Vec<f64>` in row-major order with time as the
//! slowest index: `((t * n_x + i0) * n_x + i1) [* n_x + i2]`. Every index
//! wraps, so a cyclic shift of the array is a shift of the environment.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("spatial dimension must be 2 or 3, got {0}")]
    Dimension(usize),
    #[error("{axis} resolution must be a power of two and at least 4, got {value}")]
    Resolution { axis: &'static str, value: usize },
    #[error("{what} must be finite and positive, got {value}")]
    NonPositive { what: &'static str, value: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpaceTimeGrid {
    pub d: usize,
    pub n_x: usize,
    pub n_t: usize,
    /// Spatial period.
    pub length: f64,
    /// Temporal period.
    pub period: f64,
}

pub(crate) fn check_resolution(axis: &'static str, value: usize) -> Result<(), GridError> {
    if value < 4 || !value.is_power_of_two() {
        return Err(GridError::Resolution { axis, value });
    }
    Ok(())
}

pub(crate) fn check_positive(what: &'static str, value: f64) -> Result<(), GridError> {
    if !(value.is_finite() && value > 0.0) {
        return Err(GridError::NonPositive { what, value });
    }
    Ok(())
}

impl SpaceTimeGrid {
    pub fn new(d: usize, n_x: usize, n_t: usize, length: f64, period: f64) -> Result<Self, GridError> {
        let grid = Self { d, n_x, n_t, length, period };
        grid.validate()?;
        Ok(grid)
    }

    pub fn validate(&self) -> Result<(), GridError> {
        if !(2..=3).contains(&self.d) {
            return Err(GridError::Dimension(self.d));
        }
        check_resolution("spatial", self.n_x)?;
        check_resolution("temporal", self.n_t)?;
        check_positive("spatial period", self.length)?;
        check_positive("temporal period", self.period)?;
        Ok(())
    }

    /// Spatial spacing h.
    pub fn h(&self) -> f64 {
        self.length / self.n_x as f64
    }

    /// Temporal spacing k.
    pub fn k(&self) -> f64 {
        self.period / self.n_t as f64
    }

    /// Number of nodes in one time slice.
    pub fn slice_len(&self) -> usize {
        self.n_x.pow(self.d as u32)
    }

    pub fn len(&self) -> usize {
        self.n_t * self.slice_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn spatial_dims(&self) -> Vec<usize> {
        vec![self.n_x; self.d]
    }

    pub fn space_time_dims(&self) -> Vec<usize> {
        let mut dims = vec![self.n_t];
        dims.extend(self.spatial_dims());
        dims
    }

    /// Flat index of a node; all coordinates wrap periodically.
    pub fn index(&self, t: i64, x: &[i64]) -> usize {
        let nt = self.n_t as i64;
        let nx = self.n_x as i64;
        let mut idx = t.rem_euclid(nt) as usize;
        for &xi in x {
            idx = idx * self.n_x + xi.rem_euclid(nx) as usize;
        }
        idx
    }

    /// Periodic multilinear interpolation of a scalar field at the physical
    /// point (x, t), wrapped into the torus.
    pub fn interpolate(&self, field: &[f64], x: &[f64], t: f64) -> f64 {
        let mut acc = 0.0;
        self.for_each_corner(x, t, |idx, w| acc += w * field[idx]);
        acc
    }

    /// Visit the 2^(d+1) interpolation corners around (x, t) with weights.
    pub fn for_each_corner(&self, x: &[f64], t: f64, mut visit: impl FnMut(usize, f64)) {
        let (t0, t1, ft) = axis_weights(t / self.k(), self.n_t);
        let h = self.h();
        let axes: Vec<(usize, usize, f64)> = x.iter().map(|&xi| axis_weights(xi / h, self.n_x)).collect();
        for corner in 0..(1usize << (self.d + 1)) {
            let (ti, mut w) = if corner & 1 == 0 { (t0, 1.0 - ft) } else { (t1, ft) };
            let mut idx = ti;
            for (j, &(i0, i1, f)) in axes.iter().enumerate() {
                let bit = (corner >> (j + 1)) & 1;
                idx = idx * self.n_x + if bit == 0 { i0 } else { i1 };
                w *= if bit == 0 { 1.0 - f } else { f };
            }
            if w != 0.0 {
                visit(idx, w);
            }
        }
    }

    /// Spatial multi-index of a position inside a slice.
    pub fn unravel_spatial(&self, mut p: usize) -> Vec<usize> {
        let mut out = vec![0; self.d];
        for j in (0..self.d).rev() {
            out[j] = p % self.n_x;
            p /= self.n_x;
        }
        out
    }
}

/// Lower node, upper node and fraction for periodic linear interpolation of
/// the fractional index `u` on an axis of `n` nodes.
pub(crate) fn axis_weights(u: f64, n: usize) -> (usize, usize, f64) {
    let u = u.rem_euclid(n as f64);
    let i0 = (u.floor() as usize).min(n - 1);
    (i0, (i0 + 1) % n, (u - i0 as f64).clamp(0.0, 1.0))
}

/// d×d matrix field stored componentwise: `comps[i * d + j]` is the (i, j)
/// entry at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct MatrixField {
    pub d: usize,
    pub comps: Vec<Vec<f64>>,
}

impl MatrixField {
    pub fn zeros(d: usize, len: usize) -> Self {
        Self { d, comps: vec![vec![0.0; len]; d * d] }
    }

    pub fn comp(&self, i: usize, j: usize) -> &[f64] {
        &self.comps[i * self.d + j]
    }

    pub fn comp_mut(&mut self, i: usize, j: usize) -> &mut Vec<f64> {
        &mut self.comps[i * self.d + j]
    }

    pub fn node_len(&self) -> usize {
        self.comps.first().map_or(0, Vec::len)
    }

    /// The matrix at one node, row-major.
    pub fn at(&self, node: usize) -> Vec<f64> {
        self.comps.iter().map(|c| c[node]).collect()
    }

    pub fn transpose(&self) -> Self {
        let d = self.d;
        let mut comps = Vec::with_capacity(d * d);
        for i in 0..d {
            for j in 0..d {
                comps.push(self.comps[j * d + i].clone());
            }
        }
        Self { d, comps }
    }

    /// Elementwise sum `self + sign * other`.
    pub fn combine(&self, other: &Self, sign: f64) -> Self {
        let comps = self
            .comps
            .iter()
            .zip(&other.comps)
            .map(|(a, b)| a.iter().zip(b).map(|(x, y)| x + sign * y).collect())
            .collect();
        Self { d: self.d, comps }
    }

    /// Torus average of every component, row-major.
    pub fn mean(&self) -> Vec<f64> {
        self.comps.iter().map(|c| mean(c)).collect()
    }
}

pub fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

pub fn max_abs(v: &[f64]) -> f64 {
    v.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
}
