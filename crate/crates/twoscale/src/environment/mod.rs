//! Stationary space-time periodic random environments: a uniformly elliptic
//! diffusion field `a`, a skew-symmetric stream field `s`, and a spatially
//! homogeneous mean-zero drift `bbar(t)`. The full drift is
//! `b = div(s) + bbar` with the row convention `(div s)_i = Σ_j ∂_j s_ij`.

mod bbar;
mod density;

pub use bbar::{BbarModel, BbarSpec, DriftSeries};
pub use density::SpectralDensity;

use crate::grid::{max_abs, GridError, MatrixField, SpaceTimeGrid};
use crate::linalg::sym_eigenvalues;
use crate::spectral::SpatialSpectrum;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(
        "beta_decay = {0} must exceed 2: a stationary square-integrable stream matrix needs drift \
         correlations decaying faster than |x|^-2"
    )]
    DecayTooSlow(f64),
    #[error("invalid spectral parameters: {0}")]
    InvalidParams(String),
    #[error("invalid drift model: {0}")]
    InvalidDrift(String),
    #[error("ellipticity violated at node {node}: eigenvalues in [{min}, {max}] outside [{lambda}, {big_lambda}]")]
    Ellipticity { node: usize, min: f64, max: f64, lambda: f64, big_lambda: f64 },
    #[error("stream field is not skew-symmetric at node {0}")]
    NotSkew(usize),
    #[error("field shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SpectralParams {
    pub ell_x: f64,
    pub ell_t: f64,
    pub beta_decay: f64,
    pub sigma_s: f64,
    pub sigma_a: f64,
    pub lambda: f64,
    #[serde(rename = "Lambda")]
    pub big_lambda: f64,
}

impl Default for SpectralParams {
    fn default() -> Self {
        Self { ell_x: 0.15, ell_t: 0.15, beta_decay: 3.0, sigma_s: 0.5, sigma_a: 0.5, lambda: 1.0, big_lambda: 2.0 }
    }
}

impl SpectralParams {
    pub fn validate(&self) -> Result<(), EnvError> {
        if !(self.beta_decay > 2.0) {
            return Err(EnvError::DecayTooSlow(self.beta_decay));
        }
        let positive = [("ell_x", self.ell_x), ("ell_t", self.ell_t), ("lambda", self.lambda)];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(EnvError::InvalidParams(format!("{name} must be finite and positive, got {v}")));
            }
        }
        for (name, v) in [("sigma_s", self.sigma_s), ("sigma_a", self.sigma_a)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(EnvError::InvalidParams(format!("{name} must be non-negative, got {v}")));
            }
        }
        if !(self.big_lambda.is_finite() && self.big_lambda >= self.lambda) {
            return Err(EnvError::InvalidParams(format!(
                "need 0 < lambda <= Lambda, got lambda = {}, Lambda = {}",
                self.lambda, self.big_lambda
            )));
        }
        Ok(())
    }
}

/// One sampled environment on the space-time torus.
#[derive(Debug, Clone, PartialEq)]
pub struct EnvironmentRealization {
    pub grid: SpaceTimeGrid,
    pub params: SpectralParams,
    /// Symmetric diffusion matrix per node.
    pub a: MatrixField,
    /// Skew-symmetric stream matrix per node.
    pub s: MatrixField,
    /// Homogeneous drift; built environments carry a periodic series on the
    /// temporal nodes, experiments may substitute a longer open series.
    pub bbar: DriftSeries,
    pub seed: u64,
}

/// Which stored field `eval_rescaled` reads.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldSelector {
    A,
    S,
    Bbar,
}

/// Mean-zero stationary Gaussian field on the grid with pointwise variance
/// `SpectralDensity::total()` (just under 1), deterministic in (seed, channel_tag).
pub fn sample_gaussian_field(
    grid: &SpaceTimeGrid,
    params: &SpectralParams,
    seed: u64,
    channel_tag: &str,
) -> Result<Vec<f64>, EnvError> {
    Ok(SpectralDensity::new(grid, params)?.sample(seed, channel_tag))
}

/// Sample an environment. `a = λI + MᵗM` with bounded entries
/// `M_ij = c·σ_a·g/√(1+g²)`, where c ≤ 1 is a global factor keeping
/// `‖a‖ ≤ Λ`; `s = σ_s (G − Gᵗ)/√2` from independent channels G.
pub fn build_environment(
    grid: &SpaceTimeGrid,
    params: &SpectralParams,
    seed: u64,
    bbar: &BbarSpec,
) -> Result<EnvironmentRealization, EnvError> {
    let density = SpectralDensity::new(grid, params)?;
    let d = grid.d;
    let len = grid.len();

    let mut a = MatrixField::zeros(d, len);
    for i in 0..d {
        a.comp_mut(i, i).iter_mut().for_each(|v| *v = params.lambda);
    }
    if params.sigma_a > 0.0 {
        let bound = (d * d) as f64 * params.sigma_a * params.sigma_a;
        let c = ((params.big_lambda - params.lambda) / bound).min(1.0).sqrt();
        let m: Vec<Vec<f64>> = (0..d * d)
            .map(|ij| {
                let g = density.sample(seed, &format!("a:{}:{}", ij / d, ij % d));
                g.into_iter().map(|x| c * params.sigma_a * x / (1.0 + x * x).sqrt()).collect()
            })
            .collect();
        for i in 0..d {
            for j in i..d {
                let mut v = a.comp(i, j).to_vec();
                for k in 0..d {
                    let (mki, mkj) = (&m[k * d + i], &m[k * d + j]);
                    for (n, vn) in v.iter_mut().enumerate() {
                        *vn += mki[n] * mkj[n];
                    }
                }
                *a.comp_mut(j, i) = v.clone();
                *a.comp_mut(i, j) = v;
            }
        }
    }

    let mut s = MatrixField::zeros(d, len);
    if params.sigma_s > 0.0 {
        let g: Vec<Vec<f64>> = (0..d * d).map(|ij| density.sample(seed, &format!("s:{}:{}", ij / d, ij % d))).collect();
        let scale = params.sigma_s / 2f64.sqrt();
        for i in 0..d {
            for j in i + 1..d {
                let v: Vec<f64> = g[i * d + j].iter().zip(&g[j * d + i]).map(|(x, y)| scale * (x - y)).collect();
                *s.comp_mut(j, i) = v.iter().map(|x| -x).collect();
                *s.comp_mut(i, j) = v;
            }
        }
    }

    let bbar = bbar.sample_torus(d, grid.n_t, grid.period, seed)?;
    let env = EnvironmentRealization { grid: *grid, params: *params, a, s, bbar, seed };
    env.audit_ellipticity()?;
    Ok(env)
}

impl EnvironmentRealization {
    /// Assemble from explicit fields, checking every structural invariant.
    pub fn from_fields(
        grid: SpaceTimeGrid,
        params: SpectralParams,
        a: MatrixField,
        s: MatrixField,
        bbar: DriftSeries,
        seed: u64,
    ) -> Result<Self, EnvError> {
        grid.validate()?;
        let len = grid.len();
        let d = grid.d;
        if a.d != d || s.d != d || a.node_len() != len || s.node_len() != len {
            return Err(EnvError::Shape("a and s must be d×d fields on the grid".into()));
        }
        if bbar.d != d {
            return Err(EnvError::Shape("bbar dimension differs from grid".into()));
        }
        for n in 0..len {
            for i in 0..d {
                for j in 0..d {
                    if s.comp(i, j)[n] != -s.comp(j, i)[n] {
                        return Err(EnvError::NotSkew(n));
                    }
                    if a.comp(i, j)[n] != a.comp(j, i)[n] {
                        return Err(EnvError::Shape(format!("a is not symmetric at node {n}")));
                    }
                }
            }
        }
        let env = Self { grid, params, a, s, bbar, seed };
        env.audit_ellipticity()?;
        Ok(env)
    }

    /// Smallest and largest eigenvalue of a over all nodes.
    pub fn ellipticity_range(&self) -> (f64, f64) {
        let d = self.grid.d;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        let mut m = vec![0.0; d * d];
        for n in 0..self.grid.len() {
            for (c, v) in self.a.comps.iter().zip(m.iter_mut()) {
                *v = c[n];
            }
            let ev = sym_eigenvalues(d, &m);
            lo = lo.min(ev[0]);
            hi = hi.max(ev[d - 1]);
        }
        (lo, hi)
    }

    /// Pointwise check of λ|ξ|² ≤ ⟨aξ,ξ⟩ and |aξ| ≤ Λ|ξ| via eigenvalues.
    pub fn audit_ellipticity(&self) -> Result<(), EnvError> {
        let d = self.grid.d;
        let (lambda, big) = (self.params.lambda, self.params.big_lambda);
        let slack = 1e-12 * big;
        let mut m = vec![0.0; d * d];
        for n in 0..self.grid.len() {
            for (c, v) in self.a.comps.iter().zip(m.iter_mut()) {
                *v = c[n];
            }
            let ev = sym_eigenvalues(d, &m);
            if ev[0] < lambda - slack || ev[d - 1] > big + slack {
                return Err(EnvError::Ellipticity { node: n, min: ev[0], max: ev[d - 1], lambda, big_lambda: big });
            }
        }
        Ok(())
    }

    /// b̄ at the temporal grid nodes, `out[t * d + i]`.
    pub fn bbar_on_nodes(&self) -> Vec<f64> {
        let d = self.grid.d;
        let k = self.grid.k();
        let mut out = vec![0.0; self.grid.n_t * d];
        for t in 0..self.grid.n_t {
            let v = self.bbar.eval(t as f64 * k).unwrap_or_else(|| vec![0.0; d]);
            out[t * d..(t + 1) * d].copy_from_slice(&v);
        }
        out
    }

    /// Replace the homogeneous drift.
    pub fn with_bbar(mut self, bbar: DriftSeries) -> Self {
        self.bbar = bbar;
        self
    }

    /// True when a and s do not vary over the torus.
    pub fn coefficients_constant(&self) -> bool {
        self.a.comps.iter().chain(&self.s.comps).all(|c| c.iter().all(|&v| v == c[0]))
    }
}

/// Spectral divergence Σ_j ∂_j F_j of a vector field, slice by slice.
pub fn spatial_divergence(grid: &SpaceTimeGrid, comps: &[Vec<f64>]) -> Vec<f64> {
    let spec = SpatialSpectrum::new(grid.d, grid.n_x, grid.length);
    let ns = grid.slice_len();
    let mut out = vec![0.0; grid.len()];
    for t in 0..grid.n_t {
        let slices: Vec<&[f64]> = comps.iter().map(|c| &c[t * ns..(t + 1) * ns]).collect();
        out[t * ns..(t + 1) * ns].copy_from_slice(&spec.divergence(&slices));
    }
    out
}

/// Row divergence (div s)_i = Σ_j ∂_j s_ij.
pub fn row_divergence(grid: &SpaceTimeGrid, s: &MatrixField) -> Vec<Vec<f64>> {
    let d = grid.d;
    (0..d)
        .map(|i| {
            let row: Vec<Vec<f64>> = (0..d).map(|j| s.comp(i, j).to_vec()).collect();
            spatial_divergence(grid, &row)
        })
        .collect()
}

/// The divergence-free drift b = div(s) + b̄(t).
pub fn drift_of(env: &EnvironmentRealization) -> Vec<Vec<f64>> {
    let grid = &env.grid;
    let d = grid.d;
    let ns = grid.slice_len();
    let bbar = env.bbar_on_nodes();
    let mut b = row_divergence(grid, &env.s);
    for (i, bi) in b.iter_mut().enumerate() {
        for t in 0..grid.n_t {
            let add = bbar[t * d + i];
            for v in &mut bi[t * ns..(t + 1) * ns] {
                *v += add;
            }
        }
    }
    b
}

/// Value of a stored field at the rescaled point (x/ε mod L, t/ε² mod T)
/// by periodic multilinear interpolation. Matrices are returned row-major.
pub fn eval_rescaled(env: &EnvironmentRealization, eps: f64, x: &[f64], t: f64, which: FieldSelector) -> Vec<f64> {
    assert!(eps > 0.0, "eps must be positive");
    let grid = &env.grid;
    let d = grid.d;
    let tau = t / (eps * eps);
    if which == FieldSelector::Bbar {
        return env.bbar.eval(tau).unwrap_or_else(|| vec![0.0; d]);
    }
    let field = if which == FieldSelector::A { &env.a } else { &env.s };
    let y: Vec<f64> = x.iter().map(|xi| xi / eps).collect();
    let mut out = vec![0.0; d * d];
    grid.for_each_corner(&y, tau, |idx, w| {
        for (o, c) in out.iter_mut().zip(&field.comps) {
            *o += w * c[idx];
        }
    });
    out
}

/// Largest discrete divergence of the drift, relative to its magnitude.
pub fn relative_divergence(grid: &SpaceTimeGrid, b: &[Vec<f64>]) -> f64 {
    let div = spatial_divergence(grid, b);
    let scale = b.iter().map(|c| max_abs(c)).fold(0.0, f64::max);
    if scale == 0.0 {
        0.0
    } else {
        max_abs(&div) / scale
    }
}
