//! δ-regularized corrector cell problems on the space-time torus and the
//! effective matrices they define.
//!
//! Forward problem, for a direction ξ:
//!
//! ```text
//! δφ + ∂_tφ − ∇·(a+s)∇φ − b̄·∇φ = ∇·(a+s)ξ
//! ```
//!
//! Transpose problem: the exact discrete adjoint of the forward operator,
//!
//! ```text
//! δφ − ∂_tφ − ∇·(a−s)∇φ + b̄·∇φ = ∇·(a−s)ξ
//! ```
//!
//! Space is discretized spectrally, time by the centered periodic difference.
//! Unknowns carry no spatial zero-mode or pure-Nyquist content, which fixes the
//! additive constant (zero torus mean) and makes the system nonsingular even
//! at δ = 0.

use crate::environment::EnvironmentRealization;
use crate::grid::{mean, MatrixField, SpaceTimeGrid};
use crate::krylov::{gmres, GmresOptions};
use crate::linalg::SquareMatrix;
use crate::path_clt::{integrate_path, PathError};
use crate::spectral::{FftNd, SpatialSpectrum};
use rayon::prelude::*;
use rustfft::num_complex::Complex64;
use serde::Serialize;
use std::f64::consts::PI;
use thiserror::Error;

pub const DEFAULT_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CorrectorError {
    #[error("Krylov solver did not reach tolerance after {iterations} iterations (residual history {history:?})")]
    NonConvergence { iterations: usize, history: Vec<f64> },
    #[error("ill-posed corrector problem: {0}")]
    IllPosed(String),
    #[error("lambda_min(sym a_bar) = {lambda_min} below the ellipticity constant {lambda}")]
    EllipticityViolation { lambda_min: f64, lambda: f64 },
    #[error("delta list must be strictly decreasing, positive, with at least 3 entries")]
    DeltaList,
    #[error(transparent)]
    Path(#[from] PathError),
}

#[derive(Debug, Clone)]
pub struct CorrectorProblem<'a> {
    pub env: &'a EnvironmentRealization,
    pub direction: Vec<f64>,
    pub delta: f64,
    pub transpose: bool,
}

impl<'a> CorrectorProblem<'a> {
    pub fn new(env: &'a EnvironmentRealization, direction: Vec<f64>, delta: f64, transpose: bool) -> Self {
        Self { env, direction, delta, transpose }
    }

    pub fn unit(env: &'a EnvironmentRealization, i: usize, delta: f64, transpose: bool) -> Self {
        let mut e = vec![0.0; env.grid.d];
        e[i] = 1.0;
        Self::new(env, e, delta, transpose)
    }
}

#[derive(Debug, Clone)]
pub struct SolveOptions {
    pub tol: f64,
    pub restart: usize,
    pub max_iter: usize,
    /// Warm start, e.g. the solution at a neighboring δ.
    pub initial: Option<Vec<f64>>,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self { tol: DEFAULT_TOLERANCE, restart: 40, max_iter: 3000, initial: None }
    }
}

impl SolveOptions {
    pub fn with_tol(tol: f64) -> Self {
        Self { tol, ..Self::default() }
    }
}

#[derive(Debug, Clone)]
pub struct CorrectorField {
    pub phi: Vec<f64>,
    pub grad_phi: Vec<Vec<f64>>,
    /// (a ± s)(∇φ + ξ), sign by `transpose`.
    pub flux: Vec<Vec<f64>>,
    /// Relative ℓ² residual of the discrete system.
    pub residual_norm: f64,
    pub delta: f64,
    pub direction: Vec<f64>,
    pub transpose: bool,
    pub iterations: usize,
}

/// Discrete cell operator with frozen coefficients.
struct CellOperator {
    grid: SpaceTimeGrid,
    spec: SpatialSpectrum,
    /// a + s (forward) or a − s (transpose), row-major components.
    coef: MatrixField,
    time_sign: f64,
    /// b̄ on temporal nodes times the transport sign, `[t * d + i]`.
    drift: Vec<f64>,
    delta: f64,
}

impl CellOperator {
    fn new(env: &EnvironmentRealization, delta: f64, transpose: bool) -> Self {
        let grid = env.grid;
        let sign = if transpose { -1.0 } else { 1.0 };
        let coef = env.a.combine(&env.s, sign);
        let drift = env.bbar_on_nodes().into_iter().map(|v| -sign * v).collect();
        Self { grid, spec: SpatialSpectrum::new(grid.d, grid.n_x, grid.length), coef, time_sign: sign, drift, delta }
    }

    fn slice(&self, t: usize) -> std::ops::Range<usize> {
        let ns = self.grid.slice_len();
        t * ns..(t + 1) * ns
    }

    /// −∇·(C∇φ) + drift·∇φ on one slice.
    fn spatial_part(&self, t: usize, phi: &[f64]) -> Vec<f64> {
        let d = self.grid.d;
        let r = self.slice(t);
        let grad = self.spec.gradient(phi);
        let flux: Vec<Vec<f64>> = (0..d)
            .map(|i| {
                let mut q = vec![0.0; phi.len()];
                for (j, g) in grad.iter().enumerate() {
                    let c = &self.coef.comp(i, j)[r.clone()];
                    q.iter_mut().zip(c).zip(g).for_each(|((qi, ci), gi)| *qi += ci * gi);
                }
                q
            })
            .collect();
        let refs: Vec<&[f64]> = flux.iter().map(Vec::as_slice).collect();
        let mut out = self.spec.divergence(&refs);
        out.iter_mut().for_each(|v| *v = -*v);
        for (j, g) in grad.iter().enumerate() {
            let bj = self.drift[t * d + j];
            if bj != 0.0 {
                out.iter_mut().zip(g).for_each(|(o, gi)| *o += bj * gi);
            }
        }
        out
    }

    fn apply(&self, phi: &[f64]) -> Vec<f64> {
        let nt = self.grid.n_t;
        let inv2k = self.time_sign / (2.0 * self.grid.k());
        let slices: Vec<Vec<f64>> = (0..nt)
            .into_par_iter()
            .map(|t| {
                let mut out = self.spatial_part(t, &phi[self.slice(t)]);
                let next = &phi[self.slice((t + 1) % nt)];
                let prev = &phi[self.slice((t + nt - 1) % nt)];
                let cur = &phi[self.slice(t)];
                for (p, o) in out.iter_mut().enumerate() {
                    *o += self.delta * cur[p] + inv2k * (next[p] - prev[p]);
                }
                out
            })
            .collect();
        slices.concat()
    }

    /// ∇·(Cξ).
    fn rhs(&self, xi: &[f64]) -> Vec<f64> {
        let d = self.grid.d;
        let slices: Vec<Vec<f64>> = (0..self.grid.n_t)
            .into_par_iter()
            .map(|t| {
                let r = self.slice(t);
                let q: Vec<Vec<f64>> = (0..d)
                    .map(|i| {
                        let mut v = vec![0.0; r.len()];
                        for (j, &x) in xi.iter().enumerate() {
                            if x != 0.0 {
                                v.iter_mut().zip(&self.coef.comp(i, j)[r.clone()]).for_each(|(vi, c)| *vi += x * c);
                            }
                        }
                        v
                    })
                    .collect();
                let refs: Vec<&[f64]> = q.iter().map(Vec::as_slice).collect();
                self.spec.divergence(&refs)
            })
            .collect();
        slices.concat()
    }
}

/// Inverse of the constant-coefficient symbol δ ± i·sin(ωk)/k + kᵀ⟨a⟩k,
/// applied by space-time FFT. Null spatial modes are mapped to zero.
struct SpectralPreconditioner {
    fft: FftNd,
    inverse_symbol: Vec<Complex64>,
}

impl SpectralPreconditioner {
    fn new(grid: &SpaceTimeGrid, spec: &SpatialSpectrum, mean_a: &[f64], delta: f64, time_sign: f64) -> Self {
        let fft = FftNd::new(&grid.space_time_dims());
        let ns = grid.slice_len();
        let nt = grid.n_t;
        let k = grid.k();
        let mut inverse_symbol = vec![Complex64::default(); grid.len()];
        for mt in 0..nt {
            let time = time_sign * (2.0 * PI * mt as f64 / nt as f64).sin() / k;
            for p in 0..ns {
                if spec.is_null_mode(p) {
                    continue;
                }
                let sym = Complex64::new(delta + spec.quadratic(p, mean_a), time);
                inverse_symbol[mt * ns + p] = sym.inv();
            }
        }
        Self { fft, inverse_symbol }
    }

    fn apply(&self, v: &[f64]) -> Vec<f64> {
        let mut buf: Vec<Complex64> = v.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.forward(&mut buf);
        buf.iter_mut().zip(&self.inverse_symbol).for_each(|(z, s)| *z *= s);
        self.fft.inverse(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }
}

fn gradient_field(grid: &SpaceTimeGrid, spec: &SpatialSpectrum, phi: &[f64]) -> Vec<Vec<f64>> {
    let ns = grid.slice_len();
    let per_slice: Vec<Vec<Vec<f64>>> =
        (0..grid.n_t).into_par_iter().map(|t| spec.gradient(&phi[t * ns..(t + 1) * ns])).collect();
    (0..grid.d).map(|j| per_slice.iter().flat_map(|s| s[j].iter().copied()).collect()).collect()
}

/// Solve one corrector problem to relative residual `opts.tol`.
pub fn solve_corrector(problem: &CorrectorProblem<'_>, opts: &SolveOptions) -> Result<CorrectorField, CorrectorError> {
    let env = problem.env;
    let grid = env.grid;
    let d = grid.d;
    if !(problem.delta >= 0.0 && problem.delta.is_finite()) {
        return Err(CorrectorError::IllPosed(format!("delta must be non-negative, got {}", problem.delta)));
    }
    if problem.direction.len() != d || problem.direction.iter().all(|&x| x == 0.0) {
        return Err(CorrectorError::IllPosed("direction must be a nonzero d-vector".into()));
    }
    let op = CellOperator::new(env, problem.delta, problem.transpose);
    let mean_a = env.a.mean();
    let pre = SpectralPreconditioner::new(&grid, &op.spec, &mean_a, problem.delta, op.time_sign);
    let rhs = op.rhs(&problem.direction);
    let gopts = GmresOptions { restart: opts.restart, max_iter: opts.max_iter, rel_tol: opts.tol };
    let out = gmres(|v| op.apply(v), |v| pre.apply(v), &rhs, opts.initial.clone(), gopts);
    if !out.converged {
        return Err(CorrectorError::NonConvergence { iterations: out.iterations, history: out.history });
    }
    let phi = out.x;
    let grad_phi = gradient_field(&grid, &op.spec, &phi);
    let flux = (0..d)
        .map(|i| {
            let mut q = vec![0.0; grid.len()];
            for j in 0..d {
                let c = op.coef.comp(i, j);
                let xj = problem.direction[j];
                q.iter_mut().zip(c).zip(&grad_phi[j]).for_each(|((qi, ci), gj)| *qi += ci * (gj + xj));
            }
            q
        })
        .collect();
    Ok(CorrectorField {
        phi,
        grad_phi,
        flux,
        residual_norm: *out.history.last().unwrap_or(&0.0),
        delta: problem.delta,
        direction: problem.direction.clone(),
        transpose: problem.transpose,
        iterations: out.iterations,
    })
}

/// Normalized energy defect |⟨a∇φ·∇φ⟩ + ⟨F·∇φ⟩| / (⟨|∇φ|²⟩ + |ξ|²) with
/// F = (a ± s)ξ. The discrete system gives exactly −δ⟨φ²⟩ for the
/// numerator, so the defect vanishes with δ up to solver tolerance.
pub fn energy_check(cf: &CorrectorField, env: &EnvironmentRealization) -> f64 {
    let d = env.grid.d;
    let sign = if cf.transpose { -1.0 } else { 1.0 };
    let n = env.grid.len();
    let mut acc = 0.0;
    let mut grad_sq = 0.0;
    for node in 0..n {
        for i in 0..d {
            let gi = cf.grad_phi[i][node];
            grad_sq += gi * gi;
            for j in 0..d {
                let aij = env.a.comp(i, j)[node];
                let sij = env.s.comp(i, j)[node];
                let gj = cf.grad_phi[j][node];
                acc += aij * gj * gi + (aij + sign * sij) * cf.direction[j] * gi;
            }
        }
    }
    let xi_sq: f64 = cf.direction.iter().map(|x| x * x).sum();
    (acc / n as f64).abs() / (grad_sq / n as f64 + xi_sq)
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectiveMatrix {
    pub a_bar: SquareMatrix,
    pub m_bar: SquareMatrix,
    pub lambda_min: f64,
    pub upper_cert: f64,
    pub delta: f64,
    pub seed: u64,
    pub grid: SpaceTimeGrid,
    /// Relative residuals of the d forward then d transpose solves.
    pub residuals: Vec<f64>,
    pub duality_gap: f64,
}

impl EffectiveMatrix {
    pub fn relative_duality_gap(&self) -> f64 {
        let scale = self.a_bar.max_abs();
        if scale == 0.0 {
            0.0
        } else {
            self.duality_gap / scale
        }
    }
}

/// ā and m̄ together with the forward and transpose correctors.
#[derive(Debug, Clone)]
pub struct EffectiveSolve {
    pub matrix: EffectiveMatrix,
    pub forward: Vec<CorrectorField>,
    pub transpose: Vec<CorrectorField>,
}

fn flux_average(fields: &[CorrectorField], d: usize) -> SquareMatrix {
    let mut m = SquareMatrix::zeros(d);
    for (i, cf) in fields.iter().enumerate() {
        for j in 0..d {
            m.set(j, i, mean(&cf.flux[j]));
        }
    }
    m
}

/// Solve the 2d unit-direction problems and average fluxes.
pub fn effective_matrix_with_correctors(
    env: &EnvironmentRealization,
    delta: f64,
    opts: &SolveOptions,
) -> Result<EffectiveSolve, CorrectorError> {
    effective_with_warm_start(env, delta, opts, None)
}

pub fn effective_matrix(env: &EnvironmentRealization, delta: f64, tol: f64) -> Result<EffectiveMatrix, CorrectorError> {
    Ok(effective_matrix_with_correctors(env, delta, &SolveOptions::with_tol(tol))?.matrix)
}

#[derive(Debug, Clone, Serialize)]
pub struct DeltaExtrapolation {
    /// Extrapolated ā with m̄ = āᵗ, certificate from the finest δ.
    pub matrix: EffectiveMatrix,
    pub deltas: Vec<f64>,
    pub raw: Vec<SquareMatrix>,
    pub warnings: Vec<String>,
}

/// Polynomial extrapolation of ā^δ to δ = 0 through all listed δ (Neville).
pub fn delta_extrapolation(
    env: &EnvironmentRealization,
    delta_list: &[f64],
    tol: f64,
) -> Result<DeltaExtrapolation, CorrectorError> {
    if delta_list.len() < 3 || delta_list.iter().any(|&x| !(x > 0.0)) || delta_list.windows(2).any(|w| w[1] >= w[0]) {
        return Err(CorrectorError::DeltaList);
    }
    let mut raw = Vec::new();
    let mut finest = None;
    let mut warm: Option<Vec<Vec<f64>>> = None;
    for &delta in delta_list {
        let solved = effective_with_warm_start(env, delta, &SolveOptions::with_tol(tol), warm.as_deref())?;
        warm = Some(solved.forward.iter().chain(&solved.transpose).map(|cf| cf.phi.clone()).collect());
        raw.push(solved.matrix.a_bar.clone());
        finest = Some(solved.matrix);
    }
    let mut warnings = Vec::new();
    for i in 2..raw.len() {
        let prev = raw[i - 1].max_abs_diff(&raw[i - 2]);
        let next = raw[i].max_abs_diff(&raw[i - 1]);
        if next > prev && next > 1e-12 * raw[i].max_abs() {
            warnings.push(format!(
                "NonMonotone: |a(delta_{i}) - a(delta_{})| = {next:e} exceeds the previous difference {prev:e}",
                i - 1
            ));
        }
    }
    let d = env.grid.d;
    let mut extrap = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let ys: Vec<f64> = raw.iter().map(|m| m.get(i, j)).collect();
            extrap.set(i, j, neville_at_zero(delta_list, &ys));
        }
    }
    let mut matrix = finest.expect("non-empty delta list");
    matrix.lambda_min = extrap.symmetric_part().sym_eigenvalues()[0];
    matrix.m_bar = extrap.transpose();
    matrix.a_bar = extrap;
    matrix.duality_gap = 0.0;
    matrix.delta = 0.0;
    Ok(DeltaExtrapolation { matrix, deltas: delta_list.to_vec(), raw, warnings })
}

fn effective_with_warm_start(
    env: &EnvironmentRealization,
    delta: f64,
    opts: &SolveOptions,
    warm: Option<&[Vec<f64>]>,
) -> Result<EffectiveSolve, CorrectorError> {
    if !(delta > 0.0) {
        return Err(CorrectorError::IllPosed(format!("effective_matrix needs delta > 0, got {delta}")));
    }
    let d = env.grid.d;
    let solve = |k: usize| {
        let initial = warm.map(|w| w[k].clone()).or_else(|| opts.initial.clone());
        let opts = SolveOptions { initial, ..opts.clone() };
        solve_corrector(&CorrectorProblem::unit(env, k % d, delta, k >= d), &opts)
    };
    let fields: Result<Vec<CorrectorField>, CorrectorError> = (0..2 * d).into_par_iter().map(solve).collect();
    let mut fields = fields?;
    let transpose = fields.split_off(d);
    let forward = fields;
    let a_bar = flux_average(&forward, d);
    let m_bar = flux_average(&transpose, d);
    let lambda_min = a_bar.symmetric_part().sym_eigenvalues()[0];
    let n = env.grid.len() as f64;
    let s_norm = env.s.comps.iter().flat_map(|c| c.iter()).map(|v| v * v).sum::<f64>() / n;
    let grad_norm: f64 =
        forward.iter().map(|cf| cf.grad_phi.iter().flat_map(|c| c.iter()).map(|v| v * v).sum::<f64>() / n).sum();
    let duality_gap = a_bar.max_abs_diff(&m_bar.transpose());
    let matrix = EffectiveMatrix {
        upper_cert: (env.params.big_lambda + s_norm.sqrt()) * (1.0 + grad_norm.sqrt()),
        residuals: forward.iter().chain(&transpose).map(|cf| cf.residual_norm).collect(),
        a_bar,
        m_bar,
        lambda_min,
        delta,
        seed: env.seed,
        grid: env.grid,
        duality_gap,
    };
    if lambda_min < env.params.lambda - 10.0 * opts.tol {
        return Err(CorrectorError::EllipticityViolation { lambda_min, lambda: env.params.lambda });
    }
    Ok(EffectiveSolve { matrix, forward, transpose })
}

/// Value at x = 0 of the interpolating polynomial through (xs, ys).
pub fn neville_at_zero(xs: &[f64], ys: &[f64]) -> f64 {
    let mut p = ys.to_vec();
    let n = xs.len();
    for m in 1..n {
        for i in 0..n - m {
            p[i] = (xs[i + m] * p[i] - xs[i] * p[i + 1]) / (xs[i + m] - xs[i]);
        }
    }
    p[0]
}

#[derive(Debug, Clone, Serialize)]
pub struct SublinearityRow {
    pub eps: f64,
    pub forward: f64,
    pub transpose: Option<f64>,
}

/// Mean square oscillation of the rescaled, transported corrector
/// εφ((x + w^ε(t))/ε, t/ε²) over the cylinder [0, R]^d × [0, R²], sampled on
/// a fixed `samples^d × samples` midpoint lattice. Both forward and transpose
/// correctors use the same ε-scaling here.
pub fn sublinearity_diagnostic(
    env: &EnvironmentRealization,
    forward: &CorrectorField,
    transpose: Option<&CorrectorField>,
    eps_list: &[f64],
    radius: f64,
    samples: usize,
) -> Result<Vec<SublinearityRow>, CorrectorError> {
    let grid = env.grid;
    let d = grid.d;
    let horizon = radius * radius;
    let mut rows = Vec::with_capacity(eps_list.len());
    for &eps in eps_list {
        let dt = (eps * eps * env.bbar.dt).min(horizon / samples as f64);
        let path = integrate_path(&env.bbar, eps, horizon, dt)?;
        let eval = |cf: &CorrectorField| {
            let mut vals = Vec::with_capacity(samples.pow(d as u32 + 1));
            for it in 0..samples {
                let t = (it as f64 + 0.5) * horizon / samples as f64;
                let w = path.eval(t);
                for flat in 0..samples.pow(d as u32) {
                    let mut rest = flat;
                    let y: Vec<f64> = (0..d)
                        .map(|j| {
                            let c = rest % samples;
                            rest /= samples;
                            ((c as f64 + 0.5) * radius / samples as f64 + w[j]) / eps
                        })
                        .collect();
                    vals.push(eps * grid.interpolate(&cf.phi, &y, t / (eps * eps)));
                }
            }
            let m = mean(&vals);
            vals.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / vals.len() as f64
        };
        rows.push(SublinearityRow { eps, forward: eval(forward), transpose: transpose.map(eval) });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn neville_recovers_polynomials() {
        let xs = [1e-1, 1e-2, 1e-3];
        let ys: Vec<f64> = xs.iter().map(|x| 2.0 + 3.0 * x - x * x).collect();
        assert!((neville_at_zero(&xs, &ys) - 2.0).abs() < 1e-12);
    }
}
