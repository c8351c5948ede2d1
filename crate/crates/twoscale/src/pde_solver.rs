//! Time stepping for the ε-scale equation
//!
//! ```text
//! ∂_tρ = ∇·(a^ε + s^ε)∇ρ + ε⁻¹ b̄(t/ε²)·∇ρ + f,    ρ(·,0) = g,
//! ```
//!
//! in its direct form, in the transported frame ρ̃(y,t) = ρ(y − w^ε(t), t)
//! where the singular term disappears, and for the limit equation through
//! the same shift with the path replaced by ΣB_t.
//!
//! All solves run on a periodic simulation box with spectral derivatives and
//! 3/2-rule dealiased flux products.
//! Diffusion is implicit midpoint (Crank-Nicolson with coefficients frozen at
//! the half step); the direct solver treats transport explicitly with AB2.

use crate::environment::EnvironmentRealization;
use crate::grid::{check_positive, check_resolution, max_abs, GridError, MatrixField};
use crate::krylov::{gmres, GmresOptions};
use crate::linalg::SquareMatrix;
use crate::path_clt::{integrate_path, DriftPath, PathError};
use crate::rng;
use crate::spectral::{mode_number, FftNd, SpatialSpectrum};
use rustfft::num_complex::Complex64;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Explicit transport needs dt ≤ CFL · H · ε / max|b̄|.
pub const CFL: f64 = 0.5;
/// Allowed overshoot of the comparison bound before declaring blow-up.
pub const BLOWUP_MARGIN: f64 = 1.05;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PdeError {
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("time step {dt} violates the transport constraint dt <= {limit}")]
    Stability { dt: f64, limit: f64 },
    #[error("solution blew up at t = {time}: sup norm {linf} exceeds {bound}")]
    BlowUp { time: f64, linf: f64, bound: f64 },
    #[error("effective matrix is not elliptic: smallest eigenvalue of its symmetric part is {0}")]
    Ellipticity(f64),
    #[error("implicit diffusion solve failed to converge at step {step}")]
    NonConvergence { step: usize },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Periodic simulation box [0, length)^d with m points per axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimBox {
    pub d: usize,
    pub m: usize,
    pub length: f64,
}

impl SimBox {
    pub fn new(d: usize, m: usize, length: f64) -> Result<Self, PdeError> {
        let b = Self { d, m, length };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        if !(2..=3).contains(&self.d) {
            return Err(GridError::Dimension(self.d).into());
        }
        check_resolution("simulation", self.m)?;
        check_positive("simulation box side", self.length)?;
        Ok(())
    }

    pub fn spacing(&self) -> f64 {
        self.length / self.m as f64
    }

    pub fn len(&self) -> usize {
        self.m.pow(self.d as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cell_volume(&self) -> f64 {
        self.spacing().powi(self.d as i32)
    }

    pub fn coords(&self, mut p: usize) -> Vec<f64> {
        let mut x = vec![0.0; self.d];
        for j in (0..self.d).rev() {
            x[j] = (p % self.m) as f64 * self.spacing();
            p /= self.m;
        }
        x
    }

    pub fn center(&self) -> Vec<f64> {
        vec![0.5 * self.length; self.d]
    }

    /// Quadrature of a field over the box.
    pub fn integrate(&self, u: &[f64]) -> f64 {
        u.iter().sum::<f64>() * self.cell_volume()
    }

    pub fn l2_sq(&self, u: &[f64]) -> f64 {
        u.iter().map(|x| x * x).sum::<f64>() * self.cell_volume()
    }

    /// Share of ∫|u| lying within `width` of the box boundary.
    pub fn boundary_mass_fraction(&self, u: &[f64], width: f64) -> f64 {
        let total: f64 = u.iter().map(|v| v.abs()).sum();
        if total == 0.0 {
            return 0.0;
        }
        let edge: f64 = u
            .iter()
            .enumerate()
            .filter(|(p, _)| self.coords(*p).iter().any(|&x| x < width || x > self.length - width))
            .map(|(_, v)| v.abs())
            .sum();
        edge / total
    }
}

/// Smooth compactly concentrated profiles used for initial data, sources
/// and probes. Offsets are measured from the box center.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "preset", rename_all = "kebab-case")]
pub enum Preset {
    GaussianBump {
        #[serde(default)]
        offset: Vec<f64>,
        width: f64,
        amplitude: f64,
    },
    /// Two Gaussians of width `width` at ±separation/2 along the first axis.
    TwoBumps { separation: f64, width: f64, amplitude: f64 },
    /// Indicator of a ball of the given radius smoothed over `mollifier`.
    IndicatorMollified { radius: f64, mollifier: f64, amplitude: f64 },
}

impl Preset {
    pub fn gaussian(width: f64) -> Self {
        Self::GaussianBump { offset: Vec::new(), width, amplitude: 1.0 }
    }

    pub fn label(&self) -> &'static str {
        match self {
            Self::GaussianBump { .. } => "gaussian-bump",
            Self::TwoBumps { .. } => "two-bumps",
            Self::IndicatorMollified { .. } => "indicator-mollified",
        }
    }

    pub fn value(&self, sim: &SimBox, x: &[f64]) -> f64 {
        let c = sim.center();
        let dist2 = |shift: &[f64]| -> f64 {
            x.iter().enumerate().map(|(j, &xj)| (xj - c[j] - shift.get(j).copied().unwrap_or(0.0)).powi(2)).sum()
        };
        match self {
            Self::GaussianBump { offset, width, amplitude } => amplitude * (-0.5 * dist2(offset) / (width * width)).exp(),
            Self::TwoBumps { separation, width, amplitude } => {
                let mut s = vec![0.0; sim.d];
                s[0] = 0.5 * separation;
                let a = (-0.5 * dist2(&s) / (width * width)).exp();
                s[0] = -0.5 * separation;
                let b = (-0.5 * dist2(&s) / (width * width)).exp();
                amplitude * (a + b)
            }
            Self::IndicatorMollified { radius, mollifier, amplitude } => {
                let r = dist2(&[]).sqrt();
                amplitude * 0.5 * (1.0 - ((r - radius) / mollifier).tanh())
            }
        }
    }

    pub fn sample(&self, sim: &SimBox) -> Vec<f64> {
        (0..sim.len()).map(|p| self.value(sim, &sim.coords(p))).collect()
    }

    pub fn validate(&self) -> Result<(), PdeError> {
        let ok = match self {
            Self::GaussianBump { width, .. } | Self::TwoBumps { width, .. } => *width > 0.0,
            Self::IndicatorMollified { radius, mollifier, .. } => *radius > 0.0 && *mollifier > 0.0,
        };
        if ok {
            Ok(())
        } else {
            Err(PdeError::Invalid(format!("preset {} needs positive widths", self.label())))
        }
    }
}

/// Initial datum g, time-independent source f and horizon on a box.
#[derive(Debug, Clone)]
pub struct CauchyData {
    pub sim: SimBox,
    pub g: Vec<f64>,
    pub f: Option<Vec<f64>>,
    pub horizon: f64,
}

impl CauchyData {
    pub fn from_presets(sim: SimBox, g: &Preset, f: Option<&Preset>, horizon: f64) -> Result<Self, PdeError> {
        sim.validate()?;
        g.validate()?;
        if let Some(f) = f {
            f.validate()?;
        }
        Ok(Self { sim, g: g.sample(&sim), f: f.map(|f| f.sample(&sim)), horizon })
    }

    fn validate(&self) -> Result<(), PdeError> {
        self.sim.validate()?;
        let n = self.sim.len();
        if self.g.len() != n || self.f.as_ref().is_some_and(|f| f.len() != n) {
            return Err(PdeError::Invalid("data arrays do not match the simulation box".into()));
        }
        if !(self.horizon > 0.0 && self.horizon.is_finite()) {
            return Err(PdeError::Invalid(format!("horizon must be positive, got {}", self.horizon)));
        }
        Ok(())
    }

    fn f_sup(&self) -> f64 {
        self.f.as_deref().map_or(0.0, max_abs)
    }

    fn f_l2_sq(&self) -> f64 {
        self.f.as_deref().map_or(0.0, |f| self.sim.l2_sq(f))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Formulation {
    Direct,
    Transported,
    Limit,
}

#[derive(Debug, Clone, Serialize)]
pub struct Norms {
    pub max_l2_sq: f64,
    /// ∫₀ᵀ ‖∇ρ‖² dt by the trapezoid rule over steps.
    pub grad_sq_integral: f64,
    pub linf: f64,
    /// c (‖g‖² + ‖f‖²_{L²(box×[0,T])}) with c = (1 + 1/(2λ)) e^T.
    pub energy_bound: f64,
    pub energy_ok: bool,
    /// ‖g‖_∞ + T ‖f‖_∞.
    pub comparison_bound: f64,
    pub mass_initial: f64,
    pub mass_final: f64,
    pub boundary_mass_fraction: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolutionField {
    pub formulation: Formulation,
    pub sim: SimBox,
    pub dt: f64,
    pub times: Vec<f64>,
    /// Recorded fields in the solver's working frame: physical for `Direct`,
    /// shifted (ρ̃) for `Transported` and `Limit`.
    pub snapshots: Vec<Vec<f64>>,
    /// Shift applied at each recorded time; ρ(x) = ρ̃(x + shift).
    pub shifts: Vec<Vec<f64>>,
    pub norms: Norms,
    pub krylov_iterations: usize,
}

impl SolutionField {
    /// Recorded field k in physical coordinates.
    pub fn physical(&self, k: usize) -> Vec<f64> {
        let shift = &self.shifts[k];
        if shift.iter().all(|&s| s == 0.0) {
            return self.snapshots[k].clone();
        }
        SpatialSpectrum::new(self.sim.d, self.sim.m, self.sim.length).translate(&self.snapshots[k], shift)
    }

    /// Recorded field k in the transported frame.
    pub fn transported(&self, k: usize) -> Vec<f64> {
        self.snapshots[k].clone()
    }

    pub fn final_physical(&self) -> Vec<f64> {
        self.physical(self.snapshots.len() - 1)
    }

    pub fn final_time(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct PdeOptions {
    pub dt: f64,
    /// Record every this many steps (the final time is always recorded).
    pub record_every: usize,
    pub tol: f64,
    pub restart: usize,
    /// Abort with BlowUp when the sup norm leaves the comparison bound.
    pub check_blowup: bool,
}

impl PdeOptions {
    pub fn new(dt: f64) -> Self {
        Self { dt, record_every: 1, tol: 1e-11, restart: 30, check_blowup: true }
    }

    pub fn recording(mut self, every: usize) -> Self {
        self.record_every = every.max(1);
        self
    }
}

/// Samples a^ε + s^ε on the simulation nodes by periodic multilinear
/// interpolation of the environment, linear in time.
struct RescaledCoefficients<'a> {
    env: &'a EnvironmentRealization,
    eps: f64,
    /// Per simulation node: environment slice offsets and weights.
    corners: Vec<Vec<(usize, f64)>>,
}

impl<'a> RescaledCoefficients<'a> {
    fn new(env: &'a EnvironmentRealization, eps: f64, sim: &SimBox) -> Self {
        let grid = env.grid;
        let axis: Vec<(usize, usize, f64)> = (0..sim.m)
            .map(|i| {
                let u = (i as f64 * sim.spacing() / eps / grid.h()).rem_euclid(grid.n_x as f64);
                let snapped = u.round();
                let u = if (u - snapped).abs() < 1e-9 { snapped % grid.n_x as f64 } else { u };
                let i0 = (u.floor() as usize).min(grid.n_x - 1);
                (i0, (i0 + 1) % grid.n_x, u - i0 as f64)
            })
            .collect();
        let corners = (0..sim.len())
            .map(|p| {
                let mut idx = vec![0usize; sim.d];
                let mut rest = p;
                for j in (0..sim.d).rev() {
                    idx[j] = rest % sim.m;
                    rest /= sim.m;
                }
                let mut out = Vec::with_capacity(1 << sim.d);
                for corner in 0..(1usize << sim.d) {
                    let mut flat = 0;
                    let mut w = 1.0;
                    for (j, &ij) in idx.iter().enumerate() {
                        let (i0, i1, f) = axis[ij];
                        let bit = (corner >> j) & 1;
                        flat = flat * grid.n_x + if bit == 0 { i0 } else { i1 };
                        w *= if bit == 0 { 1.0 - f } else { f };
                    }
                    if w != 0.0 {
                        out.push((flat, w));
                    }
                }
                out
            })
            .collect();
        Self { env, eps, corners }
    }

    fn sample(&self, t: f64) -> MatrixField {
        let grid = self.env.grid;
        let d = grid.d;
        let u = (t / (self.eps * self.eps) / grid.k()).rem_euclid(grid.n_t as f64);
        let t0 = (u.floor() as usize).min(grid.n_t - 1);
        let t1 = (t0 + 1) % grid.n_t;
        let ft = u - t0 as f64;
        let ns = grid.slice_len();
        let mut out = MatrixField::zeros(d, self.corners.len());
        for i in 0..d {
            for j in 0..d {
                let (a, s) = (self.env.a.comp(i, j), self.env.s.comp(i, j));
                let dst = out.comp_mut(i, j);
                for (p, cs) in self.corners.iter().enumerate() {
                    let mut v = 0.0;
                    for &(flat, w) in cs {
                        let lo = a[t0 * ns + flat] + s[t0 * ns + flat];
                        let hi = a[t1 * ns + flat] + s[t1 * ns + flat];
                        v += w * ((1.0 - ft) * lo + ft * hi);
                    }
                    dst[p] = v;
                }
            }
        }
        out
    }
}

/// ∇·(C∇u) with the flux product evaluated on a 3/2-padded grid, so the
/// discrete operator commutes with spectral translation whenever the
/// coefficient is taken as its trigonometric interpolant.
#[derive(Clone)]
struct DealiasedDiffusion {
    spec: SpatialSpectrum,
    padded: FftNd,
    /// Padded-grid bin of each non-Nyquist bin of the base grid.
    bins: Vec<Option<usize>>,
    /// N_padded / N_base.
    ratio: f64,
}

/// Coefficient components C_ij resampled on the padded grid.
struct PaddedCoefficients(Vec<Vec<f64>>);

impl DealiasedDiffusion {
    fn new(sim: &SimBox) -> Self {
        let m = sim.m;
        let big = 3 * m / 2;
        let spec = SpatialSpectrum::new(sim.d, m, sim.length);
        let padded = FftNd::new(&vec![big; sim.d]);
        let bins = (0..spec.len())
            .map(|p| {
                let mut rest = p;
                let mut q = 0;
                let mut mult = 1;
                for _ in 0..sim.d {
                    let c = rest % m;
                    rest /= m;
                    if 2 * c == m {
                        return None;
                    }
                    let k = mode_number(c, m);
                    q += (k.rem_euclid(big as i64) as usize) * mult;
                    mult *= big;
                }
                Some(q)
            })
            .collect();
        let ratio = padded.len() as f64 / spec.len() as f64;
        Self { spec, padded, bins, ratio }
    }

    /// Trigonometric interpolant on the padded grid of a base spectrum.
    fn spectrum_to_padded(&self, spec: &[Complex64]) -> Vec<Complex64> {
        let mut buf = vec![Complex64::default(); self.padded.len()];
        for (p, bin) in self.bins.iter().enumerate() {
            if let Some(q) = bin {
                buf[*q] = spec[p] * self.ratio;
            }
        }
        self.padded.inverse(&mut buf);
        buf
    }

    /// Base-grid spectrum of a padded real field, truncated.
    fn padded_to_spectrum(&self, mut buf: Vec<Complex64>) -> Vec<Complex64> {
        self.padded.forward(&mut buf);
        self.bins
            .iter()
            .map(|bin| bin.map_or(Complex64::default(), |q| buf[q] / self.ratio))
            .collect()
    }

    /// Resample C, optionally translated to C(· + shift).
    fn prepare(&self, coef: &MatrixField, shift: Option<&[f64]>) -> PaddedCoefficients {
        let comps = coef
            .comps
            .iter()
            .map(|c| {
                if c.iter().all(|&v| v == c[0]) {
                    return vec![c[0]; self.padded.len()];
                }
                let mut hat = self.spec.to_spectrum(c);
                if let Some(shift) = shift {
                    self.spec.translate_spectrum(&mut hat, shift);
                }
                self.spectrum_to_padded(&hat).into_iter().map(|z| z.re).collect()
            })
            .collect();
        PaddedCoefficients(comps)
    }

    fn apply(&self, coef: &PaddedCoefficients, u: &[f64]) -> Vec<f64> {
        let d = self.spec.d;
        let hat = self.spec.to_spectrum(u);
        let i = Complex64::new(0.0, 1.0);
        let grads: Vec<Vec<f64>> = (0..d)
            .map(|j| {
                let g: Vec<Complex64> =
                    hat.iter().enumerate().map(|(p, z)| i * self.spec.wavevector(p)[j] * z).collect();
                self.spectrum_to_padded(&g).into_iter().map(|z| z.re).collect()
            })
            .collect();
        let mut div = vec![Complex64::default(); hat.len()];
        for r in 0..d {
            let mut q = vec![Complex64::default(); self.padded.len()];
            for (j, g) in grads.iter().enumerate() {
                let c = &coef.0[r * d + j];
                q.iter_mut().zip(c).zip(g).for_each(|((qi, ci), gi)| qi.re += ci * gi);
            }
            let qh = self.padded_to_spectrum(q);
            for (p, z) in div.iter_mut().enumerate() {
                *z += i * self.spec.wavevector(p)[r] * qh[p];
            }
        }
        self.spec.to_real(div)
    }
}

/// Shared bookkeeping for all three formulations.
struct Recorder {
    sim: SimBox,
    spec: SpatialSpectrum,
    record_every: usize,
    times: Vec<f64>,
    snapshots: Vec<Vec<f64>>,
    shifts: Vec<Vec<f64>>,
    max_l2_sq: f64,
    grad_sq_integral: f64,
    last_grad_sq: f64,
    linf: f64,
    bound: f64,
    check_blowup: bool,
}

impl Recorder {
    fn new(data: &CauchyData, record_every: usize, check_blowup: bool) -> Self {
        let sim = data.sim;
        let spec = SpatialSpectrum::new(sim.d, sim.m, sim.length);
        let bound = max_abs(&data.g) + data.horizon * data.f_sup();
        Self {
            sim,
            spec,
            record_every,
            times: Vec::new(),
            snapshots: Vec::new(),
            shifts: Vec::new(),
            max_l2_sq: 0.0,
            grad_sq_integral: 0.0,
            last_grad_sq: 0.0,
            linf: 0.0,
            bound,
            check_blowup,
        }
    }

    fn grad_sq(&self, u: &[f64]) -> f64 {
        self.spec.gradient(u).iter().map(|g| self.sim.l2_sq(g)).sum()
    }

    fn observe(&mut self, step: usize, last: bool, t: f64, dt: f64, u: &[f64], shift: &[f64]) -> Result<(), PdeError> {
        let g2 = self.grad_sq(u);
        if step > 0 {
            self.grad_sq_integral += 0.5 * dt * (g2 + self.last_grad_sq);
        }
        self.last_grad_sq = g2;
        self.max_l2_sq = self.max_l2_sq.max(self.sim.l2_sq(u));
        let linf = max_abs(u);
        self.linf = self.linf.max(linf);
        if self.check_blowup && linf > BLOWUP_MARGIN * self.bound + 1e-12 {
            return Err(PdeError::BlowUp { time: t, linf, bound: self.bound });
        }
        if step % self.record_every == 0 || last {
            self.times.push(t);
            self.snapshots.push(u.to_vec());
            self.shifts.push(shift.to_vec());
        }
        Ok(())
    }

    fn finish(self, formulation: Formulation, data: &CauchyData, lambda: f64, dt: f64, iterations: usize) -> SolutionField {
        let c = (1.0 + 1.0 / (2.0 * lambda)) * data.horizon.exp();
        let energy_bound = c * (self.sim.l2_sq(&data.g) + data.horizon * data.f_l2_sq());
        let last = self.snapshots.last().cloned().unwrap_or_default();
        let norms = Norms {
            max_l2_sq: self.max_l2_sq,
            grad_sq_integral: self.grad_sq_integral,
            linf: self.linf,
            energy_bound,
            energy_ok: self.max_l2_sq + self.grad_sq_integral <= energy_bound * (1.0 + 1e-9),
            comparison_bound: self.bound,
            mass_initial: self.sim.integrate(&data.g),
            mass_final: self.sim.integrate(&last),
            boundary_mass_fraction: self.sim.boundary_mass_fraction(&last, 0.1 * self.sim.length),
        };
        SolutionField {
            formulation,
            sim: self.sim,
            dt,
            times: self.times,
            snapshots: self.snapshots,
            shifts: self.shifts,
            norms,
            krylov_iterations: iterations,
        }
    }
}

fn step_count(horizon: f64, dt: f64) -> Result<(usize, f64), PdeError> {
    if !(dt > 0.0 && dt.is_finite()) {
        return Err(PdeError::Invalid(format!("dt must be positive, got {dt}")));
    }
    let n = ((horizon / dt) * (1.0 - 1e-12)).ceil().max(1.0) as usize;
    Ok((n, horizon / n as f64))
}

/// Implicit midpoint solve of (I − ½dt L) u = rhs, preconditioned by the
/// inverse of 1 + ½dt kᵀĀk.
fn implicit_solve(
    op: &DealiasedDiffusion,
    coef: &PaddedCoefficients,
    mean_a: &[f64],
    dt: f64,
    rhs: &[f64],
    guess: &[f64],
    opts: &PdeOptions,
) -> Option<(Vec<f64>, usize)> {
    let spec = &op.spec;
    let inv: Vec<f64> = (0..spec.len()).map(|p| 1.0 / (1.0 + 0.5 * dt * spec.quadratic(p, mean_a))).collect();
    let apply = |u: &[f64]| {
        let l = op.apply(coef, u);
        u.iter().zip(&l).map(|(ui, li)| ui - 0.5 * dt * li).collect::<Vec<f64>>()
    };
    let pre = |v: &[f64]| {
        let mut s = spec.to_spectrum(v);
        s.iter_mut().zip(&inv).for_each(|(z, w)| *z *= *w);
        spec.to_real(s)
    };
    let out = gmres(
        apply,
        pre,
        rhs,
        Some(guess.to_vec()),
        GmresOptions { restart: opts.restart, max_iter: 500, rel_tol: opts.tol },
    );
    out.converged.then_some((out.x, out.iterations))
}

/// Direct IMEX solve of the ε-equation.
pub fn solve_epsilon_pde(
    env: &EnvironmentRealization,
    eps: f64,
    data: &CauchyData,
    opts: &PdeOptions,
) -> Result<SolutionField, PdeError> {
    data.validate()?;
    check_eps(eps, env, data)?;
    let (steps, dt) = step_count(data.horizon, opts.dt)?;
    let sim = data.sim;
    let bmax = bbar_sup(env, eps, data.horizon)?;
    if bmax > 0.0 {
        let limit = CFL * sim.spacing() * eps / bmax;
        if opts.dt > limit {
            return Err(PdeError::Stability { dt: opts.dt, limit });
        }
    }
    let coeffs = RescaledCoefficients::new(env, eps, &sim);
    let mean_a = env.a.mean();
    let mut rec = Recorder::new(data, opts.record_every, opts.check_blowup);
    let spec = rec.spec.clone();
    let op = DealiasedDiffusion::new(&sim);
    let zero = vec![0.0; sim.d];
    let mut u = data.g.clone();
    rec.observe(0, steps == 0, 0.0, dt, &u, &zero)?;
    let transport = |t: f64, u: &[f64]| -> Option<Vec<f64>> {
        let b = env.bbar.eval(t / (eps * eps)).unwrap_or_else(|| vec![0.0; sim.d]);
        if b.iter().all(|&x| x == 0.0) {
            return None;
        }
        let grad = spec.gradient(u);
        let mut out = vec![0.0; u.len()];
        for (bj, g) in b.iter().zip(&grad) {
            out.iter_mut().zip(g).for_each(|(o, gi)| *o += bj / eps * gi);
        }
        Some(out)
    };
    let mut prev_transport: Option<Vec<f64>> = None;
    let mut iterations = 0;
    for n in 0..steps {
        let t = n as f64 * dt;
        let coef = op.prepare(&coeffs.sample(t + 0.5 * dt), None);
        let l = op.apply(&coef, &u);
        let mut rhs: Vec<f64> = u.iter().zip(&l).map(|(ui, li)| ui + 0.5 * dt * li).collect();
        let cur = transport(t, &u);
        if let Some(cur) = &cur {
            match &prev_transport {
                Some(prev) => rhs.iter_mut().zip(cur).zip(prev).for_each(|((r, c), p)| *r += dt * (1.5 * c - 0.5 * p)),
                None => rhs.iter_mut().zip(cur).for_each(|(r, c)| *r += dt * c),
            }
        }
        prev_transport = Some(cur.unwrap_or_else(|| vec![0.0; u.len()]));
        if let Some(f) = &data.f {
            rhs.iter_mut().zip(f).for_each(|(r, fi)| *r += dt * fi);
        }
        let (next, its) = implicit_solve(&op, &coef, &mean_a, dt, &rhs, &u, opts).ok_or(PdeError::NonConvergence { step: n })?;
        iterations += its;
        u = next;
        rec.observe(n + 1, n + 1 == steps, (n + 1) as f64 * dt, dt, &u, &zero)?;
    }
    Ok(rec.finish(Formulation::Direct, data, env.params.lambda, dt, iterations))
}

/// The transported equation ∂_tρ̃ = ∇·C^ε(y − w(t), t)∇ρ̃ + f(y − w(t)),
/// with the coefficients translated spectrally. `path` defaults to w^ε from
/// the environment's b̄.
pub fn solve_transported_pde(
    env: &EnvironmentRealization,
    eps: f64,
    data: &CauchyData,
    opts: &PdeOptions,
    path: Option<&DriftPath>,
) -> Result<SolutionField, PdeError> {
    data.validate()?;
    check_eps(eps, env, data)?;
    let (steps, dt) = step_count(data.horizon, opts.dt)?;
    let sim = data.sim;
    let owned;
    let path = match path {
        Some(p) => p,
        None => {
            owned = drift_path_for(env, eps, data.horizon, dt)?;
            &owned
        }
    };
    let coeffs = RescaledCoefficients::new(env, eps, &sim);
    let mean_a = env.a.mean();
    let mut rec = Recorder::new(data, opts.record_every, opts.check_blowup);
    let spec = rec.spec.clone();
    let op = DealiasedDiffusion::new(&sim);
    let mut u = data.g.clone();
    rec.observe(0, steps == 0, 0.0, dt, &u, &path.eval(0.0))?;
    let mut iterations = 0;
    for n in 0..steps {
        let t = n as f64 * dt;
        let tm = t + 0.5 * dt;
        let w = path.eval(tm);
        let back: Vec<f64> = w.iter().map(|x| -x).collect();
        let moving = w.iter().any(|&x| x != 0.0);
        let coef = op.prepare(&coeffs.sample(tm), moving.then_some(back.as_slice()));
        let l = op.apply(&coef, &u);
        let mut rhs: Vec<f64> = u.iter().zip(&l).map(|(ui, li)| ui + 0.5 * dt * li).collect();
        if let Some(f) = &data.f {
            let shifted = if moving { spec.translate(f, &back) } else { f.clone() };
            rhs.iter_mut().zip(&shifted).for_each(|(r, fi)| *r += dt * fi);
        }
        let (next, its) = implicit_solve(&op, &coef, &mean_a, dt, &rhs, &u, opts).ok_or(PdeError::NonConvergence { step: n })?;
        iterations += its;
        u = next;
        let t1 = (n + 1) as f64 * dt;
        rec.observe(n + 1, n + 1 == steps, t1, dt, &u, &path.eval(t1))?;
    }
    Ok(rec.finish(Formulation::Transported, data, env.params.lambda, dt, iterations))
}

/// Limit equation with an arbitrary shift path X: solves
/// ∂_tρ̃ = ∇·ā∇ρ̃ + f(y − X_t) exactly in Fourier space (midpoint shift for
/// the source) and reports ρ(x,t) = ρ̃(x + X_t, t).
pub fn solve_limit_with_shift(
    a_bar: &SquareMatrix,
    data: &CauchyData,
    shift: &DriftPath,
    opts: &PdeOptions,
) -> Result<SolutionField, PdeError> {
    data.validate()?;
    let lambda = a_bar.symmetric_part().sym_eigenvalues()[0];
    if !(lambda > 0.0) {
        return Err(PdeError::Ellipticity(lambda));
    }
    let (steps, dt) = step_count(data.horizon, opts.dt)?;
    let mut rec = Recorder::new(data, opts.record_every, opts.check_blowup);
    let spec = rec.spec.clone();
    let sym = a_bar.symmetric_part();
    let q: Vec<f64> = (0..spec.len()).map(|p| spec.quadratic(p, &sym.data)).collect();
    let decay: Vec<f64> = q.iter().map(|qp| (-qp * dt).exp()).collect();
    let source_gain: Vec<f64> = q.iter().map(|&qp| if qp * dt < 1e-12 { dt } else { -(-qp * dt).exp_m1() / qp }).collect();
    let f_hat = data.f.as_ref().map(|f| spec.to_spectrum(f));
    let mut u_hat = spec.to_spectrum(&data.g);
    let mut u = data.g.clone();
    rec.observe(0, steps == 0, 0.0, dt, &u, &shift.eval(0.0))?;
    for n in 0..steps {
        let t = n as f64 * dt;
        u_hat.iter_mut().zip(&decay).for_each(|(z, e)| *z *= *e);
        if let Some(fh) = &f_hat {
            let back: Vec<f64> = shift.eval(t + 0.5 * dt).iter().map(|x| -x).collect();
            let mut shifted = fh.clone();
            spec.translate_spectrum(&mut shifted, &back);
            u_hat.iter_mut().zip(&shifted).zip(&source_gain).for_each(|((z, s), g)| *z += *s * *g);
        }
        u = spec.to_real(u_hat.clone());
        let t1 = (n + 1) as f64 * dt;
        rec.observe(n + 1, n + 1 == steps, t1, dt, &u, &shift.eval(t1))?;
    }
    Ok(rec.finish(Formulation::Limit, data, lambda, dt, 0))
}

/// Brownian shift X_t = Σ B_t sampled on the step grid from `seed`.
pub fn brownian_shift(sigma: &SquareMatrix, horizon: f64, dt: f64, seed: u64) -> Result<DriftPath, PdeError> {
    let (steps, dt) = step_count(horizon, dt)?;
    let d = sigma.n;
    let mut r = rng::stream(seed, "brownian", 0);
    let mut b = vec![0.0; d];
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity((steps + 1) * d);
    for n in 0..=steps {
        if n > 0 {
            for bi in b.iter_mut() {
                let z: f64 = StandardNormal.sample(&mut r);
                *bi += dt.sqrt() * z;
            }
        }
        times.push(n as f64 * dt);
        values.extend(sigma.apply(&b));
    }
    Ok(DriftPath { eps: 1.0, d, times, values, source_seed: seed })
}

/// Limit SPDE with Stratonovich transport noise ∇ρ̄∘ΣdB_t, solved through
/// the shift reduction with a Brownian path drawn from `brownian_seed`.
pub fn solve_limit_spde(
    a_bar: &SquareMatrix,
    sigma: &SquareMatrix,
    data: &CauchyData,
    brownian_seed: u64,
    opts: &PdeOptions,
) -> Result<SolutionField, PdeError> {
    if sigma.n != data.sim.d || a_bar.n != data.sim.d {
        return Err(PdeError::Invalid("a_bar and sigma must be d×d".into()));
    }
    let shift = brownian_shift(sigma, data.horizon, opts.dt, brownian_seed)?;
    solve_limit_with_shift(a_bar, data, &shift, opts)
}

/// w^ε on a grid that resolves the drift series and contains every step
/// and half step of a solver running with step `dt`.
pub fn drift_path_for(env: &EnvironmentRealization, eps: f64, horizon: f64, dt: f64) -> Result<DriftPath, PdeError> {
    let half = 0.5 * dt;
    let resolve = eps * eps * env.bbar.dt;
    let refine = (half / resolve * (1.0 - 1e-12)).ceil().max(1.0);
    Ok(integrate_path(&env.bbar, eps, horizon, half / refine)?)
}

fn bbar_sup(env: &EnvironmentRealization, eps: f64, horizon: f64) -> Result<f64, PdeError> {
    let bbar = &env.bbar;
    if bbar.periodic {
        return Ok(bbar.max_norm());
    }
    let needed = horizon / (eps * eps);
    if needed > bbar.horizon() * (1.0 + 1e-12) {
        return Err(PathError::Horizon { needed, available: bbar.horizon() }.into());
    }
    Ok(bbar.max_norm())
}

fn check_eps(eps: f64, env: &EnvironmentRealization, data: &CauchyData) -> Result<(), PdeError> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(PdeError::Invalid(format!("eps must be positive, got {eps}")));
    }
    if env.grid.d != data.sim.d {
        return Err(PdeError::Invalid("environment and simulation box dimensions differ".into()));
    }
    Ok(())
}

/// Space-time L² distance ‖u − v‖ over box × [0,T] from matching snapshot
/// lists, trapezoid rule in time.
pub fn space_time_l2_distance(sim: &SimBox, times: &[f64], u: &[Vec<f64>], v: &[Vec<f64>]) -> f64 {
    let pointwise: Vec<f64> = u
        .iter()
        .zip(v)
        .map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() * sim.cell_volume())
        .collect();
    trapezoid(times, &pointwise).sqrt()
}

/// Space-time L² norm of a snapshot list.
pub fn space_time_l2_norm(sim: &SimBox, times: &[f64], u: &[Vec<f64>]) -> f64 {
    let pointwise: Vec<f64> = u.iter().map(|a| sim.l2_sq(a)).collect();
    trapezoid(times, &pointwise).sqrt()
}

fn trapezoid(times: &[f64], values: &[f64]) -> f64 {
    times.windows(2).zip(values.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
}

/// Heat-kernel solution for a Gaussian bump of width s under constant
/// diffusivity D (symmetric, d×d): covariance s²I + 2tD.
pub fn gaussian_heat_solution(sim: &SimBox, width: f64, amplitude: f64, diffusivity: &SquareMatrix, t: f64) -> Vec<f64> {
    let d = sim.d;
    let mut cov = diffusivity.symmetric_part().lincomb(2.0 * t, &SquareMatrix::identity(d), width * width);
    cov = cov.symmetric_part();
    let det = determinant(&cov);
    let inv = inverse(&cov);
    let norm = amplitude * width.powi(d as i32) / det.sqrt();
    let c = sim.center();
    (0..sim.len())
        .map(|p| {
            let x: Vec<f64> = sim.coords(p).iter().zip(&c).map(|(a, b)| a - b).collect();
            let q: f64 = (0..d).map(|i| (0..d).map(|j| x[i] * inv.get(i, j) * x[j]).sum::<f64>()).sum();
            norm * (-0.5 * q).exp()
        })
        .collect()
}

fn determinant(m: &SquareMatrix) -> f64 {
    match m.n {
        2 => m.get(0, 0) * m.get(1, 1) - m.get(0, 1) * m.get(1, 0),
        _ => {
            let g = |i, j| m.get(i, j);
            g(0, 0) * (g(1, 1) * g(2, 2) - g(1, 2) * g(2, 1)) - g(0, 1) * (g(1, 0) * g(2, 2) - g(1, 2) * g(2, 0))
                + g(0, 2) * (g(1, 0) * g(2, 1) - g(1, 1) * g(2, 0))
        }
    }
}

fn inverse(m: &SquareMatrix) -> SquareMatrix {
    let n = m.n;
    let det = determinant(m);
    let mut out = SquareMatrix::zeros(n);
    if n == 2 {
        out.set(0, 0, m.get(1, 1) / det);
        out.set(1, 1, m.get(0, 0) / det);
        out.set(0, 1, -m.get(0, 1) / det);
        out.set(1, 0, -m.get(1, 0) / det);
        return out;
    }
    for i in 0..3 {
        for j in 0..3 {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            out.set(i, j, (m.get(r0, c0) * m.get(r1, c1) - m.get(r0, c1) * m.get(r1, c0)) / det);
        }
    }
    out
}

/// Probe functional ∫ u χ over the box.
pub fn probe(sim: &SimBox, u: &[f64], chi: &[f64]) -> f64 {
    u.iter().zip(chi).map(|(a, b)| a * b).sum::<f64>() * sim.cell_volume()
}
