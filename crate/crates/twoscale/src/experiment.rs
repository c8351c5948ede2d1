//! Two-scale experiments: ε-solutions against the homogenized limit, law
//! distances of probe functionals, and the perturbed-test-function residual.

use crate::corrector::{delta_extrapolation, effective_matrix_with_correctors, CorrectorError, SolveOptions};
use crate::environment::{build_environment, BbarModel, BbarSpec, EnvError, EnvironmentRealization, SpectralParams};
use crate::grid::{GridError, SpaceTimeGrid};
use crate::linalg::SquareMatrix;
use crate::path_clt::{DriftPath, PathError};
use crate::pde_solver::{
    brownian_shift, drift_path_for, probe, solve_limit_with_shift, solve_transported_pde, space_time_l2_distance,
    space_time_l2_norm, CauchyData, PdeError, PdeOptions, Preset, SimBox, SolutionField,
};
use crate::rng;
use crate::spectral::SpatialSpectrum;
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::time::Instant;
use thiserror::Error;

pub const REPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("samples have different dimensions ({0} vs {1})")]
    DimensionMismatch(usize, usize),
    #[error("empty sample")]
    EmptySample,
    #[error("invalid experiment configuration: {0}")]
    Invalid(String),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Corrector(#[from] CorrectorError),
    #[error(transparent)]
    Pde(#[from] PdeError),
    #[error(transparent)]
    Path(#[from] PathError),
}

/// Energy distance E|X−Y| − ½(E|X−X'| + E|Y−Y'|) between two empirical
/// laws (V-statistic, Euclidean norm). Two point masses at distance r give r.
pub fn law_distance(sample_a: &[Vec<f64>], sample_b: &[Vec<f64>]) -> Result<f64, ExperimentError> {
    law_distance_resolved(sample_a, sample_b, 0.0)
}

/// Energy distance with the point distance replaced by max(|x−y| − res, 0),
/// so values closer than the solver resolution count as ties.
pub fn law_distance_resolved(
    sample_a: &[Vec<f64>],
    sample_b: &[Vec<f64>],
    resolution: f64,
) -> Result<f64, ExperimentError> {
    if sample_a.is_empty() || sample_b.is_empty() {
        return Err(ExperimentError::EmptySample);
    }
    let (da, db) = (sample_a[0].len(), sample_b[0].len());
    if let Some(bad) = sample_a.iter().chain(sample_b).find(|v| v.len() != da) {
        return Err(ExperimentError::DimensionMismatch(da, if db != da { db } else { bad.len() }));
    }
    let dist = |x: &[f64], y: &[f64]| {
        (x.iter().zip(y).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt() - resolution).max(0.0)
    };
    let mean_dist = |u: &[Vec<f64>], v: &[Vec<f64>]| {
        let total: f64 = u.iter().map(|x| v.iter().map(|y| dist(x, y)).sum::<f64>()).sum();
        total / (u.len() * v.len()) as f64
    };
    let ed = mean_dist(sample_a, sample_b) - 0.5 * (mean_dist(sample_a, sample_a) + mean_dist(sample_b, sample_b));
    Ok(ed.max(0.0))
}

#[derive(Debug, Clone, Serialize)]
pub struct PermutationTest {
    pub statistic: f64,
    pub p_value: f64,
    /// 95% quantile of the permutation distribution.
    pub threshold_95: f64,
    pub permutations: usize,
}

/// Permutation test of equal laws using the energy distance at the given
/// resolution.
pub fn permutation_test(
    sample_a: &[Vec<f64>],
    sample_b: &[Vec<f64>],
    resolution: f64,
    permutations: usize,
    seed: u64,
) -> Result<PermutationTest, ExperimentError> {
    let statistic = law_distance_resolved(sample_a, sample_b, resolution)?;
    let mut pooled: Vec<Vec<f64>> = sample_a.iter().chain(sample_b).cloned().collect();
    let na = sample_a.len();
    let mut r = rng::stream(seed, "permutation", 0);
    let mut null = Vec::with_capacity(permutations);
    for _ in 0..permutations {
        pooled.shuffle(&mut r);
        null.push(law_distance_resolved(&pooled[..na], &pooled[na..], resolution)?);
    }
    let exceed = null.iter().filter(|&&v| v >= statistic - 1e-15).count();
    let mut sorted = null.clone();
    sorted.sort_by(f64::total_cmp);
    let threshold_95 = sorted.get(((0.95 * permutations as f64).ceil() as usize).saturating_sub(1)).copied().unwrap_or(0.0);
    Ok(PermutationTest { statistic, p_value: (exceed + 1) as f64 / (permutations + 1) as f64, threshold_95, permutations })
}

/// Five bumps at distinct centers and scales used as probe functionals.
pub fn default_probes(sim: &SimBox) -> Vec<Preset> {
    let l = sim.length;
    let offsets = [[0.0, 0.0], [0.08, 0.0], [0.0, -0.08], [-0.1, 0.06], [0.05, 0.1]];
    let widths = [0.06, 0.04, 0.05, 0.08, 0.03];
    offsets
        .iter()
        .zip(widths)
        .map(|(o, w)| {
            let mut offset: Vec<f64> = o.iter().map(|v| v * l).collect();
            offset.resize(sim.d, 0.0);
            Preset::GaussianBump { offset, width: w * l, amplitude: 1.0 }
        })
        .collect()
}

/// How the simulation resolution is chosen per ε.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "kebab-case")]
pub enum SimResolution {
    /// Simulation nodes coincide with rescaled environment nodes:
    /// m = n_x · L_sim / (ε L).
    Aligned,
    Fixed { m: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub grid: SpaceTimeGrid,
    pub params: SpectralParams,
    pub bbar: BbarSpec,
    pub eps_list: Vec<f64>,
    pub ensemble: usize,
    pub seed: u64,
    pub sim_length: f64,
    pub resolution: SimResolution,
    pub initial: Preset,
    pub source: Option<Preset>,
    pub horizon: f64,
    /// dt = min(dt_max, dt_fraction · ε² · k_env).
    pub dt_max: f64,
    pub dt_fraction: f64,
    pub record_every: usize,
    pub delta_list: Vec<f64>,
    pub corrector_tol: f64,
    /// Sample spacing of open drift series (ou, rw-interp), rescaled time.
    pub bbar_dt: f64,
    /// Limit-law samples drawn for the law distance.
    pub limit_samples: usize,
    pub permutations: usize,
    /// Probe values closer than this count as equal in law distances.
    pub probe_resolution: f64,
    pub probes: Option<Vec<Preset>>,
}

impl ExperimentConfig {
    /// A small default configuration on a given environment grid.
    pub fn new(grid: SpaceTimeGrid, params: SpectralParams, bbar: BbarSpec) -> Self {
        Self {
            grid,
            params,
            bbar,
            eps_list: vec![0.25, 0.125, 0.0625],
            ensemble: 4,
            seed: 1,
            sim_length: 2.0 * grid.length,
            resolution: SimResolution::Aligned,
            initial: Preset::gaussian(0.1 * grid.length),
            source: None,
            horizon: 0.01,
            dt_max: 1e-3,
            dt_fraction: 0.25,
            record_every: 1,
            delta_list: vec![1e-2, 1e-3, 1e-4],
            corrector_tol: 1e-9,
            bbar_dt: 0.05,
            limit_samples: 200,
            permutations: 199,
            probe_resolution: 1e-7,
            probes: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        self.grid.validate()?;
        self.params.validate()?;
        self.bbar.validate()?;
        if self.eps_list.is_empty()
            || self.eps_list.iter().any(|&e| !(e > 0.0 && e <= 1.0))
            || self.eps_list.windows(2).any(|w| w[1] >= w[0])
        {
            return Err(ExperimentError::Invalid("eps_list must be strictly decreasing in (0, 1]".into()));
        }
        if self.ensemble < 1 {
            return Err(ExperimentError::Invalid("ensemble must be at least 1".into()));
        }
        for (name, v) in [
            ("sim_length", self.sim_length),
            ("horizon", self.horizon),
            ("dt_max", self.dt_max),
            ("dt_fraction", self.dt_fraction),
            ("corrector_tol", self.corrector_tol),
            ("bbar_dt", self.bbar_dt),
        ] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(ExperimentError::Invalid(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.probe_resolution >= 0.0 && self.probe_resolution.is_finite()) {
            return Err(ExperimentError::Invalid("probe_resolution must be non-negative".into()));
        }
        if self.delta_list.len() < 3 {
            return Err(ExperimentError::Invalid("delta_list needs at least 3 entries".into()));
        }
        for &eps in &self.eps_list {
            self.sim_box(eps)?;
        }
        Ok(())
    }

    pub fn sim_box(&self, eps: f64) -> Result<SimBox, ExperimentError> {
        let m = match self.resolution {
            SimResolution::Fixed { m } => m,
            SimResolution::Aligned => {
                let cells = self.sim_length / (eps * self.grid.length);
                let m = cells * self.grid.n_x as f64;
                if (m - m.round()).abs() > 1e-9 * m {
                    return Err(ExperimentError::Invalid(format!(
                        "aligned resolution needs sim_length/(eps L) integral, got {cells}"
                    )));
                }
                m.round() as usize
            }
        };
        Ok(SimBox::new(self.grid.d, m, self.sim_length)?)
    }

    pub fn dt(&self, eps: f64) -> f64 {
        self.dt_max.min(self.dt_fraction * eps * eps * self.grid.k())
    }

    fn open_drift(&self) -> bool {
        matches!(self.bbar.model, BbarModel::Ou { .. } | BbarModel::RwInterp { .. })
    }

    fn coefficients_trivial(&self) -> bool {
        self.params.sigma_a == 0.0 && self.params.sigma_s == 0.0
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RealizationRecord {
    pub eps: f64,
    pub realization: usize,
    pub env_seed: u64,
    pub pathwise_error: f64,
    pub relative_error: f64,
    pub terminal_shift: Vec<f64>,
    pub probes_eps: Vec<f64>,
    pub probes_coupled_limit: Vec<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpsSummary {
    pub eps: f64,
    pub sim_points: usize,
    pub dt: f64,
    pub mean_pathwise_error: f64,
    pub mean_relative_error: f64,
    pub law_distance: f64,
    pub law_distance_per_probe: Vec<f64>,
    pub permutation_p_value: f64,
    pub permutation_threshold_95: f64,
    pub energy_bounds_ok: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct CorrectorDiagnostics {
    pub realization: usize,
    pub a_bar: SquareMatrix,
    pub lambda_min: f64,
    pub upper_cert: f64,
    pub raw_sequence: Vec<SquareMatrix>,
    pub warnings: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConvergenceReport {
    pub schema_version: u32,
    pub config: ExperimentConfig,
    pub sigma_sq: SquareMatrix,
    pub mean_a_bar: SquareMatrix,
    pub correctors: Vec<CorrectorDiagnostics>,
    pub per_eps: Vec<EpsSummary>,
    pub records: Vec<RealizationRecord>,
    /// Limit-law probe samples per ε, in eps_list order.
    pub limit_probe_samples: Vec<Vec<Vec<f64>>>,
}

/// Wall-clock timing kept apart from the report so reports stay
/// reproducible byte for byte.
#[derive(Debug, Clone, Default, Serialize)]
pub struct RunTiming {
    pub correctors_secs: f64,
    pub per_eps_secs: Vec<f64>,
}

#[derive(Debug, Error)]
#[error("experiment failed after partial progress: {error}")]
pub struct RunFailure {
    pub partial: Box<ConvergenceReport>,
    #[source]
    pub error: ExperimentError,
}

struct Realization {
    env: EnvironmentRealization,
    a_bar: SquareMatrix,
}

/// Periodic environment of realization `r`, the one the correctors are
/// solved on. Open drift models (ou, rw-interp) carry b̄ = 0 here.
pub fn torus_environment(config: &ExperimentConfig, r: usize) -> Result<EnvironmentRealization, ExperimentError> {
    let seed = rng::derive_seed(config.seed, "environment", r as u64);
    let torus_bbar = if config.open_drift() { BbarSpec::zero() } else { config.bbar };
    Ok(build_environment(&config.grid, &config.params, seed, &torus_bbar)?)
}

/// Environment of realization `r` as seen by the ε-solver: open drift
/// models get a non-periodic series long enough for T/ε² at the smallest ε.
pub fn realization_environment(config: &ExperimentConfig, r: usize) -> Result<EnvironmentRealization, ExperimentError> {
    attach_open_drift(config, torus_environment(config, r)?)
}

fn attach_open_drift(config: &ExperimentConfig, env: EnvironmentRealization) -> Result<EnvironmentRealization, ExperimentError> {
    if !config.open_drift() {
        return Ok(env);
    }
    let seed = env.seed;
    let eps_min = config.eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let needed = config.horizon / (eps_min * eps_min);
    let nodes = (needed / config.bbar_dt).ceil() as usize + 2;
    let series = config.bbar.sample_series(config.grid.d, nodes, config.bbar_dt, rng::derive_seed(seed, "open-drift", 0))?;
    Ok(env.with_bbar(series))
}

/// ā of an environment: λI for constant coefficients, else δ-extrapolated.
pub fn effective_coefficient(config: &ExperimentConfig, env: &EnvironmentRealization) -> Result<SquareMatrix, ExperimentError> {
    if config.coefficients_trivial() {
        Ok(SquareMatrix::scaled_identity(config.grid.d, config.params.lambda))
    } else {
        Ok(delta_extrapolation(env, &config.delta_list, config.corrector_tol)?.matrix.a_bar)
    }
}

fn prepare_realization(config: &ExperimentConfig, r: usize) -> Result<(Realization, CorrectorDiagnostics), ExperimentError> {
    let env = torus_environment(config, r)?;
    let (a_bar, diag) = if config.coefficients_trivial() {
        let a = SquareMatrix::scaled_identity(config.grid.d, config.params.lambda);
        let diag = CorrectorDiagnostics {
            realization: r,
            a_bar: a.clone(),
            lambda_min: config.params.lambda,
            upper_cert: config.params.big_lambda,
            raw_sequence: Vec::new(),
            warnings: Vec::new(),
        };
        (a, diag)
    } else {
        let ex = delta_extrapolation(&env, &config.delta_list, config.corrector_tol)?;
        let diag = CorrectorDiagnostics {
            realization: r,
            a_bar: ex.matrix.a_bar.clone(),
            lambda_min: ex.matrix.lambda_min,
            upper_cert: ex.matrix.upper_cert,
            raw_sequence: ex.raw.clone(),
            warnings: ex.warnings.clone(),
        };
        (ex.matrix.a_bar, diag)
    };
    let env = attach_open_drift(config, env)?;
    Ok((Realization { env, a_bar }, diag))
}

fn probe_values(sim: &SimBox, probes: &[Vec<f64>], u: &[f64]) -> Vec<f64> {
    probes.iter().map(|chi| probe(sim, u, chi)).collect()
}

/// Run the configured experiment: per realization an environment, ā by
/// δ-extrapolation, and per ε the transported ε-solution against the limit
/// equation driven by the same path w^ε (pathwise error), plus the law
/// distance between ε-probes and probes of the Brownian limit with Σ.
pub fn homogenization_run(config: &ExperimentConfig) -> Result<(ConvergenceReport, RunTiming), RunFailure> {
    let d = config.grid.d;
    let sigma_sq = SquareMatrix::scaled_identity(d, config.bbar.analytic_sigma_sq().unwrap_or(0.0));
    let mut report = ConvergenceReport {
        schema_version: REPORT_SCHEMA_VERSION,
        config: config.clone(),
        sigma_sq: sigma_sq.clone(),
        mean_a_bar: SquareMatrix::zeros(d),
        correctors: Vec::new(),
        per_eps: Vec::new(),
        records: Vec::new(),
        limit_probe_samples: Vec::new(),
    };
    let mut timing = RunTiming::default();
    macro_rules! attempt {
        ($e:expr) => {
            match $e {
                Ok(v) => v,
                Err(err) => return Err(RunFailure { partial: Box::new(report), error: err.into() }),
            }
        };
    }
    attempt!(config.validate());

    let start = Instant::now();
    let prepared: Result<Vec<(Realization, CorrectorDiagnostics)>, ExperimentError> =
        (0..config.ensemble).into_par_iter().map(|r| prepare_realization(config, r)).collect();
    let prepared = attempt!(prepared);
    timing.correctors_secs = start.elapsed().as_secs_f64();
    let (realizations, diags): (Vec<Realization>, Vec<CorrectorDiagnostics>) = prepared.into_iter().unzip();
    report.correctors = diags;
    let mut mean_a = SquareMatrix::zeros(d);
    for r in &realizations {
        mean_a = mean_a.lincomb(1.0, &r.a_bar, 1.0 / realizations.len() as f64);
    }
    report.mean_a_bar = mean_a.clone();
    let sigma = SquareMatrix::scaled_identity(d, sigma_sq.get(0, 0).sqrt());

    for (k, &eps) in config.eps_list.iter().enumerate() {
        let start = Instant::now();
        let sim = attempt!(config.sim_box(eps));
        let dt = config.dt(eps);
        let data = attempt!(CauchyData::from_presets(sim, &config.initial, config.source.as_ref(), config.horizon));
        let opts = PdeOptions::new(dt).recording(config.record_every);
        let probes: Vec<Vec<f64>> =
            config.probes.clone().unwrap_or_else(|| default_probes(&sim)).iter().map(|p| p.sample(&sim)).collect();
        let shift_free = config.coefficients_trivial() && config.source.is_none();

        // With trivial coefficients and no source neither frame solution
        // depends on the path, so one solve serves every realization.
        let shared = if shift_free {
            let r0 = &realizations[0];
            let zero_path = zero_path(d, config.horizon);
            let eps_sol = attempt!(solve_transported_pde(&r0.env, eps, &data, &opts, Some(&zero_path)));
            let lim = attempt!(solve_limit_with_shift(&r0.a_bar, &data, &zero_path, &opts));
            Some((eps_sol, lim))
        } else {
            None
        };

        type Row = (RealizationRecord, bool);
        let rows: Result<Vec<Row>, ExperimentError> = realizations
            .par_iter()
            .enumerate()
            .map(|(r, real)| {
                let path = drift_path_for(&real.env, eps, config.horizon, dt)?;
                let (eps_sol, lim) = match &shared {
                    Some((a, b)) => (a.clone(), b.clone()),
                    None => (
                        solve_transported_pde(&real.env, eps, &data, &opts, Some(&path))?,
                        solve_limit_with_shift(&real.a_bar, &data, &path, &opts)?,
                    ),
                };
                let err = space_time_l2_distance(&sim, &eps_sol.times, &eps_sol.snapshots, &lim.snapshots);
                let norm = space_time_l2_norm(&sim, &lim.times, &lim.snapshots);
                let w_t = path.eval(config.horizon);
                let final_eps = physical_at(&sim, &eps_sol, &w_t);
                let final_lim = physical_at(&sim, &lim, &w_t);
                let ok = eps_sol.norms.energy_ok && lim.norms.energy_ok;
                Ok((
                    RealizationRecord {
                        eps,
                        realization: r,
                        env_seed: real.env.seed,
                        pathwise_error: err,
                        relative_error: if norm > 0.0 { err / norm } else { 0.0 },
                        terminal_shift: w_t,
                        probes_eps: probe_values(&sim, &probes, &final_eps),
                        probes_coupled_limit: probe_values(&sim, &probes, &final_lim),
                    },
                    ok,
                ))
            })
            .collect();
        let rows = attempt!(rows);

        let limit_samples = attempt!(limit_probe_samples(config, &sim, &data, &opts, &mean_a, &sigma, &probes, k));
        let eps_sample: Vec<Vec<f64>> = rows.iter().map(|(r, _)| r.probes_eps.clone()).collect();
        let res = config.probe_resolution;
        let ed = attempt!(law_distance_resolved(&eps_sample, &limit_samples, res));
        let per_probe: Result<Vec<f64>, ExperimentError> = (0..probes.len())
            .map(|p| {
                let a: Vec<Vec<f64>> = eps_sample.iter().map(|v| vec![v[p]]).collect();
                let b: Vec<Vec<f64>> = limit_samples.iter().map(|v| vec![v[p]]).collect();
                law_distance_resolved(&a, &b, res)
            })
            .collect();
        let per_probe = attempt!(per_probe);
        let perm = attempt!(permutation_test(
            &eps_sample,
            &limit_samples,
            res,
            config.permutations,
            rng::derive_seed(config.seed, "permutation", k as u64)
        ));
        let n = rows.len() as f64;
        report.per_eps.push(EpsSummary {
            eps,
            sim_points: sim.m,
            dt,
            mean_pathwise_error: rows.iter().map(|(r, _)| r.pathwise_error).sum::<f64>() / n,
            mean_relative_error: rows.iter().map(|(r, _)| r.relative_error).sum::<f64>() / n,
            law_distance: ed,
            law_distance_per_probe: per_probe,
            permutation_p_value: perm.p_value,
            permutation_threshold_95: perm.threshold_95,
            energy_bounds_ok: rows.iter().all(|(_, ok)| *ok),
        });
        report.records.extend(rows.into_iter().map(|(r, _)| r));
        report.limit_probe_samples.push(limit_samples);
        timing.per_eps_secs.push(start.elapsed().as_secs_f64());
    }
    Ok((report, timing))
}

fn zero_path(d: usize, horizon: f64) -> DriftPath {
    DriftPath { eps: 1.0, d, times: vec![0.0, horizon], values: vec![0.0; 2 * d], source_seed: 0 }
}

/// Final field of a frame solution moved to physical coordinates with the
/// given terminal shift.
fn physical_at(sim: &SimBox, sol: &SolutionField, shift: &[f64]) -> Vec<f64> {
    let last = sol.snapshots.last().expect("at least one snapshot");
    if shift.iter().all(|&s| s == 0.0) {
        return last.clone();
    }
    SpatialSpectrum::new(sim.d, sim.m, sim.length).translate(last, shift)
}

#[allow(clippy::too_many_arguments)]
fn limit_probe_samples(
    config: &ExperimentConfig,
    sim: &SimBox,
    data: &CauchyData,
    opts: &PdeOptions,
    a_bar: &SquareMatrix,
    sigma: &SquareMatrix,
    probes: &[Vec<f64>],
    eps_index: usize,
) -> Result<Vec<Vec<f64>>, ExperimentError> {
    let count = config.limit_samples.max(1);
    let seed_of = |j: usize| rng::derive_seed(config.seed, &format!("limit-brownian:{eps_index}"), j as u64);
    if data.f.is_none() {
        let zero = zero_path(sim.d, config.horizon);
        let base = solve_limit_with_shift(a_bar, data, &zero, opts)?;
        let last = base.snapshots.last().expect("snapshot").clone();
        let spec = SpatialSpectrum::new(sim.d, sim.m, sim.length);
        return (0..count)
            .map(|j| {
                let shift = brownian_shift(sigma, config.horizon, opts.dt, seed_of(j))?;
                let x_t = shift.eval(config.horizon);
                let field = if x_t.iter().all(|&v| v == 0.0) { last.clone() } else { spec.translate(&last, &x_t) };
                Ok(probe_values(sim, probes, &field))
            })
            .collect();
    }
    (0..count)
        .into_par_iter()
        .map(|j| {
            let shift = brownian_shift(sigma, config.horizon, opts.dt, seed_of(j))?;
            let sol = solve_limit_with_shift(a_bar, data, &shift, opts)?;
            Ok(probe_values(sim, probes, &sol.final_physical()))
        })
        .collect()
}

#[derive(Debug, Clone, Serialize)]
pub struct ResidualPair {
    pub eps: f64,
    pub delta: f64,
    /// |∫∫ (C̃^ε − ā)∇ρ̃̄·∇ψ|.
    pub plain: f64,
    /// The same with ψ replaced by ψ + ε Σ_i φ̃ᵗ_i ∂_iψ.
    pub corrected: f64,
    /// Σ_i |∫∫ ε⁻¹ δ φ̃ᵗ_i ρ̃^ε ∂_iψ|.
    pub delta_term: f64,
}

/// Fixed inputs of the residual diagnostic.
#[derive(Debug, Clone)]
pub struct ResidualSetup {
    pub sim: SimBox,
    pub initial: Preset,
    pub horizon: f64,
    pub dt: f64,
    pub corrector_tol: f64,
}

/// Weak-form residual of the transported ε-equation evaluated on the
/// reference solution ρ̃̄ of the ā-equation, tested against
/// ψ(x,t) = bump(x)·cos²(πt/2T) (which vanishes at T) and against its
/// corrector-perturbed version. Uses ā = m̄ᵗ from the δ-correctors.
pub fn perturbed_test_residual(
    env: &EnvironmentRealization,
    eps: f64,
    delta: f64,
    psi: &Preset,
    directions: &[usize],
    setup: &ResidualSetup,
) -> Result<ResidualPair, ExperimentError> {
    let solved = effective_matrix_with_correctors(env, delta, &SolveOptions::with_tol(setup.corrector_tol))?;
    let a_bar = solved.matrix.m_bar.transpose();
    let sim = setup.sim;
    let d = sim.d;
    let grid = env.grid;
    let data = CauchyData::from_presets(sim, &setup.initial, None, setup.horizon)?;
    let opts = PdeOptions::new(setup.dt);
    let path = drift_path_for(env, eps, setup.horizon, setup.dt)?;
    let reference = solve_limit_with_shift(&a_bar, &data, &path, &opts)?;
    let eps_sol = solve_transported_pde(env, eps, &data, &opts, Some(&path))?;
    let spec = SpatialSpectrum::new(d, sim.m, sim.length);
    let bump = psi.sample(&sim);
    let grad_bump = spec.gradient(&bump);

    let times = &reference.times;
    let mut plain = Vec::with_capacity(times.len());
    let mut corrected = Vec::with_capacity(times.len());
    let mut delta_terms = vec![Vec::with_capacity(times.len()); directions.len()];
    for (k, &t) in times.iter().enumerate() {
        let theta = (std::f64::consts::PI * t / (2.0 * setup.horizon)).cos().powi(2);
        let w = path.eval(t);
        let tau = t / (eps * eps);
        let grad_ref = spec.gradient(&reference.snapshots[k]);
        // Coefficients and correctors in the transported frame at time t.
        let mut coef = vec![vec![0.0; sim.len()]; d * d];
        let mut phis = vec![vec![0.0; sim.len()]; directions.len()];
        for p in 0..sim.len() {
            let y: Vec<f64> = sim.coords(p).iter().zip(&w).map(|(x, wj)| (x - wj) / eps).collect();
            for (c, dst) in coef.iter_mut().enumerate() {
                dst[p] = grid.interpolate(&env.a.comps[c], &y, tau) + grid.interpolate(&env.s.comps[c], &y, tau);
            }
            for (q, &i) in directions.iter().enumerate() {
                phis[q][p] = grid.interpolate(&solved.transpose[i].phi, &y, tau);
            }
        }
        let mut zeta = bump.clone();
        for (q, &i) in directions.iter().enumerate() {
            zeta.iter_mut().zip(&phis[q]).zip(&grad_bump[i]).for_each(|((z, ph), g)| *z += eps * ph * g);
        }
        let grad_zeta = spec.gradient(&zeta);
        let form = |grad_test: &[Vec<f64>]| -> f64 {
            let mut acc = 0.0;
            for p in 0..sim.len() {
                for i in 0..d {
                    let mut flux = 0.0;
                    for j in 0..d {
                        flux += (coef[i * d + j][p] - a_bar.get(i, j)) * grad_ref[j][p];
                    }
                    acc += flux * grad_test[i][p];
                }
            }
            acc * sim.cell_volume() * theta
        };
        plain.push(form(&grad_bump));
        corrected.push(form(&grad_zeta));
        for (q, &i) in directions.iter().enumerate() {
            let v: f64 = (0..sim.len()).map(|p| phis[q][p] * eps_sol.snapshots[k][p] * grad_bump[i][p]).sum();
            delta_terms[q].push(delta / eps * v * sim.cell_volume() * theta);
        }
    }
    let integrate = |vals: &[f64]| -> f64 {
        times.windows(2).zip(vals.windows(2)).map(|(t, v)| 0.5 * (t[1] - t[0]) * (v[0] + v[1])).sum()
    };
    Ok(ResidualPair {
        eps,
        delta,
        plain: integrate(&plain).abs(),
        corrected: integrate(&corrected).abs(),
        delta_term: delta_terms.iter().map(|v| integrate(v).abs()).sum(),
    })
}
