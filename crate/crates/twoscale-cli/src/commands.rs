//! One function per pipeline stage. Each writes its outputs through an
//! [`OutputSink`] and finishes with the manifest.

use rayon::prelude::*;
use serde::Serialize;
use std::path::{Path, PathBuf};
use std::time::Instant;
use twoscale::container::{ContainerHeader, FieldContainer, FORMAT_VERSION};
use twoscale::corrector::{delta_extrapolation, energy_check, solve_corrector, CorrectorProblem, DeltaExtrapolation, SolveOptions};
use twoscale::environment::{drift_of, relative_divergence, EnvironmentRealization};
use twoscale::experiment::{
    default_probes, effective_coefficient, homogenization_run, realization_environment, torus_environment, ExperimentConfig,
};
use twoscale::grid::{mean, SpaceTimeGrid};
use twoscale::linalg::SquareMatrix;
use twoscale::path_clt::{
    block_increments, donsker_test, empirical_sigma, estimate_sigma_series, integrate_ensemble, moment_check,
    sample_drift_ensemble, BlockIncrements, CovarianceEstimate, DonskerReport, MomentReport, Verdict,
};
use twoscale::pde_solver::{
    probe, solve_epsilon_pde, solve_limit_spde, solve_transported_pde, CauchyData, Formulation, Norms, PdeOptions, SimBox,
    SolutionField,
};
use twoscale::rng;
use twoscale::stream_solver::solve_stream_matrix;

use crate::manifest::{OutputSink, RunManifest};
use crate::CliError;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    GenerateEnv,
    StreamRecover,
    SolveCorrector,
    EffectiveMatrix,
    Clt,
    SolveEps,
    SolveLimit,
    Homogenize,
}

impl Stage {
    pub fn name(self) -> &'static str {
        match self {
            Self::GenerateEnv => "generate-env",
            Self::StreamRecover => "stream-recover",
            Self::SolveCorrector => "solve-corrector",
            Self::EffectiveMatrix => "effective-matrix",
            Self::Clt => "clt",
            Self::SolveEps => "solve-eps",
            Self::SolveLimit => "solve-limit",
            Self::Homogenize => "homogenize",
        }
    }
}

/// Stage-specific knobs; the config carries everything else.
#[derive(Debug, Clone)]
pub struct RunOptions {
    pub workers: usize,
    /// Field container read by stream-recover and solve-corrector instead
    /// of generating realization `realization`.
    pub input: Option<PathBuf>,
    pub realization: usize,
    /// Corrector δ; defaults to the last entry of the config's delta_list.
    pub delta: Option<f64>,
    pub direction: usize,
    pub transpose: bool,
    /// Also write solution and corrector fields as containers.
    pub dump_fields: bool,
    /// Direct rather than transported ε-solver.
    pub direct: bool,
    pub paths: usize,
    pub lag_max: usize,
    /// Macroscopic horizon of the clt stage.
    pub clt_horizon: f64,
}

impl Default for RunOptions {
    fn default() -> Self {
        Self {
            workers: 0,
            input: None,
            realization: 0,
            delta: None,
            direction: 0,
            transpose: false,
            dump_fields: false,
            direct: false,
            paths: 500,
            lag_max: 8,
            clt_horizon: 1.0,
        }
    }
}

/// Execute one stage and write its outputs plus `manifest.json` to `out`.
pub fn run(stage: Stage, config: &ExperimentConfig, out: &Path, opts: &RunOptions) -> Result<RunManifest, CliError> {
    config.validate()?;
    let mut sink = OutputSink::create(out)?;
    let start = Instant::now();
    let timing = match stage {
        Stage::GenerateEnv => generate_env(config, &mut sink)?,
        Stage::StreamRecover => stream_recover(config, opts, &mut sink)?,
        Stage::SolveCorrector => corrector_stage(config, opts, &mut sink)?,
        Stage::EffectiveMatrix => effective_stage(config, &mut sink)?,
        Stage::Clt => clt_stage(config, opts, &mut sink)?,
        Stage::SolveEps => solve_eps_stage(config, opts, &mut sink)?,
        Stage::SolveLimit => solve_limit_stage(config, opts, &mut sink)?,
        Stage::Homogenize => homogenize_stage(config, &mut sink)?,
    };
    let mut timing = timing;
    timing["total_secs"] = start.elapsed().as_secs_f64().into();
    let workers = if opts.workers == 0 { rayon::current_num_threads() } else { opts.workers };
    sink.finish(stage.name(), config, workers, timing)
}

fn no_timing() -> serde_json::Value {
    serde_json::json!({})
}

fn check_realization(config: &ExperimentConfig, r: usize) -> Result<(), CliError> {
    if r >= config.ensemble {
        return Err(CliError::Invalid(format!("realization {r} outside ensemble of {}", config.ensemble)));
    }
    Ok(())
}

#[derive(Serialize)]
struct EnvSummary {
    realization: usize,
    seed: u64,
    lambda_min: f64,
    lambda_max: f64,
    relative_divergence: f64,
    bbar_model: &'static str,
    bbar_nodes: usize,
}

fn drift_container(env: &EnvironmentRealization) -> FieldContainer {
    let mut c = FieldContainer::new(ContainerHeader::for_grid(&env.grid, env.seed));
    for (i, bi) in drift_of(env).into_iter().enumerate() {
        c.push(format!("b:{i}"), bi);
    }
    c
}

fn generate_env(config: &ExperimentConfig, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let envs: Vec<EnvironmentRealization> =
        (0..config.ensemble).into_par_iter().map(|r| realization_environment(config, r)).collect::<Result<_, _>>()?;
    let mut summary = Vec::new();
    for (r, env) in envs.iter().enumerate() {
        sink.write_container(&format!("env_{r:03}.dhf"), &FieldContainer::from_environment(env))?;
        let drift = drift_container(env);
        sink.write_container(&format!("drift_{r:03}.dhf"), &drift)?;
        let b: Vec<Vec<f64>> = (0..env.grid.d).map(|i| drift.get(&format!("b:{i}")).map(<[f64]>::to_vec)).collect::<Result<_, _>>()?;
        let (lambda_min, lambda_max) = env.ellipticity_range();
        summary.push(EnvSummary {
            realization: r,
            seed: env.seed,
            lambda_min,
            lambda_max,
            relative_divergence: relative_divergence(&env.grid, &b),
            bbar_model: config.bbar.model.label(),
            bbar_nodes: env.bbar.len(),
        });
    }
    sink.write_json("environments.json", &summary)?;
    Ok(no_timing())
}

fn load(path: &Path) -> Result<FieldContainer, CliError> {
    Ok(FieldContainer::load(path)?)
}

#[derive(Serialize)]
struct StreamReport {
    source: String,
    residual: f64,
    relative_residual: f64,
    warnings: Vec<String>,
}

fn stream_recover(config: &ExperimentConfig, opts: &RunOptions, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let (grid, b, seed, source): (SpaceTimeGrid, Vec<Vec<f64>>, u64, String) = match &opts.input {
        Some(path) => {
            let c = load(path)?;
            (c.header.grid()?, c.vector_field("b")?, c.header.seed, path.display().to_string())
        }
        None => {
            check_realization(config, opts.realization)?;
            let env = realization_environment(config, opts.realization)?;
            (env.grid, drift_of(&env), env.seed, format!("realization {}", opts.realization))
        }
    };
    let rec = solve_stream_matrix(&b, &grid)?;
    let mut c = FieldContainer::new(ContainerHeader::for_grid(&grid, seed));
    for i in 0..grid.d {
        for j in 0..grid.d {
            c.push(format!("s:{i}:{j}"), rec.s_rec.comp(i, j).to_vec());
        }
    }
    sink.write_container("stream.dhf", &c)?;
    sink.write_json(
        "stream_report.json",
        &StreamReport { source, residual: rec.residual, relative_residual: rec.relative_residual, warnings: rec.warnings },
    )?;
    Ok(no_timing())
}

fn corrector_environment(config: &ExperimentConfig, opts: &RunOptions) -> Result<EnvironmentRealization, CliError> {
    match &opts.input {
        Some(path) => Ok(load(path)?.to_environment()?),
        None => {
            check_realization(config, opts.realization)?;
            Ok(torus_environment(config, opts.realization)?)
        }
    }
}

#[derive(Serialize)]
struct CorrectorReport {
    realization: usize,
    direction: usize,
    transpose: bool,
    delta: f64,
    residual_norm: f64,
    energy_defect: f64,
    /// Space-time mean of each flux component.
    flux_mean: Vec<f64>,
    phi_rms: f64,
}

fn corrector_stage(config: &ExperimentConfig, opts: &RunOptions, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let env = corrector_environment(config, opts)?;
    let d = env.grid.d;
    if opts.direction >= d {
        return Err(CliError::Invalid(format!("direction {} must be below d = {d}", opts.direction)));
    }
    let delta = opts.delta.unwrap_or(*config.delta_list.last().expect("validated delta_list"));
    let problem = CorrectorProblem::unit(&env, opts.direction, delta, opts.transpose);
    let cf = solve_corrector(&problem, &SolveOptions::with_tol(config.corrector_tol))?;
    let report = CorrectorReport {
        realization: opts.realization,
        direction: opts.direction,
        transpose: opts.transpose,
        delta,
        residual_norm: cf.residual_norm,
        energy_defect: energy_check(&cf, &env),
        flux_mean: cf.flux.iter().map(|f| mean(f)).collect(),
        phi_rms: (cf.phi.iter().map(|v| v * v).sum::<f64>() / cf.phi.len() as f64).sqrt(),
    };
    sink.write_json("corrector.json", &report)?;
    if opts.dump_fields {
        let mut c = FieldContainer::new(ContainerHeader::for_grid(&env.grid, env.seed));
        c.push("phi", cf.phi.clone());
        for (i, g) in cf.grad_phi.iter().enumerate() {
            c.push(format!("grad_phi:{i}"), g.clone());
        }
        sink.write_container("corrector_phi.dhf", &c)?;
    }
    Ok(no_timing())
}

#[derive(Serialize)]
struct EffectiveReport {
    mean_a_bar: SquareMatrix,
    realizations: Vec<DeltaExtrapolation>,
}

fn mean_matrix(ms: &[SquareMatrix]) -> SquareMatrix {
    let n = ms[0].n;
    let mut out = SquareMatrix::zeros(n);
    for m in ms {
        out = out.lincomb(1.0, m, 1.0 / ms.len() as f64);
    }
    out
}

fn effective_stage(config: &ExperimentConfig, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let start = Instant::now();
    let realizations: Vec<DeltaExtrapolation> = (0..config.ensemble)
        .into_par_iter()
        .map(|r| -> Result<_, CliError> {
            let env = torus_environment(config, r)?;
            Ok(delta_extrapolation(&env, &config.delta_list, config.corrector_tol)?)
        })
        .collect::<Result<_, _>>()?;
    let mats: Vec<SquareMatrix> = realizations.iter().map(|x| x.matrix.a_bar.clone()).collect();
    sink.write_json("effective_matrix.json", &EffectiveReport { mean_a_bar: mean_matrix(&mats), realizations })?;
    Ok(serde_json::json!({ "correctors_secs": start.elapsed().as_secs_f64() }))
}

/// One row of `clt.csv`.
#[derive(Serialize)]
struct CltRow {
    eps: f64,
    statistic: &'static str,
    component: String,
    value: f64,
    stderr: f64,
}

#[derive(Serialize)]
struct CltEps {
    eps: f64,
    empirical: CovarianceEstimate,
    donsker: DonskerReport,
}

#[derive(Serialize)]
struct CltReport {
    model: &'static str,
    horizon: f64,
    paths: usize,
    lag_max: usize,
    analytic_sigma_sq: Option<f64>,
    series: CovarianceEstimate,
    moments: Option<MomentReport>,
    per_eps: Vec<CltEps>,
}

fn matrix_rows(rows: &mut Vec<CltRow>, eps: f64, statistic: &'static str, est: &CovarianceEstimate) {
    let n = est.sigma_sq.n;
    for i in 0..n {
        for j in 0..n {
            rows.push(CltRow {
                eps,
                statistic,
                component: format!("{i}:{j}"),
                value: est.sigma_sq.get(i, j),
                stderr: est.stderr.get(i, j),
            });
        }
    }
}

fn clt_stage(config: &ExperimentConfig, opts: &RunOptions, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let d = config.grid.d;
    let horizon = opts.clt_horizon;
    if !(horizon > 0.0 && horizon.is_finite()) || opts.paths < 2 || opts.lag_max < 1 {
        return Err(CliError::Invalid("clt needs a positive horizon, at least 2 paths and lag_max >= 1".into()));
    }
    let eps_min = config.eps_list.iter().copied().fold(f64::INFINITY, f64::min);
    let span = horizon / (eps_min * eps_min);
    let nodes = (span / config.bbar_dt).ceil() as usize + 1;
    let series = sample_drift_ensemble(&config.bbar, d, nodes, config.bbar_dt, rng::derive_seed(config.seed, "clt", 0), opts.paths)?;
    let blocks_len = (span.floor() as usize).max(1);
    let blocks: Vec<BlockIncrements> = series.iter().map(|s| block_increments(s, blocks_len)).collect::<Result<_, _>>()?;
    let series_est = estimate_sigma_series(&blocks, opts.lag_max.min(blocks_len))?;
    let moments = if blocks_len >= 2 { Some(moment_check(&series, blocks_len, 0.5)?) } else { None };
    let analytic = config.bbar.analytic_sigma_sq();
    let reference = SquareMatrix::scaled_identity(d, analytic.unwrap_or(0.0));
    let marginal_times = [0.25 * horizon, 0.5 * horizon, horizon];

    let mut rows = Vec::new();
    let mut per_eps = Vec::new();
    for &eps in &config.eps_list {
        let paths = integrate_ensemble(&series, eps, horizon, eps * eps * config.bbar_dt)?;
        let empirical = empirical_sigma(&paths, horizon)?;
        let donsker = donsker_test(&paths, &reference, &marginal_times)?;
        matrix_rows(&mut rows, eps, "sigma_sq_series", &series_est);
        matrix_rows(&mut rows, eps, "sigma_sq_empirical", &empirical);
        if let Some(a) = analytic {
            rows.push(CltRow { eps, statistic: "sigma_sq_analytic", component: "i:i".into(), value: a, stderr: 0.0 });
        }
        let min_p = |ps: &mut dyn Iterator<Item = f64>| ps.fold(1.0, f64::min);
        rows.push(CltRow {
            eps,
            statistic: "ks_p_min",
            component: String::new(),
            value: min_p(&mut donsker.marginals.iter().map(|m| m.p_value)),
            stderr: 0.0,
        });
        rows.push(CltRow {
            eps,
            statistic: "increment_p_min",
            component: String::new(),
            value: min_p(&mut donsker.increments.iter().map(|m| m.p_value)),
            stderr: 0.0,
        });
        rows.push(CltRow {
            eps,
            statistic: "donsker_pass",
            component: String::new(),
            value: if donsker.verdict == Verdict::Fail { 0.0 } else { 1.0 },
            stderr: 0.0,
        });
        per_eps.push(CltEps { eps, empirical, donsker });
    }
    sink.write_csv("clt.csv", &rows)?;
    sink.write_json(
        "clt_report.json",
        &CltReport {
            model: config.bbar.model.label(),
            horizon,
            paths: opts.paths,
            lag_max: opts.lag_max,
            analytic_sigma_sq: analytic,
            series: series_est,
            moments,
            per_eps,
        },
    )?;
    Ok(no_timing())
}

#[derive(Serialize)]
struct SolveSummary {
    eps: Option<f64>,
    formulation: Formulation,
    sim_points: usize,
    sim_length: f64,
    dt: f64,
    steps: usize,
    krylov_iterations: usize,
    terminal_shift: Vec<f64>,
    probes: Vec<f64>,
    norms: Norms,
}

fn summarize(eps: Option<f64>, config: &ExperimentConfig, sol: &SolutionField) -> SolveSummary {
    let sim = sol.sim;
    let probes = config.probes.clone().unwrap_or_else(|| default_probes(&sim));
    let u = sol.final_physical();
    SolveSummary {
        eps,
        formulation: sol.formulation,
        sim_points: sim.m,
        sim_length: sim.length,
        dt: sol.dt,
        steps: (sol.final_time() / sol.dt).round() as usize,
        krylov_iterations: sol.krylov_iterations,
        terminal_shift: sol.shifts.last().cloned().unwrap_or_default(),
        probes: probes.iter().map(|p| probe(&sim, &u, &p.sample(&sim))).collect(),
        norms: sol.norms.clone(),
    }
}

fn solution_container(sim: &SimBox, sol: &SolutionField, seed: u64) -> FieldContainer {
    let header = ContainerHeader {
        version: FORMAT_VERSION,
        d: sim.d,
        n_x: sim.m,
        n_t: 1,
        length: sim.length,
        period: sol.final_time(),
        seed,
    };
    let mut c = FieldContainer::new(header);
    c.push("rho", sol.final_physical());
    c.push("shift", sol.shifts.last().cloned().unwrap_or_default());
    c
}

fn cauchy_data(config: &ExperimentConfig, sim: SimBox) -> Result<CauchyData, CliError> {
    Ok(CauchyData::from_presets(sim, &config.initial, config.source.as_ref(), config.horizon)?)
}

fn solve_eps_stage(config: &ExperimentConfig, opts: &RunOptions, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    check_realization(config, opts.realization)?;
    let env = realization_environment(config, opts.realization)?;
    let mut summaries = Vec::new();
    let mut secs = Vec::new();
    for (k, &eps) in config.eps_list.iter().enumerate() {
        let start = Instant::now();
        let sim = config.sim_box(eps)?;
        let data = cauchy_data(config, sim)?;
        let pde = PdeOptions::new(config.dt(eps)).recording(config.record_every);
        let sol = if opts.direct {
            solve_epsilon_pde(&env, eps, &data, &pde)?
        } else {
            solve_transported_pde(&env, eps, &data, &pde, None)?
        };
        summaries.push(summarize(Some(eps), config, &sol));
        if opts.dump_fields {
            sink.write_container(&format!("solution_eps_{k}.dhf"), &solution_container(&sim, &sol, env.seed))?;
        }
        secs.push(start.elapsed().as_secs_f64());
    }
    sink.write_json("solve_eps.json", &summaries)?;
    Ok(serde_json::json!({ "per_eps_secs": secs }))
}

#[derive(Serialize)]
struct LimitReport {
    a_bar: SquareMatrix,
    sigma: SquareMatrix,
    brownian_seed: u64,
    solution: SolveSummary,
}

fn solve_limit_stage(config: &ExperimentConfig, opts: &RunOptions, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    check_realization(config, opts.realization)?;
    let env = torus_environment(config, opts.realization)?;
    let a_bar = effective_coefficient(config, &env)?;
    let d = config.grid.d;
    let sigma = SquareMatrix::scaled_identity(d, config.bbar.analytic_sigma_sq().unwrap_or(0.0).sqrt());
    let eps_min = *config.eps_list.last().expect("validated eps_list");
    let sim = config.sim_box(eps_min)?;
    let data = cauchy_data(config, sim)?;
    let seed = rng::derive_seed(config.seed, "limit-cli", opts.realization as u64);
    let pde = PdeOptions::new(config.dt(eps_min)).recording(config.record_every);
    let sol = solve_limit_spde(&a_bar, &sigma, &data, seed, &pde)?;
    if opts.dump_fields {
        sink.write_container("solution_limit.dhf", &solution_container(&sim, &sol, seed))?;
    }
    sink.write_json("solve_limit.json", &LimitReport { a_bar, sigma, brownian_seed: seed, solution: summarize(None, config, &sol) })?;
    Ok(no_timing())
}

/// One row of `records.csv`: one probe of one realization at one ε.
#[derive(Serialize)]
struct RecordRow {
    eps: f64,
    realization: usize,
    env_seed: u64,
    probe: usize,
    probe_eps: f64,
    probe_coupled_limit: f64,
    pathwise_error: f64,
    relative_error: f64,
}

/// One row of `summary.csv`.
#[derive(Serialize)]
struct SummaryRow {
    eps: f64,
    sim_points: usize,
    dt: f64,
    mean_pathwise_error: f64,
    mean_relative_error: f64,
    law_distance: f64,
    permutation_p_value: f64,
    permutation_threshold_95: f64,
    energy_bounds_ok: bool,
}

fn homogenize_stage(config: &ExperimentConfig, sink: &mut OutputSink) -> Result<serde_json::Value, CliError> {
    let (report, timing) = match homogenization_run(config) {
        Ok(done) => done,
        Err(failure) => {
            let path = sink.write_json("report.partial.json", &failure.partial)?;
            return Err(CliError::Partial { partial: path.display().to_string(), error: failure.error });
        }
    };
    sink.write_json("report.json", &report)?;
    let mut rows = Vec::new();
    for rec in &report.records {
        for (k, (&pe, &pl)) in rec.probes_eps.iter().zip(&rec.probes_coupled_limit).enumerate() {
            rows.push(RecordRow {
                eps: rec.eps,
                realization: rec.realization,
                env_seed: rec.env_seed,
                probe: k,
                probe_eps: pe,
                probe_coupled_limit: pl,
                pathwise_error: rec.pathwise_error,
                relative_error: rec.relative_error,
            });
        }
    }
    sink.write_csv("records.csv", &rows)?;
    let summary: Vec<SummaryRow> = report
        .per_eps
        .iter()
        .map(|s| SummaryRow {
            eps: s.eps,
            sim_points: s.sim_points,
            dt: s.dt,
            mean_pathwise_error: s.mean_pathwise_error,
            mean_relative_error: s.mean_relative_error,
            law_distance: s.law_distance,
            permutation_p_value: s.permutation_p_value,
            permutation_threshold_95: s.permutation_threshold_95,
            energy_bounds_ok: s.energy_bounds_ok,
        })
        .collect();
    sink.write_csv("summary.csv", &summary)?;
    Ok(serde_json::to_value(&timing)?)
}
