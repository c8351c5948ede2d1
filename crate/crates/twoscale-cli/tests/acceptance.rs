//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero when any criterion fails. Tolerances are the contract values.

use std::f64::consts::PI;
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use twoscale::corrector::*;
use twoscale::environment::*;
use twoscale::experiment::*;
use twoscale::grid::{MatrixField, SpaceTimeGrid};
use twoscale::linalg::SquareMatrix;
use twoscale::path_clt::*;
use twoscale::pde_solver::*;
use twoscale::stream_solver::*;

struct Outcome {
    pass: bool,
    detail: String,
}

impl Outcome {
    fn new(pass: bool, detail: impl Into<String>) -> Self {
        Self { pass, detail: detail.into() }
    }
}

struct Suite {
    failures: usize,
}

impl Suite {
    fn report(&mut self, id: u32, name: &str, elapsed: Duration, budget: Option<Duration>, outcome: Result<Outcome, String>) {
        let (mut pass, mut detail) = match outcome {
            Ok(o) => (o.pass, o.detail),
            Err(e) => (false, format!("error: {e}")),
        };
        if let Some(b) = budget {
            if elapsed > b {
                pass = false;
                detail.push_str(&format!("; over the {} s budget", b.as_secs()));
            }
        }
        if !pass {
            self.failures += 1;
        }
        println!("{} [{id:>2}] {name}: {detail} ({:.1} s)", if pass { "PASS" } else { "FAIL" }, elapsed.as_secs_f64());
    }

    fn run(&mut self, id: u32, name: &str, budget: Option<Duration>, f: impl FnOnce() -> Result<Outcome, String>) {
        let start = Instant::now();
        let outcome = guarded(f);
        self.report(id, name, start.elapsed(), budget, outcome);
    }
}

fn guarded<T>(f: impl FnOnce() -> Result<T, String>) -> Result<T, String> {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(r) => r,
        Err(p) => Err(p
            .downcast_ref::<String>()
            .cloned()
            .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
            .unwrap_or_else(|| "panic".into())),
    }
}

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn secs(s: u64) -> Option<Duration> {
    Some(Duration::from_secs(s))
}

fn grid(n_x: usize, n_t: usize, period: f64) -> SpaceTimeGrid {
    SpaceTimeGrid::new(2, n_x, n_t, 1.0, period).unwrap()
}

fn trivial_params() -> SpectralParams {
    SpectralParams { sigma_a: 0.0, sigma_s: 0.0, ..Default::default() }
}

/// a = (2 + sin 2πx₁) I, s = 0, b̄ = 0; harmonic mean of a₁₁ is √3.
fn laminate(n_x: usize, n_t: usize) -> EnvironmentRealization {
    let grid = grid(n_x, n_t, 1.0);
    let params = SpectralParams { sigma_a: 0.0, sigma_s: 0.0, lambda: 1.0, big_lambda: 3.0, ..Default::default() };
    let mut a = MatrixField::zeros(2, grid.len());
    for node in 0..grid.len() {
        let x1 = grid.unravel_spatial(node % grid.slice_len())[0] as f64 * grid.h();
        let alpha = 2.0 + (2.0 * PI * x1).sin();
        a.comp_mut(0, 0)[node] = alpha;
        a.comp_mut(1, 1)[node] = alpha;
    }
    let s = MatrixField::zeros(2, grid.len());
    let dt = 1.0 / n_t as f64;
    EnvironmentRealization::from_fields(grid, params, a, s, DriftSeries::zeros(2, n_t, dt, true), 0).unwrap()
}

fn max_abs_diff(u: &[f64], v: &[f64]) -> f64 {
    u.iter().zip(v).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn l2(v: &[f64]) -> f64 {
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

fn fmt_list(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:.3e}")).collect::<Vec<_>>().join(", ")
}

fn criterion_1() -> Result<Outcome, String> {
    let params = trivial_params();
    let env = build_environment(&grid(32, 16, 1.0), &params, 1, &BbarSpec::zero()).map_err(err)?;
    let id = SquareMatrix::scaled_identity(2, params.lambda);
    let solved = effective_matrix_with_correctors(&env, 1e-4, &SolveOptions::with_tol(1e-10)).map_err(err)?;
    let extrapolated = delta_extrapolation(&env, &[1e-2, 1e-3, 1e-4], 1e-10).map_err(err)?;
    let dev = [
        solved.matrix.a_bar.max_abs_diff(&id),
        solved.matrix.m_bar.max_abs_diff(&id),
        extrapolated.matrix.a_bar.max_abs_diff(&id),
        extrapolated.matrix.m_bar.max_abs_diff(&id),
    ]
    .into_iter()
    .fold(0.0, f64::max);
    let phi = solved
        .forward
        .iter()
        .chain(&solved.transpose)
        .flat_map(|c| c.phi.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()));
    Ok(Outcome::new(
        dev <= 1e-10 && phi <= 1e-12,
        format!("max |a_bar - lambda I|, |m_bar - lambda I| = {dev:.2e} (tol 1e-10), max |phi| = {phi:.2e} (tol 1e-12)"),
    ))
}

fn criterion_2() -> Result<Outcome, String> {
    let env = laminate(256, 4);
    let ex = delta_extrapolation(&env, &[1e-2, 1e-3, 1e-4], 1e-10).map_err(err)?;
    let harmonic = 3f64.sqrt();
    let rel = (ex.matrix.a_bar.get(0, 0) - harmonic).abs() / harmonic;
    Ok(Outcome::new(rel <= 1e-4, format!("a_bar_11 = {:.10}, harmonic mean {harmonic:.10}, rel {rel:.2e} (tol 1e-4)", ex.matrix.a_bar.get(0, 0))))
}

/// Per-environment results shared by criteria 3, 4 and 5.
struct EnsembleStats {
    gaps: Vec<f64>,
    /// Worst defect over directions at δ = 1e-2, 1e-4, 1e-6.
    defects: Vec<[f64; 3]>,
    lambda_mins: Vec<f64>,
    lambda: f64,
    duality_time: Duration,
    energy_time: Duration,
}

fn random_ensemble() -> Result<EnsembleStats, String> {
    let params = SpectralParams::default();
    let g = grid(128, 64, 1.0);
    let mut stats = EnsembleStats {
        gaps: vec![],
        defects: vec![],
        lambda_mins: vec![],
        lambda: params.lambda,
        duality_time: Duration::ZERO,
        energy_time: Duration::ZERO,
    };
    for r in 0..20 {
        let env = build_environment(&g, &params, 100 + r, &BbarSpec::zero()).map_err(err)?;
        let start = Instant::now();
        let solved = effective_matrix_with_correctors(&env, 1e-4, &SolveOptions::with_tol(1e-9)).map_err(err)?;
        stats.duality_time += start.elapsed();
        stats.gaps.push(solved.matrix.relative_duality_gap());
        stats.lambda_mins.push(solved.matrix.lambda_min);

        let start = Instant::now();
        let mut worst = [0.0f64; 3];
        for i in 0..2 {
            worst[1] = worst[1].max(energy_check(&solved.forward[i], &env));
            for (slot, delta) in [(0, 1e-2), (2, 1e-6)] {
                let opts = SolveOptions { initial: Some(solved.forward[i].phi.clone()), ..SolveOptions::with_tol(1e-10) };
                let cf = solve_corrector(&CorrectorProblem::unit(&env, i, delta, false), &opts).map_err(err)?;
                worst[slot] = worst[slot].max(energy_check(&cf, &env));
            }
        }
        stats.energy_time += start.elapsed();
        stats.defects.push(worst);
    }
    Ok(stats)
}

fn criterion_3(stats: &EnsembleStats) -> Outcome {
    let worst = stats.gaps.iter().cloned().fold(0.0, f64::max);
    Outcome::new(worst <= 1e-3, format!("max ||a_bar - m_bar^T||_max / ||a_bar||_max = {worst:.2e} over {} envs (tol 1e-3)", stats.gaps.len()))
}

fn criterion_4(stats: &EnsembleStats) -> Outcome {
    let at_fine = stats.defects.iter().map(|d| d[2]).fold(0.0, f64::max);
    let monotone = stats.defects.iter().all(|d| d[0] > d[1] && d[1] > d[2]);
    Outcome::new(
        at_fine <= 1e-3 && monotone,
        format!(
            "max defect at delta 1e-6 = {at_fine:.2e} (tol 1e-3); decreasing over delta 1e-2, 1e-4, 1e-6 on every env: {monotone}; worst per delta [{}]",
            fmt_list(&[0, 1, 2].map(|k| stats.defects.iter().map(|d| d[k]).fold(0.0, f64::max)))
        ),
    )
}

fn criterion_5(stats: Option<&EnsembleStats>) -> Result<Outcome, String> {
    let mut margins = Vec::new();
    let mut tested = 0;
    if let Some(stats) = stats {
        for &l in &stats.lambda_mins {
            margins.push(l - stats.lambda);
        }
        tested += stats.lambda_mins.len();
    }
    let strong = SpectralParams { sigma_s: 2.0, ..Default::default() };
    for seed in 0..4 {
        let env = build_environment(&grid(32, 16, 1.0), &strong, 500 + seed, &BbarSpec::zero()).map_err(err)?;
        for delta in [1e-2, 1e-4] {
            let m = effective_matrix(&env, delta, 1e-10).map_err(err)?;
            margins.push(m.lambda_min - strong.lambda);
            tested += 1;
        }
        let ex = delta_extrapolation(&env, &[1e-2, 1e-3, 1e-4], 1e-10).map_err(err)?;
        margins.push(ex.matrix.a_bar.symmetric_part().sym_eigenvalues()[0] - strong.lambda);
        tested += 1;
    }
    let lam = laminate(32, 4);
    let ex = delta_extrapolation(&lam, &[1e-2, 1e-3, 1e-4], 1e-10).map_err(err)?;
    margins.push(ex.matrix.a_bar.symmetric_part().sym_eigenvalues()[0] - lam.params.lambda);
    tested += 1;
    let worst = margins.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(
        worst >= 0.0,
        format!("min over {tested} effective matrices of lambda_min(sym a_bar) - lambda = {worst:.3e} (sigma_s up to 2)"),
    ))
}

fn shear(grid: &SpaceTimeGrid) -> Vec<Vec<f64>> {
    let ns = grid.slice_len();
    let mut b = vec![vec![0.0; grid.len()]; 2];
    for t in 0..grid.n_t {
        for p in 0..ns {
            let y = grid.unravel_spatial(p)[1] as f64 * grid.h();
            b[0][t * ns + p] = (2.0 * PI * y / grid.length).sin();
        }
    }
    b
}

fn criterion_6() -> Result<Outcome, String> {
    let g = SpaceTimeGrid::new(2, 32, 4, 2.5, 1.0).map_err(err)?;
    let rec = solve_stream_matrix(&shear(&g), &g).map_err(err)?;
    let ns = g.slice_len();
    let mut shear_err: f64 = 0.0;
    for t in 0..g.n_t {
        for p in 0..ns {
            let y = g.unravel_spatial(p)[1] as f64 * g.h();
            let exact = -(g.length / (2.0 * PI)) * (2.0 * PI * y / g.length).cos();
            shear_err = shear_err.max((rec.s_rec.comp(0, 1)[t * ns + p] - exact).abs());
        }
    }

    let mut residual: f64 = rec.relative_residual;
    let mut inputs = 1;
    let params = SpectralParams { sigma_s: 1.0, ..Default::default() };
    let ou = BbarSpec { model: BbarModel::Ou { tau: 0.3 }, amplitude: 1.0 };
    for seed in 0..5 {
        let env = build_environment(&grid(32, 8, 1.0), &params, 40 + seed, &ou).map_err(err)?;
        residual = residual.max(solve_stream_matrix(&drift_of(&env), &env.grid).map_err(err)?.relative_residual);
        inputs += 1;
    }
    let g3 = SpaceTimeGrid::new(3, 8, 4, 1.0, 1.0).map_err(err)?;
    for seed in 0..2 {
        let env = build_environment(&g3, &params, 60 + seed, &BbarSpec::zero()).map_err(err)?;
        residual = residual.max(solve_stream_matrix(&drift_of(&env), &g3).map_err(err)?.relative_residual);
        inputs += 1;
    }

    // O(α): the ratio ‖S_α − S₀‖/α settles to a constant as α → 0.
    let env = build_environment(&grid(32, 8, 1.0), &params, 70, &BbarSpec::zero()).map_err(err)?;
    let b = drift_of(&env);
    let s0 = solve_stream_matrix(&b, &env.grid).map_err(err)?.s_rec;
    let mut ratios = Vec::new();
    for alpha in [1e-2, 1e-3, 1e-4] {
        let sa = solve_stream_regularized(&b, &env.grid, alpha).map_err(err)?.s_rec;
        let diff: Vec<f64> = sa.comp(0, 1).iter().zip(s0.comp(0, 1)).map(|(x, y)| x - y).collect();
        ratios.push(l2(&diff) / alpha);
    }
    let spread = ratios.iter().cloned().fold(0.0, f64::max) / ratios.iter().cloned().fold(f64::INFINITY, f64::min);
    Ok(Outcome::new(
        shear_err <= 1e-9 && residual <= 1e-10 && spread <= 1.2 && ratios.iter().all(|r| r.is_finite() && *r > 0.0),
        format!(
            "shear error {shear_err:.2e} (tol 1e-9); max divergence residual {residual:.2e} over {inputs} inputs (tol 1e-10); \
             |S_alpha - S_0|/alpha at alpha 1e-2..1e-4 = [{}], spread {spread:.3} (<= 1.2)",
            fmt_list(&ratios)
        ),
    ))
}

fn criterion_7() -> Result<Outcome, String> {
    // Sup bound on an L-periodic mean-zero drift, L = 1.
    let dt = 1.0 / 64.0;
    let spec = BbarSpec { model: BbarModel::Periodic { period: 1.0 }, amplitude: 1.0 };
    let mut periodic = spec.sample_series(2, 65, dt, 3).map_err(err)?;
    periodic.values.truncate(64 * 2);
    periodic.periodic = true;
    let fine = 20_000;
    let l1: f64 = (0..fine)
        .map(|q| {
            let t = (q as f64 + 0.5) / fine as f64;
            periodic.eval(t).map(|v| v.iter().map(|x| x * x).sum::<f64>().sqrt()).unwrap_or(f64::NAN)
        })
        .sum::<f64>()
        / fine as f64;
    let mut sup_ratio: f64 = 0.0;
    for eps in [0.5, 0.25, 0.125] {
        let path = integrate_path(&periodic, eps, 1.0, eps * eps * dt / 2.0).map_err(err)?;
        let sup = (0..path.times.len()).map(|k| path.value(k).iter().map(|v| v * v).sum::<f64>().sqrt()).fold(0.0, f64::max);
        sup_ratio = sup_ratio.max(sup / (eps * l1));
    }

    // Homogenize with trivial coefficients; the limit has Σ = 0.
    let period = 1.0 / 16.0;
    let config = ExperimentConfig {
        eps_list: vec![0.5, 0.25, 0.125],
        ensemble: 20,
        sim_length: 3.0,
        resolution: SimResolution::Fixed { m: 128 },
        initial: Preset::gaussian(0.06),
        // T/ε² is a whole number of periods for every ε.
        horizon: 1.0 / 64.0,
        dt_max: 5e-5,
        limit_samples: 20,
        permutations: 199,
        ..ExperimentConfig::new(
            SpaceTimeGrid::new(2, 8, 16, 1.0, period).map_err(err)?,
            trivial_params(),
            BbarSpec { model: BbarModel::Periodic { period }, amplitude: 1.0 },
        )
    };
    let (report, _) = homogenization_run(&config).map_err(err)?;
    let p: Vec<f64> = report.per_eps.iter().map(|s| s.permutation_p_value).collect();
    let dist: Vec<f64> = report.per_eps.iter().map(|s| s.law_distance).collect();
    let sigma_zero = report.sigma_sq.max_abs() == 0.0;
    Ok(Outcome::new(
        sup_ratio <= 1.0 + 1e-6 && sigma_zero && p.iter().all(|&v| v >= 0.01),
        format!(
            "max sup|w| / (eps int|b|) = {sup_ratio:.4} (<= 1); Sigma = 0: {sigma_zero}; law distances [{}], permutation p-values [{}] (>= 0.01)",
            fmt_list(&dist),
            p.iter().map(|v| format!("{v:.3}")).collect::<Vec<_>>().join(", ")
        ),
    ))
}

/// Agreement of empirical, series and analytic ΣΣᵗ plus the Donsker verdict.
fn clt_check(spec: BbarSpec, dt: f64, lag: usize, seed: u64) -> Result<(bool, String), String> {
    // At ε = 1/32 the lattice atoms of the ±1 walk marginals (height ~ 2ε/√(2πtΣ²))
    // sit below the KS resolution at 500 paths.
    let (eps, horizon): (f64, f64) = (1.0 / 32.0, 1.0);
    let blocks = (horizon / (eps * eps)).round() as usize;
    let nodes = (blocks as f64 / dt).round() as usize + 1;
    let series = sample_drift_ensemble(&spec, 2, nodes, dt, seed, 500).map_err(err)?;
    let paths = integrate_ensemble(&series, eps, horizon, eps * eps * dt).map_err(err)?;
    let emp = empirical_sigma(&paths, horizon).map_err(err)?;
    let incs: Vec<BlockIncrements> = series.iter().map(|s| block_increments(s, blocks)).collect::<Result<_, _>>().map_err(err)?;
    let ser = estimate_sigma_series(&incs, lag).map_err(err)?;
    let analytic = spec.analytic_sigma_sq().ok_or("no closed form")?;
    let truth = SquareMatrix::scaled_identity(2, analytic);
    let mut worst: f64 = 0.0;
    for i in 0..2 {
        for j in 0..2 {
            let (e, s, t) = (emp.sigma_sq.get(i, j), ser.sigma_sq.get(i, j), truth.get(i, j));
            let (se_e, se_s) = (emp.stderr.get(i, j), ser.stderr.get(i, j));
            let joint = (se_e * se_e + se_s * se_s).sqrt();
            worst = worst.max((e - s).abs() / joint).max((e - t).abs() / se_e).max((s - t).abs() / se_s);
        }
    }
    let donsker = donsker_test(&paths, &truth, &[0.25, 0.5, 1.0]).map_err(err)?;
    let ok = worst <= 3.0 && donsker.verdict == Verdict::Pass;
    Ok((
        ok,
        format!(
            "{}: analytic {analytic:.4}, empirical diag [{:.4}, {:.4}], series diag [{:.4}, {:.4}], worst gap {worst:.2} SE (<= 3), Donsker {:?}",
            spec.model.label(),
            emp.sigma_sq.get(0, 0),
            emp.sigma_sq.get(1, 1),
            ser.sigma_sq.get(0, 0),
            ser.sigma_sq.get(1, 1),
            donsker.verdict
        ),
    ))
}

fn criterion_8() -> Result<Outcome, String> {
    let iid = clt_check(BbarSpec { model: BbarModel::RwInterp { block: 1.0 }, amplitude: 1.0 }, 0.125, 4, 21)?;
    let ou = clt_check(BbarSpec { model: BbarModel::Ou { tau: 0.3 }, amplitude: 0.8 }, 0.05, 8, 22)?;
    Ok(Outcome::new(iid.0 && ou.0, format!("{}; {}", iid.1, ou.1)))
}

fn bounds_hold(sol: &SolutionField) -> bool {
    sol.norms.energy_ok && sol.norms.linf <= sol.norms.comparison_bound * (1.0 + 1e-12)
}

fn criterion_9() -> Result<Outcome, String> {
    let ou = BbarSpec { model: BbarModel::Ou { tau: 0.2 }, amplitude: 1.0 };
    let mut worst: f64 = 0.0;
    let mut bounds = true;
    for seed in [4, 5, 6] {
        let env = build_environment(&grid(16, 16, 1.0), &SpectralParams::default(), seed, &ou).map_err(err)?;
        let sim = SimBox::new(2, 128, 1.0).map_err(err)?;
        let data = CauchyData::from_presets(sim, &Preset::gaussian(0.08), None, 0.02).map_err(err)?;
        let opts = PdeOptions::new(1e-4);
        let direct = solve_epsilon_pde(&env, 0.125, &data, &opts).map_err(err)?;
        let moved = solve_transported_pde(&env, 0.125, &data, &opts, None).map_err(err)?;
        let phys: Vec<Vec<f64>> = (0..moved.snapshots.len()).map(|k| moved.physical(k)).collect();
        let diff = space_time_l2_distance(&sim, &direct.times, &direct.snapshots, &phys);
        worst = worst.max(diff / space_time_l2_norm(&sim, &direct.times, &direct.snapshots));
        bounds &= bounds_hold(&direct) && bounds_hold(&moved);
    }
    Ok(Outcome::new(
        worst <= 1e-3 && bounds,
        format!("max relative space-time L2 gap at eps 1/8 = {worst:.2e} over 3 envs (tol 1e-3); energy and sup bounds hold: {bounds}"),
    ))
}

fn nonincreasing_within_band(v: &[f64], band: f64) -> bool {
    v.windows(2).all(|w| w[1] <= (1.0 + band) * w[0]) && v.last() < v.first()
}

fn criterion_10() -> Result<Outcome, String> {
    let params = SpectralParams { ell_t: 0.05, ..Default::default() };
    let config = ExperimentConfig {
        eps_list: vec![0.25, 0.125, 0.0625],
        ensemble: 20,
        sim_length: 1.0,
        resolution: SimResolution::Fixed { m: 256 },
        initial: Preset::gaussian(0.04),
        horizon: 0.0015,
        dt_max: 1e-4,
        dt_fraction: 0.5,
        limit_samples: 20,
        permutations: 19,
        ..ExperimentConfig::new(grid(16, 8, 0.25), params, BbarSpec::zero())
    };
    let (report, _) = homogenization_run(&config).map_err(err)?;
    let errors: Vec<f64> = report.per_eps.iter().map(|s| s.mean_pathwise_error).collect();
    let rel: Vec<f64> = report.per_eps.iter().map(|s| s.mean_relative_error).collect();
    let bounds = report.per_eps.iter().all(|s| s.energy_bounds_ok);
    Ok(Outcome::new(
        nonincreasing_within_band(&errors, 0.2) && bounds,
        format!(
            "mean pathwise L2 error over eps 1/4, 1/8, 1/16 = [{}] (relative [{}]); 20% band; energy bounds: {bounds}",
            fmt_list(&errors),
            fmt_list(&rel)
        ),
    ))
}

/// Displacements from the box center to node p and its nearest periodic images.
fn images(sim: &SimBox, p: usize) -> Vec<[f64; 2]> {
    let (x, c) = (sim.coords(p), sim.center());
    let mut out = Vec::new();
    for i in -2..=2 {
        for j in -2..=2 {
            out.push([x[0] - c[0] + i as f64 * sim.length, x[1] - c[1] + j as f64 * sim.length]);
        }
    }
    out
}

/// Periodized isotropic heat kernel applied to a unit-peak Gaussian bump.
fn heat_oracle(sim: &SimBox, width: f64, kappa: f64, t: f64) -> Vec<f64> {
    let s2 = width * width;
    let var = s2 + 2.0 * t * kappa;
    (0..sim.len())
        .map(|p| images(sim, p).iter().map(|[u, v]| s2 / var * (-(u * u + v * v) / (2.0 * var)).exp()).sum())
        .collect()
}

fn ito_mean_check() -> Result<(bool, String), String> {
    let sim = SimBox::new(2, 64, 2.0).map_err(err)?;
    let (width, horizon, n) = (0.1, 0.01, 400);
    let data = CauchyData::from_presets(sim, &Preset::gaussian(width), None, horizon).map_err(err)?;
    let opts = PdeOptions::new(horizon / 4.0);
    let id = SquareMatrix::identity(2);
    let mut sum = vec![0.0; sim.len()];
    let mut sum_sq = vec![0.0; sim.len()];
    for seed in 0..n {
        let u = solve_limit_spde(&id, &id, &data, seed, &opts).map_err(err)?.final_physical();
        for p in 0..sim.len() {
            sum[p] += u[p];
            sum_sq[p] += u[p] * u[p];
        }
    }
    let oracle = heat_oracle(&sim, width, 1.5, horizon);
    let plain = heat_oracle(&sim, width, 1.0, horizon);
    let mut worst: f64 = 0.0;
    for p in 0..sim.len() {
        let m = sum[p] / n as f64;
        let se = ((sum_sq[p] / n as f64 - m * m).max(0.0) / n as f64).sqrt();
        // Far-tail values (~1e-11 of the peak) are carried by rare large shifts, where
        // the sample SE is unreliable; 1e-9 of the unit peak is the absolute floor.
        worst = worst.max((m - oracle[p]).abs() / (5.0 * se + 1e-9));
    }
    let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
    let separated = max_abs_diff(&mean, &plain) > 10.0 * max_abs_diff(&mean, &oracle);
    Ok((
        worst <= 1.0 && separated,
        format!("Ito mean vs heat(a_bar + I/2): worst |mean - oracle| / (5 SE + 1e-9) = {worst:.2} (<= 1), uncorrected rejected: {separated}"),
    ))
}

fn criterion_11() -> Result<Outcome, String> {
    let config = ExperimentConfig {
        eps_list: vec![0.25, 0.125, 0.0625],
        ensemble: 300,
        sim_length: 3.0,
        resolution: SimResolution::Fixed { m: 128 },
        initial: Preset::gaussian(0.06),
        horizon: 0.01,
        dt_max: 2.5e-4,
        bbar_dt: 0.01,
        limit_samples: 300,
        permutations: 99,
        ..ExperimentConfig::new(grid(8, 8, 1.0), trivial_params(), BbarSpec { model: BbarModel::RwInterp { block: 0.16 }, amplitude: 1.0 })
    };
    let (report, _) = homogenization_run(&config).map_err(err)?;
    let dist: Vec<f64> = report.per_eps.iter().map(|s| s.law_distance).collect();
    let decreasing = dist.windows(2).all(|w| w[1] < w[0]);
    let (ito, ito_detail) = ito_mean_check()?;
    Ok(Outcome::new(
        decreasing && ito,
        format!("energy distance to the limit law over eps 1/4, 1/8, 1/16 = [{}], decreasing: {decreasing}; {ito_detail}", fmt_list(&dist)),
    ))
}

fn residual_setup() -> Result<ResidualSetup, String> {
    Ok(ResidualSetup {
        sim: SimBox::new(2, 256, 1.0).map_err(err)?,
        initial: Preset::gaussian(0.05),
        horizon: 0.002,
        dt: 1e-4,
        corrector_tol: 1e-10,
    })
}

fn criterion_12() -> Result<Outcome, String> {
    let setup = residual_setup()?;
    let psi = Preset::gaussian(0.08);
    let params = SpectralParams { ell_t: 0.05, ..Default::default() };
    let random = build_environment(&grid(16, 8, 0.25), &params, 7, &BbarSpec::zero()).map_err(err)?;
    let mut lines = Vec::new();
    let mut shrinks = true;
    for (name, env) in [("laminate", laminate(16, 4)), ("random", random.clone())] {
        let r = perturbed_test_residual(&env, 0.0625, 1e-4, &psi, &[0, 1], &setup).map_err(err)?;
        shrinks &= r.corrected < r.plain;
        lines.push(format!("{name}: corrected/plain = {:.3}", r.corrected / r.plain));
    }
    // δ-term / δ^{1/2} stays below the constant fixed at the largest δ.
    let mut ratios = vec![];
    for eps in [0.25, 0.125, 0.0625] {
        let row: Vec<f64> = [1e-1, 1e-2, 1e-3]
            .iter()
            .map(|&delta| perturbed_test_residual(&random, eps, delta, &psi, &[0, 1], &setup).map(|r| r.delta_term / delta.sqrt()))
            .collect::<Result<_, _>>()
            .map_err(err)?;
        ratios.push(row);
    }
    let c = ratios.iter().map(|r| r[0]).fold(0.0, f64::max);
    let bounded = ratios.iter().flatten().all(|&r| r.is_finite() && r <= c * (1.0 + 1e-12));
    Ok(Outcome::new(
        shrinks && bounded,
        format!(
            "eps 1/16: {}; delta-term/delta^1/2 over delta 1e-1, 1e-2, 1e-3 per eps 1/4, 1/8, 1/16: {} (C = {c:.3e})",
            lines.join(", "),
            ratios.iter().map(|r| format!("[{}]", fmt_list(r))).collect::<Vec<_>>().join(" ")
        ),
    ))
}

const PIPELINE_CONFIG: &str = r#"
[grid]
d = 2
n_x = 8
n_t = 8

[bbar]
model = "ou"
tau = 0.3
amplitude = 0.5

[experiment]
eps_list = [0.25, 0.125]
ensemble = 2
seed = 17
sim_length = 1.0
resolution = { rule = "fixed", m = 64 }
initial = { preset = "gaussian-bump", width = 0.08, amplitude = 1.0 }
horizon = 0.002
dt_max = 5e-4
limit_samples = 20
permutations = 19
"#;

fn pipeline(root: &Path, config: &Path) -> Result<(), String> {
    let stages: [&[&str]; 6] = [
        &["generate-env"],
        &["stream-recover"],
        &["solve-corrector", "--dump"],
        &["effective-matrix"],
        &["clt", "--paths", "200"],
        &["homogenize"],
    ];
    for args in stages {
        let out = Command::new(env!("CARGO_BIN_EXE_twoscale"))
            .arg("--config")
            .arg(config)
            .arg("--out")
            .arg(root.join(args[0]))
            .args(args)
            .output()
            .map_err(err)?;
        if !out.status.success() {
            return Err(format!("{} failed: {}", args[0], String::from_utf8_lossy(&out.stderr)));
        }
    }
    Ok(())
}

/// Relative paths of all files below `dir`, sorted.
fn listing(dir: &Path) -> Vec<String> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.push(path.strip_prefix(dir).unwrap().to_string_lossy().into_owned());
            }
        }
    }
    out.sort();
    out
}

fn criterion_13() -> Result<Outcome, String> {
    let tmp = tempfile::tempdir().map_err(err)?;
    let config = tmp.path().join("pipeline.toml");
    fs::write(&config, PIPELINE_CONFIG).map_err(err)?;
    let (a, b) = (tmp.path().join("first"), tmp.path().join("second"));
    pipeline(&a, &config)?;
    pipeline(&b, &config)?;
    let files = listing(&a);
    if files != listing(&b) {
        return Ok(Outcome::new(false, "file sets differ between runs"));
    }
    let mut differing = Vec::new();
    let mut compared = 0;
    for name in &files {
        let (x, y) = (fs::read(a.join(name)).map_err(err)?, fs::read(b.join(name)).map_err(err)?);
        if name.ends_with("manifest.json") {
            // Wall-clock fields aside, the manifests must agree.
            let strip = |bytes: &[u8]| -> Result<serde_json::Value, String> {
                let mut v: serde_json::Value = serde_json::from_slice(bytes).map_err(err)?;
                for key in ["started_unix_ms", "finished_unix_ms", "timing"] {
                    v.as_object_mut().ok_or("manifest is not an object")?.remove(key);
                }
                Ok(v)
            };
            if strip(&x)? != strip(&y)? {
                differing.push(name.clone());
            }
        } else {
            compared += 1;
            if x != y {
                differing.push(name.clone());
            }
        }
    }
    Ok(Outcome::new(
        differing.is_empty() && compared > 0,
        format!("{compared} output files byte-identical across two pipeline runs over 6 stages; differing: {differing:?}"),
    ))
}

fn main() -> ExitCode {
    let mut suite = Suite { failures: 0 };
    suite.run(1, "trivial-environment identity", secs(10), criterion_1);
    suite.run(2, "laminate oracle", secs(120), criterion_2);

    let start = Instant::now();
    let ensemble = guarded(random_ensemble);
    let total = start.elapsed();
    match &ensemble {
        Ok(stats) => {
            suite.report(3, "duality", stats.duality_time, secs(1800), Ok(criterion_3(stats)));
            suite.report(4, "energy equality", stats.energy_time, None, Ok(criterion_4(stats)));
        }
        Err(e) => {
            suite.report(3, "duality", total, None, Err(e.clone()));
            suite.report(4, "energy equality", total, None, Err(e.clone()));
        }
    }
    suite.run(5, "ellipticity certificate", None, || criterion_5(ensemble.as_ref().ok()));
    suite.run(6, "stream recovery", secs(60), criterion_6);
    suite.run(7, "periodic-drift degeneracy", None, criterion_7);
    suite.run(8, "FCLT covariance", secs(300), criterion_8);
    suite.run(9, "formulation equivalence", None, criterion_9);
    suite.run(10, "two-scale trend", secs(7200), criterion_10);
    suite.run(11, "transport limit", None, criterion_11);
    suite.run(12, "perturbed test function", None, criterion_12);
    suite.run(13, "determinism", None, criterion_13);

    println!("acceptance: {} of 13 criteria passed", 13 - suite.failures);
    if suite.failures == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
