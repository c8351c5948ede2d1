//! Rescaled drift paths `w^ε(t) = ε⁻¹∫₀ᵗ b̄(s/ε²)ds`, block increments, the
//! covariance Σ of their Brownian limit, and distributional checks.

use crate::environment::{BbarSpec, DriftSeries, EnvError};
use crate::linalg::SquareMatrix;
use crate::rng;
use serde::Serialize;
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

pub const MIN_SERIES_ENSEMBLE: usize = 100;
pub const MIN_PATHS: usize = 200;
pub const TEST_LEVEL: f64 = 0.01;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PathError {
    #[error("time step {dt} too coarse: need dt <= eps^2 * spacing = {limit}")]
    Resolution { dt: f64, limit: f64 },
    #[error("need at least {need} samples, got {got}")]
    InsufficientSamples { got: usize, need: usize },
    #[error("drift series ends at rescaled time {available}, {needed} required")]
    Horizon { needed: f64, available: f64 },
    #[error("invalid input: {0}")]
    Invalid(String),
    #[error(transparent)]
    Env(#[from] EnvError),
}

/// Running integral of the piecewise-linear interpolant of a drift series,
/// i.e. the composite trapezoid rule on its nodes.
#[derive(Debug, Clone)]
pub struct Primitive<'a> {
    series: &'a DriftSeries,
    /// Integral from 0 to node n, `[n * d + i]`; one extra node for periodic wrap.
    cumulative: Vec<f64>,
}

impl<'a> Primitive<'a> {
    pub fn new(series: &'a DriftSeries) -> Self {
        let d = series.d;
        let n = series.len();
        let nodes = if series.periodic { n + 1 } else { n };
        let mut cumulative = vec![0.0; nodes * d];
        for k in 1..nodes {
            let (a, b) = (series.node(k - 1), series.node(k % n));
            for i in 0..d {
                cumulative[k * d + i] = cumulative[(k - 1) * d + i] + 0.5 * series.dt * (a[i] + b[i]);
            }
        }
        Self { series, cumulative }
    }

    /// ∫₀^τ b̄, or `None` past the end of an open series.
    pub fn at(&self, tau: f64) -> Option<Vec<f64>> {
        let s = self.series;
        let d = s.d;
        let n = s.len();
        let u = tau / s.dt;
        let (whole, u) = if s.periodic {
            let periods = (u / n as f64).floor();
            (periods, u - periods * n as f64)
        } else {
            if u < -1e-9 || u > (n - 1) as f64 + 1e-9 {
                return None;
            }
            (0.0, u.clamp(0.0, (n - 1) as f64))
        };
        let last = if s.periodic { n } else { n - 1 };
        let i0 = (u.floor() as usize).min(last.saturating_sub(1));
        let frac = u - i0 as f64;
        let (a, b) = (s.node(i0 % n), s.node((i0 + 1) % n));
        Some(
            (0..d)
                .map(|i| {
                    let period_total = if s.periodic { self.cumulative[n * d + i] } else { 0.0 };
                    whole * period_total
                        + self.cumulative[i0 * d + i]
                        + s.dt * (frac * a[i] + 0.5 * frac * frac * (b[i] - a[i]))
                })
                .collect(),
        )
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct DriftPath {
    pub eps: f64,
    pub d: usize,
    pub times: Vec<f64>,
    /// `values[k * d + i]` = w_i(times[k]).
    pub values: Vec<f64>,
    pub source_seed: u64,
}

impl DriftPath {
    pub fn horizon(&self) -> f64 {
        *self.times.last().unwrap_or(&0.0)
    }

    pub fn value(&self, k: usize) -> &[f64] {
        &self.values[k * self.d..(k + 1) * self.d]
    }

    /// Linear interpolation, clamped to the time range.
    pub fn eval(&self, t: f64) -> Vec<f64> {
        let n = self.times.len();
        if n == 1 || t <= self.times[0] {
            return self.value(0).to_vec();
        }
        if t >= self.times[n - 1] {
            return self.value(n - 1).to_vec();
        }
        let k = self.times.partition_point(|&s| s <= t).clamp(1, n - 1);
        let (t0, t1) = (self.times[k - 1], self.times[k]);
        let f = (t - t0) / (t1 - t0);
        self.value(k - 1).iter().zip(self.value(k)).map(|(a, b)| (1.0 - f) * a + f * b).collect()
    }
}

/// Exact integral of the interpolated drift, reported on a uniform grid of
/// step ≤ `dt` ending at T.
pub fn integrate_path(bbar: &DriftSeries, eps: f64, horizon: f64, dt: f64) -> Result<DriftPath, PathError> {
    if !(eps > 0.0 && horizon >= 0.0 && dt > 0.0) {
        return Err(PathError::Invalid(format!("need eps > 0, T >= 0, dt > 0; got {eps}, {horizon}, {dt}")));
    }
    let limit = eps * eps * bbar.dt;
    if dt > limit * (1.0 + 1e-12) {
        return Err(PathError::Resolution { dt, limit });
    }
    let needed = horizon / (eps * eps);
    if needed > bbar.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(PathError::Horizon { needed, available: bbar.horizon() });
    }
    let steps = ((horizon / dt).ceil() as usize).max(1);
    let step = horizon / steps as f64;
    let prim = Primitive::new(bbar);
    let d = bbar.d;
    let mut times = Vec::with_capacity(steps + 1);
    let mut values = Vec::with_capacity((steps + 1) * d);
    for k in 0..=steps {
        let t = if k == steps { horizon } else { k as f64 * step };
        let tau = (t / (eps * eps)).min(bbar.horizon());
        let integral = prim.at(tau).expect("horizon checked");
        times.push(t);
        values.extend(integral.iter().map(|v| eps * v));
    }
    Ok(DriftPath { eps, d, times, values, source_seed: 0 })
}

#[derive(Debug, Clone, Serialize)]
pub struct BlockIncrements {
    /// `x[j]` = ∫_j^{j+1} b̄.
    pub x: Vec<Vec<f64>>,
    pub count: usize,
}

/// Unit-length block integrals over [0, horizon].
pub fn block_increments(bbar: &DriftSeries, horizon: usize) -> Result<BlockIncrements, PathError> {
    if horizon as f64 > bbar.horizon() * (1.0 + 1e-12) + 1e-12 {
        return Err(PathError::Horizon { needed: horizon as f64, available: bbar.horizon() });
    }
    let prim = Primitive::new(bbar);
    let mut prev = prim.at(0.0).expect("start");
    let mut x = Vec::with_capacity(horizon);
    for j in 1..=horizon {
        let cur = prim.at(j as f64).expect("horizon checked");
        x.push(cur.iter().zip(&prev).map(|(a, b)| a - b).collect());
        prev = cur;
    }
    Ok(BlockIncrements { x, count: horizon })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum EstimateMethod {
    Series,
    Empirical,
}

#[derive(Debug, Clone, Serialize)]
pub struct CovarianceEstimate {
    /// PSD projection of the raw estimate of ΣΣᵗ.
    pub sigma_sq: SquareMatrix,
    pub stderr: SquareMatrix,
    pub method: EstimateMethod,
    pub truncation: Option<usize>,
    /// Largest entry of the last retained lag term (series only).
    pub tail: f64,
    /// Frobenius distance between the raw estimate and its PSD projection.
    pub projection_shift: f64,
    pub warnings: Vec<String>,
}

fn mean_and_stderr(samples: &[SquareMatrix]) -> (SquareMatrix, SquareMatrix) {
    let n = samples[0].n;
    let m = samples.len() as f64;
    let mut mean = SquareMatrix::zeros(n);
    let mut se = SquareMatrix::zeros(n);
    for i in 0..n {
        for j in 0..n {
            let mu = samples.iter().map(|s| s.get(i, j)).sum::<f64>() / m;
            let var = if m > 1.0 {
                samples.iter().map(|s| (s.get(i, j) - mu).powi(2)).sum::<f64>() / (m - 1.0)
            } else {
                0.0
            };
            mean.set(i, j, mu);
            se.set(i, j, (var / m).sqrt());
        }
    }
    (mean, se)
}

fn finish(raw: SquareMatrix, stderr: SquareMatrix, method: EstimateMethod) -> CovarianceEstimate {
    let sym = raw.symmetric_part();
    let sigma_sq = sym.psd_projection();
    let projection_shift = sym.lincomb(1.0, &sigma_sq, -1.0).data.iter().map(|x| x * x).sum::<f64>().sqrt();
    CovarianceEstimate {
        sigma_sq,
        stderr,
        method,
        truncation: None,
        tail: 0.0,
        projection_shift,
        warnings: Vec::new(),
    }
}

/// Σ² ≈ C₀ + Σ_{h=1}^{lag_max−1} (C_h + C_hᵗ) with C_h = E[x₀ x_hᵗ], the
/// expectation taken over positions within each member and then over members.
/// Standard errors come from the spread of the per-member estimates.
pub fn estimate_sigma_series(ensemble: &[BlockIncrements], lag_max: usize) -> Result<CovarianceEstimate, PathError> {
    if ensemble.len() < MIN_SERIES_ENSEMBLE {
        return Err(PathError::InsufficientSamples { got: ensemble.len(), need: MIN_SERIES_ENSEMBLE });
    }
    let count = ensemble.iter().map(|b| b.count).min().unwrap_or(0);
    if lag_max == 0 || lag_max >= count {
        return Err(PathError::Invalid(format!("lag_max must lie in [1, {count}), got {lag_max}")));
    }
    let d = ensemble[0].x.first().map_or(0, Vec::len);
    let mut members = Vec::with_capacity(ensemble.len());
    let mut last_terms = Vec::with_capacity(ensemble.len());
    for blocks in ensemble {
        let mut est = SquareMatrix::zeros(d);
        let mut last = SquareMatrix::zeros(d);
        for h in 0..lag_max {
            let pairs = blocks.count - h;
            let mut c = SquareMatrix::zeros(d);
            for j in 0..pairs {
                let (x0, xh) = (&blocks.x[j], &blocks.x[j + h]);
                for a in 0..d {
                    for b in 0..d {
                        c.data[a * d + b] += x0[a] * xh[b] / pairs as f64;
                    }
                }
            }
            let term = if h == 0 { c } else { c.lincomb(1.0, &c.transpose(), 1.0) };
            est = est.lincomb(1.0, &term, 1.0);
            if h == lag_max - 1 {
                last = term;
            }
        }
        members.push(est);
        last_terms.push(last);
    }
    let (raw, stderr) = mean_and_stderr(&members);
    let (last_mean, _) = mean_and_stderr(&last_terms);
    let mut out = finish(raw, stderr, EstimateMethod::Series);
    out.truncation = Some(lag_max);
    out.tail = if lag_max > 1 { last_mean.max_abs() } else { 0.0 };
    let se = out.stderr.max_abs();
    if out.tail > se {
        out.warnings.push(format!(
            "lag tail {:.3e} has not decayed below the standard error {:.3e}; mixing may be too slow for lag_max = {lag_max}",
            out.tail, se
        ));
    }
    Ok(out)
}

/// Cov(w(T))/T over an ensemble of paths, with delta-method standard errors.
pub fn empirical_sigma(paths: &[DriftPath], horizon: f64) -> Result<CovarianceEstimate, PathError> {
    if paths.len() < MIN_PATHS {
        return Err(PathError::InsufficientSamples { got: paths.len(), need: MIN_PATHS });
    }
    if !(horizon > 0.0) {
        return Err(PathError::Invalid(format!("horizon must be positive, got {horizon}")));
    }
    let d = paths[0].d;
    let terminal: Vec<Vec<f64>> = paths.iter().map(|p| p.eval(horizon)).collect();
    let n = terminal.len() as f64;
    let mu: Vec<f64> = (0..d).map(|i| terminal.iter().map(|w| w[i]).sum::<f64>() / n).collect();
    let mut raw = SquareMatrix::zeros(d);
    let mut se = SquareMatrix::zeros(d);
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = terminal.iter().map(|w| (w[i] - mu[i]) * (w[j] - mu[j])).collect();
            let c = prods.iter().sum::<f64>() / (n - 1.0);
            let m = prods.iter().sum::<f64>() / n;
            let v = prods.iter().map(|p| (p - m).powi(2)).sum::<f64>() / (n - 1.0);
            raw.set(i, j, c / horizon);
            se.set(i, j, (v / n).sqrt() / horizon);
        }
    }
    Ok(finish(raw, se, EstimateMethod::Empirical))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Verdict {
    Pass,
    Fail,
    DeterministicZero,
}

#[derive(Debug, Clone, Serialize)]
pub struct MarginalTest {
    pub time: f64,
    pub component: usize,
    pub ks_statistic: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct IncrementTest {
    /// Increments over [t_{m−1}, t_m] and [t_m, t_{m+1}].
    pub interval: usize,
    pub component: usize,
    pub correlation: f64,
    pub p_value: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct DonskerReport {
    pub verdict: Verdict,
    pub marginals: Vec<MarginalTest>,
    pub increments: Vec<IncrementTest>,
    /// Per-test level after the Bonferroni correction.
    pub per_test_level: f64,
}

/// Asymptotic Kolmogorov p-value with Stephens' small-sample correction.
pub fn kolmogorov_p_value(statistic: f64, n: usize) -> f64 {
    let sn = (n as f64).sqrt();
    let lambda = (sn + 0.12 + 0.11 / sn) * statistic;
    if lambda < 1e-3 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=200 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// One-sample KS statistic of `data` against a continuous cdf.
pub fn ks_statistic(data: &[f64], cdf: impl Fn(f64) -> f64) -> f64 {
    let mut xs = data.to_vec();
    xs.sort_by(f64::total_cmp);
    let n = xs.len() as f64;
    xs.iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            (f - i as f64 / n).abs().max(((i + 1) as f64 / n - f).abs())
        })
        .fold(0.0, f64::max)
}

fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    let (ma, mb) = (a.iter().sum::<f64>() / n, b.iter().sum::<f64>() / n);
    let cov: f64 = a.iter().zip(b).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = a.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = b.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        0.0
    } else {
        cov / (va * vb).sqrt()
    }
}

/// Componentwise KS tests of w(t)/√t against N(0, Σ²_ii) at each marginal
/// time, plus Fisher-z tests for zero lag-1 correlation between consecutive
/// non-overlapping increments. All tests share a family-wise level of 0.01.
pub fn donsker_test(paths: &[DriftPath], sigma_sq: &SquareMatrix, marginal_times: &[f64]) -> Result<DonskerReport, PathError> {
    if paths.len() < MIN_PATHS {
        return Err(PathError::InsufficientSamples { got: paths.len(), need: MIN_PATHS });
    }
    if sigma_sq.sym_eigenvalues()[0] < -1e-12 * sigma_sq.max_abs().max(1.0) {
        return Err(PathError::Invalid("sigma_sq must be positive semidefinite".into()));
    }
    if marginal_times.is_empty() || marginal_times.iter().any(|&t| !(t > 0.0)) || marginal_times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(PathError::Invalid("marginal times must be positive and increasing".into()));
    }
    let d = paths[0].d;
    let samples: Vec<Vec<Vec<f64>>> =
        marginal_times.iter().map(|&t| paths.iter().map(|p| p.eval(t)).collect()).collect();
    if samples.iter().flatten().flatten().all(|&v| v == 0.0) {
        return Ok(DonskerReport {
            verdict: Verdict::DeterministicZero,
            marginals: Vec::new(),
            increments: Vec::new(),
            per_test_level: TEST_LEVEL,
        });
    }
    let n_tests = marginal_times.len() * d + (marginal_times.len() - 1) * d;
    let level = TEST_LEVEL / n_tests as f64;
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let mut marginals = Vec::new();
    for (m, &t) in marginal_times.iter().enumerate() {
        for i in 0..d {
            let data: Vec<f64> = samples[m].iter().map(|w| w[i] / t.sqrt()).collect();
            let var = sigma_sq.get(i, i);
            let stat = if var > 0.0 {
                let sd = var.sqrt();
                ks_statistic(&data, |x| std_normal.cdf(x / sd))
            } else {
                ks_statistic(&data, |x| if x >= 0.0 { 1.0 } else { 0.0 })
            };
            marginals.push(MarginalTest { time: t, component: i, ks_statistic: stat, p_value: kolmogorov_p_value(stat, data.len()) });
        }
    }

    let mut increments = Vec::new();
    for m in 1..marginal_times.len() {
        for i in 0..d {
            let first: Vec<f64> = (0..paths.len())
                .map(|p| samples[m - 1][p][i] - if m >= 2 { samples[m - 2][p][i] } else { 0.0 })
                .collect();
            let second: Vec<f64> = (0..paths.len()).map(|p| samples[m][p][i] - samples[m - 1][p][i]).collect();
            let r = correlation(&first, &second).clamp(-0.999_999, 0.999_999);
            let z = r.atanh() * ((paths.len() as f64) - 3.0).sqrt();
            let p_value = 2.0 * (1.0 - std_normal.cdf(z.abs()));
            increments.push(IncrementTest { interval: m, component: i, correlation: r, p_value });
        }
    }
    let pass = marginals.iter().map(|t| t.p_value).chain(increments.iter().map(|t| t.p_value)).all(|p| p >= level);
    Ok(DonskerReport { verdict: if pass { Verdict::Pass } else { Verdict::Fail }, marginals, increments, per_test_level: level })
}

#[derive(Debug, Clone, Serialize)]
pub struct MomentReport {
    pub delta_exp: f64,
    /// E|x_j|^{2+δ} over all members and blocks.
    pub moment: f64,
    /// The same moment from the first half of the ensemble.
    pub moment_half: f64,
    /// Mean over members of max_j ∫_{j-1}^j |b̄| / √j for the first and
    /// second halves of the block range.
    pub early_max: f64,
    pub late_max: f64,
    /// late_max / early_max.
    pub growth_ratio: f64,
    pub growth_flagged: bool,
}

/// Growth ratio above which the tail diagnostic flags non-summable maxima.
pub const GROWTH_THRESHOLD: f64 = 0.25;

/// Trapezoid integral of |b̄| over [a, b] using the series nodes inside.
fn abs_integral(series: &DriftSeries, a: f64, b: f64) -> f64 {
    let norm = |t: f64| series.eval(t).map_or(0.0, |v| v.iter().map(|x| x * x).sum::<f64>().sqrt());
    let mut pts = vec![a];
    let first = (a / series.dt).floor() as i64 + 1;
    let mut k = first;
    while (k as f64) * series.dt < b - 1e-12 * series.dt {
        pts.push(k as f64 * series.dt);
        k += 1;
    }
    pts.push(b);
    pts.windows(2).map(|w| 0.5 * (w[1] - w[0]) * (norm(w[0]) + norm(w[1]))).sum()
}

/// (2+δ)-moment of block integrals and the Borel-Cantelli style tail check.
pub fn moment_check(ensemble: &[DriftSeries], horizon: usize, delta_exp: f64) -> Result<MomentReport, PathError> {
    if !(delta_exp > 0.0 && delta_exp < 1.0) {
        return Err(PathError::Invalid(format!("delta_exp must lie in (0, 1), got {delta_exp}")));
    }
    if ensemble.len() < 2 || horizon < 2 {
        return Err(PathError::InsufficientSamples { got: ensemble.len().min(horizon), need: 2 });
    }
    let p = 2.0 + delta_exp;
    let mut moments = Vec::with_capacity(ensemble.len());
    let mut early = 0.0;
    let mut late = 0.0;
    for series in ensemble {
        let blocks = block_increments(series, horizon)?;
        moments.push(blocks.x.iter().map(|x| x.iter().map(|v| v * v).sum::<f64>().sqrt().powf(p)).sum::<f64>() / horizon as f64);
        let scaled: Vec<f64> =
            (1..=horizon).map(|j| abs_integral(series, (j - 1) as f64, j as f64) / (j as f64).sqrt()).collect();
        let half = horizon / 2;
        early += scaled[..half].iter().copied().fold(0.0, f64::max);
        late += scaled[half..].iter().copied().fold(0.0, f64::max);
    }
    let m = ensemble.len() as f64;
    let moment = moments.iter().sum::<f64>() / m;
    let half = ensemble.len() / 2;
    let moment_half = moments[..half].iter().sum::<f64>() / half as f64;
    let (early, late) = (early / m, late / m);
    let growth_ratio = if early > 0.0 { late / early } else { 0.0 };
    Ok(MomentReport {
        delta_exp,
        moment,
        moment_half,
        early_max: early,
        late_max: late,
        growth_ratio,
        growth_flagged: growth_ratio > GROWTH_THRESHOLD,
    })
}

/// Independent open drift series for an ensemble, seeded per member.
pub fn sample_drift_ensemble(
    spec: &BbarSpec,
    d: usize,
    nodes: usize,
    dt: f64,
    seed: u64,
    count: usize,
) -> Result<Vec<DriftSeries>, PathError> {
    (0..count)
        .map(|m| Ok(spec.sample_series(d, nodes, dt, rng::derive_seed(seed, "drift-ensemble", m as u64))?))
        .collect()
}

/// Rescaled paths of an ensemble of drift series.
pub fn integrate_ensemble(series: &[DriftSeries], eps: f64, horizon: f64, dt: f64) -> Result<Vec<DriftPath>, PathError> {
    series.iter().map(|s| integrate_path(s, eps, horizon, dt)).collect()
}
