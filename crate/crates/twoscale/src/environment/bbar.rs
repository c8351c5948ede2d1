//! Spatially homogeneous drift b̄(t): sampled series and generating models.

use super::density::sample_periodic_series;
use super::EnvError;
use crate::rng;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

/// Uniformly sampled d-vector series, `values[n * d + i]` = b̄_i(n·dt).
/// Periodic series wrap after `len()` nodes; open series are defined on
/// `[0, (len-1)·dt]` and evaluated by linear interpolation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DriftSeries {
    pub d: usize,
    pub dt: f64,
    pub periodic: bool,
    pub values: Vec<f64>,
}

impl DriftSeries {
    pub fn zeros(d: usize, n: usize, dt: f64, periodic: bool) -> Self {
        Self { d, dt, periodic, values: vec![0.0; n * d] }
    }

    pub fn len(&self) -> usize {
        self.values.len() / self.d.max(1)
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn node(&self, n: usize) -> &[f64] {
        &self.values[n * self.d..(n + 1) * self.d]
    }

    /// Last time at which the series is defined.
    pub fn horizon(&self) -> f64 {
        if self.periodic {
            f64::INFINITY
        } else {
            (self.len().saturating_sub(1)) as f64 * self.dt
        }
    }

    /// Linear interpolation at time `t`; `None` outside an open series.
    pub fn eval(&self, t: f64) -> Option<Vec<f64>> {
        let n = self.len();
        let u = t / self.dt;
        let (i0, frac) = if self.periodic {
            let period = n as f64;
            let u = u.rem_euclid(period);
            let i0 = (u.floor() as usize).min(n - 1);
            (i0, u - i0 as f64)
        } else {
            if u < -1e-9 || u > (n - 1) as f64 + 1e-9 {
                return None;
            }
            let u = u.clamp(0.0, (n - 1) as f64);
            let i0 = (u.floor() as usize).min(n.saturating_sub(2));
            (i0, u - i0 as f64)
        };
        let i1 = if self.periodic { (i0 + 1) % n } else { (i0 + 1).min(n - 1) };
        let (a, b) = (self.node(i0), self.node(i1));
        Some(a.iter().zip(b).map(|(x, y)| (1.0 - frac) * x + frac * y).collect())
    }

    /// Temporal mean over one period (periodic) or by the trapezoid rule.
    pub fn mean(&self) -> Vec<f64> {
        let n = self.len();
        let mut m = vec![0.0; self.d];
        if n == 0 {
            return m;
        }
        if self.periodic {
            for k in 0..n {
                for (mi, v) in m.iter_mut().zip(self.node(k)) {
                    *mi += v / n as f64;
                }
            }
        } else if n > 1 {
            for k in 0..n {
                let w = if k == 0 || k == n - 1 { 0.5 } else { 1.0 };
                for (mi, v) in m.iter_mut().zip(self.node(k)) {
                    *mi += w * v / (n - 1) as f64;
                }
            }
        }
        m
    }

    pub fn subtract_mean(&mut self) {
        let m = self.mean();
        for chunk in self.values.chunks_mut(self.d) {
            for (v, mi) in chunk.iter_mut().zip(&m) {
                *v -= mi;
            }
        }
    }

    /// Largest Euclidean norm over the nodes.
    pub fn max_norm(&self) -> f64 {
        self.values
            .chunks(self.d)
            .map(|c| c.iter().map(|x| x * x).sum::<f64>().sqrt())
            .fold(0.0, f64::max)
    }

    pub fn is_zero(&self) -> bool {
        self.values.iter().all(|&v| v == 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "kebab-case")]
pub enum BbarModel {
    Zero,
    /// Single harmonic with random phase per component.
    Periodic { period: f64 },
    /// Stationary Ornstein-Uhlenbeck process with correlation time `tau`.
    Ou { tau: f64 },
    /// Derivative of a smoothly interpolated ±1 random walk with one step
    /// per `block` time units.
    RwInterp { block: f64 },
}

impl BbarModel {
    pub fn label(&self) -> &'static str {
        match self {
            Self::Zero => "zero",
            Self::Periodic { .. } => "periodic",
            Self::Ou { .. } => "ou",
            Self::RwInterp { .. } => "rw-interp",
        }
    }
}

/// A drift model with its amplitude (standard deviation per component for
/// `periodic` and `ou`, step size per unit block for `rw-interp`).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BbarSpec {
    pub model: BbarModel,
    pub amplitude: f64,
}

impl BbarSpec {
    pub fn zero() -> Self {
        Self { model: BbarModel::Zero, amplitude: 0.0 }
    }

    pub fn validate(&self) -> Result<(), EnvError> {
        let bad = |what: &str, v: f64| EnvError::InvalidDrift(format!("{what} must be finite and positive, got {v}"));
        if !(self.amplitude.is_finite() && self.amplitude >= 0.0) {
            return Err(EnvError::InvalidDrift(format!("amplitude must be non-negative, got {}", self.amplitude)));
        }
        match self.model {
            BbarModel::Zero => Ok(()),
            BbarModel::Periodic { period } if !(period.is_finite() && period > 0.0) => Err(bad("period", period)),
            BbarModel::Ou { tau } if !(tau.is_finite() && tau > 0.0) => Err(bad("tau", tau)),
            BbarModel::RwInterp { block } if !(block.is_finite() && block > 0.0) => Err(bad("block", block)),
            _ => Ok(()),
        }
    }

    /// Asymptotic covariance rate ΣΣᵗ per component (the matrix is this
    /// multiple of the identity), where known in closed form.
    pub fn analytic_sigma_sq(&self) -> Option<f64> {
        let a2 = self.amplitude * self.amplitude;
        match self.model {
            BbarModel::Zero | BbarModel::Periodic { .. } => Some(0.0),
            BbarModel::Ou { tau } => Some(2.0 * a2 * tau),
            BbarModel::RwInterp { block } => Some(a2 * block),
        }
    }

    /// Open series on `[0, (n-1)·dt]` for path statistics.
    pub fn sample_series(&self, d: usize, n: usize, dt: f64, seed: u64) -> Result<DriftSeries, EnvError> {
        self.validate()?;
        let mut out = DriftSeries::zeros(d, n, dt, false);
        let amp = self.amplitude;
        match self.model {
            BbarModel::Zero => {}
            BbarModel::Periodic { period } => {
                let mut r = rng::stream(seed, "bbar-periodic", 0);
                let phases: Vec<f64> = (0..d).map(|_| r.gen::<f64>() * 2.0 * PI).collect();
                for k in 0..n {
                    let t = k as f64 * dt;
                    for i in 0..d {
                        out.values[k * d + i] = amp * 2f64.sqrt() * (2.0 * PI * t / period + phases[i]).sin();
                    }
                }
            }
            BbarModel::Ou { tau } => {
                let mut r = rng::stream(seed, "bbar-ou", 0);
                let rho = (-dt / tau).exp();
                let innov = amp * (1.0 - rho * rho).sqrt();
                let mut x: Vec<f64> = (0..d).map(|_| amp * Distribution::<f64>::sample(&StandardNormal, &mut r)).collect();
                for k in 0..n {
                    out.values[k * d..(k + 1) * d].copy_from_slice(&x);
                    for xi in x.iter_mut() {
                        let z: f64 = StandardNormal.sample(&mut r);
                        *xi = rho * *xi + innov * z;
                    }
                }
            }
            BbarModel::RwInterp { block } => {
                let per = nodes_per_block(block, dt)?;
                fill_random_walk(&mut out, per, block, amp, seed);
            }
        }
        Ok(out)
    }

    /// Periodic series on the `n_t` temporal nodes of a torus of period
    /// `period`, de-meaned.
    pub fn sample_torus(&self, d: usize, n_t: usize, period: f64, seed: u64) -> Result<DriftSeries, EnvError> {
        self.validate()?;
        let dt = period / n_t as f64;
        let mut out = DriftSeries::zeros(d, n_t, dt, true);
        let amp = self.amplitude;
        match self.model {
            BbarModel::Zero => {}
            BbarModel::Periodic { period: p } => {
                let ratio = period / p;
                if (ratio - ratio.round()).abs() > 1e-9 * ratio.max(1.0) || ratio.round() < 1.0 {
                    return Err(EnvError::InvalidDrift(format!(
                        "drift period {p} does not divide the temporal period {period}"
                    )));
                }
                let open = self.sample_series(d, n_t, dt, seed)?;
                out.values = open.values;
            }
            BbarModel::Ou { tau } => {
                let cov: Vec<f64> = (0..n_t)
                    .map(|i| amp * amp * (-(i.min(n_t - i) as f64 * dt) / tau).exp())
                    .collect();
                for i in 0..d {
                    let comp = sample_periodic_series(&cov, seed, &format!("bbar-ou-torus:{i}"));
                    for (k, v) in comp.into_iter().enumerate() {
                        out.values[k * d + i] = v;
                    }
                }
            }
            BbarModel::RwInterp { block } => {
                let per = nodes_per_block(block, dt)?;
                if n_t % per != 0 {
                    return Err(EnvError::InvalidDrift(format!(
                        "random-walk block {block} does not divide the temporal period {period}"
                    )));
                }
                fill_random_walk(&mut out, per, block, amp, seed);
            }
        }
        out.subtract_mean();
        Ok(out)
    }
}

fn nodes_per_block(block: f64, dt: f64) -> Result<usize, EnvError> {
    let r = block / dt;
    if (r - r.round()).abs() > 1e-9 * r.max(1.0) || r.round() < 2.0 {
        return Err(EnvError::InvalidDrift(format!(
            "random-walk block {block} must be an integer multiple (at least 2) of the sample spacing {dt}"
        )));
    }
    Ok(r.round() as usize)
}

/// Smooth bump on [0, 1] vanishing to first order at both ends.
fn bump(s: f64) -> f64 {
    30.0 * s * s * (1.0 - s) * (1.0 - s)
}

fn fill_random_walk(out: &mut DriftSeries, per: usize, block: f64, amp: f64, seed: u64) {
    let d = out.d;
    let n = out.len();
    let dt = out.dt;
    // Normalize so the trapezoid integral of each block is exactly amp·block·ξ.
    let quad: f64 = (0..=per)
        .map(|q| {
            let w = if q == 0 || q == per { 0.5 } else { 1.0 };
            w * bump(q as f64 / per as f64) * dt
        })
        .sum();
    let mut r = rng::stream(seed, "bbar-rw", 0);
    let blocks = n.div_ceil(per);
    for j in 0..blocks {
        let xi: Vec<f64> = (0..d).map(|_| if r.gen::<bool>() { 1.0 } else { -1.0 }).collect();
        for q in 1..per {
            let k = j * per + q;
            if k >= n {
                break;
            }
            let shape = bump(q as f64 / per as f64) * block / quad;
            for i in 0..d {
                out.values[k * d + i] = amp * xi[i] * shape;
            }
        }
    }
}
