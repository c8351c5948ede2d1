//! Circulant-embedding spectral densities and Gaussian synthesis.

use super::{EnvError, SpectralParams};
use crate::grid::SpaceTimeGrid;
use crate::rng;
use crate::spectral::{FftNd, SpatialSpectrum};
use rand_distr::{Distribution, StandardNormal};
use rustfft::num_complex::Complex64;

/// Separable spectral density p(m_t, m_x) = scale · temporal[m_t] · spatial[m_x]
/// over the discrete space-time modes. A field synthesized from it has
/// pointwise variance equal to `total()`.
#[derive(Debug, Clone)]
pub struct SpectralDensity {
    grid: SpaceTimeGrid,
    spatial: Vec<f64>,
    temporal: Vec<f64>,
    scale: f64,
    /// Negative circulant eigenvalues set to zero, relative to the total.
    pub clipped_fraction: f64,
}

/// Eigenvalues / N of the circulant built from a covariance row, with
/// negative values clipped. Returns (density, clipped mass).
fn circulant_density(cov: &[f64], fft: &FftNd) -> (Vec<f64>, f64) {
    let n = cov.len() as f64;
    let mut buf: Vec<Complex64> = cov.iter().map(|&c| Complex64::new(c, 0.0)).collect();
    fft.forward(&mut buf);
    let mut clipped = 0.0;
    let p = buf
        .iter()
        .map(|z| {
            let v = z.re / n;
            if v < 0.0 {
                clipped -= v;
                0.0
            } else {
                v
            }
        })
        .collect();
    (p, clipped)
}

/// Periodic minimum-image distance of bin `i` on an axis of `n` points.
fn wrap_distance(i: usize, n: usize, h: f64) -> f64 {
    i.min(n - i) as f64 * h
}

impl SpectralDensity {
    /// Unit-amplitude density: generalized Cauchy covariance
    /// (1 + (r/ell_x)²)^(-beta/2) in space, Gaussian covariance in time. The
    /// spatial zero mode and every Nyquist mode are removed, so sampled
    /// fields have zero torus mean in each time slice and are band-limited.
    pub fn new(grid: &SpaceTimeGrid, params: &SpectralParams) -> Result<Self, EnvError> {
        grid.validate()?;
        params.validate()?;
        let spec = SpatialSpectrum::new(grid.d, grid.n_x, grid.length);
        let ns = grid.slice_len();
        let h = grid.h();
        let mut cov = vec![0.0; ns];
        for (p, c) in cov.iter_mut().enumerate() {
            let idx = grid.unravel_spatial(p);
            let r2: f64 = idx.iter().map(|&i| wrap_distance(i, grid.n_x, h).powi(2)).sum();
            *c = (1.0 + r2 / (params.ell_x * params.ell_x)).powf(-0.5 * params.beta_decay);
        }
        let (mut spatial, clip_x) = circulant_density(&cov, spec.fft());
        for p in 0..ns {
            let nyquist = grid.unravel_spatial(p).iter().any(|&i| 2 * i == grid.n_x);
            if p == 0 || nyquist {
                spatial[p] = 0.0;
            }
        }
        let sym: Vec<f64> = (0..ns).map(|p| 0.5 * (spatial[p] + spatial[spec.negate_index(p)])).collect();

        let nt = grid.n_t;
        let k = grid.k();
        let cov_t: Vec<f64> = (0..nt)
            .map(|i| {
                let tau = wrap_distance(i, nt, k);
                (-0.5 * tau * tau / (params.ell_t * params.ell_t)).exp()
            })
            .collect();
        let (mut temporal, clip_t) = circulant_density(&cov_t, &FftNd::new(&[nt]));
        temporal[nt / 2] = 0.0;
        let temporal: Vec<f64> = (0..nt).map(|i| 0.5 * (temporal[i] + temporal[(nt - i) % nt])).collect();

        Ok(Self {
            grid: *grid,
            spatial: sym,
            temporal,
            scale: 1.0,
            clipped_fraction: clip_x / cov[0] + clip_t / cov_t[0],
        })
    }

    pub fn scaled(mut self, factor: f64) -> Self {
        self.scale *= factor;
        self
    }

    pub fn grid(&self) -> &SpaceTimeGrid {
        &self.grid
    }

    /// Density at space-time mode (temporal bin, spatial flat bin).
    pub fn at(&self, mt: usize, mx: usize) -> f64 {
        self.scale * self.temporal[mt] * self.spatial[mx]
    }

    /// Sum of the density over all modes, i.e. the field variance.
    pub fn total(&self) -> f64 {
        self.scale * self.temporal.iter().sum::<f64>() * self.spatial.iter().sum::<f64>()
    }

    /// Draw one realization for the stream named by (seed, channel_tag).
    pub fn sample(&self, seed: u64, channel_tag: &str) -> Vec<f64> {
        let len = self.grid.len();
        if self.scale == 0.0 {
            return vec![0.0; len];
        }
        let mut rng = rng::stream(seed, channel_tag, 0);
        let mut buf: Vec<Complex64> = (0..len)
            .map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0))
            .collect();
        let fft = FftNd::new(&self.grid.space_time_dims());
        fft.forward(&mut buf);
        let ns = self.grid.slice_len();
        let n = len as f64;
        for (idx, z) in buf.iter_mut().enumerate() {
            *z *= (n * self.at(idx / ns, idx % ns)).sqrt();
        }
        fft.inverse(&mut buf);
        buf.into_iter().map(|z| z.re).collect()
    }
}

/// Periodic stationary Gaussian series on `n` nodes with the given
/// covariance row, by circulant embedding.
pub(crate) fn sample_periodic_series(cov: &[f64], seed: u64, tag: &str) -> Vec<f64> {
    let n = cov.len();
    let fft = FftNd::new(&[n]);
    let (mut p, _) = circulant_density(cov, &fft);
    let sym: Vec<f64> = (0..n).map(|i| 0.5 * (p[i] + p[(n - i) % n])).collect();
    p = sym;
    let mut rng = rng::stream(seed, tag, 0);
    let mut buf: Vec<Complex64> =
        (0..n).map(|_| Complex64::new(StandardNormal.sample(&mut rng), 0.0)).collect();
    fft.forward(&mut buf);
    for (z, pi) in buf.iter_mut().zip(&p) {
        *z *= (n as f64 * pi).sqrt();
    }
    fft.inverse(&mut buf);
    buf.into_iter().map(|z| z.re).collect()
}
