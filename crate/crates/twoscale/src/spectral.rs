//! FFT plumbing on periodic boxes: multi-axis transforms, wavenumber tables
//! and pseudo-spectral gradient / divergence.
//!
//! Derivative wavenumbers zero the Nyquist mode. With that convention the
//! discrete derivative is a real skew-symmetric operator, the mixed
//! derivatives commute, and the divergence of a row-divergence of a skew
//! field vanishes to rounding.

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};
use std::f64::consts::PI;
use std::sync::Arc;

/// Multi-axis complex FFT on a row-major array.
#[derive(Clone)]
pub struct FftNd {
    dims: Vec<usize>,
    forward: Vec<Arc<dyn Fft<f64>>>,
    inverse: Vec<Arc<dyn Fft<f64>>>,
    len: usize,
}

impl std::fmt::Debug for FftNd {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FftNd").field("dims", &self.dims).finish()
    }
}

impl FftNd {
    pub fn new(dims: &[usize]) -> Self {
        let mut planner = FftPlanner::new();
        let forward = dims.iter().map(|&n| planner.plan_fft_forward(n)).collect();
        let inverse = dims.iter().map(|&n| planner.plan_fft_inverse(n)).collect();
        Self { dims: dims.to_vec(), forward, inverse, len: dims.iter().product() }
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    /// Unnormalized forward transform over every axis.
    pub fn forward(&self, data: &mut [Complex64]) {
        self.forward_axes(data, 0..self.dims.len());
    }

    /// Inverse transform over every axis, normalized by 1/N.
    pub fn inverse(&self, data: &mut [Complex64]) {
        self.inverse_axes(data, 0..self.dims.len());
        let s = 1.0 / self.len as f64;
        for z in data.iter_mut() {
            *z *= s;
        }
    }

    pub fn forward_axes(&self, data: &mut [Complex64], axes: std::ops::Range<usize>) {
        for a in axes {
            self.transform_axis(data, a, &self.forward[a]);
        }
    }

    /// Unnormalized inverse over a subset of axes.
    pub fn inverse_axes(&self, data: &mut [Complex64], axes: std::ops::Range<usize>) {
        for a in axes {
            self.transform_axis(data, a, &self.inverse[a]);
        }
    }

    fn transform_axis(&self, data: &mut [Complex64], axis: usize, plan: &Arc<dyn Fft<f64>>) {
        assert_eq!(data.len(), self.len, "buffer does not match FFT shape");
        let n = self.dims[axis];
        let stride: usize = self.dims[axis + 1..].iter().product();
        let mut scratch = vec![Complex64::default(); plan.get_inplace_scratch_len()];
        if stride == 1 {
            plan.process_with_scratch(data, &mut scratch);
            return;
        }
        // Gather each n x stride block into stride contiguous lines.
        let block = n * stride;
        let mut lines = vec![Complex64::default(); block];
        for chunk in data.chunks_mut(block) {
            for i in 0..n {
                let row = &chunk[i * stride..(i + 1) * stride];
                for (s, z) in row.iter().enumerate() {
                    lines[s * n + i] = *z;
                }
            }
            plan.process_with_scratch(&mut lines, &mut scratch);
            for i in 0..n {
                let row = &mut chunk[i * stride..(i + 1) * stride];
                for (s, z) in row.iter_mut().enumerate() {
                    *z = lines[s * n + i];
                }
            }
        }
    }
}

/// Signed mode number of FFT bin `p` on an axis of length `n`.
pub fn mode_number(p: usize, n: usize) -> i64 {
    if p <= n / 2 {
        p as i64
    } else {
        p as i64 - n as i64
    }
}

/// Derivative wavenumbers 2πm/L with the Nyquist bin set to zero.
pub fn derivative_wavenumbers(n: usize, length: f64) -> Vec<f64> {
    (0..n)
        .map(|p| if 2 * p == n { 0.0 } else { 2.0 * PI * mode_number(p, n) as f64 / length })
        .collect()
}

/// Spectral operators on one spatial slice (a periodic box of side `length`
/// with `n` points per axis in `d` dimensions).
#[derive(Debug, Clone)]
pub struct SpatialSpectrum {
    pub d: usize,
    pub n: usize,
    pub length: f64,
    fft: FftNd,
    /// Derivative wavenumber vectors, `k[p * d + j]`.
    k: Vec<f64>,
    /// True for modes annihilated by every derivative (zero mode and modes
    /// whose components are all zero or Nyquist).
    null: Vec<bool>,
}

impl SpatialSpectrum {
    pub fn new(d: usize, n: usize, length: f64) -> Self {
        let dims = vec![n; d];
        let fft = FftNd::new(&dims);
        let k1 = derivative_wavenumbers(n, length);
        let len = fft.len();
        let mut k = vec![0.0; len * d];
        let mut null = vec![true; len];
        for p in 0..len {
            let mut rest = p;
            for j in (0..d).rev() {
                let kj = k1[rest % n];
                rest /= n;
                k[p * d + j] = kj;
                if kj != 0.0 {
                    null[p] = false;
                }
            }
        }
        Self { d, n, length, fft, k, null }
    }

    pub fn len(&self) -> usize {
        self.fft.len()
    }

    pub fn is_empty(&self) -> bool {
        self.fft.is_empty()
    }

    pub fn fft(&self) -> &FftNd {
        &self.fft
    }

    pub fn wavevector(&self, p: usize) -> &[f64] {
        &self.k[p * self.d..(p + 1) * self.d]
    }

    pub fn is_null_mode(&self, p: usize) -> bool {
        self.null[p]
    }

    pub fn k_squared(&self, p: usize) -> f64 {
        self.wavevector(p).iter().map(|x| x * x).sum()
    }

    /// Quadratic form kᵀ M k for a row-major d×d matrix.
    pub fn quadratic(&self, p: usize, m: &[f64]) -> f64 {
        let k = self.wavevector(p);
        let mut q = 0.0;
        for i in 0..self.d {
            for j in 0..self.d {
                q += k[i] * m[i * self.d + j] * k[j];
            }
        }
        q
    }

    pub fn to_spectrum(&self, field: &[f64]) -> Vec<Complex64> {
        let mut buf: Vec<Complex64> = field.iter().map(|&x| Complex64::new(x, 0.0)).collect();
        self.fft.forward(&mut buf);
        buf
    }

    pub fn to_real(&self, mut spec: Vec<Complex64>) -> Vec<f64> {
        self.fft.inverse(&mut spec);
        spec.into_iter().map(|z| z.re).collect()
    }

    /// Forward transforms of two real fields using one complex FFT.
    pub fn to_spectrum_pair(&self, a: &[f64], b: &[f64]) -> (Vec<Complex64>, Vec<Complex64>) {
        let mut z: Vec<Complex64> = a.iter().zip(b).map(|(&x, &y)| Complex64::new(x, y)).collect();
        self.fft.forward(&mut z);
        let len = z.len();
        let mut sa = vec![Complex64::default(); len];
        let mut sb = vec![Complex64::default(); len];
        for p in 0..len {
            let q = self.negate_index(p);
            let zp = z[p];
            let zq = z[q].conj();
            sa[p] = (zp + zq) * 0.5;
            sb[p] = (zp - zq) * Complex64::new(0.0, -0.5);
        }
        (sa, sb)
    }

    /// Inverse transforms of two Hermitian spectra using one complex FFT.
    pub fn to_real_pair(&self, sa: &[Complex64], sb: &[Complex64]) -> (Vec<f64>, Vec<f64>) {
        let i = Complex64::new(0.0, 1.0);
        let mut z: Vec<Complex64> = sa.iter().zip(sb).map(|(&x, &y)| x + i * y).collect();
        self.fft.inverse(&mut z);
        (z.iter().map(|c| c.re).collect(), z.iter().map(|c| c.im).collect())
    }

    /// Flat index of the mode -m.
    pub fn negate_index(&self, p: usize) -> usize {
        let n = self.n;
        let mut rest = p;
        let mut q = 0;
        let mut mult = 1;
        for _ in 0..self.d {
            let c = rest % n;
            rest /= n;
            q += ((n - c) % n) * mult;
            mult *= n;
        }
        q
    }

    /// Spectral gradient of a real field.
    pub fn gradient(&self, field: &[f64]) -> Vec<Vec<f64>> {
        let spec = self.to_spectrum(field);
        self.gradient_from_spectrum(&spec)
    }

    pub fn gradient_from_spectrum(&self, spec: &[Complex64]) -> Vec<Vec<f64>> {
        let d = self.d;
        let comp = |j: usize| -> Vec<Complex64> {
            spec.iter()
                .enumerate()
                .map(|(p, z)| Complex64::new(0.0, self.k[p * d + j]) * z)
                .collect()
        };
        let mut out = Vec::with_capacity(d);
        let mut j = 0;
        while j < d {
            if j + 1 < d {
                let (a, b) = self.to_real_pair(&comp(j), &comp(j + 1));
                out.push(a);
                out.push(b);
                j += 2;
            } else {
                out.push(self.to_real(comp(j)));
                j += 1;
            }
        }
        out
    }

    /// Spectrum of the divergence Σ_j ∂_j F_j of a real vector field.
    pub fn divergence_spectrum(&self, comps: &[&[f64]]) -> Vec<Complex64> {
        let d = self.d;
        let len = self.len();
        let mut acc = vec![Complex64::default(); len];
        let mut add = |j: usize, s: &[Complex64]| {
            for p in 0..len {
                acc[p] += Complex64::new(0.0, self.k[p * d + j]) * s[p];
            }
        };
        let mut j = 0;
        while j < comps.len() {
            if j + 1 < comps.len() {
                let (a, b) = self.to_spectrum_pair(comps[j], comps[j + 1]);
                add(j, &a);
                add(j + 1, &b);
                j += 2;
            } else {
                let a = self.to_spectrum(comps[j]);
                add(j, &a);
                j += 1;
            }
        }
        acc
    }

    pub fn divergence(&self, comps: &[&[f64]]) -> Vec<f64> {
        self.to_real(self.divergence_spectrum(comps))
    }

    /// Translate a real field: returns u(x + shift) via phase multiplication.
    /// Nyquist content is dropped so the result stays real.
    pub fn translate(&self, field: &[f64], shift: &[f64]) -> Vec<f64> {
        let mut spec = self.to_spectrum(field);
        self.translate_spectrum(&mut spec, shift);
        self.to_real(spec)
    }

    pub fn translate_spectrum(&self, spec: &mut [Complex64], shift: &[f64]) {
        let n = self.n;
        let d = self.d;
        let base = 2.0 * PI / self.length;
        for (p, z) in spec.iter_mut().enumerate() {
            let mut rest = p;
            let mut phase = 0.0;
            let mut nyquist = false;
            for j in (0..d).rev() {
                let c = rest % n;
                rest /= n;
                if 2 * c == n {
                    nyquist = true;
                }
                phase += base * mode_number(c, n) as f64 * shift[j];
            }
            if nyquist {
                *z = Complex64::default();
            } else {
                *z *= Complex64::from_polar(1.0, phase);
            }
        }
    }

    /// Drop Nyquist content so the field lies in the range of the
    /// derivative operators' band.
    pub fn band_limit(&self, field: &[f64]) -> Vec<f64> {
        let zero = vec![0.0; self.d];
        self.translate(field, &zero)
    }
}
