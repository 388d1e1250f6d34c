//! Discrete Fourier transforms of arbitrary length and the Fourier-slice
//! conversions between radial k-space spokes and projection profiles.
//!
//! Conventions (odd spoke length `m`, center index `c = (m-1)/2`, detector
//! extent `E`):
//!
//! * detector bin `n` sits at `ρ_n = (n - c)·E/m`;
//! * spoke sample `k` sits at frequency `ω_k = (k - c)/E`;
//! * `g(ρ_n) = (1/E) Σ_k k(ω_k) e^{+j2πω_kρ_n}` and
//!   `k(ω_k) = (E/m) Σ_n g(ρ_n) e^{-j2πω_kρ_n}`.

use std::f64::consts::PI;

use num_complex::Complex64;

use crate::error::{invalid, Result};
use crate::geometry::RAY_EXTENT;
use crate::image::ComplexImage;

/// One radial k-space line through the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct Spoke {
    pub theta: f64,
    /// Samples at centered frequencies `ω_k = (k - c)/extent`.
    pub samples: Vec<Complex64>,
    pub extent: f64,
}

/// Parallel projection of the image along one view angle.
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionProfile {
    pub theta: f64,
    /// Values at detector bin centers `ρ_n = (n - c)·extent/m`.
    pub samples: Vec<Complex64>,
    pub extent: f64,
}

impl ProjectionProfile {
    pub fn bin_width(&self) -> f64 {
        self.extent / self.samples.len() as f64
    }

    pub fn bin_center(&self, n: usize) -> f64 {
        detector_offset(n, self.samples.len(), self.extent)
    }
}

/// Offset of detector bin `n` out of `m` spanning `extent`.
pub fn detector_offset(n: usize, m: usize, extent: f64) -> f64 {
    (n as f64 - (m as f64 - 1.0) / 2.0) * extent / m as f64
}

/// Smallest odd spoke length covering the circumscribing disk at one sample
/// per pixel.
pub fn default_spoke_length(image_size: usize) -> usize {
    let n = (image_size as f64 * RAY_EXTENT / 2.0).ceil() as usize;
    let n = n.max(3);
    if n % 2 == 0 {
        n + 1
    } else {
        n
    }
}

fn twiddles(m: usize, sign: f64) -> Vec<Complex64> {
    (0..m)
        .map(|k| Complex64::from_polar(1.0, sign * 2.0 * PI * k as f64 / m as f64))
        .collect()
}

fn direct_transform(x: &[Complex64], sign: f64) -> Vec<Complex64> {
    let m = x.len();
    let tw = twiddles(m, sign);
    (0..m)
        .map(|k| {
            let mut acc = Complex64::new(0.0, 0.0);
            let mut idx = 0usize;
            for xn in x {
                acc += xn * tw[idx];
                idx += k;
                if idx >= m {
                    idx -= m;
                }
            }
            acc
        })
        .collect()
}

/// `X[k] = Σ_n x[n]·e^{-j2πkn/m}` for any length.
pub fn dft(signal: &[Complex64]) -> Vec<Complex64> {
    direct_transform(signal, -1.0)
}

/// Inverse of [`dft`] including the `1/m` factor.
pub fn idft(signal: &[Complex64]) -> Vec<Complex64> {
    let m = signal.len() as f64;
    direct_transform(signal, 1.0)
        .into_iter()
        .map(|v| v / m)
        .collect()
}

/// Centered order (DC in the middle) to standard DFT order (DC first).
fn to_standard(centered: &[Complex64]) -> Vec<Complex64> {
    let m = centered.len();
    let c = (m - 1) / 2;
    (0..m).map(|j| centered[(j + c) % m]).collect()
}

fn to_centered(standard: &[Complex64]) -> Vec<Complex64> {
    let m = standard.len();
    let c = (m - 1) / 2;
    (0..m).map(|n| standard[(n + m - c) % m]).collect()
}

fn check_length(m: usize) -> Result<()> {
    if m < 3 || m % 2 == 0 {
        return Err(invalid(format!("spoke length must be odd and at least 3, got {m}")));
    }
    Ok(())
}

pub fn kspace_to_projection(spoke: &Spoke) -> Result<ProjectionProfile> {
    let m = spoke.samples.len();
    check_length(m)?;
    let scale = m as f64 / spoke.extent;
    let samples = to_centered(&idft(&to_standard(&spoke.samples)))
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Ok(ProjectionProfile {
        theta: spoke.theta,
        samples,
        extent: spoke.extent,
    })
}

pub fn projection_to_kspace(profile: &ProjectionProfile) -> Result<Spoke> {
    let m = profile.samples.len();
    check_length(m)?;
    let scale = profile.extent / m as f64;
    let samples = to_centered(&dft(&to_standard(&profile.samples)))
        .into_iter()
        .map(|v| v * scale)
        .collect();
    Ok(Spoke {
        theta: profile.theta,
        samples,
        extent: profile.extent,
    })
}

/// Adjoint of [`projection_to_kspace`] with respect to the real inner
/// product `Re⟨a, b⟩`: maps a gradient on spoke samples to a gradient on
/// profile samples.
pub fn projection_to_kspace_adjoint(spoke_grad: &[Complex64], extent: f64) -> Result<Vec<Complex64>> {
    let m = spoke_grad.len();
    check_length(m)?;
    // dft* = m·idft
    let scale = extent / m as f64 * m as f64;
    Ok(to_centered(&idft(&to_standard(spoke_grad)))
        .into_iter()
        .map(|v| v * scale)
        .collect())
}

/// Direct evaluation of the k-space line at angle `theta` from every pixel,
/// each weighted by the pixel area.
pub fn direct_spoke(image: &ComplexImage, theta: f64, m: usize, extent: f64) -> Result<Spoke> {
    check_length(m)?;
    let grid = image.grid();
    let area = grid.pixel_area();
    let (s, c) = theta.sin_cos();
    let center = ((m - 1) / 2) as f64;
    let mut samples = vec![Complex64::new(0.0, 0.0); m];
    for r in 0..grid.height() {
        for col in 0..grid.width() {
            let f = image.get(r, col);
            if f == Complex64::new(0.0, 0.0) {
                continue;
            }
            let p = grid.pixel_center(r, col);
            let proj = p[0] * c + p[1] * s;
            let phase = -2.0 * PI * proj / extent;
            let step = Complex64::from_polar(1.0, phase);
            // e^{-j2π ω_k proj} for ω_k = (k - c)/E, starting at k = 0
            let mut z = Complex64::from_polar(area, -center * phase) * f;
            for slot in samples.iter_mut() {
                *slot += z;
                z *= step;
            }
        }
    }
    Ok(Spoke {
        theta,
        samples,
        extent,
    })
}
