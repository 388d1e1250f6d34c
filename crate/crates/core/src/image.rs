//! Complex and real images on a canonical grid.

use std::ops::{Add, Mul};

use num_complex::Complex64;

use crate::error::{check_len, Result};
use crate::geometry::{CanonicalGrid, MotionTriplet, Point};

/// Row-major complex image; row index follows `y`, column index follows `x`.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexImage {
    grid: CanonicalGrid,
    data: Vec<Complex64>,
}

/// Row-major real image, usually a magnitude.
#[derive(Debug, Clone, PartialEq)]
pub struct RealImage {
    grid: CanonicalGrid,
    data: Vec<f64>,
}

impl ComplexImage {
    pub fn zeros(grid: CanonicalGrid) -> Self {
        Self {
            grid,
            data: vec![Complex64::new(0.0, 0.0); grid.len()],
        }
    }

    pub fn from_vec(grid: CanonicalGrid, data: Vec<Complex64>) -> Result<Self> {
        check_len(grid.len(), data.len())?;
        Ok(Self { grid, data })
    }

    /// Evaluates `f` at every pixel center.
    pub fn from_fn(grid: CanonicalGrid, mut f: impl FnMut(Point) -> Complex64) -> Self {
        let mut data = Vec::with_capacity(grid.len());
        for r in 0..grid.height() {
            for c in 0..grid.width() {
                data.push(f(grid.pixel_center(r, c)));
            }
        }
        Self { grid, data }
    }

    pub fn grid(&self) -> CanonicalGrid {
        self.grid
    }

    pub fn data(&self) -> &[Complex64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex64] {
        &mut self.data
    }

    pub fn get(&self, row: usize, col: usize) -> Complex64 {
        self.data[row * self.grid.width() + col]
    }

    pub fn magnitude(&self) -> RealImage {
        RealImage {
            grid: self.grid,
            data: self.data.iter().map(|z| z.norm()).collect(),
        }
    }

    /// Bilinear interpolation with zero extension outside the pixel lattice.
    pub fn sample(&self, p: Point) -> Complex64 {
        bilinear(&self.grid, &self.data, p, Complex64::new(0.0, 0.0))
    }

    /// Image of the moved subject, `f(A(ϑ)⁻¹(x − τ))`.
    pub fn moved_by(&self, motion: &MotionTriplet) -> ComplexImage {
        if motion.is_identity() {
            return self.clone();
        }
        let back = motion.inverse();
        ComplexImage::from_fn(self.grid, |x| self.sample(back.apply(x)))
    }

    /// Separable Gaussian blur with standard deviation `sigma_px` pixels,
    /// truncated at 3σ. Outside the lattice the image is zero.
    pub fn gaussian_blur(&self, sigma_px: f64) -> ComplexImage {
        if sigma_px <= 0.0 {
            return self.clone();
        }
        let radius = (3.0 * sigma_px).ceil() as isize;
        let taps: Vec<f64> = (-radius..=radius)
            .map(|d| (-((d * d) as f64) / (2.0 * sigma_px * sigma_px)).exp())
            .collect();
        let total: f64 = taps.iter().sum();
        let taps: Vec<f64> = taps.iter().map(|t| t / total).collect();
        let (h, w) = (self.grid.height() as isize, self.grid.width() as isize);
        let zero = Complex64::new(0.0, 0.0);
        let mut rows = vec![zero; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = zero;
                for (k, t) in taps.iter().enumerate() {
                    let cc = c + k as isize - radius;
                    if (0..w).contains(&cc) {
                        acc += self.data[(r * w + cc) as usize] * *t;
                    }
                }
                rows[(r * w + c) as usize] = acc;
            }
        }
        let mut data = vec![zero; self.data.len()];
        for r in 0..h {
            for c in 0..w {
                let mut acc = zero;
                for (k, t) in taps.iter().enumerate() {
                    let rr = r + k as isize - radius;
                    if (0..h).contains(&rr) {
                        acc += rows[(rr * w + c) as usize] * *t;
                    }
                }
                data[(r * w + c) as usize] = acc;
            }
        }
        ComplexImage { grid: self.grid, data }
    }

    /// Resamples `f(A(ϑ)x + τ)` on the same grid.
    pub fn pulled_back_by(&self, motion: &MotionTriplet) -> ComplexImage {
        if motion.is_identity() {
            return self.clone();
        }
        ComplexImage::from_fn(self.grid, |x| self.sample(motion.apply(x)))
    }
}

impl RealImage {
    pub fn from_vec(grid: CanonicalGrid, data: Vec<f64>) -> Result<Self> {
        check_len(grid.len(), data.len())?;
        Ok(Self { grid, data })
    }

    pub fn grid(&self) -> CanonicalGrid {
        self.grid
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.grid.width() + col]
    }

    pub fn max(&self) -> f64 {
        self.data.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn min(&self) -> f64 {
        self.data.iter().copied().fold(f64::INFINITY, f64::min)
    }
}

fn bilinear<T>(grid: &CanonicalGrid, data: &[T], p: Point, zero: T) -> T
where
    T: Copy + Add<Output = T> + Mul<f64, Output = T>,
{
    let (h, w) = (grid.height() as isize, grid.width() as isize);
    let (row, col) = grid.pixel_coords(p);
    if !(row > -1.0 && col > -1.0 && row < h as f64 && col < w as f64) {
        return zero;
    }
    let r0 = row.floor();
    let c0 = col.floor();
    let fr = row - r0;
    let fc = col - c0;
    let (r0, c0) = (r0 as isize, c0 as isize);
    let fetch = |r: isize, c: isize| -> T {
        if r >= 0 && c >= 0 && r < h && c < w {
            data[(r * w + c) as usize]
        } else {
            zero
        }
    };
    let mut acc = zero;
    for (dr, wr) in [(0, 1.0 - fr), (1, fr)] {
        for (dc, wc) in [(0, 1.0 - fc), (1, fc)] {
            let weight = wr * wc;
            if weight != 0.0 {
                acc = acc + fetch(r0 + dr, c0 + dc) * weight;
            }
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sampling_at_pixel_centers_returns_pixels() {
        let grid = CanonicalGrid::new(5, 7).unwrap();
        let img = ComplexImage::from_fn(grid, |p| Complex64::new(p[0] + 2.0 * p[1], p[0] * p[1]));
        for r in 0..5 {
            for c in 0..7 {
                let got = img.sample(grid.pixel_center(r, c));
                assert!((got - img.get(r, c)).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn blur_matches_direct_two_dimensional_kernel() {
        let grid = CanonicalGrid::new(12, 10).unwrap();
        let img = ComplexImage::from_fn(grid, |p| Complex64::new((5.0 * p[0]).sin() + p[1], p[0] * p[1]));
        let sigma = 1.3;
        let got = img.gaussian_blur(sigma);
        let r = (3.0 * sigma).ceil() as isize;
        let norm: f64 = (-r..=r).map(|d| (-((d * d) as f64) / (2.0 * sigma * sigma)).exp()).sum::<f64>().powi(2);
        for row in 0..12isize {
            for col in 0..10isize {
                let mut want = Complex64::new(0.0, 0.0);
                for dr in -r..=r {
                    for dc in -r..=r {
                        let (rr, cc) = (row + dr, col + dc);
                        if (0..12).contains(&rr) && (0..10).contains(&cc) {
                            let w = (-((dr * dr + dc * dc) as f64) / (2.0 * sigma * sigma)).exp() / norm;
                            want += img.get(rr as usize, cc as usize) * w;
                        }
                    }
                }
                assert!((got.get(row as usize, col as usize) - want).norm() < 1e-13);
            }
        }
        assert_eq!(img.gaussian_blur(0.0), img);
    }

    #[test]
    fn bilinear_reproduces_linear_fields_inside() {
        let grid = CanonicalGrid::new(8, 8).unwrap();
        let img = ComplexImage::from_fn(grid, |p| Complex64::new(3.0 * p[0] - p[1] + 0.5, 0.0));
        for &p in &[[0.1, 0.2], [-0.33, 0.71], [0.6, -0.6]] {
            let got = img.sample(p).re;
            assert!((got - (3.0 * p[0] - p[1] + 0.5)).abs() < 1e-12);
        }
        assert_eq!(img.sample([3.0, 0.0]), Complex64::new(0.0, 0.0));
    }

    #[test]
    fn moved_and_pulled_back_are_inverse_for_integer_shifts() {
        let grid = CanonicalGrid::new(16, 16).unwrap();
        let img = ComplexImage::from_fn(grid, |p| Complex64::new((-8.0 * (p[0] * p[0] + p[1] * p[1])).exp(), 0.0));
        let shift = MotionTriplet::new(0.0, 2.0 * grid.pixel_width(), -grid.pixel_height()).unwrap();
        let moved = img.moved_by(&shift);
        assert!((moved.get(8, 10) - img.get(9, 8)).norm() < 1e-12);
        let back = moved.pulled_back_by(&shift);
        assert!((back.get(7, 7) - img.get(7, 7)).norm() < 1e-12);
    }
}
