//! Canonical-space geometry: rigid transforms, motion timelines and rays.
//!
//! The canonical square `[-1, 1]²` is the domain of the neural field. A
//! `MotionTriplet` maps a canonical point `x` to `A(ϑ)x + τ`, the location
//! of that point in the moving subject's frame.

use std::f64::consts::SQRT_2;

use crate::error::{check_finite, invalid, Error, Result};

pub type Point = [f64; 2];
pub type Mat2 = [[f64; 2]; 2];

/// Length of a ray: the diameter of the disk circumscribing the canonical square.
pub const RAY_EXTENT: f64 = 2.0 * SQRT_2;

/// Pixel grid laid over the canonical square. Row `r` runs along `y`,
/// column `c` along `x`; pixel centers are uniformly spaced.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CanonicalGrid {
    height: usize,
    width: usize,
}

impl CanonicalGrid {
    pub fn new(height: usize, width: usize) -> Result<Self> {
        if height < 2 || width < 2 {
            return Err(invalid(format!(
                "grid must be at least 2x2, got {height}x{width}"
            )));
        }
        Ok(Self { height, width })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn pixel_width(&self) -> f64 {
        2.0 / self.width as f64
    }

    pub fn pixel_height(&self) -> f64 {
        2.0 / self.height as f64
    }

    pub fn pixel_area(&self) -> f64 {
        self.pixel_width() * self.pixel_height()
    }

    pub fn pixel_center(&self, row: usize, col: usize) -> Point {
        [
            -1.0 + (col as f64 + 0.5) * self.pixel_width(),
            -1.0 + (row as f64 + 0.5) * self.pixel_height(),
        ]
    }

    /// Continuous `(row, col)` coordinates of a canonical point; pixel
    /// centers land on integers.
    pub fn pixel_coords(&self, p: Point) -> (f64, f64) {
        (
            (p[1] + 1.0) * self.height as f64 / 2.0 - 0.5,
            (p[0] + 1.0) * self.width as f64 / 2.0 - 0.5,
        )
    }

    /// Canonical units per pixel along x, used to report shifts in pixels.
    pub fn canonical_per_pixel(&self) -> f64 {
        self.pixel_width()
    }
}

/// Rigid motion of one view: rotation in radians, shifts in canonical units.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotionTriplet {
    pub rotation: f64,
    pub shift_x: f64,
    pub shift_y: f64,
}

impl MotionTriplet {
    pub const IDENTITY: MotionTriplet = MotionTriplet {
        rotation: 0.0,
        shift_x: 0.0,
        shift_y: 0.0,
    };

    pub fn new(rotation: f64, shift_x: f64, shift_y: f64) -> Result<Self> {
        check_finite("motion triplet", &[rotation, shift_x, shift_y])?;
        Ok(Self {
            rotation,
            shift_x,
            shift_y,
        })
    }

    pub fn shift(&self) -> Point {
        [self.shift_x, self.shift_y]
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::IDENTITY
    }

    pub fn matrix(&self) -> Mat2 {
        rotation_unchecked(self.rotation)
    }

    pub fn apply(&self, x: Point) -> Point {
        let a = self.matrix();
        [
            a[0][0] * x[0] + a[0][1] * x[1] + self.shift_x,
            a[1][0] * x[0] + a[1][1] * x[1] + self.shift_y,
        ]
    }

    /// The triplet undoing this one: `(-ϑ, -A(-ϑ)τ)`.
    pub fn inverse(&self) -> MotionTriplet {
        let back = rotation_unchecked(-self.rotation);
        let t = mat_vec(&back, self.shift());
        MotionTriplet {
            rotation: -self.rotation,
            shift_x: -t[0],
            shift_y: -t[1],
        }
    }
}

/// Per-view motion with the stage each view belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionTimeline {
    triplets: Vec<MotionTriplet>,
    stages: Vec<u32>,
}

impl MotionTimeline {
    pub fn new(triplets: Vec<MotionTriplet>, stages: Vec<u32>) -> Result<Self> {
        if triplets.len() != stages.len() {
            return Err(Error::DimensionMismatch {
                expected: triplets.len(),
                actual: stages.len(),
            });
        }
        for t in &triplets {
            check_finite("motion triplet", &[t.rotation, t.shift_x, t.shift_y])?;
        }
        Ok(Self { triplets, stages })
    }

    /// All-identity timeline with every view in stage 0.
    pub fn identity(n_views: usize) -> Self {
        Self {
            triplets: vec![MotionTriplet::IDENTITY; n_views],
            stages: vec![0; n_views],
        }
    }

    pub fn len(&self) -> usize {
        self.triplets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.triplets.is_empty()
    }

    pub fn triplets(&self) -> &[MotionTriplet] {
        &self.triplets
    }

    pub fn triplets_mut(&mut self) -> &mut [MotionTriplet] {
        &mut self.triplets
    }

    pub fn stages(&self) -> &[u32] {
        &self.stages
    }

    pub fn get(&self, view: usize) -> MotionTriplet {
        self.triplets[view]
    }

    pub fn truncate(&mut self, n_views: usize) {
        self.triplets.truncate(n_views);
        self.stages.truncate(n_views);
    }

    /// Timeline with every triplet replaced by its inverse.
    pub fn inverted(&self) -> Self {
        Self {
            triplets: self.triplets.iter().map(MotionTriplet::inverse).collect(),
            stages: self.stages.clone(),
        }
    }
}

/// A parallel-beam ray `x cosθ + y sinθ = ρ` sampled at cell centers.
#[derive(Debug, Clone, PartialEq)]
pub struct Ray {
    pub theta: f64,
    pub rho: f64,
    pub points: Vec<Point>,
    pub step: f64,
}

pub fn rotation_matrix(theta: f64) -> Result<Mat2> {
    check_finite("rotation angle", &[theta])?;
    Ok(rotation_unchecked(theta))
}

pub fn rotation_matrix_derivative(theta: f64) -> Result<Mat2> {
    check_finite("rotation angle", &[theta])?;
    Ok(rotation_derivative_unchecked(theta))
}

pub(crate) fn rotation_unchecked(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[c, -s], [s, c]]
}

pub(crate) fn rotation_derivative_unchecked(theta: f64) -> Mat2 {
    let (s, c) = theta.sin_cos();
    [[-s, -c], [c, -s]]
}

pub(crate) fn mat_vec(a: &Mat2, x: Point) -> Point {
    [
        a[0][0] * x[0] + a[0][1] * x[1],
        a[1][0] * x[0] + a[1][1] * x[1],
    ]
}

pub fn spatial_transform(x: Point, t: &MotionTriplet) -> Result<Point> {
    check_finite("point", &x)?;
    check_finite("motion triplet", &[t.rotation, t.shift_x, t.shift_y])?;
    Ok(t.apply(x))
}

/// Ray across the full circumscribing disk with `samples` midpoint samples.
pub fn build_ray(theta: f64, rho: f64, samples: usize) -> Result<Ray> {
    build_ray_with_extent(theta, rho, samples, RAY_EXTENT)
}

pub fn build_ray_with_extent(theta: f64, rho: f64, samples: usize, extent: f64) -> Result<Ray> {
    if samples < 2 {
        return Err(invalid(format!("a ray needs at least 2 samples, got {samples}")));
    }
    check_finite("ray geometry", &[theta, rho, extent])?;
    if extent <= 0.0 {
        return Err(invalid("ray extent must be positive"));
    }
    let (s, c) = theta.sin_cos();
    let step = extent / samples as f64;
    let foot = [rho * c, rho * s];
    let points = (0..samples)
        .map(|k| {
            let t = -0.5 * extent + (k as f64 + 0.5) * step;
            [foot[0] - t * s, foot[1] + t * c]
        })
        .collect();
    Ok(Ray {
        theta,
        rho,
        points,
        step,
    })
}

/// Mean signed error of `estimated` relative to `reference`: rotation and
/// shift vector.
pub fn mean_motion_error(
    estimated: &MotionTimeline,
    reference: &MotionTimeline,
) -> Result<MotionTriplet> {
    if estimated.len() != reference.len() {
        return Err(Error::DimensionMismatch {
            expected: reference.len(),
            actual: estimated.len(),
        });
    }
    if estimated.is_empty() {
        return Err(invalid("motion timelines are empty"));
    }
    let n = estimated.len() as f64;
    let mut mean = [0.0; 3];
    for (e, r) in estimated.triplets.iter().zip(&reference.triplets) {
        mean[0] += e.rotation - r.rotation;
        mean[1] += e.shift_x - r.shift_x;
        mean[2] += e.shift_y - r.shift_y;
    }
    Ok(MotionTriplet {
        rotation: mean[0] / n,
        shift_x: mean[1] / n,
        shift_y: mean[2] / n,
    })
}

/// Removes the mean motion error so the residual errors have zero mean.
///
/// A mean below the rounding resolution of the inputs counts as zero, which
/// makes the operation exactly idempotent.
pub fn gauge_align(estimated: &MotionTimeline, reference: &MotionTimeline) -> Result<MotionTimeline> {
    let mu = mean_motion_error(estimated, reference)?;
    let scale = estimated
        .triplets
        .iter()
        .chain(&reference.triplets)
        .flat_map(|t| [t.rotation.abs(), t.shift_x.abs(), t.shift_y.abs()])
        .fold(0.0_f64, f64::max);
    let tol = 4.0 * (estimated.len() as f64 + 4.0) * f64::EPSILON * scale;
    let snap = |v: f64| if v.abs() <= tol { 0.0 } else { v };
    let (dr, dx, dy) = (snap(mu.rotation), snap(mu.shift_x), snap(mu.shift_y));
    let triplets = estimated
        .triplets
        .iter()
        .map(|t| MotionTriplet {
            rotation: t.rotation - dr,
            shift_x: t.shift_x - dx,
            shift_y: t.shift_y - dy,
        })
        .collect();
    Ok(MotionTimeline {
        triplets,
        stages: estimated.stages.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use std::f64::consts::PI;

    fn mat_mul(a: &Mat2, b: &Mat2) -> Mat2 {
        let mut out = [[0.0; 2]; 2];
        for i in 0..2 {
            for j in 0..2 {
                out[i][j] = a[i][0] * b[0][j] + a[i][1] * b[1][j];
            }
        }
        out
    }

    #[test]
    fn rotation_matrix_examples() {
        assert_eq!(rotation_matrix(0.0).unwrap(), [[1.0, -0.0], [0.0, 1.0]]);
        let q = rotation_matrix(PI / 2.0).unwrap();
        assert!((q[0][0]).abs() < 1e-15 && (q[1][1]).abs() < 1e-15);
        assert_eq!(q[0][1], -1.0);
        assert_eq!(q[1][0], 1.0);
        let r = rotation_matrix(0.3).unwrap();
        assert_eq!(r[0][0], 0.3f64.cos());
        assert_eq!(r[0][1], -(0.3f64.sin()));
        assert_eq!(r[1][0], 0.3f64.sin());
        assert_eq!(r[1][1], 0.3f64.cos());
        let det = r[0][0] * r[1][1] - r[0][1] * r[1][0];
        assert!((det - 1.0).abs() < 1e-15);
    }

    #[test]
    fn non_finite_angles_are_rejected() {
        assert!(rotation_matrix(f64::NAN).is_err());
        assert!(rotation_matrix_derivative(f64::INFINITY).is_err());
        assert!(MotionTriplet::new(0.0, f64::NAN, 0.0).is_err());
    }

    #[test]
    fn rotation_derivative_examples() {
        let d0 = rotation_matrix_derivative(0.0).unwrap();
        assert_eq!(d0, [[-0.0, -1.0], [1.0, -0.0]]);
        let dpi = rotation_matrix_derivative(PI).unwrap();
        assert!((dpi[0][0]).abs() < 1e-15 && (dpi[1][1]).abs() < 1e-15);
        assert!((dpi[0][1] - 1.0).abs() < 1e-15);
        assert!((dpi[1][0] + 1.0).abs() < 1e-15);
    }

    #[test]
    fn rotation_derivative_matches_finite_differences() {
        let h = 1e-6;
        for k in 0..50 {
            let theta = -3.0 + 0.123 * k as f64;
            let d = rotation_matrix_derivative(theta).unwrap();
            let p = rotation_matrix(theta + h).unwrap();
            let m = rotation_matrix(theta - h).unwrap();
            for i in 0..2 {
                for j in 0..2 {
                    let fd = (p[i][j] - m[i][j]) / (2.0 * h);
                    assert!((fd - d[i][j]).abs() < 1e-7, "theta={theta} entry {i}{j}");
                }
            }
        }
    }

    #[test]
    fn spatial_transform_examples() {
        let t = MotionTriplet::new(0.0, 0.1, -0.2).unwrap();
        let y = spatial_transform([0.5, 0.0], &t).unwrap();
        assert!((y[0] - 0.6).abs() < 1e-15 && (y[1] + 0.2).abs() < 1e-15);
        let half = MotionTriplet::new(PI, 0.0, 0.0).unwrap();
        let y = spatial_transform([0.3, 0.4], &half).unwrap();
        assert!((y[0] + 0.3).abs() < 1e-15 && (y[1] + 0.4).abs() < 1e-15);
    }

    #[test]
    fn build_ray_examples() {
        let ray = build_ray_with_extent(0.0, 0.0, 3, 2.0).unwrap();
        let expected = [[0.0, -2.0 / 3.0], [0.0, 0.0], [0.0, 2.0 / 3.0]];
        for (p, e) in ray.points.iter().zip(expected) {
            assert!((p[0] - e[0]).abs() < 1e-15 && (p[1] - e[1]).abs() < 1e-15);
        }
        let ray = build_ray(PI / 2.0, 0.5, 16).unwrap();
        for p in &ray.points {
            assert!((p[1] - 0.5).abs() < 1e-12);
        }
        assert!((ray.step - RAY_EXTENT / 16.0).abs() < 1e-15);
        assert!(build_ray(0.0, 0.0, 1).is_err());
    }

    #[test]
    fn gauge_align_examples() {
        let reference = MotionTimeline::new(
            vec![
                MotionTriplet::new(0.0, 0.0, 0.0).unwrap(),
                MotionTriplet::new(0.25, -0.5, 0.125).unwrap(),
                MotionTriplet::new(-0.5, 0.25, 0.75).unwrap(),
            ],
            vec![0, 1, 2],
        )
        .unwrap();
        let shifted = MotionTimeline::new(
            reference
                .triplets()
                .iter()
                .map(|t| MotionTriplet {
                    rotation: t.rotation + 0.125,
                    shift_x: t.shift_x + 0.0625,
                    shift_y: t.shift_y - 0.03125,
                })
                .collect(),
            reference.stages().to_vec(),
        )
        .unwrap();
        assert_eq!(gauge_align(&shifted, &reference).unwrap(), reference);
        assert_eq!(gauge_align(&reference, &reference).unwrap(), reference);
        assert!(gauge_align(&MotionTimeline::identity(2), &reference).is_err());
    }

    fn triplet_strategy() -> impl Strategy<Value = MotionTriplet> {
        (-3.0..3.0f64, -1.0..1.0f64, -1.0..1.0f64).prop_map(|(r, x, y)| MotionTriplet {
            rotation: r,
            shift_x: x,
            shift_y: y,
        })
    }

    proptest! {
        #[test]
        fn rotation_inverse_is_identity(theta in -10.0..10.0f64) {
            let p = mat_mul(&rotation_matrix(theta).unwrap(), &rotation_matrix(-theta).unwrap());
            prop_assert!((p[0][0] - 1.0).abs() < 1e-12 && (p[1][1] - 1.0).abs() < 1e-12);
            prop_assert!(p[0][1].abs() < 1e-12 && p[1][0].abs() < 1e-12);
        }

        #[test]
        fn inverse_triplet_recovers_point(t in triplet_strategy(), x in -1.5..1.5f64, y in -1.5..1.5f64) {
            let moved = spatial_transform([x, y], &t).unwrap();
            let back = spatial_transform(moved, &t.inverse()).unwrap();
            prop_assert!((back[0] - x).abs() < 1e-12 && (back[1] - y).abs() < 1e-12);
        }

        #[test]
        fn transform_matches_explicit_product(t in triplet_strategy(), x in -2.0..2.0f64, y in -2.0..2.0f64) {
            let (c, s) = (t.rotation.cos(), t.rotation.sin());
            let ox = c * x - s * y + t.shift_x;
            let oy = s * x + c * y + t.shift_y;
            let got = spatial_transform([x, y], &t).unwrap();
            prop_assert!((got[0] - ox).abs() < 1e-12 && (got[1] - oy).abs() < 1e-12);
        }

        #[test]
        fn ray_samples_lie_on_the_line(theta in 0.0..6.3f64, rho in -1.4..1.4f64, n in 2usize..200) {
            let ray = build_ray(theta, rho, n).unwrap();
            for w in ray.points.windows(2) {
                let d = ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
                prop_assert!((d - ray.step).abs() < 1e-12);
            }
            for p in &ray.points {
                prop_assert!((p[0] * theta.cos() + p[1] * theta.sin() - rho).abs() < 1e-12);
            }
        }

        #[test]
        fn gauge_align_zero_mean_and_idempotent(
            pairs in proptest::collection::vec((triplet_strategy(), triplet_strategy()), 1..40)
        ) {
            let (est, reference): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
            let stages = vec![0; est.len()];
            let est = MotionTimeline::new(est, stages.clone()).unwrap();
            let reference = MotionTimeline::new(reference, stages).unwrap();
            let once = gauge_align(&est, &reference).unwrap();
            let mu = mean_motion_error(&once, &reference).unwrap();
            prop_assert!(mu.rotation.abs() < 1e-12 && mu.shift_x.abs() < 1e-12 && mu.shift_y.abs() < 1e-12);
            let twice = gauge_align(&once, &reference).unwrap();
            prop_assert_eq!(once, twice);
        }
    }
}
