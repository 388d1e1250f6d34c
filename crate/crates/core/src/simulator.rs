//! Phantoms, golden-angle schedules, staged rigid motion and simulated radial
//! acquisitions with known ground truth.

use std::f64::consts::PI;

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{check_len, invalid, Result};
use crate::geometry::{CanonicalGrid, MotionTimeline, MotionTriplet, RAY_EXTENT};
use crate::image::ComplexImage;
use crate::spectral::{default_spoke_length, direct_spoke, kspace_to_projection, ProjectionProfile, Spoke};

/// Phase of the simulated complex image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PhaseMode {
    None,
    Smooth,
}

/// Parameters of a simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct AcquisitionSpec {
    pub image_size: usize,
    /// Fully sampled view count before undersampling.
    pub n_views: usize,
    /// Odd spoke length; `None` picks [`default_spoke_length`].
    pub spoke_length: Option<usize>,
    pub acceleration: usize,
    pub n_stages: usize,
    /// Rotations are drawn from `[-β, β]` degrees.
    pub beta_deg: f64,
    /// Shifts are drawn from `[-bound, bound]` mm; `None` uses `β`.
    pub max_shift_mm: Option<f64>,
    /// Field of view in mm; `None` means one mm per pixel.
    pub fov_mm: Option<f64>,
    pub phase: PhaseMode,
    /// Gaussian smoothing of the phantom in pixels; zero keeps sharp edges.
    pub phantom_blur_px: f64,
    /// Standard deviation of additive complex Gaussian noise per k-space
    /// sample and per component; zero disables noise.
    pub noise_std: f64,
    pub seed: u64,
}

impl Default for AcquisitionSpec {
    fn default() -> Self {
        Self {
            image_size: 64,
            n_views: 120,
            spoke_length: None,
            acceleration: 2,
            n_stages: 6,
            beta_deg: 5.0,
            max_shift_mm: None,
            fov_mm: None,
            phase: PhaseMode::None,
            phantom_blur_px: 1.0,
            noise_std: 0.0,
            seed: 0,
        }
    }
}

impl AcquisitionSpec {
    pub fn spoke_length(&self) -> usize {
        self.spoke_length.unwrap_or_else(|| default_spoke_length(self.image_size))
    }

    pub fn fov_mm(&self) -> f64 {
        self.fov_mm.unwrap_or(self.image_size as f64)
    }

    pub fn motion_range(&self) -> MotionRange {
        MotionRange {
            rotation_deg: self.beta_deg,
            shift_mm: self.max_shift_mm.unwrap_or(self.beta_deg),
            fov_mm: self.fov_mm(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(invalid("image size must be at least 16"));
        }
        if self.n_views == 0 {
            return Err(invalid("view count must be positive"));
        }
        if self.acceleration == 0 {
            return Err(invalid("acceleration factor must be at least 1"));
        }
        if self.n_stages == 0 || self.n_stages > self.n_views {
            return Err(invalid("stage count must lie in 1..=views"));
        }
        let m = self.spoke_length();
        if m < 3 || m % 2 == 0 {
            return Err(invalid(format!("spoke length must be odd and at least 3, got {m}")));
        }
        self.motion_range().validate()?;
        if !(self.phantom_blur_px >= 0.0 && self.phantom_blur_px.is_finite()) {
            return Err(invalid("phantom blur must be finite and non-negative"));
        }
        if !(self.noise_std >= 0.0 && self.noise_std.is_finite()) {
            return Err(invalid("noise level must be finite and non-negative"));
        }
        Ok(())
    }
}

/// Bounds of the per-stage motion draws.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionRange {
    pub rotation_deg: f64,
    pub shift_mm: f64,
    pub fov_mm: f64,
}

impl MotionRange {
    fn validate(&self) -> Result<()> {
        let ok = |v: f64| v.is_finite() && v >= 0.0;
        if !ok(self.rotation_deg) || !ok(self.shift_mm) {
            return Err(invalid("motion range must be finite and non-negative"));
        }
        if !(self.fov_mm.is_finite() && self.fov_mm > 0.0) {
            return Err(invalid("field of view must be positive"));
        }
        Ok(())
    }

    /// Shift bound in canonical units.
    pub fn shift_canonical(&self) -> f64 {
        self.shift_mm * 2.0 / self.fov_mm
    }
}

/// Radial k-space data with its acquisition geometry.
#[derive(Debug, Clone, PartialEq)]
pub struct RadialKSpace {
    pub grid: CanonicalGrid,
    pub fov_mm: f64,
    pub spokes: Vec<Spoke>,
    pub stages: Vec<u32>,
    /// Motion that corrupted the data, when known.
    pub ground_truth: Option<MotionTimeline>,
}

/// Projection profiles obtained from a [`RadialKSpace`].
#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionSet {
    pub grid: CanonicalGrid,
    pub fov_mm: f64,
    pub profiles: Vec<ProjectionProfile>,
    pub stages: Vec<u32>,
    pub ground_truth: Option<MotionTimeline>,
}

impl RadialKSpace {
    pub fn n_views(&self) -> usize {
        self.spokes.len()
    }

    pub fn spoke_length(&self) -> usize {
        self.spokes.first().map_or(0, |s| s.samples.len())
    }

    pub fn to_projections(&self) -> Result<ProjectionSet> {
        let profiles = self
            .spokes
            .iter()
            .map(kspace_to_projection)
            .collect::<Result<Vec<_>>>()?;
        Ok(ProjectionSet {
            grid: self.grid,
            fov_mm: self.fov_mm,
            profiles,
            stages: self.stages.clone(),
            ground_truth: self.ground_truth.clone(),
        })
    }

    /// Checks that every spoke shares one odd length and extent and that the
    /// per-view metadata lines up.
    pub fn validate(&self) -> Result<()> {
        if self.spokes.is_empty() {
            return Err(invalid("dataset has no views"));
        }
        check_len(self.spokes.len(), self.stages.len())?;
        if let Some(gt) = &self.ground_truth {
            check_len(self.spokes.len(), gt.len())?;
        }
        let m = self.spoke_length();
        if m < 3 || m % 2 == 0 {
            return Err(invalid(format!("spoke length must be odd and at least 3, got {m}")));
        }
        let extent = self.spokes[0].extent;
        for s in &self.spokes {
            check_len(m, s.samples.len())?;
            if s.extent != extent || !s.theta.is_finite() {
                return Err(invalid("inconsistent spoke geometry"));
            }
            if s.samples.iter().any(|v| !v.re.is_finite() || !v.im.is_finite()) {
                return Err(invalid("non-finite k-space sample"));
            }
        }
        Ok(())
    }
}

impl ProjectionSet {
    pub fn n_views(&self) -> usize {
        self.profiles.len()
    }

    pub fn bins(&self) -> usize {
        self.profiles.first().map_or(0, |p| p.samples.len())
    }
}

/// `(x0, y0, a, b, φ in degrees, intensity)` of the ten ellipses, with the
/// high-contrast intensities commonly used for MRI.
pub const SHEPP_LOGAN_ELLIPSES: [[f64; 6]; 10] = [
    [0.0, 0.0, 0.69, 0.92, 0.0, 1.0],
    [0.0, -0.0184, 0.6624, 0.874, 0.0, -0.8],
    [0.22, 0.0, 0.11, 0.31, -18.0, -0.2],
    [-0.22, 0.0, 0.16, 0.41, 18.0, -0.2],
    [0.0, 0.35, 0.21, 0.25, 0.0, 0.1],
    [0.0, 0.1, 0.046, 0.046, 0.0, 0.1],
    [0.0, -0.1, 0.046, 0.046, 0.0, 0.1],
    [-0.08, -0.605, 0.046, 0.023, 0.0, 0.1],
    [0.0, -0.605, 0.023, 0.023, 0.0, 0.1],
    [0.06, -0.605, 0.023, 0.046, 0.0, 0.1],
];

fn inside_ellipse(e: &[f64; 6], x: f64, y: f64) -> bool {
    let (s, c) = e[4].to_radians().sin_cos();
    let (dx, dy) = (x - e[0], y - e[1]);
    let u = dx * c + dy * s;
    let v = -dx * s + dy * c;
    (u / e[2]).powi(2) + (v / e[3]).powi(2) <= 1.0
}

/// Phase of [`PhaseMode::Smooth`] images at a canonical point.
pub fn smooth_phase(x: f64, y: f64) -> f64 {
    0.5 * x - 0.3 * y + 0.4 * x * y + 0.2 * (x * x - y * y)
}

/// Ten-ellipse Shepp-Logan phantom point-sampled at pixel centers, magnitude
/// clamped to `[0, 1]`.
pub fn shepp_logan(height: usize, width: usize, phase: PhaseMode) -> Result<ComplexImage> {
    if height < 16 || width < 16 {
        return Err(invalid("phantom dimensions must be at least 16"));
    }
    let grid = CanonicalGrid::new(height, width)?;
    Ok(ComplexImage::from_fn(grid, |p| {
        let mag: f64 = SHEPP_LOGAN_ELLIPSES
            .iter()
            .filter(|e| inside_ellipse(e, p[0], p[1]))
            .map(|e| e[5])
            .sum();
        let mag = mag.clamp(0.0, 1.0);
        match phase {
            PhaseMode::None => Complex64::new(mag, 0.0),
            PhaseMode::Smooth => Complex64::from_polar(mag, smooth_phase(p[0], p[1])),
        }
    }))
}

/// `θ_i = (i·γ) mod 2π` for the golden angle `γ = π(3 − √5)`.
pub fn golden_angle_views(n: usize) -> Vec<f64> {
    let gamma = PI * (3.0 - 5.0_f64.sqrt());
    (0..n).map(|i| (i as f64 * gamma).rem_euclid(2.0 * PI)).collect()
}

/// Stage of each view: contiguous blocks in acquisition order, the last
/// stage absorbing any remainder.
pub fn stage_assignment(n_views: usize, n_stages: usize) -> Result<Vec<u32>> {
    if n_stages == 0 || n_stages > n_views {
        return Err(invalid(format!("{n_stages} stages cannot cover {n_views} views")));
    }
    let block = n_views / n_stages;
    Ok((0..n_views).map(|i| (i / block).min(n_stages - 1) as u32).collect())
}

/// Staged rigid motion. Stage 0 is the identity; every other stage draws one
/// triplet uniformly within `range` from its own ChaCha stream.
pub fn simulate_motion_timeline(
    n_views: usize,
    n_stages: usize,
    range: &MotionRange,
    seed: u64,
) -> Result<MotionTimeline> {
    range.validate()?;
    let stages = stage_assignment(n_views, n_stages)?;
    let rot = range.rotation_deg.to_radians();
    let shift = range.shift_canonical();
    let draw = |rng: &mut ChaCha8Rng, bound: f64| {
        if bound == 0.0 {
            0.0
        } else {
            rng.gen_range(-bound..=bound)
        }
    };
    let per_stage: Vec<MotionTriplet> = (0..n_stages)
        .map(|s| {
            if s == 0 {
                return MotionTriplet::IDENTITY;
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(s as u64);
            let r = draw(&mut rng, rot);
            let x = draw(&mut rng, shift);
            let y = draw(&mut rng, shift);
            MotionTriplet { rotation: r, shift_x: x, shift_y: y }
        })
        .collect();
    let triplets = stages.iter().map(|&s| per_stage[s as usize]).collect();
    MotionTimeline::new(triplets, stages)
}

/// Acquires one spoke per view from the moved subject `f(A⁻¹(x − τ))`.
pub fn acquire(image: &ComplexImage, views: &[f64], timeline: &MotionTimeline, m: usize) -> Result<RadialKSpace> {
    acquire_with_fov(image, views, timeline, m, image.grid().width() as f64)
}

pub fn acquire_with_fov(
    image: &ComplexImage,
    views: &[f64],
    timeline: &MotionTimeline,
    m: usize,
    fov_mm: f64,
) -> Result<RadialKSpace> {
    check_len(views.len(), timeline.len())?;
    if views.is_empty() {
        return Err(invalid("no views to acquire"));
    }
    let mut cache: Option<(MotionTriplet, ComplexImage)> = None;
    let mut spokes = Vec::with_capacity(views.len());
    for (&theta, motion) in views.iter().zip(timeline.triplets()) {
        if cache.as_ref().map(|(t, _)| t != motion).unwrap_or(true) {
            cache = Some((*motion, image.moved_by(motion)));
        }
        let moved = &cache.as_ref().expect("filled above").1;
        spokes.push(direct_spoke(moved, theta, m, RAY_EXTENT)?);
    }
    Ok(RadialKSpace {
        grid: image.grid(),
        fov_mm,
        spokes,
        stages: timeline.stages().to_vec(),
        ground_truth: Some(timeline.clone()),
    })
}

/// Keeps the first `⌈n/AF⌉` views in acquisition order.
pub fn undersample(kspace: &RadialKSpace, acceleration: usize) -> Result<RadialKSpace> {
    if acceleration == 0 {
        return Err(invalid("acceleration factor must be at least 1"));
    }
    let keep = kspace.n_views().div_ceil(acceleration);
    let mut out = kspace.clone();
    out.spokes.truncate(keep);
    out.stages.truncate(keep);
    if let Some(gt) = out.ground_truth.as_mut() {
        gt.truncate(keep);
    }
    Ok(out)
}

/// Adds complex Gaussian noise with per-component standard deviation `std`.
pub fn add_noise(kspace: &mut RadialKSpace, std: f64, seed: u64) -> Result<()> {
    if std == 0.0 {
        return Ok(());
    }
    let normal = Normal::new(0.0, std).map_err(|e| invalid(e.to_string()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(0x6e6f697365);
    for s in kspace.spokes.iter_mut() {
        for v in s.samples.iter_mut() {
            *v += Complex64::new(normal.sample(&mut rng), normal.sample(&mut rng));
        }
    }
    Ok(())
}

/// Everything produced by one simulated acquisition.
#[derive(Debug, Clone, PartialEq)]
pub struct Simulation {
    pub image: ComplexImage,
    /// Undersampled data; its ground-truth motion covers the kept views.
    pub kspace: RadialKSpace,
}

pub fn simulate(spec: &AcquisitionSpec) -> Result<Simulation> {
    spec.validate()?;
    let image = shepp_logan(spec.image_size, spec.image_size, spec.phase)?.gaussian_blur(spec.phantom_blur_px);
    let views = golden_angle_views(spec.n_views);
    let timeline = simulate_motion_timeline(spec.n_views, spec.n_stages, &spec.motion_range(), spec.seed)?;
    let keep = spec.n_views.div_ceil(spec.acceleration);
    // only the kept views are ever acquired
    let mut kept = timeline.clone();
    kept.truncate(keep);
    let mut kspace = acquire_with_fov(&image, &views[..keep], &kept, spec.spoke_length(), spec.fov_mm())?;
    add_noise(&mut kspace, spec.noise_std, spec.seed)?;
    Ok(Simulation { image, kspace })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::build_ray_with_extent;
    use crate::spectral::{detector_offset, projection_to_kspace};
    use proptest::prelude::*;

    fn rel_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
        let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
        let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
        (num / den).sqrt()
    }

    fn smooth_blob(n: usize) -> ComplexImage {
        let grid = CanonicalGrid::new(n, n).unwrap();
        ComplexImage::from_fn(grid, |p| {
            let a = (-((p[0] - 0.1).powi(2) + (p[1] + 0.05).powi(2)) / (2.0 * 0.2f64.powi(2))).exp();
            let b = 0.5 * (-((p[0] + 0.25).powi(2) / 0.02 + (p[1] - 0.2).powi(2) / 0.05)).exp();
            Complex64::new(a + b, 0.0)
        })
    }

    #[test]
    fn phantom_support_and_phase() {
        let img = shepp_logan(64, 64, PhaseMode::None).unwrap();
        let g = img.grid();
        for r in 0..64 {
            for c in 0..64 {
                let p = g.pixel_center(r, c);
                let v = img.get(r, c);
                assert_eq!(v.im, 0.0);
                assert!((0.0..=1.0).contains(&v.re));
                if (p[0] / 0.69).powi(2) + (p[1] / 0.92).powi(2) > 1.0 {
                    assert_eq!(v.re, 0.0);
                }
            }
        }
        let smooth = shepp_logan(64, 64, PhaseMode::Smooth).unwrap();
        for (a, b) in smooth.data().iter().zip(img.data()) {
            assert!((a.norm() - b.re).abs() < 1e-12);
        }
        assert!(shepp_logan(8, 64, PhaseMode::None).is_err());
    }

    #[test]
    fn phantom_matches_membership_oracle() {
        let img = shepp_logan(128, 128, PhaseMode::None).unwrap();
        let g = img.grid();
        // (row, col) chosen in distinct regions: background, skull, brain,
        // both ventricles and the top blob
        for &(r, c) in &[(0, 0), (64, 64), (64, 20), (64, 50), (64, 78), (95, 64), (10, 64), (64, 120)] {
            let p = g.pixel_center(r, c);
            let mut sum = 0.0;
            for e in &SHEPP_LOGAN_ELLIPSES {
                let t = e[4] * PI / 180.0;
                let xr = (p[0] - e[0]) * t.cos() + (p[1] - e[1]) * t.sin();
                let yr = -(p[0] - e[0]) * t.sin() + (p[1] - e[1]) * t.cos();
                if xr * xr / (e[2] * e[2]) + yr * yr / (e[3] * e[3]) <= 1.0 {
                    sum += e[5];
                }
            }
            assert!((img.get(r, c).re - sum.clamp(0.0, 1.0)).abs() < 1e-12, "pixel ({r},{c})");
        }
    }

    #[test]
    fn golden_angle_examples() {
        let v = golden_angle_views(720);
        assert_eq!(v[0], 0.0);
        assert!((v[1] - PI * (3.0 - 5f64.sqrt())).abs() < 1e-15);
        assert!((v[1].to_degrees() - 137.507_764).abs() < 1e-6);
        let mut s = v.clone();
        s.sort_by(f64::total_cmp);
        for w in s.windows(2) {
            assert!(w[1] - w[0] > 1e-6);
        }
        assert!(s[0] + 2.0 * PI - s[719] > 1e-6);
    }

    #[test]
    fn stage_blocks() {
        let st = stage_assignment(720, 18).unwrap();
        for s in 0..18u32 {
            assert_eq!(st.iter().filter(|&&x| x == s).count(), 40);
        }
        assert!(st.windows(2).all(|w| w[0] <= w[1]));
        let st = stage_assignment(10, 3).unwrap();
        assert_eq!(st, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 2]);
        assert!(stage_assignment(3, 4).is_err());
    }

    #[test]
    fn zero_range_gives_identity_motion() {
        let range = MotionRange { rotation_deg: 0.0, shift_mm: 0.0, fov_mm: 64.0 };
        let t = simulate_motion_timeline(120, 6, &range, 9).unwrap();
        assert!(t.triplets().iter().all(|m| m.is_identity()));
    }

    #[test]
    fn draws_stay_in_bounds_and_stages_are_consistent() {
        let range = MotionRange { rotation_deg: 5.0, shift_mm: 3.0, fov_mm: 64.0 };
        let (rb, sb) = (5f64.to_radians(), 3.0 * 2.0 / 64.0);
        let mut draws = 0;
        for seed in 0..500u64 {
            let t = simulate_motion_timeline(40, 20, &range, seed).unwrap();
            for (i, m) in t.triplets().iter().enumerate() {
                let s = t.stages()[i];
                assert_eq!(*m, t.get(2 * s as usize));
                if s == 0 {
                    assert!(m.is_identity());
                } else if i % 2 == 0 {
                    assert!(m.rotation.abs() <= rb && m.shift_x.abs() <= sb && m.shift_y.abs() <= sb);
                    draws += 1;
                }
            }
        }
        assert!(draws >= 9_500);
        let a = simulate_motion_timeline(40, 20, &range, 1).unwrap();
        let b = simulate_motion_timeline(40, 20, &range, 2).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn undersampling_keeps_leading_views() {
        let img = shepp_logan(16, 16, PhaseMode::None).unwrap();
        let views = golden_angle_views(9);
        let k = acquire(&img, &views, &MotionTimeline::identity(9), 23).unwrap();
        assert_eq!(undersample(&k, 1).unwrap(), k);
        let h = undersample(&k, 2).unwrap();
        assert_eq!(h.n_views(), 5);
        assert_eq!(h.spokes[..], k.spokes[..5]);
        assert_eq!(h.ground_truth.unwrap().len(), 5);
        assert_eq!(undersample(&k, 4).unwrap().n_views(), 3);
        assert!(undersample(&k, 0).is_err());
        assert_eq!(720usize.div_ceil(2), 360);
        assert_eq!(720usize.div_ceil(4), 180);
    }

    #[test]
    fn identity_acquisition_matches_direct_spokes() {
        let img = shepp_logan(32, 32, PhaseMode::Smooth).unwrap();
        let views = golden_angle_views(5);
        let k = acquire(&img, &views, &MotionTimeline::identity(5), 47).unwrap();
        for (s, &th) in k.spokes.iter().zip(&views) {
            let d = direct_spoke(&img, th, 47, RAY_EXTENT).unwrap();
            assert_eq!(s.samples, d.samples);
        }
    }

    #[test]
    fn shift_theorem() {
        let img = smooth_blob(64);
        let m = default_spoke_length(64);
        let shift = MotionTriplet::new(0.0, 0.08, -0.05).unwrap();
        for &theta in &[0.3, 1.4, 2.9] {
            let moved = acquire(&img, &[theta], &MotionTimeline::new(vec![shift], vec![0]).unwrap(), m).unwrap();
            let still = direct_spoke(&img, theta, m, RAY_EXTENT).unwrap();
            let c = ((m - 1) / 2) as f64;
            let expected: Vec<Complex64> = still
                .samples
                .iter()
                .enumerate()
                .map(|(k, v)| {
                    let w = (k as f64 - c) / RAY_EXTENT;
                    v * Complex64::from_polar(1.0, -2.0 * PI * w * (shift.shift_x * theta.cos() + shift.shift_y * theta.sin()))
                })
                .collect();
            let err = rel_l2(&moved.spokes[0].samples, &expected);
            assert!(err < 0.01, "θ={theta}: {err}");
        }
    }

    #[test]
    fn rotation_property() {
        let img = smooth_blob(64);
        let m = default_spoke_length(64);
        let rot = MotionTriplet::new(0.2, 0.0, 0.0).unwrap();
        for &theta in &[0.5, 1.7, 3.0] {
            let moved = acquire(&img, &[theta], &MotionTimeline::new(vec![rot], vec![0]).unwrap(), m).unwrap();
            let still = direct_spoke(&img, theta - rot.rotation, m, RAY_EXTENT).unwrap();
            let err = rel_l2(&moved.spokes[0].samples, &still.samples);
            assert!(err < 0.01, "θ={theta}: {err}");
        }
    }

    #[test]
    fn simulate_is_deterministic_and_consistent() {
        let spec = AcquisitionSpec { image_size: 24, n_views: 12, n_stages: 3, ..Default::default() };
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.kspace.n_views(), 6);
        assert_eq!(a.kspace.spoke_length(), default_spoke_length(24));
        a.kspace.validate().unwrap();
        let gt = a.kspace.ground_truth.as_ref().unwrap();
        assert!(gt.triplets()[..4].iter().all(MotionTriplet::is_identity));
        assert!(!gt.get(5).is_identity());
    }

    #[test]
    fn noise_is_seeded() {
        let spec = AcquisitionSpec { image_size: 16, n_views: 4, n_stages: 1, noise_std: 0.01, ..Default::default() };
        let a = simulate(&spec).unwrap();
        let clean = simulate(&AcquisitionSpec { noise_std: 0.0, ..spec.clone() }).unwrap();
        assert_eq!(a, simulate(&spec).unwrap());
        assert_ne!(a.kspace, clean.kspace);
    }

    #[test]
    fn projections_reproduce_line_integrals_of_smooth_images() {
        let img = smooth_blob(64);
        let m = default_spoke_length(64);
        let k = acquire(&img, &[0.7], &MotionTimeline::identity(1), m).unwrap();
        let p = k.to_projections().unwrap();
        let dense: Vec<Complex64> = (0..m)
            .map(|n| {
                let ray = build_ray_with_extent(0.7, detector_offset(n, m, RAY_EXTENT), 2000, RAY_EXTENT).unwrap();
                ray.points.iter().map(|x| img.sample(*x)).sum::<Complex64>() * ray.step
            })
            .collect();
        assert!(rel_l2(&p.profiles[0].samples, &dense) < 0.02);
        let back = projection_to_kspace(&p.profiles[0]).unwrap();
        for (a, b) in back.samples.iter().zip(&k.spokes[0].samples) {
            assert!((a - b).norm() < 1e-12);
        }
    }

    proptest! {
        #[test]
        fn stage_consistency(n in 1usize..200, s in 1usize..20, seed in any::<u64>()) {
            prop_assume!(s <= n);
            let range = MotionRange { rotation_deg: 4.0, shift_mm: 2.0, fov_mm: 100.0 };
            let t = simulate_motion_timeline(n, s, &range, seed).unwrap();
            prop_assert_eq!(t.len(), n);
            for i in 1..n {
                if t.stages()[i] == t.stages()[i - 1] {
                    prop_assert_eq!(t.get(i), t.get(i - 1));
                }
            }
        }
    }
}
