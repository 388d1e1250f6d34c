//! Image quality and motion accuracy.

use crate::error::{check_len, invalid, Result};
use crate::geometry::{mat_vec, rotation_unchecked, CanonicalGrid, MotionTimeline, MotionTriplet};
use crate::image::{ComplexImage, RealImage};

/// Reported when the reconstruction equals the reference exactly.
pub const PSNR_CAP_DB: f64 = 99.0;

const SSIM_RADIUS: usize = 5;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EvalReport {
    /// After motion-gauge alignment of the reconstruction.
    pub psnr: f64,
    pub psnr_capped: bool,
    pub ssim: f64,
    /// Without alignment.
    pub psnr_unaligned: f64,
    /// Degrees.
    pub sigma_rot: f64,
    /// Pixels.
    pub sigma_shift: f64,
    pub l1_rot: f64,
    pub l1_shift: f64,
}

fn check_pair(a: &RealImage, b: &RealImage) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(invalid(format!(
            "image sizes differ: {}x{} vs {}x{}",
            a.grid().height(),
            a.grid().width(),
            b.grid().height(),
            b.grid().width()
        )));
    }
    Ok(())
}

/// `10·log10(max(gt)² / MSE)`, or [`PSNR_CAP_DB`] for identical images.
pub fn psnr(recon: &RealImage, gt: &RealImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let peak = gt.max();
    if !(peak > 0.0) {
        return Err(invalid("reference image must have a positive maximum"));
    }
    let n = gt.data().len() as f64;
    let mse = recon.data().iter().zip(gt.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n;
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok(10.0 * (peak * peak / mse).log10())
}

fn gaussian_window() -> Vec<f64> {
    let w: Vec<f64> = (0..=2 * SSIM_RADIUS)
        .map(|i| {
            let d = i as f64 - SSIM_RADIUS as f64;
            (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp()
        })
        .collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|v| v / s).collect()
}

/// Weighted means over every fully contained 11×11 window.
fn filter_valid(data: &[f64], h: usize, w: usize, k: &[f64]) -> Vec<f64> {
    let n = k.len();
    let ow = w - n + 1;
    let oh = h - n + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            rows[r * ow + c] = (0..n).map(|i| k[i] * data[r * w + c + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = (0..n).map(|i| k[i] * rows[(r + i) * ow + c]).sum();
        }
    }
    out
}

/// Mean local SSIM over all valid 11×11 Gaussian windows (σ = 1.5) with
/// dynamic range `max(gt)`.
pub fn ssim(recon: &RealImage, gt: &RealImage) -> Result<f64> {
    check_pair(recon, gt)?;
    let (h, w) = (gt.grid().height(), gt.grid().width());
    let n = 2 * SSIM_RADIUS + 1;
    if h < n || w < n {
        return Err(invalid(format!("SSIM needs images of at least {n}x{n}")));
    }
    let range = gt.max();
    if !(range > 0.0) {
        return Err(invalid("reference image must have a positive maximum"));
    }
    let k = gaussian_window();
    let x = recon.data();
    let y = gt.data();
    let prod = |a: &[f64], b: &[f64]| -> Vec<f64> { a.iter().zip(b).map(|(u, v)| u * v).collect() };
    let mx = filter_valid(x, h, w, &k);
    let my = filter_valid(y, h, w, &k);
    let exx = filter_valid(&prod(x, x), h, w, &k);
    let eyy = filter_valid(&prod(y, y), h, w, &k);
    let exy = filter_valid(&prod(x, y), h, w, &k);
    let c1 = (SSIM_K1 * range).powi(2);
    let c2 = (SSIM_K2 * range).powi(2);
    let total: f64 = (0..mx.len())
        .map(|i| ssim_term(mx[i], my[i], exx[i], eyy[i], exy[i], c1, c2))
        .sum();
    Ok(total / mx.len() as f64)
}

fn ssim_term(mx: f64, my: f64, exx: f64, eyy: f64, exy: f64, c1: f64, c2: f64) -> f64 {
    let sx = exx - mx * mx;
    let sy = eyy - my * my;
    let sxy = exy - mx * my;
    ((2.0 * mx * my + c1) * (2.0 * sxy + c2)) / ((mx * mx + my * my + c1) * (sx + sy + c2))
}

fn check_timelines(est: &MotionTimeline, gt: &MotionTimeline) -> Result<()> {
    check_len(gt.len(), est.len())?;
    if gt.is_empty() {
        return Err(invalid("motion timelines are empty"));
    }
    Ok(())
}

/// Per-view absolute errors: rotation in degrees, shift magnitude in pixels.
fn abs_errors(est: &MotionTimeline, gt: &MotionTimeline, grid: &CanonicalGrid) -> (Vec<f64>, Vec<f64>) {
    let px = grid.canonical_per_pixel();
    est.triplets()
        .iter()
        .zip(gt.triplets())
        .map(|(e, g)| {
            let rot = (g.rotation - e.rotation).to_degrees().abs();
            let shift = (g.shift_x - e.shift_x).hypot(g.shift_y - e.shift_y) / px;
            (rot, shift)
        })
        .unzip()
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn population_std(v: &[f64]) -> f64 {
    let mu = mean(v);
    (v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64).sqrt()
}

/// Population standard deviation of the per-view absolute errors
/// `(σ_ϑ in degrees, σ_τ in pixels)`; shift errors are Euclidean norms.
pub fn motion_sigma(est: &MotionTimeline, gt: &MotionTimeline, grid: &CanonicalGrid) -> Result<(f64, f64)> {
    check_timelines(est, gt)?;
    let (rot, shift) = abs_errors(est, gt, grid);
    Ok((population_std(&rot), population_std(&shift)))
}

/// Mean absolute errors `(degrees, pixels)`.
pub fn motion_l1(est: &MotionTimeline, gt: &MotionTimeline, grid: &CanonicalGrid) -> Result<(f64, f64)> {
    check_timelines(est, gt)?;
    let (rot, shift) = abs_errors(est, gt, grid);
    Ok((mean(&rot), mean(&shift)))
}

/// Rigid transform `z ↦ A(β)z + c` relating the reconstruction's frame to the
/// reference frame, estimated from the motion errors.
///
/// Both timelines are given in subject convention. In the model's
/// convention every estimated view equals the true view composed with the
/// same unknown transform, so the mean rotation error gives `β` and the
/// rotated mean shift error gives `c`.
pub fn gauge_transform(est: &MotionTimeline, gt: &MotionTimeline) -> Result<MotionTriplet> {
    check_timelines(est, gt)?;
    let n = gt.len() as f64;
    let est_m: Vec<MotionTriplet> = est.triplets().iter().map(MotionTriplet::inverse).collect();
    let gt_m: Vec<MotionTriplet> = gt.triplets().iter().map(MotionTriplet::inverse).collect();
    let beta = -est_m.iter().zip(&gt_m).map(|(e, g)| e.rotation - g.rotation).sum::<f64>() / n;
    let a = rotation_unchecked(beta);
    let mut c = [0.0; 2];
    for (e, g) in est_m.iter().zip(&gt_m) {
        let r = mat_vec(&a, e.shift());
        c[0] += g.shift_x - r[0];
        c[1] += g.shift_y - r[1];
    }
    MotionTriplet::new(beta, c[0] / n, c[1] / n)
}

/// Brings a reconstruction into the reference frame: `recon(A(−β)(z − c))`.
pub fn align_reconstruction(recon: &ComplexImage, gauge: &MotionTriplet) -> ComplexImage {
    recon.moved_by(gauge)
}

pub fn evaluate(
    recon: &ComplexImage,
    gt: &ComplexImage,
    est: &MotionTimeline,
    gt_motion: &MotionTimeline,
) -> Result<EvalReport> {
    let grid = gt.grid();
    if recon.grid() != grid {
        return Err(invalid("reconstruction and reference sizes differ"));
    }
    let gauge = gauge_transform(est, gt_motion)?;
    let aligned = align_reconstruction(recon, &gauge).magnitude();
    let reference = gt.magnitude();
    let p = psnr(&aligned, &reference)?;
    let (sigma_rot, sigma_shift) = motion_sigma(est, gt_motion, &grid)?;
    let (l1_rot, l1_shift) = motion_l1(est, gt_motion, &grid)?;
    Ok(EvalReport {
        psnr: p,
        psnr_capped: p == PSNR_CAP_DB,
        ssim: ssim(&aligned, &reference)?,
        psnr_unaligned: psnr(&recon.magnitude(), &reference)?,
        sigma_rot,
        sigma_shift,
        l1_rot,
        l1_shift,
    })
}
