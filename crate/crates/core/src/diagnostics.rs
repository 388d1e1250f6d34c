//! Self-checks: finite-difference verification of every gradient path and
//! Fourier-slice consistency of the spectral conversions.

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::forward::{backward_batch, loss, project_ray, BatchRay, Gradients, RayBatch};
use crate::geometry::{build_ray, build_ray_with_extent, CanonicalGrid, MotionTimeline, MotionTriplet, RAY_EXTENT};
use crate::hash_encoding::{encode, HashGrid, HashGridConfig, MaskState};
use crate::image::ComplexImage;
use crate::network::{init_params, MlpParams};
use crate::spectral::{default_spoke_length, detector_offset, direct_spoke, kspace_to_projection};

pub const GRADCHECK_TOLERANCE: f64 = 1e-5;
pub const GRADCHECK_INSTANCES: usize = 20;
pub const FSC_TOLERANCE: f64 = 0.02;

const FD_STEP: f64 = 1e-6;
/// Minimum distance of any sample from a cell edge, in cell fractions.
const EDGE_CLEARANCE: f64 = 1e-3;
/// Minimum normalized distance of any measurement from its prediction.
const KINK_CLEARANCE: f64 = 1e-3;
const SCALE_FLOOR: f64 = 1e-3;

/// Deliberate corruption of an analytic gradient, used to show the check
/// can fail.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Fault {
    None,
    /// Scales the rotation gradients by 1.001.
    RotationScale,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BlockError {
    pub name: String,
    /// Largest absolute deviation divided by the largest analytic magnitude
    /// in the block, over all instances.
    pub max_rel_error: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradcheckReport {
    pub instances: usize,
    pub blocks: Vec<BlockError>,
    /// Largest finite-difference response to perturbing a masked level.
    pub masked_sensitivity: f64,
}

impl GradcheckReport {
    pub fn passed(&self) -> bool {
        self.masked_sensitivity == 0.0 && self.blocks.iter().all(|b| b.max_rel_error < GRADCHECK_TOLERANCE)
    }
}

struct Instance {
    grid: HashGrid,
    masks: MaskState,
    mlp: MlpParams,
    timeline: MotionTimeline,
    batch: RayBatch,
}

impl Instance {
    fn loss(&self) -> f64 {
        self.loss_with(&self.grid, &self.mlp, &self.timeline)
    }

    fn loss_with(&self, grid: &HashGrid, mlp: &MlpParams, timeline: &MotionTimeline) -> f64 {
        let preds: Vec<Complex64> = self
            .batch
            .rays
            .iter()
            .map(|r| project_ray(&r.ray, &timeline.get(r.view), grid, &self.masks, mlp).expect("valid instance"))
            .collect();
        loss(&self.batch, &preds).expect("aligned predictions")
    }
}

fn gradcheck_config() -> HashGridConfig {
    // levels 1-2 dense, 3-4 hashed
    HashGridConfig {
        levels: 4,
        features_per_level: 2,
        table_size: 64,
        base_resolution: 2,
        growth_factor: 2.0,
        domain_margin: 0.5,
    }
}

/// Draws a random instance, or `None` when a sample sits too close to a
/// cell edge, a ReLU hinge or an L1 kink.
fn draw_instance(rng: &mut ChaCha8Rng, seed: u64) -> Result<Option<Instance>> {
    let cfg = gradcheck_config();
    let mut grid = HashGrid::new(cfg.clone(), seed)?;
    for t in grid.tables_mut() {
        for v in t.iter_mut() {
            *v = rng.gen_range(-1.0..1.0);
        }
    }
    // the last level stays masked to probe zero sensitivity
    let masks = MaskState::new(4, 2, 3.5)?;
    let mut mlp = init_params(seed, cfg.output_dim(), 12)?;
    for b in mlp.b1.iter_mut() {
        *b = rng.gen_range(-0.5..0.5);
    }
    mlp.b2 = [rng.gen_range(-0.5..0.5), rng.gen_range(-0.5..0.5)];
    let views = 3;
    let triplets = (0..views)
        .map(|_| MotionTriplet::new(rng.gen_range(-0.3..0.3), rng.gen_range(-0.1..0.1), rng.gen_range(-0.1..0.1)))
        .collect::<Result<Vec<_>>>()?;
    let timeline = MotionTimeline::new(triplets, (0..views as u32).collect())?;

    let mut rays = Vec::new();
    for view in 0..views {
        let theta = rng.gen_range(0.0..std::f64::consts::TAU);
        for bin in 0..2 {
            let ray = build_ray(theta, rng.gen_range(-0.8..0.8), 9)?;
            let motion = timeline.get(view);
            for p in &ray.points {
                let x = motion.apply(*p);
                for level in 0..masks.active_levels() {
                    if grid.cell_fraction(level, x).iter().any(|&f| f < EDGE_CLEARANCE || f > 1.0 - EDGE_CLEARANCE) {
                        return Ok(None);
                    }
                }
                let v = encode(x, &grid, &masks)?;
                for j in 0..mlp.width {
                    let z: f64 = mlp.b1[j] + (0..v.len()).map(|i| v[i] * mlp.w1[i * mlp.width + j]).sum::<f64>();
                    if z.abs() < 1e-4 {
                        return Ok(None);
                    }
                }
            }
            let pred = project_ray(&ray, &motion, &grid, &masks, &mlp)?;
            let offset = Complex64::new(rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0));
            if offset.re.abs() < KINK_CLEARANCE || offset.im.abs() < KINK_CLEARANCE {
                return Ok(None);
            }
            rays.push(BatchRay { view, bin, ray, measured: pred + offset });
        }
    }
    Ok(Some(Instance { grid, masks, mlp, timeline, batch: RayBatch::new(rays)? }))
}

struct Accumulator {
    names: Vec<String>,
    worst: Vec<f64>,
}

impl Accumulator {
    fn record(&mut self, name: &str, analytic: &[f64], numeric: &[f64]) {
        let scale = analytic.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let dev = analytic.iter().zip(numeric).fold(0.0f64, |m, (a, n)| m.max((a - n).abs()));
        // a block whose gradient vanishes (e.g. cancelling signs) is judged
        // against the finite-difference round-off floor instead
        let rel = dev / scale.max(SCALE_FLOOR);
        let slot = match self.names.iter().position(|n| n == name) {
            Some(i) => i,
            None => {
                self.names.push(name.to_string());
                self.worst.push(0.0);
                self.names.len() - 1
            }
        };
        self.worst[slot] = self.worst[slot].max(rel);
    }
}

fn central(f: impl Fn(f64) -> f64, x: f64) -> f64 {
    (f(x + FD_STEP) - f(x - FD_STEP)) / (2.0 * FD_STEP)
}

fn fd_vec(values: &[f64], eval: impl Fn(usize, f64) -> f64) -> Vec<f64> {
    (0..values.len()).map(|i| central(|v| eval(i, v), values[i])).collect()
}

fn corrupt(grads: &mut Gradients, fault: Fault) {
    if fault == Fault::RotationScale {
        for g in grads.motion.iter_mut() {
            g[0] *= 1.001;
        }
    }
}

/// Compares every analytic gradient block of the batch loss with central
/// differences on [`GRADCHECK_INSTANCES`] seeded instances.
pub fn gradcheck(seed: u64, fault: Fault) -> Result<GradcheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut acc = Accumulator { names: Vec::new(), worst: Vec::new() };
    let mut masked_sensitivity = 0.0f64;
    let mut done = 0;
    let mut draw = 0u64;
    while done < GRADCHECK_INSTANCES {
        draw += 1;
        let Some(inst) = draw_instance(&mut rng, seed.wrapping_add(draw))? else {
            continue;
        };
        let mut eval = backward_batch(&inst.batch, &inst.timeline, &inst.grid, &inst.masks, &inst.mlp)?;
        corrupt(&mut eval.gradients, fault);
        let g = &eval.gradients;
        debug_assert!((eval.loss - inst.loss()).abs() < 1e-12);

        for level in 0..inst.grid.config().levels {
            let table = &inst.grid.tables()[level];
            let numeric = fd_vec(table, |i, v| {
                let mut grid = inst.grid.clone();
                grid.tables_mut()[level][i] = v;
                inst.loss_with(&grid, &inst.mlp, &inst.timeline)
            });
            if inst.masks.is_enabled(level) {
                acc.record(&format!("features[level {}]", level + 1), &g.features.tables[level], &numeric);
            } else {
                let worst = numeric.iter().chain(&g.features.tables[level]).fold(0.0f64, |m, v| m.max(v.abs()));
                masked_sensitivity = masked_sensitivity.max(worst);
            }
        }
        let mlp_eval = |edit: &dyn Fn(&mut MlpParams)| {
            let mut mlp = inst.mlp.clone();
            edit(&mut mlp);
            inst.loss_with(&inst.grid, &mlp, &inst.timeline)
        };
        let n = fd_vec(&inst.mlp.w1, |i, v| mlp_eval(&|m| m.w1[i] = v));
        acc.record("W1", &g.mlp.w1, &n);
        let n = fd_vec(&inst.mlp.b1, |i, v| mlp_eval(&|m| m.b1[i] = v));
        acc.record("b1", &g.mlp.b1, &n);
        let n = fd_vec(&inst.mlp.w2, |i, v| mlp_eval(&|m| m.w2[i] = v));
        acc.record("W2", &g.mlp.w2, &n);
        let n = fd_vec(&inst.mlp.b2, |i, v| mlp_eval(&|m| m.b2[i] = v));
        acc.record("b2", &g.mlp.b2, &n);

        let motion_eval = |view: usize, k: usize, v: f64| {
            let mut triplets = inst.timeline.triplets().to_vec();
            let t = &mut triplets[view];
            match k {
                0 => t.rotation = v,
                1 => t.shift_x = v,
                _ => t.shift_y = v,
            }
            let tl = MotionTimeline::new(triplets, inst.timeline.stages().to_vec()).expect("finite");
            inst.loss_with(&inst.grid, &inst.mlp, &tl)
        };
        let mut rot_a = Vec::new();
        let mut rot_n = Vec::new();
        let mut sh_a = Vec::new();
        let mut sh_n = Vec::new();
        for (view, t) in inst.timeline.triplets().iter().enumerate() {
            rot_a.push(g.motion[view][0]);
            rot_n.push(central(|v| motion_eval(view, 0, v), t.rotation));
            sh_a.extend([g.motion[view][1], g.motion[view][2]]);
            sh_n.push(central(|v| motion_eval(view, 1, v), t.shift_x));
            sh_n.push(central(|v| motion_eval(view, 2, v), t.shift_y));
        }
        acc.record("rotation", &rot_a, &rot_n);
        acc.record("shift", &sh_a, &sh_n);
        done += 1;
    }
    Ok(GradcheckReport {
        instances: done,
        blocks: acc
            .names
            .into_iter()
            .zip(acc.worst)
            .map(|(name, max_rel_error)| BlockError { name, max_rel_error })
            .collect(),
        masked_sensitivity,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FscCase {
    pub name: String,
    pub rel_l2_error: f64,
    pub tolerance: f64,
}

impl FscCase {
    pub fn passed(&self) -> bool {
        self.rel_l2_error <= self.tolerance
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FscReport {
    pub cases: Vec<FscCase>,
}

impl FscReport {
    pub fn passed(&self) -> bool {
        self.cases.iter().all(FscCase::passed)
    }
}

fn rel_l2(a: &[Complex64], b: &[Complex64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    if den == 0.0 {
        if num == 0.0 {
            0.0
        } else {
            f64::INFINITY
        }
    } else {
        (num / den).sqrt()
    }
}

/// Projection profile of `image` at `theta` recovered from its spoke.
fn spoke_profile(image: &ComplexImage, theta: f64, m: usize) -> Result<Vec<Complex64>> {
    Ok(kspace_to_projection(&direct_spoke(image, theta, m, RAY_EXTENT)?)?.samples)
}

/// Line integrals of the bilinear interpolant at every detector bin.
fn dense_profile(image: &ComplexImage, theta: f64, m: usize, samples: usize) -> Result<Vec<Complex64>> {
    (0..m)
        .map(|n| {
            let ray = build_ray_with_extent(theta, detector_offset(n, m, RAY_EXTENT), samples, RAY_EXTENT)?;
            Ok(ray.points.iter().map(|x| image.sample(*x)).sum::<Complex64>() * ray.step)
        })
        .collect()
}

/// Disk of radius `r` with edge pixels weighted by their covered area.
pub fn disk_phantom(n: usize, r: f64) -> Result<ComplexImage> {
    let grid = CanonicalGrid::new(n, n)?;
    let sub = 8;
    let (pw, ph) = (grid.pixel_width(), grid.pixel_height());
    Ok(ComplexImage::from_fn(grid, |p| {
        let mut inside = 0;
        for i in 0..sub {
            for j in 0..sub {
                let x = p[0] + ((i as f64 + 0.5) / sub as f64 - 0.5) * pw;
                let y = p[1] + ((j as f64 + 0.5) / sub as f64 - 0.5) * ph;
                if x * x + y * y <= r * r {
                    inside += 1;
                }
            }
        }
        Complex64::new(inside as f64 / (sub * sub) as f64, 0.0)
    }))
}

/// Random sum of Gaussian bumps with a smooth phase.
pub fn smooth_random_image(n: usize, seed: u64) -> Result<ComplexImage> {
    let grid = CanonicalGrid::new(n, n)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let bumps: Vec<[f64; 5]> = (0..6)
        .map(|_| {
            [
                rng.gen_range(-0.5..0.5),
                rng.gen_range(-0.5..0.5),
                rng.gen_range(0.12..0.3),
                rng.gen_range(0.2..1.0),
                rng.gen_range(-1.0..1.0),
            ]
        })
        .collect();
    Ok(ComplexImage::from_fn(grid, |p| {
        bumps
            .iter()
            .map(|b| {
                let r2 = (p[0] - b[0]).powi(2) + (p[1] - b[1]).powi(2);
                Complex64::from_polar(b[3] * (-r2 / (2.0 * b[2] * b[2])).exp(), b[4] * (p[0] + p[1]))
            })
            .sum()
    }))
}

/// Fourier-slice consistency on a 64×64 grid: a disk against its analytic
/// chord lengths, a zero image, and random smooth images against dense line
/// integration.
pub fn fsc_check() -> Result<FscReport> {
    let n = 64;
    let m = default_spoke_length(n);
    let mut cases = Vec::new();

    let radius = 0.5;
    let disk = disk_phantom(n, radius)?;
    let chord: Vec<Complex64> = (0..m)
        .map(|k| {
            let rho = detector_offset(k, m, RAY_EXTENT);
            Complex64::new(2.0 * (radius * radius - rho * rho).max(0.0).sqrt(), 0.0)
        })
        .collect();
    let mut worst: f64 = 0.0;
    for theta in [0.0, 0.4, 1.1, 2.5] {
        worst = worst.max(rel_l2(&spoke_profile(&disk, theta, m)?, &chord));
    }
    cases.push(FscCase { name: "disk vs chord length".into(), rel_l2_error: worst, tolerance: FSC_TOLERANCE });

    let zero = ComplexImage::zeros(CanonicalGrid::new(n, n)?);
    let a = spoke_profile(&zero, 0.7, m)?;
    let b = dense_profile(&zero, 0.7, m, 4 * m)?;
    let err = if a.iter().chain(&b).all(|v| *v == Complex64::new(0.0, 0.0)) { 0.0 } else { f64::INFINITY };
    cases.push(FscCase { name: "zero image".into(), rel_l2_error: err, tolerance: 0.0 });

    let mut worst: f64 = 0.0;
    for seed in 0..4 {
        let img = smooth_random_image(n, seed)?;
        for theta in [0.2, 1.3, 2.2, 4.0] {
            let a = spoke_profile(&img, theta, m)?;
            let b = dense_profile(&img, theta, m, 4 * m)?;
            worst = worst.max(rel_l2(&a, &b));
        }
    }
    cases.push(FscCase { name: "random smooth images".into(), rel_l2_error: worst, tolerance: FSC_TOLERANCE });
    Ok(FscReport { cases })
}
