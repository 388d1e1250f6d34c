//! Differentiable acquisition model.
//!
//! A ray's predicted projection is the Riemann sum of the neural field along
//! the ray after each sample is carried into the moving frame by the view's
//! rigid motion. The loss is the L1 distance between predicted and measured
//! projections, summed over the rays of a batch. The reverse pass reaches the
//! hash features, the network weights and the per-view motion triplets.

use std::collections::HashSet;

use num_complex::Complex64;

use crate::error::{check_len, invalid, Result};
use crate::geometry::{rotation_derivative_unchecked, CanonicalGrid, MotionTimeline, MotionTriplet, Point, Ray};
use crate::hash_encoding::{Corners, FeatureGrads, HashGrid, MaskState};
use crate::image::ComplexImage;
use crate::network::{MlpGrads, MlpParams};

/// A ray of one view paired with its measured projection value.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchRay {
    pub view: usize,
    pub bin: usize,
    pub ray: Ray,
    pub measured: Complex64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RayBatch {
    pub rays: Vec<BatchRay>,
}

impl RayBatch {
    pub fn new(rays: Vec<BatchRay>) -> Result<Self> {
        let mut seen = HashSet::with_capacity(rays.len());
        for r in &rays {
            if !seen.insert((r.view, r.bin)) {
                return Err(invalid(format!("duplicate ray (view {}, bin {})", r.view, r.bin)));
            }
        }
        Ok(Self { rays })
    }

    pub fn len(&self) -> usize {
        self.rays.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays.is_empty()
    }
}

/// Gradients of the batch loss. Motion gradients are `(ϑ, τx, τy)` per view.
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub features: FeatureGrads,
    pub mlp: MlpGrads,
    pub motion: Vec<[f64; 3]>,
}

impl Gradients {
    pub fn zeros(grid: &HashGrid, mlp: &MlpParams, views: usize) -> Self {
        Self {
            features: FeatureGrads::zeros_like(grid),
            mlp: MlpGrads::zeros_like(mlp),
            motion: vec![[0.0; 3]; views],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.features.is_zero()
            && self.mlp.is_zero()
            && self.motion.iter().flatten().all(|&g| g == 0.0)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchEvaluation {
    pub loss: f64,
    pub predictions: Vec<Complex64>,
    pub gradients: Gradients,
}

/// Field evaluation state saved by a forward pass over one ray.
#[derive(Debug, Default)]
pub(crate) struct RayTape {
    samples: usize,
    step: f64,
    points: Vec<Point>,
    features: Vec<f64>,
    hidden: Vec<f64>,
    corners: Vec<Vec<Corners>>,
}

/// Reusable buffers for evaluating the field along rays.
#[derive(Debug)]
pub(crate) struct RayEngine {
    input_dim: usize,
    width: usize,
    active_levels: usize,
    active_dims: usize,
    dv: Vec<f64>,
    scratch: Vec<f64>,
}

pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl RayEngine {
    pub fn new(grid: &HashGrid, masks: &MaskState, mlp: &MlpParams) -> Result<Self> {
        check_len(grid.config().levels, masks.levels())?;
        check_len(grid.config().output_dim(), mlp.input_dim)?;
        let f = grid.config().features_per_level;
        Ok(Self {
            input_dim: mlp.input_dim,
            width: mlp.width,
            active_levels: masks.active_levels(),
            active_dims: masks.active_levels() * f,
            dv: vec![0.0; mlp.input_dim],
            scratch: vec![0.0; mlp.width],
        })
    }

    pub fn set_masks(&mut self, grid: &HashGrid, masks: &MaskState) {
        self.active_levels = masks.active_levels();
        self.active_dims = masks.active_levels() * grid.config().features_per_level;
    }

    /// Forward pass over a ray under `motion`; fills `tape` for the reverse pass.
    pub fn forward(
        &self,
        grid: &HashGrid,
        mlp: &MlpParams,
        ray: &Ray,
        motion: &MotionTriplet,
        tape: &mut RayTape,
    ) -> Complex64 {
        let n = ray.points.len();
        tape.samples = n;
        tape.step = ray.step;
        tape.points.clear();
        tape.points.extend_from_slice(&ray.points);
        tape.features.resize(n * self.input_dim, 0.0);
        tape.hidden.resize(n * self.width, 0.0);
        if tape.corners.len() < n {
            tape.corners.resize_with(n, Vec::new);
        }
        let identity = motion.is_identity();
        let mut sum = [0.0; 2];
        for (s, x) in ray.points.iter().enumerate() {
            let moved = if identity { *x } else { motion.apply(*x) };
            let v = &mut tape.features[s * self.input_dim..(s + 1) * self.input_dim];
            grid.encode_into(moved, self.active_levels, v, &mut tape.corners[s]);
            let h = &mut tape.hidden[s * self.width..(s + 1) * self.width];
            let out = mlp.forward_prefix(v, self.active_dims, h);
            sum[0] += out[0];
            sum[1] += out[1];
        }
        Complex64::new(sum[0] * ray.step, sum[1] * ray.step)
    }

    /// Reverse pass for a ray whose loss gradient with respect to
    /// `(Re ĝ, Im ĝ)` is `upstream`. Returns the motion gradient `(ϑ, τx, τy)`
    /// when `motion` is given.
    pub fn backward(
        &mut self,
        grid: &HashGrid,
        mlp: &MlpParams,
        tape: &RayTape,
        upstream: [f64; 2],
        motion: Option<&MotionTriplet>,
        features: &mut FeatureGrads,
        mlp_grads: &mut MlpGrads,
    ) -> [f64; 3] {
        let up = [upstream[0] * tape.step, upstream[1] * tape.step];
        let mut out = [0.0; 3];
        if up == [0.0, 0.0] {
            return out;
        }
        let dtheta = motion.map(|m| rotation_derivative_unchecked(m.rotation));
        for s in 0..tape.samples {
            let v = &tape.features[s * self.input_dim..(s + 1) * self.input_dim];
            let h = &tape.hidden[s * self.width..(s + 1) * self.width];
            mlp.backward_prefix(v, self.active_dims, h, up, mlp_grads, &mut self.dv, &mut self.scratch);
            let coord = grid.backward_from_tape(&tape.corners[s], &self.dv, Some(&mut features.tables));
            if let Some(d) = &dtheta {
                let x = tape.points[s];
                let dx = [d[0][0] * x[0] + d[0][1] * x[1], d[1][0] * x[0] + d[1][1] * x[1]];
                out[0] += coord[0] * dx[0] + coord[1] * dx[1];
                out[1] += coord[0];
                out[2] += coord[1];
            }
        }
        out
    }
}

/// Predicted projection of one ray under one view's motion.
pub fn project_ray(
    ray: &Ray,
    triplet: &MotionTriplet,
    grid: &HashGrid,
    masks: &MaskState,
    mlp: &MlpParams,
) -> Result<Complex64> {
    if ray.points.len() < 2 {
        return Err(invalid("a ray needs at least 2 samples"));
    }
    let engine = RayEngine::new(grid, masks, mlp)?;
    let mut tape = RayTape::default();
    Ok(engine.forward(grid, mlp, ray, triplet, &mut tape))
}

/// `Σ |Re(ĝ − g)| + |Im(ĝ − g)|` over the batch.
pub fn loss(batch: &RayBatch, predictions: &[Complex64]) -> Result<f64> {
    check_len(batch.len(), predictions.len())?;
    Ok(batch
        .rays
        .iter()
        .zip(predictions)
        .map(|(r, p)| {
            let d = p - r.measured;
            d.re.abs() + d.im.abs()
        })
        .sum())
}

/// Loss, predictions and gradients of a batch. Rays are reduced in ascending
/// `(view, bin)` order.
pub fn backward_batch(
    batch: &RayBatch,
    timeline: &MotionTimeline,
    grid: &HashGrid,
    masks: &MaskState,
    mlp: &MlpParams,
) -> Result<BatchEvaluation> {
    if batch.is_empty() {
        return Err(invalid("batch is empty"));
    }
    for r in &batch.rays {
        if r.view >= timeline.len() {
            return Err(invalid(format!("view {} has no motion triplet", r.view)));
        }
    }
    let mut order: Vec<usize> = (0..batch.len()).collect();
    order.sort_by_key(|&i| (batch.rays[i].view, batch.rays[i].bin));

    let mut engine = RayEngine::new(grid, masks, mlp)?;
    let mut tape = RayTape::default();
    let mut gradients = Gradients::zeros(grid, mlp, timeline.len());
    let mut predictions = vec![Complex64::new(0.0, 0.0); batch.len()];
    let mut total = 0.0;
    for i in order {
        let r = &batch.rays[i];
        let motion = timeline.get(r.view);
        let pred = engine.forward(grid, mlp, &r.ray, &motion, &mut tape);
        predictions[i] = pred;
        let d = pred - r.measured;
        total += d.re.abs() + d.im.abs();
        let g = engine.backward(
            grid,
            mlp,
            &tape,
            [sign(d.re), sign(d.im)],
            Some(&motion),
            &mut gradients.features,
            &mut gradients.mlp,
        );
        for (acc, v) in gradients.motion[r.view].iter_mut().zip(g) {
            *acc += v;
        }
    }
    Ok(BatchEvaluation {
        loss: total,
        predictions,
        gradients,
    })
}

/// Evaluates the field (without motion) at every pixel center of `out`.
pub fn render_image(grid: &HashGrid, masks: &MaskState, mlp: &MlpParams, out: &CanonicalGrid) -> Result<ComplexImage> {
    let engine = RayEngine::new(grid, masks, mlp)?;
    let mut v = vec![0.0; mlp.input_dim];
    let mut hidden = vec![0.0; mlp.width];
    let mut corners = Vec::new();
    Ok(ComplexImage::from_fn(*out, |p| {
        grid.encode_into(p, engine.active_levels, &mut v, &mut corners);
        let o = mlp.forward_prefix(&v, engine.active_dims, &mut hidden);
        Complex64::new(o[0], o[1])
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{build_ray, build_ray_with_extent, RAY_EXTENT};
    use crate::hash_encoding::{encode, HashGridConfig};
    use crate::network::{init_params, mlp_forward};

    fn small_model(seed: u64) -> (HashGrid, MaskState, MlpParams) {
        let cfg = HashGridConfig {
            levels: 4,
            features_per_level: 2,
            table_size: 64,
            base_resolution: 2,
            growth_factor: 2.0,
            domain_margin: 0.5,
        };
        let mut grid = HashGrid::new(cfg, seed).unwrap();
        for t in grid.tables_mut() {
            for v in t.iter_mut() {
                *v *= 5e3;
            }
        }
        let masks = MaskState::all(4, 2).unwrap();
        let mut mlp = init_params(seed, 8, 16).unwrap();
        for (j, b) in mlp.b1.iter_mut().enumerate() {
            *b = 0.05 * (j as f64 - 8.0);
        }
        (grid, masks, mlp)
    }

    #[test]
    fn constant_field_integrates_to_extent() {
        let (grid, masks, mut mlp) = small_model(1);
        mlp.w2.fill(0.0);
        mlp.b2 = [0.7, 0.0];
        let ray = build_ray(0.3, 0.2, 40).unwrap();
        let g = project_ray(&ray, &MotionTriplet::IDENTITY, &grid, &masks, &mlp).unwrap();
        assert!((g.re - 0.7 * RAY_EXTENT).abs() < 1e-12);
        assert_eq!(g.im, 0.0);
    }

    #[test]
    fn zero_model_projects_to_zero() {
        let cfg = HashGridConfig::default();
        let grid = HashGrid::zeros(cfg.clone()).unwrap();
        let masks = MaskState::all(16, 2).unwrap();
        let mlp = crate::network::MlpParams::zeros(32, 8).unwrap();
        let ray = build_ray(1.0, -0.4, 20).unwrap();
        let g = project_ray(&ray, &MotionTriplet::new(0.1, 0.2, 0.0).unwrap(), &grid, &masks, &mlp).unwrap();
        assert_eq!(g, Complex64::new(0.0, 0.0));
        let img = render_image(&grid, &masks, &mlp, &CanonicalGrid::new(4, 4).unwrap()).unwrap();
        assert!(img.data().iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn projection_matches_straight_line_oracle() {
        for seed in 0..5 {
            let (grid, masks, mlp) = small_model(seed);
            let motion = MotionTriplet::new(0.2 - 0.1 * seed as f64, 0.05, -0.03).unwrap();
            let ray = build_ray(0.4 * seed as f64, 0.3, 33).unwrap();
            let got = project_ray(&ray, &motion, &grid, &masks, &mlp).unwrap();
            let (c, s) = (motion.rotation.cos(), motion.rotation.sin());
            let mut acc = Complex64::new(0.0, 0.0);
            for p in &ray.points {
                let x = [c * p[0] - s * p[1] + motion.shift_x, s * p[0] + c * p[1] + motion.shift_y];
                let o = mlp_forward(&mlp, &encode(x, &grid, &masks).unwrap()).unwrap();
                acc += Complex64::new(o[0], o[1]) * ray.step;
            }
            assert!((got - acc).norm() < 1e-12);
        }
    }

    #[test]
    fn loss_examples() {
        let ray = build_ray(0.0, 0.0, 4).unwrap();
        let batch = RayBatch::new(vec![BatchRay { view: 0, bin: 0, ray, measured: Complex64::new(1.0, 2.0) }]).unwrap();
        assert_eq!(loss(&batch, &[Complex64::new(1.0, 2.0)]).unwrap(), 0.0);
        assert_eq!(loss(&batch, &[Complex64::new(1.5, 2.0)]).unwrap(), 0.5);
        assert!(loss(&batch, &[]).is_err());
    }

    #[test]
    fn duplicate_rays_are_rejected() {
        let ray = build_ray(0.0, 0.0, 4).unwrap();
        let r = BatchRay { view: 1, bin: 2, ray, measured: Complex64::new(0.0, 0.0) };
        assert!(RayBatch::new(vec![r.clone(), r]).is_err());
    }

    #[test]
    fn perfect_fit_has_zero_gradients() {
        let (grid, masks, mlp) = small_model(2);
        let timeline = MotionTimeline::new(
            vec![MotionTriplet::new(0.1, 0.02, 0.0).unwrap(); 3],
            vec![0, 0, 1],
        )
        .unwrap();
        let mut rays = Vec::new();
        for view in 0..3 {
            let ray = build_ray(0.7 * view as f64, 0.1, 16).unwrap();
            let g = project_ray(&ray, &timeline.get(view), &grid, &masks, &mlp).unwrap();
            rays.push(BatchRay { view, bin: 0, ray, measured: g });
        }
        let eval = backward_batch(&RayBatch::new(rays).unwrap(), &timeline, &grid, &masks, &mlp).unwrap();
        assert_eq!(eval.loss, 0.0);
        assert!(eval.gradients.is_zero());
    }

    #[test]
    fn constant_field_has_no_motion_gradient() {
        let (grid, masks, mut mlp) = small_model(3);
        mlp.w2.fill(0.0);
        mlp.b2 = [0.4, -0.2];
        let timeline = MotionTimeline::new(vec![MotionTriplet::new(0.3, 0.1, 0.1).unwrap(); 2], vec![0, 1]).unwrap();
        let rays = (0..2)
            .map(|view| BatchRay {
                view,
                bin: 0,
                ray: build_ray(1.0 + view as f64, 0.2, 12).unwrap(),
                measured: Complex64::new(0.0, 0.0),
            })
            .collect();
        let eval = backward_batch(&RayBatch::new(rays).unwrap(), &timeline, &grid, &masks, &mlp).unwrap();
        assert!(eval.gradients.motion.iter().flatten().all(|&g| g == 0.0));
        assert!(eval.loss > 0.0);
    }

    #[test]
    fn absent_views_get_no_motion_gradient() {
        let (grid, masks, mlp) = small_model(4);
        let timeline = MotionTimeline::new(vec![MotionTriplet::new(0.05, 0.0, 0.01).unwrap(); 4], vec![0; 4]).unwrap();
        let rays = vec![BatchRay {
            view: 2,
            bin: 5,
            ray: build_ray(0.5, 0.1, 20).unwrap(),
            measured: Complex64::new(10.0, -10.0),
        }];
        let eval = backward_batch(&RayBatch::new(rays).unwrap(), &timeline, &grid, &masks, &mlp).unwrap();
        for (v, g) in eval.gradients.motion.iter().enumerate() {
            if v != 2 {
                assert_eq!(*g, [0.0; 3]);
            }
        }
        assert!(eval.gradients.motion[2].iter().any(|&g| g != 0.0));
    }

    #[test]
    fn projection_scales_with_the_head() {
        let (grid, masks, mlp) = small_model(5);
        let mut scaled = mlp.clone();
        for w in scaled.w2.iter_mut() {
            *w *= 2.0;
        }
        scaled.b2 = [mlp.b2[0] * 2.0, mlp.b2[1] * 2.0];
        let ray = build_ray(0.9, -0.2, 25).unwrap();
        let m = MotionTriplet::new(0.1, 0.0, 0.0).unwrap();
        let a = project_ray(&ray, &m, &grid, &masks, &mlp).unwrap();
        let b = project_ray(&ray, &m, &grid, &masks, &scaled).unwrap();
        assert_eq!(a * 2.0, b);
    }

    #[test]
    fn render_matches_per_pixel_oracle_and_line_sums() {
        let (grid, masks, mlp) = small_model(6);
        let out = CanonicalGrid::new(12, 12).unwrap();
        let img = render_image(&grid, &masks, &mlp, &out).unwrap();
        for r in 0..12 {
            for c in 0..12 {
                let o = mlp_forward(&mlp, &encode(out.pixel_center(r, c), &grid, &masks).unwrap()).unwrap();
                assert!((img.get(r, c) - Complex64::new(o[0], o[1])).norm() < 1e-12);
            }
        }
        // a vertical ray through column 5 shares its samples with the pixel centers
        let col = 5;
        let ray = build_ray_with_extent(0.0, out.pixel_center(0, col)[0], 12, 2.0).unwrap();
        let g = project_ray(&ray, &MotionTriplet::IDENTITY, &grid, &masks, &mlp).unwrap();
        let line: Complex64 = (0..12).map(|r| img.get(r, col) * ray.step).sum();
        assert!((g - line).norm() < 1e-10);
    }
}
