//! Joint optimization of the neural field and the per-view motion.

use num_complex::Complex64;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, invalid, Result};
use crate::forward::{sign, Gradients, RayEngine, RayTape};
use crate::geometry::{build_ray_with_extent, CanonicalGrid, MotionTimeline, MotionTriplet};
use crate::hash_encoding::{HashGrid, HashGridConfig, MaskState};
use crate::image::ComplexImage;
use crate::network::{init_params, MlpParams};
use crate::simulator::{ProjectionSet, RadialKSpace};
use crate::spectral::{projection_to_kspace, projection_to_kspace_adjoint, ProjectionProfile};

const RAY_STREAM: u64 = 0x72617973;

/// Domain in which predictions are compared with the data.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ForwardArm {
    Projection,
    KSpace,
}

/// Which views share one motion triplet.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MotionSharing {
    /// One triplet per view.
    PerView,
    /// One triplet per motion stage recorded in the dataset.
    PerStage,
}

/// How the encoding levels are unmasked over training.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncodingSchedule {
    /// Linear ramp of `λ` from `lambda_start` to `lambda_end`.
    CoarseToFine,
    /// Every level on from the start.
    Fine,
    /// Only the first `coarse_levels` levels, throughout.
    Coarse,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    /// Optimization steps; each step draws one batch.
    pub epochs: usize,
    pub rays_per_step: usize,
    pub lr0: f64,
    pub lr_halving_period: usize,
    pub lambda_start: f64,
    pub lambda_end: f64,
    pub lambda_ramp_fraction: f64,
    pub coarse_levels: usize,
    pub encoding: EncodingSchedule,
    pub forward_arm: ForwardArm,
    pub motion_enabled: bool,
    pub motion_sharing: MotionSharing,
    /// Skip Adam updates of hash entries whose gradient is exactly zero.
    pub sparse_feature_updates: bool,
    pub hash: HashGridConfig,
    pub mlp_width: usize,
    /// Samples per ray; `None` uses the spoke length.
    pub samples_per_ray: Option<usize>,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 4000,
            rays_per_step: 80,
            lr0: 1e-3,
            lr_halving_period: 1000,
            lambda_start: 4.0,
            lambda_end: 16.0,
            lambda_ramp_fraction: 0.5,
            coarse_levels: 6,
            encoding: EncodingSchedule::CoarseToFine,
            forward_arm: ForwardArm::Projection,
            motion_enabled: true,
            motion_sharing: MotionSharing::PerView,
            sparse_feature_updates: false,
            hash: HashGridConfig::default(),
            mlp_width: 128,
            samples_per_ray: None,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.hash.validate()?;
        let levels = self.hash.levels as f64;
        if self.epochs == 0 || self.rays_per_step == 0 || self.mlp_width == 0 {
            return Err(invalid("epochs, rays per step and network width must be positive"));
        }
        if self.lr_halving_period == 0 || !(self.lr0.is_finite() && self.lr0 > 0.0) {
            return Err(invalid("learning rate and halving period must be positive"));
        }
        if !(self.lambda_start >= 0.0 && self.lambda_start <= self.lambda_end.min(levels)) {
            return Err(invalid("need 0 ≤ lambda_start ≤ lambda_end ≤ levels"));
        }
        if !(self.lambda_ramp_fraction > 0.0 && self.lambda_ramp_fraction <= 1.0) {
            return Err(invalid("lambda ramp fraction must lie in (0, 1]"));
        }
        if self.coarse_levels == 0 || self.coarse_levels > self.hash.levels {
            return Err(invalid("coarse level count must lie in 1..=levels"));
        }
        if matches!(self.samples_per_ray, Some(n) if n < 2) {
            return Err(invalid("rays need at least 2 samples"));
        }
        Ok(())
    }

    fn lambda_end_clamped(&self) -> f64 {
        self.lambda_end.min(self.hash.levels as f64)
    }
}

/// `lr0 · 0.5^⌊epoch/period⌋`.
pub fn lr_at(epoch: usize, config: &TrainConfig) -> f64 {
    config.lr0 * 0.5f64.powi((epoch / config.lr_halving_period) as i32)
}

/// Linear ramp from `lambda_start` to `lambda_end` over the first
/// `lambda_ramp_fraction` of the epochs, flat afterwards.
pub fn lambda_at(epoch: usize, config: &TrainConfig) -> f64 {
    let ramp = config.lambda_ramp_fraction * config.epochs as f64;
    let t = (epoch as f64 / ramp).min(1.0);
    let end = config.lambda_end_clamped();
    config.lambda_start + (end - config.lambda_start) * t
}

/// `λ` used at `epoch` under the configured encoding schedule.
pub fn scheduled_lambda(epoch: usize, config: &TrainConfig) -> f64 {
    let levels = config.hash.levels as f64;
    match config.encoding {
        EncodingSchedule::CoarseToFine => lambda_at(epoch, config),
        EncodingSchedule::Fine => levels,
        EncodingSchedule::Coarse => (config.coarse_levels as f64 + 1.0).min(levels),
    }
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// First and second moments of one parameter group.
#[derive(Debug, Clone, PartialEq)]
pub struct Moments {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl Moments {
    pub fn zeros(n: usize) -> Self {
        Self { m: vec![0.0; n], v: vec![0.0; n] }
    }
}

/// One bias-corrected Adam update of `params` at step `t` (1-based).
pub fn adam_update(moments: &mut Moments, params: &mut [f64], grads: &[f64], lr: f64, t: u64) -> Result<()> {
    check_len(params.len(), grads.len())?;
    check_len(params.len(), moments.m.len())?;
    check_len(params.len(), moments.v.len())?;
    if t == 0 {
        return Err(invalid("Adam steps are counted from 1"));
    }
    adam_update_masked(moments, params, grads, lr, t, false);
    Ok(())
}

/// As [`adam_update`], optionally leaving entries with an exactly zero
/// gradient untouched, moments included.
fn adam_update_masked(moments: &mut Moments, params: &mut [f64], grads: &[f64], lr: f64, t: u64, skip_zero: bool) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    let step = lr / bc1;
    let bc2_sqrt = bc2.sqrt();
    for ((p, &g), (m, v)) in params.iter_mut().zip(grads).zip(moments.m.iter_mut().zip(moments.v.iter_mut())) {
        if skip_zero && g == 0.0 {
            continue;
        }
        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
        let denom = v.sqrt() / bc2_sqrt + ADAM_EPS;
        *p -= step * *m / denom;
    }
}

/// Adam state for the feature tables, the network and the motion triplets.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub features: Vec<Moments>,
    /// Levels whose moments may be non-zero.
    live: Vec<bool>,
    /// Feature entries with a zero gradient skip the step.
    pub sparse_features: bool,
    pub w1: Moments,
    pub b1: Moments,
    pub w2: Moments,
    pub b2: Moments,
    /// `(ϑ, τx, τy)` per motion triplet, flattened.
    pub motion: Moments,
}

impl AdamState {
    pub fn new(grid: &HashGrid, mlp: &MlpParams, n_triplets: usize) -> Self {
        Self {
            step: 0,
            features: grid.tables().iter().map(|t| Moments::zeros(t.len())).collect(),
            live: vec![false; grid.tables().len()],
            sparse_features: false,
            w1: Moments::zeros(mlp.w1.len()),
            b1: Moments::zeros(mlp.b1.len()),
            w2: Moments::zeros(mlp.w2.len()),
            b2: Moments::zeros(2),
            motion: Moments::zeros(3 * n_triplets),
        }
    }
}

/// Applies one Adam step to every parameter group with a shared learning
/// rate. A feature level is skipped while its gradients and moments are all
/// zero, which leaves it exactly where a full update would. With
/// `sparse_features` every feature entry without gradient is skipped. Motion triplets
/// are only updated when given together with their gradients.
pub fn adam_step(
    state: &mut AdamState,
    grid: &mut HashGrid,
    mlp: &mut MlpParams,
    grads: &Gradients,
    motion: Option<(&mut [MotionTriplet], &[[f64; 3]])>,
    lr: f64,
) -> Result<()> {
    check_len(state.features.len(), grads.features.tables.len())?;
    check_len(state.w1.m.len(), grads.mlp.w1.len())?;
    if let Some((m, g)) = &motion {
        check_len(m.len(), g.len())?;
        check_len(state.motion.m.len(), 3 * g.len())?;
    }
    state.step += 1;
    let t = state.step;
    for (l, (table, g)) in grid.tables_mut().iter_mut().zip(&grads.features.tables).enumerate() {
        if !state.live[l] {
            if g.iter().all(|&v| v == 0.0) {
                continue;
            }
            state.live[l] = true;
        }
        check_len(table.len(), g.len())?;
        adam_update_masked(&mut state.features[l], table, g, lr, t, state.sparse_features);
    }
    adam_update(&mut state.w1, &mut mlp.w1, &grads.mlp.w1, lr, t)?;
    adam_update(&mut state.b1, &mut mlp.b1, &grads.mlp.b1, lr, t)?;
    adam_update(&mut state.w2, &mut mlp.w2, &grads.mlp.w2, lr, t)?;
    adam_update(&mut state.b2, &mut mlp.b2, &grads.mlp.b2, lr, t)?;
    if let Some((motion, motion_grads)) = motion {
        let mut flat: Vec<f64> = motion.iter().flat_map(|m| [m.rotation, m.shift_x, m.shift_y]).collect();
        let g: Vec<f64> = motion_grads.iter().flatten().copied().collect();
        adam_update(&mut state.motion, &mut flat, &g, lr, t)?;
        for (m, c) in motion.iter_mut().zip(flat.chunks_exact(3)) {
            *m = MotionTriplet { rotation: c[0], shift_x: c[1], shift_y: c[2] };
        }
    }
    Ok(())
}

/// Feature tables, network weights and schedule position.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    pub grid: HashGrid,
    pub mlp: MlpParams,
    pub lambda: f64,
    /// Completed optimization steps.
    pub epoch: usize,
}

impl ModelState {
    pub fn new(config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        let grid = HashGrid::new(config.hash.clone(), config.seed)?;
        let mlp = init_params(config.seed, config.hash.output_dim(), config.mlp_width)?;
        Ok(Self {
            grid,
            mlp,
            lambda: scheduled_lambda(0, config),
            epoch: 0,
        })
    }

    pub fn masks(&self) -> Result<MaskState> {
        let c = self.grid.config();
        MaskState::new(c.levels, c.features_per_level, self.lambda)
    }

    /// Renders the field at the pixel centers of `out` under the current masks.
    pub fn render(&self, out: &CanonicalGrid) -> Result<ComplexImage> {
        crate::forward::render_image(&self.grid, &self.masks()?, &self.mlp, out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LogRecord {
    pub epoch: usize,
    pub loss: f64,
    pub lr: f64,
    pub lambda: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutput {
    pub model: ModelState,
    /// Estimated motion of the subject, in the same convention as simulated
    /// ground truth.
    pub motion: MotionTimeline,
    pub log: Vec<LogRecord>,
}

/// Trains with the configured forward arm.
pub fn train(dataset: &RadialKSpace, config: &TrainConfig) -> Result<TrainOutput> {
    train_with_observer(dataset, config, |_| {})
}

/// As [`train`], calling `observe` after every step.
pub fn train_with_observer(
    dataset: &RadialKSpace,
    config: &TrainConfig,
    mut observe: impl FnMut(&LogRecord),
) -> Result<TrainOutput> {
    let mut trainer = Trainer::new(dataset, config)?;
    while !trainer.is_finished() {
        observe(&trainer.step()?);
    }
    trainer.finish()
}

/// Trains with the loss taken on k-space spokes: predicted profiles of whole
/// views are carried to k-space and compared with the measured spokes.
pub fn train_kspace_arm(dataset: &RadialKSpace, config: &TrainConfig) -> Result<TrainOutput> {
    let config = TrainConfig { forward_arm: ForwardArm::KSpace, ..config.clone() };
    train(dataset, &config)
}

/// Whole views per k-space step, matching the ray budget of a projection
/// step as closely as possible.
pub fn kspace_views_per_step(rays_per_step: usize, spoke_length: usize) -> usize {
    ((rays_per_step as f64 / spoke_length as f64).round() as usize).max(1)
}

fn check_projection_set(set: &ProjectionSet) -> Result<()> {
    if set.profiles.is_empty() {
        return Err(invalid("dataset has no views"));
    }
    check_len(set.profiles.len(), set.stages.len())?;
    let m = set.bins();
    if m < 3 {
        return Err(invalid("profiles need at least 3 bins"));
    }
    let extent = set.profiles[0].extent;
    for p in &set.profiles {
        check_len(m, p.samples.len())?;
        if p.extent != extent {
            return Err(invalid("inconsistent profile extents"));
        }
    }
    Ok(())
}

fn ray_for(profile: &ProjectionProfile, bin: usize, samples: usize) -> Result<crate::geometry::Ray> {
    build_ray_with_extent(profile.theta, profile.bin_center(bin), samples, profile.extent)
}

/// Step-by-step optimizer over one dataset.
pub struct Trainer {
    config: TrainConfig,
    set: ProjectionSet,
    /// Measured spokes, kept for the k-space arm.
    spokes: Vec<Vec<Complex64>>,
    samples: usize,
    model: ModelState,
    /// Motion triplet index of every view.
    groups: Vec<usize>,
    /// Model convention: the field is evaluated at `A(ϑ)x + τ`.
    motion: Vec<MotionTriplet>,
    group_grads: Vec<[f64; 3]>,
    adam: AdamState,
    grads: Gradients,
    masks: MaskState,
    engine: RayEngine,
    rng: ChaCha8Rng,
    tapes: Vec<RayTape>,
    log: Vec<LogRecord>,
}

impl Trainer {
    pub fn new(dataset: &RadialKSpace, config: &TrainConfig) -> Result<Self> {
        dataset.validate()?;
        let set = dataset.to_projections()?;
        let spokes = match config.forward_arm {
            ForwardArm::KSpace => dataset.spokes.iter().map(|s| s.samples.clone()).collect(),
            ForwardArm::Projection => Vec::new(),
        };
        Self::build(set, spokes, config)
    }

    /// Projection-arm trainer on projection data directly.
    pub fn from_projections(set: &ProjectionSet, config: &TrainConfig) -> Result<Self> {
        if config.forward_arm != ForwardArm::Projection {
            return Err(invalid("projection data can only train the projection arm"));
        }
        Self::build(set.clone(), Vec::new(), config)
    }

    fn build(set: ProjectionSet, spokes: Vec<Vec<Complex64>>, config: &TrainConfig) -> Result<Self> {
        config.validate()?;
        check_projection_set(&set)?;
        let n_views = set.n_views();
        let samples = config.samples_per_ray.unwrap_or(set.bins());
        let groups = motion_groups(&set.stages, config.motion_sharing);
        let n_triplets = groups.iter().max().map_or(0, |g| g + 1);
        let model = ModelState::new(config)?;
        let masks = model.masks()?;
        let engine = RayEngine::new(&model.grid, &masks, &model.mlp)?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        rng.set_stream(RAY_STREAM);
        Ok(Self {
            adam: AdamState {
                sparse_features: config.sparse_feature_updates,
                ..AdamState::new(&model.grid, &model.mlp, n_triplets)
            },
            grads: Gradients::zeros(&model.grid, &model.mlp, n_views),
            groups,
            motion: vec![MotionTriplet::IDENTITY; n_triplets],
            group_grads: vec![[0.0; 3]; n_triplets],
            config: config.clone(),
            set,
            spokes,
            samples,
            model,
            masks,
            engine,
            rng,
            tapes: Vec::new(),
            log: Vec::with_capacity(config.epochs),
        })
    }

    pub fn is_finished(&self) -> bool {
        self.model.epoch >= self.config.epochs
    }

    pub fn model(&self) -> &ModelState {
        &self.model
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    /// Current motion estimate in subject convention.
    pub fn motion_estimate(&self) -> Result<MotionTimeline> {
        let estimate = self.groups.iter().map(|&g| self.motion[g].inverse()).collect();
        MotionTimeline::new(estimate, self.set.stages.clone())
    }

    /// Runs one optimization step.
    pub fn step(&mut self) -> Result<LogRecord> {
        if self.is_finished() {
            return Err(invalid("training already finished"));
        }
        let epoch = self.model.epoch;
        let lambda = scheduled_lambda(epoch, &self.config);
        if lambda != self.masks.lambda() {
            self.masks = MaskState::new(self.config.hash.levels, self.config.hash.features_per_level, lambda)?;
            self.engine.set_masks(&self.model.grid, &self.masks);
        }
        self.model.lambda = lambda;
        clear(&mut self.grads);
        let loss = match self.config.forward_arm {
            ForwardArm::Projection => self.projection_batch()?,
            ForwardArm::KSpace => self.kspace_batch()?,
        };
        if !loss.is_finite() {
            return Err(invalid(format!("loss became non-finite at epoch {epoch}")));
        }
        let lr = lr_at(epoch, &self.config);
        for g in self.group_grads.iter_mut() {
            *g = [0.0; 3];
        }
        for (view, g) in self.grads.motion.iter().enumerate() {
            add_motion(&mut self.group_grads[self.groups[view]], *g);
        }
        let motion = self
            .config
            .motion_enabled
            .then_some((&mut self.motion[..], &self.group_grads[..]));
        adam_step(&mut self.adam, &mut self.model.grid, &mut self.model.mlp, &self.grads, motion, lr)?;
        self.model.epoch = epoch + 1;
        let record = LogRecord { epoch, loss, lr, lambda };
        self.log.push(record);
        Ok(record)
    }

    pub fn finish(self) -> Result<TrainOutput> {
        let motion = self.motion_estimate()?;
        Ok(TrainOutput { model: self.model, motion, log: self.log })
    }

    fn projection_batch(&mut self) -> Result<f64> {
        let m = self.set.bins();
        let total = self.set.n_views() * m;
        let k = self.config.rays_per_step.min(total);
        let mut picked = rand::seq::index::sample(&mut self.rng, total, k).into_vec();
        picked.sort_unstable();
        if self.tapes.is_empty() {
            self.tapes.push(RayTape::default());
        }
        let tape = &mut self.tapes[0];
        let mut loss = 0.0;
        for idx in picked {
            let (view, bin) = (idx / m, idx % m);
            let profile = &self.set.profiles[view];
            let ray = ray_for(profile, bin, self.samples)?;
            let pred = self.engine.forward(&self.model.grid, &self.model.mlp, &ray, &self.motion[self.groups[view]], tape);
            let d = pred - profile.samples[bin];
            loss += d.re.abs() + d.im.abs();
            let g = self.engine.backward(
                &self.model.grid,
                &self.model.mlp,
                tape,
                [sign(d.re), sign(d.im)],
                self.config.motion_enabled.then_some(&self.motion[self.groups[view]]),
                &mut self.grads.features,
                &mut self.grads.mlp,
            );
            add_motion(&mut self.grads.motion[view], g);
        }
        Ok(loss)
    }

    fn kspace_batch(&mut self) -> Result<f64> {
        let m = self.set.bins();
        let n_views = self.set.n_views();
        let k = kspace_views_per_step(self.config.rays_per_step, m).min(n_views);
        let mut views = rand::seq::index::sample(&mut self.rng, n_views, k).into_vec();
        views.sort_unstable();
        if self.tapes.len() < m {
            self.tapes.resize_with(m, RayTape::default);
        }
        let mut loss = 0.0;
        for view in views {
            let profile = &self.set.profiles[view];
            let mut predicted = Vec::with_capacity(m);
            for (bin, tape) in self.tapes.iter_mut().enumerate().take(m) {
                let ray = ray_for(profile, bin, self.samples)?;
                predicted.push(self.engine.forward(&self.model.grid, &self.model.mlp, &ray, &self.motion[self.groups[view]], tape));
            }
            let spoke = projection_to_kspace(&ProjectionProfile {
                theta: profile.theta,
                samples: predicted,
                extent: profile.extent,
            })?;
            let mut upstream = Vec::with_capacity(m);
            for (p, y) in spoke.samples.iter().zip(&self.spokes[view]) {
                let d = p - y;
                loss += d.re.abs() + d.im.abs();
                upstream.push(Complex64::new(sign(d.re), sign(d.im)));
            }
            let per_bin = projection_to_kspace_adjoint(&upstream, profile.extent)?;
            for (tape, u) in self.tapes.iter().zip(per_bin) {
                let g = self.engine.backward(
                    &self.model.grid,
                    &self.model.mlp,
                    tape,
                    [u.re, u.im],
                    self.config.motion_enabled.then_some(&self.motion[self.groups[view]]),
                    &mut self.grads.features,
                    &mut self.grads.mlp,
                );
                add_motion(&mut self.grads.motion[view], g);
            }
        }
        Ok(loss)
    }
}

/// Triplet index per view: the view itself, or its stage in order of first
/// appearance.
fn motion_groups(stages: &[u32], sharing: MotionSharing) -> Vec<usize> {
    match sharing {
        MotionSharing::PerView => (0..stages.len()).collect(),
        MotionSharing::PerStage => {
            let mut seen: Vec<u32> = Vec::new();
            stages
                .iter()
                .map(|s| match seen.iter().position(|x| x == s) {
                    Some(i) => i,
                    None => {
                        seen.push(*s);
                        seen.len() - 1
                    }
                })
                .collect()
        }
    }
}

fn add_motion(acc: &mut [f64; 3], g: [f64; 3]) {
    for (a, v) in acc.iter_mut().zip(g) {
        *a += v;
    }
}

fn clear(grads: &mut Gradients) {
    for t in grads.features.tables.iter_mut() {
        t.fill(0.0);
    }
    grads.mlp.clear();
    for g in grads.motion.iter_mut() {
        *g = [0.0; 3];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{acquire, golden_angle_views, shepp_logan, PhaseMode};

    fn tiny_config() -> TrainConfig {
        TrainConfig {
            epochs: 6,
            rays_per_step: 10,
            hash: HashGridConfig { levels: 4, table_size: 1 << 8, ..HashGridConfig::default() },
            lambda_end: 4.0,
            lambda_start: 2.0,
            coarse_levels: 2,
            mlp_width: 8,
            seed: 3,
            ..TrainConfig::default()
        }
    }

    fn tiny_dataset() -> RadialKSpace {
        let img = shepp_logan(16, 16, PhaseMode::Smooth).unwrap();
        let views = golden_angle_views(4);
        acquire(&img, &views, &MotionTimeline::identity(4), 23).unwrap()
    }

    #[test]
    fn lr_examples() {
        let c = TrainConfig::default();
        assert_eq!(lr_at(0, &c), 1e-3);
        assert_eq!(lr_at(999, &c), 1e-3);
        assert_eq!(lr_at(1000, &c), 5e-4);
        assert_eq!(lr_at(3999, &c), 1.25e-4);
    }

    #[test]
    fn lambda_examples() {
        let c = TrainConfig::default();
        assert_eq!(lambda_at(0, &c), 4.0);
        assert_eq!(lambda_at(2000, &c), 16.0);
        assert_eq!(lambda_at(3999, &c), 16.0);
        assert_eq!(lambda_at(1000, &c), 10.0);
        let fine = TrainConfig { encoding: EncodingSchedule::Fine, ..c.clone() };
        assert_eq!(scheduled_lambda(0, &fine), 16.0);
        let coarse = TrainConfig { encoding: EncodingSchedule::Coarse, ..c };
        let masks = MaskState::new(16, 2, scheduled_lambda(0, &coarse)).unwrap();
        assert_eq!(masks.active_levels(), 6);
    }

    #[test]
    fn lambda_end_is_clamped_to_levels() {
        let c = TrainConfig { hash: HashGridConfig { levels: 8, ..HashGridConfig::default() }, ..TrainConfig::default() };
        c.validate().unwrap();
        assert_eq!(lambda_at(3000, &c), 8.0);
        let bad = TrainConfig { lambda_start: 9.0, ..c };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn adam_first_step_and_zero_grads() {
        let mut mo = Moments::zeros(1);
        let mut p = [0.5];
        adam_update(&mut mo, &mut p, &[1.0], 1e-3, 1).unwrap();
        assert!((p[0] - (0.5 - 1e-3)).abs() < 1e-10);
        let mut mo = Moments::zeros(2);
        let mut p = [0.5, -0.25];
        adam_update(&mut mo, &mut p, &[0.0, 0.0], 1e-3, 1).unwrap();
        assert_eq!(p, [0.5, -0.25]);
        assert!(adam_update(&mut mo, &mut p, &[0.0], 1e-3, 2).is_err());
    }

    #[test]
    fn adam_matches_reference_trajectory() {
        // textbook form: m̂ = m/(1-β1^t), v̂ = v/(1-β2^t), p -= lr·m̂/(√v̂ + ε)
        let grads = [0.3, -1.2, 0.05, 2.0, 0.0, -0.7, 0.4, 0.4, -0.1, 1.5];
        let (mut m, mut v, mut p) = (0.0f64, 0.0f64, 1.0f64);
        let mut mo = Moments::zeros(1);
        let mut q = [1.0];
        for (i, &g) in grads.iter().enumerate() {
            let t = i as i32 + 1;
            m = 0.9 * m + 0.1 * g;
            v = 0.999 * v + 0.001 * g * g;
            let bc2 = 1.0 - 0.999f64.powi(t);
            let mhat = m / (1.0 - 0.9f64.powi(t));
            let vhat = v / bc2;
            p -= 2e-3 * mhat / (vhat.sqrt() + 1e-8);
            adam_update(&mut mo, &mut q, &[g], 2e-3, t as u64).unwrap();
            assert!((p - q[0]).abs() < 1e-12);
        }
    }

    #[test]
    fn sparse_update_freezes_entries_without_gradient() {
        let grads = [[0.5, 0.0], [0.1, 0.0], [-0.3, 0.2], [0.2, 0.0]];
        let mut dense = (Moments::zeros(2), [1.0, 1.0]);
        let mut sparse = (Moments::zeros(2), [1.0, 1.0]);
        // the second entry sees a gradient only at step 3; dense Adam keeps
        // moving it at step 4
        let mut second = (Moments::zeros(1), [1.0]);
        for (i, g) in grads.iter().enumerate() {
            let t = i as u64 + 1;
            adam_update(&mut dense.0, &mut dense.1, g, 1e-2, t).unwrap();
            adam_update_masked(&mut sparse.0, &mut sparse.1, g, 1e-2, t, true);
            if g[1] != 0.0 {
                adam_update(&mut second.0, &mut second.1, &[g[1]], 1e-2, t).unwrap();
            }
            if t < 3 {
                assert_eq!(sparse.1[1], 1.0);
            }
        }
        // the first entry never sees a zero gradient, so both forms agree
        assert_eq!(dense.1[0], sparse.1[0]);
        assert_eq!(sparse.1[1], second.1[0]);
        assert_ne!(dense.1[1], sparse.1[1]);
    }

    #[test]
    fn no_moco_keeps_motion_at_zero() {
        let config = TrainConfig { motion_enabled: false, ..tiny_config() };
        let out = train(&tiny_dataset(), &config).unwrap();
        assert!(out.motion.triplets().iter().all(|t| *t == MotionTriplet::IDENTITY));
        assert_eq!(out.log.len(), 6);
    }

    #[test]
    fn motion_moves_when_enabled() {
        let out = train(&tiny_dataset(), &tiny_config()).unwrap();
        assert!(out.motion.triplets().iter().any(|t| !t.is_identity()));
        assert!(out.log.iter().all(|r| r.loss.is_finite()));
    }

    #[test]
    fn training_is_deterministic() {
        let a = train(&tiny_dataset(), &tiny_config()).unwrap();
        let b = train(&tiny_dataset(), &tiny_config()).unwrap();
        assert_eq!(a, b);
        let ka = train_kspace_arm(&tiny_dataset(), &tiny_config()).unwrap();
        let kb = train_kspace_arm(&tiny_dataset(), &tiny_config()).unwrap();
        assert_eq!(ka, kb);
        assert_ne!(a.log, ka.log);
    }

    #[test]
    fn masked_levels_are_untouched() {
        // λ = 2 keeps only the first level on
        let config = TrainConfig { lambda_start: 2.0, lambda_end: 2.0, ..tiny_config() };
        let before = ModelState::new(&config).unwrap();
        let out = train(&tiny_dataset(), &config).unwrap();
        assert_ne!(out.model.grid.tables()[0], before.grid.tables()[0]);
        for l in 1..4 {
            assert_eq!(out.model.grid.tables()[l], before.grid.tables()[l]);
        }
    }

    #[test]
    fn kspace_views_per_step_examples() {
        assert_eq!(kspace_views_per_step(80, 91), 1);
        assert_eq!(kspace_views_per_step(80, 23), 3);
        assert_eq!(kspace_views_per_step(1, 511), 1);
    }

    #[test]
    fn perfect_model_has_zero_loss_in_both_arms() {
        // data generated by the model itself
        let config = tiny_config();
        let model = ModelState::new(&config).unwrap();
        let masks = model.masks().unwrap();
        let m = 23;
        let views = golden_angle_views(3);
        let profiles: Vec<ProjectionProfile> = views
            .iter()
            .map(|&theta| ProjectionProfile {
                theta,
                extent: crate::geometry::RAY_EXTENT,
                samples: (0..m)
                    .map(|bin| {
                        let ray = build_ray_with_extent(theta, crate::spectral::detector_offset(bin, m, crate::geometry::RAY_EXTENT), m, crate::geometry::RAY_EXTENT).unwrap();
                        crate::forward::project_ray(&ray, &MotionTriplet::IDENTITY, &model.grid, &masks, &model.mlp).unwrap()
                    })
                    .collect(),
            })
            .collect();
        let spokes = profiles.iter().map(|p| projection_to_kspace(p).unwrap()).collect();
        let kspace = RadialKSpace {
            grid: CanonicalGrid::new(16, 16).unwrap(),
            fov_mm: 16.0,
            spokes,
            stages: vec![0; 3],
            ground_truth: None,
        };
        for arm in [ForwardArm::Projection, ForwardArm::KSpace] {
            let c = TrainConfig { epochs: 1, forward_arm: arm, rays_per_step: 30, ..config.clone() };
            let out = train(&kspace, &c).unwrap();
            assert!(out.log[0].loss < 1e-12, "{arm:?}: {}", out.log[0].loss);
        }
    }
}
