//! Plain-text `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is optional and falls
//! back to the default listed in [`KEYS`]; unknown or repeated keys are
//! errors. `auto` selects the derived value of optional settings.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use crate::error::{invalid, Error, Result};
use crate::simulator::{AcquisitionSpec, PhaseMode};
use crate::trainer::{EncodingSchedule, ForwardArm, MotionSharing, TrainConfig};

/// Recognised keys with a one-line description each.
pub const KEYS: &[(&str, &str)] = &[
    ("output_dir", "directory receiving every output file"),
    ("seed", "seed for motion simulation, noise, initialization and ray sampling"),
    ("image_size", "phantom side length in pixels"),
    ("n_views", "fully sampled golden-angle view count"),
    ("acceleration", "acceleration factor; the first ceil(n_views/acceleration) views are kept"),
    ("n_stages", "number of contiguous motion stages"),
    ("beta_deg", "rotations drawn from [-beta, beta] degrees"),
    ("max_shift_mm", "shift bound in mm; auto uses beta"),
    ("fov_mm", "field of view in mm; auto is one mm per pixel"),
    ("spoke_length", "odd samples per spoke; auto derives it from the image size"),
    ("phase", "phantom phase: none or smooth"),
    ("phantom_blur_px", "Gaussian smoothing of the phantom in pixels"),
    ("noise_std", "complex Gaussian noise per k-space component"),
    ("epochs", "optimization steps"),
    ("rays_per_step", "rays per projection-arm batch"),
    ("lr0", "initial learning rate"),
    ("lr_halving_period", "steps between learning-rate halvings"),
    ("lambda_start", "first coarse-to-fine lambda"),
    ("lambda_end", "final coarse-to-fine lambda, clamped to levels"),
    ("lambda_ramp_fraction", "fraction of the steps spent ramping lambda"),
    ("coarse_levels", "levels used by the coarse encoding"),
    ("encoding", "coarse2fine, fine or coarse"),
    ("arm", "forward model: projection or kspace"),
    ("motion", "on or off"),
    ("motion_sharing", "stage (one triplet per motion stage) or view"),
    ("feature_updates", "sparse (skip hash entries without gradient) or dense Adam updates"),
    ("mlp_width", "hidden layer width"),
    ("samples_per_ray", "quadrature samples per ray; auto uses the spoke length"),
    ("levels", "hash encoding levels"),
    ("features_per_level", "features per level"),
    ("table_size_log2", "log2 of the maximum hash table rows"),
    ("base_resolution", "coarsest lattice resolution"),
    ("growth_factor", "resolution ratio between levels"),
    ("domain_margin", "lattice padding around the canonical square"),
];

/// Everything a CLI run needs.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub output_dir: PathBuf,
    pub acquisition: AcquisitionSpec,
    pub train: TrainConfig,
}

impl Default for RunConfig {
    /// Desk-scale defaults: a 64×64 phantom, 3000 steps, one motion triplet
    /// per stage and sparse feature updates.
    fn default() -> Self {
        let train = TrainConfig {
            epochs: 3000,
            motion_sharing: MotionSharing::PerStage,
            sparse_feature_updates: true,
            ..TrainConfig::default()
        };
        Self {
            output_dir: PathBuf::from("."),
            acquisition: AcquisitionSpec::default(),
            train,
        }
    }
}

fn parse_num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| invalid(format!("{key}: cannot parse {value:?}")))
}

fn parse_auto<T: std::str::FromStr>(key: &str, value: &str) -> Result<Option<T>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse_num(key, value).map(Some)
    }
}

fn show_auto<T: ToString>(v: &Option<T>) -> String {
    v.as_ref().map_or_else(|| "auto".to_string(), T::to_string)
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        let mut seen: Vec<String> = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| invalid(format!("line {}: expected key = value", n + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            if seen.iter().any(|k| k == key) {
                return Err(invalid(format!("line {}: {key} given twice", n + 1)));
            }
            config.set(key, value).map_err(|e| match e {
                Error::InvalidArgument(m) => invalid(format!("line {}: {m}", n + 1)),
                other => other,
            })?;
            seen.push(key.to_string());
        }
        config.validate()?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&std::fs::read_to_string(path)?)
    }

    /// Checks the acquisition and training settings.
    pub fn validate(&self) -> Result<()> {
        self.acquisition.validate()?;
        self.train.validate()
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let a = &mut self.acquisition;
        let t = &mut self.train;
        match key {
            "output_dir" => self.output_dir = PathBuf::from(value),
            "seed" => {
                a.seed = parse_num(key, value)?;
                t.seed = a.seed;
            }
            "image_size" => a.image_size = parse_num(key, value)?,
            "n_views" => a.n_views = parse_num(key, value)?,
            "acceleration" => a.acceleration = parse_num(key, value)?,
            "n_stages" => a.n_stages = parse_num(key, value)?,
            "beta_deg" => a.beta_deg = parse_num(key, value)?,
            "max_shift_mm" => a.max_shift_mm = parse_auto(key, value)?,
            "fov_mm" => a.fov_mm = parse_auto(key, value)?,
            "spoke_length" => a.spoke_length = parse_auto(key, value)?,
            "phase" => {
                a.phase = match value {
                    "none" => PhaseMode::None,
                    "smooth" => PhaseMode::Smooth,
                    _ => return Err(invalid(format!("phase must be none or smooth, got {value:?}"))),
                }
            }
            "phantom_blur_px" => a.phantom_blur_px = parse_num(key, value)?,
            "noise_std" => a.noise_std = parse_num(key, value)?,
            "epochs" => t.epochs = parse_num(key, value)?,
            "rays_per_step" => t.rays_per_step = parse_num(key, value)?,
            "lr0" => t.lr0 = parse_num(key, value)?,
            "lr_halving_period" => t.lr_halving_period = parse_num(key, value)?,
            "lambda_start" => t.lambda_start = parse_num(key, value)?,
            "lambda_end" => t.lambda_end = parse_num(key, value)?,
            "lambda_ramp_fraction" => t.lambda_ramp_fraction = parse_num(key, value)?,
            "coarse_levels" => t.coarse_levels = parse_num(key, value)?,
            "encoding" => t.encoding = parse_encoding(value)?,
            "arm" => t.forward_arm = parse_arm(value)?,
            "motion" => {
                t.motion_enabled = match value {
                    "on" => true,
                    "off" => false,
                    _ => return Err(invalid(format!("motion must be on or off, got {value:?}"))),
                }
            }
            "motion_sharing" => {
                t.motion_sharing = match value {
                    "stage" => MotionSharing::PerStage,
                    "view" => MotionSharing::PerView,
                    _ => return Err(invalid(format!("motion_sharing must be stage or view, got {value:?}"))),
                }
            }
            "feature_updates" => {
                t.sparse_feature_updates = match value {
                    "sparse" => true,
                    "dense" => false,
                    _ => return Err(invalid(format!("feature_updates must be sparse or dense, got {value:?}"))),
                }
            }
            "mlp_width" => t.mlp_width = parse_num(key, value)?,
            "samples_per_ray" => t.samples_per_ray = parse_auto(key, value)?,
            "levels" => t.hash.levels = parse_num(key, value)?,
            "features_per_level" => t.hash.features_per_level = parse_num(key, value)?,
            "table_size_log2" => {
                let bits: u32 = parse_num(key, value)?;
                if bits >= usize::BITS {
                    return Err(invalid("table_size_log2 too large"));
                }
                t.hash.table_size = 1 << bits;
            }
            "base_resolution" => t.hash.base_resolution = parse_num(key, value)?,
            "growth_factor" => t.hash.growth_factor = parse_num(key, value)?,
            "domain_margin" => t.hash.domain_margin = parse_num(key, value)?,
            _ => return Err(invalid(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    pub fn get(&self, key: &str) -> Option<String> {
        let a = &self.acquisition;
        let t = &self.train;
        Some(match key {
            "output_dir" => self.output_dir.display().to_string(),
            "seed" => a.seed.to_string(),
            "image_size" => a.image_size.to_string(),
            "n_views" => a.n_views.to_string(),
            "acceleration" => a.acceleration.to_string(),
            "n_stages" => a.n_stages.to_string(),
            "beta_deg" => a.beta_deg.to_string(),
            "max_shift_mm" => show_auto(&a.max_shift_mm),
            "fov_mm" => show_auto(&a.fov_mm),
            "spoke_length" => show_auto(&a.spoke_length),
            "phase" => match a.phase {
                PhaseMode::None => "none",
                PhaseMode::Smooth => "smooth",
            }
            .into(),
            "phantom_blur_px" => a.phantom_blur_px.to_string(),
            "noise_std" => a.noise_std.to_string(),
            "epochs" => t.epochs.to_string(),
            "rays_per_step" => t.rays_per_step.to_string(),
            "lr0" => t.lr0.to_string(),
            "lr_halving_period" => t.lr_halving_period.to_string(),
            "lambda_start" => t.lambda_start.to_string(),
            "lambda_end" => t.lambda_end.to_string(),
            "lambda_ramp_fraction" => t.lambda_ramp_fraction.to_string(),
            "coarse_levels" => t.coarse_levels.to_string(),
            "encoding" => encoding_name(t.encoding).into(),
            "arm" => arm_name(t.forward_arm).into(),
            "motion" => if t.motion_enabled { "on" } else { "off" }.into(),
            "motion_sharing" => match t.motion_sharing {
                MotionSharing::PerStage => "stage",
                MotionSharing::PerView => "view",
            }
            .into(),
            "feature_updates" => if t.sparse_feature_updates { "sparse" } else { "dense" }.into(),
            "mlp_width" => t.mlp_width.to_string(),
            "samples_per_ray" => show_auto(&t.samples_per_ray),
            "levels" => t.hash.levels.to_string(),
            "features_per_level" => t.hash.features_per_level.to_string(),
            "table_size_log2" => t.hash.table_size.trailing_zeros().to_string(),
            "base_resolution" => t.hash.base_resolution.to_string(),
            "growth_factor" => t.hash.growth_factor.to_string(),
            "domain_margin" => t.hash.domain_margin.to_string(),
            _ => return None,
        })
    }

    /// Every key with its description and current value; parses back to
    /// `self`.
    pub fn render(&self) -> String {
        let mut s = String::new();
        for (key, doc) in KEYS {
            let value = self.get(key).expect("listed key");
            let _ = writeln!(s, "# {doc}\n{key} = {value}");
        }
        s
    }
}

pub fn parse_encoding(value: &str) -> Result<EncodingSchedule> {
    match value {
        "coarse2fine" => Ok(EncodingSchedule::CoarseToFine),
        "fine" => Ok(EncodingSchedule::Fine),
        "coarse" => Ok(EncodingSchedule::Coarse),
        _ => Err(invalid(format!("encoding must be coarse2fine, fine or coarse, got {value:?}"))),
    }
}

pub fn encoding_name(e: EncodingSchedule) -> &'static str {
    match e {
        EncodingSchedule::CoarseToFine => "coarse2fine",
        EncodingSchedule::Fine => "fine",
        EncodingSchedule::Coarse => "coarse",
    }
}

pub fn parse_arm(value: &str) -> Result<ForwardArm> {
    match value {
        "projection" => Ok(ForwardArm::Projection),
        "kspace" => Ok(ForwardArm::KSpace),
        _ => Err(invalid(format!("arm must be projection or kspace, got {value:?}"))),
    }
}

pub fn arm_name(a: ForwardArm) -> &'static str {
    match a {
        ForwardArm::Projection => "projection",
        ForwardArm::KSpace => "kspace",
    }
}
