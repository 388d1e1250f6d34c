//! Multiresolution hash-grid encoding with binary coarse-to-fine level masks.
//!
//! Each level `l` overlays a lattice of resolution `N_l` on the padded
//! canonical domain and bilinearly interpolates `F` learned features from the
//! four corners of the cell containing the query point. Coarse levels whose
//! lattice fits in the table are indexed densely; finer levels are hashed.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_finite, check_len, invalid, Result};
use crate::geometry::Point;

/// Multiplier applied to the second lattice coordinate before hashing.
pub const HASH_PRIME: u64 = 2_654_435_761;

const FEATURE_INIT_BOUND: f64 = 1e-4;
const FEATURE_STREAM: u64 = 0x68617368;

#[derive(Debug, Clone, PartialEq)]
pub struct HashGridConfig {
    pub levels: usize,
    pub features_per_level: usize,
    /// Maximum rows per level table; a power of two.
    pub table_size: usize,
    pub base_resolution: usize,
    pub growth_factor: f64,
    /// Padding around `[-1, 1]²` covered by the lattice; points beyond clamp.
    pub domain_margin: f64,
}

impl Default for HashGridConfig {
    fn default() -> Self {
        Self {
            levels: 16,
            features_per_level: 2,
            table_size: 1 << 18,
            base_resolution: 2,
            growth_factor: 2.0,
            domain_margin: 0.5,
        }
    }
}

impl HashGridConfig {
    pub fn validate(&self) -> Result<()> {
        if self.levels == 0 {
            return Err(invalid("hash grid needs at least one level"));
        }
        if self.features_per_level == 0 {
            return Err(invalid("hash grid needs at least one feature per level"));
        }
        if !self.table_size.is_power_of_two() {
            return Err(invalid(format!(
                "table size must be a power of two, got {}",
                self.table_size
            )));
        }
        if self.base_resolution == 0 {
            return Err(invalid("base resolution must be at least 1"));
        }
        if !(self.growth_factor > 1.0) || !self.growth_factor.is_finite() {
            return Err(invalid("growth factor must be a finite value above 1"));
        }
        if !(self.domain_margin >= 0.0) || !self.domain_margin.is_finite() {
            return Err(invalid("domain margin must be non-negative"));
        }
        Ok(())
    }

    /// Length of the concatenated feature vector, `L·F`.
    pub fn output_dim(&self) -> usize {
        self.levels * self.features_per_level
    }

    /// Lattice resolution of level `l` (1-based): `floor(N_min · b^(l-1))`.
    pub fn level_resolution(&self, l: usize) -> Result<usize> {
        if l == 0 || l > self.levels {
            return Err(invalid(format!(
                "level {l} outside 1..={}",
                self.levels
            )));
        }
        let res = self.base_resolution as f64 * self.growth_factor.powi(l as i32 - 1);
        Ok(res.floor() as usize)
    }
}

pub fn level_resolution(config: &HashGridConfig, l: usize) -> Result<usize> {
    config.level_resolution(l)
}

/// Spatial hash of a lattice corner: `(i₁ ⊻ i₂·2654435761) mod T`.
pub fn hash_index(corner: [u64; 2], table_size: usize) -> usize {
    let h = corner[0] ^ corner[1].wrapping_mul(HASH_PRIME);
    (h % table_size as u64) as usize
}

/// The four corners of one level's cell around a query point.
#[derive(Debug, Clone, Copy, Default)]
pub(crate) struct Corners {
    pub rows: [usize; 4],
    pub weights: [f64; 4],
    /// Derivative of each weight with respect to the canonical coordinates.
    pub dweights: [[f64; 2]; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct HashGrid {
    config: HashGridConfig,
    resolutions: Vec<usize>,
    dense: Vec<bool>,
    tables: Vec<Vec<f64>>,
}

impl HashGrid {
    /// Grid with features drawn uniformly from `[-1e-4, 1e-4]`.
    pub fn new(config: HashGridConfig, seed: u64) -> Result<Self> {
        let mut grid = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        rng.set_stream(FEATURE_STREAM);
        for table in &mut grid.tables {
            for v in table.iter_mut() {
                *v = rng.gen_range(-FEATURE_INIT_BOUND..FEATURE_INIT_BOUND);
            }
        }
        Ok(grid)
    }

    pub fn zeros(config: HashGridConfig) -> Result<Self> {
        config.validate()?;
        let mut resolutions = Vec::with_capacity(config.levels);
        let mut dense = Vec::with_capacity(config.levels);
        let mut tables = Vec::with_capacity(config.levels);
        for l in 1..=config.levels {
            let res = config.level_resolution(l)?.max(1);
            let lattice = (res + 1).saturating_mul(res + 1);
            let is_dense = lattice <= config.table_size;
            let rows = if is_dense { lattice } else { config.table_size };
            resolutions.push(res);
            dense.push(is_dense);
            tables.push(vec![0.0; rows * config.features_per_level]);
        }
        Ok(Self {
            config,
            resolutions,
            dense,
            tables,
        })
    }

    pub fn config(&self) -> &HashGridConfig {
        &self.config
    }

    /// Resolution of the 0-based level index.
    pub fn resolution(&self, level: usize) -> usize {
        self.resolutions[level]
    }

    pub fn is_dense(&self, level: usize) -> bool {
        self.dense[level]
    }

    pub fn table_rows(&self, level: usize) -> usize {
        self.tables[level].len() / self.config.features_per_level
    }

    pub fn tables(&self) -> &[Vec<f64>] {
        &self.tables
    }

    pub fn tables_mut(&mut self) -> &mut [Vec<f64>] {
        &mut self.tables
    }

    /// Row of the table for lattice corner `(ix, iy)` at a 0-based level.
    pub fn row_index(&self, level: usize, ix: usize, iy: usize) -> usize {
        if self.dense[level] {
            ix + iy * (self.resolutions[level] + 1)
        } else {
            hash_index([ix as u64, iy as u64], self.config.table_size)
        }
    }

    pub(crate) fn locate(&self, level: usize, x: Point) -> Corners {
        let res = self.resolutions[level];
        let half = 1.0 + self.config.domain_margin;
        let n = res as f64;
        let mut cell = [0usize; 2];
        let mut frac = [0.0; 2];
        let mut slope = [0.0; 2];
        for d in 0..2 {
            let u = (x[d] + half) / (2.0 * half);
            let (u, s) = if u <= 0.0 {
                (0.0, 0.0)
            } else if u >= 1.0 {
                (1.0, 0.0)
            } else {
                (u, n / (2.0 * half))
            };
            let p = u * n;
            let i0 = (p.floor() as usize).min(res - 1);
            cell[d] = i0;
            frac[d] = p - i0 as f64;
            slope[d] = s;
        }
        let [fx, fy] = frac;
        let [sx, sy] = slope;
        let (ix, iy) = (cell[0], cell[1]);
        Corners {
            rows: [
                self.row_index(level, ix, iy),
                self.row_index(level, ix + 1, iy),
                self.row_index(level, ix, iy + 1),
                self.row_index(level, ix + 1, iy + 1),
            ],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
            dweights: [
                [-(1.0 - fy) * sx, -(1.0 - fx) * sy],
                [(1.0 - fy) * sx, -fx * sy],
                [-fy * sx, (1.0 - fx) * sy],
                [fy * sx, fx * sy],
            ],
        }
    }

    /// Fractional position of `x` inside its cell at a 0-based level, per axis.
    pub fn cell_fraction(&self, level: usize, x: Point) -> [f64; 2] {
        let res = self.resolutions[level];
        let half = 1.0 + self.config.domain_margin;
        let mut out = [0.0; 2];
        for d in 0..2 {
            let u = ((x[d] + half) / (2.0 * half)).clamp(0.0, 1.0);
            let p = u * res as f64;
            out[d] = p - (p.floor()).min(res as f64 - 1.0);
        }
        out
    }

    /// Writes the first `active` levels of the encoding into `out` and zeroes
    /// the rest, recording the cell geometry in `tape`.
    pub(crate) fn encode_into(&self, x: Point, active: usize, out: &mut [f64], tape: &mut Vec<Corners>) {
        let f = self.config.features_per_level;
        tape.clear();
        out.fill(0.0);
        for level in 0..active {
            let corners = self.locate(level, x);
            let table = &self.tables[level];
            let slot = &mut out[level * f..(level + 1) * f];
            for c in 0..4 {
                let w = corners.weights[c];
                let row = &table[corners.rows[c] * f..(corners.rows[c] + 1) * f];
                for (o, v) in slot.iter_mut().zip(row) {
                    *o += w * v;
                }
            }
            tape.push(corners);
        }
    }

    /// Reverse pass over the levels recorded in `tape`. Feature gradients are
    /// added into `grads` when given; returns the coordinate gradient.
    pub(crate) fn backward_from_tape(
        &self,
        tape: &[Corners],
        upstream: &[f64],
        mut grads: Option<&mut [Vec<f64>]>,
    ) -> Point {
        let f = self.config.features_per_level;
        let mut coord = [0.0; 2];
        for (level, corners) in tape.iter().enumerate() {
            let up = &upstream[level * f..(level + 1) * f];
            if up.iter().all(|&u| u == 0.0) {
                continue;
            }
            let table = &self.tables[level];
            for c in 0..4 {
                let row = corners.rows[c];
                let feats = &table[row * f..(row + 1) * f];
                let dot: f64 = up.iter().zip(feats).map(|(u, v)| u * v).sum();
                coord[0] += dot * corners.dweights[c][0];
                coord[1] += dot * corners.dweights[c][1];
                if let Some(g) = grads.as_deref_mut() {
                    let w = corners.weights[c];
                    let slot = &mut g[level][row * f..(row + 1) * f];
                    for (s, u) in slot.iter_mut().zip(up) {
                        *s += u * w;
                    }
                }
            }
        }
        coord
    }
}

/// Binary per-level masks derived from the schedule position `λ`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    lambda: f64,
    levels: usize,
    features_per_level: usize,
    active: usize,
}

impl MaskState {
    pub fn new(levels: usize, features_per_level: usize, lambda: f64) -> Result<Self> {
        if levels == 0 || features_per_level == 0 {
            return Err(invalid("mask state needs at least one level and feature"));
        }
        check_finite("lambda", &[lambda])?;
        if !(0.0..=levels as f64).contains(&lambda) {
            return Err(invalid(format!("lambda {lambda} outside [0, {levels}]")));
        }
        // Level i (1-based) is on when i < λ; λ = L turns every level on.
        let active = if lambda >= levels as f64 {
            levels
        } else {
            (lambda.ceil() as usize).saturating_sub(1)
        };
        Ok(Self {
            lambda,
            levels,
            features_per_level,
            active,
        })
    }

    /// Every level enabled.
    pub fn all(levels: usize, features_per_level: usize) -> Result<Self> {
        Self::new(levels, features_per_level, levels as f64)
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn levels(&self) -> usize {
        self.levels
    }

    /// Number of enabled levels; enabled levels always form a prefix.
    pub fn active_levels(&self) -> usize {
        self.active
    }

    /// Whether the 0-based level is enabled.
    pub fn is_enabled(&self, level: usize) -> bool {
        level < self.active
    }

    /// The mask vector `α` of a 0-based level.
    pub fn mask(&self, level: usize) -> Vec<f64> {
        let v = if self.is_enabled(level) { 1.0 } else { 0.0 };
        vec![v; self.features_per_level]
    }
}

pub fn update_masks(state: &MaskState, lambda: f64) -> Result<MaskState> {
    MaskState::new(state.levels, state.features_per_level, lambda)
}

/// Dense per-level gradient tables, shaped like the feature tables.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGrads {
    pub tables: Vec<Vec<f64>>,
}

impl FeatureGrads {
    pub fn zeros_like(grid: &HashGrid) -> Self {
        Self {
            tables: grid.tables.iter().map(|t| vec![0.0; t.len()]).collect(),
        }
    }

    pub fn is_zero(&self) -> bool {
        self.tables.iter().flatten().all(|&g| g == 0.0)
    }
}

fn check_masks(grid: &HashGrid, masks: &MaskState) -> Result<()> {
    check_len(grid.config.levels, masks.levels)?;
    check_len(grid.config.features_per_level, masks.features_per_level)
}

/// Concatenated masked features of `x`, length `L·F`.
pub fn encode(x: Point, grid: &HashGrid, masks: &MaskState) -> Result<Vec<f64>> {
    check_finite("encoding coordinate", &x)?;
    check_masks(grid, masks)?;
    let mut out = vec![0.0; grid.config.output_dim()];
    let mut tape = Vec::with_capacity(masks.active);
    grid.encode_into(x, masks.active, &mut out, &mut tape);
    Ok(out)
}

/// Gradients of `upstream · encode(x)` with respect to the feature tables and
/// to `x`.
pub fn encode_backward(
    x: Point,
    grid: &HashGrid,
    masks: &MaskState,
    upstream: &[f64],
) -> Result<(FeatureGrads, Point)> {
    check_finite("encoding coordinate", &x)?;
    check_masks(grid, masks)?;
    check_len(grid.config.output_dim(), upstream.len())?;
    let tape: Vec<Corners> = (0..masks.active).map(|l| grid.locate(l, x)).collect();
    let mut grads = FeatureGrads::zeros_like(grid);
    let coord = grid.backward_from_tape(&tape, upstream, Some(&mut grads.tables));
    Ok((grads, coord))
}
