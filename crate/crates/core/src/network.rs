//! Two-layer perceptron head: `W2ᵀ·relu(W1ᵀ·v + b1) + b2`, producing the real
//! and imaginary parts of the image at one point.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{check_len, invalid, Result};

const MLP_STREAM: u64 = 0x6d6c70;

/// Weights are stored row-major: `w1[i * width + j]` connects input `i` to
/// hidden unit `j`, `w2[j * 2 + o]` connects hidden unit `j` to output `o`.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpParams {
    pub input_dim: usize,
    pub width: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: [f64; 2],
}

/// Gradients with the same layout as [`MlpParams`].
#[derive(Debug, Clone, PartialEq)]
pub struct MlpGrads {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: [f64; 2],
}

impl MlpGrads {
    pub fn zeros_like(params: &MlpParams) -> Self {
        Self {
            w1: vec![0.0; params.w1.len()],
            b1: vec![0.0; params.b1.len()],
            w2: vec![0.0; params.w2.len()],
            b2: [0.0; 2],
        }
    }

    pub fn is_zero(&self) -> bool {
        self.w1.iter().chain(&self.b1).chain(&self.w2).chain(&self.b2).all(|&g| g == 0.0)
    }

    pub fn clear(&mut self) {
        self.w1.fill(0.0);
        self.b1.fill(0.0);
        self.w2.fill(0.0);
        self.b2 = [0.0; 2];
    }
}

impl MlpParams {
    pub fn zeros(input_dim: usize, width: usize) -> Result<Self> {
        if width == 0 || input_dim == 0 {
            return Err(invalid("network dimensions must be positive"));
        }
        Ok(Self {
            input_dim,
            width,
            w1: vec![0.0; input_dim * width],
            b1: vec![0.0; width],
            w2: vec![0.0; width * 2],
            b2: [0.0; 2],
        })
    }

    fn check(&self) -> Result<()> {
        check_len(self.input_dim * self.width, self.w1.len())?;
        check_len(self.width, self.b1.len())?;
        check_len(self.width * 2, self.w2.len())
    }

    /// Forward pass reading only the first `active` inputs; the rest are
    /// treated as zero. Writes post-activation hidden values into `hidden`.
    pub(crate) fn forward_prefix(&self, v: &[f64], active: usize, hidden: &mut [f64]) -> [f64; 2] {
        let width = self.width;
        hidden.copy_from_slice(&self.b1);
        for (i, &vi) in v[..active].iter().enumerate() {
            if vi != 0.0 {
                let row = &self.w1[i * width..(i + 1) * width];
                for (h, w) in hidden.iter_mut().zip(row) {
                    *h += vi * w;
                }
            }
        }
        let mut out = self.b2;
        for (j, h) in hidden.iter_mut().enumerate() {
            if *h > 0.0 {
                out[0] += *h * self.w2[2 * j];
                out[1] += *h * self.w2[2 * j + 1];
            } else {
                *h = 0.0;
            }
        }
        out
    }

    /// Reverse pass for one evaluation. Adds parameter gradients into
    /// `grads` and writes the gradient for the first `active` inputs into
    /// `dv` (the rest is left untouched). `scratch` holds `width` values.
    pub(crate) fn backward_prefix(
        &self,
        v: &[f64],
        active: usize,
        hidden: &[f64],
        upstream: [f64; 2],
        grads: &mut MlpGrads,
        dv: &mut [f64],
        scratch: &mut [f64],
    ) {
        let width = self.width;
        grads.b2[0] += upstream[0];
        grads.b2[1] += upstream[1];
        for (j, &h) in hidden.iter().enumerate() {
            let gate = if h > 0.0 {
                grads.w2[2 * j] += h * upstream[0];
                grads.w2[2 * j + 1] += h * upstream[1];
                self.w2[2 * j] * upstream[0] + self.w2[2 * j + 1] * upstream[1]
            } else {
                0.0
            };
            scratch[j] = gate;
            grads.b1[j] += gate;
        }
        for i in 0..active {
            let row = &self.w1[i * width..(i + 1) * width];
            dv[i] = row.iter().zip(scratch.iter()).map(|(w, d)| w * d).sum();
            let vi = v[i];
            if vi != 0.0 {
                let grow = &mut grads.w1[i * width..(i + 1) * width];
                for (g, d) in grow.iter_mut().zip(scratch.iter()) {
                    *g += vi * d;
                }
            }
        }
    }
}

pub fn mlp_forward(params: &MlpParams, v: &[f64]) -> Result<[f64; 2]> {
    params.check()?;
    check_len(params.input_dim, v.len())?;
    let mut hidden = vec![0.0; params.width];
    Ok(params.forward_prefix(v, params.input_dim, &mut hidden))
}

/// Gradients of `upstream · mlp(v)` with respect to the parameters and `v`.
pub fn mlp_backward(params: &MlpParams, v: &[f64], upstream: [f64; 2]) -> Result<(MlpGrads, Vec<f64>)> {
    params.check()?;
    check_len(params.input_dim, v.len())?;
    let mut hidden = vec![0.0; params.width];
    params.forward_prefix(v, params.input_dim, &mut hidden);
    let mut grads = MlpGrads::zeros_like(params);
    let mut dv = vec![0.0; params.input_dim];
    let mut scratch = vec![0.0; params.width];
    params.backward_prefix(v, params.input_dim, &hidden, upstream, &mut grads, &mut dv, &mut scratch);
    Ok((grads, dv))
}

/// Uniform `±√(6/fan_in)` weights per layer, zero biases.
pub fn init_params(seed: u64, fan_in: usize, width: usize) -> Result<MlpParams> {
    let mut params = MlpParams::zeros(fan_in, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(MLP_STREAM);
    let b1 = (6.0 / fan_in as f64).sqrt();
    for w in params.w1.iter_mut() {
        *w = rng.gen_range(-b1..b1);
    }
    let b2 = (6.0 / width as f64).sqrt();
    for w in params.w2.iter_mut() {
        *w = rng.gen_range(-b2..b2);
    }
    Ok(params)
}
