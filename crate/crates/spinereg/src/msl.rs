//! Forward-only reference implementation of the gated two-branch feature
//! fusion block: a diagonal linear state-space scan over serialized voxels
//! (global branch), shifted-window self-attention (local branch), and a
//! sigmoid-gated elementwise blend of the two.
//!
//! This module is verification-only: it is not wired into the registration
//! optimizer. It exists to make the fusion mechanism executable and
//! property-testable at toy scale.

use crate::{Error, Result};

/// Dense multi-channel 3D feature tensor, channel-major storage:
/// `data[c * nvox + (x + nx * (y + ny * z))]`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTensor {
    pub dims: [usize; 3],
    pub channels: usize,
    pub data: Vec<f64>,
}

impl FeatureTensor {
    pub fn new(dims: [usize; 3], channels: usize, data: Vec<f64>) -> Result<Self> {
        let n = dims[0] * dims[1] * dims[2];
        if channels == 0 || data.len() != channels * n {
            return Err(Error::Argument(format!(
                "feature data length {} does not match dims {dims:?} x {channels} channels",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("feature tensor contains non-finite values".into()));
        }
        Ok(FeatureTensor { dims, channels, data })
    }

    pub fn zeros(dims: [usize; 3], channels: usize) -> Self {
        let n = dims[0] * dims[1] * dims[2];
        FeatureTensor {
            dims,
            channels,
            data: vec![0.0; channels * n],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn voxel_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    #[inline]
    pub fn at(&self, c: usize, x: usize, y: usize, z: usize) -> f64 {
        self.data[c * self.num_voxels() + self.voxel_index(x, y, z)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, x: usize, y: usize, z: usize, v: f64) {
        let i = c * self.num_voxels() + self.voxel_index(x, y, z);
        self.data[i] = v;
    }

    /// Per-voxel feature vector.
    pub fn vector_at(&self, i: usize) -> Vec<f64> {
        let n = self.num_voxels();
        (0..self.channels).map(|c| self.data[c * n + i]).collect()
    }
}

/// Diagonal linear SSM parameters. Per channel `c` and state `n`:
/// `h[t] = exp(delta[c] * a[n]) h[t-1] + delta[c] * b[c][n] x_t[c]`,
/// `y_t[c] = sum_n c_out[c][n] h[c][n][t]`, `h[0] = 0`.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub state_dim: usize,
    /// Diagonal state matrix entries; must be <= 0 for stability.
    pub a: Vec<f64>,
    /// Input projection, `channels x state_dim`.
    pub b: Vec<Vec<f64>>,
    /// Output projection, `channels x state_dim`.
    pub c_out: Vec<Vec<f64>>,
    /// Per-channel positive discretization step.
    pub delta: Vec<f64>,
}

impl SsmParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.a.len() != self.state_dim || self.a.iter().any(|&a| a > 0.0) {
            return Err(Error::Argument("A must be state_dim entries, all <= 0".into()));
        }
        if self.b.len() != channels || self.c_out.len() != channels || self.delta.len() != channels {
            return Err(Error::Argument("B, C_out, delta must have one row per channel".into()));
        }
        if self.delta.iter().any(|&d| !(d > 0.0)) {
            return Err(Error::Argument("delta must be positive".into()));
        }
        for row in self.b.iter().chain(self.c_out.iter()) {
            if row.len() != self.state_dim {
                return Err(Error::Argument("projection row length must equal state_dim".into()));
            }
        }
        Ok(())
    }

    /// Fixed-seed test initialization: projections uniform in [-0.5, 0.5],
    /// A uniform in [-1, -0.01], delta in (0.1, 1).
    pub fn seeded(channels: usize, state_dim: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let a = (0..state_dim).map(|_| rng.gen_range(-1.0..-0.01)).collect();
        let mat = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..channels)
                .map(|_| (0..state_dim).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let b = mat(&mut rng);
        let c_out = mat(&mut rng);
        let delta = (0..channels).map(|_| rng.gen_range(0.1..1.0)).collect();
        SsmParams {
            state_dim,
            a,
            b,
            c_out,
            delta,
        }
    }
}

/// Windowed self-attention parameters.
#[derive(Debug, Clone)]
pub struct AttnParams {
    pub window: [usize; 3],
    pub shift: [usize; 3],
    /// `channels x channels` projections.
    pub wq: Vec<Vec<f64>>,
    pub wk: Vec<Vec<f64>>,
    pub wv: Vec<Vec<f64>>,
    pub scale: f64,
}

impl AttnParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.window.iter().any(|&w| w == 0) {
            return Err(Error::Argument("window must be positive per axis".into()));
        }
        for a in 0..3 {
            if self.shift[a] >= self.window[a] {
                return Err(Error::Argument(format!(
                    "shift {:?} must be < window {:?}",
                    self.shift, self.window
                )));
            }
        }
        for w in [&self.wq, &self.wk, &self.wv] {
            if w.len() != channels || w.iter().any(|r| r.len() != channels) {
                return Err(Error::Argument("projection must be channels x channels".into()));
            }
        }
        if !(self.scale > 0.0) {
            return Err(Error::Argument("scale must be positive".into()));
        }
        Ok(())
    }

    pub fn seeded(channels: usize, window: [usize; 3], shift: [usize; 3], seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mat = |rng: &mut rand_chacha::ChaCha8Rng| {
            (0..channels)
                .map(|_| (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect::<Vec<Vec<f64>>>()
        };
        let wq = mat(&mut rng);
        let wk = mat(&mut rng);
        let wv = mat(&mut rng);
        AttnParams {
            window,
            shift,
            wq,
            wk,
            wv,
            scale: 1.0 / (channels as f64).sqrt(),
        }
    }
}

/// Gate parameters: `G = sigmoid(Wg . concat(z_m, z_s) + bias)` per voxel.
#[derive(Debug, Clone)]
pub struct GateParams {
    /// `channels x (2 * channels)` coefficients.
    pub wg: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
}

impl GateParams {
    pub fn validate(&self, channels: usize) -> Result<()> {
        if self.wg.len() != channels
            || self.wg.iter().any(|r| r.len() != 2 * channels)
            || self.bias.len() != channels
        {
            return Err(Error::Argument("gate map must be channels x 2*channels with channel bias".into()));
        }
        Ok(())
    }

    pub fn zeros(channels: usize) -> Self {
        GateParams {
            wg: vec![vec![0.0; 2 * channels]; channels],
            bias: vec![0.0; channels],
        }
    }

    pub fn seeded(channels: usize, seed: u64) -> Self {
        use rand::prelude::*;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        GateParams {
            wg: (0..channels)
                .map(|_| (0..2 * channels).map(|_| rng.gen_range(-0.5..0.5)).collect())
                .collect(),
            bias: (0..channels).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        }
    }
}

/// Serialize a feature tensor to a voxel sequence in raster order
/// (x fastest, then y, then z). Inverse of [`deserialize`].
pub fn serialize(z: &FeatureTensor) -> Vec<Vec<f64>> {
    (0..z.num_voxels()).map(|i| z.vector_at(i)).collect()
}

/// Rebuild a feature tensor from a raster-order sequence.
pub fn deserialize(seq: &[Vec<f64>], dims: [usize; 3]) -> Result<FeatureTensor> {
    let n = dims[0] * dims[1] * dims[2];
    if seq.len() != n {
        return Err(Error::Argument(format!(
            "sequence length {} does not match dims {dims:?}",
            seq.len()
        )));
    }
    let channels = seq.first().map(|v| v.len()).unwrap_or(0);
    let mut data = vec![0.0; channels * n];
    for (i, vec) in seq.iter().enumerate() {
        for (c, &v) in vec.iter().enumerate() {
            data[c * n + i] = v;
        }
    }
    FeatureTensor::new(dims, channels, data)
}

/// Causal diagonal linear SSM scan with zero-order-hold discretization and
/// zero initial state.
pub fn ssm_scan(seq: &[Vec<f64>], p: &SsmParams) -> Result<Vec<Vec<f64>>> {
    let channels = seq
        .first()
        .ok_or_else(|| Error::Argument("ssm_scan requires a nonempty sequence".into()))?
        .len();
    p.validate(channels)?;
    let n = p.state_dim;
    // per-channel discretized decay
    let decay: Vec<Vec<f64>> = (0..channels)
        .map(|c| p.a.iter().map(|&a| (p.delta[c] * a).exp()).collect())
        .collect();
    let mut state = vec![vec![0.0f64; n]; channels];
    let mut out = Vec::with_capacity(seq.len());
    for x in seq {
        let mut y = vec![0.0f64; channels];
        for c in 0..channels {
            let xc = x[c];
            let mut acc = 0.0;
            for s in 0..n {
                state[c][s] = decay[c][s] * state[c][s] + p.delta[c] * p.b[c][s] * xc;
                acc += p.c_out[c][s] * state[c][s];
            }
            y[c] = acc;
        }
        out.push(y);
    }
    Ok(out)
}

fn window_groups(dims: [usize; 3], window: [usize; 3], shift: [usize; 3]) -> Vec<Vec<usize>> {
    // Group voxel indices by their (shifted) window coordinates.
    use std::collections::BTreeMap;
    let mut groups: BTreeMap<[usize; 3], Vec<usize>> = BTreeMap::new();
    for z in 0..dims[2] {
        for y in 0..dims[1] {
            for x in 0..dims[0] {
                let key = [
                    (x + shift[0]) / window[0],
                    (y + shift[1]) / window[1],
                    (z + shift[2]) / window[2],
                ];
                groups
                    .entry(key)
                    .or_default()
                    .push(x + dims[0] * (y + dims[1] * z));
            }
        }
    }
    groups.into_values().collect()
}

fn clamp_pad(z: &FeatureTensor, padded: [usize; 3]) -> FeatureTensor {
    if padded == z.dims {
        return z.clone();
    }
    let mut out = FeatureTensor::zeros(padded, z.channels);
    for c in 0..z.channels {
        for zz in 0..padded[2] {
            for yy in 0..padded[1] {
                for xx in 0..padded[0] {
                    let v = z.at(
                        c,
                        xx.min(z.dims[0] - 1),
                        yy.min(z.dims[1] - 1),
                        zz.min(z.dims[2] - 1),
                    );
                    out.set(c, xx, yy, zz, v);
                }
            }
        }
    }
    out
}

fn mat_vec(m: &[Vec<f64>], v: &[f64]) -> Vec<f64> {
    m.iter().map(|row| row.iter().zip(v).map(|(a, b)| a * b).sum()).collect()
}

/// Window-based self-attention. Dims are clamp-padded up to window multiples,
/// the (shifted) window partition is attended independently per window, and
/// the result is cropped back. Voxels in different windows do not interact
/// within a single call.
pub fn window_attention(z: &FeatureTensor, p: &AttnParams) -> Result<FeatureTensor> {
    p.validate(z.channels)?;
    let padded_dims = [
        z.dims[0].div_ceil(p.window[0]) * p.window[0],
        z.dims[1].div_ceil(p.window[1]) * p.window[1],
        z.dims[2].div_ceil(p.window[2]) * p.window[2],
    ];
    let padded = clamp_pad(z, padded_dims);
    let n = padded.num_voxels();
    let groups = window_groups(padded_dims, p.window, p.shift);

    let mut out = FeatureTensor::zeros(padded_dims, z.channels);
    for group in &groups {
        let qs: Vec<Vec<f64>> = group.iter().map(|&i| mat_vec(&p.wq, &padded.vector_at(i))).collect();
        let ks: Vec<Vec<f64>> = group.iter().map(|&i| mat_vec(&p.wk, &padded.vector_at(i))).collect();
        let vs: Vec<Vec<f64>> = group.iter().map(|&i| mat_vec(&p.wv, &padded.vector_at(i))).collect();
        for (qi, &i) in group.iter().enumerate() {
            // softmax over the window, numerically stabilized
            let logits: Vec<f64> = ks
                .iter()
                .map(|k| qs[qi].iter().zip(k).map(|(a, b)| a * b).sum::<f64>() * p.scale)
                .collect();
            let max_l = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = logits.iter().map(|&l| (l - max_l).exp()).collect();
            let denom: f64 = exps.iter().sum();
            for c in 0..z.channels {
                let mut acc = 0.0;
                for (j, v) in vs.iter().enumerate() {
                    acc += exps[j] / denom * v[c];
                }
                out.data[c * n + i] = acc;
            }
        }
    }

    // crop back
    if padded_dims == z.dims {
        return Ok(out);
    }
    let mut cropped = FeatureTensor::zeros(z.dims, z.channels);
    for c in 0..z.channels {
        for zz in 0..z.dims[2] {
            for yy in 0..z.dims[1] {
                for xx in 0..z.dims[0] {
                    cropped.set(c, xx, yy, zz, out.at(c, xx, yy, zz));
                }
            }
        }
    }
    Ok(cropped)
}

/// Sigmoid-gated convex blend: `G ⊙ z_m + (1 - G) ⊙ z_s`, with
/// `G = sigmoid(Wg . concat(z_m, z_s) + bias)` per voxel. Every output
/// element lies between the two branch values.
pub fn gate_fuse(
    z_m: &FeatureTensor,
    z_s: &FeatureTensor,
    p: &GateParams,
) -> Result<FeatureTensor> {
    if z_m.dims != z_s.dims || z_m.channels != z_s.channels {
        return Err(Error::Argument("gate_fuse branch shapes must match".into()));
    }
    p.validate(z_m.channels)?;
    let n = z_m.num_voxels();
    let cdim = z_m.channels;
    let mut out = FeatureTensor::zeros(z_m.dims, cdim);
    for i in 0..n {
        let mut concat = Vec::with_capacity(2 * cdim);
        for c in 0..cdim {
            concat.push(z_m.data[c * n + i]);
        }
        for c in 0..cdim {
            concat.push(z_s.data[c * n + i]);
        }
        for c in 0..cdim {
            let logit: f64 = p.wg[c].iter().zip(&concat).map(|(a, b)| a * b).sum::<f64>() + p.bias[c];
            let g = 1.0 / (1.0 + (-logit).exp());
            out.data[c * n + i] = g * z_m.data[c * n + i] + (1.0 - g) * z_s.data[c * n + i];
        }
    }
    Ok(out)
}

/// Full forward pass: gated fusion of the serialized-scan branch and the
/// windowed-attention branch.
pub fn msl_forward(
    z: &FeatureTensor,
    ssm: &SsmParams,
    attn: &AttnParams,
    gate: &GateParams,
) -> Result<FeatureTensor> {
    let z_m = deserialize(&ssm_scan(&serialize(z), ssm)?, z.dims)?;
    let z_s = window_attention(z, attn)?;
    gate_fuse(&z_m, &z_s, gate)
}
