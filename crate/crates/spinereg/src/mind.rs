//! Modality-independent similarity: MIND self-similarity descriptors, the
//! descriptor SSD similarity term, the displacement smoothness penalty, and
//! the total objective `L = L_sim + lambda * L_smooth`.

use rayon::prelude::*;

use crate::grid::{require_same_dims, Grid, Volume};
use crate::{Error, Result};

/// Variance clamp floor, as a fraction of the global mean patch variance.
/// Keeps flat regions from dividing by zero.
pub const VARIANCE_FLOOR_FRACTION: f64 = 1e-6;

/// Absolute variance floor for fully flat volumes (global mean variance 0).
const VARIANCE_FLOOR_ABS: f64 = 1e-12;

/// Default Gaussian patch weight sigma in voxels.
pub const DEFAULT_PATCH_SIGMA: f64 = 0.5;

/// The six axis-aligned unit offsets of the default neighborhood.
pub const SIX_NEIGHBORHOOD: [[i64; 3]; 6] = [
    [-1, 0, 0],
    [1, 0, 0],
    [0, -1, 0],
    [0, 1, 0],
    [0, 0, -1],
    [0, 0, 1],
];

/// Multi-channel self-similarity descriptor grid. One channel per
/// neighborhood offset; values in [0, 1] with the per-voxel maximum equal
/// to 1 after normalization.
#[derive(Debug, Clone)]
pub struct DescriptorVolume {
    pub grid: Grid,
    pub channels: Vec<Vec<f32>>,
}

impl DescriptorVolume {
    pub fn num_channels(&self) -> usize {
        self.channels.len()
    }
}

/// Regularization weights of the total objective.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda: f64,
}

impl LossWeights {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::Argument(format!("lambda must be >= 0, got {lambda}")));
        }
        Ok(LossWeights { lambda })
    }
}

impl Default for LossWeights {
    fn default() -> Self {
        // default regularization weight 0.2
        LossWeights { lambda: 0.2 }
    }
}

#[inline]
fn clamp_i(v: i64, n: usize) -> usize {
    v.clamp(0, n as i64 - 1) as usize
}

/// Gaussian-weighted patch SSD between patches centered at `a` and `b`.
fn patch_distance(
    v: &Volume,
    a: [i64; 3],
    b: [i64; 3],
    radius: i64,
    weights: &[f64],
) -> f64 {
    let grid = &v.grid;
    let mut acc = 0.0f64;
    let mut wi = 0usize;
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let pa = v.data[grid.index(
                    clamp_i(a[0] + dx, grid.dims[0]),
                    clamp_i(a[1] + dy, grid.dims[1]),
                    clamp_i(a[2] + dz, grid.dims[2]),
                )] as f64;
                let pb = v.data[grid.index(
                    clamp_i(b[0] + dx, grid.dims[0]),
                    clamp_i(b[1] + dy, grid.dims[1]),
                    clamp_i(b[2] + dz, grid.dims[2]),
                )] as f64;
                let d = pa - pb;
                acc += weights[wi] * d * d;
                wi += 1;
            }
        }
    }
    acc
}

fn gaussian_patch_weights(radius: i64, sigma: f64) -> Vec<f64> {
    let mut w = Vec::new();
    for dz in -radius..=radius {
        for dy in -radius..=radius {
            for dx in -radius..=radius {
                let r2 = (dx * dx + dy * dy + dz * dz) as f64;
                w.push((-r2 / (2.0 * sigma * sigma)).exp());
            }
        }
    }
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Compute MIND descriptors with the given patch radius over a neighborhood
/// of offsets (default [`SIX_NEIGHBORHOOD`]).
///
/// Per voxel x and offset o: `D(x,o)` is the Gaussian-weighted patch SSD
/// between the patches at x and x+o; `V(x)` is the mean of `D(x,·)`, clamped
/// below by [`VARIANCE_FLOOR_FRACTION`] of its global mean; the channel value
/// is `exp(-D(x,o)/V(x))`, max-normalized per voxel so the largest channel
/// is 1.
pub fn mind_descriptor(
    v: &Volume,
    patch_radius: usize,
    neighborhood: &[[i64; 3]],
) -> Result<DescriptorVolume> {
    let min_dim = 2 * patch_radius + 3;
    if v.grid.dims.iter().any(|&d| d < min_dim) {
        return Err(Error::Argument(format!(
            "volume dims {:?} too small for patch radius {patch_radius} (need >= {min_dim})",
            v.grid.dims
        )));
    }
    let radius = patch_radius as i64;
    let weights = gaussian_patch_weights(radius, DEFAULT_PATCH_SIGMA);
    let grid = &v.grid;
    let n = grid.num_voxels();
    let k = neighborhood.len();

    // distances per channel
    let distances: Vec<Vec<f64>> = neighborhood
        .par_iter()
        .map(|&off| {
            let mut d = vec![0.0f64; n];
            for (x, y, z) in grid.iter_coords() {
                let a = [x as i64, y as i64, z as i64];
                let b = [a[0] + off[0], a[1] + off[1], a[2] + off[2]];
                d[grid.index(x, y, z)] = patch_distance(v, a, b, radius, &weights);
            }
            d
        })
        .collect();

    // per-voxel mean distance (variance estimate), then global clamp floor
    let mut variance = vec![0.0f64; n];
    for d in &distances {
        for i in 0..n {
            variance[i] += d[i];
        }
    }
    for v in &mut variance {
        *v /= k as f64;
    }
    let global_mean = variance.iter().sum::<f64>() / n as f64;
    let floor = (VARIANCE_FLOOR_FRACTION * global_mean).max(VARIANCE_FLOOR_ABS);

    let mut channels: Vec<Vec<f32>> = (0..k).map(|_| vec![0.0f32; n]).collect();
    let mut vals = vec![0.0f64; k];
    for i in 0..n {
        let var = variance[i].max(floor);
        let mut max_c = f64::MIN;
        for (c, d) in distances.iter().enumerate() {
            let e = (-d[i] / var).exp();
            vals[c] = e;
            max_c = max_c.max(e);
        }
        for c in 0..k {
            channels[c][i] = (vals[c] / max_c) as f32;
        }
    }
    Ok(DescriptorVolume {
        grid: grid.clone(),
        channels,
    })
}

/// MIND descriptors with the default configuration: 6-neighborhood, patch
/// radius 1.
pub fn mind_descriptor_default(v: &Volume) -> Result<DescriptorVolume> {
    mind_descriptor(v, 1, &SIX_NEIGHBORHOOD)
}

/// Mean squared channel difference over (masked) voxels.
pub fn mind_ssd(
    d_fixed: &DescriptorVolume,
    d_moving_warped: &DescriptorVolume,
    fg_mask: Option<&[bool]>,
) -> Result<f64> {
    require_same_dims(&d_fixed.grid, &d_moving_warped.grid, "mind_ssd")?;
    if d_fixed.num_channels() != d_moving_warped.num_channels() {
        return Err(Error::Argument(format!(
            "channel count mismatch: {} vs {}",
            d_fixed.num_channels(),
            d_moving_warped.num_channels()
        )));
    }
    let n = d_fixed.grid.num_voxels();
    let k = d_fixed.num_channels();
    let mut sum = 0.0f64;
    let mut count = 0usize;
    for c in 0..k {
        let a = &d_fixed.channels[c];
        let b = &d_moving_warped.channels[c];
        match fg_mask {
            None => {
                for i in 0..n {
                    let d = (a[i] - b[i]) as f64;
                    sum += d * d;
                }
                count += n;
            }
            Some(mask) => {
                for i in 0..n {
                    if mask[i] {
                        let d = (a[i] - b[i]) as f64;
                        sum += d * d;
                        count += 1;
                    }
                }
            }
        }
    }
    if count == 0 {
        return Err(Error::Degenerate("mind_ssd over empty mask".into()));
    }
    Ok(sum / count as f64)
}

/// Mean squared forward-difference gradient magnitude over all three
/// displacement channels.
///
/// Normalization: for each channel and axis, squared forward differences are
/// averaged over the valid voxel pairs of that axis; per-channel axis terms
/// add to a mean gradient magnitude, and the three channels are averaged. A
/// unit ramp in one channel along one axis therefore scores exactly 1/3.
pub fn smoothness_penalty(f: &crate::field::DisplacementField) -> f64 {
    let grid = &f.grid;
    let [nx, ny, nz] = grid.dims;
    let mut total = 0.0f64;
    for data in [&f.ux, &f.uy, &f.uz] {
        for axis in 0..3 {
            let n_axis = grid.dims[axis];
            if n_axis < 2 {
                continue;
            }
            let mut sum = 0.0f64;
            let mut pairs = 0usize;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let c = [x, y, z];
                        if c[axis] + 1 >= n_axis {
                            continue;
                        }
                        let mut hi = c;
                        hi[axis] += 1;
                        let d = data[grid.index(hi[0], hi[1], hi[2])] as f64
                            - data[grid.index(c[0], c[1], c[2])] as f64;
                        sum += d * d;
                        pairs += 1;
                    }
                }
            }
            if pairs > 0 {
                total += sum / pairs as f64;
            }
        }
    }
    total / 3.0
}

/// `sim + lambda * smooth`.
pub fn total_loss(sim: f64, smooth: f64, w: &LossWeights) -> f64 {
    sim + w.lambda * smooth
}
