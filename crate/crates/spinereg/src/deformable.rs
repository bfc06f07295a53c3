//! Dense deformable field as an optimized coarse control grid.
//!
//! The deformable component is parameterized by displacement vectors at a
//! coarse control grid and expanded to the image grid with one trilinear
//! upsampling stage. The objective — descriptor similarity of the warped
//! moving image plus a weighted smoothness penalty — is minimized by an
//! Adam-style first-order optimizer with an analytic gradient: the chain rule
//! through the trilinear warp of precomputed moving descriptors and through
//! the upsampling weights.
//!
//! Loss and gradient are accumulated in f64 from a single internal code path
//! so the gradient is the exact derivative of the reported objective.

use rayon::prelude::*;

use crate::field::DisplacementField;
use crate::grid::{require_same_dims, Grid};
use crate::mind::DescriptorVolume;
use crate::{Error, Result};

/// Coarse grid of displacement control points covering the image grid.
/// Control point `(i,j,k)` sits at voxel coordinates `(i,j,k) * spacing_vox`.
#[derive(Debug, Clone, PartialEq)]
pub struct ControlGrid {
    pub cdims: [usize; 3],
    pub spacing_vox: [f64; 3],
    /// Displacement values at control points, one channel per axis,
    /// raster order (x fastest).
    pub values: [Vec<f64>; 3],
}

impl ControlGrid {
    /// All-zero control grid whose extent covers `grid` at roughly the
    /// requested spacing.
    pub fn zeros_covering(grid: &Grid, spacing_vox: f64) -> Result<Self> {
        if !(spacing_vox > 0.0) {
            return Err(Error::Argument(format!("control spacing {spacing_vox} must be > 0")));
        }
        let mut cdims = [0usize; 3];
        for a in 0..3 {
            let extent = (grid.dims[a] - 1) as f64;
            cdims[a] = ((extent / spacing_vox).ceil() as usize + 1).max(2);
        }
        let n = cdims[0] * cdims[1] * cdims[2];
        Ok(ControlGrid {
            cdims,
            spacing_vox: [spacing_vox; 3],
            values: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
        })
    }

    pub fn num_points(&self) -> usize {
        self.cdims[0] * self.cdims[1] * self.cdims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.cdims[0] * (y + self.cdims[1] * z)
    }

    /// Check shape consistency and that the control extent covers `grid`.
    pub fn validate_covers(&self, grid: &Grid) -> Result<()> {
        let n = self.num_points();
        if self.cdims.iter().any(|&d| d < 2) {
            return Err(Error::Argument(format!("cdims {:?} must be >= 2 per axis", self.cdims)));
        }
        if self.values.iter().any(|v| v.len() != n) {
            return Err(Error::Argument("control value channels must match cdims".into()));
        }
        for a in 0..3 {
            if !(self.spacing_vox[a] > 0.0) {
                return Err(Error::Argument("control spacing must be > 0".into()));
            }
            let extent = (self.cdims[a] - 1) as f64 * self.spacing_vox[a];
            if extent + 1e-9 < (grid.dims[a] - 1) as f64 {
                return Err(Error::Argument(format!(
                    "control grid extent {extent:.3} does not cover image axis {a} (needs {})",
                    grid.dims[a] - 1
                )));
            }
        }
        Ok(())
    }
}

/// Options for the deformable optimization stage.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DeformableOptions {
    /// Smoothness weight λ.
    pub lambda: f64,
    /// Adam step size, in voxels.
    pub step_size: f64,
    pub max_iters: usize,
    /// Control point spacing in voxels.
    pub grid_spacing_vox: f64,
    /// Stop when the gradient L2 norm falls to or below this value.
    pub grad_tol: f64,
    /// Penalize smoothness of the full hybrid field instead of the
    /// deformable component only (the default spares the legitimate rigid
    /// discontinuities at mask boundaries).
    pub smooth_on_hybrid: bool,
}

impl Default for DeformableOptions {
    fn default() -> Self {
        DeformableOptions {
            lambda: 0.2,
            step_size: 0.1,
            max_iters: 200,
            grid_spacing_vox: 4.0,
            grad_tol: 1e-6,
            smooth_on_hybrid: false,
        }
    }
}

impl DeformableOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || self.max_iters == 0 {
            return Err(Error::Argument("step_size must be > 0 and max_iters >= 1".into()));
        }
        if !(self.grid_spacing_vox > 0.0) || self.lambda < 0.0 || self.grad_tol < 0.0 {
            return Err(Error::Argument(
                "grid_spacing_vox must be > 0; lambda and grad_tol must be >= 0".into(),
            ));
        }
        Ok(())
    }
}

/// Trilinear cell and weights of a voxel coordinate in control space.
#[inline]
fn control_cell(c: f64, cdim: usize) -> (usize, f64) {
    let max = (cdim - 1) as f64;
    let v = c.clamp(0.0, max);
    let i0 = (v.floor() as usize).min(cdim - 2);
    (i0, v - i0 as f64)
}

/// Upsample control values to a per-voxel f64 field (one vec per axis).
fn upsample_f64(g: &ControlGrid, grid: &Grid) -> [Vec<f64>; 3] {
    let [nx, ny, _] = grid.dims;
    let mut out = [
        vec![0.0f64; grid.num_voxels()],
        vec![0.0f64; grid.num_voxels()],
        vec![0.0f64; grid.num_voxels()],
    ];
    let (ox, oy, oz) = {
        let mut it = out.iter_mut();
        (it.next().unwrap(), it.next().unwrap(), it.next().unwrap())
    };
    ox.par_chunks_mut(nx * ny)
        .zip(oy.par_chunks_mut(nx * ny))
        .zip(oz.par_chunks_mut(nx * ny))
        .enumerate()
        .for_each(|(z, ((sx, sy), sz))| {
            let (k0, fz) = control_cell(z as f64 / g.spacing_vox[2], g.cdims[2]);
            for y in 0..ny {
                let (j0, fy) = control_cell(y as f64 / g.spacing_vox[1], g.cdims[1]);
                for x in 0..nx {
                    let (i0, fx) = control_cell(x as f64 / g.spacing_vox[0], g.cdims[0]);
                    let mut acc = [0.0f64; 3];
                    for dz in 0..2 {
                        let wz = if dz == 0 { 1.0 - fz } else { fz };
                        for dy in 0..2 {
                            let wy = if dy == 0 { 1.0 - fy } else { fy };
                            for dx in 0..2 {
                                let wx = if dx == 0 { 1.0 - fx } else { fx };
                                let w = wx * wy * wz;
                                if w == 0.0 {
                                    continue;
                                }
                                let ci = g.index(i0 + dx, j0 + dy, k0 + dz);
                                for a in 0..3 {
                                    acc[a] += w * g.values[a][ci];
                                }
                            }
                        }
                    }
                    let i = x + nx * y;
                    sx[i] = acc[0];
                    sy[i] = acc[1];
                    sz[i] = acc[2];
                }
            }
        });
    out
}

/// Expand a control grid to a dense displacement field by trilinear
/// interpolation; exact at control point locations.
pub fn upsample_grid(g: &ControlGrid, grid: &Grid) -> Result<DisplacementField> {
    g.validate_covers(grid)?;
    let u = upsample_f64(g, grid);
    DisplacementField::new(
        grid.clone(),
        u[0].iter().map(|&v| v as f32).collect(),
        u[1].iter().map(|&v| v as f32).collect(),
        u[2].iter().map(|&v| v as f32).collect(),
    )
}

/// Trilinear sample of an f32 channel plus its spatial derivative, with
/// border clamping (derivative is zero along a clamped axis).
#[inline]
fn sample_with_grad(data: &[f32], grid: &Grid, p: [f64; 3]) -> (f64, [f64; 3]) {
    let mut i0 = [0usize; 3];
    let mut i1 = [0usize; 3];
    let mut f = [0.0f64; 3];
    let mut interior = [true; 3];
    for a in 0..3 {
        let n = grid.dims[a];
        let max = (n - 1) as f64;
        let c = p[a].clamp(0.0, max);
        interior[a] = p[a] > 0.0 && p[a] < max;
        let lo = c.floor() as usize;
        i0[a] = lo;
        i1[a] = (lo + 1).min(n - 1);
        f[a] = c - lo as f64;
    }
    let g = |xi: usize, yi: usize, zi: usize| data[grid.index(xi, yi, zi)] as f64;
    let v000 = g(i0[0], i0[1], i0[2]);
    let v100 = g(i1[0], i0[1], i0[2]);
    let v010 = g(i0[0], i1[1], i0[2]);
    let v110 = g(i1[0], i1[1], i0[2]);
    let v001 = g(i0[0], i0[1], i1[2]);
    let v101 = g(i1[0], i0[1], i1[2]);
    let v011 = g(i0[0], i1[1], i1[2]);
    let v111 = g(i1[0], i1[1], i1[2]);
    let (fx, fy, fz) = (f[0], f[1], f[2]);
    let c00 = v000 * (1.0 - fx) + v100 * fx;
    let c10 = v010 * (1.0 - fx) + v110 * fx;
    let c01 = v001 * (1.0 - fx) + v101 * fx;
    let c11 = v011 * (1.0 - fx) + v111 * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    let value = c0 * (1.0 - fz) + c1 * fz;
    let mut grad = [0.0f64; 3];
    if interior[0] {
        let d00 = v100 - v000;
        let d10 = v110 - v010;
        let d01 = v101 - v001;
        let d11 = v111 - v011;
        grad[0] = (d00 * (1.0 - fy) + d10 * fy) * (1.0 - fz) + (d01 * (1.0 - fy) + d11 * fy) * fz;
    }
    if interior[1] {
        let d0 = c10 - c00;
        let d1 = c11 - c01;
        grad[1] = d0 * (1.0 - fz) + d1 * fz;
    }
    if interior[2] {
        grad[2] = c1 - c0;
    }
    (value, grad)
}

/// Per-voxel slab result of the similarity pass.
struct SimSlab {
    sum: f64,
    grad: Option<[Vec<f64>; 3]>,
}

/// Similarity (mean squared channel difference after warping the moving
/// descriptors by `u_total`) and optionally its gradient w.r.t. the per-voxel
/// displacement.
fn similarity(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    u_total: &[Vec<f64>; 3],
    want_grad: bool,
) -> (f64, Option<[Vec<f64>; 3]>) {
    let grid = &d_fixed.grid;
    let [nx, ny, nz] = grid.dims;
    let nvox = grid.num_voxels();
    let k = d_fixed.num_channels();
    let scale = 2.0 / (nvox * k) as f64;
    let slabs: Vec<SimSlab> = (0..nz)
        .into_par_iter()
        .map(|z| {
            let base = z * nx * ny;
            let mut sum = 0.0f64;
            let mut grad = if want_grad {
                Some([vec![0.0f64; nx * ny], vec![0.0f64; nx * ny], vec![0.0f64; nx * ny]])
            } else {
                None
            };
            for y in 0..ny {
                for x in 0..nx {
                    let i = base + x + nx * y;
                    let p = [
                        x as f64 + u_total[0][i],
                        y as f64 + u_total[1][i],
                        z as f64 + u_total[2][i],
                    ];
                    for c in 0..k {
                        let (w, gw) = sample_with_grad(&d_moving.channels[c], grid, p);
                        let resid = w - d_fixed.channels[c][i] as f64;
                        sum += resid * resid;
                        if let Some(g) = grad.as_mut() {
                            let s = scale * resid;
                            g[0][i - base] += s * gw[0];
                            g[1][i - base] += s * gw[1];
                            g[2][i - base] += s * gw[2];
                        }
                    }
                }
            }
            SimSlab { sum, grad }
        })
        .collect();
    let total: f64 = slabs.iter().map(|s| s.sum).sum::<f64>() / (nvox * k) as f64;
    let grad = want_grad.then(|| {
        let mut out = [vec![0.0f64; nvox], vec![0.0f64; nvox], vec![0.0f64; nvox]];
        for (z, s) in slabs.iter().enumerate() {
            let g = s.grad.as_ref().unwrap();
            let base = z * nx * ny;
            for a in 0..3 {
                out[a][base..base + nx * ny].copy_from_slice(&g[a]);
            }
        }
        out
    });
    (total, grad)
}

/// Smoothness penalty of a per-voxel f64 field (same normalization as
/// `mind::smoothness_penalty`), optionally accumulating `lambda *` its
/// gradient into `grad`.
fn smoothness_f64(
    u: &[Vec<f64>; 3],
    grid: &Grid,
    lambda: f64,
    mut grad: Option<&mut [Vec<f64>; 3]>,
) -> f64 {
    let [nx, ny, nz] = grid.dims;
    let mut total = 0.0f64;
    for (ch, data) in u.iter().enumerate() {
        for axis in 0..3 {
            let n_axis = grid.dims[axis];
            if n_axis < 2 {
                continue;
            }
            let pairs = match axis {
                0 => (nx - 1) * ny * nz,
                1 => nx * (ny - 1) * nz,
                _ => nx * ny * (nz - 1),
            };
            let stride = match axis {
                0 => 1,
                1 => nx,
                _ => nx * ny,
            };
            let mut sum = 0.0f64;
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let c = [x, y, z];
                        if c[axis] + 1 >= n_axis {
                            continue;
                        }
                        let i = x + nx * (y + ny * z);
                        let d = data[i + stride] - data[i];
                        sum += d * d;
                        if let Some(g) = grad.as_deref_mut() {
                            let s = lambda * 2.0 * d / (pairs as f64 * 3.0);
                            g[ch][i + stride] += s;
                            g[ch][i] -= s;
                        }
                    }
                }
            }
            total += sum / pairs as f64;
        }
    }
    total / 3.0
}

/// Scatter a per-voxel gradient to the control points through the transposed
/// upsampling weights.
fn scatter_to_controls(g: &ControlGrid, grid: &Grid, voxel_grad: &[Vec<f64>; 3]) -> ControlGrid {
    let [nx, ny, nz] = grid.dims;
    let n = g.num_points();
    let mut out = ControlGrid {
        cdims: g.cdims,
        spacing_vox: g.spacing_vox,
        values: [vec![0.0; n], vec![0.0; n], vec![0.0; n]],
    };
    for z in 0..nz {
        let (k0, fz) = control_cell(z as f64 / g.spacing_vox[2], g.cdims[2]);
        for y in 0..ny {
            let (j0, fy) = control_cell(y as f64 / g.spacing_vox[1], g.cdims[1]);
            for x in 0..nx {
                let (i0, fx) = control_cell(x as f64 / g.spacing_vox[0], g.cdims[0]);
                let i = x + nx * (y + ny * z);
                for dz in 0..2 {
                    let wz = if dz == 0 { 1.0 - fz } else { fz };
                    for dy in 0..2 {
                        let wy = if dy == 0 { 1.0 - fy } else { fy };
                        for dx in 0..2 {
                            let wx = if dx == 0 { 1.0 - fx } else { fx };
                            let w = wx * wy * wz;
                            if w == 0.0 {
                                continue;
                            }
                            let ci = out.index(i0 + dx, j0 + dy, k0 + dz);
                            for a in 0..3 {
                                out.values[a][ci] += w * voxel_grad[a][i];
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn check_inputs(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    g: &ControlGrid,
    rigid_field: &DisplacementField,
) -> Result<()> {
    require_same_dims(&d_fixed.grid, &d_moving.grid, "deformable objective")?;
    require_same_dims(&d_fixed.grid, &rigid_field.grid, "deformable objective")?;
    if d_fixed.num_channels() != d_moving.num_channels() {
        return Err(Error::Argument("descriptor channel counts differ".into()));
    }
    g.validate_covers(&d_fixed.grid)
}

fn loss_and_gradient(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    g: &ControlGrid,
    rigid_field: &DisplacementField,
    opts: &DeformableOptions,
    want_grad: bool,
) -> Result<(f64, Option<ControlGrid>)> {
    check_inputs(d_fixed, d_moving, g, rigid_field)?;
    let grid = &d_fixed.grid;
    let u_def = upsample_f64(g, grid);
    let nvox = grid.num_voxels();
    let mut u_total = [
        vec![0.0f64; nvox],
        vec![0.0f64; nvox],
        vec![0.0f64; nvox],
    ];
    for i in 0..nvox {
        u_total[0][i] = u_def[0][i] + rigid_field.ux[i] as f64;
        u_total[1][i] = u_def[1][i] + rigid_field.uy[i] as f64;
        u_total[2][i] = u_def[2][i] + rigid_field.uz[i] as f64;
    }
    let (sim, mut voxel_grad) = similarity(d_fixed, d_moving, &u_total, want_grad);
    let smooth_field = if opts.smooth_on_hybrid { &u_total } else { &u_def };
    let smooth = smoothness_f64(smooth_field, grid, opts.lambda, voxel_grad.as_mut());
    let loss = sim + opts.lambda * smooth;
    let grad = voxel_grad.map(|vg| scatter_to_controls(g, grid, &vg));
    Ok((loss, grad))
}

/// Objective value `similarity + lambda * smoothness` at the given control
/// grid, with the rigid field fused in additively.
pub fn objective(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    g: &ControlGrid,
    rigid_field: &DisplacementField,
    opts: &DeformableOptions,
) -> Result<f64> {
    loss_and_gradient(d_fixed, d_moving, g, rigid_field, opts, false).map(|(l, _)| l)
}

/// Exact gradient of [`objective`] with respect to the control values.
pub fn objective_gradient(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    g: &ControlGrid,
    rigid_field: &DisplacementField,
    opts: &DeformableOptions,
) -> Result<ControlGrid> {
    loss_and_gradient(d_fixed, d_moving, g, rigid_field, opts, true)
        .map(|(_, g)| g.expect("gradient requested"))
}

/// Result of the deformable optimization stage.
#[derive(Debug, Clone)]
pub struct DeformableResult {
    pub control: ControlGrid,
    pub field: DisplacementField,
    /// Best-so-far objective after each gradient evaluation
    /// (monotone non-increasing).
    pub loss_trace: Vec<f64>,
    pub iterations_used: usize,
}

/// Minimize the objective over control values with Adam
/// (β₁ = 0.9, β₂ = 0.999, ε = 1e-8), returning the best-seen control grid.
pub fn optimize_deformable(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    rigid_field: &DisplacementField,
    opts: &DeformableOptions,
) -> Result<DeformableResult> {
    opts.validate()?;
    let grid = &d_fixed.grid;
    let mut g = ControlGrid::zeros_covering(grid, opts.grid_spacing_vox)?;
    check_inputs(d_fixed, d_moving, &g, rigid_field)?;

    const BETA1: f64 = 0.9;
    const BETA2: f64 = 0.999;
    const EPS: f64 = 1e-8;
    let n = g.num_points();
    let mut m = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];
    let mut v = [vec![0.0f64; n], vec![0.0f64; n], vec![0.0f64; n]];

    let numerical = |iter: usize, reason: String| Error::Numerical {
        stage: "deformable".into(),
        iteration: iter,
        reason,
    };

    let (mut loss, mut grad_opt) =
        loss_and_gradient(d_fixed, d_moving, &g, rigid_field, opts, true)?;
    if !loss.is_finite() {
        return Err(numerical(0, "non-finite initial objective".into()));
    }
    let mut best = g.clone();
    let mut best_loss = loss;
    let mut trace = vec![best_loss];
    let mut iterations = 1;

    for iter in 1..=opts.max_iters {
        let grad = grad_opt.take().expect("gradient present");
        let gnorm = grad
            .values
            .iter()
            .flat_map(|c| c.iter())
            .map(|&x| x * x)
            .sum::<f64>()
            .sqrt();
        if gnorm <= opts.grad_tol {
            break;
        }
        let t = iter as f64;
        let bc1 = 1.0 - BETA1.powf(t);
        let bc2 = 1.0 - BETA2.powf(t);
        for a in 0..3 {
            for i in 0..n {
                let gi = grad.values[a][i];
                m[a][i] = BETA1 * m[a][i] + (1.0 - BETA1) * gi;
                v[a][i] = BETA2 * v[a][i] + (1.0 - BETA2) * gi * gi;
                let step = opts.step_size * (m[a][i] / bc1) / ((v[a][i] / bc2).sqrt() + EPS);
                g.values[a][i] -= step;
            }
        }
        if g.values.iter().flat_map(|c| c.iter()).any(|x| !x.is_finite()) {
            return Err(numerical(iter, "control values became non-finite".into()));
        }
        let (l, gr) = loss_and_gradient(d_fixed, d_moving, &g, rigid_field, opts, true)?;
        if !l.is_finite() {
            return Err(numerical(iter, "non-finite objective".into()));
        }
        loss = l;
        grad_opt = gr;
        iterations = iter + 1;
        if loss < best_loss {
            best_loss = loss;
            best = g.clone();
        }
        trace.push(best_loss);
    }

    let field = upsample_grid(&best, grid)?;
    Ok(DeformableResult {
        control: best,
        field,
        loss_trace: trace,
        iterations_used: iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Volume;
    use crate::mind::{mind_descriptor_default, mind_ssd, smoothness_penalty, total_loss, LossWeights};
    use crate::resample::warp_descriptors;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn random_descriptors(dims: [usize; 3], seed: u64) -> DescriptorVolume {
        let grid = Grid::isotropic(dims);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let data: Vec<f32> = (0..grid.num_voxels()).map(|_| rng.gen()).collect();
        mind_descriptor_default(&Volume::new(grid, data).unwrap()).unwrap()
    }

    fn random_controls(g: &mut ControlGrid, lo: f64, hi: f64, seed: u64) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in 0..3 {
            for v in g.values[a].iter_mut() {
                *v = rng.gen_range(lo..hi);
            }
        }
    }

    #[test]
    fn upsample_zero_and_constant() {
        let grid = Grid::isotropic([9, 9, 9]);
        let g = ControlGrid::zeros_covering(&grid, 4.0).unwrap();
        let f = upsample_grid(&g, &grid).unwrap();
        assert!(f.ux.iter().all(|&v| v == 0.0));
        let mut gc = g.clone();
        for v in gc.values[1].iter_mut() {
            *v = 2.5;
        }
        let f = upsample_grid(&gc, &grid).unwrap();
        assert!(f.uy.iter().all(|&v| (v - 2.5).abs() < 1e-6));
        assert!(f.ux.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn upsample_single_point_is_tent_function() {
        let grid = Grid::isotropic([5, 5, 5]);
        let mut g = ControlGrid::zeros_covering(&grid, 2.0).unwrap();
        assert_eq!(g.cdims, [3, 3, 3]);
        let ci = g.index(1, 1, 1);
        g.values[0][ci] = 1.0;
        let f = upsample_grid(&g, &grid).unwrap();
        for (x, y, z) in grid.iter_coords() {
            let tent = |c: usize| (1.0 - (c as f64 / 2.0 - 1.0).abs()).max(0.0);
            let expect = tent(x) * tent(y) * tent(z);
            assert!(
                (f.ux[grid.index(x, y, z)] as f64 - expect).abs() < 1e-6,
                "voxel ({x},{y},{z})"
            );
        }
    }

    #[test]
    fn upsample_exact_at_control_points() {
        let grid = Grid::isotropic([9, 9, 5]);
        let mut g = ControlGrid::zeros_covering(&grid, 4.0).unwrap();
        random_controls(&mut g, -1.0, 1.0, 1);
        let f = upsample_grid(&g, &grid).unwrap();
        for k in 0..g.cdims[2] {
            for j in 0..g.cdims[1] {
                for i in 0..g.cdims[0] {
                    let (x, y, z) = (i * 4, j * 4, k * 4);
                    if x >= 9 || y >= 9 || z >= 5 {
                        continue;
                    }
                    let vi = grid.index(x, y, z);
                    let ci = g.index(i, j, k);
                    assert!((f.ux[vi] as f64 - g.values[0][ci]).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn coverage_violation_is_error() {
        let grid = Grid::isotropic([9, 9, 9]);
        let g = ControlGrid {
            cdims: [2, 2, 2],
            spacing_vox: [4.0; 3],
            values: [vec![0.0; 8], vec![0.0; 8], vec![0.0; 8]],
        };
        assert!(upsample_grid(&g, &grid).is_err());
    }

    #[test]
    fn objective_zero_for_aligned_inputs() {
        let d = random_descriptors([8, 8, 8], 2);
        let g = ControlGrid::zeros_covering(&d.grid, 4.0).unwrap();
        let rigid = DisplacementField::zeros(d.grid.clone());
        let opts = DeformableOptions::default();
        let loss = objective(&d, &d, &g, &rigid, &opts).unwrap();
        assert!(loss.abs() < 1e-8);
    }

    #[test]
    fn objective_matches_warp_based_evaluation() {
        let d_fixed = random_descriptors([8, 8, 8], 3);
        let d_moving = random_descriptors([8, 8, 8], 4);
        let mut g = ControlGrid::zeros_covering(&d_fixed.grid, 3.0).unwrap();
        random_controls(&mut g, -0.5, 0.5, 5);
        let rigid = DisplacementField::zeros(d_fixed.grid.clone());
        for lambda in [0.0, 0.2] {
            let opts = DeformableOptions { lambda, ..DeformableOptions::default() };
            let loss = objective(&d_fixed, &d_moving, &g, &rigid, &opts).unwrap();
            let field = upsample_grid(&g, &d_fixed.grid).unwrap();
            let hybrid = crate::field::fuse_hybrid(&field, &rigid).unwrap();
            let warped = warp_descriptors(&d_moving, &hybrid).unwrap();
            let sim = mind_ssd(&d_fixed, &warped, None).unwrap();
            let expect = total_loss(sim, smoothness_penalty(&field), &LossWeights::new(lambda).unwrap());
            assert!((loss - expect).abs() < 1e-5, "lambda {lambda}: {loss} vs {expect}");
        }
    }

    #[test]
    fn objective_matches_straight_line_reimplementation() {
        let d_fixed = random_descriptors([6, 6, 6], 6);
        let d_moving = random_descriptors([6, 6, 6], 7);
        let grid = d_fixed.grid.clone();
        let mut g = ControlGrid::zeros_covering(&grid, 2.5).unwrap();
        random_controls(&mut g, -0.4, 0.4, 8);
        let rigid = DisplacementField::zeros(grid.clone());
        let opts = DeformableOptions { lambda: 0.3, ..DeformableOptions::default() };
        let loss = objective(&d_fixed, &d_moving, &g, &rigid, &opts).unwrap();

        // independent f64 reimplementation
        let n = grid.num_voxels();
        let k = d_fixed.num_channels();
        let mut u = vec![[0.0f64; 3]; n];
        for (x, y, z) in grid.iter_coords() {
            let i = grid.index(x, y, z);
            // direct 8-corner evaluation
            let cell = |c: usize, a: usize| {
                let v = (c as f64 / g.spacing_vox[a]).clamp(0.0, (g.cdims[a] - 1) as f64);
                let i0 = (v.floor() as usize).min(g.cdims[a] - 2);
                (i0, v - i0 as f64)
            };
            let (ix, fx) = cell(x, 0);
            let (iy, fy) = cell(y, 1);
            let (iz, fz) = cell(z, 2);
            for a in 0..3 {
                let mut acc = 0.0;
                for dz in 0..2 {
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let w = (if dx == 0 { 1.0 - fx } else { fx })
                                * (if dy == 0 { 1.0 - fy } else { fy })
                                * (if dz == 0 { 1.0 - fz } else { fz });
                            acc += w * g.values[a][g.index(ix + dx, iy + dy, iz + dz)];
                        }
                    }
                }
                u[i][a] = acc;
            }
        }
        let mut sim = 0.0f64;
        for (x, y, z) in grid.iter_coords() {
            let i = grid.index(x, y, z);
            let p = [x as f64 + u[i][0], y as f64 + u[i][1], z as f64 + u[i][2]];
            for c in 0..k {
                let (w, _) = sample_with_grad(&d_moving.channels[c], &grid, p);
                let r = w - d_fixed.channels[c][i] as f64;
                sim += r * r;
            }
        }
        sim /= (n * k) as f64;
        let mut smooth = 0.0f64;
        for a_ch in 0..3 {
            for axis in 0..3 {
                let mut sum = 0.0;
                let mut pairs = 0usize;
                for (x, y, z) in grid.iter_coords() {
                    let c = [x, y, z];
                    if c[axis] + 1 >= grid.dims[axis] {
                        continue;
                    }
                    let mut hi = c;
                    hi[axis] += 1;
                    let d = u[grid.index(hi[0], hi[1], hi[2])][a_ch] - u[grid.index(x, y, z)][a_ch];
                    sum += d * d;
                    pairs += 1;
                }
                smooth += sum / pairs as f64;
            }
        }
        smooth /= 3.0;
        let expect = sim + 0.3 * smooth;
        assert!((loss - expect).abs() < 1e-8, "{loss} vs {expect}");
    }

    #[test]
    fn gradient_zero_at_aligned_minimum() {
        let d = random_descriptors([8, 8, 8], 9);
        let g = ControlGrid::zeros_covering(&d.grid, 4.0).unwrap();
        let rigid = DisplacementField::zeros(d.grid.clone());
        let opts = DeformableOptions { lambda: 0.0, ..DeformableOptions::default() };
        let grad = objective_gradient(&d, &d, &g, &rigid, &opts).unwrap();
        // aligned + zero field: residual is identically zero, but voxels at
        // exact knots have zero interpolation gradient anyway; every
        // component must vanish
        for a in 0..3 {
            for &v in &grad.values[a] {
                assert!(v.abs() < 1e-8);
            }
        }
    }

    /// Central finite-difference check with samples kept away from
    /// trilinear cell boundaries (controls in [0.15, 0.35]).
    fn fd_check(seed: u64) -> f64 {
        let d_fixed = random_descriptors([12, 12, 12], seed);
        let d_moving = random_descriptors([12, 12, 12], seed + 1000);
        let grid = d_fixed.grid.clone();
        let mut g = ControlGrid::zeros_covering(&grid, 5.5).unwrap();
        assert_eq!(g.cdims, [3, 3, 3]);
        random_controls(&mut g, 0.15, 0.35, seed + 2000);
        let rigid = DisplacementField::zeros(grid.clone());
        let opts = DeformableOptions { lambda: 0.2, ..DeformableOptions::default() };
        let analytic = objective_gradient(&d_fixed, &d_moving, &g, &rigid, &opts).unwrap();
        let h = 1e-3;
        let mut num = ControlGrid::zeros_covering(&grid, 5.5).unwrap();
        for a in 0..3 {
            for i in 0..g.num_points() {
                let mut gp = g.clone();
                gp.values[a][i] += h;
                let lp = objective(&d_fixed, &d_moving, &gp, &rigid, &opts).unwrap();
                gp.values[a][i] -= 2.0 * h;
                let lm = objective(&d_fixed, &d_moving, &gp, &rigid, &opts).unwrap();
                num.values[a][i] = (lp - lm) / (2.0 * h);
            }
        }
        let mut diff2 = 0.0f64;
        let mut norm2 = 0.0f64;
        for a in 0..3 {
            for i in 0..g.num_points() {
                let d = analytic.values[a][i] - num.values[a][i];
                diff2 += d * d;
                norm2 += num.values[a][i] * num.values[a][i];
            }
        }
        (diff2 / norm2.max(1e-30)).sqrt()
    }

    #[test]
    fn gradient_matches_finite_differences() {
        for seed in [1u64, 2, 3] {
            let rel = fd_check(seed);
            assert!(rel <= 1e-4, "seed {seed}: relative error {rel}");
        }
    }

    #[test]
    fn smoothness_only_gradient_matches_stencil_oracle() {
        // uniform image -> descriptors spatially constant -> similarity
        // contributes nothing; the gradient is the smoothness adjoint alone
        let grid = Grid::isotropic([8, 8, 8]);
        let flat = Volume::new(grid.clone(), vec![0.5; grid.num_voxels()]).unwrap();
        let d = mind_descriptor_default(&flat).unwrap();
        let mut g = ControlGrid::zeros_covering(&grid, 4.0).unwrap();
        random_controls(&mut g, -0.3, 0.3, 11);
        let rigid = DisplacementField::zeros(grid.clone());
        let opts = DeformableOptions { lambda: 1.0, ..DeformableOptions::default() };
        let grad = objective_gradient(&d, &d, &g, &rigid, &opts).unwrap();

        // oracle: adjoint of the forward-difference penalty on the upsampled
        // field, scattered by trilinear weights
        let u = upsample_f64(&g, &grid);
        let mut vg = [
            vec![0.0f64; grid.num_voxels()],
            vec![0.0f64; grid.num_voxels()],
            vec![0.0f64; grid.num_voxels()],
        ];
        let [nx, ny, nz] = grid.dims;
        for ch in 0..3 {
            for axis in 0..3 {
                let pairs = match axis {
                    0 => (nx - 1) * ny * nz,
                    1 => nx * (ny - 1) * nz,
                    _ => nx * ny * (nz - 1),
                };
                let stride = match axis {
                    0 => 1,
                    1 => nx,
                    _ => nx * ny,
                };
                for (x, y, z) in grid.iter_coords() {
                    let c = [x, y, z];
                    if c[axis] + 1 >= grid.dims[axis] {
                        continue;
                    }
                    let i = grid.index(x, y, z);
                    let d = u[ch][i + stride] - u[ch][i];
                    let s = 2.0 * d / (pairs as f64 * 3.0);
                    vg[ch][i + stride] += s;
                    vg[ch][i] -= s;
                }
            }
        }
        let expect = scatter_to_controls(&g, &grid, &vg);
        for a in 0..3 {
            for i in 0..g.num_points() {
                assert!((grad.values[a][i] - expect.values[a][i]).abs() < 1e-8);
            }
        }
    }

    #[test]
    fn optimize_aligned_returns_zero_grid_immediately() {
        let d = random_descriptors([8, 8, 8], 12);
        let rigid = DisplacementField::zeros(d.grid.clone());
        let opts = DeformableOptions { lambda: 0.0, grad_tol: 1e-8, ..DeformableOptions::default() };
        let r = optimize_deformable(&d, &d, &rigid, &opts).unwrap();
        assert_eq!(r.loss_trace.len(), 1);
        assert!(r.control.values.iter().all(|c| c.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn loss_trace_is_monotone_non_increasing() {
        // Smooth image so the similarity landscape has a real descent
        // direction from the zero-field start.
        let grid = Grid::isotropic([10, 10, 10]);
        let data: Vec<f32> = grid
            .iter_coords()
            .map(|(x, y, z)| {
                ((0.7 * x as f32).sin() + (0.5 * y as f32).cos() + (0.6 * z as f32).sin()) * 0.2
                    + 0.5
            })
            .collect();
        let d_fixed =
            mind_descriptor_default(&Volume::new(grid, data).unwrap()).unwrap();
        // moving: warped copy so there is something to recover
        let mut g = ControlGrid::zeros_covering(&d_fixed.grid, 4.0).unwrap();
        random_controls(&mut g, -0.6, 0.6, 14);
        let field = upsample_grid(&g, &d_fixed.grid).unwrap();
        let d_moving = warp_descriptors(&d_fixed, &field).unwrap();
        let rigid = DisplacementField::zeros(d_fixed.grid.clone());
        let opts = DeformableOptions { max_iters: 30, ..DeformableOptions::default() };
        let r = optimize_deformable(&d_fixed, &d_moving, &rigid, &opts).unwrap();
        for w in r.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
        assert!(*r.loss_trace.last().unwrap() < r.loss_trace[0]);
    }

    #[test]
    fn runaway_step_aborts_with_iteration_index() {
        let d_fixed = random_descriptors([8, 8, 8], 15);
        let d_moving = random_descriptors([8, 8, 8], 16);
        let rigid = DisplacementField::zeros(d_fixed.grid.clone());
        let opts = DeformableOptions {
            step_size: 1e300,
            max_iters: 10,
            ..DeformableOptions::default()
        };
        match optimize_deformable(&d_fixed, &d_moving, &rigid, &opts) {
            Err(Error::Numerical { stage, .. }) => assert_eq!(stage, "deformable"),
            Err(Error::Degenerate(_)) => {} // field rejected downstream also acceptable
            other => panic!("expected numerical abort, got {other:?}"),
        }
    }

    #[test]
    fn recovers_smooth_background_field_on_phantom() {
        let spec = crate::phantom::PhantomSpec {
            max_rot_deg: 0.0,
            max_trans_vox: 0.0,
            bg_field_amp_vox: 0.5,
            noise_sigma: 0.0,
            seed: 21,
            ..crate::phantom::PhantomSpec::default()
        };
        let p = crate::phantom::make_phantom(&spec).unwrap();
        let d_fixed = mind_descriptor_default(&p.fixed).unwrap();
        let d_moving = mind_descriptor_default(&p.moving).unwrap();
        let rigid = DisplacementField::zeros(p.fixed.grid.clone());
        let opts = DeformableOptions { max_iters: 150, ..DeformableOptions::default() };
        let r = optimize_deformable(&d_fixed, &d_moving, &rigid, &opts).unwrap();
        let gt = crate::phantom::gt_hybrid_field(&p).unwrap();
        let fg = p.fixed_labels.foreground_mask();
        let mut err = 0.0f64;
        let mut count = 0usize;
        for i in 0..fg.len() {
            if fg[i] {
                let dx = (r.field.ux[i] - gt.ux[i]) as f64;
                let dy = (r.field.uy[i] - gt.uy[i]) as f64;
                let dz = (r.field.uz[i] - gt.uz[i]) as f64;
                err += (dx * dx + dy * dy + dz * dz).sqrt();
                count += 1;
            }
        }
        err /= count as f64;
        assert!(err <= 0.5, "mean endpoint error {err}");
    }
}
