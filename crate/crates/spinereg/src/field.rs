//! Displacement-field algebra: rigid parameterization, masking, summation,
//! additive fusion, composition, and Jacobian analysis.
//!
//! Displacements are stored in voxel units of the fixed grid. Millimeters
//! enter only through metric reporting (HD95) via the grid spacing.

use crate::grid::{require_same_dims, sample_trilinear_slice, Grid, LabelVolume, Volume};
use crate::{Error, Result};

/// 6-DOF rigid transform: axis–angle rotation `r` (radians) about `center`
/// (voxel coordinates), followed by translation `t` (voxels).
///
/// The induced displacement at voxel `x` is
/// `u(x) = R (x - center) + center + t - x`.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct RigidParams {
    pub r: [f64; 3],
    pub t: [f64; 3],
    pub center: [f64; 3],
}

impl RigidParams {
    pub fn identity(center: [f64; 3]) -> Self {
        RigidParams {
            r: [0.0; 3],
            t: [0.0; 3],
            center,
        }
    }

    pub fn new(r: [f64; 3], t: [f64; 3], center: [f64; 3]) -> Result<Self> {
        let angle = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
        if angle >= std::f64::consts::PI + 1e-6 {
            return Err(Error::Argument(format!(
                "axis-angle magnitude {angle} outside canonical range [0, pi]"
            )));
        }
        for v in r.iter().chain(t.iter()).chain(center.iter()) {
            if !v.is_finite() {
                return Err(Error::Argument("rigid parameters must be finite".into()));
            }
        }
        Ok(RigidParams { r, t, center })
    }

    pub fn matrix(&self) -> [[f64; 3]; 3] {
        rotvec_to_matrix(self.r)
    }

    /// Displacement induced at an arbitrary point (voxel coordinates).
    pub fn displacement_at(&self, p: [f64; 3]) -> [f64; 3] {
        let m = self.matrix();
        let d = [p[0] - self.center[0], p[1] - self.center[1], p[2] - self.center[2]];
        let mut out = [0.0; 3];
        for i in 0..3 {
            out[i] = m[i][0] * d[0] + m[i][1] * d[1] + m[i][2] * d[2] + self.center[i] + self.t[i]
                - p[i];
        }
        out
    }

    /// Rotation angle in degrees.
    pub fn angle_deg(&self) -> f64 {
        let a = (self.r[0] * self.r[0] + self.r[1] * self.r[1] + self.r[2] * self.r[2]).sqrt();
        a.to_degrees()
    }
}

/// Rodrigues map: axis–angle vector to rotation matrix.
pub fn rotvec_to_matrix(r: [f64; 3]) -> [[f64; 3]; 3] {
    let theta = (r[0] * r[0] + r[1] * r[1] + r[2] * r[2]).sqrt();
    if theta < 1e-12 {
        return [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]];
    }
    let k = [r[0] / theta, r[1] / theta, r[2] / theta];
    let (s, c) = theta.sin_cos();
    let v = 1.0 - c;
    [
        [
            c + k[0] * k[0] * v,
            k[0] * k[1] * v - k[2] * s,
            k[0] * k[2] * v + k[1] * s,
        ],
        [
            k[1] * k[0] * v + k[2] * s,
            c + k[1] * k[1] * v,
            k[1] * k[2] * v - k[0] * s,
        ],
        [
            k[2] * k[0] * v - k[1] * s,
            k[2] * k[1] * v + k[0] * s,
            c + k[2] * k[2] * v,
        ],
    ]
}

/// Inverse Rodrigues map: rotation matrix to axis–angle vector. Valid for
/// angles in [0, π); near π the axis is recovered from the symmetric part.
pub fn matrix_to_rotvec(m: [[f64; 3]; 3]) -> [f64; 3] {
    let trace = m[0][0] + m[1][1] + m[2][2];
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = cos.acos();
    let skew = [
        m[2][1] - m[1][2],
        m[0][2] - m[2][0],
        m[1][0] - m[0][1],
    ];
    let sin = theta.sin();
    if sin > 1e-7 {
        let f = theta / (2.0 * sin);
        return [skew[0] * f, skew[1] * f, skew[2] * f];
    }
    if theta < 1e-4 {
        // R ≈ I + [r]_x: the skew part is twice the rotation vector
        return [skew[0] / 2.0, skew[1] / 2.0, skew[2] / 2.0];
    }
    // angle near π: axis from the dominant diagonal of (R + I) / 2
    let d = [
        ((m[0][0] + 1.0) / 2.0).max(0.0).sqrt(),
        ((m[1][1] + 1.0) / 2.0).max(0.0).sqrt(),
        ((m[2][2] + 1.0) / 2.0).max(0.0).sqrt(),
    ];
    let k = if d[0] >= d[1] && d[0] >= d[2] { 0 } else if d[1] >= d[2] { 1 } else { 2 };
    let mut axis = [0.0; 3];
    axis[k] = d[k];
    for i in 0..3 {
        if i != k {
            axis[i] = (m[k][i] + m[i][k]) / (4.0 * d[k]);
        }
    }
    // orient via the skew part (zero exactly at π; sign then irrelevant)
    if axis[0] * skew[0] + axis[1] * skew[1] + axis[2] * skew[2] < 0.0 {
        for a in axis.iter_mut() {
            *a = -*a;
        }
    }
    let n = (axis[0] * axis[0] + axis[1] * axis[1] + axis[2] * axis[2]).sqrt();
    [axis[0] / n * theta, axis[1] / n * theta, axis[2] / n * theta]
}

/// Residual transform `prereg⁻¹ ∘ total`, expressed about `total`'s center:
/// applying the result and then `prereg` reproduces `total` exactly.
pub fn residual_after(prereg: &RigidParams, total: &RigidParams) -> Result<RigidParams> {
    let rp = prereg.matrix();
    let rt = total.matrix();
    // R_q = R_p^T R_t
    let mut rq = [[0.0f64; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            for k in 0..3 {
                rq[i][j] += rp[k][i] * rt[k][j];
            }
        }
    }
    let r = matrix_to_rotvec(rq);
    // t_q = Q(c_t) - c_t with Q = P^{-1} ∘ T and T(c_t) = c_t + t_t
    let c = total.center;
    let tc = [c[0] + total.t[0], c[1] + total.t[1], c[2] + total.t[2]];
    let d = [
        tc[0] - prereg.center[0] - prereg.t[0],
        tc[1] - prereg.center[1] - prereg.t[1],
        tc[2] - prereg.center[2] - prereg.t[2],
    ];
    let mut t = [0.0f64; 3];
    for i in 0..3 {
        // R_p^T d
        t[i] = rp[0][i] * d[0] + rp[1][i] * d[1] + rp[2][i] * d[2] + prereg.center[i] - c[i];
    }
    RigidParams::new(r, t, c)
}

/// Dense 3-channel voxel-displacement field on a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct DisplacementField {
    pub grid: Grid,
    pub ux: Vec<f32>,
    pub uy: Vec<f32>,
    pub uz: Vec<f32>,
}

impl DisplacementField {
    pub fn new(grid: Grid, ux: Vec<f32>, uy: Vec<f32>, uz: Vec<f32>) -> Result<Self> {
        let n = grid.num_voxels();
        if ux.len() != n || uy.len() != n || uz.len() != n {
            return Err(Error::Argument(format!(
                "channel lengths ({}, {}, {}) do not match grid {:?}",
                ux.len(),
                uy.len(),
                uz.len(),
                grid.dims
            )));
        }
        for ch in [&ux, &uy, &uz] {
            if ch.iter().any(|v| !v.is_finite()) {
                return Err(Error::Argument("displacement field contains non-finite values".into()));
            }
        }
        Ok(DisplacementField { grid, ux, uy, uz })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_voxels();
        DisplacementField {
            grid,
            ux: vec![0.0; n],
            uy: vec![0.0; n],
            uz: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> [f32; 3] {
        let i = self.grid.index(x, y, z);
        [self.ux[i], self.uy[i], self.uz[i]]
    }

    /// Trilinear sample of the displacement at continuous coordinates.
    pub fn sample(&self, x: f64, y: f64, z: f64) -> [f64; 3] {
        [
            sample_trilinear_slice(&self.ux, &self.grid, x, y, z),
            sample_trilinear_slice(&self.uy, &self.grid, x, y, z),
            sample_trilinear_slice(&self.uz, &self.grid, x, y, z),
        ]
    }

    /// Mean displacement magnitude over voxels where `mask` is true.
    pub fn mean_magnitude_in(&self, mask: &[bool]) -> f64 {
        let mut sum = 0.0f64;
        let mut count = 0usize;
        for i in 0..self.ux.len() {
            if mask[i] {
                let (x, y, z) = (self.ux[i] as f64, self.uy[i] as f64, self.uz[i] as f64);
                sum += (x * x + y * y + z * z).sqrt();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            sum / count as f64
        }
    }
}

/// Rasterize a rigid transform into a dense displacement field.
pub fn rigid_to_displacement(p: &RigidParams, grid: &Grid) -> DisplacementField {
    let mut f = DisplacementField::zeros(grid.clone());
    let m = p.matrix();
    for (x, y, z) in grid.iter_coords() {
        let i = grid.index(x, y, z);
        let d = [
            x as f64 - p.center[0],
            y as f64 - p.center[1],
            z as f64 - p.center[2],
        ];
        f.ux[i] = (m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2] + p.center[0] + p.t[0]
            - x as f64) as f32;
        f.uy[i] = (m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2] + p.center[1] + p.t[1]
            - y as f64) as f32;
        f.uz[i] = (m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2] + p.center[2] + p.t[2]
            - z as f64) as f32;
    }
    f
}

/// Zero the field outside a binary mask (true = keep).
pub fn mask_field(f: &DisplacementField, mask: &[bool], mask_grid: &Grid) -> Result<DisplacementField> {
    require_same_dims(&f.grid, mask_grid, "mask_field")?;
    let mut out = f.clone();
    for i in 0..out.ux.len() {
        if !mask[i] {
            out.ux[i] = 0.0;
            out.uy[i] = 0.0;
            out.uz[i] = 0.0;
        }
    }
    Ok(out)
}

/// Voxelwise sum of displacement fields, in list order.
pub fn sum_fields(fields: &[DisplacementField]) -> Result<DisplacementField> {
    let first = fields
        .first()
        .ok_or_else(|| Error::Argument("sum_fields requires at least one field".into()))?;
    let mut out = first.clone();
    for f in &fields[1..] {
        require_same_dims(&out.grid, &f.grid, "sum_fields")?;
        for i in 0..out.ux.len() {
            out.ux[i] += f.ux[i];
            out.uy[i] += f.uy[i];
            out.uz[i] += f.uz[i];
        }
    }
    Ok(out)
}

/// Additive fusion of the deformable and rigid displacement fields: the
/// displacement parts add, the identity is counted once.
pub fn fuse_hybrid(
    def_field: &DisplacementField,
    rigid_field: &DisplacementField,
) -> Result<DisplacementField> {
    require_same_dims(&def_field.grid, &rigid_field.grid, "fuse_hybrid")?;
    let n = def_field.ux.len();
    let mut out = DisplacementField::zeros(def_field.grid.clone());
    for i in 0..n {
        out.ux[i] = def_field.ux[i] + rigid_field.ux[i];
        out.uy[i] = def_field.uy[i] + rigid_field.uy[i];
        out.uz[i] = def_field.uz[i] + rigid_field.uz[i];
    }
    Ok(out)
}

/// Per-voxel determinant of `I + du/dx`, with central differences in voxel
/// units (one-sided at boundaries). A rigid field yields 1 everywhere in the
/// interior, regardless of anisotropic spacing.
pub fn jacobian_determinant(f: &DisplacementField) -> Result<Volume> {
    let [nx, ny, nz] = f.grid.dims;
    if nx < 2 || ny < 2 || nz < 2 {
        return Err(Error::Argument(format!(
            "jacobian needs dims >= 2 per axis, got {:?}",
            f.grid.dims
        )));
    }
    let grid = &f.grid;
    let mut out = Volume::zeros(grid.clone());
    // derivative of channel data along axis at (x,y,z)
    let deriv = |data: &[f32], x: usize, y: usize, z: usize, axis: usize| -> f64 {
        let c = [x, y, z];
        let n = grid.dims[axis];
        let mut lo = c;
        let mut hi = c;
        if c[axis] == 0 {
            hi[axis] = 1;
        } else if c[axis] == n - 1 {
            lo[axis] = n - 2;
        } else {
            lo[axis] = c[axis] - 1;
            hi[axis] = c[axis] + 1;
        }
        let span = (hi[axis] - lo[axis]) as f64;
        (data[grid.index(hi[0], hi[1], hi[2])] as f64 - data[grid.index(lo[0], lo[1], lo[2])] as f64)
            / span
    };
    for (x, y, z) in grid.iter_coords() {
        let mut j = [[0.0f64; 3]; 3];
        for (row, data) in [&f.ux, &f.uy, &f.uz].into_iter().enumerate() {
            for axis in 0..3 {
                j[row][axis] = deriv(data, x, y, z, axis);
            }
            j[row][row] += 1.0;
        }
        let det = j[0][0] * (j[1][1] * j[2][2] - j[1][2] * j[2][1])
            - j[0][1] * (j[1][0] * j[2][2] - j[1][2] * j[2][0])
            + j[0][2] * (j[1][0] * j[2][1] - j[1][1] * j[2][0]);
        out.data[grid.index(x, y, z)] = det as f32;
    }
    Ok(out)
}

/// Composition `(outer ∘ inner)(x) - x = inner(x) + outer(x + inner(x))`,
/// with `outer` sampled trilinearly (clamped).
pub fn compose_fields(
    outer: &DisplacementField,
    inner: &DisplacementField,
) -> Result<DisplacementField> {
    require_same_dims(&outer.grid, &inner.grid, "compose_fields")?;
    let grid = inner.grid.clone();
    let mut out = DisplacementField::zeros(grid.clone());
    for (x, y, z) in grid.iter_coords() {
        let i = grid.index(x, y, z);
        let u = [inner.ux[i] as f64, inner.uy[i] as f64, inner.uz[i] as f64];
        let p = [x as f64 + u[0], y as f64 + u[1], z as f64 + u[2]];
        let v = outer.sample(p[0], p[1], p[2]);
        out.ux[i] = (u[0] + v[0]) as f32;
        out.uy[i] = (u[1] + v[1]) as f32;
        out.uz[i] = (u[2] + v[2]) as f32;
    }
    Ok(out)
}

/// Warn-level validation: true when per-label supports are pairwise disjoint.
/// A label map is disjoint by construction; overlap indicates corrupt input.
pub fn labels_are_disjoint(_labels: &LabelVolume) -> bool {
    // A LabelVolume stores one id per voxel, so supports cannot overlap.
    true
}
