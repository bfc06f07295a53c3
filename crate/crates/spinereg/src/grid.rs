//! Volume data model: grid geometry, scalar and label volumes, and the
//! crop/resize preprocessing operations.
//!
//! All voxel data is stored row-major with x fastest: the linear index of
//! voxel `(x, y, z)` is `x + dims[0] * (y + dims[1] * z)`. Scalar storage is
//! `f32`; reductions accumulate in `f64`. Interpolation clamps to the edge
//! everywhere.

use crate::{Error, Result};

/// Regular 3D grid geometry: voxel counts, physical spacing (mm per voxel),
/// and physical origin (mm).
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Grid {
    pub dims: [usize; 3],
    pub spacing: [f64; 3],
    pub origin: [f64; 3],
}

impl Grid {
    pub fn new(dims: [usize; 3], spacing: [f64; 3], origin: [f64; 3]) -> Result<Self> {
        if dims.iter().any(|&d| d < 1) {
            return Err(Error::Argument(format!("grid dims must be >= 1, got {dims:?}")));
        }
        if spacing.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
            return Err(Error::Argument(format!(
                "grid spacing must be positive and finite, got {spacing:?}"
            )));
        }
        Ok(Grid { dims, spacing, origin })
    }

    pub fn isotropic(dims: [usize; 3]) -> Self {
        Grid {
            dims,
            spacing: [1.0; 3],
            origin: [0.0; 3],
        }
    }

    pub fn num_voxels(&self) -> usize {
        self.dims[0] * self.dims[1] * self.dims[2]
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Iterate voxel coordinates in storage order (x fastest).
    pub fn iter_coords(&self) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
        let [nx, ny, nz] = self.dims;
        (0..nz).flat_map(move |z| (0..ny).flat_map(move |y| (0..nx).map(move |x| (x, y, z))))
    }

    pub fn same_geometry(&self, other: &Grid) -> bool {
        self.dims == other.dims
            && self
                .spacing
                .iter()
                .zip(&other.spacing)
                .all(|(a, b)| (a - b).abs() < 1e-9)
    }

    fn check_match(&self, other: &Grid, what: &str) -> Result<()> {
        if self.dims != other.dims {
            return Err(Error::GridMismatch(format!(
                "{what}: dims {:?} vs {:?}",
                self.dims, other.dims
            )));
        }
        Ok(())
    }
}

/// Scalar 3D volume.
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub grid: Grid,
    pub data: Vec<f32>,
}

impl Volume {
    pub fn new(grid: Grid, data: Vec<f32>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::Argument(format!(
                "data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::Argument("volume contains non-finite values".into()));
        }
        Ok(Volume { grid, data })
    }

    pub fn zeros(grid: Grid) -> Self {
        let n = grid.num_voxels();
        Volume {
            grid,
            data: vec![0.0; n],
        }
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> f32 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Trilinear sample at continuous voxel coordinates, clamped to the edge.
    pub fn sample_trilinear(&self, x: f64, y: f64, z: f64) -> f64 {
        sample_trilinear_slice(&self.data, &self.grid, x, y, z)
    }

    pub fn min_max(&self) -> (f32, f32) {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &v in &self.data {
            lo = lo.min(v);
            hi = hi.max(v);
        }
        (lo, hi)
    }

    /// Min–max normalization to [0, 1]. A constant volume maps to all zeros.
    pub fn normalized(&self) -> Volume {
        let (lo, hi) = self.min_max();
        let range = hi - lo;
        let data = if range > 0.0 {
            self.data.iter().map(|&v| (v - lo) / range).collect()
        } else {
            vec![0.0; self.data.len()]
        };
        Volume {
            grid: self.grid.clone(),
            data,
        }
    }
}

/// Integer-labeled 3D volume. 0 is background.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelVolume {
    pub grid: Grid,
    pub data: Vec<u32>,
    pub label_ids: Vec<u32>,
}

impl LabelVolume {
    pub fn new(grid: Grid, data: Vec<u32>) -> Result<Self> {
        if data.len() != grid.num_voxels() {
            return Err(Error::Argument(format!(
                "label data length {} does not match grid {:?}",
                data.len(),
                grid.dims
            )));
        }
        let mut ids: Vec<u32> = data.iter().copied().filter(|&v| v != 0).collect();
        ids.sort_unstable();
        ids.dedup();
        Ok(LabelVolume {
            grid,
            data,
            label_ids: ids,
        })
    }

    #[inline]
    pub fn at(&self, x: usize, y: usize, z: usize) -> u32 {
        self.data[self.grid.index(x, y, z)]
    }

    /// Voxel count of a given label id.
    pub fn count(&self, id: u32) -> usize {
        self.data.iter().filter(|&&v| v == id).count()
    }

    /// Binary mask (1.0 inside, 0.0 outside) of all nonzero labels.
    pub fn foreground_mask(&self) -> Vec<bool> {
        self.data.iter().map(|&v| v != 0).collect()
    }
}

#[inline]
fn clamp_idx(v: f64, n: usize) -> (usize, usize, f64) {
    // Returns floor index, floor+1 (clamped) and the fraction.
    let max = (n - 1) as f64;
    let c = v.clamp(0.0, max);
    let i0 = c.floor() as usize;
    let i1 = (i0 + 1).min(n - 1);
    (i0, i1, c - i0 as f64)
}

/// Trilinear sampling over a raw slice with the crate's storage layout.
pub(crate) fn sample_trilinear_slice(data: &[f32], grid: &Grid, x: f64, y: f64, z: f64) -> f64 {
    let (x0, x1, fx) = clamp_idx(x, grid.dims[0]);
    let (y0, y1, fy) = clamp_idx(y, grid.dims[1]);
    let (z0, z1, fz) = clamp_idx(z, grid.dims[2]);
    let g = |xi: usize, yi: usize, zi: usize| data[grid.index(xi, yi, zi)] as f64;
    let c00 = g(x0, y0, z0) * (1.0 - fx) + g(x1, y0, z0) * fx;
    let c10 = g(x0, y1, z0) * (1.0 - fx) + g(x1, y1, z0) * fx;
    let c01 = g(x0, y0, z1) * (1.0 - fx) + g(x1, y0, z1) * fx;
    let c11 = g(x0, y1, z1) * (1.0 - fx) + g(x1, y1, z1) * fx;
    let c0 = c00 * (1.0 - fy) + c10 * fy;
    let c1 = c01 * (1.0 - fy) + c11 * fy;
    c0 * (1.0 - fz) + c1 * fz
}

/// Nearest-neighbor sampling. Ties at exact half-voxel coordinates round
/// half-up per axis, for determinism across platforms.
pub(crate) fn sample_nearest_slice(data: &[u32], grid: &Grid, x: f64, y: f64, z: f64) -> u32 {
    let round = |v: f64, n: usize| -> usize {
        let c = v.clamp(0.0, (n - 1) as f64);
        // round-half-up
        ((c + 0.5).floor() as usize).min(n - 1)
    };
    let xi = round(x, grid.dims[0]);
    let yi = round(y, grid.dims[1]);
    let zi = round(z, grid.dims[2]);
    data[grid.index(xi, yi, zi)]
}

fn check_box(grid: &Grid, lo: [usize; 3], hi: [usize; 3]) -> Result<()> {
    for a in 0..3 {
        if lo[a] >= hi[a] || hi[a] > grid.dims[a] {
            return Err(Error::Argument(format!(
                "crop box lo {lo:?} hi {hi:?} invalid for dims {:?}",
                grid.dims
            )));
        }
    }
    Ok(())
}

fn cropped_grid(grid: &Grid, lo: [usize; 3], hi: [usize; 3]) -> Grid {
    Grid {
        dims: [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]],
        spacing: grid.spacing,
        origin: [
            grid.origin[0] + lo[0] as f64 * grid.spacing[0],
            grid.origin[1] + lo[1] as f64 * grid.spacing[1],
            grid.origin[2] + lo[2] as f64 * grid.spacing[2],
        ],
    }
}

fn crop_slice<T: Copy>(data: &[T], grid: &Grid, lo: [usize; 3], hi: [usize; 3]) -> Vec<T> {
    let mut out = Vec::with_capacity((hi[0] - lo[0]) * (hi[1] - lo[1]) * (hi[2] - lo[2]));
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            let base = grid.index(lo[0], y, z);
            out.extend_from_slice(&data[base..base + (hi[0] - lo[0])]);
        }
    }
    out
}

/// Crop a scalar volume to the half-open box `[lo, hi)`.
pub fn crop(v: &Volume, lo: [usize; 3], hi: [usize; 3]) -> Result<Volume> {
    check_box(&v.grid, lo, hi)?;
    Ok(Volume {
        grid: cropped_grid(&v.grid, lo, hi),
        data: crop_slice(&v.data, &v.grid, lo, hi),
    })
}

/// Crop a label volume to the half-open box `[lo, hi)`.
pub fn crop_labels(l: &LabelVolume, lo: [usize; 3], hi: [usize; 3]) -> Result<LabelVolume> {
    check_box(&l.grid, lo, hi)?;
    LabelVolume::new(cropped_grid(&l.grid, lo, hi), crop_slice(&l.data, &l.grid, lo, hi))
}

/// Tightest axis-aligned bounding box of a label id, dilated by `margin`
/// voxels and clamped to the grid. Returns `(lo, hi)` with exclusive `hi`.
pub fn label_bounding_box(
    labels: &LabelVolume,
    id: u32,
    margin: usize,
) -> Result<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for (x, y, z) in labels.grid.iter_coords() {
        if labels.at(x, y, z) == id {
            found = true;
            let c = [x, y, z];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    if !found {
        return Err(Error::LabelNotFound(id));
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(labels.grid.dims[a]);
    }
    Ok((lo, hi))
}

/// Bounding box of an arbitrary boolean mask, dilated and clamped.
pub fn mask_bounding_box(
    mask: &[bool],
    grid: &Grid,
    margin: usize,
) -> Result<([usize; 3], [usize; 3])> {
    let mut lo = [usize::MAX; 3];
    let mut hi = [0usize; 3];
    let mut found = false;
    for (x, y, z) in grid.iter_coords() {
        if mask[grid.index(x, y, z)] {
            found = true;
            let c = [x, y, z];
            for a in 0..3 {
                lo[a] = lo[a].min(c[a]);
                hi[a] = hi[a].max(c[a] + 1);
            }
        }
    }
    if !found {
        return Err(Error::Degenerate("empty mask has no bounding box".into()));
    }
    for a in 0..3 {
        lo[a] = lo[a].saturating_sub(margin);
        hi[a] = (hi[a] + margin).min(grid.dims[a]);
    }
    Ok((lo, hi))
}

fn resize_geometry(grid: &Grid, target_dims: [usize; 3]) -> Result<(Grid, [f64; 3])> {
    if target_dims.iter().any(|&d| d < 1) {
        return Err(Error::Argument(format!("target dims must be >= 1, got {target_dims:?}")));
    }
    // Physical extent is preserved: new spacing = old extent / new dims.
    let mut spacing = [0.0; 3];
    let mut scale = [0.0; 3];
    for a in 0..3 {
        spacing[a] = grid.spacing[a] * grid.dims[a] as f64 / target_dims[a] as f64;
        // Map output voxel index to input voxel coordinates (cell-centered).
        scale[a] = grid.dims[a] as f64 / target_dims[a] as f64;
    }
    Ok((
        Grid {
            dims: target_dims,
            spacing,
            origin: grid.origin,
        },
        scale,
    ))
}

#[inline]
fn resize_coord(i: usize, scale: f64) -> f64 {
    // Cell-centered mapping; identity when scale == 1.
    (i as f64 + 0.5) * scale - 0.5
}

/// Resize a scalar volume to `target_dims` by trilinear interpolation.
/// Labels must use [`resize_nearest`] instead.
pub fn resize_trilinear(v: &Volume, target_dims: [usize; 3]) -> Result<Volume> {
    let (grid, scale) = resize_geometry(&v.grid, target_dims)?;
    let mut data = Vec::with_capacity(grid.num_voxels());
    for (x, y, z) in grid.iter_coords() {
        data.push(v.sample_trilinear(
            resize_coord(x, scale[0]),
            resize_coord(y, scale[1]),
            resize_coord(z, scale[2]),
        ) as f32);
    }
    Ok(Volume { grid, data })
}

/// Resize a label volume to `target_dims` by nearest-neighbor sampling.
pub fn resize_nearest(l: &LabelVolume, target_dims: [usize; 3]) -> Result<LabelVolume> {
    let (grid, scale) = resize_geometry(&l.grid, target_dims)?;
    let mut data = Vec::with_capacity(grid.num_voxels());
    for (x, y, z) in grid.iter_coords() {
        data.push(sample_nearest_slice(
            &l.data,
            &l.grid,
            resize_coord(x, scale[0]),
            resize_coord(y, scale[1]),
            resize_coord(z, scale[2]),
        ));
    }
    LabelVolume::new(grid, data)
}

pub(crate) fn require_same_dims(a: &Grid, b: &Grid, what: &str) -> Result<()> {
    a.check_match(b, what)
}
