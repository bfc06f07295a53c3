//! Spatial transformer: warp scalar, label, and multi-channel volumes by a
//! displacement field. `output(x) = input(x + u(x))`, trilinear for scalars,
//! nearest-neighbor for labels, clamped at borders.

use rayon::prelude::*;

use crate::field::DisplacementField;
use crate::grid::{
    require_same_dims, sample_nearest_slice, sample_trilinear_slice, Grid, LabelVolume, Volume,
};
use crate::mind::DescriptorVolume;
use crate::{Error, Result};

fn check_finite(f: &DisplacementField) -> Result<()> {
    for ch in [&f.ux, &f.uy, &f.uz] {
        if ch.iter().any(|v| !v.is_finite()) {
            return Err(Error::Degenerate("displacement field contains non-finite values".into()));
        }
    }
    Ok(())
}

fn warped_channel(data: &[f32], src_grid: &Grid, f: &DisplacementField) -> Vec<f32> {
    let grid = &f.grid;
    let [nx, ny, _] = grid.dims;
    let mut out = vec![0.0f32; grid.num_voxels()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = grid.index(x, y, z);
                    slab[x + nx * y] = sample_trilinear_slice(
                        data,
                        src_grid,
                        x as f64 + f.ux[i] as f64,
                        y as f64 + f.uy[i] as f64,
                        z as f64 + f.uz[i] as f64,
                    ) as f32;
                }
            }
        });
    out
}

/// Warp a scalar volume by a displacement field (trilinear, clamped).
pub fn warp_scalar(v: &Volume, f: &DisplacementField) -> Result<Volume> {
    require_same_dims(&v.grid, &f.grid, "warp_scalar")?;
    check_finite(f)?;
    Ok(Volume {
        grid: v.grid.clone(),
        data: warped_channel(&v.data, &v.grid, f),
    })
}

/// Warp a label volume by a displacement field (nearest-neighbor, clamped).
/// Output ids are a subset of the input ids.
pub fn warp_labels(l: &LabelVolume, f: &DisplacementField) -> Result<LabelVolume> {
    require_same_dims(&l.grid, &f.grid, "warp_labels")?;
    check_finite(f)?;
    let grid = &l.grid;
    let [nx, ny, _] = grid.dims;
    let mut out = vec![0u32; grid.num_voxels()];
    out.par_chunks_mut(nx * ny)
        .enumerate()
        .for_each(|(z, slab)| {
            for y in 0..ny {
                for x in 0..nx {
                    let i = grid.index(x, y, z);
                    slab[x + nx * y] = sample_nearest_slice(
                        &l.data,
                        grid,
                        x as f64 + f.ux[i] as f64,
                        y as f64 + f.uy[i] as f64,
                        z as f64 + f.uz[i] as f64,
                    );
                }
            }
        });
    LabelVolume::new(grid.clone(), out)
}

/// Warp every channel of a descriptor volume by the same displacement field.
/// Used to warp precomputed moving-image descriptors during optimization.
pub fn warp_descriptors(d: &DescriptorVolume, f: &DisplacementField) -> Result<DescriptorVolume> {
    require_same_dims(&d.grid, &f.grid, "warp_descriptors")?;
    check_finite(f)?;
    let channels = d
        .channels
        .iter()
        .map(|ch| warped_channel(ch, &d.grid, f))
        .collect();
    Ok(DescriptorVolume {
        grid: d.grid.clone(),
        channels,
    })
}
