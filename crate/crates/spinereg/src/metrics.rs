//! Evaluation suite: per-label Dice, 95th-percentile symmetric boundary
//! distance (HD95, in mm), and the percentage of foreground voxels with a
//! negative Jacobian determinant.

use crate::field::{jacobian_determinant, DisplacementField};
use crate::grid::{require_same_dims, Grid, LabelVolume};
use crate::{Error, Result};

/// Dice coefficient of one label id between two label volumes.
/// Both sets empty scores 1.0 (flagged degenerate by [`mean_dice`]); exactly
/// one empty scores 0.0.
pub fn dice(fixed_labels: &LabelVolume, warped_labels: &LabelVolume, id: u32) -> Result<f64> {
    require_same_dims(&fixed_labels.grid, &warped_labels.grid, "dice")?;
    let mut a = 0usize;
    let mut b = 0usize;
    let mut both = 0usize;
    for i in 0..fixed_labels.data.len() {
        let in_a = fixed_labels.data[i] == id;
        let in_b = warped_labels.data[i] == id;
        a += in_a as usize;
        b += in_b as usize;
        both += (in_a && in_b) as usize;
    }
    if a == 0 && b == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (a + b) as f64)
}

/// Per-label Dice summary over the ids shared by both volumes.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DiceSummary {
    pub per_label: Vec<(u32, f64)>,
    pub mean: f64,
    /// Population standard deviation over labels.
    pub std: f64,
    /// True when any label was empty in both volumes (its 1.0 is a
    /// convention, not a measurement).
    pub degenerate: bool,
}

pub fn mean_dice(fixed_labels: &LabelVolume, warped_labels: &LabelVolume) -> Result<DiceSummary> {
    require_same_dims(&fixed_labels.grid, &warped_labels.grid, "mean_dice")?;
    let mut ids: Vec<u32> = fixed_labels
        .label_ids
        .iter()
        .chain(warped_labels.label_ids.iter())
        .copied()
        .collect();
    ids.sort_unstable();
    ids.dedup();
    if ids.is_empty() {
        return Err(Error::LabelNotFound(0));
    }
    let mut per_label = Vec::with_capacity(ids.len());
    let mut degenerate = false;
    for id in ids {
        let d = dice(fixed_labels, warped_labels, id)?;
        if fixed_labels.count(id) == 0 && warped_labels.count(id) == 0 {
            degenerate = true;
        }
        per_label.push((id, d));
    }
    let n = per_label.len() as f64;
    let mean = per_label.iter().map(|(_, d)| d).sum::<f64>() / n;
    let var = per_label.iter().map(|(_, d)| (d - mean) * (d - mean)).sum::<f64>() / n;
    Ok(DiceSummary {
        per_label,
        mean,
        std: var.sqrt(),
        degenerate,
    })
}

/// Boundary voxels of a binary mask: mask voxels with at least one
/// six-neighbor outside the mask (grid borders count as outside-adjacent
/// only through in-grid neighbors).
fn boundary_voxels(mask: &[bool], grid: &Grid) -> Vec<[usize; 3]> {
    let mut out = Vec::new();
    for (x, y, z) in grid.iter_coords() {
        if !mask[grid.index(x, y, z)] {
            continue;
        }
        let mut is_boundary = false;
        for (dx, dy, dz) in [
            (-1i64, 0i64, 0i64),
            (1, 0, 0),
            (0, -1, 0),
            (0, 1, 0),
            (0, 0, -1),
            (0, 0, 1),
        ] {
            let nx = x as i64 + dx;
            let ny = y as i64 + dy;
            let nz = z as i64 + dz;
            if nx < 0
                || ny < 0
                || nz < 0
                || nx >= grid.dims[0] as i64
                || ny >= grid.dims[1] as i64
                || nz >= grid.dims[2] as i64
            {
                is_boundary = true;
                break;
            }
            if !mask[grid.index(nx as usize, ny as usize, nz as usize)] {
                is_boundary = true;
                break;
            }
        }
        if is_boundary {
            out.push([x, y, z]);
        }
    }
    out
}

fn directed_distances(from: &[[usize; 3]], to: &[[usize; 3]], spacing: [f64; 3]) -> Vec<f64> {
    from.iter()
        .map(|&a| {
            let mut best = f64::INFINITY;
            for &b in to {
                let dx = (a[0] as f64 - b[0] as f64) * spacing[0];
                let dy = (a[1] as f64 - b[1] as f64) * spacing[1];
                let dz = (a[2] as f64 - b[2] as f64) * spacing[2];
                let d2 = dx * dx + dy * dy + dz * dz;
                if d2 < best {
                    best = d2;
                }
            }
            best.sqrt()
        })
        .collect()
}

/// Symmetric 95th-percentile boundary distance in millimeters.
///
/// Convention: nearest-rank percentile over the pooled multiset of directed
/// boundary distances in both directions.
pub fn hd95(mask_a: &[bool], mask_b: &[bool], grid: &Grid, spacing: [f64; 3]) -> Result<f64> {
    let ba = boundary_voxels(mask_a, grid);
    let bb = boundary_voxels(mask_b, grid);
    if ba.is_empty() || bb.is_empty() {
        return Err(Error::Degenerate("hd95 requires two nonempty masks".into()));
    }
    let mut pooled = directed_distances(&ba, &bb, spacing);
    pooled.extend(directed_distances(&bb, &ba, spacing));
    pooled.sort_by(|a, b| a.partial_cmp(b).unwrap());
    // nearest-rank: ceil(0.95 n), 1-based
    let n = pooled.len();
    let rank = ((0.95 * n as f64).ceil() as usize).clamp(1, n);
    Ok(pooled[rank - 1])
}

/// HD95 between one label id in two label volumes, using the grid spacing.
pub fn hd95_label(fixed_labels: &LabelVolume, warped_labels: &LabelVolume, id: u32) -> Result<f64> {
    require_same_dims(&fixed_labels.grid, &warped_labels.grid, "hd95")?;
    let a: Vec<bool> = fixed_labels.data.iter().map(|&v| v == id).collect();
    let b: Vec<bool> = warped_labels.data.iter().map(|&v| v == id).collect();
    hd95(&a, &b, &fixed_labels.grid, fixed_labels.grid.spacing)
}

/// Percentage of foreground voxels where the Jacobian determinant of the
/// field is negative.
pub fn neg_jacobian_pct(field: &DisplacementField, fg_mask: &[bool]) -> Result<f64> {
    let det = jacobian_determinant(field)?;
    if fg_mask.len() != det.data.len() {
        return Err(Error::GridMismatch("fg_mask length".into()));
    }
    let mut fg = 0usize;
    let mut neg = 0usize;
    for i in 0..det.data.len() {
        if fg_mask[i] {
            fg += 1;
            if det.data[i] < 0.0 {
                neg += 1;
            }
        }
    }
    if fg == 0 {
        return Err(Error::Degenerate("empty foreground for jacobian metric".into()));
    }
    Ok(100.0 * neg as f64 / fg as f64)
}

/// Foreground for the Jacobian metric: union of all nonzero labels dilated
/// by `radius` voxels (Chebyshev ball).
pub fn dilated_foreground(labels: &LabelVolume, radius: usize) -> Vec<bool> {
    let grid = &labels.grid;
    let mut out = vec![false; grid.num_voxels()];
    let r = radius as i64;
    for (x, y, z) in grid.iter_coords() {
        if labels.data[grid.index(x, y, z)] == 0 {
            continue;
        }
        for dz in -r..=r {
            for dy in -r..=r {
                for dx in -r..=r {
                    let nx = x as i64 + dx;
                    let ny = y as i64 + dy;
                    let nz = z as i64 + dz;
                    if nx >= 0
                        && ny >= 0
                        && nz >= 0
                        && nx < grid.dims[0] as i64
                        && ny < grid.dims[1] as i64
                        && nz < grid.dims[2] as i64
                    {
                        out[grid.index(nx as usize, ny as usize, nz as usize)] = true;
                    }
                }
            }
        }
    }
    out
}
