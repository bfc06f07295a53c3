//! Per-label rigid registration: mask selection, ROI restriction, 6-DOF
//! parameter estimation by deterministic coordinate descent on the masked
//! descriptor similarity, and assembly of the overall masked rigid field.

use crate::field::{DisplacementField, RigidParams};
use crate::grid::{mask_bounding_box, require_same_dims, Grid, LabelVolume};
use crate::mind::DescriptorVolume;
use crate::{Error, Result};

/// Optimizer schedule for the per-label 6-DOF search.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RigidEstimateOptions {
    /// Maximum number of coordinate-descent sweeps.
    pub max_iters: usize,
    /// Initial rotation step, radians.
    pub init_step_rot: f64,
    /// Initial translation step, voxels.
    pub init_step_trans: f64,
    /// Step multiplier applied when a sweep makes no progress; in (0, 1).
    pub shrink_factor: f64,
    /// Terminate once both step sizes fall below this.
    pub tol: f64,
    /// ROI margin around the label bounding box, voxels.
    pub roi_margin: usize,
    /// Half-range of the coarse translation pre-scan, voxels (0 disables).
    pub coarse_range: f64,
}

impl Default for RigidEstimateOptions {
    fn default() -> Self {
        RigidEstimateOptions {
            max_iters: 80,
            init_step_rot: 0.05,
            init_step_trans: 1.0,
            shrink_factor: 0.5,
            tol: 1e-4,
            roi_margin: 6,
            coarse_range: 4.0,
        }
    }
}

impl RigidEstimateOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.shrink_factor > 0.0 && self.shrink_factor < 1.0) {
            return Err(Error::Argument(format!(
                "shrink_factor must be in (0,1), got {}",
                self.shrink_factor
            )));
        }
        if self.tol < 0.0 || self.max_iters == 0 {
            return Err(Error::Argument("tol must be >= 0 and max_iters >= 1".into()));
        }
        Ok(())
    }
}

/// Per-label rigid estimate, in the fixed grid's voxel coordinates.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PerLabelRigid {
    pub label_id: u32,
    pub params: RigidParams,
    pub final_loss: f64,
    pub iterations_used: usize,
    /// Best-so-far loss after each accepted step (monotone non-increasing).
    pub loss_trace: Vec<f64>,
    /// Rotation was unidentifiable (mask under 8 voxels); only the
    /// translation was estimated.
    pub translation_only: bool,
    /// All-flat descriptors; the identity was returned unoptimized.
    pub degenerate: bool,
}

/// Binary mask of one label id: true where `labels == id`.
pub fn select_label(labels: &LabelVolume, id: u32) -> Result<Vec<bool>> {
    if !labels.label_ids.contains(&id) {
        return Err(Error::LabelNotFound(id));
    }
    Ok(labels.data.iter().map(|&v| v == id).collect())
}

/// ROI restriction of a descriptor volume to a mask's bounding box.
#[derive(Debug, Clone)]
pub struct RoiBlock {
    pub descriptors: DescriptorVolume,
    pub mask: Vec<bool>,
    /// Placement of the block's (0,0,0) voxel in the full grid.
    pub offset: [usize; 3],
}

/// Crop a descriptor volume and mask to the mask's bounding box dilated by
/// `margin`, recording the offset of the block in the full grid.
pub fn extract_roi(d: &DescriptorVolume, mask: &[bool], margin: usize) -> Result<RoiBlock> {
    let (lo, hi) = mask_bounding_box(mask, &d.grid, margin)?;
    let full = &d.grid;
    let dims = [hi[0] - lo[0], hi[1] - lo[1], hi[2] - lo[2]];
    let grid = Grid {
        dims,
        spacing: full.spacing,
        origin: [
            full.origin[0] + lo[0] as f64 * full.spacing[0],
            full.origin[1] + lo[1] as f64 * full.spacing[1],
            full.origin[2] + lo[2] as f64 * full.spacing[2],
        ],
    };
    let mut channels = Vec::with_capacity(d.channels.len());
    for ch in &d.channels {
        let mut block = Vec::with_capacity(grid.num_voxels());
        for z in lo[2]..hi[2] {
            for y in lo[1]..hi[1] {
                let base = full.index(lo[0], y, z);
                block.extend_from_slice(&ch[base..base + dims[0]]);
            }
        }
        channels.push(block);
    }
    let mut roi_mask = Vec::with_capacity(grid.num_voxels());
    for z in lo[2]..hi[2] {
        for y in lo[1]..hi[1] {
            for x in lo[0]..hi[0] {
                roi_mask.push(mask[full.index(x, y, z)]);
            }
        }
    }
    Ok(RoiBlock {
        descriptors: DescriptorVolume { grid, channels },
        mask: roi_mask,
        offset: lo,
    })
}

/// Masked descriptor SSD of a rigid candidate, evaluated over the mask
/// voxels of an ROI block. `center` is in block-local voxel coordinates.
fn roi_loss(
    fixed: &DescriptorVolume,
    moving: &DescriptorVolume,
    mask_voxels: &[[usize; 3]],
    center: [f64; 3],
    r: [f64; 3],
    t: [f64; 3],
) -> f64 {
    let m = crate::field::rotvec_to_matrix(r);
    let grid = &fixed.grid;
    let k = fixed.channels.len();
    let mut sum = 0.0f64;
    for &[x, y, z] in mask_voxels {
        let d = [x as f64 - center[0], y as f64 - center[1], z as f64 - center[2]];
        let sx = m[0][0] * d[0] + m[0][1] * d[1] + m[0][2] * d[2] + center[0] + t[0];
        let sy = m[1][0] * d[0] + m[1][1] * d[1] + m[1][2] * d[2] + center[1] + t[1];
        let sz = m[2][0] * d[0] + m[2][1] * d[1] + m[2][2] * d[2] + center[2] + t[2];
        let i = grid.index(x, y, z);
        for c in 0..k {
            let mv = crate::grid::sample_trilinear_slice(&moving.channels[c], grid, sx, sy, sz);
            let diff = mv - fixed.channels[c][i] as f64;
            sum += diff * diff;
        }
    }
    sum / (mask_voxels.len() * k) as f64
}

fn mask_centroid(mask: &[bool], grid: &Grid) -> [f64; 3] {
    let mut acc = [0.0f64; 3];
    let mut count = 0usize;
    for (x, y, z) in grid.iter_coords() {
        if mask[grid.index(x, y, z)] {
            acc[0] += x as f64;
            acc[1] += y as f64;
            acc[2] += z as f64;
            count += 1;
        }
    }
    if count > 0 {
        for a in &mut acc {
            *a /= count as f64;
        }
    }
    acc
}

fn descriptors_are_flat(d: &DescriptorVolume, mask_voxels: &[[usize; 3]]) -> bool {
    for ch in &d.channels {
        let mut lo = f32::INFINITY;
        let mut hi = f32::NEG_INFINITY;
        for &[x, y, z] in mask_voxels {
            let v = ch[d.grid.index(x, y, z)];
            lo = lo.min(v);
            hi = hi.max(v);
        }
        if hi - lo > 1e-6 {
            return false;
        }
    }
    true
}

/// Estimate the 6-DOF rigid transform aligning the moving descriptors to the
/// fixed descriptors within a label mask.
///
/// The rotation center is the mask centroid. The search is a coarse
/// translation scan followed by coordinate descent over the six parameters
/// with a shrink-on-fail step schedule; fully deterministic.
pub fn estimate_rigid(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    mask: &[bool],
    label_id: u32,
    opts: &RigidEstimateOptions,
) -> Result<PerLabelRigid> {
    estimate_rigid_from(d_fixed, d_moving, mask, label_id, opts, None)
}

/// [`estimate_rigid`] seeded at an initial transform (e.g. a whole-volume
/// pre-registration): the coordinate descent starts at `init`'s rotation and
/// its displacement at the mask centroid, and the coarse translation scan is
/// centered there.
pub fn estimate_rigid_from(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    mask: &[bool],
    label_id: u32,
    opts: &RigidEstimateOptions,
    init: Option<&RigidParams>,
) -> Result<PerLabelRigid> {
    opts.validate()?;
    require_same_dims(&d_fixed.grid, &d_moving.grid, "estimate_rigid")?;
    let mask_count = mask.iter().filter(|&&m| m).count();
    if mask_count == 0 {
        return Err(Error::Degenerate(format!("label {label_id}: empty mask")));
    }
    let translation_only = mask_count < 8;

    let roi_fixed = extract_roi(d_fixed, mask, opts.roi_margin)?;
    let roi_moving = extract_roi(d_moving, mask, opts.roi_margin)?;
    let grid = &roi_fixed.descriptors.grid;

    let mut mask_voxels = Vec::with_capacity(mask_count);
    for (x, y, z) in grid.iter_coords() {
        if roi_fixed.mask[grid.index(x, y, z)] {
            mask_voxels.push([x, y, z]);
        }
    }

    let local_center = mask_centroid(&roi_fixed.mask, grid);
    let global_center = [
        local_center[0] + roi_fixed.offset[0] as f64,
        local_center[1] + roi_fixed.offset[1] as f64,
        local_center[2] + roi_fixed.offset[2] as f64,
    ];

    if descriptors_are_flat(&roi_fixed.descriptors, &mask_voxels)
        && descriptors_are_flat(&roi_moving.descriptors, &mask_voxels)
    {
        let identity_loss = roi_loss(
            &roi_fixed.descriptors,
            &roi_moving.descriptors,
            &mask_voxels,
            local_center,
            [0.0; 3],
            [0.0; 3],
        );
        return Ok(PerLabelRigid {
            label_id,
            params: RigidParams::identity(global_center),
            final_loss: identity_loss,
            iterations_used: 0,
            loss_trace: vec![identity_loss],
            translation_only: false,
            degenerate: true,
        });
    }

    let eval = |r: [f64; 3], t: [f64; 3]| {
        roi_loss(
            &roi_fixed.descriptors,
            &roi_moving.descriptors,
            &mask_voxels,
            local_center,
            r,
            t,
        )
    };

    let (mut r, t0) = match init {
        Some(p) => (if translation_only { [0.0; 3] } else { p.r }, {
            let u = p.displacement_at(global_center);
            [u[0], u[1], u[2]]
        }),
        None => ([0.0f64; 3], [0.0f64; 3]),
    };
    let mut t = t0;
    let mut best = eval(r, t);
    let mut trace = vec![best];

    // Coarse translation scan to escape local minima of the descriptor SSD.
    if opts.coarse_range > 0.0 {
        let step = opts.init_step_trans.max(1e-6);
        let n_steps = (opts.coarse_range / step).floor() as i64;
        for iz in -n_steps..=n_steps {
            for iy in -n_steps..=n_steps {
                for ix in -n_steps..=n_steps {
                    if ix == 0 && iy == 0 && iz == 0 {
                        continue;
                    }
                    let cand = [
                        t0[0] + ix as f64 * step,
                        t0[1] + iy as f64 * step,
                        t0[2] + iz as f64 * step,
                    ];
                    let l = eval(r, cand);
                    if l < best {
                        best = l;
                        t = cand;
                        trace.push(best);
                    }
                }
            }
        }
    }

    let mut step_rot = opts.init_step_rot;
    let mut step_trans = opts.init_step_trans;
    let mut sweeps = 0usize;
    let axes: &[usize] = if translation_only { &[3, 4, 5] } else { &[0, 1, 2, 3, 4, 5] };

    while sweeps < opts.max_iters {
        sweeps += 1;
        let mut improved = false;
        for &axis in axes {
            let step = if axis < 3 { step_rot } else { step_trans };
            for sign in [1.0, -1.0] {
                loop {
                    let mut rc = r;
                    let mut tc = t;
                    if axis < 3 {
                        rc[axis] += sign * step;
                    } else {
                        tc[axis - 3] += sign * step;
                    }
                    let l = eval(rc, tc);
                    if l < best {
                        best = l;
                        r = rc;
                        t = tc;
                        trace.push(best);
                        improved = true;
                    } else {
                        break;
                    }
                }
            }
        }
        if best <= 1e-15 {
            break;
        }
        if !improved {
            step_rot *= opts.shrink_factor;
            step_trans *= opts.shrink_factor;
            if step_rot < opts.tol && step_trans < opts.tol {
                break;
            }
        }
    }

    Ok(PerLabelRigid {
        label_id,
        params: RigidParams::new(r, t, global_center)?,
        final_loss: best,
        iterations_used: sweeps,
        loss_trace: trace,
        translation_only,
        degenerate: false,
    })
}

/// Assemble the overall rigid displacement field: zero on background, the
/// rigid displacement of estimate `i` within label `i`.
pub fn build_rigid_field(
    estimates: &[PerLabelRigid],
    labels: &LabelVolume,
    grid: &Grid,
) -> Result<DisplacementField> {
    require_same_dims(&labels.grid, grid, "build_rigid_field")?;
    let mut seen = std::collections::HashSet::new();
    for e in estimates {
        if !seen.insert(e.label_id) {
            return Err(Error::Argument(format!("duplicate label id {} in estimates", e.label_id)));
        }
        if !labels.label_ids.contains(&e.label_id) {
            return Err(Error::LabelNotFound(e.label_id));
        }
    }
    let mut field = DisplacementField::zeros(grid.clone());
    let by_id: std::collections::HashMap<u32, &PerLabelRigid> =
        estimates.iter().map(|e| (e.label_id, e)).collect();
    for (x, y, z) in grid.iter_coords() {
        let i = grid.index(x, y, z);
        let id = labels.data[i];
        if id == 0 {
            continue;
        }
        if let Some(e) = by_id.get(&id) {
            let u = e.params.displacement_at([x as f64, y as f64, z as f64]);
            field.ux[i] = u[0] as f32;
            field.uy[i] = u[1] as f32;
            field.uz[i] = u[2] as f32;
        }
    }
    Ok(field)
}

/// Whole-volume rigid pre-registration: a single estimate over an
/// all-foreground mask.
pub fn global_prereg(
    d_fixed: &DescriptorVolume,
    d_moving: &DescriptorVolume,
    opts: &RigidEstimateOptions,
) -> Result<PerLabelRigid> {
    let mask = vec![true; d_fixed.grid.num_voxels()];
    estimate_rigid(d_fixed, d_moving, &mask, 0, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::rigid_to_displacement;
    use crate::grid::Volume;
    use crate::mind::mind_descriptor_default;
    use crate::resample::warp_descriptors;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn test_labels() -> LabelVolume {
        let grid = Grid::isotropic([12, 12, 12]);
        let mut data = vec![0u32; grid.num_voxels()];
        for (x, y, z) in grid.iter_coords() {
            if (2..6).contains(&x) && (2..6).contains(&y) && (2..6).contains(&z) {
                data[grid.index(x, y, z)] = 1;
            } else if (7..11).contains(&x) && (6..10).contains(&y) && (6..10).contains(&z) {
                data[grid.index(x, y, z)] = 2;
            }
        }
        LabelVolume::new(grid, data).unwrap()
    }

    #[test]
    fn select_label_single_id_matches_foreground() {
        let grid = Grid::isotropic([4, 4, 4]);
        let mut data = vec![0u32; 64];
        data[5] = 3;
        data[20] = 3;
        let l = LabelVolume::new(grid, data).unwrap();
        let mask = select_label(&l, 3).unwrap();
        for (i, &m) in mask.iter().enumerate() {
            assert_eq!(m, l.data[i] != 0);
        }
        assert!(select_label(&l, 9).is_err());
    }

    #[test]
    fn select_label_masks_partition_foreground() {
        let l = test_labels();
        let m1 = select_label(&l, 1).unwrap();
        let m2 = select_label(&l, 2).unwrap();
        let mut fg = 0;
        for i in 0..l.data.len() {
            assert!(!(m1[i] && m2[i]), "masks overlap at {i}");
            if l.data[i] != 0 {
                fg += 1;
                assert!(m1[i] || m2[i]);
            }
        }
        let count = m1.iter().filter(|&&m| m).count() + m2.iter().filter(|&&m| m).count();
        assert_eq!(count, fg);
    }

    fn random_descriptors(grid: &Grid, seed: u64) -> DescriptorVolume {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = grid.num_voxels();
        let channels = (0..6)
            .map(|_| (0..n).map(|_| rng.gen::<f32>()).collect())
            .collect();
        DescriptorVolume {
            grid: grid.clone(),
            channels,
        }
    }

    #[test]
    fn extract_roi_full_mask_is_identity() {
        let grid = Grid::isotropic([5, 5, 5]);
        let d = random_descriptors(&grid, 1);
        let mask = vec![true; grid.num_voxels()];
        let roi = extract_roi(&d, &mask, 0).unwrap();
        assert_eq!(roi.offset, [0, 0, 0]);
        assert_eq!(roi.descriptors.grid.dims, [5, 5, 5]);
        assert_eq!(roi.descriptors.channels, d.channels);
    }

    #[test]
    fn extract_roi_single_voxel_with_margin() {
        let grid = Grid::isotropic([7, 7, 7]);
        let d = random_descriptors(&grid, 2);
        let mut mask = vec![false; grid.num_voxels()];
        mask[grid.index(3, 3, 3)] = true;
        let roi = extract_roi(&d, &mask, 1).unwrap();
        assert_eq!(roi.descriptors.grid.dims, [3, 3, 3]);
        assert_eq!(roi.offset, [2, 2, 2]);
    }

    #[test]
    fn extract_roi_offset_roundtrips_coordinates() {
        let grid = Grid::isotropic([9, 8, 7]);
        let d = random_descriptors(&grid, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let mut mask = vec![false; grid.num_voxels()];
            for _ in 0..12 {
                let x = rng.gen_range(1..8);
                let y = rng.gen_range(1..7);
                let z = rng.gen_range(1..6);
                mask[grid.index(x, y, z)] = true;
            }
            let roi = extract_roi(&d, &mask, rng.gen_range(0..3)).unwrap();
            let rg = &roi.descriptors.grid;
            for (x, y, z) in rg.iter_coords() {
                let gx = x + roi.offset[0];
                let gy = y + roi.offset[1];
                let gz = z + roi.offset[2];
                for c in 0..6 {
                    assert_eq!(
                        roi.descriptors.channels[c][rg.index(x, y, z)],
                        d.channels[c][grid.index(gx, gy, gz)]
                    );
                }
                assert_eq!(roi.mask[rg.index(x, y, z)], mask[grid.index(gx, gy, gz)]);
            }
        }
    }

    #[test]
    fn extract_roi_empty_mask_errors() {
        let grid = Grid::isotropic([4, 4, 4]);
        let d = random_descriptors(&grid, 5);
        let mask = vec![false; grid.num_voxels()];
        assert!(extract_roi(&d, &mask, 0).is_err());
    }

    /// Structured test volume: a bright box with an off-center notch.
    fn notched_volume(grid: &Grid) -> Volume {
        let mut v = Volume::zeros(grid.clone());
        for (x, y, z) in grid.iter_coords() {
            let inside = (4..12).contains(&x) && (4..12).contains(&y) && (4..12).contains(&z);
            let notch = (4..7).contains(&x) && (4..7).contains(&y) && (4..12).contains(&z);
            if inside && !notch {
                v.data[grid.index(x, y, z)] = 1.0;
            } else {
                v.data[grid.index(x, y, z)] = 0.1;
            }
        }
        v
    }

    #[test]
    fn identical_inputs_recover_identity() {
        let grid = Grid::isotropic([16, 16, 16]);
        let v = notched_volume(&grid);
        let d = mind_descriptor_default(&v).unwrap();
        let mut mask = vec![false; grid.num_voxels()];
        for (x, y, z) in grid.iter_coords() {
            if (4..12).contains(&x) && (4..12).contains(&y) && (4..12).contains(&z) {
                mask[grid.index(x, y, z)] = true;
            }
        }
        let est = estimate_rigid(&d, &d, &mask, 1, &RigidEstimateOptions::default()).unwrap();
        assert!(est.final_loss < 1e-8);
        assert!(est.iterations_used <= 2, "used {} sweeps", est.iterations_used);
        assert!(est.params.angle_deg() < 1e-9);
        for a in 0..3 {
            assert!(est.params.t[a].abs() < 1e-9);
        }
    }

    #[test]
    fn translation_is_recovered() {
        let grid = Grid::isotropic([18, 18, 18]);
        let v = notched_volume(&grid);
        let d_fixed = mind_descriptor_default(&v).unwrap();
        // moving descriptors: warp the fixed descriptors by the inverse
        // translation so that the estimator must find t = (2, -1, 0)
        let gt = RigidParams::new([0.0; 3], [2.0, -1.0, 0.0], [8.0; 3]).unwrap();
        let field = rigid_to_displacement(&gt, &grid);
        // build a moving image such that moving(x + u_gt(x)) = fixed(x):
        // warp fixed backward with the negated field evaluated naively works
        // here because the motion is a pure translation.
        let inv = RigidParams::new([0.0; 3], [-2.0, 1.0, 0.0], [8.0; 3]).unwrap();
        let inv_field = rigid_to_displacement(&inv, &grid);
        let d_moving = warp_descriptors(&d_fixed, &inv_field).unwrap();
        let mut mask = vec![false; grid.num_voxels()];
        for (x, y, z) in grid.iter_coords() {
            if (4..12).contains(&x) && (4..12).contains(&y) && (4..12).contains(&z) {
                mask[grid.index(x, y, z)] = true;
            }
        }
        let est = estimate_rigid(&d_fixed, &d_moving, &mask, 1, &RigidEstimateOptions::default())
            .unwrap();
        let u = est.params.displacement_at([8.0, 8.0, 8.0]);
        let gt_u = gt.displacement_at([8.0, 8.0, 8.0]);
        for a in 0..3 {
            assert!(
                (u[a] - gt_u[a]).abs() < 0.5,
                "axis {a}: {} vs {}",
                u[a],
                gt_u[a]
            );
        }
        assert!(est.params.angle_deg() < 1.0);
        let _ = field;
    }

    #[test]
    fn tiny_mask_falls_back_to_translation_only() {
        let grid = Grid::isotropic([10, 10, 10]);
        let v = notched_volume(&Grid::isotropic([10, 10, 10]));
        let d = mind_descriptor_default(&v).unwrap();
        let mut mask = vec![false; grid.num_voxels()];
        for i in 0..4 {
            mask[grid.index(4 + i, 5, 5)] = true;
        }
        let est = estimate_rigid(&d, &d, &mask, 1, &RigidEstimateOptions::default()).unwrap();
        assert!(est.translation_only);
        assert!(est.params.angle_deg() < 1e-12);
    }

    #[test]
    fn flat_descriptors_return_identity_with_flag() {
        let grid = Grid::isotropic([10, 10, 10]);
        let flat = Volume::new(grid.clone(), vec![1.0; grid.num_voxels()]).unwrap();
        let d = mind_descriptor_default(&flat).unwrap();
        let mut mask = vec![false; grid.num_voxels()];
        for (x, y, z) in grid.iter_coords() {
            if x >= 3 && x < 7 && y >= 3 && y < 7 && z >= 3 && z < 7 {
                mask[grid.index(x, y, z)] = true;
            }
        }
        let est = estimate_rigid(&d, &d, &mask, 1, &RigidEstimateOptions::default()).unwrap();
        assert!(est.degenerate);
        assert!(est.params.angle_deg() == 0.0);
    }

    #[test]
    fn loss_trace_is_monotone_non_increasing() {
        let grid = Grid::isotropic([16, 16, 16]);
        let v = notched_volume(&grid);
        let d_fixed = mind_descriptor_default(&v).unwrap();
        let inv = RigidParams::new([0.0, 0.0, -0.1], [-1.0, 0.5, 0.0], [8.0; 3]).unwrap();
        let inv_field = rigid_to_displacement(&inv, &grid);
        let d_moving = warp_descriptors(&d_fixed, &inv_field).unwrap();
        let mask = vec![true; grid.num_voxels()];
        let est = estimate_rigid(&d_fixed, &d_moving, &mask, 0, &RigidEstimateOptions::default())
            .unwrap();
        for w in est.loss_trace.windows(2) {
            assert!(w[1] <= w[0] + 1e-15);
        }
    }

    #[test]
    fn determinism_bit_identical() {
        let grid = Grid::isotropic([14, 14, 14]);
        let v = notched_volume(&Grid::isotropic([14, 14, 14]));
        let d = mind_descriptor_default(&v).unwrap();
        let d2 = random_descriptors(&grid, 77);
        let mask = vec![true; grid.num_voxels()];
        let opts = RigidEstimateOptions::default();
        let a = estimate_rigid(&d, &d2, &mask, 1, &opts).unwrap();
        let b = estimate_rigid(&d, &d2, &mask, 1, &opts).unwrap();
        assert_eq!(a.params, b.params);
        assert_eq!(a.final_loss.to_bits(), b.final_loss.to_bits());
        assert_eq!(a.iterations_used, b.iterations_used);
    }

    #[test]
    fn build_rigid_field_piecewise_constant() {
        let l = test_labels();
        let grid = l.grid.clone();
        let mk = |id, t: [f64; 3]| PerLabelRigid {
            label_id: id,
            params: RigidParams::new([0.0; 3], t, [0.0; 3]).unwrap(),
            final_loss: 0.0,
            iterations_used: 0,
            loss_trace: vec![],
            translation_only: false,
            degenerate: false,
        };
        let field = build_rigid_field(
            &[mk(1, [1.0, 0.0, 0.0]), mk(2, [0.0, 1.0, 0.0])],
            &l,
            &grid,
        )
        .unwrap();
        for (x, y, z) in grid.iter_coords() {
            let i = grid.index(x, y, z);
            match l.data[i] {
                0 => {
                    assert_eq!(field.ux[i], 0.0);
                    assert_eq!(field.uy[i], 0.0);
                }
                1 => {
                    assert_eq!(field.ux[i], 1.0);
                    assert_eq!(field.uy[i], 0.0);
                }
                2 => {
                    assert_eq!(field.ux[i], 0.0);
                    assert_eq!(field.uy[i], 1.0);
                }
                _ => unreachable!(),
            }
        }
    }

    #[test]
    fn build_rigid_field_rejects_duplicates() {
        let l = test_labels();
        let grid = l.grid.clone();
        let e = PerLabelRigid {
            label_id: 1,
            params: RigidParams::identity([0.0; 3]),
            final_loss: 0.0,
            iterations_used: 0,
            loss_trace: vec![],
            translation_only: false,
            degenerate: false,
        };
        assert!(build_rigid_field(&[e.clone(), e], &l, &grid).is_err());
    }

    #[test]
    fn build_rigid_field_matches_per_label_rigid_displacement() {
        let l = test_labels();
        let grid = l.grid.clone();
        let p1 = RigidParams::new([0.0, 0.0, 0.1], [0.5, 0.0, -0.25], [4.0; 3]).unwrap();
        let p2 = RigidParams::new([0.05, 0.0, 0.0], [-1.0, 0.5, 0.0], [8.0; 3]).unwrap();
        let mk = |id, params: &RigidParams| PerLabelRigid {
            label_id: id,
            params: params.clone(),
            final_loss: 0.0,
            iterations_used: 0,
            loss_trace: vec![],
            translation_only: false,
            degenerate: false,
        };
        let field = build_rigid_field(&[mk(1, &p1), mk(2, &p2)], &l, &grid).unwrap();
        let f1 = rigid_to_displacement(&p1, &grid);
        let f2 = rigid_to_displacement(&p2, &grid);
        for (x, y, z) in grid.iter_coords() {
            let i = grid.index(x, y, z);
            let expect = match l.data[i] {
                1 => [f1.ux[i], f1.uy[i], f1.uz[i]],
                2 => [f2.ux[i], f2.uy[i], f2.uz[i]],
                _ => [0.0; 3],
            };
            assert_eq!([field.ux[i], field.uy[i], field.uz[i]], expect);
        }
    }

    #[test]
    fn rigid_field_jacobian_is_one_inside_labels() {
        let l = test_labels();
        let grid = l.grid.clone();
        let p1 = RigidParams::new([0.0, 0.05, 0.08], [1.0, -0.5, 0.0], [4.0; 3]).unwrap();
        let est = PerLabelRigid {
            label_id: 1,
            params: p1,
            final_loss: 0.0,
            iterations_used: 0,
            loss_trace: vec![],
            translation_only: false,
            degenerate: false,
        };
        let field = build_rigid_field(&[est], &l, &grid).unwrap();
        let det = crate::field::jacobian_determinant(&field).unwrap();
        // voxels whose full central-difference stencil lies inside label 1
        for (x, y, z) in grid.iter_coords() {
            let interior = [x, y, z].iter().all(|&c| c >= 1)
                && x + 1 < grid.dims[0]
                && y + 1 < grid.dims[1]
                && z + 1 < grid.dims[2];
            if !interior {
                continue;
            }
            let mut stencil_inside = l.data[grid.index(x, y, z)] == 1;
            for (dx, dy, dz) in [
                (-1i64, 0i64, 0i64),
                (1, 0, 0),
                (0, -1, 0),
                (0, 1, 0),
                (0, 0, -1),
                (0, 0, 1),
            ] {
                let nx = (x as i64 + dx) as usize;
                let ny = (y as i64 + dy) as usize;
                let nz = (z as i64 + dz) as usize;
                if l.data[grid.index(nx, ny, nz)] != 1 {
                    stencil_inside = false;
                }
            }
            if stencil_inside {
                assert!((det.at(x, y, z) as f64 - 1.0).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn rigid_field_zero_outside_label_union() {
        let l = test_labels();
        let grid = l.grid.clone();
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..10 {
            let mut mk = |id| PerLabelRigid {
                label_id: id,
                params: RigidParams::new(
                    [rng.gen_range(-0.1..0.1), 0.0, rng.gen_range(-0.1..0.1)],
                    [
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                    ],
                    [rng.gen_range(2.0..9.0); 3],
                )
                .unwrap(),
                final_loss: 0.0,
                iterations_used: 0,
                loss_trace: vec![],
                translation_only: false,
                degenerate: false,
            };
            let e1 = mk(1);
            let e2 = mk(2);
            let field = build_rigid_field(&[e1, e2], &l, &grid).unwrap();
            for i in 0..l.data.len() {
                if l.data[i] == 0 {
                    assert_eq!(field.ux[i], 0.0);
                    assert_eq!(field.uy[i], 0.0);
                    assert_eq!(field.uz[i], 0.0);
                }
            }
        }
    }
}
