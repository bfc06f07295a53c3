//! End-to-end hybrid registration driver.
//!
//! Stages: MIND descriptors for both images → whole-volume rigid
//! pre-registration → per-label rigid estimation (seeded at the
//! pre-registration, converted to residuals) → deformable optimization
//! against the residual rigid field → additive fusion → composition with
//! the pre-registration → warp and metrics. The path is fully
//! deterministic.

use std::collections::BTreeMap;
use std::time::Instant;

use crate::deformable::{optimize_deformable, DeformableOptions};
use crate::field::{compose_fields, fuse_hybrid, residual_after, rigid_to_displacement, DisplacementField};
use crate::grid::{require_same_dims, LabelVolume, Volume};
use crate::metrics::{dilated_foreground, hd95_label, mean_dice, neg_jacobian_pct, DiceSummary};
use crate::mind::mind_descriptor_default;
use crate::resample::{warp_descriptors, warp_labels, warp_scalar};
use crate::rigid::{
    build_rigid_field, estimate_rigid_from, global_prereg, select_label, PerLabelRigid,
    RigidEstimateOptions,
};
use crate::{Error, Result};

/// Voxel radius of the label dilation defining the Jacobian-metric
/// foreground.
pub const JACOBIAN_FG_DILATION_VOX: usize = 2;

/// Full configuration of one registration run; echoed into the report.
#[derive(Debug, Clone, Default, serde::Serialize, serde::Deserialize)]
pub struct RegisterOptions {
    pub deformable: DeformableOptions,
    pub rigid: RigidEstimateOptions,
    /// Disable the rigid branch entirely (deformable-only ablation).
    pub skip_rigid: bool,
}

impl RegisterOptions {
    pub fn validate(&self) -> Result<()> {
        self.deformable.validate()?;
        self.rigid.validate()
    }
}

/// Metric block of the report. Label-overlap metrics require moving-image
/// labels and are `None` without them; the Jacobian metric needs only the
/// field and the fixed labels.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ReportMetrics {
    pub neg_jacobian_pct: f64,
    pub dice: Option<DiceSummary>,
    pub hd95_per_label: Option<Vec<(u32, f64)>>,
    pub hd95_mean: Option<f64>,
}

/// Serializable registration report. `timing_ms` is the only
/// non-deterministic part and is kept in its own key so determinism
/// comparisons can exclude it.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct RegistrationReport {
    pub config: RegisterOptions,
    /// Whole-volume pre-registration estimate (absent with `skip_rigid`).
    pub prereg: Option<PerLabelRigid>,
    /// Per-label residual rigid estimates after pre-registration.
    pub per_label_rigids: Vec<PerLabelRigid>,
    pub deformable_loss_trace: Vec<f64>,
    pub deformable_iterations: usize,
    pub metrics: ReportMetrics,
    pub warnings: Vec<String>,
    pub timing_ms: BTreeMap<String, f64>,
}

/// Output of [`register_hybrid`].
#[derive(Debug, Clone)]
pub struct RegistrationResult {
    /// Total displacement field mapping fixed-grid voxels to moving-image
    /// sample positions (pre-registration composed in).
    pub field: DisplacementField,
    /// Deformable component alone, on the fixed grid.
    pub deformable_field: DisplacementField,
    /// Assembled residual rigid field (zero with `skip_rigid`).
    pub rigid_field: DisplacementField,
    pub warped: Volume,
    /// Moving labels warped by the total field, when provided.
    pub warped_labels: Option<LabelVolume>,
    pub report: RegistrationReport,
}

fn stage_err(stage: &str, e: Error) -> Error {
    match e {
        Error::Numerical { iteration, reason, .. } => Error::Numerical {
            stage: stage.to_string(),
            iteration,
            reason,
        },
        other => Error::Numerical {
            stage: stage.to_string(),
            iteration: 0,
            reason: other.to_string(),
        },
    }
}

/// Register `moving` onto `fixed`. `labels_fixed` provides the per-vertebra
/// masks for the rigid branch; `labels_moving`, when given, enables the
/// overlap metrics (Dice, HD95) of the report.
pub fn register_hybrid(
    fixed: &Volume,
    moving: &Volume,
    labels_fixed: &LabelVolume,
    labels_moving: Option<&LabelVolume>,
    opts: &RegisterOptions,
) -> Result<RegistrationResult> {
    opts.validate()?;
    require_same_dims(&fixed.grid, &moving.grid, "register inputs")?;
    require_same_dims(&fixed.grid, &labels_fixed.grid, "register inputs")?;
    if let Some(lm) = labels_moving {
        require_same_dims(&fixed.grid, &lm.grid, "register inputs")?;
    }
    let grid = fixed.grid.clone();
    let mut warnings = Vec::new();
    let mut timing_ms = BTreeMap::new();
    let mut clock = |name: &str, t0: Instant| {
        timing_ms.insert(name.to_string(), t0.elapsed().as_secs_f64() * 1e3);
    };

    // descriptors
    let t0 = Instant::now();
    let d_fixed = mind_descriptor_default(fixed).map_err(|e| stage_err("descriptors", e))?;
    let d_moving = mind_descriptor_default(moving).map_err(|e| stage_err("descriptors", e))?;
    clock("descriptors", t0);

    // whole-volume rigid pre-registration
    let t0 = Instant::now();
    let (prereg, prereg_field) = if opts.skip_rigid {
        (None, DisplacementField::zeros(grid.clone()))
    } else {
        let est = global_prereg(&d_fixed, &d_moving, &opts.rigid)
            .map_err(|e| stage_err("prereg", e))?;
        let f = rigid_to_displacement(&est.params, &grid);
        (Some(est), f)
    };
    clock("prereg", t0);

    // Per-label rigids, estimated on the original (unwarped) moving
    // descriptors seeded at the pre-registration: warping the descriptor
    // volume first would blur it trilinearly and bias the estimates by a
    // fraction of a voxel. The totals are then converted to residuals after
    // the pre-registration, which is the space the fused field lives in.
    let t0 = Instant::now();
    let d_moving_pre = if prereg.is_some() {
        warp_descriptors(&d_moving, &prereg_field).map_err(|e| stage_err("prereg", e))?
    } else {
        d_moving.clone()
    };
    let mut per_label_rigids = Vec::new();
    if !opts.skip_rigid {
        if labels_fixed.label_ids.is_empty() {
            warnings.push("no labels: rigid branch skipped, deformable-only registration".into());
        }
        for &id in &labels_fixed.label_ids {
            let mask = select_label(labels_fixed, id).map_err(|e| stage_err("rigid", e))?;
            let mut est = estimate_rigid_from(
                &d_fixed,
                &d_moving,
                &mask,
                id,
                &opts.rigid,
                prereg.as_ref().map(|p| &p.params),
            )
            .map_err(|e| stage_err("rigid", e))?;
            if let Some(p) = &prereg {
                est.params = residual_after(&p.params, &est.params)
                    .map_err(|e| stage_err("rigid", e))?;
            }
            if est.degenerate {
                warnings.push(format!("label {id}: flat descriptors, identity kept"));
            }
            if est.translation_only {
                warnings.push(format!("label {id}: too small for rotation, translation only"));
            }
            per_label_rigids.push(est);
        }
    }
    let rigid_field = if per_label_rigids.is_empty() {
        DisplacementField::zeros(grid.clone())
    } else {
        build_rigid_field(&per_label_rigids, labels_fixed, &grid)
            .map_err(|e| stage_err("rigid", e))?
    };
    clock("rigid", t0);

    // deformable optimization against the residual rigid field
    let t0 = Instant::now();
    let def = optimize_deformable(&d_fixed, &d_moving_pre, &rigid_field, &opts.deformable)?;
    clock("deformable", t0);

    // fusion and composition with the pre-registration
    let t0 = Instant::now();
    let residual = fuse_hybrid(&def.field, &rigid_field).map_err(|e| stage_err("fuse", e))?;
    let field = if prereg.is_some() {
        compose_fields(&prereg_field, &residual).map_err(|e| stage_err("fuse", e))?
    } else {
        residual
    };
    let warped = warp_scalar(moving, &field).map_err(|e| stage_err("warp", e))?;
    let warped_labels = match labels_moving {
        Some(lm) => Some(warp_labels(lm, &field).map_err(|e| stage_err("warp", e))?),
        None => None,
    };
    clock("warp", t0);

    // metrics
    let t0 = Instant::now();
    let neg_jac = if labels_fixed.label_ids.is_empty() {
        let all = vec![true; grid.num_voxels()];
        neg_jacobian_pct(&field, &all).map_err(|e| stage_err("metrics", e))?
    } else {
        let fg = dilated_foreground(labels_fixed, JACOBIAN_FG_DILATION_VOX);
        neg_jacobian_pct(&field, &fg).map_err(|e| stage_err("metrics", e))?
    };
    let (dice, hd95_per_label, hd95_mean) = match &warped_labels {
        Some(wl) => {
            let summary = mean_dice(labels_fixed, wl).map_err(|e| stage_err("metrics", e))?;
            let mut per = Vec::new();
            for &id in &labels_fixed.label_ids {
                let v = hd95_label(labels_fixed, wl, id).map_err(|e| stage_err("metrics", e))?;
                per.push((id, v));
            }
            let mean = per.iter().map(|(_, v)| v).sum::<f64>() / per.len().max(1) as f64;
            (Some(summary), Some(per), Some(mean))
        }
        None => (None, None, None),
    };
    clock("metrics", t0);

    let report = RegistrationReport {
        config: opts.clone(),
        prereg,
        per_label_rigids,
        deformable_loss_trace: def.loss_trace,
        deformable_iterations: def.iterations_used,
        metrics: ReportMetrics {
            neg_jacobian_pct: neg_jac,
            dice,
            hd95_per_label,
            hd95_mean,
        },
        warnings,
        timing_ms,
    };

    Ok(RegistrationResult {
        field,
        deformable_field: def.field,
        rigid_field,
        warped,
        warped_labels,
        report,
    })
}

/// Plain-text metric table (column order: % |J| < 0, HD95, per-label Dice,
/// Average Dice).
pub fn format_metric_table(m: &ReportMetrics) -> String {
    let mut header = vec!["% |J|<0".to_string()];
    let mut row = vec![format!("{:.3}", m.neg_jacobian_pct)];
    header.push("HD95(mm)".into());
    row.push(match m.hd95_mean {
        Some(v) => format!("{v:.3}"),
        None => "-".into(),
    });
    if let Some(d) = &m.dice {
        for (id, v) in &d.per_label {
            header.push(format!("Dice L{id}"));
            row.push(format!("{v:.4}"));
        }
        header.push("Avg Dice".into());
        row.push(format!("{:.4} ± {:.4}", d.mean, d.std));
    } else {
        header.push("Avg Dice".into());
        row.push("-".into());
    }
    let widths: Vec<usize> = header
        .iter()
        .zip(&row)
        .map(|(h, r)| h.len().max(r.len()))
        .collect();
    let line = |cells: &[String]| {
        cells
            .iter()
            .zip(&widths)
            .map(|(c, w)| format!("{c:>w$}"))
            .collect::<Vec<_>>()
            .join("  ")
    };
    format!("{}\n{}\n", line(&header), line(&row))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::phantom::{gt_hybrid_field, make_phantom, PhantomSpec};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn quick_opts() -> RegisterOptions {
        RegisterOptions {
            deformable: DeformableOptions { max_iters: 60, ..DeformableOptions::default() },
            ..RegisterOptions::default()
        }
    }

    #[test]
    fn identical_inputs_give_perfect_metrics() {
        let grid = Grid::isotropic([24, 24, 24]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data: Vec<f32> = (0..grid.num_voxels()).map(|_| rng.gen()).collect();
        let v = Volume::new(grid.clone(), data).unwrap();
        let mut labels = vec![0u32; grid.num_voxels()];
        for (x, y, z) in grid.iter_coords() {
            if (6..18).contains(&x) && (6..18).contains(&y) && (6..18).contains(&z) {
                labels[grid.index(x, y, z)] = 1;
            }
        }
        let l = LabelVolume::new(grid, labels).unwrap();
        let r = register_hybrid(&v, &v, &l, Some(&l), &quick_opts()).unwrap();
        let m = &r.report.metrics;
        let d = m.dice.as_ref().unwrap();
        assert!((d.mean - 1.0).abs() < 1e-12, "mean Dice {}", d.mean);
        assert_eq!(m.hd95_mean, Some(0.0));
        assert_eq!(m.neg_jacobian_pct, 0.0);
    }

    #[test]
    fn phantom_registration_recovers_alignment() {
        let spec = PhantomSpec { seed: 42, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let r = register_hybrid(
            &p.fixed,
            &p.moving,
            &p.fixed_labels,
            Some(&p.moving_labels),
            &quick_opts(),
        )
        .unwrap();
        let before = crate::metrics::mean_dice(&p.fixed_labels, &p.moving_labels).unwrap();
        let after = r.report.metrics.dice.as_ref().unwrap();
        assert!(
            after.mean > before.mean,
            "Dice did not improve: {} -> {}",
            before.mean,
            after.mean
        );
        assert!(after.mean >= 0.85, "mean Dice {}", after.mean);
    }

    #[test]
    fn rigid_branch_absorbs_rigid_motion() {
        // pure-rigid phantom: the deformable component should stay small
        // inside the vertebra masks
        let spec = PhantomSpec {
            bg_field_amp_vox: 0.0,
            noise_sigma: 0.0,
            seed: 17,
            ..PhantomSpec::default()
        };
        let p = make_phantom(&spec).unwrap();
        let r = register_hybrid(
            &p.fixed,
            &p.moving,
            &p.fixed_labels,
            Some(&p.moving_labels),
            &quick_opts(),
        )
        .unwrap();
        // The deformable cannot be exactly zero in the masks: control points
        // near the box faces also serve the surrounding tissue and their
        // support reaches inside. It must stay well below the rigid motion
        // it would otherwise have to absorb.
        let fg = p.fixed_labels.foreground_mask();
        let def_mag = r.deformable_field.mean_magnitude_in(&fg);
        let rig_mag = r.rigid_field.mean_magnitude_in(&fg);
        assert!(
            def_mag <= 0.35 * rig_mag,
            "deformable magnitude inside masks: {def_mag} vs rigid {rig_mag}"
        );
        assert!(def_mag <= 0.6, "deformable magnitude inside masks: {def_mag}");
    }

    #[test]
    fn skip_rigid_yields_zero_rigid_field_and_no_prereg() {
        let spec = PhantomSpec { seed: 3, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let opts = RegisterOptions { skip_rigid: true, ..quick_opts() };
        let r = register_hybrid(
            &p.fixed,
            &p.moving,
            &p.fixed_labels,
            Some(&p.moving_labels),
            &opts,
        )
        .unwrap();
        assert!(r.report.prereg.is_none());
        assert!(r.report.per_label_rigids.is_empty());
        assert!(r.rigid_field.ux.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn empty_labels_fall_back_to_deformable_only_with_warning() {
        let grid = Grid::isotropic([16, 16, 16]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data: Vec<f32> = (0..grid.num_voxels()).map(|_| rng.gen()).collect();
        let v = Volume::new(grid.clone(), data).unwrap();
        let l = LabelVolume::new(grid, vec![0u32; 4096]).unwrap();
        let r = register_hybrid(&v, &v, &l, None, &quick_opts()).unwrap();
        assert!(r.report.warnings.iter().any(|w| w.contains("no labels")));
        assert!(r.report.per_label_rigids.is_empty());
        assert!(r.report.metrics.dice.is_none());
    }

    #[test]
    fn result_is_deterministic() {
        let spec = PhantomSpec { seed: 9, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let opts = RegisterOptions {
            deformable: DeformableOptions { max_iters: 20, ..DeformableOptions::default() },
            ..RegisterOptions::default()
        };
        let a = register_hybrid(&p.fixed, &p.moving, &p.fixed_labels, Some(&p.moving_labels), &opts)
            .unwrap();
        let b = register_hybrid(&p.fixed, &p.moving, &p.fixed_labels, Some(&p.moving_labels), &opts)
            .unwrap();
        assert_eq!(a.field.ux, b.field.ux);
        assert_eq!(a.field.uy, b.field.uy);
        assert_eq!(a.field.uz, b.field.uz);
        let mut ra = a.report.clone();
        let mut rb = b.report.clone();
        ra.timing_ms.clear();
        rb.timing_ms.clear();
        assert_eq!(
            serde_json::to_string(&ra).unwrap(),
            serde_json::to_string(&rb).unwrap()
        );
    }

    #[test]
    fn warping_with_gt_field_bounds_achievable_dice() {
        // sanity link between phantom ground truth and the metric path used
        // by the pipeline
        let spec = PhantomSpec { seed: 10, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let gt = gt_hybrid_field(&p).unwrap();
        let wl = warp_labels(&p.moving_labels, &gt).unwrap();
        let d = mean_dice(&p.fixed_labels, &wl).unwrap();
        assert!(d.mean >= 0.97);
    }

    #[test]
    fn metric_table_has_expected_columns() {
        let m = ReportMetrics {
            neg_jacobian_pct: 0.0,
            dice: Some(DiceSummary {
                per_label: vec![(1, 0.95), (2, 0.9)],
                mean: 0.925,
                std: 0.025,
                degenerate: false,
            }),
            hd95_per_label: Some(vec![(1, 1.0), (2, 1.2)]),
            hd95_mean: Some(1.1),
        };
        let t = format_metric_table(&m);
        let header = t.lines().next().unwrap();
        assert!(header.contains("|J|<0"));
        assert!(header.contains("HD95"));
        assert!(header.contains("Dice L1"));
        assert!(header.trim_end().ends_with("Avg Dice"));
    }
}
