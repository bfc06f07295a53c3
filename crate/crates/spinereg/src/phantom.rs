//! Synthetic articulated phantom with exact ground truth.
//!
//! The scene — rigid "vertebra" blocks in a smooth soft-tissue background —
//! is defined analytically in moving space. The moving image samples the
//! scene directly; the fixed image samples it at `x + u_gt(x)`, where the
//! ground-truth field is the additive fusion of per-vertebra rigid
//! displacements and a sinusoidal background field. Because the fixed image
//! is evaluated analytically (no interpolation and no field inversion),
//! warping the clean moving image by the ground-truth field reproduces the
//! fixed image up to interpolation error, and the recorded field is exact.
//!
//! Pseudo-multimodality comes from intensity remapping: the fixed image gets
//! an affine map, the moving image a gently nonlinear monotone map, each with
//! independent Gaussian noise.

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::field::{DisplacementField, RigidParams};
use crate::grid::{Grid, LabelVolume, Volume};
use crate::rigid::{build_rigid_field, PerLabelRigid};
use crate::{Error, Result};

/// Quadratic coefficient of the moving image's monotone intensity remap
/// `v + MOVING_REMAP_CURVATURE * v^2`. Kept gentle so descriptor agreement
/// across the simulated modalities stays within the documented 1e-3 bound.
pub const MOVING_REMAP_CURVATURE: f64 = 0.0015;

/// Affine intensity map applied to the fixed image (scale, offset).
pub const FIXED_REMAP: (f64, f64) = (0.9, 0.07);

/// Width of the band over which the background field ramps from zero (at
/// vertebra surfaces) to full amplitude, in voxels.
const BLEND_BAND_VOX: f64 = 3.0;

/// Phantom generation parameters.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct PhantomSpec {
    pub dims: [usize; 3],
    /// Number of vertebra blocks, stacked along z. Label ids are 1..=n.
    pub n_vertebrae: usize,
    /// Extent of each block in voxels.
    pub vertebra_size: [usize; 3],
    /// Gap between consecutive blocks along z, in voxels.
    pub gap: usize,
    /// Per-vertebra rotation magnitude bound in degrees (must be <= 15).
    pub max_rot_deg: f64,
    /// Per-vertebra translation bound per component, in voxels.
    pub max_trans_vox: f64,
    /// Amplitude of the sinusoidal background field, in voxels.
    pub bg_field_amp_vox: f64,
    /// Period of the sinusoidal background field, in voxels.
    pub bg_field_period_vox: f64,
    /// Standard deviation of the per-modality additive Gaussian noise.
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for PhantomSpec {
    fn default() -> Self {
        PhantomSpec {
            dims: [64, 64, 48],
            n_vertebrae: 4,
            vertebra_size: [22, 22, 7],
            gap: 4,
            max_rot_deg: 6.0,
            max_trans_vox: 1.5,
            bg_field_amp_vox: 0.5,
            bg_field_period_vox: 32.0,
            noise_sigma: 0.005,
            seed: 0,
        }
    }
}

/// Axis-aligned box in continuous voxel coordinates.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Box3 {
    pub center: [f64; 3],
    pub half: [f64; 3],
}

impl Box3 {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|a| (p[a] - self.center[a]).abs() <= self.half[a])
    }

    /// Euclidean distance from `p` to the box (0 inside).
    fn distance(&self, p: [f64; 3]) -> f64 {
        let mut d2 = 0.0;
        for a in 0..3 {
            let ex = (p[a] - self.center[a]).abs() - self.half[a];
            if ex > 0.0 {
                d2 += ex * ex;
            }
        }
        d2.sqrt()
    }
}

impl PhantomSpec {
    pub fn validate(&self) -> Result<()> {
        if self.dims.iter().any(|&d| d < 8) {
            return Err(Error::Argument(format!("dims {:?} too small (need >= 8 per axis)", self.dims)));
        }
        if self.n_vertebrae == 0 {
            return Err(Error::Argument("n_vertebrae must be >= 1".into()));
        }
        if self.max_rot_deg < 0.0 || self.max_rot_deg > 15.0 {
            return Err(Error::Argument(format!(
                "max_rot_deg {} outside [0, 15]",
                self.max_rot_deg
            )));
        }
        if self.max_trans_vox < 0.0
            || self.bg_field_amp_vox < 0.0
            || self.noise_sigma < 0.0
            || self.bg_field_period_vox <= 0.0
        {
            return Err(Error::Argument("motion/noise parameters must be non-negative".into()));
        }
        let [sx, sy, sz] = self.vertebra_size;
        if sx == 0 || sy == 0 || sz == 0 {
            return Err(Error::Argument("vertebra_size must be positive".into()));
        }
        let stack = self.n_vertebrae * sz + (self.n_vertebrae - 1) * self.gap;
        let margin = self.max_trans_vox.ceil() as usize + 1;
        if sx + 2 * margin > self.dims[0]
            || sy + 2 * margin > self.dims[1]
            || stack + 2 * margin > self.dims[2]
        {
            return Err(Error::Argument(format!(
                "{} vertebrae of size {:?} with gap {} do not fit in dims {:?} with {}-voxel motion margin",
                self.n_vertebrae, self.vertebra_size, self.gap, self.dims, margin
            )));
        }
        Ok(())
    }

    /// Vertebra block extents in fixed-image voxel coordinates. Box faces
    /// are snapped to the half-integer lattice (maximum distance from voxel
    /// centers): nearest-neighbor rounding during a label warp has error
    /// below one half voxel, so a face on this lattice never flips a whole
    /// voxel layer under translation — the discretization loss of the
    /// ground-truth round trip stays small.
    pub(crate) fn boxes(&self) -> Vec<Box3> {
        let [sx, sy, sz] = self.vertebra_size;
        let stack = self.n_vertebrae * sz + (self.n_vertebrae - 1) * self.gap;
        let z0 = (self.dims[2] as f64 - stack as f64) / 2.0;
        let snap = |nominal_center: f64, half: f64| {
            (nominal_center - half).floor() + 0.5 + half
        };
        (0..self.n_vertebrae)
            .map(|i| {
                let half = [sx as f64 / 2.0, sy as f64 / 2.0, sz as f64 / 2.0];
                Box3 {
                    center: [
                        snap(self.dims[0] as f64 / 2.0, half[0]),
                        snap(self.dims[1] as f64 / 2.0, half[1]),
                        snap(
                            z0 + i as f64 * (sz + self.gap) as f64 + sz as f64 / 2.0,
                            half[2],
                        ),
                    ],
                    half,
                }
            })
            .collect()
    }
}

/// A generated phantom pair with exact ground truth.
#[derive(Debug, Clone)]
pub struct PhantomPair {
    pub spec: PhantomSpec,
    pub fixed: Volume,
    pub moving: Volume,
    pub fixed_labels: LabelVolume,
    pub moving_labels: LabelVolume,
    /// Ground-truth rigid motion of vertebra `i` (label id `i + 1`).
    pub gt_rigids: Vec<RigidParams>,
    /// Ground-truth smooth background field (zero on vertebra interiors).
    pub gt_bg_field: DisplacementField,
}

/// Scene intensity at a moving-space point, before intensity remapping.
/// Vertebra texture is expressed in shape-attached coordinates so it moves
/// rigidly with each block.
fn scene_value(p: [f64; 3], boxes: &[Box3], rigids: &[RigidParams]) -> f64 {
    for (b, rp) in boxes.iter().zip(rigids) {
        let q = inverse_rigid(rp, p);
        if b.contains(q) {
            let mut v = 0.78
                + 0.12
                    * (1.1 * (q[0] - b.center[0])).sin()
                    * (0.9 * (q[1] - b.center[1])).cos()
                    * (0.7 * (q[2] - b.center[2])).cos();
            // corner notch: breaks the box's rotational symmetry
            if q[0] - b.center[0] > b.half[0] / 2.0 && q[1] - b.center[1] > b.half[1] / 2.0 {
                v -= 0.30;
            }
            return v;
        }
    }
    // smooth low-intensity soft tissue
    0.22 + 0.10 * (p[0] * 0.33).sin() * (p[1] * 0.27).sin() + 0.05 * (p[2] * 0.48).sin()
}

/// Apply the inverse of a rigid transform: `R^T (p - center - t) + center`.
fn inverse_rigid(rp: &RigidParams, p: [f64; 3]) -> [f64; 3] {
    let m = rp.matrix();
    let d = [
        p[0] - rp.center[0] - rp.t[0],
        p[1] - rp.center[1] - rp.t[1],
        p[2] - rp.center[2] - rp.t[2],
    ];
    [
        m[0][0] * d[0] + m[1][0] * d[1] + m[2][0] * d[2] + rp.center[0],
        m[0][1] * d[0] + m[1][1] * d[1] + m[2][1] * d[2] + rp.center[1],
        m[0][2] * d[0] + m[1][2] * d[1] + m[2][2] * d[2] + rp.center[2],
    ]
}

/// Background displacement at a fixed-space point.
///
/// Far from the blocks this is a separable sinusoid. Within a 3-voxel band
/// around each block it blends into that block's rigid displacement, so the
/// fused ground-truth field is continuous across the block surfaces (a ramp
/// to zero instead would leave a non-injective shell of duplicated tissue
/// around every moved block). On block interiors it is exactly zero — motion
/// there is carried by the rigid component alone.
fn bg_displacement(spec: &PhantomSpec, boxes: &[Box3], rigids: &[RigidParams], p: [f64; 3]) -> [f64; 3] {
    let mut s = 0.0f64;
    let mut u = [0.0f64; 3];
    for (b, rp) in boxes.iter().zip(rigids) {
        let d = b.distance(p);
        if d == 0.0 {
            return [0.0; 3];
        }
        let w = (1.0 - d / BLEND_BAND_VOX).clamp(0.0, 1.0);
        if w > 0.0 {
            let ur = rp.displacement_at(p);
            for a in 0..3 {
                u[a] += w * ur[a];
            }
            s += w;
        }
    }
    if s > 1.0 {
        for a in u.iter_mut() {
            *a /= s;
        }
        return u;
    }
    let k = std::f64::consts::TAU / spec.bg_field_period_vox;
    let amp = spec.bg_field_amp_vox * (1.0 - s);
    u[0] += amp * (k * p[0]).sin() * (k * p[1]).cos();
    u[1] += amp * (k * p[1]).sin() * (k * p[2]).cos();
    u[2] += amp * (k * p[2]).sin() * (k * p[0]).cos();
    u
}

/// Monotone nonlinear intensity remap applied to the moving image.
pub fn moving_remap(v: f64) -> f64 {
    v + MOVING_REMAP_CURVATURE * v * v
}

/// Generate a phantom pair. Deterministic given the seed.
pub fn make_phantom(spec: &PhantomSpec) -> Result<PhantomPair> {
    spec.validate()?;
    let grid = Grid::isotropic(spec.dims);
    let boxes = spec.boxes();

    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let deg = std::f64::consts::PI / 180.0;
    let gt_rigids: Vec<RigidParams> = boxes
        .iter()
        .map(|b| {
            // uniform axis on the sphere, angle uniform in [-max, max]
            let axis = loop {
                let v = [
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                    rng.gen_range(-1.0..1.0f64),
                ];
                let n = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
                if n > 1e-3 && n <= 1.0 {
                    break [v[0] / n, v[1] / n, v[2] / n];
                }
            };
            let angle = rng.gen_range(-spec.max_rot_deg..=spec.max_rot_deg) * deg;
            let t = [
                rng.gen_range(-spec.max_trans_vox..=spec.max_trans_vox),
                rng.gen_range(-spec.max_trans_vox..=spec.max_trans_vox),
                rng.gen_range(-spec.max_trans_vox..=spec.max_trans_vox),
            ];
            RigidParams::new(
                [axis[0] * angle, axis[1] * angle, axis[2] * angle],
                t,
                b.center,
            )
        })
        .collect::<Result<_>>()?;

    // fixed-space labels: the blocks themselves (rigid motion is zero-based
    // at the block, so the fixed-space support is the untransformed box)
    let mut fixed_label_data = vec![0u32; grid.num_voxels()];
    for (x, y, z) in grid.iter_coords() {
        let p = [x as f64, y as f64, z as f64];
        for (i, b) in boxes.iter().enumerate() {
            if b.contains(p) {
                fixed_label_data[grid.index(x, y, z)] = i as u32 + 1;
                break;
            }
        }
    }
    let fixed_labels = LabelVolume::new(grid.clone(), fixed_label_data)?;

    // moving-space labels: the rigidly transported blocks
    let mut moving_label_data = vec![0u32; grid.num_voxels()];
    for (x, y, z) in grid.iter_coords() {
        let p = [x as f64, y as f64, z as f64];
        for (i, (b, rp)) in boxes.iter().zip(&gt_rigids).enumerate() {
            if b.contains(inverse_rigid(rp, p)) {
                moving_label_data[grid.index(x, y, z)] = i as u32 + 1;
                break;
            }
        }
    }
    let moving_labels = LabelVolume::new(grid.clone(), moving_label_data)?;

    // background field, recorded exactly on the fixed grid
    let n = grid.num_voxels();
    let mut bg = DisplacementField::zeros(grid.clone());
    for (x, y, z) in grid.iter_coords() {
        let i = grid.index(x, y, z);
        let u = bg_displacement(spec, &boxes, &gt_rigids, [x as f64, y as f64, z as f64]);
        bg.ux[i] = u[0] as f32;
        bg.uy[i] = u[1] as f32;
        bg.uz[i] = u[2] as f32;
    }

    // images: moving samples the scene at x; fixed samples it at x + u_gt(x)
    let mut fixed_data = vec![0.0f32; n];
    let mut moving_data = vec![0.0f32; n];
    for (x, y, z) in grid.iter_coords() {
        let i = grid.index(x, y, z);
        let p = [x as f64, y as f64, z as f64];
        let m = scene_value(p, &boxes, &gt_rigids);
        moving_data[i] = moving_remap(m) as f32;
        let id = fixed_labels.data[i];
        let u = if id > 0 {
            gt_rigids[id as usize - 1].displacement_at(p)
        } else {
            bg_displacement(spec, &boxes, &gt_rigids, p)
        };
        let f = scene_value([p[0] + u[0], p[1] + u[1], p[2] + u[2]], &boxes, &gt_rigids);
        fixed_data[i] = (FIXED_REMAP.0 * f + FIXED_REMAP.1) as f32;
    }
    // independent noise per modality, drawn after the geometry so motion
    // sampling is unaffected by noise settings
    if spec.noise_sigma > 0.0 {
        let noise = |data: &mut [f32], salt: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(spec.seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ salt);
            let d = rand::distributions::Uniform::new(0.0f64, 1.0f64);
            for v in data.iter_mut() {
                // Box-Muller from two uniforms
                let u1: f64 = 1.0 - r.sample(d);
                let u2: f64 = r.sample(d);
                let g = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
                *v += (spec.noise_sigma * g) as f32;
            }
        };
        noise(&mut fixed_data, 1);
        noise(&mut moving_data, 2);
    }

    Ok(PhantomPair {
        spec: spec.clone(),
        fixed: Volume::new(grid.clone(), fixed_data)?,
        moving: Volume::new(grid, moving_data)?,
        fixed_labels,
        moving_labels,
        gt_rigids,
        gt_bg_field: bg,
    })
}

/// Assemble the full ground-truth field: per-label rigid displacements fused
/// additively with the background field.
pub fn gt_hybrid_field(p: &PhantomPair) -> Result<DisplacementField> {
    let estimates: Vec<PerLabelRigid> = p
        .gt_rigids
        .iter()
        .enumerate()
        .map(|(i, rp)| PerLabelRigid {
            label_id: i as u32 + 1,
            params: rp.clone(),
            final_loss: 0.0,
            iterations_used: 0,
            loss_trace: Vec::new(),
            translation_only: false,
            degenerate: false,
        })
        .collect();
    let rigid_field = build_rigid_field(&estimates, &p.fixed_labels, &p.fixed.grid)?;
    crate::field::fuse_hybrid(&p.gt_bg_field, &rigid_field)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mind::mind_descriptor_default;

    fn still_spec() -> PhantomSpec {
        PhantomSpec {
            max_rot_deg: 0.0,
            max_trans_vox: 0.0,
            bg_field_amp_vox: 0.0,
            noise_sigma: 0.0,
            ..PhantomSpec::default()
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let spec = PhantomSpec { seed: 7, ..PhantomSpec::default() };
        let a = make_phantom(&spec).unwrap();
        let b = make_phantom(&spec).unwrap();
        assert_eq!(a.fixed.data, b.fixed.data);
        assert_eq!(a.moving.data, b.moving.data);
        assert_eq!(a.fixed_labels.data, b.fixed_labels.data);
        assert_eq!(a.moving_labels.data, b.moving_labels.data);
        assert_eq!(a.gt_bg_field.ux, b.gt_bg_field.ux);
    }

    #[test]
    fn different_seeds_differ() {
        let a = make_phantom(&PhantomSpec { seed: 1, ..PhantomSpec::default() }).unwrap();
        let b = make_phantom(&PhantomSpec { seed: 2, ..PhantomSpec::default() }).unwrap();
        assert_ne!(a.moving.data, b.moving.data);
    }

    #[test]
    fn labels_have_expected_ids_and_size() {
        let p = make_phantom(&PhantomSpec::default()).unwrap();
        let ids: Vec<u32> = (1..=4).collect();
        assert_eq!(p.fixed_labels.label_ids, ids);
        assert_eq!(p.moving_labels.label_ids, ids);
        for id in ids {
            assert!(p.fixed_labels.count(id) >= 200, "label {id} too small");
            assert!(p.moving_labels.count(id) >= 200);
        }
    }

    #[test]
    fn still_phantom_differs_only_by_monotone_remap() {
        let p = make_phantom(&still_spec()).unwrap();
        for (f, m) in p.fixed.data.iter().zip(&p.moving.data) {
            // invert both remaps back to scene intensity
            let from_fixed = (*f as f64 - FIXED_REMAP.1) / FIXED_REMAP.0;
            let c = MOVING_REMAP_CURVATURE;
            let from_moving = ((1.0 + 4.0 * c * *m as f64).sqrt() - 1.0) / (2.0 * c);
            assert!((from_fixed - from_moving).abs() < 1e-5);
        }
        assert_eq!(p.fixed_labels.data, p.moving_labels.data);
    }

    #[test]
    fn still_phantom_descriptors_agree_across_modalities() {
        let p = make_phantom(&still_spec()).unwrap();
        let df = mind_descriptor_default(&p.fixed).unwrap();
        let dm = mind_descriptor_default(&p.moving).unwrap();
        let mut max_dev = 0.0f64;
        for (cf, cm) in df.channels.iter().zip(&dm.channels) {
            for (a, b) in cf.iter().zip(cm) {
                max_dev = max_dev.max((a - b).abs() as f64);
            }
        }
        assert!(max_dev <= 1e-3, "max descriptor deviation {max_dev}");
    }

    #[test]
    fn gt_field_zero_for_zero_motion() {
        let p = make_phantom(&still_spec()).unwrap();
        let f = gt_hybrid_field(&p).unwrap();
        assert!(f.ux.iter().chain(&f.uy).chain(&f.uz).all(|&v| v == 0.0));
    }

    #[test]
    fn gt_field_piecewise_constant_for_translation_only() {
        let spec = PhantomSpec {
            max_rot_deg: 0.0,
            bg_field_amp_vox: 0.0,
            seed: 3,
            ..PhantomSpec::default()
        };
        let p = make_phantom(&spec).unwrap();
        let f = gt_hybrid_field(&p).unwrap();
        let grid = &f.grid;
        let boxes = spec.boxes();
        for (x, y, z) in grid.iter_coords() {
            let i = grid.index(x, y, z);
            let id = p.fixed_labels.data[i];
            let pos = [x as f64, y as f64, z as f64];
            let far = boxes.iter().all(|b| b.distance(pos) >= 3.0);
            // inside a label: exactly that label's translation; outside the
            // 3-voxel blend band (with zero sinusoid amplitude): exactly zero
            let expect = if id > 0 {
                p.gt_rigids[id as usize - 1].t
            } else if far {
                [0.0; 3]
            } else {
                continue;
            };
            assert!((f.ux[i] as f64 - expect[0]).abs() < 1e-6);
            assert!((f.uy[i] as f64 - expect[1]).abs() < 1e-6);
            assert!((f.uz[i] as f64 - expect[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn gt_field_matches_analytic_evaluation_at_random_voxels() {
        let spec = PhantomSpec { seed: 11, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let f = gt_hybrid_field(&p).unwrap();
        let grid = &f.grid;
        let boxes = spec.boxes();
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut checked = 0;
        while checked < 100 {
            let x = rng.gen_range(0..grid.dims[0]);
            let y = rng.gen_range(0..grid.dims[1]);
            let z = rng.gen_range(0..grid.dims[2]);
            let i = grid.index(x, y, z);
            if p.fixed_labels.data[i] == 0 {
                continue;
            }
            checked += 1;
            let id = p.fixed_labels.data[i] as usize;
            let u = p.gt_rigids[id - 1].displacement_at([x as f64, y as f64, z as f64]);
            // inside a block the background component is zero by construction
            let bg = bg_displacement(&spec, &boxes, &p.gt_rigids, [x as f64, y as f64, z as f64]);
            assert_eq!(bg, [0.0; 3]);
            assert!((f.ux[i] as f64 - u[0]).abs() < 1e-6);
            assert!((f.uy[i] as f64 - u[1]).abs() < 1e-6);
            assert!((f.uz[i] as f64 - u[2]).abs() < 1e-6);
        }
    }

    #[test]
    fn warping_moving_by_gt_field_reproduces_fixed_geometry() {
        let spec = PhantomSpec { seed: 5, noise_sigma: 0.0, ..PhantomSpec::default() };
        let p = make_phantom(&spec).unwrap();
        let f = gt_hybrid_field(&p).unwrap();
        let warped = crate::resample::warp_labels(&p.moving_labels, &f).unwrap();
        let summary = crate::metrics::mean_dice(&p.fixed_labels, &warped).unwrap();
        assert!(summary.mean >= 0.97, "mean Dice {}", summary.mean);
    }

    #[test]
    fn invalid_specs_are_rejected() {
        let too_big = PhantomSpec {
            vertebra_size: [22, 22, 12],
            ..PhantomSpec::default()
        };
        assert!(make_phantom(&too_big).is_err());
        let steep = PhantomSpec { max_rot_deg: 20.0, ..PhantomSpec::default() };
        assert!(make_phantom(&steep).is_err());
    }
}
