//! Generate a synthetic spine phantom pair and save it as NIfTI files.
//!
//! The phantom is a stack of vertebra blocks, each displaced by its own
//! random rigid transform, embedded in soft tissue that follows a smooth
//! background field. The two volumes mimic different modalities via
//! different intensity remaps. Ground truth (per-vertebra rigids and the
//! background field) is known exactly.
//!
//! Usage: cargo run --release --example phantom_pair [SEED] [OUT_DIR]

use spinereg::io::{save_field, save_labels, save_volume};
use spinereg::phantom::{gt_hybrid_field, make_phantom, PhantomSpec};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let out = args.next().unwrap_or_else(|| "phantom_out".into());
    std::fs::create_dir_all(&out)?;

    let spec = PhantomSpec { seed, ..PhantomSpec::default() };
    let p = make_phantom(&spec)?;

    println!("phantom dims {:?}, {} vertebrae", spec.dims, spec.n_vertebrae);
    for (i, rp) in p.gt_rigids.iter().enumerate() {
        println!(
            "  vertebra {}: rotation {:.2} deg, translation [{:.2}, {:.2}, {:.2}] vox",
            i + 1,
            rp.angle_deg(),
            rp.t[0],
            rp.t[1],
            rp.t[2]
        );
    }

    save_volume(&p.fixed, format!("{out}/fixed.nii"))?;
    save_volume(&p.moving, format!("{out}/moving.nii"))?;
    save_labels(&p.fixed_labels, format!("{out}/fixed_labels.nii"))?;
    save_labels(&p.moving_labels, format!("{out}/moving_labels.nii"))?;
    save_field(&gt_hybrid_field(&p)?, format!("{out}/gt_field.nii"))?;
    println!("wrote fixed/moving volumes, labels, and ground-truth field to {out}/");
    Ok(())
}
