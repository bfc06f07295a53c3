//! Full hybrid registration on a synthetic phantom pair: global rigid
//! pre-registration, per-vertebra rigid estimation, deformable refinement,
//! additive fusion, and evaluation against the phantom's labels.
//!
//! Usage: cargo run --release --example hybrid_registration [SEED] [MAX_ITERS]

use spinereg::deformable::DeformableOptions;
use spinereg::phantom::{make_phantom, PhantomSpec};
use spinereg::pipeline::{format_metric_table, register_hybrid, RegisterOptions};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0);
    let max_iters: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(80);

    let p = make_phantom(&PhantomSpec { seed, ..PhantomSpec::default() })?;
    let opts = RegisterOptions {
        deformable: DeformableOptions { max_iters, ..DeformableOptions::default() },
        ..RegisterOptions::default()
    };

    println!("registering {:?} phantom (seed {seed}, {max_iters} deformable iterations)...", p.fixed.grid.dims);
    let r = register_hybrid(&p.fixed, &p.moving, &p.fixed_labels, Some(&p.moving_labels), &opts)?;

    for (stage, ms) in &r.report.timing_ms {
        println!("  {stage:<12} {ms:9.1} ms");
    }
    for w in &r.report.warnings {
        println!("warning: {w}");
    }
    println!("\n{}", format_metric_table(&r.report.metrics));

    let trace = &r.report.deformable_loss_trace;
    if let (Some(first), Some(last)) = (trace.first(), trace.last()) {
        println!("deformable loss: {first:.6} -> {last:.6} over {} iterations", r.report.deformable_iterations);
    }
    Ok(())
}
