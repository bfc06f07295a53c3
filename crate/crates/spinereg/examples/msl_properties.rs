//! Exercise the forward-only fusion block (serialized state-space scan +
//! shifted-window attention + sigmoid gate) and verify its key properties
//! on random inputs.
//!
//! Usage: cargo run --release --example msl_properties [SEED]

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use spinereg::msl::{
    deserialize, gate_fuse, msl_forward, serialize, ssm_scan, window_attention, AttnParams,
    FeatureTensor, GateParams, SsmParams,
};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let seed: u64 = std::env::args().nth(1).map(|s| s.parse()).transpose()?.unwrap_or(0);
    let dims = [8, 7, 6];
    let channels = 4;
    let n = dims[0] * dims[1] * dims[2];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data: Vec<f64> = (0..channels * n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let z = FeatureTensor::new(dims, channels, data)?;

    let ssm = SsmParams::seeded(channels, 4, seed + 1);
    let attn = AttnParams::seeded(channels, [4, 4, 3], [2, 2, 1], seed + 2);
    let gate = GateParams::seeded(channels, seed + 3);

    // scan equals the hand-unrolled linear recurrence
    let seq = serialize(&z);
    let scanned = ssm_scan(&seq, &ssm)?;
    let mut worst = 0.0f64;
    for c in 0..channels {
        let mut h = vec![0.0f64; ssm.state_dim];
        for (t, x) in seq.iter().enumerate() {
            for s in 0..ssm.state_dim {
                h[s] = (ssm.delta[c] * ssm.a[s]).exp() * h[s] + ssm.delta[c] * ssm.b[c][s] * x[c];
            }
            let y: f64 = (0..ssm.state_dim).map(|s| ssm.c_out[c][s] * h[s]).sum();
            worst = worst.max((scanned[t][c] - y).abs());
        }
    }
    println!("scan vs unrolled recurrence: max deviation {worst:.2e}");

    // serialization round-trips
    let back = deserialize(&seq, dims)?;
    println!("serialize/deserialize round-trip exact: {}", back == z);

    // gated fusion stays between the branch values
    let z_m = deserialize(&ssm_scan(&seq, &ssm)?, dims)?;
    let z_s = window_attention(&z, &attn)?;
    let fused = gate_fuse(&z_m, &z_s, &gate)?;
    let bounded = (0..channels * n).all(|i| {
        fused.data[i] >= z_m.data[i].min(z_s.data[i]) && fused.data[i] <= z_m.data[i].max(z_s.data[i])
    });
    println!("gate output bounded by branches: {bounded}");

    // full forward agrees with composing the pieces
    let full = msl_forward(&z, &ssm, &attn, &gate)?;
    let composed = gate_fuse(&z_m, &z_s, &gate)?;
    let max_dev = (0..channels * n)
        .map(|i| (full.data[i] - composed.data[i]).abs())
        .fold(0.0f64, f64::max);
    println!("msl_forward vs composed branches: max deviation {max_dev:.2e}");
    Ok(())
}
