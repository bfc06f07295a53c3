//! Thin command-line wrapper over the registration library: register a pair,
//! generate phantoms, warp volumes, compute metrics, convert formats, and
//! run the fusion-block self-checks.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use spinereg::io::{load_field, load_volume, save_field, save_labels, save_volume, LoadedVolume};
use spinereg::metrics::{dilated_foreground, hd95_label, mean_dice, neg_jacobian_pct};
use spinereg::phantom::{gt_hybrid_field, make_phantom, PhantomSpec};
use spinereg::pipeline::{
    format_metric_table, register_hybrid, RegisterOptions, ReportMetrics, JACOBIAN_FG_DILATION_VOX,
};
use spinereg::resample::{warp_labels, warp_scalar};
use spinereg::{Error, Result};

#[derive(Parser)]
#[command(name = "spinereg", version, about = "Hybrid rigid–deformable 3D registration")]
struct Cli {
    /// Worker threads for internal parallelism (default: hardware count).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Register a moving volume onto a fixed volume.
    Register(RegisterArgs),
    /// Generate a synthetic ground-truth phantom pair.
    Phantom(PhantomArgs),
    /// Warp a volume or label map by a displacement field.
    Warp(WarpArgs),
    /// Compute overlap and field metrics.
    Metrics(MetricsArgs),
    /// Convert between NIfTI-1 and raw+sidecar formats.
    Convert(ConvertArgs),
    /// Run the fusion-block numeric self-checks.
    MslCheck(MslCheckArgs),
}

#[derive(Args)]
struct RegisterArgs {
    #[arg(long)]
    fixed: PathBuf,
    #[arg(long)]
    moving: PathBuf,
    /// Per-vertebra label map on the fixed grid.
    #[arg(long)]
    labels: PathBuf,
    /// Label map on the moving grid; enables Dice/HD95 in the report.
    #[arg(long)]
    moving_labels: Option<PathBuf>,
    /// Output directory (field.nii, warped.nii, report.json, metrics.txt).
    #[arg(long)]
    out: PathBuf,
    /// JSON config file with flat keys mirroring the flag names;
    /// command-line flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Smoothness weight λ.
    #[arg(long)]
    lambda: Option<f64>,
    /// Deformable control grid spacing, voxels.
    #[arg(long)]
    grid_spacing: Option<f64>,
    /// Deformable iteration budget.
    #[arg(long)]
    max_iters: Option<usize>,
    /// Disable the rigid branch (deformable-only ablation).
    #[arg(long)]
    skip_rigid: bool,
    /// Penalize smoothness of the full hybrid field instead of the
    /// deformable component.
    #[arg(long)]
    smooth_on_hybrid: bool,
}

#[derive(Args)]
struct PhantomArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for the six artifacts.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct WarpArgs {
    /// Volume or label map to warp (labels use nearest-neighbor).
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    field: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MetricsArgs {
    #[arg(long)]
    fixed_labels: PathBuf,
    #[arg(long)]
    warped_labels: PathBuf,
    /// Optional displacement field for the negative-Jacobian metric.
    #[arg(long)]
    field: Option<PathBuf>,
    /// Optional JSON output path; the table always prints to stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct ConvertArgs {
    #[arg(long)]
    input: PathBuf,
    /// Output path; format chosen by extension (.nii or .raw).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct MslCheckArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Flat-key JSON config mirroring the register flag names.
#[derive(Default, serde::Deserialize)]
#[serde(deny_unknown_fields)]
struct RegisterConfigFile {
    lambda: Option<f64>,
    grid_spacing: Option<f64>,
    max_iters: Option<usize>,
    skip_rigid: Option<bool>,
    smooth_on_hybrid: Option<bool>,
    step_size: Option<f64>,
    grad_tol: Option<f64>,
}

fn resolve_register_options(a: &RegisterArgs) -> Result<RegisterOptions> {
    let file: RegisterConfigFile = match &a.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| Error::io(p, e))?;
            serde_json::from_str(&text).map_err(|e| Error::format(p, e.to_string()))?
        }
        None => RegisterConfigFile::default(),
    };
    let mut opts = RegisterOptions::default();
    if let Some(v) = a.lambda.or(file.lambda) {
        opts.deformable.lambda = v;
    }
    if let Some(v) = a.grid_spacing.or(file.grid_spacing) {
        opts.deformable.grid_spacing_vox = v;
    }
    if let Some(v) = a.max_iters.or(file.max_iters) {
        opts.deformable.max_iters = v;
    }
    if let Some(v) = file.step_size {
        opts.deformable.step_size = v;
    }
    if let Some(v) = file.grad_tol {
        opts.deformable.grad_tol = v;
    }
    opts.skip_rigid = a.skip_rigid || file.skip_rigid.unwrap_or(false);
    opts.deformable.smooth_on_hybrid = a.smooth_on_hybrid || file.smooth_on_hybrid.unwrap_or(false);
    opts.validate()?;
    Ok(opts)
}

fn load_scalar(path: &Path) -> Result<spinereg::Volume> {
    Ok(load_volume(path)?.into_scalar())
}

fn load_labels(path: &Path) -> Result<spinereg::LabelVolume> {
    load_volume(path)?.into_labels()
}

fn ensure_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_json<T: serde::Serialize>(value: &T, path: &Path) -> Result<()> {
    let text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::format(path, e.to_string()))?;
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

fn cmd_register(a: &RegisterArgs) -> Result<()> {
    let opts = resolve_register_options(a)?;
    let fixed = load_scalar(&a.fixed)?;
    let moving = load_scalar(&a.moving)?;
    let labels = load_labels(&a.labels)?;
    let moving_labels = match &a.moving_labels {
        Some(p) => Some(load_labels(p)?),
        None => None,
    };
    let result = register_hybrid(&fixed, &moving, &labels, moving_labels.as_ref(), &opts)?;
    ensure_dir(&a.out)?;
    save_field(&result.field, a.out.join("field.nii"))?;
    save_volume(&result.warped, a.out.join("warped.nii"))?;
    if let Some(wl) = &result.warped_labels {
        save_labels(wl, a.out.join("warped_labels.nii"))?;
    }
    write_json(&result.report, &a.out.join("report.json"))?;
    let table = format_metric_table(&result.report.metrics);
    std::fs::write(a.out.join("metrics.txt"), &table)
        .map_err(|e| Error::io(a.out.join("metrics.txt"), e))?;
    for w in &result.report.warnings {
        eprintln!("warning: {w}");
    }
    print!("{table}");
    Ok(())
}

fn cmd_phantom(a: &PhantomArgs) -> Result<()> {
    let spec = PhantomSpec { seed: a.seed, ..PhantomSpec::default() };
    let p = make_phantom(&spec)?;
    ensure_dir(&a.out)?;
    save_volume(&p.fixed, a.out.join("fixed.nii"))?;
    save_volume(&p.moving, a.out.join("moving.nii"))?;
    save_labels(&p.fixed_labels, a.out.join("fixed_labels.nii"))?;
    save_labels(&p.moving_labels, a.out.join("moving_labels.nii"))?;
    save_field(&gt_hybrid_field(&p)?, a.out.join("gt_field.nii"))?;
    write_json(&p.gt_rigids, &a.out.join("gt_rigids.json"))?;
    println!("phantom written to {}", a.out.display());
    Ok(())
}

fn cmd_warp(a: &WarpArgs) -> Result<()> {
    let field = load_field(&a.field)?;
    match load_volume(&a.input)? {
        LoadedVolume::Scalar(v) => save_volume(&warp_scalar(&v, &field)?, &a.out),
        LoadedVolume::Labels(l) => save_labels(&warp_labels(&l, &field)?, &a.out),
    }
}

fn cmd_metrics(a: &MetricsArgs) -> Result<()> {
    let fixed = load_labels(&a.fixed_labels)?;
    let warped = load_labels(&a.warped_labels)?;
    let dice = mean_dice(&fixed, &warped)?;
    let mut per = Vec::new();
    for &id in &fixed.label_ids {
        per.push((id, hd95_label(&fixed, &warped, id)?));
    }
    let hd95_mean = per.iter().map(|(_, v)| v).sum::<f64>() / per.len().max(1) as f64;
    let neg_jac = match &a.field {
        Some(p) => {
            let field = load_field(p)?;
            let fg = dilated_foreground(&fixed, JACOBIAN_FG_DILATION_VOX);
            neg_jacobian_pct(&field, &fg)?
        }
        None => 0.0,
    };
    let metrics = ReportMetrics {
        neg_jacobian_pct: neg_jac,
        dice: Some(dice),
        hd95_per_label: Some(per),
        hd95_mean: Some(hd95_mean),
    };
    if let Some(out) = &a.out {
        write_json(&metrics, out)?;
    }
    print!("{}", format_metric_table(&metrics));
    Ok(())
}

fn cmd_convert(a: &ConvertArgs) -> Result<()> {
    match load_volume(&a.input)? {
        LoadedVolume::Scalar(v) => save_volume(&v, &a.out),
        LoadedVolume::Labels(l) => save_labels(&l, &a.out),
    }
}

fn cmd_msl_check(a: &MslCheckArgs) -> Result<()> {
    use spinereg::msl::*;
    let channels = 3;
    let dims = [4, 4, 4];
    let n = dims[0] * dims[1] * dims[2];
    let seed = a.seed;
    let ssm = SsmParams::seeded(channels, 4, seed);
    let attn = AttnParams::seeded(channels, [2, 2, 2], [1, 1, 1], seed + 1);
    let gate = GateParams::seeded(channels, seed + 2);
    let data: Vec<f64> = (0..channels * n)
        .map(|i| (i as f64 * 0.7 + seed as f64).sin())
        .collect();
    let z = FeatureTensor::new(dims, channels, data)?;

    // serialization roundtrip
    let seq = serialize(&z);
    let back = deserialize(&seq, dims)?;
    let roundtrip_ok = back == z;
    println!("serialize roundtrip: {}", if roundtrip_ok { "ok" } else { "FAILED" });

    // causal scan linearity: scan(2x) == 2*scan(x)
    let out1 = ssm_scan(&seq, &ssm)?;
    let doubled: Vec<Vec<f64>> = seq.iter().map(|v| v.iter().map(|x| 2.0 * x).collect()).collect();
    let out2 = ssm_scan(&doubled, &ssm)?;
    let lin_dev = out1
        .iter()
        .zip(&out2)
        .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (2.0 * x - y).abs()))
        .fold(0.0f64, f64::max);
    println!("ssm linearity max deviation: {lin_dev:.2e}");

    // gate convexity
    let z_s = window_attention(&z, &attn)?;
    let fused = gate_fuse(&z, &z_s, &gate)?;
    let mut convex_ok = true;
    for i in 0..fused.data.len() {
        let lo = z.data[i].min(z_s.data[i]) - 1e-12;
        let hi = z.data[i].max(z_s.data[i]) + 1e-12;
        if fused.data[i] < lo || fused.data[i] > hi {
            convex_ok = false;
        }
    }
    println!("gate convexity: {}", if convex_ok { "ok" } else { "FAILED" });

    // full forward determinism
    let f1 = msl_forward(&z, &ssm, &attn, &gate)?;
    let f2 = msl_forward(&z, &ssm, &attn, &gate)?;
    let det_ok = f1 == f2;
    println!("forward determinism: {}", if det_ok { "ok" } else { "FAILED" });

    if roundtrip_ok && lin_dev < 1e-9 && convex_ok && det_ok {
        Ok(())
    } else {
        Err(Error::Numerical {
            stage: "msl-check".into(),
            iteration: 0,
            reason: "self-check failed".into(),
        })
    }
}

fn run(cli: &Cli) -> Result<()> {
    if let Some(t) = cli.threads {
        // a global pool can only be set once; ignore late configuration
        let _ = rayon::ThreadPoolBuilder::new().num_threads(t).build_global();
    }
    match &cli.command {
        Command::Register(a) => cmd_register(a),
        Command::Phantom(a) => cmd_phantom(a),
        Command::Warp(a) => cmd_warp(a),
        Command::Metrics(a) => cmd_metrics(a),
        Command::Convert(a) => cmd_convert(a),
        Command::MslCheck(a) => cmd_msl_check(a),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e @ Error::Numerical { .. }) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}
