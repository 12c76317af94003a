use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use ndarray::Array2;

use lfdepth::fusion::{estimate_depth, DEFAULT_LAMBDA};
use lfdepth::io::{
    export_depth_visual, read_dataset, read_map, read_pfm, read_scene, save_png, write_map, write_pfm,
    write_synthetic_dataset, PfmImage,
};
use lfdepth::lf::SceneConfig;
use lfdepth::losses::LossConfig;
use lfdepth::metrics::{evaluate, occlusion_band_metrics, DEFAULT_CROP, DEFAULT_THRESHOLD};
use lfdepth::model::{Checkpoint, ColorMode};
use lfdepth::train::{train_loop, AdamConfig, TrainConfig};

#[derive(Parser)]
#[command(name = "lfdepth", version, about = "Unsupervised light-field depth estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate synthetic occluder scenes with ground truth.
    Synth(SynthArgs),
    /// Train a network on a dataset directory.
    Train(TrainArgs),
    /// Estimate disparity for one scene.
    Infer(InferArgs),
    /// Compare a predicted disparity map against ground truth.
    Eval(EvalArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 20)]
    scenes: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long = "max-disp", default_value_t = 2.0)]
    max_disp: f64,
    #[arg(long, default_value_t = 64)]
    height: usize,
    #[arg(long, default_value_t = 64)]
    width: usize,
    /// Views per angular axis.
    #[arg(long, default_value_t = 7)]
    angular: usize,
}

#[derive(Clone, Copy, ValueEnum)]
enum Color {
    Rgb,
    Gray,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 100_000)]
    iters: u64,
    #[arg(long, default_value_t = 4)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Smoothness weight β.
    #[arg(long, default_value_t = 0.1)]
    beta: f64,
    /// Edge sensitivity γ.
    #[arg(long, default_value_t = 150.0)]
    gamma: f64,
    #[arg(long, default_value_t = 128)]
    patch: usize,
    #[arg(long, value_enum, default_value_t = Color::Rgb)]
    color: Color,
    /// Train the full-light-field baseline with the plain photometric loss.
    #[arg(long = "no-occ")]
    no_occ: bool,
    #[arg(long = "no-smooth")]
    no_smooth: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Views per angular axis fed to the network.
    #[arg(long, default_value_t = 7)]
    angular: usize,
    /// Encoder widths, comma separated.
    #[arg(long, value_delimiter = ',', default_values_t = [64, 128, 256, 512])]
    features: Vec<usize>,
    #[arg(long = "checkpoint-interval", default_value_t = 1000)]
    checkpoint_interval: u64,
    /// Continue from the latest checkpoint in --out.
    #[arg(long)]
    resume: bool,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Scene folder (HCI or manifest layout).
    #[arg(long)]
    lf: PathBuf,
    /// Output prefix; writes PREFIX.pfm and PREFIX.png.
    #[arg(long)]
    out: PathBuf,
    /// Occlusion threshold λ.
    #[arg(long, default_value_t = DEFAULT_LAMBDA)]
    lambda: f64,
    /// Also write per-quadrant maps, weights, the mask, d_max and d_avg.
    #[arg(long = "dump-debug")]
    dump_debug: bool,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    gt: PathBuf,
    #[arg(long, default_value_t = DEFAULT_CROP)]
    crop: usize,
    /// Bad-pixel threshold t.
    #[arg(long, default_value_t = DEFAULT_THRESHOLD)]
    t: f64,
    /// Dilation radius of the occlusion band; needs --occlusion.
    #[arg(long, requires = "occlusion")]
    band: Option<usize>,
    /// Ground-truth occlusion mask (PFM, nonzero = occluded).
    #[arg(long)]
    occlusion: Option<PathBuf>,
    #[arg(long)]
    scene: Option<String>,
}

fn synth(args: &SynthArgs) -> Result<()> {
    let base = SceneConfig {
        height: args.height,
        width: args.width,
        angular: (args.angular, args.angular),
        max_disparity: args.max_disp,
        ..SceneConfig::default()
    };
    write_synthetic_dataset(&args.out, 0..args.scenes, args.seed, &base)?;
    log::info!("wrote {} scenes to {}", args.scenes, args.out.display());
    Ok(())
}

fn train(args: &TrainArgs) -> Result<()> {
    let dataset = read_dataset(&args.data)?;
    let cfg = TrainConfig {
        patch_size: args.patch,
        angular: (args.angular, args.angular),
        batch: args.batch,
        adam: AdamConfig {
            lr: args.lr,
            ..AdamConfig::default()
        },
        iterations: args.iters,
        seed: args.seed,
        loss: LossConfig {
            beta: args.beta,
            gamma: args.gamma,
            ..LossConfig::default()
        },
        occlusion_aware: !args.no_occ,
        smoothness: !args.no_smooth,
        checkpoint_interval: args.checkpoint_interval,
        color_mode: match args.color {
            Color::Rgb => ColorMode::Rgb,
            Color::Gray => ColorMode::Gray,
        },
        scale_features: args.features[..].try_into().map_err(|_| {
            lfdepth::Error::InvalidArgument("--features takes four widths".into())
        })?,
    };
    let outcome = train_loop(&dataset, &cfg, &args.out, args.resume)?;
    if let Some(last) = &outcome.last {
        log::info!("finished at iteration {} with loss {:.6}", last.iteration, last.total);
    }
    println!("{}", outcome.checkpoint.display());
    Ok(())
}

fn with_suffix(prefix: &Path, suffix: &str, ext: &str) -> PathBuf {
    let mut name = prefix.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    name.push(".");
    name.push(ext);
    prefix.with_file_name(name)
}

fn write_pair(prefix: &Path, suffix: &str, map: &Array2<f64>, range: (f64, f64)) -> Result<()> {
    write_map(with_suffix(prefix, suffix, "pfm"), map)?;
    save_png(with_suffix(prefix, suffix, "png"), &export_depth_visual(map, range)?)?;
    Ok(())
}

/// Visual range: the scene's declared disparity range, else the map's own.
fn visual_range(declared: Option<(f64, f64)>, map: &Array2<f64>) -> (f64, f64) {
    if let Some(r) = declared {
        return r;
    }
    let lo = map.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = map.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo < hi {
        (lo, hi)
    } else {
        (lo - 0.5, lo + 0.5)
    }
}

fn infer(args: &InferArgs) -> Result<()> {
    if !(args.lambda >= 0.0 && args.lambda.is_finite()) {
        return Err(lfdepth::Error::InvalidArgument(format!("λ = {} must be non-negative", args.lambda)).into());
    }
    let ck = Checkpoint::load(&args.ckpt)?;
    let entry = read_scene(&args.lf)?;
    let est = estimate_depth(&ck.network, &entry.lf, args.lambda)?;
    let range = visual_range(entry.lf.disparity_range(), &est.d_final);
    if let Some(dir) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    write_pair(&args.out, "", &est.d_final, range)?;
    if args.dump_debug {
        let (Some(maps), Some(fused)) = (&est.quadrants, &est.fused) else {
            bail!(lfdepth::Error::InvalidArgument(
                "--dump-debug needs an occlusion-aware checkpoint".into()
            ));
        };
        for (i, m) in maps.iter().enumerate() {
            write_pair(&args.out, &format!("_d{}", i + 1), &m.disparity, range)?;
        }
        for (i, w) in fused.weights.maps().iter().enumerate() {
            write_pair(&args.out, &format!("_w{}", i + 1), w, (0.0, 1.0))?;
        }
        write_pfm(with_suffix(&args.out, "_mask", "pfm"), &PfmImage::from_mask(&fused.mask.mask))?;
        let mask = fused.mask.mask.mapv(|b| if b { 1.0 } else { 0.0 });
        save_png(with_suffix(&args.out, "_mask", "png"), &export_depth_visual(&mask, (0.0, 1.0))?)?;
        write_pair(&args.out, "_dmax", &fused.d_max, range)?;
        write_pair(&args.out, "_davg", &fused.d_avg, range)?;
    }
    log::info!("wrote {}", with_suffix(&args.out, "", "pfm").display());
    Ok(())
}

fn eval(args: &EvalArgs) -> Result<()> {
    let pred = read_map(&args.pred)?;
    let gt = read_map(&args.gt)?;
    let mut report = serde_json::to_value(evaluate(&pred, &gt, args.t, args.crop)?)?;
    if let Some(scene) = &args.scene {
        report["scene"] = scene.clone().into();
    }
    if let (Some(radius), Some(occ)) = (args.band, &args.occlusion) {
        let mask = read_pfm(occ)?.to_mask()?;
        let band = occlusion_band_metrics(&pred, &gt, &mask, radius, args.t, args.crop)?;
        report["band"] = serde_json::json!({
            "radius": radius,
            "mse_x100": band.mse_x100,
            "bpr": band.bpr,
            "pixels": band.pixels,
        });
    }
    println!("{}", serde_json::to_string_pretty(&report)?);
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<lfdepth::Error>()) {
        Some(e) if e.is_numeric() => 4,
        Some(lfdepth::Error::InvalidArgument(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Synth(a) => synth(a),
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
