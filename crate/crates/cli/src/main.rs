use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};
use stab_core::fusion::{FusionFunction, FusionSpace};
use stab_core::media::load_config;
use stab_core::nn::Arch;
use stab_core::pipeline::{self, StabilizeOptions};
use stab_core::synth::{jitter_pan_clip, Canvas};
use stab_core::train::{dataset::write_clip, LossWeights, TrainConfig};

const EXIT_VALIDATION: u8 = 2;
const EXIT_RUNTIME: u8 = 3;

/// Full-frame video stabilization by fusing warped neighboring frames.
#[derive(Parser, Debug)]
#[command(name = "stab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Render a stabilized, uncropped video from a project config.
    Stabilize(StabilizeArgs),
    /// Score a stabilized video against its input.
    Evaluate(EvaluateArgs),
    /// Cut training samples out of stable clips.
    SynthData(SynthDataArgs),
    /// Train a fusion model on a synthesized dataset.
    Train(TrainArgs),
    /// Render a procedural shaky pan, with its camera motion.
    MakeClip(MakeClipArgs),
}

#[derive(Args, Debug)]
struct StabilizeArgs {
    #[arg(long)]
    config: PathBuf,
    /// Estimate warp fields with the built-in smoother when none are on disk.
    #[arg(long)]
    auto_smooth: bool,
    #[arg(long, value_name = "hybrid|feature|image")]
    fusion: Option<FusionSpace>,
    #[arg(long, value_name = "mean|gaussian|argmax|flow_error|learned")]
    weights: Option<FusionFunction>,
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    #[arg(long)]
    output: Option<PathBuf>,
    #[arg(long)]
    no_detail_transfer: bool,
    #[arg(long)]
    no_path_adjust: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Write the chosen per-frame translations as `k,x,y,energy_contrib`.
    #[arg(long, value_name = "CSV")]
    dump_path: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvaluateArgs {
    input: PathBuf,
    output: PathBuf,
    #[arg(long)]
    report: PathBuf,
    /// Per-frame metric traces.
    #[arg(long, value_name = "CSV")]
    traces: Option<PathBuf>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args, Debug)]
struct SynthDataArgs {
    src: PathBuf,
    out: PathBuf,
    #[arg(long)]
    n: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Square crop side in pixels.
    #[arg(long, default_value_t = 64)]
    crop: usize,
    /// Maximum crop jitter; a tenth of the crop by default.
    #[arg(long)]
    jitter: Option<usize>,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 1000)]
    steps: usize,
    #[arg(long, default_value = "hybrid")]
    space: FusionSpace,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 1e-4)]
    lr: f64,
    /// Network widths: `default`, `compact`, or a full descriptor string.
    #[arg(long, default_value = "default", value_parser = parse_arch)]
    arch: Arch,
    /// Train with plain L1 instead of L1 plus the perceptual term.
    #[arg(long)]
    l1_only: bool,
    #[arg(long, default_value_t = 100)]
    log_every: usize,
}

#[derive(Args, Debug)]
struct MakeClipArgs {
    out: PathBuf,
    #[arg(long, default_value_t = 30)]
    frames: usize,
    #[arg(long, default_value_t = 96)]
    width: usize,
    #[arg(long, default_value_t = 96)]
    height: usize,
    /// Pan velocity in pixels per frame, `dx,dy`.
    #[arg(long, default_value = "1,0", value_parser = parse_pair)]
    velocity: (f64, f64),
    /// Uniform shake amplitude in pixels.
    #[arg(long, default_value_t = 0.0)]
    jitter: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn parse_arch(s: &str) -> Result<Arch, String> {
    match s {
        "default" => Ok(Arch::default()),
        "compact" => Ok(Arch::compact()),
        other => Arch::parse(other).map_err(|e| e.to_string()),
    }
}

fn parse_pair(s: &str) -> Result<(f64, f64), String> {
    let (a, b) = s.split_once(',').ok_or("expected `x,y`")?;
    let num = |t: &str| t.trim().parse::<f64>().map_err(|e| e.to_string());
    Ok((num(a)?, num(b)?))
}

fn stabilize(args: StabilizeArgs) -> anyhow::Result<()> {
    let mut config = load_config(&args.config)?;
    if let Some(s) = args.fusion {
        config.fusion_space = s;
    }
    if let Some(f) = args.weights {
        config.fusion_function = f;
    }
    if let Some(c) = args.checkpoint {
        config.checkpoint = Some(c);
    }
    if let Some(o) = args.output {
        config.output_dir = o;
    }
    if let Some(s) = args.seed {
        config.seed = s;
    }
    config.detail_transfer &= !args.no_detail_transfer;
    config.path_adjust &= !args.no_path_adjust;
    let options = StabilizeOptions {
        auto_smooth: args.auto_smooth,
        dump_path: args.dump_path,
        dry_run: false,
    };
    let run = pipeline::stabilize(&config, &options)?;
    println!(
        "wrote {} frames to {} (mean hole fraction {:.4})",
        run.frames.len(),
        run.output_dir.display(),
        run.total_hole_fraction
    );
    Ok(())
}

fn evaluate(args: EvaluateArgs) -> anyhow::Result<()> {
    let report = pipeline::evaluate(&args.input, &args.output, args.seed)?;
    let json = serde_json::to_string_pretty(&report)?;
    fs::write(&args.report, json).with_context(|| format!("writing {}", args.report.display()))?;
    if let Some(t) = &args.traces {
        fs::write(t, report.traces_csv()).with_context(|| format!("writing {}", t.display()))?;
    }
    let stability = report
        .stability
        .map_or_else(|| "n/a".to_string(), |s| format!("{s:.4}"));
    println!(
        "cropping {:.3}  distortion {:.4}  stability {stability}  accumulated flow {:.5}",
        report.cropping_ratio, report.distortion, report.accumulated_flow
    );
    Ok(())
}

fn synth_data(args: SynthDataArgs) -> anyhow::Result<()> {
    let crop = (args.crop, args.crop);
    let jitter = args.jitter.unwrap_or_else(|| pipeline::default_jitter(crop));
    let samples = pipeline::synth_data(&args.src, &args.out, args.n, args.seed, crop, jitter)?;
    println!("wrote {} samples to {}", samples.len(), args.out.display());
    Ok(())
}

fn train(args: TrainArgs) -> anyhow::Result<()> {
    let config = TrainConfig {
        steps: args.steps,
        batch: args.batch,
        learning_rate: args.lr,
        seed: args.seed,
        space: args.space,
        arch: args.arch,
        loss: if args.l1_only {
            LossWeights::l1_only()
        } else {
            LossWeights::default()
        },
        log_every: args.log_every,
    };
    let outcome = pipeline::train(&args.data, &args.out, &config)?;
    if let Some(last) = outcome.trace.last() {
        println!(
            "step {}: loss {:.5}, psnr {:.2} dB; checkpoint {}",
            last.step,
            last.loss,
            last.psnr,
            args.out.display()
        );
    }
    Ok(())
}

fn make_clip(args: MakeClipArgs) -> anyhow::Result<()> {
    let invalid = |field: &str, message: &str| -> anyhow::Error {
        stab_core::Error::Validation {
            field: field.into(),
            message: message.into(),
        }
        .into()
    };
    if args.frames == 0 {
        return Err(invalid("frames", "must be at least 1"));
    }
    let min = stab_core::raster::MIN_FRAME_EDGE;
    if args.width < min || args.height < min {
        return Err(invalid("width", &format!("frames must be at least {min}x{min}")));
    }
    let clip = jitter_pan_clip(
        &Canvas::random(args.seed),
        args.frames,
        args.width,
        args.height,
        args.velocity,
        args.jitter,
        args.seed,
    );
    write_clip(&args.out, &clip)?;
    println!("wrote {} frames to {}", clip.frames.len(), args.out.display());
    Ok(())
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<stab_core::Error>() {
        Some(e) if e.is_validation() => EXIT_VALIDATION,
        _ => EXIT_RUNTIME,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Stabilize(a) => stabilize(a),
        Command::Evaluate(a) => evaluate(a),
        Command::SynthData(a) => synth_data(a),
        Command::Train(a) => train(a),
        Command::MakeClip(a) => make_clip(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
