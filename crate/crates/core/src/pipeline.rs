//! End-to-end stabilization and the helpers around it: a translation-only
//! smoother for when no warp fields are supplied, a blurry-neighbor filter,
//! and high-frequency detail transfer from the key frame.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::Serialize;

use crate::error::{ensure_same_dims, Error, Result};
use crate::flow::{backward_warp, build_warp_bundle, CachedFlows, FallbackFlow, FlowProvider, PrecomputedFlows, WarpBundle};
use crate::fusion::{self, heuristic_weights, FusedResult, FusionFunction, FusionSpace};
use crate::media::{frame_file_name, read_flo, read_frame_sequence, write_frame, ProjectConfig};
use crate::metrics::{evaluate_videos, StabReport};
use crate::nn::{load_checkpoint, save_checkpoint, FusionModel};
use crate::train::{dataset, prepare_all, trace_csv, train_run, TrainConfig, TrainOutcome};
use crate::path::{adjust_bundles, energy_contributions, optimize_path, CoverageField, PathOptions, PathSolution};
pub use crate::raster::gaussian_blur;
use crate::raster::{FlowField, Frame, Mask, Raster};

/// Temporal width of the trajectory smoother, in frames.
pub const SMOOTH_SIGMA: f64 = 5.0;
/// Blur separating the high-frequency band in detail transfer.
pub const DETAIL_SIGMA: f64 = 1.5;
/// Feathering of the key-valid region in detail transfer.
pub const FEATHER_SIGMA: f64 = 5.0;
/// Fewest neighbors (key included) the blur filter leaves.
pub const MIN_NEIGHBORS: usize = 3;

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// Index into `0..n` with mirror reflection at both ends (`-1 -> 0`, `n -> n-1`).
fn reflect(i: i64, n: usize) -> usize {
    let n = n as i64;
    let period = 2 * n;
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - 1 - m }) as usize
}

/// Gaussian smoothing of a 1-D signal with reflected boundaries.
pub fn gaussian_smooth(signal: &[f64], sigma: f64) -> Vec<f64> {
    let r = (3.0 * sigma).ceil() as i64;
    let kernel: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    (0..signal.len() as i64)
        .map(|t| {
            (-r..=r)
                .zip(&kernel)
                .map(|(i, w)| w * signal[reflect(t + i, signal.len())])
                .sum::<f64>()
                / norm
        })
        .collect()
}

/// Camera trajectory (cumulative position) from median inter-frame flow.
pub fn camera_trajectory(frames: &[Frame], provider: &dyn FlowProvider) -> Result<Vec<(f64, f64)>> {
    let mut traj = vec![(0.0, 0.0)];
    for t in 0..frames.len().saturating_sub(1) {
        let f = provider.flow_between(t, &frames[t], t + 1, &frames[t + 1])?;
        let dx = median(f.data().iter().step_by(2).copied().collect());
        let dy = median(f.data().iter().skip(1).step_by(2).copied().collect());
        let (cx, cy) = traj[t];
        traj.push((cx - dx, cy - dy));
    }
    Ok(traj)
}

/// Translation-only smoother: warp `k` is the constant `smoothed_k - raw_k`.
pub fn simple_smoother(frames: &[Frame], provider: &dyn FlowProvider) -> Result<Vec<FlowField>> {
    if frames.len() < 2 {
        return Err(Error::Invalid("smoothing needs at least 2 frames".into()));
    }
    let traj = camera_trajectory(frames, provider)?;
    Ok(smooth_warps(&traj, frames[0].height(), frames[0].width()))
}

pub fn smooth_warps(traj: &[(f64, f64)], height: usize, width: usize) -> Vec<FlowField> {
    let xs: Vec<f64> = traj.iter().map(|p| p.0).collect();
    let ys: Vec<f64> = traj.iter().map(|p| p.1).collect();
    let (sx, sy) = (gaussian_smooth(&xs, SMOOTH_SIGMA), gaussian_smooth(&ys, SMOOTH_SIGMA));
    (0..traj.len())
        .map(|k| FlowField::constant(height, width, sx[k] - xs[k], sy[k] - ys[k]))
        .collect()
}

/// Variance of the 3x3 Laplacian of the luminance (interior pixels).
pub fn sharpness(frame: &Frame) -> f64 {
    let lum = frame.luminance();
    let (h, w) = lum.dims();
    let mut vals = Vec::with_capacity((h - 2) * (w - 2));
    for y in 1..h - 1 {
        for x in 1..w - 1 {
            let c = lum.get(y, x, 0);
            vals.push(
                lum.get(y - 1, x, 0) + lum.get(y + 1, x, 0) + lum.get(y, x - 1, 0) + lum.get(y, x + 1, 0)
                    - 4.0 * c,
            );
        }
    }
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n
}

/// Frame indices of `bundle` that survive the blur filter. A neighbor is
/// dropped when its sharpness is below `tau` times the key's; the key always
/// stays, and the closest dropped neighbors come back until
/// [`MIN_NEIGHBORS`] remain.
pub fn sharpness_filter(bundle: &WarpBundle, sharp: &[f64], tau: f64) -> Vec<usize> {
    let k = bundle.target;
    let limit = tau * sharp[k];
    let mut keep: Vec<usize> = Vec::new();
    let mut dropped: Vec<usize> = Vec::new();
    for n in bundle.indices() {
        if n == k || sharp[n] >= limit {
            keep.push(n);
        } else {
            dropped.push(n);
        }
    }
    dropped.sort_by_key(|&n| ((n as i64 - k as i64).abs(), n));
    let want = MIN_NEIGHBORS.min(bundle.len());
    for n in dropped {
        if keep.len() >= want {
            break;
        }
        keep.push(n);
    }
    keep.sort_unstable();
    keep
}

/// Replaces the rendered frame's high-frequency band with the warped key
/// frame's inside the (feathered) key-valid region.
pub fn residual_detail_transfer(
    rendered: &Frame,
    warped_key: &Frame,
    key_mask: &Mask,
    sigma_b: f64,
) -> Result<Frame> {
    ensure_same_dims("detail transfer", rendered.dims(), warped_key.dims())?;
    ensure_same_dims("detail transfer", rendered.dims(), key_mask.dims())?;
    let feather = gaussian_blur(key_mask, FEATHER_SIGMA);
    let blur_r = gaussian_blur(rendered, sigma_b);
    let blur_k = gaussian_blur(warped_key, sigma_b);
    let (h, w) = rendered.dims();
    let out = Raster::from_fn(h, w, 3, |y, x, c| {
        let m = feather.get(y, x, 0);
        let hk = warped_key.get(y, x, c) - blur_k.get(y, x, c);
        let hr = rendered.get(y, x, c) - blur_r.get(y, x, c);
        rendered.get(y, x, c) + m * (hk - hr)
    });
    Frame::from_raster_clamped(out)
}

/// Switches that are not part of the project file.
#[derive(Clone, Debug, Default)]
pub struct StabilizeOptions {
    /// Estimate warps with [`simple_smoother`] when the warp directory has none.
    pub auto_smooth: bool,
    /// Write `k,x,y,energy_contrib` rows of the translation path here.
    pub dump_path: Option<PathBuf>,
    /// Skip writing frames and the run log (in-memory use).
    pub dry_run: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct FrameLog {
    pub k: usize,
    pub hole_fraction: f64,
    pub neighbors: Vec<usize>,
    pub shift: (i32, i32),
    pub seconds: f64,
}

/// Result of a [`stabilize`] call.
#[derive(Clone, Debug, Serialize)]
pub struct PipelineRun {
    pub config: ProjectConfig,
    pub frames: Vec<FrameLog>,
    pub total_hole_fraction: f64,
    pub path_energy: Option<f64>,
    pub zero_path_energy: Option<f64>,
    pub auto_smoothed: bool,
    pub output_dir: PathBuf,
    #[serde(skip)]
    pub outputs: Vec<Frame>,
}

pub const RUN_LOG: &str = "run_log.json";

/// Warp fields `<frame>.flo` from `dir`, or `None` if there are none.
pub fn read_warps(dir: &Path, count: usize) -> Result<Option<Vec<FlowField>>> {
    let first = dir.join(warp_file_name(0));
    if !first.exists() {
        return Ok(None);
    }
    (0..count)
        .map(|k| {
            let p = dir.join(warp_file_name(k));
            if !p.exists() {
                return Err(Error::MissingFrame(k));
            }
            read_flo(&p)
        })
        .collect::<Result<Vec<_>>>()
        .map(Some)
}

pub fn warp_file_name(k: usize) -> String {
    format!("{k:06}.flo")
}

fn needs_model(space: FusionSpace, function: FusionFunction) -> bool {
    space != FusionSpace::Image || function.is_learned()
}

/// Renders target `k` from its (already adjusted) bundle.
pub fn render_frame(
    bundle: &WarpBundle,
    frames: &[Frame],
    space: FusionSpace,
    function: FusionFunction,
    sigma_t: f64,
    model: Option<&FusionModel<f32>>,
) -> Result<FusedResult> {
    let fixed = if function.is_learned() {
        None
    } else {
        Some(heuristic_weights(function, bundle, sigma_t)?)
    };
    match (space, fixed) {
        (FusionSpace::Image, Some(w)) => {
            let warped = fusion::warp_neighbors(bundle, frames)?;
            fusion::fuse_image_space(bundle, &warped, &w)
        }
        (_, fixed) => {
            let model = model.ok_or_else(|| {
                Error::validation("checkpoint", "this fusion mode needs a trained checkpoint")
            })?;
            fusion::fuse_with_model(space, bundle, frames, model, fixed.as_ref())
        }
    }
}

/// Runs the whole stabilizer described by `config`.
pub fn stabilize(config: &ProjectConfig, options: &StabilizeOptions) -> Result<PipelineRun> {
    config.validate()?;
    let frames = read_frame_sequence(&config.frame_dir)?;
    let model = match (&config.checkpoint, needs_model(config.fusion_space, config.fusion_function)) {
        (Some(p), true) => Some(load_checkpoint(p)?),
        (None, true) => {
            return Err(Error::validation(
                "checkpoint",
                format!(
                    "{:?} fusion with {:?} weights needs a checkpoint",
                    config.fusion_space, config.fusion_function
                ),
            ))
        }
        _ => None,
    };
    let provider: Box<dyn FlowProvider> = match &config.flow_dir {
        Some(dir) => Box::new(CachedFlows::new(PrecomputedFlows::new(dir, FallbackFlow::default()))),
        None => Box::new(CachedFlows::new(FallbackFlow::default())),
    };
    stabilize_frames(config, options, &frames, provider.as_ref(), model.as_ref())
}

/// [`stabilize`] on frames already in memory.
pub fn stabilize_frames(
    config: &ProjectConfig,
    options: &StabilizeOptions,
    frames: &[Frame],
    provider: &dyn FlowProvider,
    model: Option<&FusionModel<f32>>,
) -> Result<PipelineRun> {
    config.validate()?;
    if frames.is_empty() {
        return Err(Error::validation("frame_dir", "no frames found"));
    }
    let (h, w) = frames[0].dims();
    let (warps, auto_smoothed) = match read_warps(&config.warp_dir, frames.len())? {
        Some(w) => (w, false),
        None if options.auto_smooth => (simple_smoother(frames, provider)?, true),
        None => {
            return Err(Error::validation(
                "warp_dir",
                format!(
                    "no warp fields in {} (pass --auto-smooth to estimate them)",
                    config.warp_dir.display()
                ),
            ))
        }
    };
    for (k, wf) in warps.iter().enumerate() {
        if wf.dims() != (h, w) {
            return Err(Error::Shape(format!(
                "warp field {k} is {}x{} but frames are {w}x{h}",
                wf.width(),
                wf.height()
            )));
        }
    }

    let radius = config.radius();
    let bundles = (0..frames.len())
        .map(|k| build_warp_bundle(k, frames, &warps[k], provider, radius))
        .collect::<Result<Vec<_>>>()?;

    let (bundles, solution) = if config.path_adjust {
        let coverage = CoverageField::from_bundles(&bundles);
        let sol = optimize_path(&coverage, &PathOptions::for_frame(w, h, config.lambda_s))?;
        log::info!(
            "path energy {:.6} (zero path {:.6}, levels {:?})",
            sol.energy,
            sol.zero_energy,
            sol.level_energies
        );
        (adjust_bundles(&bundles, &sol.path)?, Some(sol))
    } else {
        (bundles, None)
    };
    if let Some(dump) = &options.dump_path {
        write_path_dump(dump, &bundles, solution.as_ref(), config.lambda_s, w, h)?;
    }

    let sharp: Vec<f64> = crate::par::map_collect(frames.iter().collect(), sharpness);
    let results = crate::par::map_collect((0..frames.len()).collect(), |k| {
        let start = Instant::now();
        let mut bundle = bundles[k].clone();
        let keep = sharpness_filter(&bundle, &sharp, config.sharpness_threshold);
        bundle.retain(|n| keep.contains(&n));
        let fused = render_frame(
            &bundle,
            frames,
            config.fusion_space,
            config.fusion_function,
            config.sigma_t,
            model,
        )?;
        let mut out = fused.frame.clone();
        if config.detail_transfer {
            let key = &bundle.neighbors[bundle.key_position()];
            let warped_key = Frame::from_raster_clamped(backward_warp(&frames[k], &key.warp)?)?;
            out = residual_detail_transfer(&out, &warped_key, &key.mask, DETAIL_SIGMA)?;
        }
        let shift = solution.as_ref().map_or((0, 0), |s| s.path[k]);
        Ok::<_, Error>((
            out,
            FrameLog {
                k,
                hole_fraction: fused.hole_fraction(),
                neighbors: bundle.indices(),
                shift,
                seconds: start.elapsed().as_secs_f64(),
            },
        ))
    });
    let mut outputs = Vec::with_capacity(frames.len());
    let mut logs = Vec::with_capacity(frames.len());
    for r in results {
        let (f, l) = r?;
        if l.hole_fraction > 0.0 {
            log::info!("frame {}: {:.2}% hole pixels filled", l.k, 100.0 * l.hole_fraction);
        }
        outputs.push(f);
        logs.push(l);
    }
    let total_hole_fraction = logs.iter().map(|l| l.hole_fraction).sum::<f64>() / logs.len() as f64;
    let run = PipelineRun {
        config: config.clone(),
        frames: logs,
        total_hole_fraction,
        path_energy: solution.as_ref().map(|s| s.energy),
        zero_path_energy: solution.as_ref().map(|s| s.zero_energy),
        auto_smoothed,
        output_dir: config.output_dir.clone(),
        outputs,
    };
    if !options.dry_run {
        fs::create_dir_all(&config.output_dir).map_err(|e| Error::io(&config.output_dir, e))?;
        for (k, f) in run.outputs.iter().enumerate() {
            write_frame(&config.output_dir.join(frame_file_name(k)), f)?;
        }
        let log_path = config.output_dir.join(RUN_LOG);
        let text = serde_json::to_string_pretty(&run).map_err(|e| Error::Format(e.to_string()))?;
        fs::write(&log_path, text).map_err(|e| Error::io(&log_path, e))?;
    }
    Ok(run)
}

fn write_path_dump(
    path: &Path,
    bundles: &[WarpBundle],
    solution: Option<&PathSolution>,
    lambda_s: f64,
    w: usize,
    h: usize,
) -> Result<()> {
    let (labels, contrib) = match solution {
        Some(s) => (s.path.clone(), s.contributions.clone()),
        None => {
            let labels = vec![(0, 0); bundles.len()];
            let data: Vec<f64> = bundles
                .iter()
                .map(|b| crate::path::coverage_fraction(b, (0.0, 0.0)))
                .collect();
            let diag = (w as f64).hypot(h as f64);
            let c = energy_contributions(&labels, &data, lambda_s, diag);
            (labels, c)
        }
    };
    let mut s = String::from("k,x,y,energy_contrib\n");
    for (k, (l, e)) in labels.iter().zip(contrib).enumerate() {
        s.push_str(&format!("{k},{},{},{e}\n", l.0, l.1));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

/// Metrics of the video in `output_dir` against the one in `input_dir`.
pub fn evaluate(input_dir: &Path, output_dir: &Path, seed: u64) -> Result<StabReport> {
    let input = read_frame_sequence(input_dir)?;
    let output = read_frame_sequence(output_dir)?;
    if input.len() != output.len() {
        return Err(Error::validation(
            "output",
            format!("{} input frames vs {} output frames", input.len(), output.len()),
        ));
    }
    evaluate_videos(&input, &output, &FallbackFlow::default(), seed)
}

/// Draws `n` training samples from the clips under `src` and writes them to `out`.
pub fn synth_data(
    src: &Path,
    out: &Path,
    n: usize,
    seed: u64,
    crop_size: (usize, usize),
    max_jitter: usize,
) -> Result<Vec<crate::train::TrainSample>> {
    if n == 0 {
        return Err(Error::validation("n", "must be at least 1"));
    }
    let samples = dataset::synthesize_dataset(src, n, seed, crop_size, max_jitter)?;
    dataset::write_dataset(out, &samples)?;
    Ok(samples)
}

/// Default jitter: a tenth of the smaller crop side.
pub fn default_jitter(crop_size: (usize, usize)) -> usize {
    crop_size.0.min(crop_size.1) / 10
}

/// Trains on the dataset in `data_dir`, then writes the checkpoint to `out`
/// and the loss trace next to it (see [`trace_path`]).
pub fn train(data_dir: &Path, out: &Path, config: &TrainConfig) -> Result<TrainOutcome> {
    let samples = dataset::read_dataset(data_dir)?;
    let fallback = FallbackFlow::default();
    let prepared = prepare_all(&samples, Some(&fallback))?;
    let outcome = train_run(&prepared, config)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    save_checkpoint(out, &outcome.model)?;
    let csv = trace_path(out);
    fs::write(&csv, trace_csv(&outcome.trace)).map_err(|e| Error::io(&csv, e))?;
    Ok(outcome)
}

/// `<checkpoint>.loss.csv`
pub fn trace_path(checkpoint: &Path) -> PathBuf {
    let mut name = checkpoint.as_os_str().to_owned();
    name.push(".loss.csv");
    PathBuf::from(name)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{pan_clip, static_clip, Canvas, KnownMotion};

    #[test]
    fn reflect_indices() {
        let idx: Vec<usize> = (-3..8).map(|i| reflect(i, 5)).collect();
        assert_eq!(idx, vec![2, 1, 0, 0, 1, 2, 3, 4, 4, 3, 2]);
    }

    #[test]
    fn static_video_needs_no_warp() {
        let clip = static_clip(&Canvas::random(0), 6, 24, 24);
        let warps = simple_smoother(&clip.frames, &FallbackFlow::default()).unwrap();
        assert!(warps.iter().all(|w| w.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn linear_pan_is_a_fixed_point_inside() {
        let clip = pan_clip(&Canvas::random(1), 40, 24, 24, (1.0, 0.5));
        let warps = simple_smoother(&clip.frames, &clip.flows()).unwrap();
        for w in &warps[15..25] {
            let (dx, dy) = w.at(0, 0);
            assert!(dx.abs() < 1e-6 && dy.abs() < 1e-6, "{dx} {dy}");
        }
    }

    #[test]
    fn alternating_jitter_is_damped() {
        let positions: Vec<(f64, f64)> = (0..20).map(|t| (if t % 2 == 0 { 4.0 } else { -4.0 }, 0.0)).collect();
        let provider = KnownMotion::new(positions.clone(), 16, 16);
        let frames = vec![Canvas::random(2).view(16, 16, (0.0, 0.0)); 20];
        let traj = camera_trajectory(&frames, &provider).unwrap();
        let warps = smooth_warps(&traj, 16, 16);
        assert!(warps.iter().any(|w| w.at(0, 0).0.abs() > 0.0));
        let var = |v: &[f64]| {
            let m = v.iter().sum::<f64>() / v.len() as f64;
            v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64
        };
        let raw: Vec<f64> = traj.iter().map(|p| p.0).collect();
        assert!(var(&gaussian_smooth(&raw, SMOOTH_SIGMA)) < var(&raw));
    }

    #[test]
    fn blurred_neighbor_is_dropped() {
        let sharp_frame = Canvas::random(3).view(32, 32, (0.0, 0.0));
        // 7x7 box blur
        let blurred = Frame::from_fn(32, 32, |y, x, c| {
            let mut s = 0.0;
            for dy in -3i64..=3 {
                for dx in -3i64..=3 {
                    let yy = (y as i64 + dy).clamp(0, 31) as usize;
                    let xx = (x as i64 + dx).clamp(0, 31) as usize;
                    s += sharp_frame.get(yy, xx, c);
                }
            }
            s / 49.0
        })
        .unwrap();
        let mut frames = vec![sharp_frame.clone(); 5];
        frames[3] = blurred;
        let sharp: Vec<f64> = frames.iter().map(sharpness).collect();
        let bundle = crate::flow::build_warp_bundle_with(2, 5, &FlowField::zeros(32, 32), 2, |_, _| {
            Ok(FlowField::zeros(32, 32))
        })
        .unwrap();
        assert_eq!(sharpness_filter(&bundle, &sharp, 0.6), vec![0, 1, 2, 4]);
        assert_eq!(sharpness_filter(&bundle, &sharp, 0.0), vec![0, 1, 2, 3, 4]);
        let same = vec![sharp[0]; 5];
        assert_eq!(sharpness_filter(&bundle, &same, 1.0).len(), 5);
    }

    #[test]
    fn detail_transfer_cases() {
        let key = Canvas::random(4).view(32, 32, (0.0, 0.0));
        let ones = Mask::ones(32, 32);
        let out = residual_detail_transfer(&key, &key, &ones, DETAIL_SIGMA).unwrap();
        assert!(out.max_abs_diff(&key) < 1e-12);
        let blurred = Frame::new(gaussian_blur(&key, 2.0)).unwrap();
        let out = residual_detail_transfer(&blurred, &key, &Mask::zeros(32, 32), DETAIL_SIGMA).unwrap();
        assert_eq!(out, blurred);
        let out = residual_detail_transfer(&blurred, &key, &ones, DETAIL_SIGMA).unwrap();
        let band = |f: &Raster| {
            let b = gaussian_blur(f, DETAIL_SIGMA);
            f.data().iter().zip(b.data()).map(|(a, b)| (a - b).powi(2)).sum::<f64>()
        };
        assert!(band(&out) > band(&blurred));
    }
}
