//! Acceptance suite. Runs without the libtest harness so that every
//! criterion prints its PASS/FAIL line even when everything passes.
//!
//! `cargo test -p stab-core --test acceptance` runs all nine criteria;
//! `cargo test -p stab-core --test acceptance -- 3 5` runs a subset.

use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::process::ExitCode;
use std::sync::OnceLock;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stab_core::flow::{
    backward_warp, build_warp_bundle_with, chain_flow, consistency_error, FallbackFlow, WarpBundle,
};
use stab_core::fusion::{heuristic_weights, weighted_blend, BlendWeights, FusionFunction, FusionSpace};
use stab_core::media::{read_frame_sequence, write_flo, write_frame_sequence, ProjectConfig};
use stab_core::metrics::{accumulated_flow, cropping_ratio, stability_score};
use stab_core::nn::{save_checkpoint, Arch, FusionModel};
use stab_core::path::{optimize_path, CoverageField, Label, PathOptions};
use stab_core::pipeline::{evaluate, stabilize, warp_file_name, StabilizeOptions};
use stab_core::synth::{jitter_pan_clip, pan_clip, static_clip, Canvas};
use stab_core::train::dataset::write_clip;
use stab_core::train::{
    mean_psnr, prepare_all, sample_gradient, sample_loss, synthesize_from_clip, train_run,
    FeatureExtractor, LossWeights, PreparedSample, TrainConfig, TrainSample,
};
use stab_core::{FlowField, Frame, Raster};

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

type Criterion = (u32, &'static str, fn() -> Outcome);

const CRITERIA: [Criterion; 9] = [
    (1, "fusion-space ordering after training", fusion_space_ordering),
    (2, "single-sample overfit", single_sample_overfit),
    (3, "scalar oracles and exhaustive path search", oracle_equivalences),
    (4, "full-frame output on a shaky clip", full_frame_output),
    (5, "identity pipeline and self-evaluation", identity_pipeline),
    (6, "blend weights sum to one", weights_sum_to_one),
    (7, "path solver properties", path_solver_properties),
    (8, "analytic gradients match finite differences", gradient_check),
    (9, "stabilization reduces motion", stabilization_effect),
];

fn main() -> ExitCode {
    let wanted: Vec<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    for (id, name, run) in CRITERIA {
        if !wanted.is_empty() && !wanted.contains(&id) {
            continue;
        }
        let start = Instant::now();
        let result = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|e| {
            let msg = e
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default();
            outcome(false, format!("panicked: {msg}"))
        });
        let secs = start.elapsed().as_secs_f64();
        let tag = if result.pass { "PASS" } else { "FAIL" };
        println!("[{tag}] criterion {id}: {name} ({secs:.1}s) {}", result.detail);
        failed += usize::from(!result.pass);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}

// ---------------------------------------------------------------- data

/// Seven-frame sample cut from a random-velocity pan.
fn pan_sample(rng: &mut ChaCha8Rng, canvas_seed: u64, crop: usize, jitter: usize) -> TrainSample {
    let v = (rng.random_range(-1.5..1.5), rng.random_range(-1.5..1.5));
    let side = crop + 2 * jitter + 4;
    let clip = pan_clip(&Canvas::random(canvas_seed), 7, side, side, v);
    synthesize_from_clip(&clip, (crop, crop), jitter, rng).unwrap()
}

fn pan_samples(n: usize, seed: u64, crop: usize) -> Vec<TrainSample> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| pan_sample(&mut rng, seed * 100_000 + i as u64, crop, crop / 10))
        .collect()
}

fn train_config(space: FusionSpace, steps: usize) -> TrainConfig {
    TrainConfig {
        steps,
        learning_rate: 1e-3,
        arch: Arch::compact(),
        space,
        ..TrainConfig::default()
    }
}

/// Small hybrid model trained briefly, shared by the pipeline criteria.
fn toy_model() -> &'static FusionModel<f32> {
    static MODEL: OnceLock<FusionModel<f32>> = OnceLock::new();
    MODEL.get_or_init(|| {
        let data = prepare_all(&pan_samples(16, 77, 64), None).unwrap();
        train_run(&data, &train_config(FusionSpace::Hybrid, 300)).unwrap().model
    })
}

fn write_toy_checkpoint(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("toy.ckpt");
    save_checkpoint(&path, toy_model()).unwrap();
    path
}

// ---------------------------------------------------------------- 1

/// Drops the known motion so samples are prepared from estimated flow, the
/// way real footage is.
fn with_estimated_flow(mut samples: Vec<TrainSample>) -> Vec<TrainSample> {
    for s in &mut samples {
        s.layout.motion = None;
    }
    samples
}

fn fusion_space_ordering() -> Outcome {
    let fb = FallbackFlow::default();
    let train = prepare_all(&with_estimated_flow(pan_samples(200, 1, 64)), Some(&fb)).unwrap();
    let held_out = prepare_all(&with_estimated_flow(pan_samples(50, 2, 64)), Some(&fb)).unwrap();
    let mut scores = Vec::new();
    for space in [FusionSpace::Image, FusionSpace::Feature, FusionSpace::Hybrid] {
        let model = train_run(&train, &train_config(space, 5000)).unwrap().model;
        scores.push(mean_psnr(&model, &held_out, space).unwrap());
    }
    let (image, feature, hybrid) = (scores[0], scores[1], scores[2]);
    outcome(
        hybrid - image >= 0.3 && hybrid >= feature,
        format!("held-out PSNR image {image:.3} dB, feature {feature:.3} dB, hybrid {hybrid:.3} dB"),
    )
}

// ---------------------------------------------------------------- 2

fn median(v: &[f64]) -> f64 {
    let mut v = v.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn single_sample_overfit() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let data = prepare_all(&[pan_sample(&mut rng, 11, 64, 6)], None).unwrap();
    let out = train_run(&data, &train_config(FusionSpace::Hybrid, 500)).unwrap();
    let psnr = mean_psnr(&out.model, &data, FusionSpace::Hybrid).unwrap();
    let losses: Vec<f64> = out.trace.iter().map(|r| r.loss).collect();
    let medians: Vec<f64> = losses.chunks(50).map(median).collect();
    let monotone = medians.windows(2).all(|w| w[1] < w[0]);
    outcome(
        psnr > 30.0 && monotone,
        format!(
            "train PSNR {psnr:.2} dB, 50-step loss medians {}",
            medians.iter().map(|m| format!("{m:.4}")).collect::<Vec<_>>().join(" ")
        ),
    )
}

// ---------------------------------------------------------------- 3

/// Edge-clamped bilinear sample written independently of the library.
fn bilinear(data: &[f64], h: usize, w: usize, c: usize, ch: usize, x: f64, y: f64) -> f64 {
    let x = x.max(0.0).min((w - 1) as f64);
    let y = y.max(0.0).min((h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let px = |yy: usize, xx: usize| data[(yy * w + xx) * c + ch];
    let top = px(y0, x0) * (1.0 - fx) + px(y0, x1) * fx;
    let bottom = px(y1, x0) * (1.0 - fx) + px(y1, x1) * fx;
    top * (1.0 - fy) + bottom * fy
}

fn smooth_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amp: f64) -> FlowField {
    let waves: Vec<[f64; 6]> = (0..3)
        .map(|_| {
            [
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..6.3),
                rng.random_range(0.05..0.4),
                rng.random_range(0.05..0.4),
                rng.random_range(0.0..6.3),
            ]
        })
        .collect();
    FlowField::from_fn(h, w, |y, x| {
        let (x, y) = (x as f64, y as f64);
        let mut d = (0.0, 0.0);
        for a in &waves {
            d.0 += amp / 3.0 * (a[0] * x + a[1] * y + a[2]).sin();
            d.1 += amp / 3.0 * (a[3] * x + a[4] * y + a[5]).cos();
        }
        d
    })
}

fn random_raster(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> Raster {
    Raster::from_fn(h, w, c, |_, _, _| rng.random::<f64>())
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn oracle_equivalences() -> Outcome {
    let (h, w) = (32, 32);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = [0.0f64; 4];
    for _ in 0..50 {
        let ab = smooth_field(&mut rng, h, w, 2.0);
        let bc = smooth_field(&mut rng, h, w, 2.0);
        let img = random_raster(&mut rng, h, w, 3);

        let chained = chain_flow(&ab, &bc).unwrap();
        let mut oracle = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = ab.data()[(y * w + x) * 2..][..2].to_vec();
                let (sx, sy) = (x as f64 + d[0], y as f64 + d[1]);
                oracle.push(d[0] + bilinear(bc.data(), h, w, 2, 0, sx, sy));
                oracle.push(d[1] + bilinear(bc.data(), h, w, 2, 1, sx, sy));
            }
        }
        worst[0] = worst[0].max(max_diff(chained.data(), &oracle));

        let warped = backward_warp(&img, &ab).unwrap();
        let mut oracle = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = &ab.data()[(y * w + x) * 2..][..2];
                for ch in 0..3 {
                    oracle.push(bilinear(img.data(), h, w, 3, ch, x as f64 + d[0], y as f64 + d[1]));
                }
            }
        }
        worst[1] = worst[1].max(max_diff(warped.data(), &oracle));

        let err = consistency_error(&ab, &bc).unwrap();
        let mut oracle = Vec::new();
        for y in 0..h {
            for x in 0..w {
                let d = &ab.data()[(y * w + x) * 2..][..2];
                let (sx, sy) = (x as f64 + d[0], y as f64 + d[1]);
                let rx = d[0] + bilinear(bc.data(), h, w, 2, 0, sx, sy);
                let ry = d[1] + bilinear(bc.data(), h, w, 2, 1, sx, sy);
                oracle.push((rx * rx + ry * ry).sqrt());
            }
        }
        worst[2] = worst[2].max(max_diff(err.data(), &oracle));

        let n = rng.random_range(1..=7);
        let items: Vec<Raster> = (0..n).map(|_| random_raster(&mut rng, h, w, 3)).collect();
        let raw: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..h * w).map(|_| rng.random::<f64>()).collect())
            .collect();
        let maps: Vec<Vec<f64>> = raw
            .iter()
            .map(|m| {
                m.iter()
                    .enumerate()
                    .map(|(p, v)| v / raw.iter().map(|r| r[p]).sum::<f64>())
                    .collect()
            })
            .collect();
        let weights = BlendWeights {
            height: h,
            width: w,
            maps: maps.clone(),
        };
        let blended = weighted_blend(&items, &weights).unwrap();
        let mut oracle = vec![0.0; h * w * 3];
        for (i, item) in items.iter().enumerate() {
            for p in 0..h * w {
                for ch in 0..3 {
                    oracle[p * 3 + ch] += maps[i][p] * item.data()[p * 3 + ch];
                }
            }
        }
        worst[3] = worst[3].max(max_diff(blended.data(), &oracle));
    }
    let ops_ok = worst.iter().all(|&e| e <= 1e-5);

    // Exhaustive search over a 5x5 label grid for up to four frames.
    let mut path_mismatches = 0;
    for _ in 0..20 {
        let t = rng.random_range(1..=4);
        let table: Vec<Vec<f64>> = (0..t)
            .map(|_| (0..25).map(|_| rng.random::<f64>()).collect())
            .collect();
        let lambda = rng.random_range(0.0..200.0);
        let diag = 20.0;
        let idx = |l: Label| ((l.1 + 2) * 5 + (l.0 + 2)) as usize;
        let cov = CoverageField::new(t, |k, l| table[k][idx(l)]);
        let opts = PathOptions {
            lambda_s: lambda,
            diag,
            radius: 2,
            steps: vec![1],
        };
        let sol = optimize_path(&cov, &opts).unwrap();
        let labels: Vec<Label> = (-2..=2).flat_map(|y| (-2..=2).map(move |x| (x, y))).collect();
        let energy = |path: &[Label]| {
            let mut e: f64 = path.iter().enumerate().map(|(k, &l)| table[k][idx(l)]).sum();
            for k in 1..path.len() {
                let dx = f64::from(path[k].0 - path[k - 1].0) / diag;
                let dy = f64::from(path[k].1 - path[k - 1].1) / diag;
                e += 2.0 * lambda * (dx * dx + dy * dy);
            }
            e
        };
        let mut best = (f64::INFINITY, Vec::new());
        let mut choice = vec![0usize; t];
        loop {
            let path: Vec<Label> = choice.iter().map(|&i| labels[i]).collect();
            let e = energy(&path);
            if e < best.0 {
                best = (e, path);
            }
            let mut k = 0;
            while k < t {
                choice[k] += 1;
                if choice[k] < labels.len() {
                    break;
                }
                choice[k] = 0;
                k += 1;
            }
            if k == t {
                break;
            }
        }
        if sol.path != best.1 || (sol.energy - best.0).abs() > 1e-12 {
            path_mismatches += 1;
        }
    }
    outcome(
        ops_ok && path_mismatches == 0,
        format!(
            "max errors chain {:.1e}, warp {:.1e}, consistency {:.1e}, blend {:.1e}; path mismatches {path_mismatches}/20",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

// ---------------------------------------------------------------- 4, 9

struct ShakyRun {
    input: Vec<Frame>,
    output: Vec<Frame>,
    in_memory: Vec<Frame>,
    holes: f64,
}

fn stabilize_shaky_clip(frames: usize, seed: u64) -> ShakyRun {
    let dir = tempfile::tempdir().unwrap();
    let clip = jitter_pan_clip(&Canvas::random(seed), frames, 96, 96, (1.0, 0.3), 5.0, seed);
    write_clip(&dir.path().join("in"), &clip).unwrap();
    let mut config = ProjectConfig::with_paths(
        dir.path().join("in"),
        dir.path().join("warps"),
        dir.path().join("out"),
    );
    config.fusion_space = FusionSpace::Hybrid;
    config.fusion_function = FusionFunction::Learned;
    config.checkpoint = Some(write_toy_checkpoint(dir.path()));
    let options = StabilizeOptions {
        auto_smooth: true,
        ..StabilizeOptions::default()
    };
    let run = stabilize(&config, &options).unwrap();
    ShakyRun {
        input: read_frame_sequence(&dir.path().join("in")).unwrap(),
        output: read_frame_sequence(&dir.path().join("out")).unwrap(),
        in_memory: run.outputs,
        holes: run.total_hole_fraction,
    }
}

fn full_frame_output() -> Outcome {
    let run = stabilize_shaky_clip(30, 4);
    let undefined: usize = run
        .in_memory
        .iter()
        .map(|f| f.data().iter().filter(|v| !(v.is_finite() && (0.0..=1.0).contains(*v))).count())
        .sum();
    let c = cropping_ratio(&run.input, &run.output, &FallbackFlow::default(), 0).unwrap();
    outcome(
        run.output.len() == 30 && undefined == 0 && c == 1.0,
        format!(
            "{} frames, {undefined} undefined pixels, {:.2}% hole pixels filled, cropping ratio {c}",
            run.output.len(),
            100.0 * run.holes
        ),
    )
}

fn stabilization_effect() -> Outcome {
    let run = stabilize_shaky_clip(64, 9);
    let fb = FallbackFlow::default();
    let a_in = accumulated_flow(&run.input, &fb).unwrap();
    let a_out = accumulated_flow(&run.output, &fb).unwrap();
    let s_in = stability_score(&run.input, &fb, 0).unwrap();
    let s_out = stability_score(&run.output, &fb, 0).unwrap();
    outcome(
        a_out < a_in && s_out > s_in,
        format!("accumulated flow {a_in:.5} -> {a_out:.5}, stability {s_in:.4} -> {s_out:.4}"),
    )
}

// ---------------------------------------------------------------- 5

fn identity_pipeline() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let (input, warps, out) = (dir.path().join("in"), dir.path().join("warps"), dir.path().join("out"));
    let clip = static_clip(&Canvas::random(5), 16, 48, 48);
    write_frame_sequence(&input, &clip.frames).unwrap();
    fs::create_dir_all(&warps).unwrap();
    for k in 0..16 {
        write_flo(&warps.join(warp_file_name(k)), &FlowField::zeros(48, 48)).unwrap();
    }
    let mut config = ProjectConfig::with_paths(input.clone(), warps, out.clone());
    config.fusion_space = FusionSpace::Image;
    config.fusion_function = FusionFunction::Mean;
    stabilize(&config, &StabilizeOptions::default()).unwrap();
    let before = read_frame_sequence(&input).unwrap();
    let after = read_frame_sequence(&out).unwrap();
    let diff = before
        .iter()
        .zip(&after)
        .map(|(a, b)| a.max_abs_diff(b))
        .fold(0.0, f64::max);
    let report = evaluate(&input, &input, 0).unwrap();
    let s = report.stability;
    let pass = after.len() == 16
        && diff <= 1.0 / 255.0 + 1e-12
        && (report.cropping_ratio - 1.0).abs() <= 1e-3
        && (report.distortion - 1.0).abs() <= 1e-3
        && report.accumulated_flow == 0.0
        && s == Some(1.0);
    outcome(
        pass,
        format!(
            "max pixel change {:.5} (limit {:.5}); C {}, D {:.6}, A {}, S {:?}",
            diff,
            1.0 / 255.0,
            report.cropping_ratio,
            report.distortion,
            report.accumulated_flow,
            s
        ),
    )
}

// ---------------------------------------------------------------- 6

fn random_bundle(rng: &mut ChaCha8Rng) -> (WarpBundle, Vec<Frame>) {
    let side = rng.random_range(16..=24);
    let len = rng.random_range(1..=7);
    let radius = rng.random_range(0..=3);
    let k = rng.random_range(0..len);
    let canvas = Canvas::random(rng.random());
    let frames: Vec<Frame> = (0..len)
        .map(|_| {
            let origin = (rng.random_range(-4.0..4.0), rng.random_range(-4.0..4.0));
            canvas.view(side, side, origin)
        })
        .collect();
    let amp = rng.random_range(0.0..4.0);
    let key_warp = smooth_field(rng, side, side, amp);
    let flows: Vec<Vec<FlowField>> = (0..len)
        .map(|_| {
            (0..len)
                .map(|_| {
                    let amp = rng.random_range(0.0..5.0);
                    smooth_field(rng, side, side, amp)
                })
                .collect()
        })
        .collect();
    let bundle =
        build_warp_bundle_with(k, len, &key_warp, radius, |a, b| Ok(flows[a][b].clone())).unwrap();
    (bundle, frames)
}

fn weights_sum_to_one() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = [0.0f64; 5];
    let mut worst_conf = 0.0f64;
    for i in 0..100 {
        let (bundle, frames) = random_bundle(&mut rng);
        let sigma_t = rng.random_range(0.5..4.0);
        for (slot, f) in FusionFunction::ALL.into_iter().enumerate() {
            let w = if f.is_learned() {
                let model = FusionModel::<f32>::init(Arch::compact(), i);
                let fused = stab_core::fusion::fuse_with_model(
                    FusionSpace::Hybrid,
                    &bundle,
                    &frames,
                    &model,
                    None,
                )
                .unwrap();
                let per = fused.per_neighbor.as_ref().expect("hybrid reports confidences");
                let (h, w) = bundle.dims();
                for p in 0..h * w {
                    let s: f64 = per.iter().map(|(_, c)| c[p]).sum();
                    worst_conf = worst_conf.max((s - 1.0).abs());
                }
                fused.weights
            } else {
                heuristic_weights(f, &bundle, sigma_t).unwrap()
            };
            assert_eq!(w.len(), bundle.len());
            worst[slot] = worst[slot].max(w.max_sum_error());
        }
    }
    let pass = worst.iter().all(|&e| e <= 1e-5) && worst_conf <= 1e-5;
    let names = FusionFunction::ALL.map(|f| format!("{f:?}").to_lowercase());
    let detail = names
        .iter()
        .zip(worst)
        .map(|(n, e)| format!("{n} {e:.1e}"))
        .collect::<Vec<_>>()
        .join(", ");
    outcome(pass, format!("max |sum - 1|: {detail}, hybrid confidence {worst_conf:.1e}"))
}

// ---------------------------------------------------------------- 7

/// Coverage table with smooth structure plus noise, defined on all labels.
fn random_coverage(rng: &mut ChaCha8Rng, t: usize) -> Vec<(f64, f64, f64, f64)> {
    (0..t)
        .map(|_| {
            (
                rng.random_range(-10.0..10.0),
                rng.random_range(-10.0..10.0),
                rng.random_range(0.001..0.02),
                rng.random_range(0.0..0.2),
            )
        })
        .collect()
}

fn coverage_at(params: &(f64, f64, f64, f64), l: Label) -> f64 {
    let (cx, cy, s, noise) = *params;
    let dx = f64::from(l.0) - cx;
    let dy = f64::from(l.1) - cy;
    let jitter = ((l.0 * 7919 + l.1 * 104_729) as f64).sin().abs();
    (s * (dx * dx + dy * dy)).min(1.0) * (1.0 - noise) + noise * jitter
}

/// Per-frame coarse-to-fine argmin with the same level schedule as the solver.
fn independent_argmin(params: &(f64, f64, f64, f64), radius: i32, steps: &[i32]) -> Label {
    let mut best: Label = (0, 0);
    let mut prev: Option<i32> = None;
    for &step in steps {
        let (center, reach) = match prev {
            None => ((0, 0), radius),
            Some(p) => (best, p),
        };
        let mut cands: Vec<Label> = Vec::new();
        let mut oy = -(reach / step) * step;
        while oy <= reach {
            let mut ox = -(reach / step) * step;
            while ox <= reach {
                let l = (center.0 + ox, center.1 + oy);
                if l.0.abs() <= radius && l.1.abs() <= radius {
                    cands.push(l);
                }
                ox += step;
            }
            oy += step;
        }
        cands.sort_by_key(|l| (l.0 * l.0 + l.1 * l.1, l.0, l.1));
        let mut best_e = f64::INFINITY;
        for l in cands {
            let e = coverage_at(params, l);
            if e < best_e {
                best_e = e;
                best = l;
            }
        }
        prev = Some(step);
    }
    best
}

fn path_solver_properties() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut increases = 0;
    let mut max_gap_stiff = 0;
    let mut free_mismatches = 0;
    for _ in 0..20 {
        let t = rng.random_range(2..=12);
        let params = random_coverage(&mut rng, t);
        let cov = CoverageField::new(t, |k, l| coverage_at(&params[k], l));
        let mut opts = PathOptions::for_frame(96, 96, rng.random_range(0.0..500.0));
        let sol = optimize_path(&cov, &opts).unwrap();
        let mut chain = vec![sol.zero_energy];
        chain.extend(&sol.level_energies);
        chain.push(sol.energy);
        increases += chain.windows(2).filter(|w| w[1] > w[0] + 1e-12).count();

        opts.lambda_s = 1e6;
        let stiff = optimize_path(&cov, &opts).unwrap();
        for w in stiff.path.windows(2) {
            max_gap_stiff = max_gap_stiff.max((w[1].0 - w[0].0).abs().max((w[1].1 - w[0].1).abs()));
        }

        opts.lambda_s = 0.0;
        let free = optimize_path(&cov, &opts).unwrap();
        for (k, p) in params.iter().enumerate() {
            if free.path[k] != independent_argmin(p, opts.radius, &opts.steps) {
                free_mismatches += 1;
            }
        }
    }
    outcome(
        increases == 0 && max_gap_stiff == 0 && free_mismatches == 0,
        format!(
            "energy increases {increases}, max step at lambda 1e6 {max_gap_stiff} px, lambda 0 mismatches {free_mismatches}"
        ),
    )
}

// ---------------------------------------------------------------- 8

fn gradient_check() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let clip = pan_clip(&Canvas::random(8), 7, 22, 22, (0.6, -0.4));
    let sample = synthesize_from_clip(&clip, (16, 16), 2, &mut rng).unwrap();
    let input = PreparedSample::<f64>::new(&sample, None).unwrap();
    let extractor = FeatureExtractor::<f64>::fixed();
    let weights = LossWeights::default();
    let space = FusionSpace::Hybrid;
    let mut model = FusionModel::<f64>::init(Arch::default(), 8);
    let mut grad = model.zeros_like();
    sample_gradient(&model, &input, space, &extractor, &weights, &mut grad, 1.0).unwrap();

    let names: Vec<String> = model.named_params().into_iter().map(|(n, _, _)| n).collect();
    let grads: Vec<Vec<f64>> = grad.named_params().into_iter().map(|(_, _, g)| g.to_vec()).collect();
    let eps = 1e-6;
    let mut worst: f64 = 0.0;
    let mut checked = Vec::new();
    for module in ["encoder", "weight", "generator"] {
        let tensors: Vec<usize> = (0..names.len()).filter(|&i| names[i].starts_with(module)).collect();
        for _ in 0..8 {
            let ti = tensors[rng.random_range(0..tensors.len())];
            let pi = rng.random_range(0..grads[ti].len());
            let original = model.params_mut()[ti][pi];
            model.params_mut()[ti][pi] = original + eps;
            let up = sample_loss(&model, &input, space, &extractor, &weights).unwrap();
            model.params_mut()[ti][pi] = original - eps;
            let down = sample_loss(&model, &input, space, &extractor, &weights).unwrap();
            model.params_mut()[ti][pi] = original;
            let numeric = (up - down) / (2.0 * eps);
            let analytic = grads[ti][pi];
            let scale = analytic.abs().max(numeric.abs());
            let rel = if scale < 1e-9 { 0.0 } else { (analytic - numeric).abs() / scale };
            worst = worst.max(rel);
            checked.push(format!("{}[{pi}]", names[ti]));
        }
    }
    outcome(
        worst <= 1e-3,
        format!("{} parameters, worst relative error {worst:.2e}", checked.len()),
    )
}
