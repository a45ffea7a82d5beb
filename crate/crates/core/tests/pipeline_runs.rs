use std::path::PathBuf;

use stab_core::flow::FallbackFlow;
use stab_core::fusion::{FusionFunction, FusionSpace};
use stab_core::media::{write_flo, ProjectConfig};
use stab_core::pipeline::{stabilize_frames, warp_file_name, PipelineRun, StabilizeOptions};
use stab_core::synth::{jitter_pan_clip, Canvas};
use stab_core::{FlowField, Frame};

fn config(path_adjust: bool) -> ProjectConfig {
    let mut c = ProjectConfig::with_paths(
        PathBuf::from("unused-frames"),
        PathBuf::from("no-such-warp-dir"),
        PathBuf::from("unused-out"),
    );
    c.fusion_space = FusionSpace::Image;
    c.fusion_function = FusionFunction::Mean;
    c.path_adjust = path_adjust;
    // keep every neighbor so coverage is what the path optimizer saw
    c.sharpness_threshold = 1e-9;
    c
}

fn run(frames: &[Frame], cfg: &ProjectConfig) -> PipelineRun {
    let options = StabilizeOptions {
        auto_smooth: true,
        dry_run: true,
        ..StabilizeOptions::default()
    };
    stabilize_frames(cfg, &options, frames, &FallbackFlow::default(), None).unwrap()
}

fn shaky(seed: u64) -> Vec<Frame> {
    jitter_pan_clip(&Canvas::random(seed), 12, 48, 48, (0.8, 0.0), 4.0, seed).frames
}

#[test]
fn identical_runs_are_bitwise_identical() {
    let frames = shaky(1);
    let a = run(&frames, &config(true));
    let b = run(&frames, &config(true));
    assert_eq!(a.outputs.len(), 12);
    for (x, y) in a.outputs.iter().zip(&b.outputs) {
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }
}

#[test]
fn path_adjustment_never_adds_holes() {
    for seed in [2, 3] {
        let frames = shaky(seed);
        let with = run(&frames, &config(true));
        let without = run(&frames, &config(false));
        assert!(
            with.total_hole_fraction <= without.total_hole_fraction + 1e-12,
            "seed {seed}: {} > {}",
            with.total_hole_fraction,
            without.total_hole_fraction
        );
        assert!(with.path_energy.unwrap() <= with.zero_path_energy.unwrap());
    }
}

#[test]
fn warps_must_match_the_frames() {
    let dir = tempfile::tempdir().unwrap();
    for k in 0..12 {
        write_flo(&dir.path().join(warp_file_name(k)), &FlowField::zeros(40, 40)).unwrap();
    }
    let mut cfg = config(true);
    cfg.warp_dir = dir.path().to_path_buf();
    let options = StabilizeOptions {
        dry_run: true,
        ..StabilizeOptions::default()
    };
    let err = stabilize_frames(&cfg, &options, &shaky(4), &FallbackFlow::default(), None).unwrap_err();
    assert!(matches!(err, stab_core::Error::Shape(_)), "{err}");
}

#[test]
fn learned_modes_need_a_model() {
    let mut cfg = config(true);
    cfg.fusion_space = FusionSpace::Hybrid;
    cfg.fusion_function = FusionFunction::Learned;
    let options = StabilizeOptions {
        auto_smooth: true,
        dry_run: true,
        ..StabilizeOptions::default()
    };
    let err = stabilize_frames(&cfg, &options, &shaky(5), &FallbackFlow::default(), None).unwrap_err();
    assert!(err.is_validation(), "{err}");
    assert!(err.to_string().contains("checkpoint"), "{err}");
}
