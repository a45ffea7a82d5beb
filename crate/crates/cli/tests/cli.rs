use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn stab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_stab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn make_clip(dir: &Path, frames: usize, jitter: f64) -> PathBuf {
    let clip = dir.join("clip");
    let out = stab(&[
        "make-clip",
        s(&clip),
        "--frames",
        &frames.to_string(),
        "--width",
        "48",
        "--height",
        "48",
        "--jitter",
        &jitter.to_string(),
        "--seed",
        "3",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    clip
}

const MEAN_IMAGE: &str = r#", "fusion_space": "image", "fusion_function": "mean""#;

fn write_config(dir: &Path, extra: &str) -> PathBuf {
    let path = dir.join("project.json");
    let body = format!(r#"{{"frame_dir": "clip", "warp_dir": "warps", "output_dir": "out"{extra}}}"#);
    fs::write(&path, body).unwrap();
    path
}

fn pngs(dir: &Path) -> usize {
    fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count()
}

#[test]
fn stabilize_then_evaluate() {
    let tmp = TempDir::new().unwrap();
    make_clip(tmp.path(), 14, 2.0);
    let cfg = write_config(tmp.path(), MEAN_IMAGE);
    let dump = tmp.path().join("path.csv");
    let out = stab(&["stabilize", "--config", s(&cfg), "--auto-smooth", "--dump-path", s(&dump)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let out_dir = tmp.path().join("out");
    assert_eq!(pngs(&out_dir), 14);
    let log: Value = serde_json::from_str(&fs::read_to_string(out_dir.join("run_log.json")).unwrap()).unwrap();
    assert_eq!(log["frames"].as_array().unwrap().len(), 14);
    let dump = fs::read_to_string(dump).unwrap();
    assert!(dump.starts_with("k,x,y,energy_contrib"));
    assert_eq!(dump.lines().count(), 15);

    let report = tmp.path().join("report.json");
    let traces = tmp.path().join("traces.csv");
    let clip = tmp.path().join("clip");
    let out = stab(&["evaluate", s(&clip), s(&out_dir), "--report", s(&report), "--traces", s(&traces)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    for key in ["cropping_ratio", "distortion", "stability", "accumulated_flow"] {
        assert!(r[key].is_number(), "{key} missing from {r}");
    }
    assert_eq!(fs::read_to_string(traces).unwrap().lines().count(), 15);
}

#[test]
fn a_video_scores_perfectly_against_itself() {
    let tmp = TempDir::new().unwrap();
    let clip = make_clip(tmp.path(), 4, 1.0);
    let report = tmp.path().join("r.json");
    let out = stab(&["evaluate", s(&clip), s(&clip), "--report", s(&report)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let r: Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!((r["cropping_ratio"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    assert!((r["distortion"].as_f64().unwrap() - 1.0).abs() < 1e-3);
    // four frames are too few for a stability score
    assert!(r["stability"].is_null());
}

#[test]
fn validation_failures_exit_with_2() {
    let tmp = TempDir::new().unwrap();
    make_clip(tmp.path(), 4, 1.0);
    // no warps on disk and no --auto-smooth
    let cfg = write_config(tmp.path(), MEAN_IMAGE);
    assert_eq!(code(&stab(&["stabilize", "--config", s(&cfg)])), 2);
    // learned weights need a checkpoint
    let cfg = write_config(tmp.path(), r#", "fusion_function": "learned""#);
    assert_eq!(code(&stab(&["stabilize", "--config", s(&cfg), "--auto-smooth"])), 2);
    let cfg = write_config(tmp.path(), &format!(r#"{MEAN_IMAGE}, "lambda_s": -1"#));
    assert_eq!(code(&stab(&["stabilize", "--config", s(&cfg), "--auto-smooth"])), 2);
    assert_eq!(code(&stab(&["make-clip", s(&tmp.path().join("c")), "--frames", "0"])), 2);
    assert_eq!(code(&stab(&["synth-data", s(&tmp.path().join("clip")), s(&tmp.path().join("d")), "--n", "0"])), 2);
    // usage errors from the argument parser
    assert_eq!(code(&stab(&["stabilize"])), 2);
}

#[test]
fn runtime_failures_exit_with_3() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nope.json");
    assert_eq!(code(&stab(&["stabilize", "--config", s(&missing)])), 3);
    fs::write(tmp.path().join("bad.json"), "{ not json").unwrap();
    let out = stab(&["stabilize", "--config", s(&tmp.path().join("bad.json"))]);
    assert_ne!(code(&out), 0);
}

#[test]
fn synth_data_is_deterministic_per_seed() {
    let tmp = TempDir::new().unwrap();
    let clip = make_clip(tmp.path(), 9, 0.0);
    let run = |name: &str, seed: &str| {
        let out_dir = tmp.path().join(name);
        let out = stab(&["synth-data", s(&clip), s(&out_dir), "--n", "3", "--crop", "32", "--seed", seed]);
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
        let mut files: Vec<(String, Vec<u8>)> = Vec::new();
        for sample in fs::read_dir(&out_dir).unwrap() {
            let sample = sample.unwrap().path();
            for f in fs::read_dir(&sample).unwrap() {
                let f = f.unwrap().path();
                let rel = f.strip_prefix(&out_dir).unwrap().to_string_lossy().into_owned();
                files.push((rel, fs::read(&f).unwrap()));
            }
        }
        files.sort();
        files
    };
    let a = run("a", "5");
    assert!(a.len() >= 3);
    assert_eq!(a, run("b", "5"));
    assert_ne!(a, run("c", "6"));
}

#[test]
fn trained_checkpoint_drives_learned_fusion() {
    let tmp = TempDir::new().unwrap();
    let clip = make_clip(tmp.path(), 14, 2.0);
    let data = tmp.path().join("data");
    let out = stab(&["synth-data", s(&clip), s(&data), "--n", "2", "--crop", "32"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let ckpt = tmp.path().join("model.ckpt");
    let out = stab(&[
        "train", "--data", s(&data), "--out", s(&ckpt), "--steps", "10", "--arch", "compact", "--log-every", "1",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(ckpt.exists());
    let trace = fs::read_to_string(tmp.path().join("model.ckpt.loss.csv")).unwrap();
    assert_eq!(trace.lines().count(), 11);

    let cfg = write_config(tmp.path(), MEAN_IMAGE);
    let out = stab(&[
        "stabilize",
        "--config",
        s(&cfg),
        "--auto-smooth",
        "--fusion",
        "hybrid",
        "--weights",
        "learned",
        "--checkpoint",
        s(&ckpt),
        "--output",
        s(&tmp.path().join("learned")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(pngs(&tmp.path().join("learned")), 14);
}
