//! On-disk layout of clips and training samples.
//!
//! A clip is a frame directory, optionally with `motion.json` holding the
//! camera position of every frame. A sample directory holds the seven input
//! crops as numbered PNGs, `target.png`, and `layout.json`.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::sample::{synthesize_sample, SampleLayout, TrainSample, SAMPLE_FRAMES};
use crate::error::{Error, Result};
use crate::media::{frame_file_name, read_frame, read_frame_sequence, write_frame, write_frame_sequence};
use crate::raster::Frame;
use crate::synth::SynthClip;

pub const MOTION_FILE: &str = "motion.json";
pub const LAYOUT_FILE: &str = "layout.json";
pub const TARGET_FILE: &str = "target.png";

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Format(e.to_string()))?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn write_clip(dir: &Path, clip: &SynthClip) -> Result<()> {
    write_frame_sequence(dir, &clip.frames)?;
    write_json(&dir.join(MOTION_FILE), &clip.positions)
}

/// Frames of a clip plus its motion when recorded.
pub fn read_clip(dir: &Path) -> Result<(Vec<Frame>, Option<Vec<(f64, f64)>>)> {
    let frames = read_frame_sequence(dir)?;
    let motion_path = dir.join(MOTION_FILE);
    let motion = if motion_path.exists() {
        Some(read_json(&motion_path)?)
    } else {
        None
    };
    Ok((frames, motion))
}

/// `src` itself if it holds frames, otherwise its subdirectories, sorted.
pub fn clip_dirs(src: &Path) -> Result<Vec<PathBuf>> {
    if src.join(frame_file_name(0)).exists() {
        return Ok(vec![src.to_path_buf()]);
    }
    let mut dirs: Vec<PathBuf> = fs::read_dir(src)
        .map_err(|e| Error::io(src, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation(
            "src",
            format!("{} contains no clips", src.display()),
        ));
    }
    Ok(dirs)
}

pub fn write_sample(dir: &Path, sample: &TrainSample) -> Result<()> {
    write_frame_sequence(dir, &sample.crops)?;
    write_frame(&dir.join(TARGET_FILE), &sample.target)?;
    write_json(&dir.join(LAYOUT_FILE), &sample.layout)
}

pub fn read_sample(dir: &Path) -> Result<TrainSample> {
    let crops = read_frame_sequence(dir)?;
    if crops.len() != SAMPLE_FRAMES {
        return Err(Error::Format(format!(
            "{}: expected {SAMPLE_FRAMES} crops, found {}",
            dir.display(),
            crops.len()
        )));
    }
    let target = read_frame(&dir.join(TARGET_FILE))?;
    let layout: SampleLayout = read_json(&dir.join(LAYOUT_FILE))?;
    if layout.offsets.len() != SAMPLE_FRAMES
        || crops[0].dims() != (layout.crop_height, layout.crop_width)
        || target.dims() != crops[0].dims()
    {
        return Err(Error::Format(format!(
            "{}: layout does not match the stored crops",
            dir.display()
        )));
    }
    Ok(TrainSample {
        crops,
        target,
        layout,
    })
}

pub fn sample_dir_name(i: usize) -> String {
    format!("sample_{i:06}")
}

pub fn write_dataset(out: &Path, samples: &[TrainSample]) -> Result<()> {
    for (i, s) in samples.iter().enumerate() {
        write_sample(&out.join(sample_dir_name(i)), s)?;
    }
    Ok(())
}

pub fn read_dataset(dir: &Path) -> Result<Vec<TrainSample>> {
    let mut dirs: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(LAYOUT_FILE).exists())
        .collect();
    dirs.sort();
    if dirs.is_empty() {
        return Err(Error::validation(
            "data",
            format!("no samples under {}", dir.display()),
        ));
    }
    dirs.iter().map(|d| read_sample(d)).collect()
}

/// Draws `n` samples from the clips under `src`.
pub fn synthesize_dataset(
    src: &Path,
    n: usize,
    seed: u64,
    crop_size: (usize, usize),
    max_jitter: usize,
) -> Result<Vec<TrainSample>> {
    let clips = clip_dirs(src)?
        .iter()
        .map(|d| read_clip(d))
        .collect::<Result<Vec<_>>>()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (frames, motion) = &clips[rng.random_range(0..clips.len())];
            synthesize_sample(frames, motion.as_deref(), crop_size, max_jitter, &mut rng)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{pan_clip, Canvas};

    #[test]
    fn sample_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let clip = pan_clip(&Canvas::random(1), 8, 40, 40, (0.5, 0.0));
        write_clip(&dir.path().join("clips/a"), &clip).unwrap();
        let samples = synthesize_dataset(&dir.path().join("clips"), 2, 5, (24, 24), 3).unwrap();
        assert!(samples[0].layout.motion.is_some());
        write_dataset(&dir.path().join("data"), &samples).unwrap();
        let back = read_dataset(&dir.path().join("data")).unwrap();
        assert_eq!(back.len(), 2);
        assert_eq!(back[1].layout, samples[1].layout);
        for (a, b) in back[1].crops.iter().zip(&samples[1].crops) {
            assert!(a.max_abs_diff(b) <= 0.5 / 255.0 + 1e-12);
        }
    }
}
