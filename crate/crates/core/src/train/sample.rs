//! Unstable/stable training pairs cut from stable clips.
//!
//! Seven consecutive frames are cropped at independently jittered positions
//! (the "shaky" input); the center frame is cropped once more at another
//! jittered position to give the ground truth. Offsets move the content, so
//! a crop's origin is `base - offset` and the target-to-key warp is the
//! constant `offset_key - offset_target`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::{build_warp_bundle_with, FlowProvider, WarpBundle};
use crate::raster::{FlowField, Frame, Raster};
use crate::synth::SynthClip;

pub const SAMPLE_FRAMES: usize = 7;
pub const SAMPLE_KEY: usize = 3;

/// Crop placement of one sample.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SampleLayout {
    pub crop_width: usize,
    pub crop_height: usize,
    /// Unjittered top-left corner `(x, y)` in the source frames.
    pub base: (usize, usize),
    /// Content offset `(x, y)` of each input crop.
    pub offsets: Vec<(i32, i32)>,
    pub target_offset: (i32, i32),
    /// Camera position of each source frame when the clip's motion is known.
    #[serde(default)]
    pub motion: Option<Vec<(f64, f64)>>,
}

impl SampleLayout {
    fn origin(&self, offset: (i32, i32)) -> (f64, f64) {
        (
            self.base.0 as f64 - f64::from(offset.0),
            self.base.1 as f64 - f64::from(offset.1),
        )
    }

    pub fn key_warp(&self) -> FlowField {
        let ok = self.offsets[SAMPLE_KEY];
        let ot = self.target_offset;
        FlowField::constant(
            self.crop_height,
            self.crop_width,
            f64::from(ok.0 - ot.0),
            f64::from(ok.1 - ot.1),
        )
    }

    /// Exact flow between input crops `a -> b`, if the clip motion is known.
    pub fn crop_flow(&self, a: usize, b: usize) -> Option<FlowField> {
        let motion = self.motion.as_ref()?;
        let (ca, cb) = (self.origin(self.offsets[a]), self.origin(self.offsets[b]));
        let (pa, pb) = (motion[a], motion[b]);
        Some(FlowField::constant(
            self.crop_height,
            self.crop_width,
            ca.0 + pa.0 - cb.0 - pb.0,
            ca.1 + pa.1 - cb.1 - pb.1,
        ))
    }
}

#[derive(Clone, Debug)]
pub struct TrainSample {
    pub crops: Vec<Frame>,
    pub target: Frame,
    pub layout: SampleLayout,
}

impl TrainSample {
    pub fn key_warp(&self) -> FlowField {
        self.layout.key_warp()
    }

    /// Warp bundle of the target over all seven crops. Uses exact flows when
    /// the motion is known, otherwise `provider`.
    pub fn bundle(&self, provider: Option<&dyn FlowProvider>) -> Result<WarpBundle> {
        let radius = SAMPLE_FRAMES / 2;
        let key_warp = self.key_warp();
        build_warp_bundle_with(SAMPLE_KEY, SAMPLE_FRAMES, &key_warp, radius, |a, b| {
            if let Some(f) = self.layout.crop_flow(a, b) {
                return Ok(f);
            }
            let p = provider.ok_or_else(|| {
                Error::Invalid("sample has no known motion and no flow provider was given".into())
            })?;
            p.flow_between(a, &self.crops[a], b, &self.crops[b])
        })
    }
}

fn crop(frame: &Frame, origin: (usize, usize), w: usize, h: usize) -> Frame {
    let r = Raster::from_fn(h, w, 3, |y, x, c| frame.get(y + origin.1, x + origin.0, c));
    Frame::new(r).expect("crop of a valid frame")
}

fn jitter(rng: &mut impl Rng, j: i32) -> (i32, i32) {
    (rng.random_range(-j..=j), rng.random_range(-j..=j))
}

/// Cuts one sample from `clip` (at least 7 frames, each at least
/// `crop + 2 * max_jitter` on both axes). `motion` gives per-frame camera
/// positions when known.
pub fn synthesize_sample(
    clip: &[Frame],
    motion: Option<&[(f64, f64)]>,
    crop_size: (usize, usize),
    max_jitter: usize,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    let (cw, ch) = crop_size;
    if clip.len() < SAMPLE_FRAMES {
        return Err(Error::Invalid(format!(
            "clip has {} frames, need {SAMPLE_FRAMES}",
            clip.len()
        )));
    }
    if motion.is_some_and(|m| m.len() != clip.len()) {
        return Err(Error::Invalid("motion length differs from clip length".into()));
    }
    let (h, w) = clip[0].dims();
    if clip.iter().any(|f| f.dims() != (h, w)) {
        return Err(Error::Shape("clip frames differ in size".into()));
    }
    let need_w = cw + 2 * max_jitter;
    let need_h = ch + 2 * max_jitter;
    if w < need_w || h < need_h {
        return Err(Error::Size(format!(
            "clip frames are {w}x{h}, need at least {need_w}x{need_h}"
        )));
    }
    let start = rng.random_range(0..=clip.len() - SAMPLE_FRAMES);
    let base = (
        rng.random_range(max_jitter..=w - cw - max_jitter),
        rng.random_range(max_jitter..=h - ch - max_jitter),
    );
    let j = max_jitter as i32;
    let offsets: Vec<(i32, i32)> = (0..SAMPLE_FRAMES).map(|_| jitter(rng, j)).collect();
    let target_offset = jitter(rng, j);
    let origin = |o: (i32, i32)| {
        (
            (base.0 as i32 - o.0) as usize,
            (base.1 as i32 - o.1) as usize,
        )
    };
    let frames = &clip[start..start + SAMPLE_FRAMES];
    let crops = frames
        .iter()
        .zip(&offsets)
        .map(|(f, &o)| crop(f, origin(o), cw, ch))
        .collect();
    let target = crop(&frames[SAMPLE_KEY], origin(target_offset), cw, ch);
    Ok(TrainSample {
        crops,
        target,
        layout: SampleLayout {
            crop_width: cw,
            crop_height: ch,
            base,
            offsets,
            target_offset,
            motion: motion.map(|m| m[start..start + SAMPLE_FRAMES].to_vec()),
        },
    })
}

/// Sample from a procedural clip, carrying its exact motion.
pub fn synthesize_from_clip(
    clip: &SynthClip,
    crop_size: (usize, usize),
    max_jitter: usize,
    rng: &mut impl Rng,
) -> Result<TrainSample> {
    synthesize_sample(&clip.frames, Some(&clip.positions), crop_size, max_jitter, rng)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flow::backward_warp;
    use crate::synth::{pan_clip, static_clip, Canvas};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zero_jitter_means_zero_warp() {
        let clip = static_clip(&Canvas::random(0), 7, 40, 40);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = synthesize_from_clip(&clip, (24, 24), 0, &mut rng).unwrap();
        assert!(s.key_warp().data().iter().all(|&v| v == 0.0));
        assert!(s.crops.iter().all(|c| *c == s.target));
    }

    #[test]
    fn warp_reproduces_target_on_static_clip() {
        let clip = static_clip(&Canvas::random(1), 7, 48, 48);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..5 {
            let s = synthesize_from_clip(&clip, (32, 32), 6, &mut rng).unwrap();
            let warped = backward_warp(&s.crops[SAMPLE_KEY], &s.key_warp()).unwrap();
            let inb = s.key_warp().in_bounds_mask();
            for y in 0..32 {
                for x in 0..32 {
                    if inb.at(y, x) == 1.0 {
                        assert_eq!(warped.pixel(y, x), s.target.pixel(y, x));
                    }
                }
            }
        }
    }

    #[test]
    fn known_offsets_give_known_warp() {
        let layout = SampleLayout {
            crop_width: 16,
            crop_height: 16,
            base: (10, 10),
            offsets: vec![(0, 0), (0, 0), (0, 0), (10, 4), (0, 0), (0, 0), (0, 0)],
            target_offset: (7, 9),
            motion: None,
        };
        assert_eq!(layout.key_warp().at(0, 0), (3.0, -5.0));
    }

    #[test]
    fn exact_crop_flows_align_crops() {
        let clip = pan_clip(&Canvas::random(2), 9, 56, 56, (0.5, -0.25));
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let s = synthesize_from_clip(&clip, (32, 32), 4, &mut rng).unwrap();
        let f = s.layout.crop_flow(5, 2).unwrap();
        let (dx, dy) = f.at(0, 0);
        // the same canvas point appears at p in crop 5 and p + F in crop 2
        let (y, x) = (12usize, 14usize);
        let v = s.crops[2].sample(x as f64 + dx, y as f64 + dy, 0);
        assert!((v - s.crops[5].get(y, x, 0)).abs() < 0.05);
        assert!(s.bundle(None).is_ok());
    }

    #[test]
    fn too_small_clip_is_rejected() {
        let clip = static_clip(&Canvas::random(0), 7, 30, 30);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(synthesize_from_clip(&clip, (24, 24), 4, &mut rng).is_err());
        let short = static_clip(&Canvas::random(0), 6, 60, 60);
        assert!(synthesize_from_clip(&short, (24, 24), 4, &mut rng).is_err());
    }
}
