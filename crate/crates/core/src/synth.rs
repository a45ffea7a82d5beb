//! Procedural test footage.
//!
//! A [`Canvas`] is an analytic color field, so a view of it at any sub-pixel
//! camera position is rendered exactly; clips built from it come with their
//! true camera positions and therefore exact inter-frame flow.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::raster::{FlowField, Frame};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Wave {
    kx: f64,
    ky: f64,
    phase: f64,
    amp: [f64; 3],
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Blob {
    cx: f64,
    cy: f64,
    inv_two_r2: f64,
    amp: [f64; 3],
}

/// Smooth random color field over the whole plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Canvas {
    waves: Vec<Wave>,
    blobs: Vec<Blob>,
    /// Blobs repeat with this period so the canvas has no empty regions.
    period: f64,
    bias: [f64; 3],
}

impl Canvas {
    pub fn random(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let rgb = |rng: &mut ChaCha8Rng, s: f64| {
            [
                rng.random_range(-s..s),
                rng.random_range(-s..s),
                rng.random_range(-s..s),
            ]
        };
        let waves = (0..10)
            .map(|_| {
                let wavelength: f64 = rng.random_range(5.0..40.0);
                let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
                let k = 2.0 * std::f64::consts::PI / wavelength;
                Wave {
                    kx: k * angle.cos(),
                    ky: k * angle.sin(),
                    phase: rng.random_range(0.0..std::f64::consts::TAU),
                    amp: rgb(&mut rng, 0.5),
                }
            })
            .collect();
        let period = 96.0;
        let blobs = (0..14)
            .map(|_| {
                let r: f64 = rng.random_range(3.0..12.0);
                Blob {
                    cx: rng.random_range(0.0..period),
                    cy: rng.random_range(0.0..period),
                    inv_two_r2: 1.0 / (2.0 * r * r),
                    amp: rgb(&mut rng, 1.5),
                }
            })
            .collect();
        let bias = rgb(&mut rng, 0.3);
        Canvas {
            waves,
            blobs,
            period,
            bias,
        }
    }

    /// Color at a real-valued position; every channel lies in `(0.05, 0.95)`.
    pub fn color(&self, x: f64, y: f64) -> [f64; 3] {
        let mut s = self.bias;
        for w in &self.waves {
            let v = (w.kx * x + w.ky * y + w.phase).sin();
            for c in 0..3 {
                s[c] += w.amp[c] * v;
            }
        }
        let (px, py) = (x.rem_euclid(self.period), y.rem_euclid(self.period));
        for b in &self.blobs {
            // nearest periodic copy
            let dx = wrap(px - b.cx, self.period);
            let dy = wrap(py - b.cy, self.period);
            let g = (-(dx * dx + dy * dy) * b.inv_two_r2).exp();
            for c in 0..3 {
                s[c] += b.amp[c] * g;
            }
        }
        s.map(|v| 0.5 + 0.45 * v.tanh())
    }

    /// The `w x h` view whose top-left pixel sits at `origin`.
    pub fn view(&self, width: usize, height: usize, origin: (f64, f64)) -> Frame {
        let mut data = Vec::with_capacity(width * height * 3);
        for y in 0..height {
            for x in 0..width {
                data.extend(self.color(x as f64 + origin.0, y as f64 + origin.1));
            }
        }
        let raster = crate::raster::Raster::from_vec(height, width, 3, data)
            .expect("buffer sized for the view");
        Frame::new(raster).expect("canvas colors stay inside [0, 1]")
    }
}

fn wrap(d: f64, period: f64) -> f64 {
    let h = 0.5 * period;
    if d > h {
        d - period
    } else if d < -h {
        d + period
    } else {
        d
    }
}

/// Frames with the camera origin each was rendered at.
#[derive(Clone, Debug)]
pub struct SynthClip {
    pub frames: Vec<Frame>,
    pub positions: Vec<(f64, f64)>,
}

impl SynthClip {
    pub fn render(canvas: &Canvas, width: usize, height: usize, positions: Vec<(f64, f64)>) -> Self {
        let frames = crate::par::map_collect(positions.clone(), |p| canvas.view(width, height, p));
        SynthClip { frames, positions }
    }

    /// Exact flow provider for this clip.
    pub fn flows(&self) -> KnownMotion {
        let (h, w) = self.frames[0].dims();
        KnownMotion::new(self.positions.clone(), w, h)
    }
}

pub fn static_clip(canvas: &Canvas, len: usize, width: usize, height: usize) -> SynthClip {
    SynthClip::render(canvas, width, height, vec![(0.0, 0.0); len])
}

/// Constant-velocity pan.
pub fn pan_clip(
    canvas: &Canvas,
    len: usize,
    width: usize,
    height: usize,
    velocity: (f64, f64),
) -> SynthClip {
    let positions = (0..len)
        .map(|t| (velocity.0 * t as f64, velocity.1 * t as f64))
        .collect();
    SynthClip::render(canvas, width, height, positions)
}

/// Constant-velocity pan plus i.i.d. uniform `±jitter` shake on both axes.
pub fn jitter_pan_clip(
    canvas: &Canvas,
    len: usize,
    width: usize,
    height: usize,
    velocity: (f64, f64),
    jitter: f64,
    seed: u64,
) -> SynthClip {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let positions = (0..len)
        .map(|t| {
            let (jx, jy) = if jitter > 0.0 {
                (rng.random_range(-jitter..=jitter), rng.random_range(-jitter..=jitter))
            } else {
                (0.0, 0.0)
            };
            (velocity.0 * t as f64 + jx, velocity.1 * t as f64 + jy)
        })
        .collect();
    SynthClip::render(canvas, width, height, positions)
}

/// Exact flow between frames of a purely translating camera.
#[derive(Clone, Debug)]
pub struct KnownMotion {
    positions: Vec<(f64, f64)>,
    width: usize,
    height: usize,
}

impl KnownMotion {
    pub fn new(positions: Vec<(f64, f64)>, width: usize, height: usize) -> Self {
        KnownMotion {
            positions,
            width,
            height,
        }
    }

    /// `F_{a->b}`: a point seen at `p` in frame `a` is at `p + pos_a - pos_b` in `b`.
    pub fn between(&self, a: usize, b: usize) -> Result<FlowField> {
        let (pa, pb) = match (self.positions.get(a), self.positions.get(b)) {
            (Some(pa), Some(pb)) => (pa, pb),
            _ => return Err(Error::Invalid(format!("no camera position for pair {a}->{b}"))),
        };
        Ok(FlowField::constant(
            self.height,
            self.width,
            pa.0 - pb.0,
            pa.1 - pb.1,
        ))
    }
}

impl FlowProvider for KnownMotion {
    fn flow(&self, _a: &Frame, _b: &Frame) -> Result<FlowField> {
        Err(Error::Invalid("known-motion flow needs frame indices".into()))
    }

    fn flow_between(&self, ia: usize, _a: &Frame, ib: usize, _b: &Frame) -> Result<FlowField> {
        self.between(ia, ib)
    }
}
