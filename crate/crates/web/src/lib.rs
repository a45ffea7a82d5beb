//! Browser front end: a procedural shaky clip that can be fused with the
//! heuristic weight functions, path-adjusted, and inspected for visibility.

use stab_core::flow::{build_warp_bundle, visibility_mask, FallbackFlow, FlowProvider, WarpBundle};
use stab_core::fusion::{fuse_image_space, heuristic_weights, warp_neighbors, FusionFunction};
use stab_core::path::{adjust_bundles, optimize_path, CoverageField, PathOptions};
use stab_core::pipeline::simple_smoother;
use stab_core::raster::{FlowField, Raster};
use stab_core::synth::{jitter_pan_clip, Canvas, KnownMotion, SynthClip};
use stab_core::{Error, Result};
use wasm_bindgen::prelude::*;

const RADIUS: usize = 3;
const SIGMA_T: f64 = 2.0;

fn to_js(e: Error) -> JsError {
    JsError::new(&e.to_string())
}

/// RGBA bytes of a 1- or 3-channel raster in `[0, 1]`.
pub fn rgba(img: &Raster) -> Vec<u8> {
    let q = |v: f64| (v.clamp(0.0, 1.0) * 255.0).round() as u8;
    let mut out = Vec::with_capacity(img.pixel_count() * 4);
    for px in img.data().chunks(img.channels()) {
        match px {
            [v] => out.extend([q(*v), q(*v), q(*v), 255]),
            [r, g, b] => out.extend([q(*r), q(*g), q(*b), 255]),
            _ => out.extend([0, 0, 0, 255]),
        }
    }
    out
}

/// A rendered frame with what it took to make it.
#[wasm_bindgen]
pub struct Rendered {
    pixels: Vec<u8>,
    holes: Vec<u8>,
    hole_fraction: f64,
    shift_x: i32,
    shift_y: i32,
}

#[wasm_bindgen]
impl Rendered {
    pub fn pixels(&self) -> Vec<u8> {
        self.pixels.clone()
    }
    /// Hole pixels in red over transparent.
    pub fn holes(&self) -> Vec<u8> {
        self.holes.clone()
    }
    #[wasm_bindgen(getter)]
    pub fn hole_fraction(&self) -> f64 {
        self.hole_fraction
    }
    #[wasm_bindgen(getter)]
    pub fn shift_x(&self) -> i32 {
        self.shift_x
    }
    #[wasm_bindgen(getter)]
    pub fn shift_y(&self) -> i32 {
        self.shift_y
    }
}

/// Shaky clip with exact motion and smoothing warps.
#[wasm_bindgen]
pub struct Demo {
    clip: SynthClip,
    motion: KnownMotion,
    bundles: Vec<WarpBundle>,
    path: Option<(f64, Vec<(i32, i32)>)>,
}

impl Demo {
    pub fn build(seed: u64, size: usize, frames: usize, jitter: f64) -> Result<Demo> {
        if !(16..=256).contains(&size) || !(2..=120).contains(&frames) {
            return Err(Error::Invalid("size must be 16..=256 and frames 2..=120".into()));
        }
        let clip = jitter_pan_clip(&Canvas::random(seed), frames, size, size, (0.7, 0.2), jitter, seed);
        let motion = clip.flows();
        let warps = simple_smoother(&clip.frames, &motion)?;
        let bundles = (0..frames)
            .map(|k| build_warp_bundle(k, &clip.frames, &warps[k], &motion, RADIUS))
            .collect::<Result<Vec<_>>>()?;
        Ok(Demo {
            clip,
            motion,
            bundles,
            path: None,
        })
    }

    /// Solves the translation path for `lambda_s` (cached per value).
    pub fn solve_path(&mut self, lambda_s: f64) -> Result<&[(i32, i32)]> {
        if self.path.as_ref().map(|p| p.0) != Some(lambda_s) {
            let (h, w) = self.clip.frames[0].dims();
            let cov = CoverageField::from_bundles(&self.bundles);
            let sol = optimize_path(&cov, &PathOptions::for_frame(w, h, lambda_s))?;
            self.path = Some((lambda_s, sol.path));
        }
        Ok(&self.path.as_ref().unwrap().1)
    }

    pub fn render_frame(&mut self, k: usize, function: &str, lambda_s: Option<f64>) -> Result<Rendered> {
        let function: FusionFunction = function.parse()?;
        if function.is_learned() {
            return Err(Error::Invalid("the demo has no trained model".into()));
        }
        let bundle = self
            .bundles
            .get(k)
            .ok_or_else(|| Error::Invalid(format!("no frame {k}")))?
            .clone();
        let (bundle, shift) = match lambda_s {
            Some(l) => {
                let x = self.solve_path(l)?[k];
                (adjust_bundles(&[bundle], &[x])?.remove(0), x)
            }
            None => (bundle, (0, 0)),
        };
        let weights = heuristic_weights(function, &bundle, SIGMA_T)?;
        let warped = warp_neighbors(&bundle, &self.clip.frames)?;
        let fused = fuse_image_space(&bundle, &warped, &weights)?;
        let holes = fused
            .hole_mask
            .data()
            .iter()
            .flat_map(|&v| if v > 0.5 { [255, 40, 40, 200] } else { [0, 0, 0, 0] })
            .collect();
        Ok(Rendered {
            pixels: rgba(&fused.frame),
            holes,
            hole_fraction: fused.hole_fraction(),
            shift_x: shift.0,
            shift_y: shift.1,
        })
    }

    /// Visibility of frame `b` seen from frame `a`, from estimated flow.
    pub fn visibility_map(&self, a: usize, b: usize) -> Result<(Vec<u8>, f64)> {
        let n = self.clip.frames.len();
        if a >= n || b >= n {
            return Err(Error::Invalid(format!("frames must be below {n}")));
        }
        let fb = FallbackFlow::default();
        let (fa, fbb) = (&self.clip.frames[a], &self.clip.frames[b]);
        let fw = fb.flow(fa, fbb)?;
        let bw = fb.flow(fbb, fa)?;
        let m = visibility_mask(&fw, &bw)?;
        let exact = self.motion.between(a, b)?;
        Ok((rgba(&m), mean_endpoint_error(&fw, &exact)))
    }
}

fn mean_endpoint_error(a: &FlowField, b: &FlowField) -> f64 {
    let d = a.data().chunks(2).zip(b.data().chunks(2));
    d.map(|(p, q)| (p[0] - q[0]).hypot(p[1] - q[1])).sum::<f64>() / a.pixel_count() as f64
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: u32, frames: u32, jitter: f64) -> Result<Demo, JsError> {
        Demo::build(seed.into(), size as usize, frames as usize, jitter).map_err(to_js)
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> u32 {
        self.clip.frames[0].width() as u32
    }

    #[wasm_bindgen(getter)]
    pub fn len(&self) -> u32 {
        self.clip.frames.len() as u32
    }

    /// The shaky input frame `k`.
    pub fn input(&self, k: u32) -> Result<Vec<u8>, JsError> {
        self.clip
            .frames
            .get(k as usize)
            .map(|f| rgba(f))
            .ok_or_else(|| JsError::new("frame out of range"))
    }

    /// Renders frame `k`; `lambda_s < 0` skips path adjustment.
    pub fn render(&mut self, k: u32, function: &str, lambda_s: f64) -> Result<Rendered, JsError> {
        let l = (lambda_s >= 0.0).then_some(lambda_s);
        self.render_frame(k as usize, function, l).map_err(to_js)
    }

    /// Visibility mask as RGBA bytes.
    pub fn visibility(&self, a: u32, b: u32) -> Result<Vec<u8>, JsError> {
        self.visibility_map(a as usize, b as usize).map(|v| v.0).map_err(to_js)
    }

    /// Mean endpoint error of the estimated flow `a -> b` against the true motion.
    pub fn flow_error(&self, a: u32, b: u32) -> Result<f64, JsError> {
        self.visibility_map(a as usize, b as usize).map(|v| v.1).map_err(to_js)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn renders_every_weight_function() {
        let mut d = Demo::build(1, 32, 12, 3.0).unwrap();
        for f in ["mean", "gaussian", "argmax", "flow_error"] {
            let r = d.render_frame(5, f, Some(100.0)).unwrap();
            assert_eq!(r.pixels.len(), 32 * 32 * 4);
            assert!((0.0..=1.0).contains(&r.hole_fraction));
        }
        assert!(d.render_frame(5, "learned", None).is_err());
        assert!(d.render_frame(50, "mean", None).is_err());
    }

    #[test]
    fn path_never_adds_holes_in_total() {
        let mut d = Demo::build(2, 32, 10, 4.0).unwrap();
        let total = |d: &mut Demo, l: Option<f64>| -> f64 {
            (0..10).map(|k| d.render_frame(k, "mean", l).unwrap().hole_fraction).sum()
        };
        let plain = total(&mut d, None);
        let adjusted = total(&mut d, Some(0.0));
        assert!(adjusted <= plain + 1e-12, "{adjusted} > {plain}");
    }

    #[test]
    fn visibility_of_a_frame_with_itself_is_full() {
        let d = Demo::build(3, 32, 4, 2.0).unwrap();
        let (m, epe) = d.visibility_map(1, 1).unwrap();
        assert!(m.chunks(4).all(|p| p[0] == 255));
        assert_eq!(epe, 0.0);
    }

    #[test]
    fn rejects_bad_sizes() {
        assert!(Demo::build(0, 8, 10, 1.0).is_err());
        assert!(Demo::build(0, 32, 1, 1.0).is_err());
    }
}
