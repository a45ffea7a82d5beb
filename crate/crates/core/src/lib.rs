//! Full-frame video stabilization.
//!
//! Every target frame is rendered by warping a window of neighboring input
//! frames into the stabilized camera and fusing them, either directly in
//! color space, in a learned feature space, or in the hybrid space where each
//! neighbor is decoded separately and the decoded frames are merged with
//! learned confidences. Nothing is cropped: pixels no neighbor can see are
//! filled by the fusion fallback or by the generator.
//!
//! Module map:
//!
//! * [`raster`], [`media`]: frames, flow fields, masks and their on-disk formats.
//! * [`flow`]: flow estimation, chaining, backward warping, occlusion masks.
//! * [`fusion`]: blending weights and the three fusion spaces.
//! * [`nn`]: the encoder, weight predictor and generator networks.
//! * [`train`]: training-pair synthesis, loss, and the optimization loop.
//! * [`path`]: per-frame translation adjustment for better coverage.
//! * [`metrics`]: cropping ratio, distortion, stability, accumulated flow, PSNR/SSIM.
//! * [`pipeline`]: the end-to-end stabilizer and its helpers.
//! * [`synth`]: procedural canvases and shaky clips with known camera motion.

pub mod error;
pub mod flow;
pub mod fusion;
pub mod media;
pub mod metrics;
pub mod nn;
pub mod path;
pub mod pipeline;
pub mod raster;
pub mod synth;
pub mod train;

mod par;

pub use error::{Error, Result};
pub use raster::{FlowField, Frame, Mask, Raster};
