//! Blend weights and the three fusion spaces.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flow::WarpBundle;
use crate::nn::graph::{self, tensor_to_raster, GraphInput, Weights};
use crate::nn::{FusionModel, Tensor, WeightNet};
use crate::raster::{Frame, Mask, Raster};

/// Masks below this count as "not visible" when flagging holes.
pub const HOLE_THRESHOLD: f64 = 1e-3;
/// Mask level a neighbor needs to be eligible for argmax selection.
pub const ARGMAX_VALID: f64 = 0.5;

/// Where neighbor content is merged.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionSpace {
    /// Blend warped colors.
    Image,
    /// Blend warped features, decode once.
    Feature,
    /// Blend features for guidance, decode per neighbor, blend by confidence.
    #[default]
    Hybrid,
}

impl std::str::FromStr for FusionSpace {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(FusionSpace::Image),
            "feature" => Ok(FusionSpace::Feature),
            "hybrid" => Ok(FusionSpace::Hybrid),
            _ => Err(Error::validation(
                "fusion_space",
                format!("unknown fusion space {s:?}"),
            )),
        }
    }
}

/// How blend weights are computed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionFunction {
    Mean,
    Gaussian,
    Argmax,
    FlowError,
    #[default]
    Learned,
}

impl FusionFunction {
    pub const ALL: [FusionFunction; 5] = [
        FusionFunction::Mean,
        FusionFunction::Gaussian,
        FusionFunction::Argmax,
        FusionFunction::FlowError,
        FusionFunction::Learned,
    ];

    pub fn is_learned(self) -> bool {
        self == FusionFunction::Learned
    }
}

impl std::str::FromStr for FusionFunction {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "mean" => Ok(FusionFunction::Mean),
            "gaussian" => Ok(FusionFunction::Gaussian),
            "argmax" => Ok(FusionFunction::Argmax),
            "flow_error" => Ok(FusionFunction::FlowError),
            "learned" => Ok(FusionFunction::Learned),
            _ => Err(Error::validation(
                "fusion_function",
                format!("unknown fusion function {s:?}"),
            )),
        }
    }
}

/// Per-pixel convex combination over the neighbors of a bundle.
#[derive(Clone, Debug, PartialEq)]
pub struct BlendWeights {
    pub height: usize,
    pub width: usize,
    /// One `H*W` map per neighbor, bundle order.
    pub maps: Vec<Vec<f64>>,
}

impl BlendWeights {
    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }

    /// Largest deviation of a per-pixel sum from one.
    pub fn max_sum_error(&self) -> f64 {
        (0..self.height * self.width)
            .map(|p| (self.maps.iter().map(|m| m[p]).sum::<f64>() - 1.0).abs())
            .fold(0.0, f64::max)
    }

    /// Normalizes raw nonnegative scores per pixel; all-zero pixels become uniform.
    fn normalize(height: usize, width: usize, mut maps: Vec<Vec<f64>>) -> Self {
        let n = maps.len();
        for p in 0..height * width {
            let total: f64 = maps.iter().map(|m| m[p]).sum();
            if total > 0.0 {
                for m in maps.iter_mut() {
                    m[p] /= total;
                }
            } else {
                for m in maps.iter_mut() {
                    m[p] = 1.0 / n as f64;
                }
            }
        }
        BlendWeights {
            height,
            width,
            maps,
        }
    }
}

/// Closed-form weights; `sigma_t` is the temporal width of the gaussian mode.
pub fn heuristic_weights(
    mode: FusionFunction,
    bundle: &WarpBundle,
    sigma_t: f64,
) -> Result<BlendWeights> {
    if bundle.is_empty() {
        return Err(Error::Invalid("empty bundle".into()));
    }
    let (h, w) = bundle.dims();
    let k = bundle.target as f64;
    let raw: Vec<Vec<f64>> = match mode {
        FusionFunction::Mean => bundle.neighbors.iter().map(|n| n.mask.data().to_vec()).collect(),
        FusionFunction::Gaussian => bundle
            .neighbors
            .iter()
            .map(|n| {
                let g = (-(n.index as f64 - k).powi(2) / (2.0 * sigma_t * sigma_t)).exp();
                n.mask.data().iter().map(|m| m * g).collect()
            })
            .collect(),
        FusionFunction::FlowError => bundle
            .neighbors
            .iter()
            .map(|n| {
                n.mask
                    .data()
                    .iter()
                    .zip(n.error.data())
                    .map(|(m, e)| m * (-e).exp())
                    .collect()
            })
            .collect(),
        FusionFunction::Argmax => argmax_selection(bundle),
        FusionFunction::Learned => {
            return Err(Error::Invalid(
                "learned weights need a network; use learned_weights".into(),
            ))
        }
    };
    Ok(BlendWeights::normalize(h, w, raw))
}

fn argmax_selection(bundle: &WarpBundle) -> Vec<Vec<f64>> {
    let (h, w) = bundle.dims();
    let k = bundle.target as i64;
    let n = bundle.len();
    let mut out = vec![vec![0.0; h * w]; n];
    // Tie order: temporal distance, then frame index.
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by_key(|&i| {
        let idx = bundle.neighbors[i].index as i64;
        ((idx - k).abs(), idx)
    });
    for p in 0..h * w {
        let mut best: Option<(f64, usize)> = None;
        for &i in &order {
            let nb = &bundle.neighbors[i];
            if nb.mask.data()[p] < ARGMAX_VALID {
                continue;
            }
            let e = nb.error.data()[p];
            if best.is_none_or(|(be, _)| e < be) {
                best = Some((e, i));
            }
        }
        if best.is_none() {
            // nobody clearly valid: take the most visible, if any
            for &i in &order {
                let m = bundle.neighbors[i].mask.data()[p];
                if m > 0.0 && best.is_none_or(|(bm, _)| -m < bm) {
                    best = Some((-m, i));
                }
            }
        }
        if let Some((_, i)) = best {
            out[i][p] = 1.0;
        }
    }
    out
}

/// Builds `[f_n | M_n | f_k | M_k | e_n]` for every neighbor.
fn weight_inputs(bundle: &WarpBundle, features: &[Tensor<f32>]) -> Result<Vec<Tensor<f32>>> {
    if features.len() != bundle.len() {
        return Err(Error::Shape(format!(
            "{} feature maps for {} neighbors",
            features.len(),
            bundle.len()
        )));
    }
    let (h, w) = bundle.dims();
    let to_t = |r: &Raster| Tensor::from_vec(1, h, w, r.data().iter().map(|&v| v as f32).collect());
    let key = bundle.key_position();
    let key_m = to_t(&bundle.neighbors[key].mask);
    let mut out = Vec::with_capacity(bundle.len());
    for (nb, f) in bundle.neighbors.iter().zip(features) {
        if (f.h, f.w) != (h, w) {
            return Err(Error::Shape("feature map size differs from bundle".into()));
        }
        out.push(Tensor::concat(&[
            f,
            &to_t(&nb.mask),
            &features[key],
            &key_m,
            &to_t(&nb.error),
        ]));
    }
    Ok(out)
}

/// Softmax over per-neighbor logits of a shared weight network.
pub fn learned_weights(
    bundle: &WarpBundle,
    features: &[Tensor<f32>],
    net: &WeightNet<f32>,
) -> Result<BlendWeights> {
    let inputs = weight_inputs(bundle, features)?;
    let logits = inputs
        .iter()
        .map(|inp| net.logits(inp).map(|t| t.data))
        .collect::<Result<Vec<_>>>()?;
    let soft = crate::nn::layers::softmax_maps(&logits);
    let (h, w) = bundle.dims();
    Ok(BlendWeights {
        height: h,
        width: w,
        maps: soft
            .into_iter()
            .map(|m| m.into_iter().map(f64::from).collect())
            .collect(),
    })
}

/// `sum_n items_n * w_n` per pixel and channel.
pub fn weighted_blend(items: &[Raster], weights: &BlendWeights) -> Result<Raster> {
    if items.is_empty() || items.len() != weights.len() {
        return Err(Error::Shape(format!(
            "{} rasters for {} weight maps",
            items.len(),
            weights.len()
        )));
    }
    let (h, w, c) = (items[0].height(), items[0].width(), items[0].channels());
    if (h, w) != (weights.height, weights.width)
        || items
            .iter()
            .any(|r| r.dims() != (h, w) || r.channels() != c)
    {
        return Err(Error::Shape("weighted_blend: raster shapes disagree".into()));
    }
    let mut out = Raster::zeros(h, w, c);
    let data = out.data_mut();
    for (item, map) in items.iter().zip(&weights.maps) {
        for (p, &wt) in map.iter().enumerate() {
            for ch in 0..c {
                data[p * c + ch] += item.data()[p * c + ch] * wt;
            }
        }
    }
    Ok(out)
}

/// Output of a fusion pass.
#[derive(Clone, Debug)]
pub struct FusedResult {
    pub frame: Frame,
    /// 1 where no neighbor was visible.
    pub hole_mask: Mask,
    pub weights: BlendWeights,
    /// Hybrid space only: generator frame and normalized confidence per neighbor.
    pub per_neighbor: Option<Vec<(Frame, Vec<f64>)>>,
}

impl FusedResult {
    pub fn hole_fraction(&self) -> f64 {
        self.hole_mask.mean()
    }
}

pub fn hole_mask(bundle: &WarpBundle) -> Mask {
    let (h, w) = bundle.dims();
    Mask::from_fn(h, w, |y, x| {
        if bundle
            .neighbors
            .iter()
            .all(|n| n.mask.at(y, x) < HOLE_THRESHOLD)
        {
            1.0
        } else {
            0.0
        }
    })
}

/// Warps every neighbor's color frame into the target.
pub fn warp_neighbors(bundle: &WarpBundle, frames: &[Frame]) -> Result<Vec<Raster>> {
    bundle
        .neighbors
        .iter()
        .map(|n| {
            let f = frames
                .get(n.index)
                .ok_or_else(|| Error::Invalid(format!("missing frame {}", n.index)))?;
            crate::flow::backward_warp(f, &n.warp)
        })
        .collect()
}

/// Image-space (late) fusion of already warped colors.
pub fn fuse_image_space(
    bundle: &WarpBundle,
    warped: &[Raster],
    weights: &BlendWeights,
) -> Result<FusedResult> {
    if warped.len() != bundle.len() {
        return Err(Error::Shape(format!(
            "{} warped frames for {} neighbors",
            warped.len(),
            bundle.len()
        )));
    }
    let blended = weighted_blend(warped, weights)?;
    Ok(FusedResult {
        frame: Frame::from_raster_clamped(blended)?,
        hole_mask: hole_mask(bundle),
        weights: weights.clone(),
        per_neighbor: None,
    })
}

fn to_f32_maps(w: &BlendWeights) -> Vec<Vec<f32>> {
    w.maps
        .iter()
        .map(|m| m.iter().map(|&v| v as f32).collect())
        .collect()
}

/// Runs one of the network-backed fusion modes. `fixed` supplies heuristic
/// weights; `None` uses the learned weight network.
pub fn fuse_with_model(
    space: FusionSpace,
    bundle: &WarpBundle,
    frames: &[Frame],
    model: &FusionModel<f32>,
    fixed: Option<&BlendWeights>,
) -> Result<FusedResult> {
    let input = GraphInput::<f32>::from_bundle(bundle, frames)?;
    let fixed_maps = fixed.map(to_f32_maps);
    let weights = match &fixed_maps {
        Some(m) => Weights::Fixed(m),
        None => Weights::Learned,
    };
    let out = graph::forward(model, &input, space, weights, false)?;
    let (h, w) = bundle.dims();
    let maps = out
        .weights
        .iter()
        .map(|m| m.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let per_neighbor = match (out.per_neighbor, out.confidences) {
        (Some(frames), Some(conf)) => Some(
            frames
                .iter()
                .zip(conf)
                .map(|(f, c)| {
                    Ok((
                        Frame::from_raster_clamped(tensor_to_raster(f))?,
                        c.into_iter().map(f64::from).collect(),
                    ))
                })
                .collect::<Result<Vec<_>>>()?,
        ),
        _ => None,
    };
    Ok(FusedResult {
        frame: Frame::from_raster_clamped(tensor_to_raster(&out.image))?,
        hole_mask: hole_mask(bundle),
        weights: BlendWeights {
            height: h,
            width: w,
            maps,
        },
        per_neighbor,
    })
}

/// Feature-space (early) fusion with learned weights and one generator pass.
pub fn fuse_feature_space(
    bundle: &WarpBundle,
    frames: &[Frame],
    model: &FusionModel<f32>,
) -> Result<FusedResult> {
    fuse_with_model(FusionSpace::Feature, bundle, frames, model, None)
}

/// Hybrid fusion: learned feature blend as guidance, per-neighbor decoding,
/// confidence-weighted merge.
pub fn fuse_hybrid(
    bundle: &WarpBundle,
    frames: &[Frame],
    model: &FusionModel<f32>,
) -> Result<FusedResult> {
    fuse_with_model(FusionSpace::Hybrid, bundle, frames, model, None)
}
