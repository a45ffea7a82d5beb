//! Differentiable rendering of one target frame from its warped neighbors.
//!
//! The same forward pass serves inference and training; with `record` set it
//! keeps the intermediates [`backward`] needs.

use super::layers::{softmax_maps, softmax_maps_backward};
use super::models::{EncoderCache, FusionModel, GeneratorCache, WeightCache, COLOR_CHANNELS};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::flow::WarpBundle;
use crate::fusion::FusionSpace;
use crate::raster::{BilinearTap, FlowField, Frame, Raster};

/// Precomputed bilinear taps of one backward warp.
#[derive(Clone, Debug)]
pub struct WarpPlan {
    taps: Vec<BilinearTap>,
    src_h: usize,
    src_w: usize,
}

impl WarpPlan {
    pub fn new(flow: &FlowField, src_h: usize, src_w: usize) -> Self {
        let (h, w) = flow.dims();
        let mut taps = Vec::with_capacity(h * w);
        for y in 0..h {
            for x in 0..w {
                let (dx, dy) = flow.at(y, x);
                taps.push(BilinearTap::new(x as f64 + dx, y as f64 + dy, src_w, src_h));
            }
        }
        WarpPlan { taps, src_h, src_w }
    }

    pub fn apply<T: Scalar>(&self, src: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
        let mut out = Tensor::zeros(src.c, h, w);
        for c in 0..src.c {
            let s = src.channel(c);
            let o = out.channel_mut(c);
            for (p, tap) in self.taps.iter().enumerate() {
                let mut v = T::zero();
                for i in 0..4 {
                    v += T::from_f64(tap.weights[i]) * s[tap.index[i]];
                }
                o[p] = v;
            }
        }
        out
    }

    pub fn adjoint<T: Scalar>(&self, d: &Tensor<T>) -> Tensor<T> {
        let mut out = Tensor::zeros(d.c, self.src_h, self.src_w);
        for c in 0..d.c {
            let g = d.channel(c);
            let o = out.channel_mut(c);
            for (p, tap) in self.taps.iter().enumerate() {
                for i in 0..4 {
                    o[tap.index[i]] += T::from_f64(tap.weights[i]) * g[p];
                }
            }
        }
        out
    }
}

pub fn frame_to_tensor<T: Scalar>(frame: &Raster) -> Tensor<T> {
    let (h, w, c) = (frame.height(), frame.width(), frame.channels());
    let mut t = Tensor::zeros(c, h, w);
    for y in 0..h {
        for x in 0..w {
            let px = frame.pixel(y, x);
            for ch in 0..c {
                t.data[ch * h * w + y * w + x] = T::from_f64(px[ch]);
            }
        }
    }
    t
}

pub fn tensor_to_raster<T: Scalar>(t: &Tensor<T>) -> Raster {
    Raster::from_fn(t.h, t.w, t.c, |y, x, c| t.data[c * t.h * t.w + y * t.w + x].as_f64())
}

/// Per-neighbor inputs of the fusion graph, all in target space except the frames.
#[derive(Clone, Debug)]
pub struct GraphInput<T> {
    /// Source-space neighbor images, `3 x H x W`.
    pub frames: Vec<Tensor<T>>,
    pub plans: Vec<WarpPlan>,
    pub masks: Vec<Vec<T>>,
    pub errors: Vec<Vec<T>>,
    /// Position of the key frame in the lists above.
    pub key: usize,
    pub h: usize,
    pub w: usize,
}

impl<T: Scalar> GraphInput<T> {
    /// `frames` is the whole sequence, indexed by frame number.
    pub fn from_bundle(bundle: &WarpBundle, frames: &[Frame]) -> Result<Self> {
        let (h, w) = bundle.dims();
        let mut input = GraphInput {
            frames: Vec::new(),
            plans: Vec::new(),
            masks: Vec::new(),
            errors: Vec::new(),
            key: bundle.key_position(),
            h,
            w,
        };
        for n in &bundle.neighbors {
            let frame = frames.get(n.index).ok_or_else(|| {
                Error::Invalid(format!("bundle references missing frame {}", n.index))
            })?;
            input.frames.push(frame_to_tensor(frame));
            input.plans.push(WarpPlan::new(&n.warp, frame.height(), frame.width()));
            input
                .masks
                .push(n.mask.data().iter().map(|&v| T::from_f64(v)).collect());
            input
                .errors
                .push(n.error.data().iter().map(|&v| T::from_f64(v)).collect());
        }
        Ok(input)
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Warped color frames.
    pub fn warped_colors(&self) -> Vec<Tensor<T>> {
        self.frames
            .iter()
            .zip(&self.plans)
            .map(|(f, p)| p.apply(f, self.h, self.w))
            .collect()
    }

    pub fn union_mask(&self) -> Vec<T> {
        (0..self.h * self.w)
            .map(|p| {
                self.masks
                    .iter()
                    .map(|m| m[p])
                    .fold(T::zero(), |a, b| a.max(b))
            })
            .collect()
    }
}

/// Where blend weights come from.
pub enum Weights<'a, T> {
    Learned,
    Fixed(&'a [Vec<T>]),
}

struct Cache<T> {
    enc: Vec<EncoderCache<T>>,
    features: Vec<Tensor<T>>,
    weight_inputs: Vec<Tensor<T>>,
    weight_caches: Vec<WeightCache<T>>,
    fused: Tensor<T>,
    warped_colors: Vec<Tensor<T>>,
    gen_inputs: Vec<Tensor<T>>,
    gen_caches: Vec<GeneratorCache<T>>,
    gen_rgb: Vec<Tensor<T>>,
}

pub struct GraphOutput<T> {
    /// Rendered frame, `3 x H x W`.
    pub image: Tensor<T>,
    /// Blend weights per neighbor (sum to one per pixel).
    pub weights: Vec<Vec<T>>,
    /// Normalized generator confidences (hybrid space only).
    pub confidences: Option<Vec<Vec<T>>>,
    /// Per-neighbor generator frames (hybrid space only).
    pub per_neighbor: Option<Vec<Tensor<T>>>,
    /// Fused feature map (absent for fixed-weight image fusion).
    pub fused: Option<Tensor<T>>,
    cache: Option<Cache<T>>,
}

fn mask_tensor<T: Scalar>(m: &[T], h: usize, w: usize) -> Tensor<T> {
    Tensor::from_vec(1, h, w, m.to_vec())
}

fn weighted_sum<T: Scalar>(items: &[Tensor<T>], weights: &[Vec<T>]) -> Tensor<T> {
    let (c, h, w) = (items[0].c, items[0].h, items[0].w);
    let plane = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for (item, wt) in items.iter().zip(weights) {
        for ch in 0..c {
            let src = item.channel(ch);
            let dst = &mut out.data[ch * plane..(ch + 1) * plane];
            for p in 0..plane {
                dst[p] += src[p] * wt[p];
            }
        }
    }
    out
}

/// `d(sum_n w_n x_n)/d w_n` contracted with `d_out`, per pixel.
fn weight_grads<T: Scalar>(items: &[Tensor<T>], d_out: &Tensor<T>) -> Vec<Vec<T>> {
    let plane = d_out.plane();
    items
        .iter()
        .map(|item| {
            let mut g = vec![T::zero(); plane];
            for ch in 0..d_out.c {
                let a = item.channel(ch);
                let d = d_out.channel(ch);
                for p in 0..plane {
                    g[p] += a[p] * d[p];
                }
            }
            g
        })
        .collect()
}

fn scale_by_map<T: Scalar>(t: &Tensor<T>, m: &[T]) -> Tensor<T> {
    let mut out = t.clone();
    let plane = t.plane();
    for ch in 0..t.c {
        for (v, &s) in out.data[ch * plane..(ch + 1) * plane].iter_mut().zip(m) {
            *v *= s;
        }
    }
    out
}

fn needs_encoder<T>(space: FusionSpace, weights: &Weights<'_, T>) -> bool {
    !(space == FusionSpace::Image && matches!(weights, Weights::Fixed(_)))
}

pub fn forward<T: Scalar>(
    model: &FusionModel<T>,
    input: &GraphInput<T>,
    space: FusionSpace,
    weights: Weights<'_, T>,
    record: bool,
) -> Result<GraphOutput<T>> {
    let n = input.len();
    if n == 0 {
        return Err(Error::Invalid("fusion needs at least one neighbor".into()));
    }
    if input.masks.len() != n || input.errors.len() != n || input.plans.len() != n {
        return Err(Error::Shape("fusion inputs disagree on neighbor count".into()));
    }
    if let Weights::Fixed(w) = &weights {
        if w.len() != n {
            return Err(Error::Shape(format!(
                "{} weight maps for {n} neighbors",
                w.len()
            )));
        }
    }
    let (h, w) = (input.h, input.w);

    let mut enc = Vec::new();
    let mut features = Vec::new();
    if needs_encoder(space, &weights) {
        for (frame, plan) in input.frames.iter().zip(&input.plans) {
            let (x, c) = model.encoder.forward(frame);
            features.push(plan.apply(&x, h, w));
            if record {
                enc.push(c);
            }
        }
    }

    let mut weight_inputs = Vec::new();
    let mut weight_caches = Vec::new();
    let blend = match weights {
        Weights::Fixed(wts) => wts.to_vec(),
        Weights::Learned => {
            let key_f = &features[input.key];
            let key_m = mask_tensor(&input.masks[input.key], h, w);
            let mut logits = Vec::with_capacity(n);
            for i in 0..n {
                let inp = Tensor::concat(&[
                    &features[i],
                    &mask_tensor(&input.masks[i], h, w),
                    key_f,
                    &key_m,
                    &mask_tensor(&input.errors[i], h, w),
                ]);
                let (z, c) = model.weight_net.forward(&inp);
                logits.push(z.data);
                if record {
                    weight_inputs.push(inp);
                    weight_caches.push(c);
                }
            }
            softmax_maps(&logits)
        }
    };

    let fused = if features.is_empty() {
        None
    } else {
        Some(weighted_sum(&features, &blend))
    };

    let mut warped_colors = Vec::new();
    let mut gen_inputs = Vec::new();
    let mut gen_caches = Vec::new();
    let mut gen_rgb = Vec::new();
    let mut confidences = None;
    let mut per_neighbor = None;

    let image = match space {
        FusionSpace::Image => {
            let colors = input.warped_colors();
            let out = weighted_sum(&colors, &blend);
            if record {
                warped_colors = colors;
            }
            out
        }
        FusionSpace::Feature => {
            let f = fused.as_ref().unwrap();
            let inp = Tensor::concat(&[f, &mask_tensor(&input.union_mask(), h, w), f]);
            let (g, c) = model.generator.forward(&inp);
            if record {
                gen_inputs.push(inp);
                gen_caches.push(c);
            }
            g.rgb
        }
        FusionSpace::Hybrid => {
            let f = fused.as_ref().unwrap();
            let mut rgbs = Vec::with_capacity(n);
            let mut confs = Vec::with_capacity(n);
            for i in 0..n {
                let inp =
                    Tensor::concat(&[&features[i], &mask_tensor(&input.masks[i], h, w), f]);
                let (g, c) = model.generator.forward(&inp);
                rgbs.push(g.rgb);
                confs.push(g.confidence.data);
                if record {
                    gen_inputs.push(inp);
                    gen_caches.push(c);
                }
            }
            let conf = softmax_maps(&confs);
            let out = weighted_sum(&rgbs, &conf);
            if record {
                gen_rgb = rgbs.clone();
            }
            confidences = Some(conf);
            per_neighbor = Some(rgbs);
            out
        }
    };

    let cache = record.then(|| Cache {
        enc,
        features,
        weight_inputs,
        weight_caches,
        fused: fused.clone().unwrap_or_else(|| Tensor::zeros(0, h, w)),
        warped_colors,
        gen_inputs,
        gen_caches,
        gen_rgb,
    });
    Ok(GraphOutput {
        image,
        weights: blend,
        confidences,
        per_neighbor,
        fused,
        cache,
    })
}

/// Accumulates parameter gradients of `d_image` (gradient of the loss with
/// respect to the rendered frame) into `grad`.
pub fn backward<T: Scalar>(
    model: &FusionModel<T>,
    input: &GraphInput<T>,
    space: FusionSpace,
    learned_weights: bool,
    out: &GraphOutput<T>,
    d_image: &Tensor<T>,
    grad: &mut FusionModel<T>,
) -> Result<()> {
    let cache = out
        .cache
        .as_ref()
        .ok_or_else(|| Error::Invalid("backward needs a recorded forward pass".into()))?;
    let n = input.len();
    let (h, w) = (input.h, input.w);
    let d = model.arch.feat_dim;
    let plane = h * w;

    let mut d_weights: Vec<Vec<T>> = vec![vec![T::zero(); plane]; n];
    let mut d_features: Vec<Tensor<T>> = if cache.features.is_empty() {
        Vec::new()
    } else {
        vec![Tensor::zeros(d, h, w); n]
    };
    let mut d_fused = Tensor::zeros(cache.fused.c, h, w);

    match space {
        FusionSpace::Image => {
            d_weights = weight_grads(&cache.warped_colors, d_image);
        }
        FusionSpace::Feature => {
            let zero_conf = Tensor::zeros(1, h, w);
            let d_in = model.generator.backward(
                &cache.gen_inputs[0],
                &cache.gen_caches[0],
                d_image,
                &zero_conf,
                &mut grad.generator,
            );
            d_fused.add_assign(&d_in.slice_channels(0, d));
            d_fused.add_assign(&d_in.slice_channels(d + 1, 2 * d + 1));
        }
        FusionSpace::Hybrid => {
            let conf = out.confidences.as_ref().unwrap();
            let d_conf_soft = weight_grads(&cache.gen_rgb, d_image);
            let d_conf = softmax_maps_backward(conf, &d_conf_soft);
            for i in 0..n {
                let d_rgb = scale_by_map(d_image, &conf[i]);
                let d_c = Tensor::from_vec(1, h, w, d_conf[i].clone());
                let d_in = model.generator.backward(
                    &cache.gen_inputs[i],
                    &cache.gen_caches[i],
                    &d_rgb,
                    &d_c,
                    &mut grad.generator,
                );
                d_features[i].add_assign(&d_in.slice_channels(0, d));
                d_fused.add_assign(&d_in.slice_channels(d + 1, 2 * d + 1));
            }
        }
    }

    if !cache.features.is_empty() && space != FusionSpace::Image {
        // fused = sum_n w_n f_n
        let dw = weight_grads(&cache.features, &d_fused);
        for i in 0..n {
            for p in 0..plane {
                d_weights[i][p] += dw[i][p];
            }
            d_features[i].add_assign(&scale_by_map(&d_fused, &out.weights[i]));
        }
    }

    if learned_weights {
        let d_logits = softmax_maps_backward(&out.weights, &d_weights);
        for i in 0..n {
            let dz = Tensor::from_vec(1, h, w, d_logits[i].clone());
            let d_in = model.weight_net.backward(
                &cache.weight_inputs[i],
                &cache.weight_caches[i],
                &dz,
                &mut grad.weight_net,
            );
            d_features[i].add_assign(&d_in.slice_channels(0, d));
            d_features[input.key].add_assign(&d_in.slice_channels(d + 1, 2 * d + 1));
        }
    }

    for i in 0..d_features.len() {
        let mut d_src = input.plans[i].adjoint(&d_features[i]);
        // color passthrough channels carry no parameters
        let colors = COLOR_CHANNELS * d_src.plane();
        d_src.data[..colors]
            .iter_mut()
            .for_each(|v| *v = T::zero());
        model
            .encoder
            .backward(&input.frames[i], &cache.enc[i], &d_src, &mut grad.encoder);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warp_plan_adjoint() {
        let flow = FlowField::from_fn(6, 7, |y, x| ((x as f64 * 0.37).sin() * 2.0, (y as f64 * 0.21).cos()));
        let plan = WarpPlan::new(&flow, 6, 7);
        let src = Tensor::from_vec(2, 6, 7, (0..84).map(|v| (v as f64 * 0.13).sin()).collect());
        let g = Tensor::from_vec(2, 6, 7, (0..84).map(|v| (v as f64 * 0.29).cos()).collect());
        let fwd = plan.apply(&src, 6, 7);
        let lhs: f64 = fwd.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
        let adj = plan.adjoint(&g);
        let rhs: f64 = src.data.iter().zip(&adj.data).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
