//! L1 plus feature-space L1 ("perceptual") reconstruction loss.
//!
//! No pretrained classifier ships with this crate, so the feature extractor
//! is a fixed, randomly initialized three-stage CNN. Its weights depend only
//! on [`EXTRACTOR_SEED`] and are never trained.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::graph::frame_to_tensor;
use crate::nn::layers::{avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, Conv2d};
use crate::nn::{Scalar, Tensor};
use crate::raster::Raster;

pub const EXTRACTOR_SEED: u64 = 0x5eed_f00d;
const STAGE_WIDTHS: [usize; 3] = [8, 16, 32];

/// Per-stage weights of the feature term; the pixel L1 term always has weight 1.
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub perceptual: Vec<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            perceptual: vec![1.0 / 32.0, 1.0 / 16.0, 1.0 / 8.0],
        }
    }
}

impl LossWeights {
    pub fn l1_only() -> Self {
        LossWeights {
            perceptual: vec![0.0; STAGE_WIDTHS.len()],
        }
    }
}

/// Fixed convolutional feature pyramid.
#[derive(Clone, Debug)]
pub struct FeatureExtractor<T> {
    pub stages: Vec<Conv2d<T>>,
}

struct StageCache<T> {
    input: Tensor<T>,
    output: Tensor<T>,
}

impl<T: Scalar> FeatureExtractor<T> {
    pub fn fixed() -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(EXTRACTOR_SEED);
        let mut cin = 3;
        let stages = STAGE_WIDTHS
            .iter()
            .map(|&cout| {
                let c = Conv2d::init(cin, cout, 1.0, &mut rng);
                cin = cout;
                c
            })
            .collect();
        FeatureExtractor { stages }
    }

    /// Stage outputs; stage `l > 0` runs on the 2x pooled output of stage `l - 1`.
    pub fn features(&self, x: &Tensor<T>) -> Vec<Tensor<T>> {
        self.run(x).into_iter().map(|c| c.output).collect()
    }

    fn run(&self, x: &Tensor<T>) -> Vec<StageCache<T>> {
        let mut caches: Vec<StageCache<T>> = Vec::with_capacity(self.stages.len());
        for (l, conv) in self.stages.iter().enumerate() {
            let input = match caches.last() {
                None => x.clone(),
                Some(prev) => avg_pool2(&prev.output),
            };
            let output = leaky_relu(conv.forward(&input));
            debug_assert!(l < STAGE_WIDTHS.len());
            caches.push(StageCache { input, output });
        }
        caches
    }

    /// Input gradient given per-stage output gradients.
    fn backward(&self, caches: &[StageCache<T>], mut d_out: Vec<Tensor<T>>) -> Tensor<T> {
        let mut scratch: Vec<Conv2d<T>> = self
            .stages
            .iter()
            .map(|c| Conv2d::zeros(c.cin, c.cout))
            .collect();
        let mut d_in = None;
        for l in (0..self.stages.len()).rev() {
            let d = leaky_relu_backward(&caches[l].output, d_out[l].clone());
            let dx = self.stages[l]
                .backward(&caches[l].input, &d, &mut scratch[l], true)
                .unwrap();
            if l > 0 {
                let prev = &caches[l - 1].output;
                d_out[l - 1].add_assign(&avg_pool2_backward(&dx, prev.h, prev.w));
            } else {
                d_in = Some(dx);
            }
        }
        d_in.unwrap()
    }
}

fn mean_abs_diff<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> f64 {
    let s: f64 = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| (*x - *y).abs().as_f64())
        .sum();
    s / a.data.len() as f64
}

/// `d mean|a - b| / d a`, with the subgradient 0 at equality.
fn mean_abs_grad<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, scale: f64) -> Tensor<T> {
    let g = T::from_f64(scale / a.data.len() as f64);
    let data = a
        .data
        .iter()
        .zip(&b.data)
        .map(|(x, y)| {
            if x > y {
                g
            } else if x < y {
                -g
            } else {
                T::zero()
            }
        })
        .collect();
    Tensor::from_vec(a.c, a.h, a.w, data)
}

fn check(pred: &Tensor<impl Scalar>, gt: &Tensor<impl Scalar>, weights: &LossWeights) -> Result<()> {
    if (pred.c, pred.h, pred.w) != (gt.c, gt.h, gt.w) {
        return Err(Error::Shape(format!(
            "loss inputs differ: {}x{}x{} vs {}x{}x{}",
            pred.c, pred.h, pred.w, gt.c, gt.h, gt.w
        )));
    }
    if weights.perceptual.len() > STAGE_WIDTHS.len() {
        return Err(Error::Invalid(format!(
            "{} perceptual weights for {} extractor stages",
            weights.perceptual.len(),
            STAGE_WIDTHS.len()
        )));
    }
    if weights.perceptual.iter().any(|w| !(*w >= 0.0)) {
        return Err(Error::Invalid("perceptual weights must be >= 0".into()));
    }
    Ok(())
}

/// Loss value and its gradient with respect to `pred`.
pub fn loss_and_grad<T: Scalar>(
    pred: &Tensor<T>,
    gt: &Tensor<T>,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<(f64, Tensor<T>)> {
    check(pred, gt, weights)?;
    let mut loss = mean_abs_diff(pred, gt);
    let mut grad = mean_abs_grad(pred, gt, 1.0);
    if weights.perceptual.iter().any(|&w| w > 0.0) {
        let cp = extractor.run(pred);
        let fg = extractor.features(gt);
        let mut d_out = Vec::with_capacity(cp.len());
        for (l, (c, g)) in cp.iter().zip(&fg).enumerate() {
            let lambda = weights.perceptual.get(l).copied().unwrap_or(0.0);
            loss += lambda * mean_abs_diff(&c.output, g);
            d_out.push(mean_abs_grad(&c.output, g, lambda));
        }
        grad.add_assign(&extractor.backward(&cp, d_out));
    }
    Ok((loss, grad))
}

/// `mean|pred - gt| + sum_l lambda_l mean|psi_l(pred) - psi_l(gt)|` on images.
pub fn perceptual_l1_loss(
    pred: &Raster,
    gt: &Raster,
    extractor: &FeatureExtractor<f64>,
    weights: &LossWeights,
) -> Result<f64> {
    let p: Tensor<f64> = frame_to_tensor(pred);
    let g: Tensor<f64> = frame_to_tensor(gt);
    check(&p, &g, weights)?;
    let mut loss = mean_abs_diff(&p, &g);
    if weights.perceptual.iter().any(|&w| w > 0.0) {
        for (l, (a, b)) in extractor
            .features(&p)
            .iter()
            .zip(&extractor.features(&g))
            .enumerate()
        {
            loss += weights.perceptual.get(l).copied().unwrap_or(0.0) * mean_abs_diff(a, b);
        }
    }
    Ok(loss)
}
