//! Training of the encoder, weight predictor and generator.

pub mod dataset;
pub mod loss;
pub mod optim;
pub mod sample;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::flow::FlowProvider;
use crate::fusion::FusionSpace;
use crate::metrics::psnr;
use crate::nn::graph::{self, frame_to_tensor, tensor_to_raster, GraphInput, Weights};
use crate::nn::{Arch, FusionModel, Scalar, Tensor};

pub use loss::{loss_and_grad, perceptual_l1_loss, FeatureExtractor, LossWeights};
pub use optim::Adam;
pub use sample::{synthesize_from_clip, synthesize_sample, SampleLayout, TrainSample};

/// A sample with its fusion inputs precomputed.
#[derive(Clone, Debug)]
pub struct PreparedSample<T> {
    pub input: GraphInput<T>,
    pub target: Tensor<T>,
}

impl<T: Scalar> PreparedSample<T> {
    pub fn new(sample: &TrainSample, provider: Option<&dyn FlowProvider>) -> Result<Self> {
        let bundle = sample.bundle(provider)?;
        Ok(PreparedSample {
            input: GraphInput::from_bundle(&bundle, &sample.crops)?,
            target: frame_to_tensor(&sample.target),
        })
    }
}

pub fn prepare_all(
    samples: &[TrainSample],
    provider: Option<&dyn FlowProvider>,
) -> Result<Vec<PreparedSample<f32>>> {
    crate::par::map_collect(samples.iter().collect(), |s| PreparedSample::new(s, provider))
        .into_iter()
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub learning_rate: f64,
    pub seed: u64,
    pub space: FusionSpace,
    pub arch: Arch,
    pub loss: LossWeights,
    /// Progress is logged every this many steps (0 disables).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch: 1,
            learning_rate: 1e-4,
            seed: 0,
            space: FusionSpace::Hybrid,
            arch: Arch::default(),
            loss: LossWeights::default(),
            log_every: 0,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TraceRow {
    pub step: usize,
    pub loss: f64,
    /// Mean PSNR of the batch renders before the update.
    pub psnr: f64,
}

pub struct TrainOutcome {
    pub model: FusionModel<f32>,
    pub trace: Vec<TraceRow>,
}

/// `step,loss,psnr` rows.
pub fn trace_csv(trace: &[TraceRow]) -> String {
    let mut s = String::from("step,loss,psnr\n");
    for r in trace {
        s.push_str(&format!("{},{},{}\n", r.step, r.loss, r.psnr));
    }
    s
}

/// Loss, PSNR and parameter gradient of one sample.
pub fn sample_gradient<T: Scalar>(
    model: &FusionModel<T>,
    sample: &PreparedSample<T>,
    space: FusionSpace,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
    grad: &mut FusionModel<T>,
    scale: f64,
) -> Result<(f64, f64)> {
    let out = graph::forward(model, &sample.input, space, Weights::Learned, true)?;
    let (loss, d_image) = loss_and_grad(&out.image, &sample.target, extractor, weights)?;
    let d_image = d_image.map(|v| v * T::from_f64(scale));
    graph::backward(model, &sample.input, space, true, &out, &d_image, grad)?;
    let p = psnr(&tensor_to_raster(&out.image), &tensor_to_raster(&sample.target))?;
    Ok((loss, p))
}

/// Total loss of one sample (no gradient).
pub fn sample_loss<T: Scalar>(
    model: &FusionModel<T>,
    sample: &PreparedSample<T>,
    space: FusionSpace,
    extractor: &FeatureExtractor<T>,
    weights: &LossWeights,
) -> Result<f64> {
    let out = graph::forward(model, &sample.input, space, Weights::Learned, false)?;
    Ok(loss_and_grad(&out.image, &sample.target, extractor, weights)?.0)
}

fn add_into(acc: &mut FusionModel<f32>, g: &FusionModel<f32>) {
    for (a, (_, _, b)) in acc.params_mut().into_iter().zip(g.named_params()) {
        for (x, y) in a.iter_mut().zip(b) {
            *x += *y;
        }
    }
}

/// Trains a fresh model from `config.seed`.
pub fn train_run(dataset: &[PreparedSample<f32>], config: &TrainConfig) -> Result<TrainOutcome> {
    let model = FusionModel::<f32>::init(config.arch, config.seed);
    train_from(model, dataset, config)
}

/// Continues training `model`; deterministic for a given config and dataset.
pub fn train_from(
    mut model: FusionModel<f32>,
    dataset: &[PreparedSample<f32>],
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::Invalid("training needs at least one sample".into()));
    }
    if config.batch == 0 {
        return Err(Error::Invalid("batch size must be positive".into()));
    }
    if !(config.learning_rate >= 0.0) {
        return Err(Error::Invalid("learning rate must be >= 0".into()));
    }
    let extractor = FeatureExtractor::<f32>::fixed();
    let mut adam = Adam::new(&model, config.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
    let mut trace = Vec::with_capacity(config.steps);
    let scale = 1.0 / config.batch as f64;
    for step in 0..config.steps {
        let picks: Vec<usize> = (0..config.batch)
            .map(|_| rng.random_range(0..dataset.len()))
            .collect();
        let results = crate::par::map_collect(picks, |i| {
            let mut g = model.zeros_like();
            sample_gradient(&model, &dataset[i], config.space, &extractor, &config.loss, &mut g, scale)
                .map(|(l, p)| (l, p, g))
        });
        let mut grad = model.zeros_like();
        let (mut loss, mut ps) = (0.0, 0.0);
        for r in results {
            let (l, p, g) = r?;
            loss += l * scale;
            ps += p * scale;
            add_into(&mut grad, &g);
        }
        if !loss.is_finite() {
            return Err(Error::Diverged { step, loss });
        }
        trace.push(TraceRow {
            step,
            loss,
            psnr: ps,
        });
        if config.log_every > 0 && step % config.log_every == 0 {
            log::info!("step {step}: loss {loss:.5}, psnr {ps:.2} dB");
        }
        adam.step(&mut model, &grad);
    }
    Ok(TrainOutcome { model, trace })
}

/// Rendered frame of a prepared sample.
pub fn render_sample(
    model: &FusionModel<f32>,
    sample: &PreparedSample<f32>,
    space: FusionSpace,
) -> Result<Tensor<f32>> {
    Ok(graph::forward(model, &sample.input, space, Weights::Learned, false)?.image)
}

/// Mean PSNR of the model's renders over `samples`.
pub fn mean_psnr(
    model: &FusionModel<f32>,
    samples: &[PreparedSample<f32>],
    space: FusionSpace,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Invalid("no samples to score".into()));
    }
    let scores = crate::par::map_collect(samples.iter().collect(), |s| {
        let img = render_sample(model, s, space)?;
        psnr(&tensor_to_raster(&img), &tensor_to_raster(&s.target))
    });
    let mut total = 0.0;
    for s in scores {
        total += s?;
    }
    Ok(total / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{pan_clip, Canvas};

    fn tiny_set() -> Vec<PreparedSample<f32>> {
        let clip = pan_clip(&Canvas::random(4), 7, 28, 28, (0.4, 0.3));
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let s = synthesize_from_clip(&clip, (20, 20), 2, &mut rng).unwrap();
        prepare_all(&[s], None).unwrap()
    }

    fn cfg(lr: f64, steps: usize) -> TrainConfig {
        TrainConfig {
            steps,
            learning_rate: lr,
            arch: Arch::compact(),
            ..TrainConfig::default()
        }
    }

    #[test]
    fn same_seed_same_trace() {
        let data = tiny_set();
        let a = train_run(&data, &cfg(1e-3, 4)).unwrap();
        let b = train_run(&data, &cfg(1e-3, 4)).unwrap();
        assert_eq!(a.trace, b.trace);
        assert_eq!(a.model, b.model);
    }

    #[test]
    fn zero_learning_rate_is_a_no_op() {
        let data = tiny_set();
        let out = train_run(&data, &cfg(0.0, 3)).unwrap();
        assert!(out.trace.iter().all(|r| r.loss == out.trace[0].loss));
    }

    #[test]
    fn empty_dataset_is_rejected() {
        assert!(train_run(&[], &cfg(1e-3, 1)).is_err());
    }

    #[test]
    fn trace_csv_header() {
        let csv = trace_csv(&[TraceRow { step: 0, loss: 0.5, psnr: 20.0 }]);
        assert_eq!(csv, "step,loss,psnr\n0,0.5,20\n");
    }
}
