//! The three learned operators: feature encoder, blend-weight predictor and
//! image generator.
//!
//! The encoder's first three output channels are the input colors passed
//! through unchanged, so warped features carry the warped image. The
//! generator predicts its color output as a residual in logit space on top
//! of those color channels, which makes "copy the aligned neighbor" the
//! starting point it refines from.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{
    avg_pool2, avg_pool2_backward, leaky_relu, leaky_relu_backward, sigmoid, upsample2,
    upsample2_backward, Conv2d,
};
use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Color channels at the front of every feature map.
pub const COLOR_CHANNELS: usize = 3;
/// Clamp applied to colors before taking their logit.
pub const SKIP_EPS: f64 = 1e-3;

/// Layer widths of the three networks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Arch {
    /// Feature channels `D`, including the color passthrough.
    pub feat_dim: usize,
    pub enc_hidden: [usize; 2],
    pub weight_hidden: [usize; 2],
    pub gen_hidden: usize,
    pub gen_bottleneck: usize,
}

impl Default for Arch {
    fn default() -> Self {
        Arch {
            feat_dim: 32,
            enc_hidden: [16, 32],
            weight_hidden: [64, 64],
            gen_hidden: 64,
            gen_bottleneck: 128,
        }
    }
}

impl Arch {
    /// Narrow variant for single-core training runs.
    pub fn compact() -> Self {
        Arch {
            feat_dim: 8,
            enc_hidden: [8, 8],
            weight_hidden: [16, 16],
            gen_hidden: 16,
            gen_bottleneck: 32,
        }
    }

    pub fn weight_in(&self) -> usize {
        2 * self.feat_dim + 3
    }

    pub fn generator_in(&self) -> usize {
        2 * self.feat_dim + 1
    }

    pub fn descriptor(&self) -> String {
        format!(
            "fstb-v1 d={} enc={},{} wnet={},{} gen={},{}",
            self.feat_dim,
            self.enc_hidden[0],
            self.enc_hidden[1],
            self.weight_hidden[0],
            self.weight_hidden[1],
            self.gen_hidden,
            self.gen_bottleneck
        )
    }

    pub fn parse(descriptor: &str) -> Result<Arch> {
        let bad = || Error::Format(format!("bad architecture descriptor {descriptor:?}"));
        let mut parts = descriptor.split_whitespace();
        if parts.next() != Some("fstb-v1") {
            return Err(bad());
        }
        let mut fields = std::collections::HashMap::new();
        for p in parts {
            let (k, v) = p.split_once('=').ok_or_else(bad)?;
            let nums: Vec<usize> = v
                .split(',')
                .map(|s| s.parse().map_err(|_| bad()))
                .collect::<Result<_>>()?;
            fields.insert(k, nums);
        }
        let get = |k: &str, n: usize| -> Result<Vec<usize>> {
            match fields.get(k) {
                Some(v) if v.len() == n && v.iter().all(|&x| x > 0) => Ok(v.clone()),
                _ => Err(bad()),
            }
        };
        let arch = Arch {
            feat_dim: get("d", 1)?[0],
            enc_hidden: get("enc", 2)?.try_into().unwrap(),
            weight_hidden: get("wnet", 2)?.try_into().unwrap(),
            gen_hidden: get("gen", 2)?[0],
            gen_bottleneck: get("gen", 2)?[1],
        };
        if arch.feat_dim <= COLOR_CHANNELS {
            return Err(bad());
        }
        Ok(arch)
    }
}

/// Full-resolution convolutional feature encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct Encoder<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
}

pub struct EncoderCache<T> {
    a1: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> Encoder<T> {
    fn init(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let [h1, h2] = arch.enc_hidden;
        Encoder {
            conv1: Conv2d::init(3, h1, 1.0, rng),
            conv2: Conv2d::init(h1, h2, 1.0, rng),
            conv3: Conv2d::init(h2, arch.feat_dim - COLOR_CHANNELS, 1.0, rng),
        }
    }

    fn zeros(arch: &Arch) -> Self {
        let [h1, h2] = arch.enc_hidden;
        Encoder {
            conv1: Conv2d::zeros(3, h1),
            conv2: Conv2d::zeros(h1, h2),
            conv3: Conv2d::zeros(h2, arch.feat_dim - COLOR_CHANNELS),
        }
    }

    /// `3 x H x W` colors to `D x H x W` features.
    pub fn forward(&self, x: &Tensor<T>) -> (Tensor<T>, EncoderCache<T>) {
        let a1 = leaky_relu(self.conv1.forward(x));
        let a2 = leaky_relu(self.conv2.forward(&a1));
        let learned = self.conv3.forward(&a2);
        (Tensor::concat(&[x, &learned]), EncoderCache { a1, a2 })
    }

    /// Only parameter gradients are produced; the input is a constant image.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        cache: &EncoderCache<T>,
        d_out: &Tensor<T>,
        grad: &mut Encoder<T>,
    ) {
        let d_learned = d_out.slice_channels(COLOR_CHANNELS, d_out.c);
        let d_a2 = self
            .conv3
            .backward(&cache.a2, &d_learned, &mut grad.conv3, true)
            .unwrap();
        let d_a2 = leaky_relu_backward(&cache.a2, d_a2);
        let d_a1 = self
            .conv2
            .backward(&cache.a1, &d_a2, &mut grad.conv2, true)
            .unwrap();
        let d_a1 = leaky_relu_backward(&cache.a1, d_a1);
        self.conv1.backward(x, &d_a1, &mut grad.conv1, false);
    }
}

/// Per-neighbor blend logit predictor `G_theta`.
#[derive(Clone, Debug, PartialEq)]
pub struct WeightNet<T> {
    pub conv1: Conv2d<T>,
    pub conv2: Conv2d<T>,
    pub conv3: Conv2d<T>,
}

pub struct WeightCache<T> {
    a1: Tensor<T>,
    a2: Tensor<T>,
}

impl<T: Scalar> WeightNet<T> {
    fn init(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let [h1, h2] = arch.weight_hidden;
        WeightNet {
            conv1: Conv2d::init(arch.weight_in(), h1, 1.0, rng),
            conv2: Conv2d::init(h1, h2, 1.0, rng),
            conv3: Conv2d::init(h2, 1, 0.1, rng),
        }
    }

    fn zeros(arch: &Arch) -> Self {
        let [h1, h2] = arch.weight_hidden;
        WeightNet {
            conv1: Conv2d::zeros(arch.weight_in(), h1),
            conv2: Conv2d::zeros(h1, h2),
            conv3: Conv2d::zeros(h2, 1),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv1.cin
    }

    /// Logit map for one neighbor from `[f_n | M_n | f_k | M_k | e_n]`.
    pub fn logits(&self, input: &Tensor<T>) -> Result<Tensor<T>> {
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "weight net expects {} input channels, got {}",
                self.in_channels(),
                input.c
            )));
        }
        Ok(self.forward(input).0)
    }

    pub fn forward(&self, input: &Tensor<T>) -> (Tensor<T>, WeightCache<T>) {
        let a1 = leaky_relu(self.conv1.forward(input));
        let a2 = leaky_relu(self.conv2.forward(&a1));
        (self.conv3.forward(&a2), WeightCache { a1, a2 })
    }

    pub fn backward(
        &self,
        input: &Tensor<T>,
        cache: &WeightCache<T>,
        d_logit: &Tensor<T>,
        grad: &mut WeightNet<T>,
    ) -> Tensor<T> {
        let d_a2 = self
            .conv3
            .backward(&cache.a2, d_logit, &mut grad.conv3, true)
            .unwrap();
        let d_a2 = leaky_relu_backward(&cache.a2, d_a2);
        let d_a1 = self
            .conv2
            .backward(&cache.a1, &d_a2, &mut grad.conv2, true)
            .unwrap();
        let d_a1 = leaky_relu_backward(&cache.a1, d_a1);
        self.conv1
            .backward(input, &d_a1, &mut grad.conv1, true)
            .unwrap()
    }
}

/// Two-scale encoder-decoder `G_phi` producing colors and a confidence logit.
#[derive(Clone, Debug, PartialEq)]
pub struct Generator<T> {
    pub conv_in: Conv2d<T>,
    pub conv_down1: Conv2d<T>,
    pub conv_down2: Conv2d<T>,
    pub conv_up: Conv2d<T>,
    pub conv_out: Conv2d<T>,
}

pub struct GeneratorCache<T> {
    s0: Tensor<T>,
    pooled: Tensor<T>,
    b1: Tensor<T>,
    b2: Tensor<T>,
    cat: Tensor<T>,
    d1: Tensor<T>,
    rgb: Tensor<T>,
    skip: Tensor<T>,
}

pub struct GeneratorOutput<T> {
    /// `3 x H x W`, in `(0, 1)`.
    pub rgb: Tensor<T>,
    /// `1 x H x W`, unbounded.
    pub confidence: Tensor<T>,
}

impl<T: Scalar> Generator<T> {
    fn init(arch: &Arch, rng: &mut ChaCha8Rng) -> Self {
        let (g, b) = (arch.gen_hidden, arch.gen_bottleneck);
        Generator {
            conv_in: Conv2d::init(arch.generator_in(), g, 1.0, rng),
            conv_down1: Conv2d::init(g, b, 1.0, rng),
            conv_down2: Conv2d::init(b, b, 1.0, rng),
            conv_up: Conv2d::init(b + g, g, 1.0, rng),
            conv_out: Conv2d::init(g, 4, 0.1, rng),
        }
    }

    fn zeros(arch: &Arch) -> Self {
        let (g, b) = (arch.gen_hidden, arch.gen_bottleneck);
        Generator {
            conv_in: Conv2d::zeros(arch.generator_in(), g),
            conv_down1: Conv2d::zeros(g, b),
            conv_down2: Conv2d::zeros(b, b),
            conv_up: Conv2d::zeros(b + g, g),
            conv_out: Conv2d::zeros(g, 4),
        }
    }

    pub fn in_channels(&self) -> usize {
        self.conv_in.cin
    }

    /// Checked entry point on `[f | M | f_fused]`; the color skip is the first
    /// three channels of the input.
    pub fn generate(&self, input: &Tensor<T>) -> Result<GeneratorOutput<T>> {
        if input.c != self.in_channels() {
            return Err(Error::Shape(format!(
                "generator expects {} input channels, got {}",
                self.in_channels(),
                input.c
            )));
        }
        Ok(self.forward(input).0)
    }

    pub fn forward(&self, input: &Tensor<T>) -> (GeneratorOutput<T>, GeneratorCache<T>) {
        let skip = input.slice_channels(0, COLOR_CHANNELS);
        let s0 = leaky_relu(self.conv_in.forward(input));
        let pooled = avg_pool2(&s0);
        let b1 = leaky_relu(self.conv_down1.forward(&pooled));
        let b2 = leaky_relu(self.conv_down2.forward(&b1));
        let up = upsample2(&b2, s0.h, s0.w);
        let cat = Tensor::concat(&[&up, &s0]);
        let d1 = leaky_relu(self.conv_up.forward(&cat));
        let out = self.conv_out.forward(&d1);

        let eps = T::from_f64(SKIP_EPS);
        let mut rgb = out.slice_channels(0, COLOR_CHANNELS);
        for (v, &s) in rgb.data.iter_mut().zip(&skip.data) {
            let s = s.max(eps).min(T::one() - eps);
            *v = sigmoid(*v + (s / (T::one() - s)).ln());
        }
        let confidence = out.slice_channels(COLOR_CHANNELS, 4);
        (
            GeneratorOutput {
                rgb: rgb.clone(),
                confidence,
            },
            GeneratorCache {
                s0,
                pooled,
                b1,
                b2,
                cat,
                d1,
                rgb,
                skip,
            },
        )
    }

    /// Returns the gradient with respect to the full input (color skip included).
    pub fn backward(
        &self,
        input: &Tensor<T>,
        cache: &GeneratorCache<T>,
        d_rgb: &Tensor<T>,
        d_conf: &Tensor<T>,
        grad: &mut Generator<T>,
    ) -> Tensor<T> {
        let eps = T::from_f64(SKIP_EPS);
        let mut d_pre = d_rgb.clone();
        for (d, &r) in d_pre.data.iter_mut().zip(&cache.rgb.data) {
            *d *= r * (T::one() - r);
        }
        let mut d_skip = d_pre.clone();
        for (d, &s) in d_skip.data.iter_mut().zip(&cache.skip.data) {
            if s > eps && s < T::one() - eps {
                *d = *d / (s * (T::one() - s));
            } else {
                *d = T::zero();
            }
        }
        let d_out = Tensor::concat(&[&d_pre, d_conf]);
        let d_d1 = self
            .conv_out
            .backward(&cache.d1, &d_out, &mut grad.conv_out, true)
            .unwrap();
        let d_d1 = leaky_relu_backward(&cache.d1, d_d1);
        let d_cat = self
            .conv_up
            .backward(&cache.cat, &d_d1, &mut grad.conv_up, true)
            .unwrap();
        let b = cache.b2.c;
        let d_up = d_cat.slice_channels(0, b);
        let mut d_s0 = d_cat.slice_channels(b, d_cat.c);
        let d_b2 = upsample2_backward(&d_up, cache.b2.h, cache.b2.w);
        let d_b2 = leaky_relu_backward(&cache.b2, d_b2);
        let d_b1 = self
            .conv_down2
            .backward(&cache.b1, &d_b2, &mut grad.conv_down2, true)
            .unwrap();
        let d_b1 = leaky_relu_backward(&cache.b1, d_b1);
        let d_pooled = self
            .conv_down1
            .backward(&cache.pooled, &d_b1, &mut grad.conv_down1, true)
            .unwrap();
        d_s0.add_assign(&avg_pool2_backward(&d_pooled, cache.s0.h, cache.s0.w));
        let d_s0 = leaky_relu_backward(&cache.s0, d_s0);
        let mut d_input = self
            .conv_in
            .backward(input, &d_s0, &mut grad.conv_in, true)
            .unwrap();
        for (d, &s) in d_input.data[..d_skip.data.len()]
            .iter_mut()
            .zip(&d_skip.data)
        {
            *d += s;
        }
        d_input
    }
}

/// All learned parameters of the fusion model.
#[derive(Clone, Debug, PartialEq)]
pub struct FusionModel<T> {
    pub arch: Arch,
    pub encoder: Encoder<T>,
    pub weight_net: WeightNet<T>,
    pub generator: Generator<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
}

impl<T: Scalar> FusionModel<T> {
    pub fn init(arch: Arch, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        FusionModel {
            arch,
            encoder: Encoder::init(&arch, &mut rng),
            weight_net: WeightNet::init(&arch, &mut rng),
            generator: Generator::init(&arch, &mut rng),
            step: 0,
        }
    }

    /// Same layout with every parameter zero; doubles as a gradient buffer.
    pub fn zeros(arch: Arch) -> Self {
        FusionModel {
            arch,
            encoder: Encoder::zeros(&arch),
            weight_net: WeightNet::zeros(&arch),
            generator: Generator::zeros(&arch),
            step: 0,
        }
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.arch)
    }

    fn convs(&self) -> [(&'static str, &Conv2d<T>); 11] {
        [
            ("encoder.conv1", &self.encoder.conv1),
            ("encoder.conv2", &self.encoder.conv2),
            ("encoder.conv3", &self.encoder.conv3),
            ("weight.conv1", &self.weight_net.conv1),
            ("weight.conv2", &self.weight_net.conv2),
            ("weight.conv3", &self.weight_net.conv3),
            ("generator.conv_in", &self.generator.conv_in),
            ("generator.conv_down1", &self.generator.conv_down1),
            ("generator.conv_down2", &self.generator.conv_down2),
            ("generator.conv_up", &self.generator.conv_up),
            ("generator.conv_out", &self.generator.conv_out),
        ]
    }

    fn convs_mut(&mut self) -> [&mut Conv2d<T>; 11] {
        [
            &mut self.encoder.conv1,
            &mut self.encoder.conv2,
            &mut self.encoder.conv3,
            &mut self.weight_net.conv1,
            &mut self.weight_net.conv2,
            &mut self.weight_net.conv3,
            &mut self.generator.conv_in,
            &mut self.generator.conv_down1,
            &mut self.generator.conv_down2,
            &mut self.generator.conv_up,
            &mut self.generator.conv_out,
        ]
    }

    /// Named parameter tensors with their shapes, in a fixed order.
    pub fn named_params(&self) -> Vec<(String, Vec<usize>, &[T])> {
        let mut out = Vec::new();
        for (name, conv) in self.convs() {
            out.push((
                format!("{name}.weight"),
                vec![conv.cout, conv.cin, 3, 3],
                conv.weight.as_slice(),
            ));
            out.push((format!("{name}.bias"), vec![conv.cout], conv.bias.as_slice()));
        }
        out
    }

    /// Mutable parameter slices in the order of [`FusionModel::named_params`].
    pub fn params_mut(&mut self) -> Vec<&mut [T]> {
        let mut out: Vec<&mut [T]> = Vec::new();
        for conv in self.convs_mut() {
            out.push(conv.weight.as_mut_slice());
            out.push(conv.bias.as_mut_slice());
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.named_params().iter().map(|(_, _, p)| p.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> FusionModel<U> {
        let mut out = FusionModel::<U>::zeros(self.arch);
        out.step = self.step;
        for (dst, (_, _, src)) in out.params_mut().into_iter().zip(self.named_params()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d = U::from_f64(s.as_f64());
            }
        }
        out
    }

    /// Encodes one image given as a `3 x H x W` tensor.
    pub fn encode(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        if image.c != 3 {
            return Err(Error::Shape(format!(
                "encoder expects 3 channels, got {}",
                image.c
            )));
        }
        Ok(self.encoder.forward(image).0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn descriptor_roundtrip() {
        for arch in [Arch::default(), Arch::compact()] {
            assert_eq!(Arch::parse(&arch.descriptor()).unwrap(), arch);
        }
        assert!(Arch::parse("fstb-v2 d=32").is_err());
        assert!(Arch::parse("fstb-v1 d=3 enc=1,1 wnet=1,1 gen=1,1").is_err());
    }

    #[test]
    fn arity_contracts() {
        let m = FusionModel::<f32>::init(Arch::default(), 0);
        assert_eq!(m.weight_net.in_channels(), 67);
        assert!(m.weight_net.logits(&Tensor::zeros(67, 8, 8)).is_ok());
        assert!(m.weight_net.logits(&Tensor::zeros(66, 8, 8)).is_err());
        assert_eq!(m.generator.in_channels(), 65);
        assert!(m.generator.generate(&Tensor::zeros(64, 8, 8)).is_err());
    }

    #[test]
    fn encoder_keeps_resolution_and_colors() {
        let m = FusionModel::<f32>::init(Arch::default(), 3);
        let x = Tensor::from_vec(3, 12, 20, (0..720).map(|v| (v % 17) as f32 / 17.0).collect());
        let f = m.encode(&x).unwrap();
        assert_eq!((f.c, f.h, f.w), (32, 12, 20));
        assert_eq!(&f.data[..720], &x.data[..]);
    }

    #[test]
    fn cast_roundtrip_is_exact_for_f32() {
        let m = FusionModel::<f32>::init(Arch::compact(), 9);
        let back: FusionModel<f32> = m.cast::<f64>().cast();
        assert_eq!(back, m);
    }
}
