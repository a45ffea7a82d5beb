use rand::Rng;

use super::tensor::{col2im3, im2col3, Scalar, Tensor};

/// Negative-side slope of the leaky rectifier used throughout.
pub const LEAK: f64 = 0.2;

/// 3x3, stride-1, zero-padded convolution.
#[derive(Clone, Debug, PartialEq)]
pub struct Conv2d<T> {
    pub cin: usize,
    pub cout: usize,
    /// `cout x cin x 3 x 3`
    pub weight: Vec<T>,
    pub bias: Vec<T>,
}

impl<T: Scalar> Conv2d<T> {
    /// Fan-in scaled uniform init; `gain` multiplies the bound.
    pub fn init(cin: usize, cout: usize, gain: f64, rng: &mut impl Rng) -> Self {
        let fan_in = (cin * 9) as f64;
        let bound = gain * (6.0 / ((1.0 + LEAK * LEAK) * fan_in)).sqrt();
        let weight = (0..cout * cin * 9)
            .map(|_| T::from_f64(rng.random_range(-bound..bound)))
            .collect();
        Conv2d {
            cin,
            cout,
            weight,
            bias: vec![T::zero(); cout],
        }
    }

    pub fn zeros(cin: usize, cout: usize) -> Self {
        Conv2d {
            cin,
            cout,
            weight: vec![T::zero(); cout * cin * 9],
            bias: vec![T::zero(); cout],
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        assert_eq!(x.c, self.cin, "conv input channels");
        let hw = x.plane();
        let k = self.cin * 9;
        let mut col = Vec::new();
        im2col3(x, &mut col);
        let mut out = Tensor::zeros(self.cout, x.h, x.w);
        for (o, &b) in self.bias.iter().enumerate() {
            out.channel_mut(o).iter_mut().for_each(|v| *v = b);
        }
        T::gemm(
            self.cout,
            k,
            hw,
            T::one(),
            &self.weight,
            k as isize,
            1,
            &col,
            hw as isize,
            1,
            T::one(),
            &mut out.data,
            hw as isize,
            1,
        );
        out
    }

    /// Accumulates parameter gradients into `grad`; returns the input gradient when asked.
    pub fn backward(
        &self,
        x: &Tensor<T>,
        dy: &Tensor<T>,
        grad: &mut Conv2d<T>,
        need_dx: bool,
    ) -> Option<Tensor<T>> {
        let hw = x.plane();
        let k = self.cin * 9;
        let mut col = Vec::new();
        im2col3(x, &mut col);
        // dW += dy * col^T
        T::gemm(
            self.cout,
            hw,
            k,
            T::one(),
            &dy.data,
            hw as isize,
            1,
            &col,
            1,
            hw as isize,
            T::one(),
            &mut grad.weight,
            k as isize,
            1,
        );
        for o in 0..self.cout {
            grad.bias[o] += dy.channel(o).iter().copied().sum::<T>();
        }
        if !need_dx {
            return None;
        }
        // dcol = W^T * dy
        T::gemm(
            k,
            self.cout,
            hw,
            T::one(),
            &self.weight,
            1,
            k as isize,
            &dy.data,
            hw as isize,
            1,
            T::zero(),
            &mut col,
            hw as isize,
            1,
        );
        Some(col2im3(&col, self.cin, x.h, x.w))
    }

    pub fn param_count(&self) -> usize {
        self.weight.len() + self.bias.len()
    }
}

pub fn leaky_relu<T: Scalar>(mut x: Tensor<T>) -> Tensor<T> {
    let leak = T::from_f64(LEAK);
    for v in &mut x.data {
        if *v < T::zero() {
            *v *= leak;
        }
    }
    x
}

/// Backward of [`leaky_relu`] given its output `y` (same sign as the input).
pub fn leaky_relu_backward<T: Scalar>(y: &Tensor<T>, mut dy: Tensor<T>) -> Tensor<T> {
    let leak = T::from_f64(LEAK);
    for (d, &v) in dy.data.iter_mut().zip(&y.data) {
        if v < T::zero() {
            *d *= leak;
        }
    }
    dy
}

/// 2x2 average pooling; odd edges average the pixels that exist.
pub fn avg_pool2<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let (oh, ow) = (x.h.div_ceil(2), x.w.div_ceil(2));
    let mut out = Tensor::zeros(x.c, oh, ow);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..oh {
            for xx in 0..ow {
                let mut acc = T::zero();
                let mut n = 0;
                for sy in 2 * y..(2 * y + 2).min(x.h) {
                    for sx in 2 * xx..(2 * xx + 2).min(x.w) {
                        acc += src[sy * x.w + sx];
                        n += 1;
                    }
                }
                dst[y * ow + xx] = acc / T::from_f64(n as f64);
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..dy.h {
            for xx in 0..dy.w {
                let ys = 2 * y..(2 * y + 2).min(h);
                let xs = 2 * xx..(2 * xx + 2).min(w);
                let n = T::from_f64((ys.len() * xs.len()) as f64);
                let g = src[y * dy.w + xx] / n;
                for sy in ys {
                    for sx in xs.clone() {
                        dst[sy * w + sx] += g;
                    }
                }
            }
        }
    }
    dx
}

/// Nearest-neighbor 2x upsampling to an explicit output size.
pub fn upsample2<T: Scalar>(x: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(x.c, h, w);
    for c in 0..x.c {
        let src = x.channel(c);
        let dst = out.channel_mut(c);
        for y in 0..h {
            for xx in 0..w {
                dst[y * w + xx] = src[(y / 2) * x.w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Scalar>(dy: &Tensor<T>, h: usize, w: usize) -> Tensor<T> {
    let mut dx = Tensor::zeros(dy.c, h, w);
    for c in 0..dy.c {
        let src = dy.channel(c);
        let dst = dx.channel_mut(c);
        for y in 0..dy.h {
            for xx in 0..dy.w {
                dst[(y / 2) * w + xx / 2] += src[y * dy.w + xx];
            }
        }
    }
    dx
}

#[inline]
pub fn sigmoid<T: Scalar>(v: T) -> T {
    T::one() / (T::one() + (-v).exp())
}

/// Softmax across a list of single-channel maps, per pixel.
pub fn softmax_maps<T: Scalar>(logits: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = logits.len();
    let len = logits[0].len();
    let mut out = vec![vec![T::zero(); len]; n];
    for p in 0..len {
        let m = logits
            .iter()
            .map(|l| l[p])
            .fold(T::neg_infinity(), |a, b| a.max(b));
        let mut z = T::zero();
        for i in 0..n {
            let e = (logits[i][p] - m).exp();
            out[i][p] = e;
            z += e;
        }
        for o in out.iter_mut() {
            o[p] = o[p] / z;
        }
    }
    out
}

/// Backward of [`softmax_maps`]: `dz_i = s_i (g_i - sum_j s_j g_j)`.
pub fn softmax_maps_backward<T: Scalar>(soft: &[Vec<T>], grad: &[Vec<T>]) -> Vec<Vec<T>> {
    let n = soft.len();
    let len = soft[0].len();
    let mut out = vec![vec![T::zero(); len]; n];
    for p in 0..len {
        let mut dot = T::zero();
        for i in 0..n {
            dot += soft[i][p] * grad[i][p];
        }
        for i in 0..n {
            out[i][p] = soft[i][p] * (grad[i][p] - dot);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn conv_input_gradient_matches_adjoint() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let conv = Conv2d::<f64>::init(2, 3, 1.0, &mut rng);
        let x = Tensor::from_vec(2, 5, 4, (0..40).map(|v| (v as f64 * 0.3).sin()).collect());
        let dy = Tensor::from_vec(3, 5, 4, (0..60).map(|v| (v as f64 * 0.7).cos()).collect());
        let mut g = Conv2d::zeros(2, 3);
        let dx = conv.backward(&x, &dy, &mut g, true).unwrap();
        // conv is affine: <conv(x) - b, dy> == <x, dx>
        let mut y = conv.forward(&x);
        for o in 0..3 {
            let b = conv.bias[o];
            y.channel_mut(o).iter_mut().for_each(|v| *v -= b);
        }
        assert!((dot(&y.data, &dy.data) - dot(&x.data, &dx.data)).abs() < 1e-10);
        // weight gradient: <conv_W(x), dy> is linear in W
        let wdot = dot(&conv.weight, &g.weight);
        assert!((wdot - dot(&y.data, &dy.data)).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_adjoints_on_odd_sizes() {
        let x = Tensor::from_vec(1, 5, 3, (0..15).map(|v| v as f64 * 0.5 - 2.0).collect());
        let p = avg_pool2(&x);
        assert_eq!((p.h, p.w), (3, 2));
        let g = Tensor::from_vec(1, 3, 2, vec![1.0, -2.0, 0.5, 3.0, -1.0, 2.0]);
        let lhs = dot(&p.data, &g.data);
        let rhs = dot(&x.data, &avg_pool2_backward(&g, 5, 3).data);
        assert!((lhs - rhs).abs() < 1e-12);

        let u = upsample2(&g, 5, 3);
        let gu = Tensor::from_vec(1, 5, 3, (0..15).map(|v| (v as f64).sqrt()).collect());
        let lhs = dot(&u.data, &gu.data);
        let rhs = dot(&g.data, &upsample2_backward(&gu, 3, 2).data);
        assert!((lhs - rhs).abs() < 1e-12);
    }

    #[test]
    fn softmax_sums_to_one() {
        let logits = vec![vec![1.0, -3.0, 50.0], vec![0.0, 2.0, -50.0], vec![0.5, 0.5, 0.0]];
        let s = softmax_maps(&logits);
        for p in 0..3 {
            let total: f64 = s.iter().map(|m| m[p]).sum();
            assert!((total - 1.0).abs() < 1e-12);
        }
    }
}
