//! Channel-major image tensors and the dense kernels the networks are built on.

use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of network tensors.
pub trait Scalar:
    Float + Default + Debug + Send + Sync + AddAssign + SubAssign + MulAssign + Sum + 'static
{
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    /// `C = alpha * A * B + beta * C` on strided row-major views.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

impl Scalar for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        f64::from(self)
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: &[f32],
        rsa: isize,
        csa: isize,
        b: &[f32],
        rsb: isize,
        csb: isize,
        beta: f32,
        c: &mut [f32],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: bounds of every strided access were checked above.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

impl Scalar for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: &[f64],
        rsa: isize,
        csa: isize,
        b: &[f64],
        rsb: isize,
        csb: isize,
        beta: f64,
        c: &mut [f64],
        rsc: isize,
        csc: isize,
    ) {
        check_gemm_bounds(m, k, n, a.len(), rsa, csa, b.len(), rsb, csb, c.len(), rsc, csc);
        // SAFETY: bounds of every strided access were checked above.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                beta,
                c.as_mut_ptr(),
                rsc,
                csc,
            )
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn check_gemm_bounds(
    m: usize,
    k: usize,
    n: usize,
    alen: usize,
    rsa: isize,
    csa: isize,
    blen: usize,
    rsb: isize,
    csb: isize,
    clen: usize,
    rsc: isize,
    csc: isize,
) {
    let last = |rows: usize, cols: usize, rs: isize, cs: isize| -> usize {
        assert!(rs >= 0 && cs >= 0, "negative strides unsupported");
        if rows == 0 || cols == 0 {
            0
        } else {
            (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
        }
    };
    assert!(last(m, k, rsa, csa) <= alen, "gemm: A out of bounds");
    assert!(last(k, n, rsb, csb) <= blen, "gemm: B out of bounds");
    assert!(last(m, n, rsc, csc) <= clen, "gemm: C out of bounds");
}

/// `C×H×W` tensor, channel-major.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor<T> {
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(c: usize, h: usize, w: usize) -> Self {
        Tensor {
            c,
            h,
            w,
            data: vec![T::zero(); c * h * w],
        }
    }

    pub fn from_vec(c: usize, h: usize, w: usize, data: Vec<T>) -> Self {
        assert_eq!(data.len(), c * h * w, "tensor data length");
        Tensor { c, h, w, data }
    }

    #[inline]
    pub fn plane(&self) -> usize {
        self.h * self.w
    }

    pub fn channel(&self, c: usize) -> &[T] {
        let p = self.plane();
        &self.data[c * p..(c + 1) * p]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [T] {
        let p = self.plane();
        &mut self.data[c * p..(c + 1) * p]
    }

    /// Channels `range` as a new tensor.
    pub fn slice_channels(&self, start: usize, end: usize) -> Tensor<T> {
        let p = self.plane();
        Tensor::from_vec(end - start, self.h, self.w, self.data[start * p..end * p].to_vec())
    }

    /// Stacks tensors along the channel axis.
    pub fn concat(parts: &[&Tensor<T>]) -> Tensor<T> {
        let (h, w) = (parts[0].h, parts[0].w);
        let mut data = Vec::with_capacity(parts.iter().map(|t| t.data.len()).sum());
        let mut c = 0;
        for t in parts {
            assert_eq!((t.h, t.w), (h, w), "concat: spatial mismatch");
            data.extend_from_slice(&t.data);
            c += t.c;
        }
        Tensor { c, h, w, data }
    }

    pub fn add_assign(&mut self, other: &Tensor<T>) {
        assert_eq!(self.data.len(), other.data.len());
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Tensor<T> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            c: self.c,
            h: self.h,
            w: self.w,
            data: self.data.iter().map(|v| U::from_f64(v.as_f64())).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Unfolds a 3x3, zero-padded neighborhood of every pixel: `(C*9) x (H*W)`.
pub fn im2col3<T: Scalar>(x: &Tensor<T>, col: &mut Vec<T>) {
    let (c, h, w) = (x.c, x.h, x.w);
    let hw = h * w;
    col.clear();
    col.resize(c * 9 * hw, T::zero());
    for ci in 0..c {
        let src = x.channel(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let srow = &src[sy as usize * w..][..w];
                    let drow = &mut row[y * w..][..w];
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    for xx in x0..x1 {
                        drow[xx] = srow[(xx as isize + dx) as usize];
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col3`]: scatters column gradients back onto the image.
pub fn col2im3<T: Scalar>(col: &[T], c: usize, h: usize, w: usize) -> Tensor<T> {
    let hw = h * w;
    let mut out = Tensor::zeros(c, h, w);
    for ci in 0..c {
        let dst = out.channel_mut(ci);
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &col[((ci * 9) + ky * 3 + kx) * hw..][..hw];
                let dy = ky as isize - 1;
                let dx = kx as isize - 1;
                for y in 0..h {
                    let sy = y as isize + dy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let x0 = if dx < 0 { 1 } else { 0 };
                    let x1 = if dx > 0 { w - 1 } else { w };
                    for xx in x0..x1 {
                        dst[sy as usize * w + (xx as isize + dx) as usize] += row[y * w + xx];
                    }
                }
            }
        }
    }
    out
}
