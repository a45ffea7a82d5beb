//! Dense rasters: frames, flow fields and masks.
//!
//! All rasters store `f64` samples in row-major, channel-interleaved order
//! (`H x W x C`). Flow fields carry `(dx, dy)` offsets: the value at pixel
//! `p` points at `p + offset` in the field's source image.

use std::ops::Deref;

use crate::error::{ensure_same_dims, Error, Result};

/// Smallest frame edge accepted by [`Frame`].
pub const MIN_FRAME_EDGE: usize = 16;

#[derive(Clone, Debug, PartialEq)]
pub struct Raster {
    height: usize,
    width: usize,
    channels: usize,
    data: Vec<f64>,
}

impl Raster {
    pub fn zeros(height: usize, width: usize, channels: usize) -> Self {
        Self::filled(height, width, channels, 0.0)
    }

    pub fn filled(height: usize, width: usize, channels: usize, value: f64) -> Self {
        Raster {
            height,
            width,
            channels,
            data: vec![value; height * width * channels],
        }
    }

    pub fn from_vec(height: usize, width: usize, channels: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != height * width * channels {
            return Err(Error::Size(format!(
                "expected {} samples for {}x{}x{}, got {}",
                height * width * channels,
                width,
                height,
                channels,
                data.len()
            )));
        }
        Ok(Raster {
            height,
            width,
            channels,
            data,
        })
    }

    /// Builds a raster by evaluating `f(y, x, c)` at every sample.
    pub fn from_fn(
        height: usize,
        width: usize,
        channels: usize,
        mut f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Self {
        let mut data = Vec::with_capacity(height * width * channels);
        for y in 0..height {
            for x in 0..width {
                for c in 0..channels {
                    data.push(f(y, x, c));
                }
            }
        }
        Raster {
            height,
            width,
            channels,
            data,
        }
    }

    #[inline]
    pub fn height(&self) -> usize {
        self.height
    }

    #[inline]
    pub fn width(&self) -> usize {
        self.width
    }

    #[inline]
    pub fn channels(&self) -> usize {
        self.channels
    }

    #[inline]
    pub fn dims(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn pixel_count(&self) -> usize {
        self.height * self.width
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, y: usize, x: usize, c: usize) -> f64 {
        self.data[(y * self.width + x) * self.channels + c]
    }

    #[inline]
    pub fn set(&mut self, y: usize, x: usize, c: usize, v: f64) {
        self.data[(y * self.width + x) * self.channels + c] = v;
    }

    #[inline]
    pub fn pixel(&self, y: usize, x: usize) -> &[f64] {
        let i = (y * self.width + x) * self.channels;
        &self.data[i..i + self.channels]
    }

    #[inline]
    pub fn pixel_mut(&mut self, y: usize, x: usize) -> &mut [f64] {
        let i = (y * self.width + x) * self.channels;
        &mut self.data[i..i + self.channels]
    }

    /// Single-channel view of channel `c` as a new raster.
    pub fn channel(&self, c: usize) -> Raster {
        Raster::from_fn(self.height, self.width, 1, |y, x, _| self.get(y, x, c))
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Raster {
        Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Raster, f: impl Fn(f64, f64) -> f64) -> Result<Raster> {
        ensure_same_dims("zip_map", self.dims(), other.dims())?;
        if self.channels != other.channels {
            return Err(Error::Shape(format!(
                "channel mismatch {} vs {}",
                self.channels, other.channels
            )));
        }
        Ok(Raster {
            height: self.height,
            width: self.width,
            channels: self.channels,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    /// Bilinear sample at the continuous location `(x, y)` with the location
    /// clamped to the raster, i.e. edge-extended sampling.
    #[inline]
    pub fn sample_into(&self, x: f64, y: f64, out: &mut [f64]) {
        let s = BilinearTap::new(x, y, self.width, self.height);
        let c = self.channels;
        for (ch, o) in out.iter_mut().enumerate().take(c) {
            *o = s.weights[0] * self.data[s.index[0] * c + ch]
                + s.weights[1] * self.data[s.index[1] * c + ch]
                + s.weights[2] * self.data[s.index[2] * c + ch]
                + s.weights[3] * self.data[s.index[3] * c + ch];
        }
    }

    /// Single-channel convenience over [`Raster::sample_into`].
    #[inline]
    pub fn sample(&self, x: f64, y: f64, c: usize) -> f64 {
        let s = BilinearTap::new(x, y, self.width, self.height);
        let ch = self.channels;
        s.weights[0] * self.data[s.index[0] * ch + c]
            + s.weights[1] * self.data[s.index[1] * ch + c]
            + s.weights[2] * self.data[s.index[2] * ch + c]
            + s.weights[3] * self.data[s.index[3] * ch + c]
    }

    pub fn max_abs_diff(&self, other: &Raster) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Four-tap bilinear stencil for one clamped sample location.
///
/// `index` holds flat pixel indices; `weights` sum to one.
#[derive(Clone, Copy, Debug)]
pub struct BilinearTap {
    pub index: [usize; 4],
    pub weights: [f64; 4],
}

impl BilinearTap {
    #[inline]
    pub fn new(x: f64, y: f64, width: usize, height: usize) -> Self {
        let x = x.clamp(0.0, (width - 1) as f64);
        let y = y.clamp(0.0, (height - 1) as f64);
        let x0 = x.floor() as usize;
        let y0 = y.floor() as usize;
        let x1 = (x0 + 1).min(width - 1);
        let y1 = (y0 + 1).min(height - 1);
        let fx = x - x0 as f64;
        let fy = y - y0 as f64;
        BilinearTap {
            index: [
                y0 * width + x0,
                y0 * width + x1,
                y1 * width + x0,
                y1 * width + x1,
            ],
            weights: [
                (1.0 - fx) * (1.0 - fy),
                fx * (1.0 - fy),
                (1.0 - fx) * fy,
                fx * fy,
            ],
        }
    }
}

/// True when `(x, y)` lies inside the pixel-center rectangle `[0, W-1] x [0, H-1]`.
#[inline]
pub fn in_bounds(x: f64, y: f64, width: usize, height: usize) -> bool {
    x >= 0.0 && y >= 0.0 && x <= (width - 1) as f64 && y <= (height - 1) as f64
}

/// An RGB image with values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Frame(Raster);

impl Frame {
    /// Validates channel count, size, and value range.
    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels() != 3 {
            return Err(Error::Shape(format!(
                "frame needs 3 channels, got {}",
                raster.channels()
            )));
        }
        if raster.height() < MIN_FRAME_EDGE || raster.width() < MIN_FRAME_EDGE {
            return Err(Error::Shape(format!(
                "frame must be at least {MIN_FRAME_EDGE}x{MIN_FRAME_EDGE}, got {}x{}",
                raster.width(),
                raster.height()
            )));
        }
        if let Some(v) = raster
            .data()
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Invalid(format!("frame value {v} outside [0, 1]")));
        }
        Ok(Frame(raster))
    }

    /// Like [`Frame::new`] but clamps values into `[0, 1]` (non-finite values become 0).
    pub fn from_raster_clamped(raster: Raster) -> Result<Self> {
        Frame::new(raster.map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 }))
    }

    pub fn from_fn(
        height: usize,
        width: usize,
        f: impl FnMut(usize, usize, usize) -> f64,
    ) -> Result<Self> {
        Frame::from_raster_clamped(Raster::from_fn(height, width, 3, f))
    }

    pub fn as_raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Rec. 601 luma.
    pub fn luminance(&self) -> Raster {
        Raster::from_fn(self.height(), self.width(), 1, |y, x, _| {
            let p = self.0.pixel(y, x);
            0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
        })
    }
}

impl Deref for Frame {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Dense `(dx, dy)` offset field.
#[derive(Clone, Debug, PartialEq)]
pub struct FlowField(Raster);

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        FlowField(Raster::zeros(height, width, 2))
    }

    pub fn constant(height: usize, width: usize, dx: f64, dy: f64) -> Self {
        FlowField(Raster::from_fn(height, width, 2, |_, _, c| {
            if c == 0 {
                dx
            } else {
                dy
            }
        }))
    }

    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels() != 2 {
            return Err(Error::Shape(format!(
                "flow needs 2 channels, got {}",
                raster.channels()
            )));
        }
        if !raster.is_finite() {
            return Err(Error::Invalid("flow field contains non-finite values".into()));
        }
        Ok(FlowField(raster))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> (f64, f64)) -> Self {
        let mut r = Raster::zeros(height, width, 2);
        for y in 0..height {
            for x in 0..width {
                let (dx, dy) = f(y, x);
                r.set(y, x, 0, dx);
                r.set(y, x, 1, dy);
            }
        }
        FlowField(r)
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> (f64, f64) {
        let p = self.0.pixel(y, x);
        (p[0], p[1])
    }

    pub fn as_raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Adds a global translation to every vector.
    pub fn translated(&self, dx: f64, dy: f64) -> FlowField {
        let mut r = self.0.clone();
        for px in r.data_mut().chunks_exact_mut(2) {
            px[0] += dx;
            px[1] += dy;
        }
        FlowField(r)
    }

    /// Per-pixel indicator of `p + F(p)` landing inside the raster.
    pub fn in_bounds_mask(&self) -> Mask {
        let (h, w) = self.dims();
        Mask::from_fn(h, w, |y, x| {
            let (dx, dy) = self.at(y, x);
            if in_bounds(x as f64 + dx, y as f64 + dy, w, h) {
                1.0
            } else {
                0.0
            }
        })
    }
}

impl Deref for FlowField {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Per-pixel validity in `[0, 1]` (1 = valid).
#[derive(Clone, Debug, PartialEq)]
pub struct Mask(Raster);

impl Mask {
    pub fn ones(height: usize, width: usize) -> Self {
        Mask(Raster::filled(height, width, 1, 1.0))
    }

    pub fn zeros(height: usize, width: usize) -> Self {
        Mask(Raster::zeros(height, width, 1))
    }

    pub fn new(raster: Raster) -> Result<Self> {
        if raster.channels() != 1 {
            return Err(Error::Shape(format!(
                "mask needs 1 channel, got {}",
                raster.channels()
            )));
        }
        if raster
            .data()
            .iter()
            .any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0)
        {
            return Err(Error::Invalid("mask value outside [0, 1]".into()));
        }
        Ok(Mask(raster))
    }

    pub fn from_fn(height: usize, width: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        Mask(Raster::from_fn(height, width, 1, |y, x, _| {
            f(y, x).clamp(0.0, 1.0)
        }))
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f64 {
        self.0.get(y, x, 0)
    }

    pub fn as_raster(&self) -> &Raster {
        &self.0
    }

    pub fn into_raster(self) -> Raster {
        self.0
    }

    /// Pointwise product, used to combine validity criteria.
    pub fn and(&self, other: &Mask) -> Result<Mask> {
        Ok(Mask(self.0.zip_map(&other.0, |a, b| a * b)?))
    }

    pub fn mean(&self) -> f64 {
        self.0.data().iter().sum::<f64>() / self.0.pixel_count() as f64
    }
}

impl Deref for Mask {
    type Target = Raster;
    fn deref(&self) -> &Raster {
        &self.0
    }
}

/// Separable Gaussian blur of every channel with clamped borders.
pub fn gaussian_blur(img: &Raster, sigma: f64) -> Raster {
    let r = (3.0 * sigma).ceil() as i64;
    let k: Vec<f64> = (-r..=r)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let s: f64 = k.iter().sum();
    let k: Vec<f64> = k.iter().map(|v| v / s).collect();
    let (h, w, c) = (img.height(), img.width(), img.channels());
    let clampi = |v: i64, n: usize| v.clamp(0, n as i64 - 1) as usize;
    let tmp = Raster::from_fn(h, w, c, |y, x, ch| {
        (-r..=r)
            .zip(&k)
            .map(|(i, wt)| wt * img.get(y, clampi(x as i64 + i, w), ch))
            .sum()
    });
    Raster::from_fn(h, w, c, |y, x, ch| {
        (-r..=r)
            .zip(&k)
            .map(|(i, wt)| wt * tmp.get(clampi(y as i64 + i, h), x, ch))
            .sum()
    })
}
