//! Dense correspondences: flow estimation, chaining, backward warping,
//! forward-backward consistency and per-neighbor warp bundles.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use crate::error::{ensure_same_dims, Error, Result};
use crate::media::read_flo;
use crate::raster::{gaussian_blur, in_bounds, FlowField, Frame, Mask, Raster};

/// Relative term of the occlusion test.
pub const OCCLUSION_ALPHA: f64 = 0.01;
/// Constant term of the occlusion test, in squared pixels.
pub const OCCLUSION_BETA: f64 = 0.5;

/// Source of pairwise optical flow `F_{a->b}` (defined over `a`, sampling `b`).
pub trait FlowProvider: Send + Sync {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField>;

    /// Index-aware variant; providers backed by precomputed files override this.
    fn flow_between(&self, ia: usize, a: &Frame, ib: usize, b: &Frame) -> Result<FlowField> {
        let _ = (ia, ib);
        self.flow(a, b)
    }
}

/// Built-in coarse-to-fine patch matcher used when no external flow is supplied.
///
/// Each pyramid level runs an integer SSD search around the rounded upsampled
/// estimate and around the median motion of the whole field, a 3x3 median
/// cleanup, and a few Lucas-Kanade refinement steps.
/// Exact matches (zero residual) are left untouched, so identical frames and
/// integer translations come out exact.
/// Width of the confidence-weighted flow smoothing.
const FLAT_FILL_SIGMA: f64 = 1.5;

#[derive(Clone, Debug)]
pub struct FallbackFlow {
    pub levels: usize,
    pub patch_radius: usize,
    pub coarse_search: i32,
    pub fine_search: i32,
    pub refine_iters: usize,
}

impl Default for FallbackFlow {
    fn default() -> Self {
        FallbackFlow {
            levels: 3,
            patch_radius: 2,
            coarse_search: 4,
            fine_search: 2,
            refine_iters: 3,
        }
    }
}

impl FlowProvider for FallbackFlow {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        ensure_same_dims("estimate_flow_fallback", a.dims(), b.dims())?;
        Ok(self.estimate(&a.luminance(), &b.luminance()))
    }
}

impl FallbackFlow {
    /// Estimates flow between two single-channel images.
    pub fn estimate(&self, a: &Raster, b: &Raster) -> FlowField {
        // low-passed levels keep bilinear sampling close to the true signal
        let mut pyr_a = vec![binomial(a)];
        let mut pyr_b = vec![binomial(b)];
        for _ in 1..self.levels.max(1) {
            let (h, w) = pyr_a.last().unwrap().dims();
            if h < 8 || w < 8 {
                break;
            }
            pyr_a.push(binomial(&decimate2(pyr_a.last().unwrap())));
            pyr_b.push(binomial(&decimate2(pyr_b.last().unwrap())));
        }
        let top = pyr_a.len() - 1;
        let mut flow: Option<Raster> = None;
        for level in (0..=top).rev() {
            let (la, lb) = (&pyr_a[level], &pyr_b[level]);
            let init = match flow {
                None => Raster::zeros(la.height(), la.width(), 2),
                Some(ref f) => upsample_flow(f, la.height(), la.width()),
            };
            let radius = if level == top {
                self.coarse_search
            } else {
                self.fine_search
            };
            let mut f = self.integer_search(la, lb, &init, radius);
            f = median3(&f);
            for _ in 0..self.refine_iters {
                f = self.lucas_kanade_step(la, lb, &f);
            }
            flow = Some(self.fill_flat_regions(la, &f));
        }
        FlowField::new(flow.unwrap()).expect("flow estimate is finite")
    }

    fn integer_search(&self, a: &Raster, b: &Raster, init: &Raster, radius: i32) -> Raster {
        let (h, w) = a.dims();
        let pr = self.patch_radius as i32;
        let mut candidates: Vec<(i32, i32)> = (-radius..=radius)
            .flat_map(|dy| (-radius..=radius).map(move |dx| (dx, dy)))
            .collect();
        // Ties resolve toward the smallest displacement.
        candidates.sort_by_key(|&(dx, dy)| (dx * dx + dy * dy, dy, dx));
        // second search window around the dominant motion, which rescues
        // pixels the coarser level sent astray
        let dominant = {
            let mut xs: Vec<f64> = init.data().chunks(2).map(|p| p[0]).collect();
            let mut ys: Vec<f64> = init.data().chunks(2).map(|p| p[1]).collect();
            let mid = |v: &mut Vec<f64>| {
                v.sort_by(|a, b| a.total_cmp(b));
                v[v.len() / 2].round() as i32
            };
            (mid(&mut xs), mid(&mut ys))
        };
        let at = |img: &Raster, x: i32, y: i32| {
            img.get(
                y.clamp(0, h as i32 - 1) as usize,
                x.clamp(0, w as i32 - 1) as usize,
                0,
            )
        };
        let mut out = Raster::zeros(h, w, 2);
        for y in 0..h as i32 {
            for x in 0..w as i32 {
                let px = init.pixel(y as usize, x as usize);
                let (bx, by) = (px[0].round() as i32, px[1].round() as i32);
                let mut best = (f64::INFINITY, 0, 0);
                let own = candidates.iter().map(|&(dx, dy)| (bx + dx, by + dy));
                let far = (bx - dominant.0).abs().max((by - dominant.1).abs()) > radius;
                let alt = candidates
                    .iter()
                    .filter(|_| far)
                    .map(|&(dx, dy)| (dominant.0 + dx, dominant.1 + dy));
                for (ox, oy) in own.chain(alt) {
                    let mut cost = 0.0;
                    for qy in -pr..=pr {
                        for qx in -pr..=pr {
                            let d = at(a, x + qx, y + qy) - at(b, x + qx + ox, y + qy + oy);
                            cost += d * d;
                        }
                    }
                    if cost < best.0 {
                        best = (cost, ox, oy);
                    }
                }
                let o = out.pixel_mut(y as usize, x as usize);
                o[0] = best.1 as f64;
                o[1] = best.2 as f64;
            }
        }
        out
    }

    fn lucas_kanade_step(&self, a: &Raster, b: &Raster, flow: &Raster) -> Raster {
        let (h, w) = a.dims();
        let pr = self.patch_radius as i32;
        let mut out = flow.clone();
        for y in 0..h {
            for x in 0..w {
                let f = flow.pixel(y, x);
                let (mut gxx, mut gxy, mut gyy, mut bx, mut by, mut resid) =
                    (0.0, 0.0, 0.0, 0.0, 0.0, 0.0);
                for qy in -pr..=pr {
                    for qx in -pr..=pr {
                        let sx = (x as i32 + qx).clamp(0, w as i32 - 1) as f64;
                        let sy = (y as i32 + qy).clamp(0, h as i32 - 1) as f64;
                        let va = a.get(sy as usize, sx as usize, 0);
                        let (px, py) = (sx + f[0], sy + f[1]);
                        let vb = b.sample(px, py, 0);
                        let ix = 0.5 * (b.sample(px + 1.0, py, 0) - b.sample(px - 1.0, py, 0));
                        let iy = 0.5 * (b.sample(px, py + 1.0, 0) - b.sample(px, py - 1.0, 0));
                        let r = va - vb;
                        gxx += ix * ix;
                        gxy += ix * iy;
                        gyy += iy * iy;
                        bx += ix * r;
                        by += iy * r;
                        resid += r * r;
                    }
                }
                if resid == 0.0 {
                    continue;
                }
                let det = gxx * gyy - gxy * gxy;
                let trace = gxx + gyy;
                if det <= 1e-9 * trace.max(1e-12) * trace.max(1e-12) || det.abs() < 1e-12 {
                    continue;
                }
                let ux = (gyy * bx - gxy * by) / det;
                let uy = (gxx * by - gxy * bx) / det;
                if ux.abs() <= 1.0 && uy.abs() <= 1.0 {
                    let o = out.pixel_mut(y, x);
                    o[0] += ux;
                    o[1] += uy;
                }
            }
        }
        out
    }

    /// Normalized convolution of the flow weighted by how well each pixel's
    /// window constrains motion (smallest structure-tensor eigenvalue), so
    /// flat regions take their motion from textured surroundings.
    fn fill_flat_regions(&self, img: &Raster, flow: &Raster) -> Raster {
        let (h, w) = img.dims();
        let pr = self.patch_radius as i64;
        let at = |y: i64, x: i64| img.get(y.clamp(0, h as i64 - 1) as usize, x.clamp(0, w as i64 - 1) as usize, 0);
        let grads = Raster::from_fn(h, w, 3, |y, x, c| {
            let (y, x) = (y as i64, x as i64);
            let ix = 0.5 * (at(y, x + 1) - at(y, x - 1));
            let iy = 0.5 * (at(y + 1, x) - at(y - 1, x));
            [ix * ix, ix * iy, iy * iy][c]
        });
        let mut weighted = Raster::zeros(h, w, 3);
        for y in 0..h {
            for x in 0..w {
                let mut t = [0.0; 3];
                for qy in -pr..=pr {
                    for qx in -pr..=pr {
                        let yy = (y as i64 + qy).clamp(0, h as i64 - 1) as usize;
                        let xx = (x as i64 + qx).clamp(0, w as i64 - 1) as usize;
                        for (c, v) in t.iter_mut().enumerate() {
                            *v += grads.get(yy, xx, c);
                        }
                    }
                }
                let tr = t[0] + t[2];
                let det = t[0] * t[2] - t[1] * t[1];
                let conf = 0.5 * (tr - (tr * tr - 4.0 * det).max(0.0).sqrt());
                let f = flow.pixel(y, x);
                let o = weighted.pixel_mut(y, x);
                o[0] = conf * f[0];
                o[1] = conf * f[1];
                o[2] = conf;
            }
        }
        let spread = gaussian_blur(&weighted, FLAT_FILL_SIGMA);
        Raster::from_fn(h, w, 2, |y, x, c| {
            let den = spread.get(y, x, 2);
            if den > 1e-12 {
                spread.get(y, x, c) / den
            } else {
                flow.get(y, x, c)
            }
        })
    }
}

/// 2x box average; the input is already low-passed.
fn decimate2(img: &Raster) -> Raster {
    let (h, w) = img.dims();
    let (nh, nw) = (h.div_ceil(2), w.div_ceil(2));
    Raster::from_fn(nh, nw, img.channels(), |y, x, c| {
        let ys = [2 * y, (2 * y + 1).min(h - 1)];
        let xs = [2 * x, (2 * x + 1).min(w - 1)];
        0.25 * (img.get(ys[0], xs[0], c)
            + img.get(ys[0], xs[1], c)
            + img.get(ys[1], xs[0], c)
            + img.get(ys[1], xs[1], c))
    })
}

/// Separable `[1 4 6 4 1] / 16` filter with clamped borders.
fn binomial(img: &Raster) -> Raster {
    const TAPS: [f64; 5] = [1.0 / 16.0, 4.0 / 16.0, 6.0 / 16.0, 4.0 / 16.0, 1.0 / 16.0];
    let (h, w) = img.dims();
    let pass = |src: &Raster, horizontal: bool| {
        Raster::from_fn(h, w, src.channels(), |y, x, c| {
            TAPS.iter()
                .enumerate()
                .map(|(i, t)| {
                    let d = i as i32 - 2;
                    let v = if horizontal {
                        src.get(y, (x as i32 + d).clamp(0, w as i32 - 1) as usize, c)
                    } else {
                        src.get((y as i32 + d).clamp(0, h as i32 - 1) as usize, x, c)
                    };
                    t * v
                })
                .sum()
        })
    };
    pass(&pass(img, true), false)
}

fn upsample_flow(coarse: &Raster, h: usize, w: usize) -> Raster {
    Raster::from_fn(h, w, 2, |y, x, c| {
        2.0 * coarse.sample((x as f64 - 0.5) / 2.0, (y as f64 - 0.5) / 2.0, c)
    })
}

fn median3(flow: &Raster) -> Raster {
    let (h, w) = flow.dims();
    Raster::from_fn(h, w, flow.channels(), |y, x, c| {
        let mut v = [0.0; 9];
        let mut n = 0;
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let yy = (y as i32 + dy).clamp(0, h as i32 - 1) as usize;
                let xx = (x as i32 + dx).clamp(0, w as i32 - 1) as usize;
                v[n] = flow.get(yy, xx, c);
                n += 1;
            }
        }
        v.sort_by(|a, b| a.total_cmp(b));
        v[4]
    })
}

/// Flows read from `<from>_<to>.flo` files, falling back to another provider.
pub struct PrecomputedFlows<P> {
    dir: PathBuf,
    fallback: P,
}

impl<P: FlowProvider> PrecomputedFlows<P> {
    pub fn new(dir: impl Into<PathBuf>, fallback: P) -> Self {
        PrecomputedFlows {
            dir: dir.into(),
            fallback,
        }
    }

    pub fn path_for(dir: &Path, from: usize, to: usize) -> PathBuf {
        dir.join(format!("{from}_{to}.flo"))
    }
}

impl<P: FlowProvider> FlowProvider for PrecomputedFlows<P> {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        self.fallback.flow(a, b)
    }

    fn flow_between(&self, ia: usize, a: &Frame, ib: usize, b: &Frame) -> Result<FlowField> {
        let path = Self::path_for(&self.dir, ia, ib);
        if path.exists() {
            let f = read_flo(&path)?;
            ensure_same_dims("precomputed flow", f.dims(), a.dims())?;
            Ok(f)
        } else {
            self.fallback.flow_between(ia, a, ib, b)
        }
    }
}

/// Memoizes index-addressed flows; frame pairs are requested by several bundles.
pub struct CachedFlows<P> {
    inner: P,
    cache: Mutex<HashMap<(usize, usize), FlowField>>,
}

impl<P: FlowProvider> CachedFlows<P> {
    pub fn new(inner: P) -> Self {
        CachedFlows {
            inner,
            cache: Mutex::new(HashMap::new()),
        }
    }
}

impl<P: FlowProvider> FlowProvider for CachedFlows<P> {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        self.inner.flow(a, b)
    }

    fn flow_between(&self, ia: usize, a: &Frame, ib: usize, b: &Frame) -> Result<FlowField> {
        if let Some(f) = self.cache.lock().unwrap().get(&(ia, ib)) {
            return Ok(f.clone());
        }
        let f = self.inner.flow_between(ia, a, ib, b)?;
        self.cache.lock().unwrap().insert((ia, ib), f.clone());
        Ok(f)
    }
}

impl<P: FlowProvider + ?Sized> FlowProvider for &P {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        (**self).flow(a, b)
    }
    fn flow_between(&self, ia: usize, a: &Frame, ib: usize, b: &Frame) -> Result<FlowField> {
        (**self).flow_between(ia, a, ib, b)
    }
}

impl<P: FlowProvider + ?Sized> FlowProvider for Box<P> {
    fn flow(&self, a: &Frame, b: &Frame) -> Result<FlowField> {
        (**self).flow(a, b)
    }
    fn flow_between(&self, ia: usize, a: &Frame, ib: usize, b: &Frame) -> Result<FlowField> {
        (**self).flow_between(ia, a, ib, b)
    }
}

/// Composes `F_ab` (over a, sampling b) with `F_bc` (over b, sampling c).
pub fn chain_flow(ab: &FlowField, bc: &FlowField) -> Result<FlowField> {
    ensure_same_dims("chain_flow", ab.dims(), bc.dims())?;
    let (h, w) = ab.dims();
    let mut s = [0.0; 2];
    Ok(FlowField::from_fn(h, w, |y, x| {
        let (dx, dy) = ab.at(y, x);
        bc.sample_into(x as f64 + dx, y as f64 + dy, &mut s);
        (dx + s[0], dy + s[1])
    }))
}

/// `out(p) = src(p + F(p))` with bilinear, edge-clamped sampling.
pub fn backward_warp(src: &Raster, flow: &FlowField) -> Result<Raster> {
    let c = src.channels();
    if c == 0 {
        return Err(Error::Shape("backward_warp: source has no channels".into()));
    }
    let (h, w) = flow.dims();
    let mut out = Raster::zeros(h, w, c);
    crate::par::for_each_row(out.data_mut(), w * c, |y, row| {
        for x in 0..w {
            let (dx, dy) = flow.at(y, x);
            src.sample_into(x as f64 + dx, y as f64 + dy, &mut row[x * c..(x + 1) * c]);
        }
    });
    Ok(out)
}

fn round_trip_residual(fw: &FlowField, bw: &FlowField, y: usize, x: usize) -> ((f64, f64), (f64, f64)) {
    let (dx, dy) = fw.at(y, x);
    let mut s = [0.0; 2];
    bw.sample_into(x as f64 + dx, y as f64 + dy, &mut s);
    ((dx, dy), (s[0], s[1]))
}

/// Forward-backward consistency error `||F_fw(p) + F_bw(p + F_fw(p))||`.
pub fn consistency_error(fw: &FlowField, bw: &FlowField) -> Result<Raster> {
    ensure_same_dims("consistency_error", fw.dims(), bw.dims())?;
    let (h, w) = fw.dims();
    Ok(Raster::from_fn(h, w, 1, |y, x, _| {
        let ((dx, dy), (bx, by)) = round_trip_residual(fw, bw, y, x);
        ((dx + bx).powi(2) + (dy + by).powi(2)).sqrt()
    }))
}

/// Occlusion mask of the pair: 0 where the round trip disagrees or leaves the raster.
pub fn visibility_mask(fw: &FlowField, bw: &FlowField) -> Result<Mask> {
    ensure_same_dims("visibility_mask", fw.dims(), bw.dims())?;
    let (h, w) = fw.dims();
    Ok(Mask::from_fn(h, w, |y, x| {
        let ((dx, dy), (bx, by)) = round_trip_residual(fw, bw, y, x);
        if !in_bounds(x as f64 + dx, y as f64 + dy, w, h) {
            return 0.0;
        }
        let resid = (dx + bx).powi(2) + (dy + by).powi(2);
        let scale = dx * dx + dy * dy + bx * bx + by * by;
        if resid > OCCLUSION_ALPHA * scale + OCCLUSION_BETA {
            0.0
        } else {
            1.0
        }
    }))
}

/// Indices of the neighborhood of `k`: `2*radius+1` nearest frames, shifted
/// (not shrunk) at the sequence ends.
pub fn neighbor_window(k: usize, len: usize, radius: usize) -> Vec<usize> {
    let size = (2 * radius + 1).min(len);
    let start = k.saturating_sub(radius).min(len - size);
    (start..start + size).collect()
}

/// Everything needed to render target frame `k` from one neighbor.
#[derive(Clone, Debug)]
pub struct NeighborWarp {
    pub index: usize,
    /// Chained warp `F_{k^t -> n^s}`.
    pub warp: FlowField,
    /// Visibility of the neighbor in target space.
    pub mask: Mask,
    /// Consistency error warped into target space.
    pub error: Raster,
    base_warp: FlowField,
    // Key-space visibility and error; `None` for the key itself.
    source_visibility: Option<Mask>,
    source_error: Option<Raster>,
}

/// Per-target collection of chained warps, masks and errors.
#[derive(Clone, Debug)]
pub struct WarpBundle {
    pub target: usize,
    pub key_warp: FlowField,
    pub neighbors: Vec<NeighborWarp>,
    key_warp_base: FlowField,
    shift: (f64, f64),
}

impl WarpBundle {
    pub fn dims(&self) -> (usize, usize) {
        self.key_warp.dims()
    }

    pub fn len(&self) -> usize {
        self.neighbors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.neighbors.is_empty()
    }

    /// Position of the key frame inside `neighbors`.
    pub fn key_position(&self) -> usize {
        self.neighbors
            .iter()
            .position(|n| n.index == self.target)
            .expect("bundle always contains its key")
    }

    pub fn indices(&self) -> Vec<usize> {
        self.neighbors.iter().map(|n| n.index).collect()
    }

    /// Global translation currently applied to every warp.
    pub fn shift(&self) -> (f64, f64) {
        self.shift
    }

    pub fn masks(&self) -> Vec<&Mask> {
        self.neighbors.iter().map(|n| &n.mask).collect()
    }

    /// Adds `x` to every chained warp and recomputes masks and errors.
    pub fn apply_path(&self, x: (f64, f64)) -> WarpBundle {
        let mut out = self.clone();
        out.shift = (self.shift.0 + x.0, self.shift.1 + x.1);
        out.refresh();
        out
    }

    /// Keeps only neighbors whose frame index passes `keep`; the key is always kept.
    pub fn retain(&mut self, mut keep: impl FnMut(usize) -> bool) {
        let target = self.target;
        self.neighbors.retain(|n| n.index == target || keep(n.index));
    }

    fn refresh(&mut self) {
        let (sx, sy) = self.shift;
        self.key_warp = self.key_warp_base.translated(sx, sy);
        let (h, w) = self.dims();
        for n in &mut self.neighbors {
            n.warp = n.base_warp.translated(sx, sy);
            let in_bounds = n.warp.in_bounds_mask();
            match (&n.source_visibility, &n.source_error) {
                (Some(vis), Some(err)) => {
                    // bilinear weights can sum to 1 + ulp
                    let warped = backward_warp(vis, &self.key_warp)
                        .expect("1-channel raster")
                        .map(|v| v.clamp(0.0, 1.0));
                    n.mask = Mask::new(warped)
                        .expect("clamped into [0, 1]")
                        .and(&in_bounds)
                        .expect("same dims");
                    n.error = backward_warp(err, &self.key_warp).expect("1-channel raster");
                }
                _ => {
                    n.mask = in_bounds;
                    n.error = Raster::zeros(h, w, 1);
                }
            }
        }
    }

    /// Per-pixel validity of every neighbor after an extra translation `x`,
    /// evaluated without materializing the shifted bundle.
    pub(crate) fn union_valid_at(&self, x: (f64, f64), threshold: f64) -> Vec<bool> {
        let (h, w) = self.dims();
        let (sx, sy) = (self.shift.0 + x.0, self.shift.1 + x.1);
        let mut valid = vec![false; h * w];
        for py in 0..h {
            for px in 0..w {
                let (kx, ky) = self.key_warp_base.at(py, px);
                let (kx, ky) = (kx + sx, ky + sy);
                let mut any = false;
                for n in &self.neighbors {
                    let (dx, dy) = n.base_warp.at(py, px);
                    if !in_bounds(px as f64 + (dx + sx), py as f64 + (dy + sy), w, h) {
                        continue;
                    }
                    let vis = match &n.source_visibility {
                        Some(v) => v.sample(px as f64 + kx, py as f64 + ky, 0),
                        None => 1.0,
                    };
                    if vis >= threshold {
                        any = true;
                        break;
                    }
                }
                valid[py * w + px] = any;
            }
        }
        valid
    }
}

/// Builds the bundle for target `k` from per-pair flows supplied by `flows(from, to)`.
pub fn build_warp_bundle_with(
    k: usize,
    len: usize,
    key_warp: &FlowField,
    radius: usize,
    mut flows: impl FnMut(usize, usize) -> Result<FlowField>,
) -> Result<WarpBundle> {
    if len == 0 {
        return Err(Error::Invalid("empty frame sequence".into()));
    }
    if k >= len {
        return Err(Error::Invalid(format!("target {k} out of range 0..{len}")));
    }
    let (h, w) = key_warp.dims();
    let mut neighbors = Vec::new();
    for n in neighbor_window(k, len, radius) {
        if n == k {
            neighbors.push(NeighborWarp {
                index: n,
                warp: key_warp.clone(),
                mask: key_warp.in_bounds_mask(),
                error: Raster::zeros(h, w, 1),
                base_warp: key_warp.clone(),
                source_visibility: None,
                source_error: None,
            });
            continue;
        }
        let fw = flows(k, n)?;
        let bw = flows(n, k)?;
        ensure_same_dims("build_warp_bundle", fw.dims(), (h, w))?;
        ensure_same_dims("build_warp_bundle", bw.dims(), (h, w))?;
        let vis = visibility_mask(&fw, &bw)?;
        let err = consistency_error(&fw, &bw)?;
        let warp = chain_flow(key_warp, &fw)?;
        neighbors.push(NeighborWarp {
            index: n,
            warp: warp.clone(),
            mask: Mask::zeros(h, w),
            error: Raster::zeros(h, w, 1),
            base_warp: warp,
            source_visibility: Some(vis),
            source_error: Some(err),
        });
    }
    let mut bundle = WarpBundle {
        target: k,
        key_warp: key_warp.clone(),
        neighbors,
        key_warp_base: key_warp.clone(),
        shift: (0.0, 0.0),
    };
    bundle.refresh();
    Ok(bundle)
}

/// Builds the bundle for target `k` using `provider` for pairwise flows.
pub fn build_warp_bundle(
    k: usize,
    frames: &[Frame],
    key_warp: &FlowField,
    provider: &dyn FlowProvider,
    radius: usize,
) -> Result<WarpBundle> {
    if frames.is_empty() {
        return Err(Error::Invalid("empty frame sequence".into()));
    }
    if k >= frames.len() {
        return Err(Error::Invalid(format!(
            "target {k} out of range 0..{}",
            frames.len()
        )));
    }
    ensure_same_dims("build_warp_bundle", key_warp.dims(), frames[k].dims())?;
    build_warp_bundle_with(k, frames.len(), key_warp, radius, |a, b| {
        provider.flow_between(a, &frames[a], b, &frames[b])
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn window_shifts_at_ends() {
        assert_eq!(neighbor_window(3, 7, 3), (0..7).collect::<Vec<_>>());
        assert_eq!(neighbor_window(0, 7, 3), (0..7).collect::<Vec<_>>());
        assert_eq!(neighbor_window(6, 10, 3), (3..10).collect::<Vec<_>>());
        assert_eq!(neighbor_window(9, 10, 3), (3..10).collect::<Vec<_>>());
        assert_eq!(neighbor_window(1, 3, 3), vec![0, 1, 2]);
        assert_eq!(neighbor_window(0, 1, 0), vec![0]);
    }

    #[test]
    fn constant_chain_adds() {
        let a = FlowField::constant(8, 8, 2.0, 0.0);
        let b = FlowField::constant(8, 8, 3.0, 1.0);
        let c = chain_flow(&a, &b).unwrap();
        assert!(c.data().chunks(2).all(|p| p == [5.0, 1.0]));
        let z = FlowField::zeros(8, 8);
        assert_eq!(chain_flow(&z, &z).unwrap(), z);
    }

    #[test]
    fn ramp_warp_is_linear() {
        let ramp = Raster::from_fn(8, 8, 1, |_, x, _| x as f64);
        let out = backward_warp(&ramp, &FlowField::constant(8, 8, 0.5, 0.0)).unwrap();
        for y in 0..8 {
            for x in 0..7 {
                assert_eq!(out.get(y, x, 0), x as f64 + 0.5);
            }
        }
    }

    #[test]
    fn warp_rejects_zero_channels() {
        let src = Raster::zeros(4, 4, 0);
        assert!(backward_warp(&src, &FlowField::zeros(4, 4)).is_err());
    }

    #[test]
    fn consistency_examples() {
        let fw = FlowField::constant(6, 6, 1.5, -0.5);
        let bw = FlowField::constant(6, 6, -1.5, 0.5);
        assert!(consistency_error(&fw, &bw).unwrap().data().iter().all(|&e| e == 0.0));
        let fw = FlowField::constant(6, 6, 1.0, 0.0);
        let e = consistency_error(&fw, &FlowField::zeros(6, 6)).unwrap();
        assert!(e.data().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn visibility_out_of_bounds_and_inverse() {
        let fw = FlowField::constant(10, 10, 2.0, 0.0);
        let bw = FlowField::constant(10, 10, -2.0, 0.0);
        let m = visibility_mask(&fw, &bw).unwrap();
        for y in 0..10 {
            for x in 0..8 {
                assert_eq!(m.at(y, x), 1.0);
            }
            assert_eq!(m.at(y, 8), 0.0);
        }
        let mut r = Raster::zeros(10, 10, 2);
        r.set(5, 0, 0, -10.0);
        let m = visibility_mask(&FlowField::new(r).unwrap(), &FlowField::zeros(10, 10)).unwrap();
        assert_eq!(m.at(5, 0), 0.0);
    }

    #[test]
    fn visibility_boundary_is_inclusive() {
        // residual (-1, -1): 2 == 0.01 * (85 + 65) + 0.5 exactly in f64
        let fw = FlowField::constant(32, 32, -9.0, -2.0);
        let bw = FlowField::constant(32, 32, 8.0, 1.0);
        let lhs: f64 = 2.0;
        let rhs = 0.01 * 150.0 + 0.5;
        assert_eq!(lhs, rhs);
        let m = visibility_mask(&fw, &bw).unwrap();
        assert_eq!(m.at(16, 16), 1.0);
        // nudging the backward flow pushes the residual over the threshold
        let bw = FlowField::constant(32, 32, 8.0, 0.9);
        let m = visibility_mask(&fw, &bw).unwrap();
        assert_eq!(m.at(16, 16), 0.0);
    }
}
