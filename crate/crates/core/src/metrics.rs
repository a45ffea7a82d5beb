//! Stabilization quality metrics and image similarity.
//!
//! Cropping ratio and distortion compare each output frame with its input
//! frame through a robustly fitted homography; stability looks at the
//! spectrum of the output's inter-frame motion; accumulated flow is the mean
//! residual motion. PSNR and SSIM score renders against ground truth.

use nalgebra::{DMatrix, Matrix2, Matrix3, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{ensure_same_dims, Error, Result};
use crate::flow::{consistency_error, FlowProvider};
use crate::raster::{Frame, Raster};

pub const RANSAC_ITERS: usize = 500;
pub const RANSAC_THRESHOLD: f64 = 2.0;
pub const GRID_STRIDE: usize = 8;
/// Correspondences with a larger round-trip error are ignored.
pub const MAX_CONSISTENCY_ERROR: f64 = 1.0;
/// Correspondences landing closer than this to the target frame's edge are
/// ignored; matches there lean on clamped pixels.
pub const TARGET_MARGIN: f64 = 4.0;
/// Shortest clip the stability score accepts.
pub const MIN_STABILITY_FRAMES: usize = 13;
/// Motion sequences quieter than this (RMS) count as perfectly still.
pub const STILL_RMS: f64 = 1e-6;
/// Reported PSNR for identical inputs.
pub const PSNR_IDENTICAL: f64 = 99.0;

/// Projective map normalized so the bottom-right entry is 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Homography(Matrix3::identity())
    }

    pub fn translation(tx: f64, ty: f64) -> Self {
        Homography(Matrix3::new(1.0, 0.0, tx, 0.0, 1.0, ty, 0.0, 0.0, 1.0))
    }

    fn normalized(m: Matrix3<f64>) -> Option<Self> {
        let s = m[(2, 2)];
        if s.abs() < 1e-12 || !s.is_finite() {
            return None;
        }
        let h = m / s;
        (h.iter().all(|v| v.is_finite()) && h.determinant().abs() > 1e-9).then_some(Homography(h))
    }

    pub fn apply(&self, p: (f64, f64)) -> (f64, f64) {
        let v = self.0 * Vector3::new(p.0, p.1, 1.0);
        (v[0] / v[2], v[1] / v[2])
    }

    /// Upper-left 2x2 block.
    pub fn linear_part(&self) -> Matrix2<f64> {
        self.0.fixed_view::<2, 2>(0, 0).into_owned()
    }

    /// The same map in coordinates whose origin sits at `(cx, cy)`.
    pub fn about(&self, cx: f64, cy: f64) -> Option<Self> {
        let to_pixels = Matrix3::new(1.0, 0.0, cx, 0.0, 1.0, cy, 0.0, 0.0, 1.0);
        let from_pixels = Matrix3::new(1.0, 0.0, -cx, 0.0, 1.0, -cy, 0.0, 0.0, 1.0);
        Homography::normalized(from_pixels * self.0 * to_pixels)
    }

    pub fn translation_part(&self) -> (f64, f64) {
        (self.0[(0, 2)], self.0[(1, 2)])
    }

    /// Singular values of the linear part, largest first.
    pub fn singular_values(&self) -> (f64, f64) {
        let s = self.linear_part().svd(false, false).singular_values;
        (s[0].max(s[1]), s[0].min(s[1]))
    }

    /// Uniform scale `sqrt(|det|)` of the linear part.
    pub fn scale(&self) -> f64 {
        self.linear_part().determinant().abs().sqrt()
    }

    /// Rotation angle of the polar decomposition of the linear part.
    pub fn rotation(&self) -> f64 {
        let svd = self.linear_part().svd(true, true);
        let r = svd.u.unwrap() * svd.v_t.unwrap();
        r[(1, 0)].atan2(r[(0, 0)])
    }
}

type Pair = ((f64, f64), (f64, f64));

/// Similarity transform taking the points to zero mean and mean radius sqrt(2).
fn normalizer(points: impl Iterator<Item = (f64, f64)> + Clone) -> Matrix3<f64> {
    let n = points.clone().count() as f64;
    let (sx, sy) = points.clone().fold((0.0, 0.0), |a, p| (a.0 + p.0, a.1 + p.1));
    let (cx, cy) = (sx / n, sy / n);
    let mean_r = points.map(|p| (p.0 - cx).hypot(p.1 - cy)).sum::<f64>() / n;
    let s = if mean_r > 0.0 {
        std::f64::consts::SQRT_2 / mean_r
    } else {
        1.0
    };
    Matrix3::new(s, 0.0, -s * cx, 0.0, s, -s * cy, 0.0, 0.0, 1.0)
}

/// Normalized direct linear transform on all given pairs.
fn dlt(pairs: &[&Pair]) -> Option<Homography> {
    let ta = normalizer(pairs.iter().map(|p| p.0));
    let tb = normalizer(pairs.iter().map(|p| p.1));
    let rows = (2 * pairs.len()).max(9);
    let mut a = DMatrix::<f64>::zeros(rows, 9);
    for (i, &&(p, q)) in pairs.iter().enumerate() {
        let u = ta * Vector3::new(p.0, p.1, 1.0);
        let v = tb * Vector3::new(q.0, q.1, 1.0);
        let (x, y) = (u[0], u[1]);
        let (xp, yp) = (v[0], v[1]);
        let r0 = [-x, -y, -1.0, 0.0, 0.0, 0.0, xp * x, xp * y, xp];
        let r1 = [0.0, 0.0, 0.0, -x, -y, -1.0, yp * x, yp * y, yp];
        for j in 0..9 {
            a[(2 * i, j)] = r0[j];
            a[(2 * i + 1, j)] = r1[j];
        }
    }
    let svd = a.svd(false, true);
    let v_t = svd.v_t?;
    let (imin, _) = svd
        .singular_values
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))?;
    let h = v_t.row(imin);
    let hn = Matrix3::new(h[0], h[1], h[2], h[3], h[4], h[5], h[6], h[7], h[8]);
    let m = tb.try_inverse()? * hn * ta;
    Homography::normalized(m)
}

fn reprojection(h: &Homography, pair: &Pair) -> f64 {
    let (x, y) = h.apply(pair.0);
    let d = (x - pair.1 .0).hypot(y - pair.1 .1);
    if d.is_finite() {
        d
    } else {
        f64::INFINITY
    }
}

/// Robust fit of `H` with `H p ~ p'` for `(p, p')` pairs.
pub fn fit_homography(pairs: &[Pair], seed: u64) -> Result<Homography> {
    if pairs.len() < 4 {
        return Err(Error::Fit(format!("need 4 correspondences, got {}", pairs.len())));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut best: Option<Vec<usize>> = None;
    for _ in 0..RANSAC_ITERS {
        let pick: Vec<&Pair> = sample(&mut rng, pairs.len(), 4).iter().map(|i| &pairs[i]).collect();
        let Some(h) = dlt(&pick) else { continue };
        let inliers: Vec<usize> = (0..pairs.len())
            .filter(|&i| reprojection(&h, &pairs[i]) < RANSAC_THRESHOLD)
            .collect();
        if inliers.len() >= 4 && best.as_ref().is_none_or(|b| inliers.len() > b.len()) {
            let all = inliers.len() == pairs.len();
            best = Some(inliers);
            if all {
                break;
            }
        }
    }
    let mut inliers = best.ok_or_else(|| Error::Fit("no non-degenerate sample found".into()))?;
    // refit on the consensus set, then once more on its own inliers
    let mut h = None;
    for _ in 0..2 {
        let set: Vec<&Pair> = inliers.iter().map(|&i| &pairs[i]).collect();
        let fit = dlt(&set).ok_or_else(|| Error::Fit("degenerate inlier set".into()))?;
        let next: Vec<usize> = (0..pairs.len())
            .filter(|&i| reprojection(&fit, &pairs[i]) < RANSAC_THRESHOLD)
            .collect();
        h = Some(fit);
        if next.len() < 4 || next == inliers {
            break;
        }
        inliers = next;
    }
    Ok(h.unwrap())
}

/// Grid correspondences `p -> p + F(p)` where the round trip agrees and the
/// target stays clear of the frame edge.
pub fn flow_correspondences(
    provider: &dyn FlowProvider,
    from: &Frame,
    to: &Frame,
) -> Result<Vec<Pair>> {
    ensure_same_dims("flow_correspondences", from.dims(), to.dims())?;
    let fw = provider.flow(from, to)?;
    let bw = provider.flow(to, from)?;
    let err = consistency_error(&fw, &bw)?;
    let (h, w) = from.dims();
    let mut out = Vec::new();
    for y in (GRID_STRIDE / 2..h).step_by(GRID_STRIDE) {
        for x in (GRID_STRIDE / 2..w).step_by(GRID_STRIDE) {
            let (dx, dy) = fw.at(y, x);
            let (tx, ty) = (x as f64 + dx, y as f64 + dy);
            let inside = |v: f64, n: usize| v >= TARGET_MARGIN && v <= n as f64 - 1.0 - TARGET_MARGIN;
            if err.get(y, x, 0) < MAX_CONSISTENCY_ERROR && inside(tx, w) && inside(ty, h) {
                out.push(((x as f64, y as f64), (tx, ty)));
            }
        }
    }
    Ok(out)
}

/// Homography taking points of `from` to points of `to`.
///
/// Expressed about the frame center, so its linear part is the local map
/// there rather than an extrapolation to the top-left corner, where small
/// perspective errors get large.
pub fn frame_homography(
    provider: &dyn FlowProvider,
    from: &Frame,
    to: &Frame,
    seed: u64,
) -> Result<Homography> {
    let h = fit_homography(&flow_correspondences(provider, from, to)?, seed)?;
    let (rows, cols) = from.dims();
    h.about(0.5 * (cols as f64 - 1.0), 0.5 * (rows as f64 - 1.0))
        .ok_or_else(|| Error::Fit("homography degenerates about the frame center".into()))
}

/// Per-frame output-to-input fits; `None` where the fit failed.
fn output_to_input_fits(
    input: &[Frame],
    output: &[Frame],
    provider: &dyn FlowProvider,
    seed: u64,
) -> Result<Vec<Option<Homography>>> {
    if input.len() != output.len() || input.is_empty() {
        return Err(Error::Invalid(format!(
            "need matching non-empty videos, got {} and {} frames",
            input.len(),
            output.len()
        )));
    }
    let fits = crate::par::map_collect((0..input.len()).collect(), |k| {
        frame_homography(provider, &output[k], &input[k], seed.wrapping_add(k as u64))
    });
    let mut out = Vec::with_capacity(fits.len());
    for (k, f) in fits.into_iter().enumerate() {
        match f {
            Ok(h) => out.push(Some(h)),
            Err(Error::Fit(msg)) => {
                log::warn!("frame {k}: skipped ({msg})");
                out.push(None);
            }
            Err(e) => return Err(e),
        }
    }
    let skipped = out.iter().filter(|h| h.is_none()).count();
    if skipped * 5 > out.len() {
        return Err(Error::Fit(format!(
            "{skipped} of {} frames could not be fitted",
            out.len()
        )));
    }
    Ok(out)
}

/// Per-frame scale traces (unclamped) and the headline mean of `min(c, 1)`.
pub fn cropping_trace(fits: &[Option<Homography>]) -> (f64, Vec<f64>) {
    let trace: Vec<f64> = fits.iter().map(|h| h.map_or(f64::NAN, |h| h.scale())).collect();
    let kept: Vec<f64> = trace.iter().copied().filter(|v| v.is_finite()).collect();
    let mean = kept.iter().map(|c| c.min(1.0)).sum::<f64>() / kept.len() as f64;
    (mean, trace)
}

pub fn distortion_trace(fits: &[Option<Homography>]) -> (f64, Vec<f64>) {
    let trace: Vec<f64> = fits
        .iter()
        .map(|h| {
            h.map_or(f64::NAN, |h| {
                let (hi, lo) = h.singular_values();
                lo / hi
            })
        })
        .collect();
    let min = trace
        .iter()
        .copied()
        .filter(|v| v.is_finite())
        .fold(1.0, f64::min);
    (min, trace)
}

/// Rounds the headline cropping ratio to the precision it is reported at.
fn headline(v: f64) -> f64 {
    (v * 1000.0).round() / 1000.0
}

/// Mean retained scale of output vs input; 1 for a full-frame result.
pub fn cropping_ratio(
    input: &[Frame],
    output: &[Frame],
    provider: &dyn FlowProvider,
    seed: u64,
) -> Result<f64> {
    let fits = output_to_input_fits(input, output, provider, seed)?;
    Ok(headline(cropping_trace(&fits).0))
}

/// Worst anisotropy of the output-to-input homographies.
pub fn distortion_value(
    input: &[Frame],
    output: &[Frame],
    provider: &dyn FlowProvider,
    seed: u64,
) -> Result<f64> {
    let fits = output_to_input_fits(input, output, provider, seed)?;
    Ok(distortion_trace(&fits).0)
}

/// Share of the non-DC spectral energy in bins 2..=6 of `seq`.
/// Sequences with RMS deviation below [`STILL_RMS`] score 1.
pub fn spectral_ratio(seq: &[f64]) -> f64 {
    let n = seq.len();
    let mean = seq.iter().sum::<f64>() / n as f64;
    let rms = (seq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    if n < 2 || !(rms >= STILL_RMS) {
        return 1.0;
    }
    let mut buf: Vec<Complex<f64>> = seq.iter().map(|&v| Complex::new(v, 0.0)).collect();
    FftPlanner::new().plan_fft_forward(n).process(&mut buf);
    let energy = |k: usize| buf[k].norm_sqr();
    let total: f64 = (1..=n / 2).map(energy).sum();
    let low: f64 = (2..=6.min(n / 2)).map(energy).sum();
    if total > 0.0 {
        low / total
    } else {
        1.0
    }
}

/// Stability from motion sequences: mean of the spectral ratios of the
/// translation magnitudes and rotation angles.
pub fn stability_from_motion(translation: &[f64], rotation: &[f64]) -> f64 {
    0.5 * (spectral_ratio(translation) + spectral_ratio(rotation))
}

/// Inter-frame translation magnitudes and rotations of a video.
pub fn motion_traces(
    frames: &[Frame],
    provider: &dyn FlowProvider,
    seed: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let fits = crate::par::map_collect((0..frames.len().saturating_sub(1)).collect(), |t| {
        frame_homography(provider, &frames[t], &frames[t + 1], seed.wrapping_add(t as u64))
    });
    let mut trans = Vec::with_capacity(fits.len());
    let mut rot = Vec::with_capacity(fits.len());
    for h in fits {
        let h = h?;
        let (tx, ty) = h.translation_part();
        trans.push(tx.hypot(ty));
        rot.push(h.rotation());
    }
    Ok((trans, rot))
}

pub fn stability_score(frames: &[Frame], provider: &dyn FlowProvider, seed: u64) -> Result<f64> {
    if frames.len() < MIN_STABILITY_FRAMES {
        return Err(Error::Invalid(format!(
            "stability needs at least {MIN_STABILITY_FRAMES} frames, got {}",
            frames.len()
        )));
    }
    let (t, r) = motion_traces(frames, provider, seed)?;
    Ok(stability_from_motion(&t, &r))
}

/// Mean flow magnitude per consecutive pair, divided by the frame diagonal.
pub fn flow_trace(frames: &[Frame], provider: &dyn FlowProvider) -> Result<Vec<f64>> {
    if frames.len() < 2 {
        return Ok(Vec::new());
    }
    let (h, w) = frames[0].dims();
    let diag = (w as f64).hypot(h as f64);
    let per_pair = crate::par::map_collect((0..frames.len() - 1).collect(), |t| {
        provider.flow(&frames[t], &frames[t + 1]).map(|f| {
            let sum: f64 = f.data().chunks_exact(2).map(|v| v[0].hypot(v[1])).sum();
            sum / (h * w) as f64 / diag
        })
    });
    per_pair.into_iter().collect()
}

pub fn accumulated_flow(frames: &[Frame], provider: &dyn FlowProvider) -> Result<f64> {
    let trace = flow_trace(frames, provider)?;
    if trace.is_empty() {
        return Ok(0.0);
    }
    Ok(trace.iter().sum::<f64>() / trace.len() as f64)
}

/// Peak signal-to-noise ratio with peak 1; identical inputs give 99.
pub fn psnr(a: &Raster, b: &Raster) -> Result<f64> {
    same_shape(a, b)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y).powi(2))
        .sum::<f64>()
        / a.data().len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_IDENTICAL);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(PSNR_IDENTICAL))
}

fn same_shape(a: &Raster, b: &Raster) -> Result<()> {
    ensure_same_dims("image comparison", a.dims(), b.dims())?;
    if a.channels() != b.channels() {
        return Err(Error::Shape("image comparison: channel counts differ".into()));
    }
    Ok(())
}

fn gaussian_window() -> [f64; 11] {
    let mut g = [0.0; 11];
    for (i, v) in g.iter_mut().enumerate() {
        let d = i as f64 - 5.0;
        *v = (-d * d / (2.0 * 1.5 * 1.5)).exp();
    }
    let s: f64 = g.iter().sum();
    g.map(|v| v / s)
}

/// Separable "valid" filtering of one channel with the 11-tap window.
fn filter_valid(plane: &[f64], h: usize, w: usize, g: &[f64; 11]) -> (Vec<f64>, usize, usize) {
    let (oh, ow) = (h - 10, w - 10);
    let mut tmp = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..11).map(|i| g[i] * plane[y * w + x + i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..11).map(|i| g[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
    (out, oh, ow)
}

/// Mean structural similarity (Gaussian 11x11 window, sigma 1.5, peak 1),
/// averaged over channels.
pub fn ssim(a: &Raster, b: &Raster) -> Result<f64> {
    same_shape(a, b)?;
    let (h, w) = a.dims();
    if h < 11 || w < 11 {
        return Err(Error::Shape("ssim needs images of at least 11x11".into()));
    }
    let c1 = 0.01f64.powi(2);
    let c2 = 0.03f64.powi(2);
    let g = gaussian_window();
    let mut total = 0.0;
    for c in 0..a.channels() {
        let pa = a.channel(c).into_vec();
        let pb = b.channel(c).into_vec();
        let prod = |f: &dyn Fn(f64, f64) -> f64| -> Vec<f64> {
            pa.iter().zip(&pb).map(|(&x, &y)| f(x, y)).collect()
        };
        let (mu_a, _, _) = filter_valid(&pa, h, w, &g);
        let (mu_b, _, _) = filter_valid(&pb, h, w, &g);
        let (aa, _, _) = filter_valid(&prod(&|x, _| x * x), h, w, &g);
        let (bb, _, _) = filter_valid(&prod(&|_, y| y * y), h, w, &g);
        let (ab, _, _) = filter_valid(&prod(&|x, y| x * y), h, w, &g);
        let n = mu_a.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            acc += ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
                / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += acc / n as f64;
    }
    Ok(total / a.channels() as f64)
}

/// Per-frame traces behind a [`StabReport`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct StabTraces {
    /// Unclamped output-to-input scale per frame (NaN where skipped).
    pub cropping: Vec<f64>,
    pub distortion: Vec<f64>,
    /// Inter-frame translation magnitude of the output.
    pub translation: Vec<f64>,
    pub rotation: Vec<f64>,
    /// Normalized mean flow magnitude per output frame pair.
    pub flow: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StabReport {
    pub cropping_ratio: f64,
    pub distortion: f64,
    /// `None` for clips too short to score.
    pub stability: Option<f64>,
    pub accumulated_flow: f64,
    pub skipped_frames: usize,
    pub traces: StabTraces,
}

impl StabReport {
    /// One row per frame: `k,cropping,distortion,translation,rotation,flow`.
    pub fn traces_csv(&self) -> String {
        let t = &self.traces;
        let mut s = String::from("k,cropping,distortion,translation,rotation,flow\n");
        let cell = |v: Option<&f64>| v.map(|v| v.to_string()).unwrap_or_default();
        for k in 0..t.cropping.len() {
            s.push_str(&format!(
                "{k},{},{},{},{},{}\n",
                cell(t.cropping.get(k)),
                cell(t.distortion.get(k)),
                cell(t.translation.get(k)),
                cell(t.rotation.get(k)),
                cell(t.flow.get(k)),
            ));
        }
        s
    }
}

/// All four metrics of `output` against `input`.
pub fn evaluate_videos(
    input: &[Frame],
    output: &[Frame],
    provider: &dyn FlowProvider,
    seed: u64,
) -> Result<StabReport> {
    let fits = output_to_input_fits(input, output, provider, seed)?;
    let (crop, crop_trace) = cropping_trace(&fits);
    let (dist, dist_trace) = distortion_trace(&fits);
    let (stability, translation, rotation) = if output.len() >= MIN_STABILITY_FRAMES {
        let (t, r) = motion_traces(output, provider, seed)?;
        (Some(stability_from_motion(&t, &r)), t, r)
    } else {
        (None, Vec::new(), Vec::new())
    };
    let flow = flow_trace(output, provider)?;
    let accumulated = if flow.is_empty() {
        0.0
    } else {
        flow.iter().sum::<f64>() / flow.len() as f64
    };
    Ok(StabReport {
        cropping_ratio: headline(crop),
        distortion: dist,
        stability,
        accumulated_flow: accumulated,
        skipped_frames: fits.iter().filter(|f| f.is_none()).count(),
        traces: StabTraces {
            cropping: crop_trace,
            distortion: dist_trace,
            translation,
            rotation,
            flow,
        },
    })
}
