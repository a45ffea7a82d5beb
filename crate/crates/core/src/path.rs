//! Per-frame global translations that enlarge the jointly visible area.
//!
//! The energy couples only consecutive frames, so every coarse-to-fine level
//! is a chain and is solved exactly by dynamic programming.

use crate::error::{Error, Result};
use crate::flow::WarpBundle;
use crate::fusion::HOLE_THRESHOLD;

/// Integer translation label `(x, y)` in pixels.
pub type Label = (i32, i32);

/// Fraction of target pixels that no neighbor covers after shifting every
/// warp of the bundle by `x`.
pub fn coverage_fraction(bundle: &WarpBundle, x: (f64, f64)) -> f64 {
    let valid = bundle.union_valid_at(x, HOLE_THRESHOLD);
    let holes = valid.iter().filter(|v| !**v).count();
    holes as f64 / valid.len() as f64
}

/// Adds `x` to every chained warp of the bundle.
pub fn apply_path(bundle: &WarpBundle, x: (f64, f64)) -> WarpBundle {
    bundle.apply_path(x)
}

fn as_shift(l: Label) -> (f64, f64) {
    (f64::from(l.0), f64::from(l.1))
}

/// Per-frame invalid fraction as a function of the translation label.
pub struct CoverageField<'a> {
    frames: usize,
    eval: Box<dyn Fn(usize, Label) -> f64 + Send + Sync + 'a>,
}

impl<'a> CoverageField<'a> {
    pub fn new(frames: usize, eval: impl Fn(usize, Label) -> f64 + Send + Sync + 'a) -> Self {
        CoverageField {
            frames,
            eval: Box::new(eval),
        }
    }

    pub fn from_bundles(bundles: &'a [WarpBundle]) -> Self {
        Self::new(bundles.len(), move |k, l| coverage_fraction(&bundles[k], as_shift(l)))
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn at(&self, k: usize, label: Label) -> f64 {
        (self.eval)(k, label)
    }

    /// Evaluates the field on one label set per frame.
    pub fn table(&self, labels: &[Vec<Label>]) -> Vec<Vec<f64>> {
        let jobs: Vec<(usize, usize)> = labels
            .iter()
            .enumerate()
            .flat_map(|(k, ls)| (0..ls.len()).map(move |i| (k, i)))
            .collect();
        let values = crate::par::map_collect(jobs.clone(), |(k, i)| self.at(k, labels[k][i]));
        let mut out: Vec<Vec<f64>> = labels.iter().map(|l| Vec::with_capacity(l.len())).collect();
        for ((k, _), v) in jobs.into_iter().zip(values) {
            out[k].push(v);
        }
        out
    }
}

/// Solver settings.
#[derive(Clone, Debug, PartialEq)]
pub struct PathOptions {
    /// Smoothness weight.
    pub lambda_s: f64,
    /// Translations are divided by this length before squaring.
    pub diag: f64,
    /// Labels stay inside `[-radius, radius]^2`.
    pub radius: i32,
    /// Grid step per level, coarse first.
    pub steps: Vec<i32>,
}

impl PathOptions {
    /// Defaults for a `w x h` frame: radius is 10% of the diagonal.
    pub fn for_frame(width: usize, height: usize, lambda_s: f64) -> Self {
        let diag = (width as f64).hypot(height as f64);
        PathOptions {
            lambda_s,
            diag,
            radius: (0.1 * diag).round() as i32,
            steps: vec![8, 2, 1],
        }
    }
}

/// Optimized translations plus bookkeeping.
#[derive(Clone, Debug, PartialEq)]
pub struct PathSolution {
    pub path: Vec<Label>,
    pub energy: f64,
    /// Energy of the all-zero path.
    pub zero_energy: f64,
    /// Energy after each level.
    pub level_energies: Vec<f64>,
    /// Per-frame share of `energy`: own data term plus both incident pairwise terms.
    pub contributions: Vec<f64>,
}

fn pair_cost(a: Label, b: Label, lambda: f64, diag: f64) -> f64 {
    let dx = f64::from(a.0 - b.0) / diag;
    let dy = f64::from(a.1 - b.1) / diag;
    lambda * (dx * dx + dy * dy)
}

/// Per-frame energy shares; they sum to [`path_energy`].
pub fn energy_contributions(path: &[Label], data: &[f64], lambda: f64, diag: f64) -> Vec<f64> {
    (0..path.len())
        .map(|k| {
            let mut e = data[k];
            if k > 0 {
                e += pair_cost(path[k], path[k - 1], lambda, diag);
            }
            if k + 1 < path.len() {
                e += pair_cost(path[k], path[k + 1], lambda, diag);
            }
            e
        })
        .collect()
}

/// Data terms plus `lambda * sum_k sum_{q=k±1} |(x_k - x_q)/diag|^2`
/// (each neighboring pair counted from both sides).
pub fn path_energy(path: &[Label], coverage: &CoverageField, lambda: f64, diag: f64) -> f64 {
    let data: Vec<f64> = path.iter().enumerate().map(|(k, &l)| coverage.at(k, l)).collect();
    energy_from_data(path, &data, lambda, diag)
}

fn energy_from_data(path: &[Label], data: &[f64], lambda: f64, diag: f64) -> f64 {
    let unary: f64 = data.iter().sum();
    let pairwise: f64 = path
        .windows(2)
        .map(|p| 2.0 * pair_cost(p[0], p[1], lambda, diag))
        .sum();
    unary + pairwise
}

/// Exact minimizer of a chain energy over explicit per-frame label sets.
/// Earlier labels in a set win ties. Returns chosen indices and the energy.
pub fn solve_chain(
    labels: &[Vec<Label>],
    data: &[Vec<f64>],
    lambda: f64,
    diag: f64,
) -> Result<(Vec<usize>, f64)> {
    if labels.is_empty() {
        return Ok((Vec::new(), 0.0));
    }
    if labels.iter().any(|l| l.is_empty()) {
        return Err(Error::Invalid("path solver got an empty label set".into()));
    }
    if data.len() != labels.len() || data.iter().zip(labels).any(|(d, l)| d.len() != l.len()) {
        return Err(Error::Shape("cost table does not match label sets".into()));
    }
    let t = labels.len();
    let mut cost = data[0].clone();
    let mut back: Vec<Vec<usize>> = vec![Vec::new(); t];
    for k in 1..t {
        let mut next = Vec::with_capacity(labels[k].len());
        let mut arg = Vec::with_capacity(labels[k].len());
        for (j, &lj) in labels[k].iter().enumerate() {
            let mut best = f64::INFINITY;
            let mut bi = 0;
            for (i, &li) in labels[k - 1].iter().enumerate() {
                let c = cost[i] + 2.0 * pair_cost(li, lj, lambda, diag);
                if c < best {
                    best = c;
                    bi = i;
                }
            }
            next.push(best + data[k][j]);
            arg.push(bi);
        }
        cost = next;
        back[k] = arg;
    }
    let mut last = 0;
    for (j, &c) in cost.iter().enumerate() {
        if c < cost[last] {
            last = j;
        }
    }
    let mut picks = vec![0; t];
    picks[t - 1] = last;
    for k in (1..t).rev() {
        picks[k - 1] = back[k][picks[k]];
    }
    let path: Vec<Label> = picks.iter().enumerate().map(|(k, &i)| labels[k][i]).collect();
    let chosen: Vec<f64> = picks.iter().enumerate().map(|(k, &i)| data[k][i]).collect();
    Ok((picks, energy_from_data(&path, &chosen, lambda, diag)))
}

/// Orders labels by length, then `x`, then `y`: the tie-break preference.
pub fn sort_labels(labels: &mut [Label]) {
    labels.sort_by_key(|&(x, y)| (x * x + y * y, x, y));
}

fn grid_around(center: Label, half: i32, step: i32, radius: i32) -> Vec<Label> {
    let n = half / step;
    let mut out = Vec::new();
    for i in -n..=n {
        for j in -n..=n {
            let l = (center.0 + i * step, center.1 + j * step);
            if l.0.abs() <= radius && l.1.abs() <= radius {
                out.push(l);
            }
        }
    }
    sort_labels(&mut out);
    out
}

/// Coarse-to-fine minimization of the path energy.
///
/// The first level searches the whole `[-radius, radius]^2` grid at the
/// coarsest step; each later level searches `±(previous step)` around the
/// previous solution at its own step. Every level contains the previous
/// solution, so the energy never increases.
pub fn optimize_path(coverage: &CoverageField, opts: &PathOptions) -> Result<PathSolution> {
    if opts.steps.is_empty() || opts.steps.iter().any(|&s| s <= 0) {
        return Err(Error::Invalid("path levels need positive steps".into()));
    }
    if opts.radius < 0 || !(opts.diag > 0.0) {
        return Err(Error::Invalid("path radius and diagonal must be positive".into()));
    }
    let t = coverage.frames();
    let zero = vec![(0, 0); t];
    let zero_energy = path_energy(&zero, coverage, opts.lambda_s, opts.diag);
    let mut path = zero;
    let mut level_energies = Vec::with_capacity(opts.steps.len());
    let mut prev_step: Option<i32> = None;
    for &step in &opts.steps {
        let labels: Vec<Vec<Label>> = path
            .iter()
            .map(|&c| match prev_step {
                None => grid_around((0, 0), opts.radius, step, opts.radius),
                Some(p) => grid_around(c, p, step, opts.radius),
            })
            .collect();
        let data = coverage.table(&labels);
        let (picks, energy) = solve_chain(&labels, &data, opts.lambda_s, opts.diag)?;
        path = picks.iter().enumerate().map(|(k, &i)| labels[k][i]).collect();
        level_energies.push(energy);
        prev_step = Some(step);
    }
    let data: Vec<f64> = path.iter().enumerate().map(|(k, &l)| coverage.at(k, l)).collect();
    Ok(PathSolution {
        energy: energy_from_data(&path, &data, opts.lambda_s, opts.diag),
        contributions: energy_contributions(&path, &data, opts.lambda_s, opts.diag),
        path,
        zero_energy,
        level_energies,
    })
}

/// Shifts each bundle by its frame's label.
pub fn adjust_bundles(bundles: &[WarpBundle], path: &[Label]) -> Result<Vec<WarpBundle>> {
    if bundles.len() != path.len() {
        return Err(Error::Shape(format!(
            "{} bundles for a path of {} frames",
            bundles.len(),
            path.len()
        )));
    }
    Ok(bundles
        .iter()
        .zip(path)
        .map(|(b, &l)| b.apply_path(as_shift(l)))
        .collect())
}
