//! Pairwise egomotion with depth codes.
//!
//! For matched keypoints `y_i^m, y_j^m` the loss is
//! `sum_m |R x_i^m(beta_i) + T - x_j^m(beta_j)|^2 + lambda (|beta_i|^2 + |beta_j|^2)`,
//! minimized by alternating a rigid Umeyama fit (codes fixed) with a joint
//! ridge solve over both codes (pose fixed). A progressive-growing RANSAC
//! wraps it to find the inlier set, and runs are ranked by how many image
//! cells their inliers cover.

use std::collections::HashSet;

use std::ops::{AddAssign, SubAssign};

use nalgebra::{DMatrix, DVector, Vector3};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_basis::{DepthBasis, DepthCode, SampledBasis};
use crate::error::{Error, Result};
use crate::geometry::{self, Intrinsics, Pixel, RigidPose};
use crate::matching::{KeypointSet, MatchSet};

/// Least-squares rigid transform `y ≈ R x + T` (no scale).
pub fn umeyama_rigid(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<RigidPose> {
    let reg = geometry::umeyama(x, y, false)?;
    Ok(RigidPose {
        rotation: reg.rotation,
        translation: reg.translation,
    })
}

/// Everything a pairwise solve needs from one frame.
#[derive(Debug, Clone, Copy)]
pub struct PairFrame<'a> {
    pub basis: &'a DepthBasis,
    pub keypoints: &'a KeypointSet,
    pub intrinsics: &'a Intrinsics,
}

/// Per-match rays and sampled basis rows for an image pair, computed once.
#[derive(Debug, Clone)]
pub struct PairSamples {
    pub matches: MatchSet,
    pub pixels_i: Vec<Pixel>,
    pub pixels_j: Vec<Pixel>,
    pub rays_i: Vec<Vector3<f64>>,
    pub rays_j: Vec<Vector3<f64>>,
    pub sampled_i: SampledBasis,
    pub sampled_j: SampledBasis,
}

impl PairSamples {
    pub fn new(matches: &MatchSet, frame_i: PairFrame<'_>, frame_j: PairFrame<'_>) -> Result<Self> {
        matches.validate(frame_i.keypoints.len(), frame_j.keypoints.len())?;
        if frame_i.basis.k() != frame_j.basis.k() {
            return Err(Error::DimensionMismatch {
                what: "basis size of frame j",
                expected: frame_i.basis.k(),
                actual: frame_j.basis.k(),
            });
        }
        let pixels_i: Vec<Pixel> = matches.pairs.iter().map(|&(a, _)| frame_i.keypoints.pixel(a)).collect();
        let pixels_j: Vec<Pixel> = matches.pairs.iter().map(|&(_, b)| frame_j.keypoints.pixel(b)).collect();
        Ok(PairSamples {
            matches: matches.clone(),
            rays_i: pixels_i.iter().map(|&p| frame_i.intrinsics.ray(p)).collect(),
            rays_j: pixels_j.iter().map(|&p| frame_j.intrinsics.ray(p)).collect(),
            sampled_i: frame_i.basis.sample_at(&pixels_i)?,
            sampled_j: frame_j.basis.sample_at(&pixels_j)?,
            pixels_i,
            pixels_j,
        })
    }

    pub fn len(&self) -> usize {
        self.rays_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays_i.is_empty()
    }

    pub fn k(&self) -> usize {
        self.sampled_i.k()
    }

    /// Camera-frame points of match `m` under the given codes.
    fn points(&self, m: usize, beta_i: &[f64], beta_j: &[f64]) -> (Vector3<f64>, Vector3<f64>, f64, f64) {
        let di = self.sampled_i.depth(m, beta_i);
        let dj = self.sampled_j.depth(m, beta_j);
        (self.rays_i[m] * di, self.rays_j[m] * dj, di, dj)
    }

    /// `|R x_i + T - x_j|^2`, or `None` when either sampled depth is not positive.
    pub fn match_error(&self, m: usize, state: &PairState) -> Option<f64> {
        let (xi, xj, di, dj) = self.points(m, &state.code_i.beta, &state.code_j.beta);
        if !(di > 0.0 && dj > 0.0) {
            return None;
        }
        Some((state.pose.transform(&xi) - xj).norm_squared())
    }

    /// Pairwise objective restricted to `active`.
    pub fn objective(&self, active: &[usize], state: &PairState, lambda: f64) -> f64 {
        let fit: f64 = active
            .iter()
            .map(|&m| {
                let (xi, xj, _, _) = self.points(m, &state.code_i.beta, &state.code_j.beta);
                (state.pose.transform(&xi) - xj).norm_squared()
            })
            .sum();
        fit + lambda * (state.code_i.norm_squared() + state.code_j.norm_squared())
    }
}

/// Relative pose plus both frames' codes.
#[derive(Debug, Clone, PartialEq)]
pub struct PairState {
    pub pose: RigidPose,
    pub code_i: DepthCode,
    pub code_j: DepthCode,
}

impl PairState {
    pub fn initial(k: usize) -> Self {
        PairState {
            pose: RigidPose::identity(),
            code_i: DepthCode::zeros(k),
            code_j: DepthCode::zeros(k),
        }
    }
}

/// Joint ridge step over `[beta_i; beta_j]` with the pose fixed.
///
/// With `a = R r_i`, `b = r_j` the residual of match `m` is
/// `a (mu_i + s_i.beta_i) + T - b (mu_j + s_j.beta_j)`, affine in the
/// stacked codes, so one `2K`-dimensional regularized solve is exact.
/// Normal equations of the joint ridge solve for a fixed active set. Only
/// the cross block and the right-hand side depend on the pose.
struct RidgeSystem {
    k: usize,
    rays_i: Vec<Vector3<f64>>,
    rays_j: Vec<Vector3<f64>>,
    mean_i: DVector<f64>,
    mean_j: DVector<f64>,
    factors_i: DMatrix<f64>,
    factors_j: DMatrix<f64>,
    /// `[A_ii, 0; 0, A_jj]` with the ridge term on the diagonal.
    diagonal: DMatrix<f64>,
}

impl RidgeSystem {
    fn new(samples: &PairSamples, active: &[usize], lambda: f64) -> Self {
        let (k, n) = (samples.k(), active.len());
        let factors_i = DMatrix::from_fn(n, k, |r, c| samples.sampled_i.factors(active[r])[c]);
        let factors_j = DMatrix::from_fn(n, k, |r, c| samples.sampled_j.factors(active[r])[c]);
        let rays_i: Vec<Vector3<f64>> = active.iter().map(|&m| samples.rays_i[m]).collect();
        let rays_j: Vec<Vector3<f64>> = active.iter().map(|&m| samples.rays_j[m]).collect();
        let weighted = |f: &DMatrix<f64>, rays: &[Vector3<f64>]| {
            let mut g = f.clone();
            for (mut row, ray) in g.row_iter_mut().zip(rays) {
                row *= ray.norm_squared();
            }
            f.transpose() * g
        };
        let mut diagonal = DMatrix::<f64>::identity(2 * k, 2 * k) * lambda;
        diagonal.view_mut((0, 0), (k, k)).add_assign(&weighted(&factors_i, &rays_i));
        diagonal.view_mut((k, k), (k, k)).add_assign(&weighted(&factors_j, &rays_j));
        RidgeSystem {
            k,
            mean_i: DVector::from_iterator(n, active.iter().map(|&m| samples.sampled_i.mean(m))),
            mean_j: DVector::from_iterator(n, active.iter().map(|&m| samples.sampled_j.mean(m))),
            rays_i,
            rays_j,
            factors_i,
            factors_j,
            diagonal,
        }
    }

    fn solve(&self, pose: &RigidPose) -> Result<(DepthCode, DepthCode)> {
        let (k, n) = (self.k, self.rays_i.len());
        let mut ab = DVector::<f64>::zeros(n);
        let mut ac = DVector::<f64>::zeros(n);
        let mut bc = DVector::<f64>::zeros(n);
        for m in 0..n {
            let a = pose.rotation * self.rays_i[m];
            let b = self.rays_j[m];
            let c = a * self.mean_i[m] + pose.translation - b * self.mean_j[m];
            ab[m] = a.dot(&b);
            ac[m] = a.dot(&c);
            bc[m] = b.dot(&c);
        }
        let mut scaled_i = self.factors_i.clone();
        for (mut row, w) in scaled_i.row_iter_mut().zip(ab.iter()) {
            row *= *w;
        }
        let cross = self.factors_j.transpose() * scaled_i;
        let mut normal = self.diagonal.clone();
        normal.view_mut((k, 0), (k, k)).sub_assign(&cross);
        normal.view_mut((0, k), (k, k)).sub_assign(&cross.transpose());
        let mut rhs = DVector::<f64>::zeros(2 * k);
        rhs.rows_mut(0, k).copy_from(&-(self.factors_i.transpose() * ac));
        rhs.rows_mut(k, k).copy_from(&(self.factors_j.transpose() * bc));
        let z = normal
            .cholesky()
            .ok_or_else(|| Error::Degenerate("pairwise ridge system is not positive definite".into()))?
            .solve(&rhs);
        Ok((
            DepthCode::from(z.rows(0, k).iter().copied().collect::<Vec<_>>()),
            DepthCode::from(z.rows(k, k).iter().copied().collect::<Vec<_>>()),
        ))
    }
}

/// Minimize the pairwise loss over both codes for a fixed relative pose.
#[allow(clippy::too_many_arguments)]
pub fn joint_ridge_update(
    pose: &RigidPose,
    sampled_i: &SampledBasis,
    sampled_j: &SampledBasis,
    pixels_i: &[Pixel],
    pixels_j: &[Pixel],
    k_i: &Intrinsics,
    k_j: &Intrinsics,
    lambda: f64,
) -> Result<(DepthCode, DepthCode)> {
    let n = sampled_i.len();
    for (what, len) in [("sampled_j", sampled_j.len()), ("pixels_i", pixels_i.len()), ("pixels_j", pixels_j.len())] {
        if len != n {
            return Err(Error::DimensionMismatch {
                what,
                expected: n,
                actual: len,
            });
        }
    }
    if !(lambda > 0.0) {
        return Err(Error::Domain(format!("ridge lambda must be positive, got {lambda}")));
    }
    let samples = PairSamples {
        matches: MatchSet::default(),
        pixels_i: pixels_i.to_vec(),
        pixels_j: pixels_j.to_vec(),
        rays_i: pixels_i.iter().map(|&p| k_i.ray(p)).collect(),
        rays_j: pixels_j.iter().map(|&p| k_j.ray(p)).collect(),
        sampled_i: sampled_i.clone(),
        sampled_j: sampled_j.clone(),
    };
    let all: Vec<usize> = (0..n).collect();
    RidgeSystem::new(&samples, &all, lambda).solve(pose)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum AlignmentStatus {
    Success,
    /// A sampled depth went non-positive under the current codes.
    NonPositiveDepth,
    /// Coincident or collinear points, or a singular solve.
    Degenerate,
    /// Every RANSAC run failed.
    AllRunsFailed,
    /// Best run covered fewer cells than required; a negative pair.
    InsufficientCoverage,
}

/// Outcome of aligning one image pair.
#[derive(Debug, Clone, PartialEq)]
pub struct PairAlignment {
    pub frame_i: usize,
    pub frame_j: usize,
    /// Maps camera `i` coordinates to camera `j` coordinates.
    pub relative_pose: RigidPose,
    pub code_i: DepthCode,
    pub code_j: DepthCode,
    pub inliers: MatchSet,
    /// `l^m` for each inlier, squared meters, in `inliers` order.
    pub inlier_errors: Vec<f64>,
    pub coverage: usize,
    pub status: AlignmentStatus,
    /// Objective after every half step of the final coordinate descent.
    pub objective_trace: Vec<f64>,
}

impl PairAlignment {
    pub fn success(&self) -> bool {
        self.status == AlignmentStatus::Success
    }

    fn failed(matches: &MatchSet, k: usize, status: AlignmentStatus) -> Self {
        PairAlignment {
            frame_i: matches.frame_i,
            frame_j: matches.frame_j,
            relative_pose: RigidPose::identity(),
            code_i: DepthCode::zeros(k),
            code_j: DepthCode::zeros(k),
            inliers: MatchSet::new(matches.frame_i, matches.frame_j, Vec::new()),
            inlier_errors: Vec::new(),
            coverage: 0,
            status,
            objective_trace: Vec::new(),
        }
    }

    pub fn state(&self) -> PairState {
        PairState {
            pose: self.relative_pose,
            code_i: self.code_i.clone(),
            code_j: self.code_j.clone(),
        }
    }
}

/// Relative objective decrease below which coordinate descent stops.
pub const CD_TOLERANCE: f64 = 1e-8;
pub const CD_MAX_ITERS: usize = 50;

#[derive(Debug, Clone)]
struct Descent {
    state: PairState,
    trace: Vec<f64>,
    status: AlignmentStatus,
}

fn positive_depths(samples: &PairSamples, active: &[usize], state: &PairState) -> bool {
    active.iter().all(|&m| {
        samples.sampled_i.depth(m, &state.code_i.beta) > 0.0 && samples.sampled_j.depth(m, &state.code_j.beta) > 0.0
    })
}

fn descend(samples: &PairSamples, active: &[usize], init: PairState, lambda: f64, max_iters: usize) -> Descent {
    let mut state = init;
    let mut trace = Vec::with_capacity(2 * max_iters);
    let mut previous = f64::INFINITY;
    let mut xi = Vec::with_capacity(active.len());
    let mut xj = Vec::with_capacity(active.len());
    let system = RidgeSystem::new(samples, active, lambda);
    for _ in 0..max_iters {
        if !positive_depths(samples, active, &state) {
            return Descent {
                state,
                trace,
                status: AlignmentStatus::NonPositiveDepth,
            };
        }
        xi.clear();
        xj.clear();
        for &m in active {
            let (a, b, _, _) = samples.points(m, &state.code_i.beta, &state.code_j.beta);
            xi.push(a);
            xj.push(b);
        }
        match umeyama_rigid(&xi, &xj) {
            Ok(pose) => state.pose = pose,
            Err(_) => {
                return Descent {
                    state,
                    trace,
                    status: AlignmentStatus::Degenerate,
                }
            }
        }
        trace.push(samples.objective(active, &state, lambda));

        match system.solve(&state.pose) {
            Ok((ci, cj)) => {
                state.code_i = ci;
                state.code_j = cj;
            }
            Err(_) => {
                return Descent {
                    state,
                    trace,
                    status: AlignmentStatus::Degenerate,
                }
            }
        }
        if !positive_depths(samples, active, &state) {
            return Descent {
                state,
                trace,
                status: AlignmentStatus::NonPositiveDepth,
            };
        }
        let current = samples.objective(active, &state, lambda);
        trace.push(current);
        if previous.is_finite() && previous - current <= CD_TOLERANCE * previous.abs() {
            break;
        }
        previous = current;
    }
    Descent {
        state,
        trace,
        status: AlignmentStatus::Success,
    }
}

fn build_alignment(samples: &PairSamples, active: &[usize], descent: Descent, cfg: &RansacConfig) -> PairAlignment {
    let inliers = samples.matches.subset(active);
    let inlier_errors = active
        .iter()
        .map(|&m| samples.match_error(m, &descent.state).unwrap_or(f64::INFINITY))
        .collect();
    let coverage = coverage_cells(samples, active, cfg.coverage_cell);
    PairAlignment {
        frame_i: samples.matches.frame_i,
        frame_j: samples.matches.frame_j,
        relative_pose: descent.state.pose,
        code_i: descent.state.code_i,
        code_j: descent.state.code_j,
        inliers,
        inlier_errors,
        coverage,
        status: descent.status,
        objective_trace: descent.trace,
    }
}

/// Coordinate descent from zero codes on all given matches.
pub fn coordinate_descent_align(
    matches: &MatchSet,
    frame_i: PairFrame<'_>,
    frame_j: PairFrame<'_>,
    lambda: f64,
    max_iters: usize,
) -> Result<PairAlignment> {
    if matches.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 matches, got {}", matches.len())));
    }
    let samples = PairSamples::new(matches, frame_i, frame_j)?;
    let active: Vec<usize> = (0..samples.len()).collect();
    let descent = descend(&samples, &active, PairState::initial(samples.k()), lambda, max_iters);
    let cfg = RansacConfig {
        lambda,
        ..RansacConfig::default()
    };
    Ok(build_alignment(&samples, &active, descent, &cfg))
}

/// Progressive-growing RANSAC and coverage-based run selection settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub seed: u64,
    /// Matches drawn to start each run.
    pub initial_size: usize,
    /// Multiplicative growth of the active set.
    pub growth: f64,
    /// Per-match 3D distance bound (meters); the squared error is compared to its square.
    pub stop_threshold: f64,
    pub runs: usize,
    pub lambda: f64,
    /// Side of the square coverage cells, in pixels.
    pub coverage_cell: f64,
    pub min_covered_cells: usize,
    pub max_cd_iters: usize,
}

impl Default for RansacConfig {
    fn default() -> Self {
        RansacConfig {
            seed: 0,
            initial_size: 3,
            growth: 1.2,
            stop_threshold: 0.10,
            runs: 32,
            lambda: 0.05,
            coverage_cell: 10.0,
            min_covered_cells: 30,
            max_cd_iters: CD_MAX_ITERS,
        }
    }
}

impl RansacConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.growth > 1.0) {
            return Err(Error::Config(format!("growth must exceed 1, got {}", self.growth)));
        }
        if !(self.stop_threshold > 0.0) {
            return Err(Error::Config(format!("stop threshold must be positive, got {}", self.stop_threshold)));
        }
        if self.initial_size < 3 {
            return Err(Error::Config(format!("initial size must be at least 3, got {}", self.initial_size)));
        }
        if !(self.lambda > 0.0) {
            return Err(Error::Config(format!("ridge lambda must be positive, got {}", self.lambda)));
        }
        if self.runs == 0 || !(self.coverage_cell > 0.0) {
            return Err(Error::Config("runs and coverage cell size must be positive".into()));
        }
        Ok(())
    }
}

/// Distinct coverage cells touched by the active keypoints, frame `i` plus frame `j`.
fn coverage_cells(samples: &PairSamples, active: &[usize], cell: f64) -> usize {
    let count = |pixels: &[Pixel]| {
        active
            .iter()
            .map(|&m| ((pixels[m].u / cell).floor() as i64, (pixels[m].v / cell).floor() as i64))
            .collect::<HashSet<_>>()
            .len()
    };
    count(&samples.pixels_i) + count(&samples.pixels_j)
}

/// Collinear (or coincident) seeds leave the rigid fit underdetermined.
fn seed_is_degenerate(samples: &PairSamples, seed: &[usize]) -> bool {
    let degenerate = |pts: Vec<Vector3<f64>>| {
        let mean = pts.iter().sum::<Vector3<f64>>() / pts.len() as f64;
        let cov = pts.iter().fold(nalgebra::Matrix3::zeros(), |acc, p| acc + (p - mean) * (p - mean).transpose());
        let mut sv: Vec<f64> = cov.symmetric_eigenvalues().iter().map(|v| v.max(0.0)).collect();
        sv.sort_by(|a, b| b.total_cmp(a));
        sv[0] <= 0.0 || sv[1] <= 1e-12 * sv[0]
    };
    let zero = vec![0.0; samples.k()];
    let pi = seed.iter().map(|&m| samples.points(m, &zero, &zero).0).collect();
    let pj = seed.iter().map(|&m| samples.points(m, &zero, &zero).1).collect();
    degenerate(pi) || degenerate(pj)
}

/// One progressive-growing run started from the given seed matches.
///
/// Each round optimizes the active set (warm-started from the previous
/// round), then re-selects the `ceil(growth * M)` matches with the lowest
/// error, never admitting a match whose error exceeds the threshold. The
/// run ends when no further growth is possible, or when an optimized active
/// set has a match above threshold, in which case the previous state is kept.
pub fn progressive_grow_from(samples: &PairSamples, seed: &[usize], cfg: &RansacConfig) -> PairAlignment {
    let k = samples.k();
    if seed.len() < 3 || seed_is_degenerate(samples, seed) {
        return PairAlignment::failed(&samples.matches, k, AlignmentStatus::Degenerate);
    }
    let threshold = cfg.stop_threshold * cfg.stop_threshold;
    let n = samples.len();
    let mut active: Vec<usize> = seed.to_vec();
    let mut state = PairState::initial(k);
    let mut last_valid: Option<(Vec<usize>, Descent)> = None;
    let mut first_failure = AlignmentStatus::Degenerate;
    loop {
        let descent = descend(samples, &active, state.clone(), cfg.lambda, cfg.max_cd_iters);
        if descent.status != AlignmentStatus::Success {
            first_failure = descent.status;
            break;
        }
        let errors: Vec<f64> = (0..n)
            .map(|m| samples.match_error(m, &descent.state).unwrap_or(f64::INFINITY))
            .collect();
        let worst = active.iter().map(|&m| errors[m]).fold(0.0, f64::max);
        if worst > threshold {
            break;
        }
        state = descent.state.clone();
        let size = active.len();
        last_valid = Some((active.clone(), descent));
        if size == n {
            break;
        }
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| errors[a].total_cmp(&errors[b]).then(a.cmp(&b)));
        let eligible = errors.iter().filter(|&&e| e <= threshold).count();
        let next = ((cfg.growth * size as f64).ceil() as usize).min(eligible);
        if next <= size {
            break;
        }
        active = order[..next].to_vec();
    }
    match last_valid {
        Some((active, descent)) => build_alignment(samples, &active, descent, cfg),
        None => PairAlignment::failed(&samples.matches, k, first_failure),
    }
}

fn run_seed(cfg: &RansacConfig, run: usize, n: usize) -> Vec<usize> {
    let stream = cfg.seed ^ (run as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    let mut rng = ChaCha8Rng::seed_from_u64(stream);
    let mut seed = sample(&mut rng, n, cfg.initial_size.min(n)).into_vec();
    seed.sort_unstable();
    seed
}

/// All RANSAC runs, in run order.
pub fn ransac_runs(samples: &PairSamples, cfg: &RansacConfig) -> Result<Vec<PairAlignment>> {
    cfg.validate()?;
    if samples.len() < cfg.initial_size {
        return Err(Error::Degenerate(format!(
            "need at least {} matches, got {}",
            cfg.initial_size,
            samples.len()
        )));
    }
    Ok((0..cfg.runs)
        .into_par_iter()
        .map(|run| progressive_grow_from(samples, &run_seed(cfg, run, samples.len()), cfg))
        .collect())
}

/// Pick the successful run covering the most cells (lowest index on ties).
pub fn coverage_select(runs: &[PairAlignment], cfg: &RansacConfig) -> Result<PairAlignment> {
    if runs.is_empty() {
        return Err(Error::Domain("coverage selection needs at least one run".into()));
    }
    let best = runs
        .iter()
        .filter(|r| r.success())
        .fold(None::<&PairAlignment>, |best, r| match best {
            Some(b) if b.coverage >= r.coverage => Some(b),
            _ => Some(r),
        });
    Ok(match best {
        None => {
            let mut out = runs[0].clone();
            out.status = AlignmentStatus::AllRunsFailed;
            out
        }
        Some(b) => {
            let mut out = b.clone();
            if out.coverage < cfg.min_covered_cells {
                out.status = AlignmentStatus::InsufficientCoverage;
            }
            out
        }
    })
}

/// Robust pairwise alignment: all runs, then coverage selection.
pub fn ransac_progressive_grow(
    matches: &MatchSet,
    frame_i: PairFrame<'_>,
    frame_j: PairFrame<'_>,
    cfg: &RansacConfig,
) -> Result<PairAlignment> {
    let samples = PairSamples::new(matches, frame_i, frame_j)?;
    let runs = ransac_runs(&samples, cfg)?;
    coverage_select(&runs, cfg)
}
