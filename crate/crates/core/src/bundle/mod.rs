//! Global bundle adjustment over cumulative pose chains, per-frame depth
//! codes and per-match auxiliary trust variables.
//!
//! For each constraint `(i, j)` and match `m` the world-space points are
//! `x_i^w = R_i x_i(beta_i) + T_i` and likewise for `j`. The loss sums
//! `sigmoid(u) |x_i^w - x_j^w| + lambda_u sigmoid(-u)` over matches plus the
//! elementwise L1 pose-consistency term against the pairwise relative pose.

mod optimizer;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::depth_basis::{DepthBasis, DepthCode, SampledBasis};
use crate::error::{Error, Result};
use crate::geometry::{self, Intrinsics, RigidPose, TaitBryanDelta};
use crate::matching::MatchSet;
use crate::pairwise::{PairAlignment, PairSamples};

pub use optimizer::{
    optimize_bundle, warmstart_active_count, warmstart_poses, window_converged, Adam, BundleReport,
};

/// Verified inlier matches between two frames plus their pairwise relative pose.
#[derive(Debug, Clone, PartialEq)]
pub struct PairConstraint {
    pub frame_i: usize,
    pub frame_j: usize,
    pub matches: MatchSet,
    pub rays_i: Vec<Vector3<f64>>,
    pub rays_j: Vec<Vector3<f64>>,
    pub sampled_i: SampledBasis,
    pub sampled_j: SampledBasis,
    /// Maps camera `i` coordinates to camera `j` coordinates.
    pub relative_pose: RigidPose,
}

impl PairConstraint {
    pub fn new(samples: PairSamples, relative_pose: RigidPose) -> Result<Self> {
        let c = PairConstraint {
            frame_i: samples.matches.frame_i,
            frame_j: samples.matches.frame_j,
            matches: samples.matches,
            rays_i: samples.rays_i,
            rays_j: samples.rays_j,
            sampled_i: samples.sampled_i,
            sampled_j: samples.sampled_j,
            relative_pose,
        };
        c.validate()?;
        Ok(c)
    }

    /// Constraint from a successful pairwise alignment, keeping only its inliers.
    pub fn from_alignment(samples: &PairSamples, alignment: &PairAlignment) -> Result<Self> {
        let keep: Vec<usize> = alignment
            .inliers
            .pairs
            .iter()
            .map(|p| {
                samples
                    .matches
                    .pairs
                    .iter()
                    .position(|q| q == p)
                    .ok_or_else(|| Error::Domain(format!("inlier {p:?} is not among the pair's matches")))
            })
            .collect::<Result<_>>()?;
        let sub = PairSamples {
            matches: samples.matches.subset(&keep),
            pixels_i: keep.iter().map(|&m| samples.pixels_i[m]).collect(),
            pixels_j: keep.iter().map(|&m| samples.pixels_j[m]).collect(),
            rays_i: keep.iter().map(|&m| samples.rays_i[m]).collect(),
            rays_j: keep.iter().map(|&m| samples.rays_j[m]).collect(),
            sampled_i: samples.sampled_i.select(&keep),
            sampled_j: samples.sampled_j.select(&keep),
        };
        PairConstraint::new(sub, alignment.relative_pose)
    }

    pub fn len(&self) -> usize {
        self.rays_i.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rays_i.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_i == self.frame_j {
            return Err(Error::Domain(format!("constraint links frame {} to itself", self.frame_i)));
        }
        let n = self.rays_i.len();
        if n == 0 {
            return Err(Error::Domain(format!(
                "constraint ({}, {}) has no inlier matches",
                self.frame_i, self.frame_j
            )));
        }
        for (what, len) in [
            ("constraint rays_j", self.rays_j.len()),
            ("constraint sampled_i", self.sampled_i.len()),
            ("constraint sampled_j", self.sampled_j.len()),
            ("constraint matches", self.matches.len()),
        ] {
            if len != n {
                return Err(Error::DimensionMismatch {
                    what,
                    expected: n,
                    actual: len,
                });
            }
        }
        if !geometry::is_rotation(&self.relative_pose.rotation, 1e-6) {
            return Err(Error::Domain("constraint relative rotation is not orthonormal".into()));
        }
        Ok(())
    }

    /// The same constraint seen from frame `j`.
    pub fn transposed(&self) -> Self {
        PairConstraint {
            frame_i: self.frame_j,
            frame_j: self.frame_i,
            matches: self.matches.transposed(),
            rays_i: self.rays_j.clone(),
            rays_j: self.rays_i.clone(),
            sampled_i: self.sampled_j.clone(),
            sampled_j: self.sampled_i.clone(),
            relative_pose: self.relative_pose.inverse(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BundleConfig {
    pub lambda_u: f64,
    /// Decoupled weight decay, applied to depth codes only.
    pub weight_decay: f64,
    pub step_size: f64,
    /// Step size for the auxiliary inlier variables.
    pub aux_step_size: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Warm-start runs `warmstart_factor * |I|` steps.
    pub warmstart_factor: usize,
    /// One more constraint becomes active every `ramp_divisor` warm-start steps.
    pub ramp_divisor: usize,
    /// Relative loss decrease over `window` steps below which optimization stops.
    pub tolerance: f64,
    pub window: usize,
    pub max_iterations: usize,
    /// Weight of the pose-consistency term in the full loss.
    pub pose_weight: f64,
    /// Hold the first frame's chain delta fixed.
    pub freeze_first: bool,
    /// Dense depths below this are clamped on output (meters).
    pub depth_floor: f64,
    /// Sum per-constraint terms in constraint order.
    pub deterministic: bool,
    /// Worker cap for constraint evaluation; `None` uses the global pool.
    pub threads: Option<usize>,
}

impl Default for BundleConfig {
    fn default() -> Self {
        BundleConfig {
            lambda_u: 0.3,
            weight_decay: 1e-2,
            step_size: 3e-4,
            aux_step_size: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            warmstart_factor: 6,
            ramp_divisor: 5,
            tolerance: 1e-5,
            window: 100,
            max_iterations: 20_000,
            pose_weight: 1.0,
            freeze_first: true,
            depth_floor: 0.01,
            deterministic: false,
            threads: None,
        }
    }
}

impl BundleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_u > 0.0) {
            return Err(Error::Config(format!("lambda_u must be positive, got {}", self.lambda_u)));
        }
        if !(self.aux_step_size > 0.0) {
            return Err(Error::Config(format!("auxiliary step size must be positive, got {}", self.aux_step_size)));
        }
        if !(self.step_size > 0.0) {
            return Err(Error::Config(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("moment decays must lie in [0, 1)".into()));
        }
        if self.weight_decay < 0.0 || self.pose_weight < 0.0 || self.tolerance < 0.0 {
            return Err(Error::Config("weight decay, pose weight and tolerance must be nonnegative".into()));
        }
        if self.ramp_divisor == 0 || self.window == 0 {
            return Err(Error::Config("ramp divisor and window must be positive".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("thread cap must be positive".into()));
        }
        Ok(())
    }
}

/// Everything the bundle optimizer owns during a run.
#[derive(Debug, Clone)]
pub struct BundleProblem {
    pub chain: Vec<TaitBryanDelta>,
    pub codes: Vec<DepthCode>,
    /// One auxiliary variable per match, per constraint.
    pub aux: Vec<Vec<f64>>,
    /// Sorted by `(frame_j, frame_i)`.
    pub constraints: Vec<PairConstraint>,
    pub bases: Vec<DepthBasis>,
    pub intrinsics: Vec<Intrinsics>,
    pub config: BundleConfig,
}

impl BundleProblem {
    /// Cold start: identity chain, zero codes, neutral auxiliaries.
    pub fn new(
        bases: Vec<DepthBasis>,
        intrinsics: Vec<Intrinsics>,
        mut constraints: Vec<PairConstraint>,
        config: BundleConfig,
    ) -> Result<Self> {
        config.validate()?;
        let n = bases.len();
        if n == 0 {
            return Err(Error::Domain("bundle problem needs at least one frame".into()));
        }
        if intrinsics.len() != n {
            return Err(Error::DimensionMismatch {
                what: "intrinsics per frame",
                expected: n,
                actual: intrinsics.len(),
            });
        }
        let k = bases[0].k();
        if let Some(b) = bases.iter().find(|b| b.k() != k) {
            return Err(Error::DimensionMismatch {
                what: "basis size",
                expected: k,
                actual: b.k(),
            });
        }
        for c in &constraints {
            c.validate()?;
            if c.frame_i >= n || c.frame_j >= n {
                return Err(Error::Domain(format!(
                    "constraint ({}, {}) references a frame beyond {n}",
                    c.frame_i, c.frame_j
                )));
            }
            if c.sampled_i.k() != k || c.sampled_j.k() != k {
                return Err(Error::DimensionMismatch {
                    what: "constraint basis size",
                    expected: k,
                    actual: c.sampled_i.k(),
                });
            }
        }
        constraints.sort_by_key(|c| (c.frame_j, c.frame_i));
        Ok(BundleProblem {
            chain: vec![TaitBryanDelta::zero(); n],
            codes: vec![DepthCode::zeros(k); n],
            aux: constraints.iter().map(|c| vec![0.0; c.len()]).collect(),
            constraints,
            bases,
            intrinsics,
            config,
        })
    }

    pub fn frame_count(&self) -> usize {
        self.chain.len()
    }

    pub fn k(&self) -> usize {
        self.bases[0].k()
    }

    pub fn poses(&self) -> Vec<RigidPose> {
        geometry::compose_chain(&self.chain)
    }

    /// Replace the chain so that it composes to the given absolute poses.
    pub fn set_poses(&mut self, poses: &[RigidPose]) -> Result<()> {
        if poses.len() != self.chain.len() {
            return Err(Error::DimensionMismatch {
                what: "pose count",
                expected: self.chain.len(),
                actual: poses.len(),
            });
        }
        self.chain = geometry::chain_from_poses(poses);
        Ok(())
    }

    /// Number of scalar parameters in the flat layout.
    pub fn param_len(&self) -> usize {
        6 * self.chain.len() + self.codes.iter().map(DepthCode::len).sum::<usize>() + self.aux.iter().map(Vec::len).sum::<usize>()
    }

    /// Flat parameters: chain deltas (angles then translation), codes, auxiliaries.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_len());
        for d in &self.chain {
            out.extend(d.angles.iter());
            out.extend(d.translation_delta.iter());
        }
        for c in &self.codes {
            out.extend(&c.beta);
        }
        for a in &self.aux {
            out.extend(a);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) -> Result<()> {
        if p.len() != self.param_len() {
            return Err(Error::DimensionMismatch {
                what: "flat parameter vector",
                expected: self.param_len(),
                actual: p.len(),
            });
        }
        let mut it = p.iter().copied();
        for d in &mut self.chain {
            for a in 0..3 {
                d.angles[a] = it.next().unwrap_or_default();
            }
            for a in 0..3 {
                d.translation_delta[a] = it.next().unwrap_or_default();
            }
        }
        for c in &mut self.codes {
            for b in &mut c.beta {
                *b = it.next().unwrap_or_default();
            }
        }
        for a in &mut self.aux {
            for u in a.iter_mut() {
                *u = it.next().unwrap_or_default();
            }
        }
        Ok(())
    }

    /// Offset of the first code entry in the flat layout.
    pub fn code_offset(&self) -> usize {
        6 * self.chain.len()
    }

    /// Offset of the first auxiliary entry in the flat layout.
    pub fn aux_offset(&self) -> usize {
        self.code_offset() + self.codes.iter().map(DepthCode::len).sum::<usize>()
    }

    /// Dense depth per frame with nonpositive values clamped to the floor;
    /// also returns how many pixels were clamped in each frame.
    pub fn dense_depths(&self) -> Result<(Vec<crate::depth_basis::DepthMap>, Vec<usize>)> {
        let mut maps = Vec::with_capacity(self.bases.len());
        let mut clamped = Vec::with_capacity(self.bases.len());
        for (frame, (basis, code)) in self.bases.iter().zip(&self.codes).enumerate() {
            let mut map = basis.evaluate_dense(code)?;
            let mut count = 0;
            for v in &mut map.values {
                if *v < self.config.depth_floor {
                    *v = self.config.depth_floor;
                    count += 1;
                }
            }
            if count > 0 {
                log::warn!("frame {frame}: clamped {count} nonpositive depths");
            }
            maps.push(map);
            clamped.push(count);
        }
        Ok((maps, clamped))
    }
}

/// Snapshot written when optimization hits a non-finite loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateDump {
    pub iteration: usize,
    pub loss_trace: Vec<f64>,
    pub chain: Vec<TaitBryanDelta>,
    pub codes: Vec<Vec<f64>>,
    pub aux: Vec<Vec<f64>>,
}

impl StateDump {
    pub(crate) fn capture(problem: &BundleProblem, iteration: usize, loss_trace: &[f64]) -> Self {
        StateDump {
            iteration,
            loss_trace: loss_trace.to_vec(),
            chain: problem.chain.clone(),
            codes: problem.codes.iter().map(|c| c.beta.clone()).collect(),
            aux: problem.aux.clone(),
        }
    }
}

/// Logistic trust weight of an auxiliary variable.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Distances at or below this take the zero subgradient.
const DISTANCE_KINK: f64 = 1e-12;

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// World-space points of match `m` and the unsquared distance between them.
fn match_geometry(
    c: &PairConstraint,
    m: usize,
    pose_i: &RigidPose,
    pose_j: &RigidPose,
    beta_i: &[f64],
    beta_j: &[f64],
) -> (Vector3<f64>, Vector3<f64>, Vector3<f64>) {
    let ci = c.rays_i[m] * c.sampled_i.depth(m, beta_i);
    let cj = c.rays_j[m] * c.sampled_j.depth(m, beta_j);
    let delta = pose_i.transform(&ci) - pose_j.transform(&cj);
    (ci, cj, delta)
}

/// Robust match term of one constraint under the given absolute poses.
pub fn matches_loss(problem: &BundleProblem, index: usize, poses: &[RigidPose]) -> f64 {
    let c = &problem.constraints[index];
    let (pi, pj) = (&poses[c.frame_i], &poses[c.frame_j]);
    let (bi, bj) = (&problem.codes[c.frame_i].beta, &problem.codes[c.frame_j].beta);
    let lambda_u = problem.config.lambda_u;
    (0..c.len())
        .map(|m| {
            let u = problem.aux[index][m];
            let e = match_geometry(c, m, pi, pj, bi, bj).2.norm();
            sigmoid(u) * e + lambda_u * sigmoid(-u)
        })
        .sum()
}

/// World-space distance of every match of one constraint.
pub fn match_distances(problem: &BundleProblem, index: usize, poses: &[RigidPose]) -> Vec<f64> {
    let c = &problem.constraints[index];
    let (pi, pj) = (&poses[c.frame_i], &poses[c.frame_j]);
    let (bi, bj) = (&problem.codes[c.frame_i].beta, &problem.codes[c.frame_j].beta);
    (0..c.len()).map(|m| match_geometry(c, m, pi, pj, bi, bj).2.norm()).collect()
}

fn pose_residuals(c: &PairConstraint, pi: &RigidPose, pj: &RigidPose) -> (Matrix3<f64>, Vector3<f64>) {
    (
        pi.rotation - pj.rotation * c.relative_pose.rotation,
        pi.translation - pj.rotation * c.relative_pose.translation - pj.translation,
    )
}

/// Elementwise L1 disagreement between the absolute poses and the constraint's relative pose.
pub fn pose_loss(problem: &BundleProblem, index: usize, poses: &[RigidPose]) -> f64 {
    let c = &problem.constraints[index];
    let (dr, dt) = pose_residuals(c, &poses[c.frame_i], &poses[c.frame_j]);
    dr.abs().sum() + dt.abs().sum()
}

/// Gradient in structured form.
#[derive(Debug, Clone, PartialEq)]
pub struct BundleGradient {
    /// Per frame: three angle partials then three translation partials.
    pub chain: Vec<[f64; 6]>,
    pub codes: Vec<Vec<f64>>,
    pub aux: Vec<Vec<f64>>,
}

impl BundleGradient {
    /// Same layout as [`BundleProblem::params`].
    pub fn to_flat(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.chain.iter().flatten().copied().collect();
        for c in &self.codes {
            out.extend(c);
        }
        for a in &self.aux {
            out.extend(a);
        }
        out
    }
}

/// Which terms a loss evaluation includes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Terms {
    pub matches: bool,
    pub pose_weight: f64,
    /// Only the first `active` constraints contribute.
    pub active: usize,
}

/// One constraint's contribution, indexed by its two frames.
#[derive(Debug, Clone)]
struct Partial {
    loss: f64,
    g_rot_i: Matrix3<f64>,
    g_tr_i: Vector3<f64>,
    g_rot_j: Matrix3<f64>,
    g_tr_j: Vector3<f64>,
    g_beta_i: Vec<f64>,
    g_beta_j: Vec<f64>,
    g_aux: Vec<f64>,
}

fn constraint_partial(problem: &BundleProblem, index: usize, poses: &[RigidPose], terms: Terms) -> Partial {
    let c = &problem.constraints[index];
    let k = problem.k();
    let (pi, pj) = (&poses[c.frame_i], &poses[c.frame_j]);
    let mut p = Partial {
        loss: 0.0,
        g_rot_i: Matrix3::zeros(),
        g_tr_i: Vector3::zeros(),
        g_rot_j: Matrix3::zeros(),
        g_tr_j: Vector3::zeros(),
        g_beta_i: vec![0.0; k],
        g_beta_j: vec![0.0; k],
        g_aux: vec![0.0; if terms.matches { c.len() } else { 0 }],
    };
    if terms.matches {
        let (bi, bj) = (&problem.codes[c.frame_i].beta, &problem.codes[c.frame_j].beta);
        let lambda_u = problem.config.lambda_u;
        for m in 0..c.len() {
            let u = problem.aux[index][m];
            let s = sigmoid(u);
            let (ci, cj, delta) = match_geometry(c, m, pi, pj, bi, bj);
            let e = delta.norm();
            p.loss += s * e + lambda_u * (1.0 - s);
            p.g_aux[m] = s * (1.0 - s) * (e - lambda_u);
            if e <= DISTANCE_KINK {
                continue;
            }
            let g = delta * (s / e);
            p.g_rot_i += g * ci.transpose();
            p.g_tr_i += g;
            p.g_rot_j -= g * cj.transpose();
            p.g_tr_j -= g;
            let dd_i = g.dot(&(pi.rotation * c.rays_i[m]));
            let dd_j = -g.dot(&(pj.rotation * c.rays_j[m]));
            for (acc, f) in p.g_beta_i.iter_mut().zip(c.sampled_i.factors(m)) {
                *acc += dd_i * f;
            }
            for (acc, f) in p.g_beta_j.iter_mut().zip(c.sampled_j.factors(m)) {
                *acc += dd_j * f;
            }
        }
    }
    if terms.pose_weight != 0.0 {
        let w = terms.pose_weight;
        let (dr, dt) = pose_residuals(c, pi, pj);
        p.loss += w * (dr.abs().sum() + dt.abs().sum());
        let sr = dr.map(sign) * w;
        let st = dt.map(sign) * w;
        p.g_rot_i += sr;
        p.g_rot_j -= sr * c.relative_pose.rotation.transpose() + st * c.relative_pose.translation.transpose();
        p.g_tr_i += st;
        p.g_tr_j -= st;
    }
    p
}

/// Loss and gradient for the chosen terms, with per-pose partials mapped
/// back through the cumulative chain.
pub(crate) fn evaluate(problem: &BundleProblem, terms: Terms) -> (f64, BundleGradient) {
    use rayon::prelude::*;

    let n = problem.frame_count();
    let k = problem.k();
    let poses = problem.poses();
    let active = terms.active.min(problem.constraints.len());

    let mut g_rot = vec![Matrix3::<f64>::zeros(); n];
    let mut g_tr = vec![Vector3::<f64>::zeros(); n];
    let mut g_codes = vec![vec![0.0; k]; n];
    let mut g_aux: Vec<Vec<f64>> = problem.aux.iter().map(|a| vec![0.0; a.len()]).collect();
    let mut loss = 0.0;

    let mut absorb = |index: usize, p: Partial| {
        let c = &problem.constraints[index];
        loss += p.loss;
        g_rot[c.frame_i] += p.g_rot_i;
        g_tr[c.frame_i] += p.g_tr_i;
        g_rot[c.frame_j] += p.g_rot_j;
        g_tr[c.frame_j] += p.g_tr_j;
        for (a, b) in g_codes[c.frame_i].iter_mut().zip(&p.g_beta_i) {
            *a += b;
        }
        for (a, b) in g_codes[c.frame_j].iter_mut().zip(&p.g_beta_j) {
            *a += b;
        }
        if !p.g_aux.is_empty() {
            g_aux[index] = p.g_aux;
        }
    };

    let compute = |index: usize| constraint_partial(problem, index, &poses, terms);
    if problem.config.deterministic || active < 2 {
        let partials: Vec<Partial> = (0..active).into_par_iter().map(compute).collect();
        for (index, p) in partials.into_iter().enumerate() {
            absorb(index, p);
        }
    } else {
        let (tx, rx) = std::sync::mpsc::channel();
        (0..active).into_par_iter().for_each_with(tx, |tx, index| {
            let _ = tx.send((index, compute(index)));
        });
        for (index, p) in rx {
            absorb(index, p);
        }
    }

    (loss, chain_gradient(problem, &poses, &g_rot, &g_tr, g_codes, g_aux))
}

/// Backpropagate absolute-pose partials through `R_i = A_0 ... A_i`, `T_i = t_0 + ... + t_i`.
fn chain_gradient(
    problem: &BundleProblem,
    poses: &[RigidPose],
    g_rot: &[Matrix3<f64>],
    g_tr: &[Vector3<f64>],
    codes: Vec<Vec<f64>>,
    aux: Vec<Vec<f64>>,
) -> BundleGradient {
    let n = problem.frame_count();
    let factors: Vec<Matrix3<f64>> = problem.chain.iter().map(TaitBryanDelta::rotation).collect();
    let mut chain = vec![[0.0; 6]; n];
    let mut h = Matrix3::zeros();
    let mut t_suffix = Vector3::zeros();
    for k in (0..n).rev() {
        h = if k + 1 < n { g_rot[k] + h * factors[k + 1].transpose() } else { g_rot[k] };
        t_suffix += g_tr[k];
        let prefix = if k == 0 { Matrix3::identity() } else { poses[k - 1].rotation };
        let g_factor = prefix.transpose() * h;
        let jac = geometry::tait_bryan_jacobian(&problem.chain[k].angles);
        for a in 0..3 {
            chain[k][a] = g_factor.component_mul(&jac[a]).sum();
            chain[k][3 + a] = t_suffix[a];
        }
    }
    BundleGradient { chain, codes, aux }
}

/// Full loss: match terms plus weighted pose terms over every constraint.
pub fn total_loss_and_grad(problem: &BundleProblem) -> (f64, BundleGradient) {
    evaluate(
        problem,
        Terms {
            matches: true,
            pose_weight: problem.config.pose_weight,
            active: problem.constraints.len(),
        },
    )
}

/// Sum of pose terms over the first `active` constraints.
pub fn pose_loss_and_grad(problem: &BundleProblem, active: usize) -> (f64, BundleGradient) {
    evaluate(
        problem,
        Terms {
            matches: false,
            pose_weight: 1.0,
            active,
        },
    )
}

#[cfg(test)]
pub(crate) mod tests {
    use nalgebra::Rotation3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::Pixel;

    /// A random problem: frames with random bases, random constraints
    /// between random frame pairs, random state everywhere.
    pub(crate) fn random_problem(rng: &mut impl Rng, frames: usize, k: usize, pairs: usize, per_pair: usize) -> BundleProblem {
        let (w, h) = (16usize, 12usize);
        let intr = Intrinsics::new(14.0, 14.0, 8.0, 6.0, w, h).unwrap();
        let bases: Vec<DepthBasis> = (0..frames)
            .map(|_| {
                let mu = (0..w * h).map(|_| rng.random_range(2.0..4.0)).collect();
                let sigma = (0..k * w * h).map(|_| rng.random_range(-0.3..0.3)).collect();
                DepthBasis::new(w, h, w, h, mu, sigma).unwrap()
            })
            .collect();
        let mut constraints = Vec::new();
        while constraints.len() < pairs {
            let i = rng.random_range(0..frames);
            let j = rng.random_range(0..frames);
            if i == j {
                continue;
            }
            let pix = |rng: &mut dyn rand::RngCore| -> Vec<Pixel> {
                (0..per_pair)
                    .map(|_| Pixel::new(rng.random_range(0.0..w as f64 - 1.0), rng.random_range(0.0..h as f64 - 1.0)))
                    .collect()
            };
            let (pi, pj) = (pix(rng), pix(rng));
            let samples = PairSamples {
                matches: MatchSet::new(i, j, (0..per_pair).map(|m| (m, m)).collect()),
                rays_i: pi.iter().map(|&p| intr.ray(p)).collect(),
                rays_j: pj.iter().map(|&p| intr.ray(p)).collect(),
                sampled_i: bases[i].sample_at(&pi).unwrap(),
                sampled_j: bases[j].sample_at(&pj).unwrap(),
                pixels_i: pi,
                pixels_j: pj,
            };
            let rel = RigidPose {
                rotation: *Rotation3::from_euler_angles(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )
                .matrix(),
                translation: Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)),
            };
            constraints.push(PairConstraint::new(samples, rel).unwrap());
        }
        let mut problem = BundleProblem::new(bases, vec![intr; frames], constraints, BundleConfig::default()).unwrap();
        for d in &mut problem.chain {
            d.angles = Vector3::new(rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
            d.translation_delta = Vector3::new(rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
        }
        for c in &mut problem.codes {
            for b in &mut c.beta {
                *b = rng.random_range(-1.0..1.0);
            }
        }
        for a in &mut problem.aux {
            for u in a.iter_mut() {
                *u = rng.random_range(-2.0..2.0);
            }
        }
        problem
    }

    fn naive_matches_loss(problem: &BundleProblem, index: usize) -> f64 {
        let poses = geometry::compose_chain(&problem.chain);
        let c = &problem.constraints[index];
        let mut total = 0.0;
        for m in 0..c.len() {
            let mut di = c.sampled_i.mean(m);
            let mut dj = c.sampled_j.mean(m);
            for kk in 0..problem.k() {
                di += c.sampled_i.factors(m)[kk] * problem.codes[c.frame_i].beta[kk];
                dj += c.sampled_j.factors(m)[kk] * problem.codes[c.frame_j].beta[kk];
            }
            let wi = poses[c.frame_i].rotation * (c.rays_i[m] * di) + poses[c.frame_i].translation;
            let wj = poses[c.frame_j].rotation * (c.rays_j[m] * dj) + poses[c.frame_j].translation;
            let e = ((wi.x - wj.x).powi(2) + (wi.y - wj.y).powi(2) + (wi.z - wj.z).powi(2)).sqrt();
            let u = problem.aux[index][m];
            total += e / (1.0 + (-u).exp()) + 0.3 / (1.0 + u.exp());
        }
        total
    }

    fn naive_pose_loss(problem: &BundleProblem, index: usize) -> f64 {
        let poses = geometry::compose_chain(&problem.chain);
        let c = &problem.constraints[index];
        let (ri, rj) = (poses[c.frame_i].rotation, poses[c.frame_j].rotation);
        let (ti, tj) = (poses[c.frame_i].translation, poses[c.frame_j].translation);
        let mut total = 0.0;
        for r in 0..3 {
            for col in 0..3 {
                let mut prod = 0.0;
                for q in 0..3 {
                    prod += rj[(r, q)] * c.relative_pose.rotation[(q, col)];
                }
                total += (ri[(r, col)] - prod).abs();
            }
            let mut rt = 0.0;
            for q in 0..3 {
                rt += rj[(r, q)] * c.relative_pose.translation[q];
            }
            total += (ti[r] - rt - tj[r]).abs();
        }
        total
    }

    #[test]
    fn loss_terms_match_naive_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..5 {
            let problem = random_problem(&mut rng, 5, 3, 6, 8);
            let poses = problem.poses();
            for idx in 0..problem.constraints.len() {
                assert!((matches_loss(&problem, idx, &poses) - naive_matches_loss(&problem, idx)).abs() < 1e-12);
                assert!((pose_loss(&problem, idx, &poses) - naive_pose_loss(&problem, idx)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut problem = random_problem(&mut rng, 2, 1, 1, 1);
        let poses = problem.poses();
        let c = &problem.constraints[0];
        let e = match_geometry(c, 0, &poses[c.frame_i], &poses[c.frame_j], &problem.codes[c.frame_i].beta, &problem.codes[c.frame_j].beta)
            .2
            .norm();
        problem.aux[0][0] = 0.0;
        assert!((matches_loss(&problem, 0, &poses) - (0.5 * e + 0.3 * 0.5)).abs() < 1e-12);

        // a perfectly aligned match: put frame j's point exactly on frame i's
        let mut aligned = problem.clone();
        aligned.constraints[0].relative_pose = RigidPose::identity();
        let c = aligned.constraints[0].clone();
        aligned.aux[0][0] = 20.0;
        let mut poses = aligned.poses();
        let wi = poses[c.frame_i].transform(&(c.rays_i[0] * c.sampled_i.depth(0, &aligned.codes[c.frame_i].beta)));
        let cj = c.rays_j[0] * c.sampled_j.depth(0, &aligned.codes[c.frame_j].beta);
        poses[c.frame_j].translation = wi - poses[c.frame_j].rotation * cj;
        assert!(matches_loss(&aligned, 0, &poses) < 1e-8);
    }

    #[test]
    fn pose_loss_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut problem = random_problem(&mut rng, 3, 1, 1, 2);
        let poses = problem.poses();
        let c = &problem.constraints[0];
        problem.constraints[0].relative_pose = RigidPose::relative(&poses[c.frame_i], &poses[c.frame_j]);
        assert!(pose_loss(&problem, 0, &poses) < 1e-12);
        let mut shifted = poses.clone();
        shifted[problem.constraints[0].frame_i].translation.x += 0.1;
        assert!((pose_loss(&problem, 0, &shifted) - 0.1).abs() < 1e-12);
    }

    /// Distance of a parameter from a kink of the L1 term, estimated by
    /// checking whether any residual sign flips when that parameter moves.
    fn near_kink(problem: &BundleProblem, index: usize, h: f64) -> bool {
        let signs = |p: &BundleProblem| -> Vec<f64> {
            let poses = p.poses();
            p.constraints
                .iter()
                .flat_map(|c| {
                    let (dr, dt) = pose_residuals(c, &poses[c.frame_i], &poses[c.frame_j]);
                    dr.iter().chain(dt.iter()).map(|v| if v.abs() < 1e-6 { 0.0 } else { v.signum() }).collect::<Vec<_>>()
                })
                .collect()
        };
        let base = problem.params();
        let mut probe = problem.clone();
        let reference = signs(problem);
        for step in [-h, h] {
            let mut p = base.clone();
            p[index] += step;
            probe.set_params(&p).unwrap();
            if signs(&probe) != reference || reference.contains(&0.0) {
                return true;
            }
        }
        false
    }

    pub(crate) fn check_gradient(problem: &BundleProblem) -> (usize, f64) {
        let (_, grad) = total_loss_and_grad(problem);
        let analytic = grad.to_flat();
        let base = problem.params();
        let h = 1e-5;
        let mut probe = problem.clone();
        let mut worst: f64 = 0.0;
        let mut checked = 0;
        for idx in 0..base.len() {
            if idx < problem.code_offset() && near_kink(problem, idx, h) {
                continue;
            }
            let mut p = base.clone();
            p[idx] = base[idx] + h;
            probe.set_params(&p).unwrap();
            let plus = total_loss_and_grad(&probe).0;
            p[idx] = base[idx] - h;
            probe.set_params(&p).unwrap();
            let minus = total_loss_and_grad(&probe).0;
            let numeric = (plus - minus) / (2.0 * h);
            let rel = (numeric - analytic[idx]).abs() / numeric.abs().max(analytic[idx].abs()).max(1e-3);
            worst = worst.max(rel);
            checked += 1;
        }
        (checked, worst)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..3 {
            let problem = random_problem(&mut rng, 6, 3, 8, 5);
            let (checked, worst) = check_gradient(&problem);
            assert!(checked > problem.param_len() / 2);
            assert!(worst < 1e-4, "relative error {worst}");
        }
    }

    #[test]
    fn duplicating_a_constraint_doubles_its_contribution() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let problem = random_problem(&mut rng, 4, 2, 1, 6);
        let single = total_loss_and_grad(&problem).0;
        let mut doubled = problem.clone();
        doubled.constraints.push(problem.constraints[0].clone());
        doubled.aux.push(problem.aux[0].clone());
        assert!((total_loss_and_grad(&doubled).0 - 2.0 * single).abs() < 1e-12 * single.max(1.0));
    }

    #[test]
    fn ground_truth_with_saturated_trust_has_vanishing_match_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut problem = random_problem(&mut rng, 3, 2, 2, 6);
        // make every match exactly consistent: move frame-j depths onto frame-i points
        let poses = problem.poses();
        for idx in 0..problem.constraints.len() {
            let c = problem.constraints[idx].clone();
            let mut rays_j = Vec::new();
            let mut means = Vec::new();
            for m in 0..c.len() {
                let w = poses[c.frame_i].transform(&(c.rays_i[m] * c.sampled_i.depth(m, &problem.codes[c.frame_i].beta)));
                let local = poses[c.frame_j].inverse().transform(&w);
                rays_j.push(local / local.norm());
                let offset: f64 = c.sampled_j.factors(m).iter().zip(&problem.codes[c.frame_j].beta).map(|(a, b)| a * b).sum();
                means.push(local.norm() - offset);
            }
            let factors: Vec<f64> = (0..c.len()).flat_map(|m| c.sampled_j.factors(m).to_vec()).collect();
            problem.constraints[idx].rays_j = rays_j;
            problem.constraints[idx].sampled_j = SampledBasis::new(c.sampled_j.k(), means, factors).unwrap();
            problem.constraints[idx].relative_pose = RigidPose::relative(&poses[c.frame_i], &poses[c.frame_j]);
        }
        for a in &mut problem.aux {
            a.iter_mut().for_each(|u| *u = 40.0);
        }
        problem.config.pose_weight = 0.0;
        let (loss, grad) = total_loss_and_grad(&problem);
        assert!(loss < 1e-9);
        assert!(grad.to_flat().iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn ordered_and_unordered_reductions_agree() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut problem = random_problem(&mut rng, 6, 3, 10, 5);
        problem.config.deterministic = true;
        let (a, ga) = total_loss_and_grad(&problem);
        problem.config.deterministic = false;
        let (b, gb) = total_loss_and_grad(&problem);
        assert!((a - b).abs() < 1e-9 * a.abs());
        for (x, y) in ga.to_flat().iter().zip(gb.to_flat()) {
            assert!((x - y).abs() < 1e-9 * (1.0 + x.abs()));
        }
    }

    #[test]
    fn relabeling_matches_keeps_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let problem = random_problem(&mut rng, 3, 2, 1, 9);
        let poses = problem.poses();
        let before = matches_loss(&problem, 0, &poses);
        let perm: Vec<usize> = (0..9).rev().collect();
        let mut relabeled = problem.clone();
        let c = &problem.constraints[0];
        relabeled.constraints[0] = PairConstraint {
            frame_i: c.frame_i,
            frame_j: c.frame_j,
            matches: c.matches.subset(&perm),
            rays_i: perm.iter().map(|&m| c.rays_i[m]).collect(),
            rays_j: perm.iter().map(|&m| c.rays_j[m]).collect(),
            sampled_i: c.sampled_i.select(&perm),
            sampled_j: c.sampled_j.select(&perm),
            relative_pose: c.relative_pose,
        };
        relabeled.aux[0] = perm.iter().map(|&m| problem.aux[0][m]).collect();
        assert!((matches_loss(&relabeled, 0, &poses) - before).abs() < 1e-12);
    }

    #[test]
    fn constraint_validation() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let problem = random_problem(&mut rng, 3, 1, 1, 2);
        let mut c = problem.constraints[0].clone();
        c.frame_j = c.frame_i;
        assert!(c.validate().is_err());
        let mut c = problem.constraints[0].clone();
        c.relative_pose.rotation *= 2.0;
        assert!(c.validate().is_err());
        assert!(BundleConfig { lambda_u: 0.0, ..Default::default() }.validate().is_err());
        assert!(BundleConfig { step_size: 0.0, ..Default::default() }.validate().is_err());
    }

    #[test]
    fn constraints_sort_by_later_frame_then_earlier() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let problem = random_problem(&mut rng, 6, 1, 12, 1);
        let keys: Vec<_> = problem.constraints.iter().map(|c| (c.frame_j, c.frame_i)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn flat_params_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let problem = random_problem(&mut rng, 4, 2, 3, 4);
        let mut copy = problem.clone();
        copy.set_params(&problem.params()).unwrap();
        assert_eq!(copy.params(), problem.params());
        assert_eq!(problem.params().len(), problem.param_len());
        assert!(copy.set_params(&[0.0]).is_err());
    }

    #[test]
    fn sigmoid_is_stable() {
        assert_eq!(sigmoid(0.0), 0.5);
        assert!(sigmoid(-800.0) >= 0.0 && sigmoid(800.0) <= 1.0);
        assert!((sigmoid(2.0) + sigmoid(-2.0) - 1.0).abs() < 1e-15);
    }
}
