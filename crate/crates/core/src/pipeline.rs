//! Whole-scene reconstruction: pair proposal, matching, robust alignment and
//! bundle adjustment.

use std::collections::BTreeSet;

use log::{debug, info};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::{optimize_bundle, warmstart_poses, BundleConfig, BundleProblem, BundleReport, PairConstraint};
use crate::depth_basis::DepthBasis;
use crate::error::{Error, Result};
use crate::geometry::Intrinsics;
use crate::matching::{lmeds_verify, mutual_nn_match, KeypointSet, LmedsConfig, MatchConfig};
use crate::pairwise::{ransac_progressive_grow, AlignmentStatus, PairAlignment, PairFrame, PairSamples, RansacConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PairProposal {
    /// Every pair closer than this many frames is proposed.
    pub window: usize,
    /// Extra long-range partners drawn per frame.
    pub random_pairs: usize,
    pub seed: u64,
}

impl Default for PairProposal {
    fn default() -> Self {
        PairProposal {
            window: 10,
            random_pairs: 2,
            seed: 0,
        }
    }
}

/// Candidate pairs `(i, j)` with `i < j`, sorted.
pub fn propose_pairs(frames: usize, proposal: &PairProposal) -> Vec<(usize, usize)> {
    let mut pairs = BTreeSet::new();
    for j in 0..frames {
        for i in j.saturating_sub(proposal.window)..j {
            pairs.insert((i, j));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(proposal.seed);
    for f in 0..frames {
        let far: Vec<usize> = (0..frames).filter(|&g| g.abs_diff(f) > proposal.window).collect();
        let take = proposal.random_pairs.min(far.len());
        for idx in sample(&mut rng, far.len(), take) {
            let g = far[idx];
            pairs.insert((f.min(g), f.max(g)));
        }
    }
    pairs.into_iter().collect()
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub pairs: PairProposal,
    pub matching: MatchConfig,
    pub lmeds: LmedsConfig,
    pub ransac: RansacConfig,
    pub bundle: BundleConfig,
}

/// One frame of an input scene.
#[derive(Debug, Clone)]
pub struct SceneFrame {
    pub basis: DepthBasis,
    pub keypoints: KeypointSet,
    pub intrinsics: Intrinsics,
}

impl SceneFrame {
    pub fn view(&self) -> PairFrame<'_> {
        PairFrame {
            basis: &self.basis,
            keypoints: &self.keypoints,
            intrinsics: &self.intrinsics,
        }
    }
}

/// What happened to one proposed pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairSummary {
    pub frame_i: usize,
    pub frame_j: usize,
    pub raw_matches: usize,
    pub verified_matches: usize,
    pub inliers: usize,
    pub coverage: usize,
    pub status: Option<AlignmentStatus>,
}

pub struct AlignedPair {
    pub summary: PairSummary,
    pub alignment: Option<PairAlignment>,
    pub constraint: Option<PairConstraint>,
}

/// Match, verify and robustly align a single pair.
pub fn align_pair(frames: &[SceneFrame], i: usize, j: usize, cfg: &PipelineConfig) -> Result<AlignedPair> {
    let (a, b) = (&frames[i], &frames[j]);
    let mut raw = mutual_nn_match(&a.keypoints, &b.keypoints, &cfg.matching)?;
    raw.frame_i = i;
    raw.frame_j = j;
    let verified = lmeds_verify(&raw, &a.keypoints, &b.keypoints, &cfg.lmeds)?.matches;
    let mut summary = PairSummary {
        frame_i: i,
        frame_j: j,
        raw_matches: raw.len(),
        verified_matches: verified.len(),
        inliers: 0,
        coverage: 0,
        status: None,
    };
    if verified.len() < cfg.ransac.initial_size {
        return Ok(AlignedPair {
            summary,
            alignment: None,
            constraint: None,
        });
    }
    let alignment = ransac_progressive_grow(&verified, a.view(), b.view(), &cfg.ransac)?;
    summary.inliers = alignment.inliers.len();
    summary.coverage = alignment.coverage;
    summary.status = Some(alignment.status);
    let constraint = if alignment.success() {
        let samples = PairSamples::new(&alignment.inliers, a.view(), b.view())?;
        Some(PairConstraint::from_alignment(&samples, &alignment)?)
    } else {
        None
    };
    Ok(AlignedPair {
        summary,
        alignment: Some(alignment),
        constraint,
    })
}

/// Align every proposed pair; results keep the proposal order.
pub fn align_pairs(frames: &[SceneFrame], pairs: &[(usize, usize)], cfg: &PipelineConfig) -> Result<Vec<AlignedPair>> {
    if let Some(&(i, j)) = pairs.iter().find(|&&(i, j)| i >= frames.len() || j >= frames.len() || i == j) {
        return Err(Error::Domain(format!("invalid pair ({i}, {j}) for {} frames", frames.len())));
    }
    pairs
        .par_iter()
        .map(|&(i, j)| {
            let out = align_pair(frames, i, j, cfg)?;
            debug!(
                "pair ({i}, {j}): {} raw, {} verified, {} inliers, status {:?}",
                out.summary.raw_matches, out.summary.verified_matches, out.summary.inliers, out.summary.status
            );
            Ok(out)
        })
        .collect()
}

pub struct Reconstruction {
    pub problem: BundleProblem,
    pub report: BundleReport,
    pub pairs: Vec<PairSummary>,
    /// Loss trace of the pose-only warm start.
    pub warmstart_trace: Vec<f64>,
}

/// Warm start followed by the full optimization.
pub fn solve(
    bases: Vec<DepthBasis>,
    intrinsics: Vec<Intrinsics>,
    constraints: Vec<PairConstraint>,
    config: BundleConfig,
) -> Result<(BundleProblem, BundleReport, Vec<f64>)> {
    let mut problem = BundleProblem::new(bases, intrinsics, constraints, config)?;
    let warm = warmstart_poses(&mut problem)?;
    let report = optimize_bundle(&mut problem)?;
    Ok((problem, report, warm))
}

/// Full pipeline from per-frame bases and keypoints.
pub fn reconstruct(frames: &[SceneFrame], cfg: &PipelineConfig) -> Result<Reconstruction> {
    let proposed = propose_pairs(frames.len(), &cfg.pairs);
    info!("aligning {} proposed pairs", proposed.len());
    let aligned = align_pairs(frames, &proposed, cfg)?;
    let mut constraints = Vec::new();
    let mut pairs = Vec::with_capacity(aligned.len());
    for a in aligned {
        pairs.push(a.summary);
        constraints.extend(a.constraint);
    }
    info!("{} of {} pairs accepted", constraints.len(), pairs.len());
    let bases = frames.iter().map(|f| f.basis.clone()).collect();
    let intrinsics = frames.iter().map(|f| f.intrinsics).collect();
    let (problem, report, warmstart_trace) = solve(bases, intrinsics, constraints, cfg.bundle)?;
    Ok(Reconstruction {
        problem,
        report,
        pairs,
        warmstart_trace,
    })
}
