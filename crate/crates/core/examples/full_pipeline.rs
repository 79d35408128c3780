//! Reconstruct a scene from bases and keypoints only: pair proposal,
//! matching, verification, robust alignment and bundle adjustment.

use ridge_sfm::evaluation::{evaluate_reconstruction, DEFAULT_STRIDE};
use ridge_sfm::pairwise::RansacConfig;
use ridge_sfm::pipeline::{reconstruct, PairProposal, PipelineConfig, SceneFrame};
use ridge_sfm::bundle::BundleConfig;
use ridge_sfm::synthetic::{generate_scene, SceneSpec};

fn main() -> ridge_sfm::Result<()> {
    env_logger::Builder::from_default_env().filter_level(log::LevelFilter::Info).init();
    let gt = generate_scene(&SceneSpec {
        frames: 15,
        k: 8,
        pixel_noise: 0.3,
        ..SceneSpec::default()
    })?;
    let frames: Vec<SceneFrame> = (0..gt.frame_count())
        .map(|f| SceneFrame {
            basis: gt.bases[f].clone(),
            keypoints: gt.keypoints[f].clone(),
            intrinsics: gt.intrinsics,
        })
        .collect();
    let config = PipelineConfig {
        pairs: PairProposal { window: 3, random_pairs: 0, seed: 0 },
        ransac: RansacConfig { runs: 16, min_covered_cells: 15, ..RansacConfig::default() },
        bundle: BundleConfig { max_iterations: 3000, ..BundleConfig::default() },
        ..PipelineConfig::default()
    };
    let rec = reconstruct(&frames, &config)?;
    for p in rec.pairs.iter().filter(|p| p.status.is_none_or(|s| s != ridge_sfm::pairwise::AlignmentStatus::Success)) {
        println!("pair ({}, {}) rejected: {:?}", p.frame_i, p.frame_j, p.status);
    }
    let (metrics, _) = evaluate_reconstruction(&rec.report.poses, &rec.report.dense_depths, &gt.poses, &gt.depths, &gt.intrinsics, DEFAULT_STRIDE)?;
    println!("{metrics}");
    Ok(())
}
