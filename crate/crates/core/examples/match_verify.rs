//! Descriptor matching with a mutual check, then fundamental-matrix LMedS
//! verification, on a synthetic pair with injected wrong matches.

use ridge_sfm::matching::{lmeds_verify, mutual_nn_match, LmedsConfig, MatchConfig};
use ridge_sfm::synthetic::{generate_scene, render_matches, SceneSpec};

fn main() -> ridge_sfm::Result<()> {
    let spec = SceneSpec {
        frames: 4,
        k: 8,
        keypoints_per_frame: 120,
        pixel_noise: 0.3,
        ..SceneSpec::default()
    };
    let gt = generate_scene(&spec)?;
    let (a, b) = (&gt.keypoints[0], &gt.keypoints[3]);

    let raw = mutual_nn_match(a, b, &MatchConfig::default())?;
    let verified = lmeds_verify(&raw, a, b, &LmedsConfig::default())?;
    let truth = |&(i, j): &(usize, usize)| gt.keypoint_landmarks[0][i] == gt.keypoint_landmarks[3][j];
    println!(
        "mutual nearest neighbours: {} ({} correct)",
        raw.len(),
        raw.pairs.iter().filter(|p| truth(p)).count()
    );
    println!(
        "after LMedS: {} ({} correct), median Sampson error {:?}",
        verified.matches.len(),
        verified.matches.pairs.iter().filter(|p| truth(p)).count(),
        verified.median_sampson
    );

    let rendered = render_matches(&gt, 0, 3, 0.3, 1)?;
    let checked = lmeds_verify(&rendered.matches, a, b, &LmedsConfig::default())?;
    let kept_outliers = checked
        .matches
        .pairs
        .iter()
        .filter(|p| rendered.matches.pairs.iter().position(|q| q == *p).is_some_and(|i| !rendered.labels[i]))
        .count();
    let planted = rendered.labels.iter().filter(|l| !**l).count();
    println!("planted {planted} wrong matches, {kept_outliers} survived verification");
    Ok(())
}
