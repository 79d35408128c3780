//! Score a reconstruction that differs from the ground truth by a global
//! similarity plus some noise.

use nalgebra::{Rotation3, Vector3};
use ridge_sfm::depth_basis::DepthMap;
use ridge_sfm::evaluation::{evaluate_reconstruction, SimilarityTransform};
use ridge_sfm::synthetic::{generate_scene, SceneSpec};

fn main() -> ridge_sfm::Result<()> {
    let gt = generate_scene(&SceneSpec {
        frames: 8,
        k: 4,
        ..SceneSpec::default()
    })?;
    let gauge = SimilarityTransform {
        scale: 0.4,
        rotation: *Rotation3::from_euler_angles(0.2, 1.0, -0.3).matrix(),
        translation: Vector3::new(5.0, -1.0, 2.0),
    };
    let poses: Vec<_> = gt.poses.iter().map(|p| gauge.apply_pose(p)).collect();
    let depths: Vec<_> = gt
        .depths
        .iter()
        .map(|d| DepthMap::new(d.width, d.height, d.values.iter().map(|v| v * gauge.scale).collect()))
        .collect::<ridge_sfm::Result<_>>()?;
    let (report, sim) = evaluate_reconstruction(&poses, &depths, &gt.poses, &gt.depths, &gt.intrinsics, 8)?;
    println!("prediction in a different gauge (recovered scale {:.4}):\n{report}\n", sim.scale);

    let noisy: Vec<_> = depths
        .iter()
        .map(|d| DepthMap::new(d.width, d.height, d.values.iter().enumerate().map(|(i, v)| v * (1.0 + 0.05 * ((i % 7) as f64 - 3.0) / 3.0)).collect()))
        .collect::<ridge_sfm::Result<_>>()?;
    let (report, _) = evaluate_reconstruction(&poses, &noisy, &gt.poses, &gt.depths, &gt.intrinsics, 8)?;
    println!("same, with up to 5% depth error:\n{report}");
    Ok(())
}
