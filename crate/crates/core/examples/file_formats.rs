//! Write a synthetic scene to disk in the standard formats, read it back and
//! export a point cloud.

use ridge_sfm::io;
use ridge_sfm::synthetic::{generate_scene, SceneSpec};

fn main() -> ridge_sfm::Result<()> {
    let gt = generate_scene(&SceneSpec {
        frames: 3,
        k: 4,
        ..SceneSpec::default()
    })?;
    let dir = std::env::temp_dir().join("ridge-sfm-formats");
    io::save_basis(&dir.join("frame0.rsfmb"), &gt.bases[0])?;
    io::save_keypoints(&dir.join("frame0.txt"), &gt.keypoints[0])?;
    io::save_poses(&dir.join("trajectory.txt"), &gt.poses)?;
    io::save_codes(&dir.join("codes.txt"), &gt.codes)?;
    io::save_depths(&dir.join("depths.rsfmd"), &gt.depths)?;

    let basis = io::load_basis(&dir.join("frame0.rsfmb"))?;
    let keypoints = io::load_keypoints(&dir.join("frame0.txt"))?;
    let poses = io::load_poses(&dir.join("trajectory.txt"))?;
    println!("basis {}x{} with K = {}", basis.basis_width(), basis.basis_height(), basis.k());
    println!("{} keypoints with {}-d descriptors", keypoints.len(), keypoints.dim());
    println!("{} poses; first line of the trajectory file:", poses.len());
    println!("  {}", io::encode_trajectory(&io::load_trajectory(&dir.join("trajectory.txt"))?).lines().next().unwrap_or(""));

    let depths = io::load_depths(&dir.join("depths.rsfmd"))?;
    let n = io::export_ply(&dir.join("cloud.ply"), &poses, &depths, &vec![gt.intrinsics; poses.len()], None, 4)?;
    println!("wrote {n} vertices to {}", dir.join("cloud.ply").display());

    let truncated = &io::encode_basis(&gt.bases[1])[..100];
    match io::decode_basis(truncated, std::path::Path::new("frame1.rsfmb")) {
        Err(e) => println!("truncated basis rejected: {e}"),
        Ok(_) => println!("truncated basis unexpectedly accepted"),
    }
    Ok(())
}
