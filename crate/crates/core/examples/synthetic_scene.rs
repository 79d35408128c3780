//! Generate a synthetic room scene and summarize what it contains.

use ridge_sfm::synthetic::{generate_scene, render_matches, SceneSpec};

fn main() -> ridge_sfm::Result<()> {
    let spec = SceneSpec {
        frames: 12,
        seed: 3,
        ..SceneSpec::default()
    };
    let gt = generate_scene(&spec)?;
    println!("{} frames, {} landmarks, K = {}", gt.frame_count(), gt.landmarks.len(), spec.k);
    println!("depth noise floor (rms of mean plane error): {:.4} m", gt.depth_noise_floor());
    let depths: Vec<f64> = gt.depths.iter().flat_map(|d| d.values.iter().copied()).collect();
    let (lo, hi) = depths.iter().fold((f64::MAX, f64::MIN), |(lo, hi), d| (lo.min(*d), hi.max(*d)));
    println!("rendered depth range {lo:.2} .. {hi:.2} m");
    for f in [1, 3, 6, 11] {
        let shared = render_matches(&gt, 0, f, 0.0, 0)?.matches.len();
        println!("frame 0 and frame {f:>2} share {shared} keypoints");
    }
    Ok(())
}
