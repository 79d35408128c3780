//! Cumulative Tait-Bryan chains: build a trajectory from per-frame deltas,
//! recover the deltas, and read off a relative pose.

use nalgebra::Vector3;
use ridge_sfm::geometry::{chain_from_poses, compose_chain, rotation_angle_deg, RigidPose, TaitBryanDelta};

fn main() {
    let deltas: Vec<TaitBryanDelta> = (0..6)
        .map(|i| TaitBryanDelta {
            angles: Vector3::new(0.01 * i as f64, -0.02, 0.03),
            translation_delta: Vector3::new(0.1, 0.0, 0.05 * i as f64),
        })
        .collect();
    let poses = compose_chain(&deltas);
    for (i, p) in poses.iter().enumerate() {
        let angle = rotation_angle_deg(&p.rotation, &poses[0].rotation);
        println!("frame {i}: center {:?}, {angle:.3} deg from frame 0", p.translation.as_slice());
    }

    let back = chain_from_poses(&poses);
    let worst = deltas
        .iter()
        .zip(&back)
        .map(|(a, b)| (a.angles - b.angles).norm())
        .fold(0.0, f64::max);
    println!("chain round trip, worst angle difference {worst:.2e}");

    let rel = RigidPose::relative(&poses[1], &poses[4]);
    let x = Vector3::new(0.3, -0.2, 2.0);
    let via_world = poses[4].inverse().transform(&poses[1].transform(&x));
    println!("relative pose 1->4 maps a point with error {:.2e}", (rel.transform(&x) - via_world).norm());
}
