//! Reconstruction metrics after a global similarity alignment.

use nalgebra::{Matrix3, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::depth_basis::{grid_pixel, DepthMap};
use crate::error::{Error, Result};
use crate::geometry::{self, rotation_angle_deg, Intrinsics, RigidPose};

/// `x -> scale * rotation * x + translation`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityTransform {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl SimilarityTransform {
    pub fn identity() -> Self {
        SimilarityTransform {
            scale: 1.0,
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.scale * (self.rotation * x) + self.translation
    }

    /// The transform applied to a camera-to-world pose.
    pub fn apply_pose(&self, pose: &RigidPose) -> RigidPose {
        RigidPose {
            rotation: self.rotation * pose.rotation,
            translation: self.apply(&pose.translation),
        }
    }
}

/// Least-squares similarity `y ≈ s R x + t`.
pub fn umeyama_similarity(x: &[Vector3<f64>], y: &[Vector3<f64>]) -> Result<SimilarityTransform> {
    let reg = geometry::umeyama(x, y, true)?;
    if !(reg.scale > 0.0) {
        return Err(Error::Degenerate(format!("similarity scale {} is not positive", reg.scale)));
    }
    Ok(SimilarityTransform {
        scale: reg.scale,
        rotation: reg.rotation,
        translation: reg.translation,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    /// Mean camera rotation error, degrees.
    pub rotation_deg: f64,
    /// Mean camera center error, meters.
    pub center_m: f64,
    pub depth_l1: f64,
    pub depth_rmse: f64,
    pub pcl_l1: f64,
    pub pcl_rmse: f64,
    pub frames: usize,
    pub aligned_points: usize,
}

impl std::fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        writeln!(f, "frames            {}", self.frames)?;
        writeln!(f, "aligned points    {}", self.aligned_points)?;
        writeln!(f, "rotation error    {:.4} deg", self.rotation_deg)?;
        writeln!(f, "center error      {:.4} m", self.center_m)?;
        writeln!(f, "depth L1          {:.4} m", self.depth_l1)?;
        writeln!(f, "depth RMSE        {:.4} m", self.depth_rmse)?;
        writeln!(f, "PCL L1            {:.4} m", self.pcl_l1)?;
        write!(f, "PCL RMSE          {:.4} m", self.pcl_rmse)
    }
}

fn check_counts(what: &'static str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::DimensionMismatch {
            what,
            expected: b,
            actual: a,
        });
    }
    if a == 0 {
        return Err(Error::Domain(format!("{what}: nothing to evaluate")));
    }
    Ok(())
}

/// Mean rotation (degrees) and center (meters) error after mapping the
/// predicted cameras through `sim`.
pub fn camera_errors(pred: &[RigidPose], gt: &[RigidPose], sim: &SimilarityTransform) -> Result<(f64, f64)> {
    check_counts("camera count", pred.len(), gt.len())?;
    let (mut rot, mut center) = (0.0, 0.0);
    for (p, g) in pred.iter().zip(gt) {
        let aligned = sim.apply_pose(p);
        rot += rotation_angle_deg(&aligned.rotation, &g.rotation);
        center += (aligned.translation - g.translation).norm();
    }
    let n = pred.len() as f64;
    Ok((rot / n, center / n))
}

/// Per-frame L1 and RMSE over pixels with positive ground truth, with
/// predictions multiplied by `scale`, averaged over frames.
pub fn depth_errors(pred: &[DepthMap], gt: &[DepthMap], scale: f64) -> Result<(f64, f64)> {
    check_counts("depth map count", pred.len(), gt.len())?;
    let per_frame: Vec<Option<(f64, f64)>> = pred
        .par_iter()
        .zip(gt)
        .map(|(p, g)| {
            if p.width != g.width || p.height != g.height {
                return Err(Error::DimensionMismatch {
                    what: "depth map resolution",
                    expected: g.values.len(),
                    actual: p.values.len(),
                });
            }
            let (mut l1, mut sq, mut n) = (0.0, 0.0, 0usize);
            for (a, b) in p.values.iter().zip(&g.values) {
                if *b > 0.0 {
                    let d = (scale * a - b).abs();
                    l1 += d;
                    sq += d * d;
                    n += 1;
                }
            }
            Ok((n > 0).then(|| (l1 / n as f64, (sq / n as f64).sqrt())))
        })
        .collect::<Result<_>>()?;
    let valid: Vec<(f64, f64)> = per_frame.into_iter().flatten().collect();
    if valid.is_empty() {
        return Err(Error::Domain("no valid ground-truth depth".into()));
    }
    let n = valid.len() as f64;
    Ok((valid.iter().map(|v| v.0).sum::<f64>() / n, valid.iter().map(|v| v.1).sum::<f64>() / n))
}

/// World points for every `stride`-th basis pixel with positive depth in
/// both maps. Pixel indices run row-major over the depth grid; grid nodes map
/// to frame pixels with centre alignment.
fn paired_clouds(
    pred_poses: &[RigidPose],
    pred_depths: &[DepthMap],
    gt_poses: &[RigidPose],
    gt_depths: &[DepthMap],
    intrinsics: &Intrinsics,
    stride: usize,
) -> Result<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> {
    check_counts("predicted poses", pred_poses.len(), gt_poses.len())?;
    check_counts("predicted depths", pred_depths.len(), gt_depths.len())?;
    check_counts("depths per pose", gt_depths.len(), gt_poses.len())?;
    if stride == 0 {
        return Err(Error::Domain("subsample stride must be positive".into()));
    }
    let per_frame: Vec<(Vec<Vector3<f64>>, Vec<Vector3<f64>>)> = (0..gt_poses.len())
        .into_par_iter()
        .map(|f| {
            let (p, g) = (&pred_depths[f], &gt_depths[f]);
            if p.width != g.width || p.height != g.height {
                return Err(Error::DimensionMismatch {
                    what: "depth map resolution",
                    expected: g.values.len(),
                    actual: p.values.len(),
                });
            }
            let (mut xs, mut ys) = (Vec::new(), Vec::new());
            for idx in (0..g.values.len()).step_by(stride) {
                let (dp, dg) = (p.values[idx], g.values[idx]);
                if !(dp > 0.0 && dg > 0.0) {
                    continue;
                }
                let (r, c) = (idx / g.width, idx % g.width);
                let ray = intrinsics.ray(grid_pixel(intrinsics.width, g.width, r, c));
                xs.push(pred_poses[f].transform(&(ray * dp)));
                ys.push(gt_poses[f].transform(&(ray * dg)));
            }
            Ok((xs, ys))
        })
        .collect::<Result<_>>()?;
    let mut xs = Vec::new();
    let mut ys = Vec::new();
    for (a, b) in per_frame {
        xs.extend(a);
        ys.extend(b);
    }
    Ok((xs, ys))
}

/// L1 mean and RMSE of distances between the aligned predicted cloud and the ground-truth cloud.
#[allow(clippy::too_many_arguments)]
pub fn pcl_errors(
    pred_poses: &[RigidPose],
    pred_depths: &[DepthMap],
    gt_poses: &[RigidPose],
    gt_depths: &[DepthMap],
    intrinsics: &Intrinsics,
    sim: &SimilarityTransform,
    stride: usize,
) -> Result<(f64, f64)> {
    let (xs, ys) = paired_clouds(pred_poses, pred_depths, gt_poses, gt_depths, intrinsics, stride)?;
    if xs.is_empty() {
        return Err(Error::Domain("empty point cloud".into()));
    }
    let (mut l1, mut sq) = (0.0, 0.0);
    for (x, y) in xs.iter().zip(&ys) {
        let d = (sim.apply(x) - y).norm();
        l1 += d;
        sq += d * d;
    }
    let n = xs.len() as f64;
    Ok((l1 / n, (sq / n).sqrt()))
}

/// Default pixel stride for alignment and point-cloud metrics.
pub const DEFAULT_STRIDE: usize = 8;

/// Align the prediction to the ground truth and compute every metric.
pub fn evaluate_reconstruction(
    pred_poses: &[RigidPose],
    pred_depths: &[DepthMap],
    gt_poses: &[RigidPose],
    gt_depths: &[DepthMap],
    intrinsics: &Intrinsics,
    stride: usize,
) -> Result<(MetricsReport, SimilarityTransform)> {
    let (xs, ys) = paired_clouds(pred_poses, pred_depths, gt_poses, gt_depths, intrinsics, stride)?;
    let sim = umeyama_similarity(&xs, &ys)?;
    let (rotation_deg, center_m) = camera_errors(pred_poses, gt_poses, &sim)?;
    let (depth_l1, depth_rmse) = depth_errors(pred_depths, gt_depths, sim.scale)?;
    let (pcl_l1, pcl_rmse) = pcl_errors(pred_poses, pred_depths, gt_poses, gt_depths, intrinsics, &sim, stride)?;
    Ok((
        MetricsReport {
            rotation_deg,
            center_m,
            depth_l1,
            depth_rmse,
            pcl_l1,
            pcl_rmse,
            frames: gt_poses.len(),
            aligned_points: xs.len(),
        },
        sim,
    ))
}

#[cfg(test)]
mod tests {
    use nalgebra::{Rotation3, Unit};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::pairwise::umeyama_rigid;

    fn random_rotation(rng: &mut impl Rng) -> Matrix3<f64> {
        let axis = Unit::new_normalize(Vector3::new(
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
            rng.random_range(-1.0..1.0),
        ));
        *Rotation3::from_axis_angle(&axis, rng.random_range(-3.0..3.0)).matrix()
    }

    fn random_points(rng: &mut impl Rng, n: usize) -> Vec<Vector3<f64>> {
        (0..n)
            .map(|_| Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)))
            .collect()
    }

    #[test]
    fn similarity_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random_points(&mut rng, 20);
        let doubled: Vec<_> = x.iter().map(|p| p * 2.0).collect();
        let s = umeyama_similarity(&x, &doubled).unwrap();
        assert!((s.scale - 2.0).abs() < 1e-12);
        assert!((s.rotation - Matrix3::identity()).norm() < 1e-12);
        assert!(s.translation.norm() < 1e-12);
        let id = umeyama_similarity(&x, &x).unwrap();
        assert!((id.scale - 1.0).abs() < 1e-12 && id.translation.norm() < 1e-12);
    }

    #[test]
    fn similarity_recovers_planted_transforms() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let planted = SimilarityTransform {
                scale: rng.random_range(0.2..5.0),
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0), rng.random_range(-5.0..5.0)),
            };
            let x = random_points(&mut rng, 100);
            let y: Vec<_> = x.iter().map(|p| planted.apply(p)).collect();
            let est = umeyama_similarity(&x, &y).unwrap();
            assert!((est.scale - planted.scale).abs() < 1e-9);
            assert!((est.rotation - planted.rotation).norm() < 1e-9);
            assert!((est.translation - planted.translation).norm() < 1e-9);
        }
    }

    #[test]
    fn unit_scale_similarity_matches_rigid_fit() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = random_points(&mut rng, 30);
        let r = random_rotation(&mut rng);
        let y: Vec<_> = x.iter().map(|p| r * p + Vector3::new(1.0, -2.0, 0.5)).collect();
        let sim = umeyama_similarity(&x, &y).unwrap();
        let rigid = umeyama_rigid(&x, &y).unwrap();
        assert!((sim.scale - 1.0).abs() < 1e-12);
        assert!((sim.rotation - rigid.rotation).norm() < 1e-12);
        assert!((sim.translation - rigid.translation).norm() < 1e-12);
    }

    #[test]
    fn degenerate_points_are_rejected() {
        let same = vec![Vector3::new(1.0, 1.0, 1.0); 5];
        assert!(umeyama_similarity(&same, &same).is_err());
    }

    fn random_trajectory(rng: &mut impl Rng, n: usize) -> Vec<RigidPose> {
        (0..n)
            .map(|_| RigidPose {
                rotation: random_rotation(rng),
                translation: Vector3::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0)),
            })
            .collect()
    }

    #[test]
    fn camera_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let gt = random_trajectory(&mut rng, 8);
        assert_eq!(camera_errors(&gt, &gt, &SimilarityTransform::identity()).unwrap(), (0.0, 0.0));

        let mut one_off = gt.clone();
        let tilt = Rotation3::from_axis_angle(&Vector3::z_axis(), 10f64.to_radians());
        one_off[3].rotation = one_off[3].rotation * tilt.matrix();
        let (rot, center) = camera_errors(&one_off, &gt, &SimilarityTransform::identity()).unwrap();
        assert!((rot - 10.0 / 8.0).abs() < 1e-9);
        assert!(center < 1e-12);

        // prediction is the ground truth seen through an unknown similarity
        let g = SimilarityTransform {
            scale: 0.7,
            rotation: random_rotation(&mut rng),
            translation: Vector3::new(0.3, 0.1, -1.0),
        };
        let inverse = SimilarityTransform {
            scale: 1.0 / g.scale,
            rotation: g.rotation.transpose(),
            translation: -(g.rotation.transpose() * g.translation) / g.scale,
        };
        let pred: Vec<_> = gt.iter().map(|p| inverse.apply_pose(p)).collect();
        let (rot, center) = camera_errors(&pred, &gt, &g).unwrap();
        assert!(rot < 1e-6 && center < 1e-9);
        assert!(camera_errors(&pred[..3], &gt, &g).is_err());
    }

    fn random_map(rng: &mut impl Rng, w: usize, h: usize) -> DepthMap {
        DepthMap::new(w, h, (0..w * h).map(|_| rng.random_range(0.5..5.0)).collect()).unwrap()
    }

    #[test]
    fn depth_error_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let gt: Vec<_> = (0..3).map(|_| random_map(&mut rng, 8, 6)).collect();
        assert_eq!(depth_errors(&gt, &gt, 1.0).unwrap(), (0.0, 0.0));
        let shifted: Vec<_> = gt
            .iter()
            .map(|m| DepthMap::new(8, 6, m.values.iter().map(|v| v + 0.1).collect()).unwrap())
            .collect();
        let (l1, rmse) = depth_errors(&shifted, &gt, 1.0).unwrap();
        assert!((l1 - 0.1).abs() < 1e-12 && (rmse - 0.1).abs() < 1e-12);
        let empty = vec![DepthMap::new(2, 2, vec![0.0; 4]).unwrap()];
        assert!(depth_errors(&empty, &empty, 1.0).is_err());
    }

    /// Two passes: collect valid residuals first, then reduce.
    fn naive_depth(pred: &[DepthMap], gt: &[DepthMap], scale: f64) -> (f64, f64) {
        let mut l1s = Vec::new();
        let mut rmses = Vec::new();
        for (p, g) in pred.iter().zip(gt) {
            let residuals: Vec<f64> = (0..g.values.len())
                .filter(|&i| g.values[i] > 0.0)
                .map(|i| scale * p.values[i] - g.values[i])
                .collect();
            let n = residuals.len() as f64;
            l1s.push(residuals.iter().map(|r| r.abs()).sum::<f64>() / n);
            rmses.push((residuals.iter().map(|r| r * r).sum::<f64>() / n).sqrt());
        }
        let n = l1s.len() as f64;
        (l1s.iter().sum::<f64>() / n, rmses.iter().sum::<f64>() / n)
    }

    #[test]
    fn depth_errors_match_naive_two_pass() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let gt: Vec<_> = (0..4)
                .map(|_| {
                    let mut m = random_map(&mut rng, 7, 5);
                    m.values[3] = 0.0;
                    m
                })
                .collect();
            let pred: Vec<_> = (0..4).map(|_| random_map(&mut rng, 7, 5)).collect();
            let scale = rng.random_range(0.5..2.0);
            let (a, b) = depth_errors(&pred, &gt, scale).unwrap();
            let (c, d) = naive_depth(&pred, &gt, scale);
            assert!((a - c).abs() < 1e-12 && (b - d).abs() < 1e-12);
            assert!(b >= a - 1e-12);
        }
    }

    fn intrinsics() -> Intrinsics {
        Intrinsics::new(20.0, 20.0, 15.5, 11.5, 32, 24).unwrap()
    }

    #[test]
    fn pcl_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let poses = random_trajectory(&mut rng, 3);
        let depths: Vec<_> = (0..3).map(|_| random_map(&mut rng, 8, 6)).collect();
        let k = intrinsics();
        let id = SimilarityTransform::identity();
        assert_eq!(pcl_errors(&poses, &depths, &poses, &depths, &k, &id, 1).unwrap(), (0.0, 0.0));

        let moved: Vec<_> = poses
            .iter()
            .map(|p| RigidPose {
                rotation: p.rotation,
                translation: p.translation + Vector3::new(1.0, 2.0, 3.0),
            })
            .collect();
        let (report, _) = evaluate_reconstruction(&moved, &depths, &poses, &depths, &k, 1).unwrap();
        assert!(report.pcl_l1 < 1e-9 && report.pcl_rmse < 1e-9);
    }

    fn naive_pcl(
        pred_poses: &[RigidPose],
        pred: &[DepthMap],
        gt_poses: &[RigidPose],
        gt: &[DepthMap],
        k: &Intrinsics,
        sim: &SimilarityTransform,
        stride: usize,
    ) -> (f64, f64) {
        let mut dists = Vec::new();
        for f in 0..gt.len() {
            let w = gt[f].width;
            let s = k.width as f64 / w as f64;
            let mut idx = 0;
            while idx < gt[f].values.len() {
                let (r, c) = (idx / w, idx % w);
                let u = (c as f64 + 0.5) * s - 0.5;
                let v = (r as f64 + 0.5) * s - 0.5;
                let ray = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
                let xp = pred_poses[f].rotation * (ray * pred[f].values[idx]) + pred_poses[f].translation;
                let xg = gt_poses[f].rotation * (ray * gt[f].values[idx]) + gt_poses[f].translation;
                let xa = sim.rotation * xp * sim.scale + sim.translation;
                dists.push((xa - xg).norm());
                idx += stride;
            }
        }
        let n = dists.len() as f64;
        (dists.iter().sum::<f64>() / n, (dists.iter().map(|d| d * d).sum::<f64>() / n).sqrt())
    }

    #[test]
    fn pcl_errors_match_naive_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let k = intrinsics();
        for _ in 0..10 {
            let gt_poses = random_trajectory(&mut rng, 3);
            let pred_poses = random_trajectory(&mut rng, 3);
            let gt: Vec<_> = (0..3).map(|_| random_map(&mut rng, 8, 6)).collect();
            let pred: Vec<_> = (0..3).map(|_| random_map(&mut rng, 8, 6)).collect();
            let sim = SimilarityTransform {
                scale: 1.3,
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(0.1, 0.2, 0.3),
            };
            let stride = rng.random_range(1..5);
            let (a, b) = pcl_errors(&pred_poses, &pred, &gt_poses, &gt, &k, &sim, stride).unwrap();
            let (c, d) = naive_pcl(&pred_poses, &pred, &gt_poses, &gt, &k, &sim, stride);
            assert!((a - c).abs() < 1e-10 && (b - d).abs() < 1e-10);
            assert!(b >= a - 1e-12);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_invariant_to_a_global_similarity(seed in 0u64..10_000, scale in 0.2f64..5.0) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let k = intrinsics();
            let gt_poses = random_trajectory(&mut rng, 4);
            let gt: Vec<_> = (0..4).map(|_| random_map(&mut rng, 8, 6)).collect();
            let pred_poses: Vec<_> = gt_poses
                .iter()
                .map(|p| RigidPose {
                    rotation: p.rotation * *Rotation3::from_euler_angles(rng.random_range(-0.1..0.1), 0.0, 0.0).matrix(),
                    translation: p.translation + Vector3::new(rng.random_range(-0.2..0.2), 0.0, 0.0),
                })
                .collect();
            let pred: Vec<_> = gt
                .iter()
                .map(|m| DepthMap::new(8, 6, m.values.iter().map(|v| v * rng.random_range(0.9..1.1)).collect()).unwrap())
                .collect();
            let g = SimilarityTransform {
                scale,
                rotation: random_rotation(&mut rng),
                translation: Vector3::new(rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
            };
            let moved_poses: Vec<_> = pred_poses.iter().map(|p| g.apply_pose(p)).collect();
            let moved: Vec<_> = pred
                .iter()
                .map(|m| DepthMap::new(8, 6, m.values.iter().map(|v| v * scale).collect()).unwrap())
                .collect();
            let (a, _) = evaluate_reconstruction(&pred_poses, &pred, &gt_poses, &gt, &k, 1).unwrap();
            let (b, _) = evaluate_reconstruction(&moved_poses, &moved, &gt_poses, &gt, &k, 1).unwrap();
            for (x, y) in [
                (a.rotation_deg, b.rotation_deg),
                (a.center_m, b.center_m),
                (a.depth_l1, b.depth_l1),
                (a.depth_rmse, b.depth_rmse),
                (a.pcl_l1, b.pcl_l1),
                (a.pcl_rmse, b.pcl_rmse),
            ] {
                prop_assert!((x - y).abs() < 1e-6, "{} vs {}", x, y);
            }
        }
    }
}
