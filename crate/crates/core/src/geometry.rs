//! Camera models, rigid poses and the projection algebra shared by every
//! stage of the pipeline.
//!
//! Conventions: pixel `(u, v)` is (column, row); camera coordinates are x
//! right, y down, z forward; a point `x_c` in camera `i` maps to the scene as
//! `x_w = R_i x_c + T_i`.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Pinhole intrinsics. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(Error::Domain(format!(
                "focal lengths must be finite and positive, got fx={} fy={}",
                self.fx, self.fy
            )));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64 && self.cy > 0.0 && self.cy < self.height as f64)
        {
            return Err(Error::Domain(format!(
                "principal point ({}, {}) outside {}x{} image",
                self.cx, self.cy, self.width, self.height
            )));
        }
        Ok(())
    }

    pub fn contains(&self, p: Pixel) -> bool {
        p.u >= 0.0 && p.v >= 0.0 && p.u < self.width as f64 && p.v < self.height as f64
    }

    /// Viewing ray `K^-1 [u, v, 1]^T`, with unit z component.
    pub fn ray(&self, p: Pixel) -> Vector3<f64> {
        Vector3::new((p.u - self.cx) / self.fx, (p.v - self.cy) / self.fy, 1.0)
    }

    /// Pinhole projection of a camera-frame point. No bounds or cheirality check.
    pub fn project(&self, x: &Vector3<f64>) -> Pixel {
        Pixel::new(self.fx * x.x / x.z + self.cx, self.fy * x.y / x.z + self.cy)
    }
}

/// Subpixel image location, `u` along columns and `v` along rows.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Pixel {
    pub u: f64,
    pub v: f64,
}

impl Pixel {
    pub const fn new(u: f64, v: f64) -> Self {
        Pixel { u, v }
    }
}

/// Back-project a pixel at metric depth `d` (the z coordinate) into the camera frame.
pub fn backproject(p: Pixel, d: f64, k: &Intrinsics) -> Result<Vector3<f64>> {
    if !(d > 0.0) {
        return Err(Error::Domain(format!("depth must be positive, got {d}")));
    }
    Ok(k.ray(p) * d)
}

/// Rotation plus translation; maps camera coordinates to scene coordinates
/// for absolute poses, and camera `i` to camera `j` for relative ones.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RigidPose {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

pub const ORTHONORMAL_TOL: f64 = 1e-9;

impl RigidPose {
    pub fn identity() -> Self {
        RigidPose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Checked constructor: `R^T R = I` and `det R = +1` within 1e-9.
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        if !is_rotation(&rotation, ORTHONORMAL_TOL) {
            return Err(Error::Domain("rotation is not orthonormal with det +1".into()));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::Domain("translation is not finite".into()));
        }
        Ok(RigidPose {
            rotation,
            translation,
        })
    }

    pub fn transform(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * x + self.translation
    }

    pub fn inverse(&self) -> Self {
        let rt = self.rotation.transpose();
        RigidPose {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &RigidPose) -> Self {
        RigidPose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    /// Relative pose taking camera `i` coordinates into camera `j`
    /// coordinates, given both absolute (camera-to-world) poses.
    pub fn relative(pose_i: &RigidPose, pose_j: &RigidPose) -> Self {
        pose_j.inverse().compose(pose_i)
    }
}

pub fn is_rotation(r: &Matrix3<f64>, tol: f64) -> bool {
    r.iter().all(|v| v.is_finite())
        && (r.transpose() * r - Matrix3::identity()).abs().max() <= tol
        && (r.determinant() - 1.0).abs() <= tol
}

/// `x_w = R x + T`.
pub fn cam_to_world(x: &Vector3<f64>, pose: &RigidPose) -> Vector3<f64> {
    pose.transform(x)
}

/// Incremental pose step of a cumulative chain: Tait-Bryan angles
/// `(alpha, beta, gamma)` about x, y, z plus a translation increment.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TaitBryanDelta {
    pub angles: Vector3<f64>,
    pub translation_delta: Vector3<f64>,
}

impl TaitBryanDelta {
    pub fn zero() -> Self {
        TaitBryanDelta {
            angles: Vector3::zeros(),
            translation_delta: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        tait_bryan_to_rotation(&self.angles)
    }
}

fn rot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(1.0, 0.0, 0.0, 0.0, c, -s, 0.0, s, c)
}

fn rot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c)
}

fn rot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0)
}

fn drot_x(a: f64) -> Matrix3<f64> {
    let (s, c) = a.sin_cos();
    Matrix3::new(0.0, 0.0, 0.0, 0.0, -s, -c, 0.0, c, -s)
}

fn drot_y(b: f64) -> Matrix3<f64> {
    let (s, c) = b.sin_cos();
    Matrix3::new(-s, 0.0, c, 0.0, 0.0, 0.0, -c, 0.0, -s)
}

fn drot_z(g: f64) -> Matrix3<f64> {
    let (s, c) = g.sin_cos();
    Matrix3::new(-s, -c, 0.0, c, -s, 0.0, 0.0, 0.0, 0.0)
}

/// `Rz(gamma) * Ry(beta) * Rx(alpha)` for `angles = (alpha, beta, gamma)`.
pub fn tait_bryan_to_rotation(angles: &Vector3<f64>) -> Matrix3<f64> {
    rot_z(angles.z) * rot_y(angles.y) * rot_x(angles.x)
}

/// Partial derivatives of [`tait_bryan_to_rotation`] with respect to each angle.
pub fn tait_bryan_jacobian(angles: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let (rx, ry, rz) = (rot_x(angles.x), rot_y(angles.y), rot_z(angles.z));
    [
        rz * ry * drot_x(angles.x),
        rz * drot_y(angles.y) * rx,
        drot_z(angles.z) * ry * rx,
    ]
}

/// Inverse of [`tait_bryan_to_rotation`], principal branch.
pub fn rotation_to_tait_bryan(r: &Matrix3<f64>) -> Vector3<f64> {
    let beta = (-r[(2, 0)]).clamp(-1.0, 1.0).asin();
    let (alpha, gamma) = if r[(2, 0)].abs() < 1.0 - 1e-12 {
        (r[(2, 1)].atan2(r[(2, 2)]), r[(1, 0)].atan2(r[(0, 0)]))
    } else {
        // gimbal lock: only alpha - gamma (or alpha + gamma) is observable
        ((-r[(1, 2)]).atan2(r[(1, 1)]), 0.0)
    };
    Vector3::new(alpha, beta, gamma)
}

/// Absolute poses of a cumulative chain: `R_i = A_0 A_1 ... A_i` and
/// `T_i = t_0 + ... + t_i`.
pub fn compose_chain(deltas: &[TaitBryanDelta]) -> Vec<RigidPose> {
    let mut poses = Vec::with_capacity(deltas.len());
    let mut rotation = Matrix3::identity();
    let mut translation = Vector3::zeros();
    for delta in deltas {
        rotation *= delta.rotation();
        translation += delta.translation_delta;
        poses.push(RigidPose {
            rotation,
            translation,
        });
    }
    poses
}

/// Chain deltas that reproduce the given absolute poses under [`compose_chain`].
pub fn chain_from_poses(poses: &[RigidPose]) -> Vec<TaitBryanDelta> {
    let mut prev = RigidPose::identity();
    poses
        .iter()
        .map(|pose| {
            let step = prev.rotation.transpose() * pose.rotation;
            let delta = TaitBryanDelta {
                angles: rotation_to_tait_bryan(&step),
                translation_delta: pose.translation - prev.translation,
            };
            prev = *pose;
            delta
        })
        .collect()
}

/// Angle of `Ra^T Rb` in degrees, within `[0, 180]`.
///
/// Evaluated as `atan2(|sin|, cos)` of the relative rotation, which equals
/// `acos((tr - 1) / 2)` but stays accurate for tiny angles.
pub fn rotation_angle_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra.transpose() * rb;
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    let axis = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (axis.norm() / 2.0).min(1.0);
    sin.atan2(cos).to_degrees().clamp(0.0, 180.0)
}

/// Result of a closed-form least-squares registration between point sets.
#[derive(Debug, Clone, Copy)]
pub(crate) struct Registration {
    pub scale: f64,
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

/// Umeyama's closed-form alignment `y ≈ s R x + t`; `with_scale = false`
/// pins `s = 1`.
pub(crate) fn umeyama(x: &[Vector3<f64>], y: &[Vector3<f64>], with_scale: bool) -> Result<Registration> {
    if x.len() != y.len() {
        return Err(Error::DimensionMismatch {
            what: "point correspondences",
            expected: x.len(),
            actual: y.len(),
        });
    }
    if x.len() < 3 {
        return Err(Error::Degenerate(format!("need at least 3 points, got {}", x.len())));
    }
    let n = x.len() as f64;
    let mean_x = x.iter().sum::<Vector3<f64>>() / n;
    let mean_y = y.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::zeros();
    let mut var_x = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let dx = xi - mean_x;
        cov += (yi - mean_y) * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;
    let spread = mean_x.norm().max(1.0);
    if var_x <= 1e-24 * spread * spread {
        return Err(Error::Degenerate("source points are coincident".into()));
    }

    let svd = cov.svd(true, true);
    let u = svd.u.expect("svd u");
    let v_t = svd.v_t.expect("svd v_t");
    let mut signs = Vector3::new(1.0, 1.0, 1.0);
    if u.determinant() * v_t.determinant() < 0.0 {
        // singular values are sorted descending; flip the smallest
        let (imin, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        signs[imin] = -1.0;
    }
    let rotation = u * Matrix3::from_diagonal(&signs) * v_t;
    let scale = if with_scale {
        svd.singular_values.dot(&signs) / var_x
    } else {
        1.0
    };
    if with_scale && !(scale > 0.0) {
        return Err(Error::Degenerate("non-positive similarity scale".into()));
    }
    let translation = mean_y - scale * rotation * mean_x;
    Ok(Registration {
        scale,
        rotation,
        translation,
    })
}
