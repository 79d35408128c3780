//! Synthetic rooms with known cameras, bases, keypoints and matches.
//!
//! A scene is an axis-aligned room with box clutter on the floor. World
//! coordinates have `y` pointing down, matching the camera's `y` axis, and
//! cameras look roughly horizontally. Depth is ray cast at basis nodes, so
//! each frame's true depth grid is exact; keypoints come from landmarks on the
//! surfaces, kept only where the bilinear stencil stays on one surface.

use std::collections::{HashMap, HashSet};

use nalgebra::{Matrix3, Rotation3, Unit, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bundle::PairConstraint;
use crate::depth_basis::{DepthBasis, DepthCode, DepthMap};
use crate::error::{Error, Result};
use crate::geometry::{rotation_angle_deg, Intrinsics, Pixel, RigidPose};
use crate::matching::{KeypointSet, MatchSet};
use crate::pairwise::{PairFrame, PairSamples};

/// Scene generation parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SceneSpec {
    pub frames: usize,
    pub width: usize,
    pub height: usize,
    pub basis_width: usize,
    pub basis_height: usize,
    /// Focal length in pixels (both axes).
    pub focal: f64,
    /// Upper bound on the rotation between consecutive frames.
    pub max_step_rotation_deg: f64,
    /// Upper bound on the camera displacement between consecutive frames (meters).
    pub max_step_translation: f64,
    /// Room extent along x, y, z (meters), centred on the origin.
    pub room_size: [f64; 3],
    pub clutter_boxes: usize,
    pub k: usize,
    pub keypoints_per_frame: usize,
    pub descriptor_dim: usize,
    pub pixel_noise: f64,
    /// RMS of the planted depth perturbation `mu - depth`, as a fraction of mean depth.
    pub depth_perturbation: f64,
    pub descriptor_noise: f64,
    pub outlier_rate: f64,
    pub seed: u64,
    pub max_retries: usize,
}

impl Default for SceneSpec {
    fn default() -> Self {
        SceneSpec {
            frames: 50,
            width: 160,
            height: 120,
            basis_width: 40,
            basis_height: 30,
            focal: 130.0,
            max_step_rotation_deg: 3.0,
            max_step_translation: 0.05,
            room_size: [8.0, 3.0, 8.0],
            clutter_boxes: 6,
            k: 32,
            keypoints_per_frame: 60,
            descriptor_dim: 32,
            pixel_noise: 0.0,
            depth_perturbation: 0.05,
            descriptor_noise: 0.05,
            outlier_rate: 0.0,
            seed: 0,
            max_retries: 200,
        }
    }
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        let counts = [
            ("frames", self.frames),
            ("width", self.width),
            ("height", self.height),
            ("basis_width", self.basis_width),
            ("basis_height", self.basis_height),
            ("k", self.k),
            ("keypoints_per_frame", self.keypoints_per_frame),
            ("descriptor_dim", self.descriptor_dim),
            ("max_retries", self.max_retries),
        ];
        if let Some((name, _)) = counts.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Config(format!("{name} must be positive")));
        }
        if self.width * self.basis_height != self.height * self.basis_width {
            return Err(Error::Config("basis and frame aspect ratios differ".into()));
        }
        if !(0.0..=1.0).contains(&self.outlier_rate) {
            return Err(Error::Config(format!("outlier rate {} outside [0, 1]", self.outlier_rate)));
        }
        let nonneg = [
            self.pixel_noise,
            self.depth_perturbation,
            self.descriptor_noise,
            self.max_step_rotation_deg,
            self.max_step_translation,
        ];
        if nonneg.iter().any(|v| !(*v >= 0.0)) {
            return Err(Error::Config("noise levels and step bounds must be nonnegative".into()));
        }
        if !(self.focal > 0.0) || self.room_size.iter().any(|s| !(*s > 2.0)) {
            return Err(Error::Config("focal length must be positive and the room larger than 2 m".into()));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            fx: self.focal,
            fy: self.focal,
            cx: (self.width as f64 - 1.0) / 2.0,
            cy: (self.height as f64 - 1.0) / 2.0,
            width: self.width,
            height: self.height,
        }
    }
}

/// A surface point shared by the frames that see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Landmark {
    pub position: Vector3<f64>,
    pub surface: u32,
    pub priority: f64,
    pub descriptor: Vec<f64>,
}

/// Everything known about a generated scene.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub spec: SceneSpec,
    pub intrinsics: Intrinsics,
    /// Camera-to-world poses.
    pub poses: Vec<RigidPose>,
    pub bases: Vec<DepthBasis>,
    pub codes: Vec<DepthCode>,
    /// Equal to `evaluate_dense(basis, code)` for every frame.
    pub depths: Vec<DepthMap>,
    pub keypoints: Vec<KeypointSet>,
    /// Landmark index behind each keypoint.
    pub keypoint_landmarks: Vec<Vec<usize>>,
    pub landmarks: Vec<Landmark>,
}

impl GroundTruth {
    pub fn frame_count(&self) -> usize {
        self.poses.len()
    }

    /// RMS of `mu - depth` over all frames and basis pixels.
    pub fn depth_noise_floor(&self) -> f64 {
        let (mut sum, mut count) = (0.0, 0usize);
        for (basis, depth) in self.bases.iter().zip(&self.depths) {
            for (m, d) in basis.mu().iter().zip(&depth.values) {
                sum += (m - d).powi(2);
                count += 1;
            }
        }
        (sum / count as f64).sqrt()
    }

    pub fn frame(&self, f: usize) -> PairFrame<'_> {
        PairFrame {
            basis: &self.bases[f],
            keypoints: &self.keypoints[f],
            intrinsics: &self.intrinsics,
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Room {
    min: Vector3<f64>,
    max: Vector3<f64>,
}

#[derive(Debug, Clone)]
struct Geometry {
    room: Room,
    clutter: Vec<Room>,
}

const NO_HIT: f64 = f64::INFINITY;

impl Geometry {
    fn build(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Self {
        let half = Vector3::from(spec.room_size) / 2.0;
        let room = Room { min: -half, max: half };
        let mut clutter = Vec::new();
        for _ in 0..spec.clutter_boxes {
            let size = Vector3::new(rng.random_range(0.4..1.0), rng.random_range(0.4..1.2), rng.random_range(0.4..1.0));
            // against a random wall, resting on the floor (y = max)
            let along = |rng: &mut ChaCha8Rng, extent: f64, s: f64| rng.random_range(-extent + s..extent - s);
            let wall = rng.random_range(0..4);
            let (x, z) = match wall {
                0 => (-half.x + size.x / 2.0 + 0.05, along(rng, half.z, size.z)),
                1 => (half.x - size.x / 2.0 - 0.05, along(rng, half.z, size.z)),
                2 => (along(rng, half.x, size.x), -half.z + size.z / 2.0 + 0.05),
                _ => (along(rng, half.x, size.x), half.z - size.z / 2.0 - 0.05),
            };
            let centre = Vector3::new(x, half.y - size.y / 2.0, z);
            clutter.push(Room {
                min: centre - size / 2.0,
                max: centre + size / 2.0,
            });
        }
        Geometry { room, clutter }
    }

    /// Nearest surface along `origin + t * dir`, `t > 0`, with its id.
    fn cast(&self, origin: &Vector3<f64>, dir: &Vector3<f64>) -> (f64, u32) {
        let mut best = (NO_HIT, u32::MAX);
        for a in 0..3 {
            if dir[a] == 0.0 {
                continue;
            }
            let bound = if dir[a] > 0.0 { self.room.max[a] } else { self.room.min[a] };
            let t = (bound - origin[a]) / dir[a];
            if t > 0.0 && t < best.0 {
                best = (t, (2 * a + usize::from(dir[a] > 0.0)) as u32);
            }
        }
        for (b, bx) in self.clutter.iter().enumerate() {
            let (mut near, mut far, mut face) = (f64::NEG_INFINITY, f64::INFINITY, 0u32);
            let mut miss = false;
            for a in 0..3 {
                if dir[a] == 0.0 {
                    if origin[a] < bx.min[a] || origin[a] > bx.max[a] {
                        miss = true;
                    }
                    continue;
                }
                let t1 = (bx.min[a] - origin[a]) / dir[a];
                let t2 = (bx.max[a] - origin[a]) / dir[a];
                let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
                if lo > near {
                    near = lo;
                    face = (2 * a + usize::from(dir[a] < 0.0)) as u32;
                }
                far = far.min(hi);
            }
            if !miss && near > 0.0 && near <= far && near < best.0 {
                best = (near, 6 + 6 * b as u32 + face);
            }
        }
        best
    }

    /// Camera centres must keep clear of walls and clutter.
    fn admits(&self, c: &Vector3<f64>) -> bool {
        let margin = 1.0;
        let inside = (0..3).all(|a| {
            let m = if a == 1 { 0.5 } else { margin };
            c[a] > self.room.min[a] + m && c[a] < self.room.max[a] - m
        });
        inside
            && self
                .clutter
                .iter()
                .all(|b| (0..3).any(|a| c[a] < b.min[a] - 0.6 || c[a] > b.max[a] + 0.6))
    }
}

/// Camera-to-world rotation for a heading `yaw` about the vertical axis and
/// a tilt `pitch`, camera `y` pointing down.
fn orientation(yaw: f64, pitch: f64) -> Matrix3<f64> {
    *(Rotation3::from_axis_angle(&Vector3::y_axis(), yaw) * Rotation3::from_axis_angle(&Vector3::x_axis(), pitch)).matrix()
}

fn smooth_trajectory(spec: &SceneSpec, geo: &Geometry, rng: &mut ChaCha8Rng) -> Option<Vec<RigidPose>> {
    let theta = spec.max_step_rotation_deg.to_radians();
    let t_max = spec.max_step_translation;
    let half = Vector3::from(spec.room_size) / 2.0;
    let start = Vector3::new(
        rng.random_range(-(half.x - 1.5).max(0.1)..(half.x - 1.5).max(0.1)),
        rng.random_range(-0.3..0.3),
        rng.random_range(-(half.z - 1.5).max(0.1)..(half.z - 1.5).max(0.1)),
    );
    if !geo.admits(&start) {
        return None;
    }
    let (mut yaw, mut pitch) = (rng.random_range(-std::f64::consts::PI..std::f64::consts::PI), 0.0f64);
    let (mut yaw_rate, mut pitch_rate) = (0.0f64, 0.0f64);
    let mut velocity = Vector3::zeros();
    let mut pos = start;
    let mut poses = Vec::with_capacity(spec.frames);
    for _ in 0..spec.frames {
        let pose = RigidPose {
            rotation: orientation(yaw, pitch),
            translation: pos,
        };
        if !geo.admits(&pos) {
            return None;
        }
        poses.push(pose);
        yaw_rate = 0.85 * yaw_rate + 0.15 * rng.random_range(-1.0..1.0) * theta * 2.0;
        pitch_rate = 0.85 * pitch_rate + 0.15 * rng.random_range(-1.0..1.0) * theta - 0.05 * pitch;
        // split the per-step rotation budget between heading and tilt
        let (mut dy, mut dp) = (yaw_rate, pitch_rate);
        let total = dy.abs() + dp.abs();
        if total > theta {
            dy *= theta / total;
            dp *= theta / total;
        }
        yaw_rate = dy;
        pitch_rate = dp;
        yaw += dy;
        pitch = (pitch + dp).clamp(-0.2, 0.2);
        let pull = -pos * 0.02;
        let push = Vector3::new(rng.random_range(-1.0..1.0), rng.random_range(-0.2..0.2), rng.random_range(-1.0..1.0));
        velocity = 0.85 * velocity + 0.15 * (push * t_max * 2.0 + pull);
        if velocity.norm() > t_max {
            velocity *= t_max / velocity.norm();
        }
        pos += velocity;
    }
    Some(poses)
}

/// Ray-cast depth and surface id at every basis node.
fn render(spec: &SceneSpec, geo: &Geometry, pose: &RigidPose, intr: &Intrinsics) -> (Vec<f64>, Vec<u32>) {
    let s = spec.width as f64 / spec.basis_width as f64;
    let n = spec.basis_width * spec.basis_height;
    let mut depth = Vec::with_capacity(n);
    let mut surface = Vec::with_capacity(n);
    for r in 0..spec.basis_height {
        for c in 0..spec.basis_width {
            let p = Pixel::new((c as f64 + 0.5) * s - 0.5, (r as f64 + 0.5) * s - 0.5);
            let ray = intr.ray(p);
            let (t, id) = geo.cast(&pose.translation, &(pose.rotation * ray));
            depth.push(t);
            surface.push(id);
        }
    }
    (depth, surface)
}

/// `K` smooth planes of unit sample variance.
fn smooth_planes(spec: &SceneSpec, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (w, h) = (spec.basis_width, spec.basis_height);
    let n = w * h;
    let mut out = Vec::with_capacity(spec.k * n);
    for _ in 0..spec.k {
        let mut coeffs = [[0.0; 4]; 4];
        for row in coeffs.iter_mut() {
            for c in row.iter_mut() {
                *c = StandardNormal.sample(rng);
            }
        }
        let phase: (f64, f64) = (rng.random_range(0.0..1.0), rng.random_range(0.0..1.0));
        let mut plane: Vec<f64> = (0..n)
            .map(|idx| {
                let x = (idx % w) as f64 / w as f64;
                let y = (idx / w) as f64 / h as f64;
                let mut v = 0.0;
                for (a, row) in coeffs.iter().enumerate() {
                    for (b, c) in row.iter().enumerate() {
                        v += c
                            * (std::f64::consts::PI * (a as f64 * x + phase.0)).cos()
                            * (std::f64::consts::PI * (b as f64 * y + phase.1)).cos();
                    }
                }
                v
            })
            .collect();
        let mean = plane.iter().sum::<f64>() / n as f64;
        let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let sd = var.sqrt().max(1e-12);
        for v in &mut plane {
            *v = (*v - mean) / sd;
        }
        out.extend(plane);
    }
    out
}

struct FrameRender {
    basis: DepthBasis,
    code: DepthCode,
    depth: DepthMap,
    surface: Vec<u32>,
}

fn frame_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

fn build_frame(spec: &SceneSpec, geo: &Geometry, pose: &RigidPose, intr: &Intrinsics, frame: usize) -> Result<FrameRender> {
    let mut rng = frame_rng(spec.seed, 1 + frame as u64);
    let (rendered, surface) = render(spec, geo, pose, intr);
    if rendered.iter().any(|d| !d.is_finite() || *d <= 0.0) {
        return Err(Error::InfeasibleScene(format!("frame {frame} sees no surface somewhere")));
    }
    let n = rendered.len();
    let sigma = smooth_planes(spec, &mut rng);
    let z: Vec<f64> = (0..spec.k).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut offset = vec![0.0; n];
    for (k, zk) in z.iter().enumerate() {
        for (o, s) in offset.iter_mut().zip(&sigma[k * n..(k + 1) * n]) {
            *o += zk * s;
        }
    }
    let mean_depth = rendered.iter().sum::<f64>() / n as f64;
    let rms = (offset.iter().map(|o| o * o).sum::<f64>() / n as f64).sqrt().max(1e-12);
    let mut scale = spec.depth_perturbation * mean_depth / rms;
    // keep the mean plane positive with margin
    while scale > 0.0 && rendered.iter().zip(&offset).any(|(d, o)| d - scale * o < 0.2 * d) {
        scale *= 0.5;
    }
    let beta: Vec<f64> = z.iter().map(|v| v * scale).collect();
    let mu: Vec<f64> = rendered.iter().zip(&offset).map(|(d, o)| d - scale * o).collect();
    let basis = DepthBasis::new(spec.basis_width, spec.basis_height, spec.width, spec.height, mu, sigma)?;
    let code = DepthCode::from(beta);
    let depth = basis.evaluate_dense(&code)?;
    Ok(FrameRender {
        basis,
        code,
        depth,
        surface,
    })
}

/// Largest gap between interpolated and true keypoint depth (meters).
pub const INTERPOLATION_TOL: f64 = 5e-4;

/// Landmark visibility in one frame: in view, unoccluded, with all four
/// stencil nodes on the landmark's surface, and with the interpolated depth
/// within [`INTERPOLATION_TOL`] of the true one.
fn visible_pixel(
    lm: &Landmark,
    pose: &RigidPose,
    intr: &Intrinsics,
    geo: &Geometry,
    basis: &DepthBasis,
    depth: &DepthMap,
    surface: &[u32],
) -> Option<Pixel> {
    let local = pose.rotation.transpose() * (lm.position - pose.translation);
    if local.z <= 0.1 {
        return None;
    }
    let q = intr.project(&local);
    let margin = 1.0;
    if !(q.u >= margin && q.v >= margin && q.u < intr.width as f64 - 1.0 - margin && q.v < intr.height as f64 - 1.0 - margin) {
        return None;
    }
    let offset = lm.position - pose.translation;
    let dist = offset.norm();
    let (t, id) = geo.cast(&pose.translation, &(offset / dist));
    if id != lm.surface || (t - dist).abs() > 1e-6 * dist {
        return None;
    }
    let st = basis.stencil(q).ok()?;
    if st.indices.iter().any(|&i| surface[i] != lm.surface) {
        return None;
    }
    if (st.apply(&depth.values) - local.z).abs() > INTERPOLATION_TOL {
        return None;
    }
    Some(q)
}

fn unit_vector(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Generate a scene. Deterministic for a given spec.
pub fn generate_scene(spec: &SceneSpec) -> Result<GroundTruth> {
    spec.validate()?;
    let intr = spec.intrinsics();
    let mut rng = frame_rng(spec.seed, 0);
    let geo = Geometry::build(spec, &mut rng);
    let mut poses = None;
    for _ in 0..spec.max_retries {
        if let Some(p) = smooth_trajectory(spec, &geo, &mut rng) {
            // every frame must see surfaces at a sane distance
            let near_ok = p.iter().all(|pose| {
                let (d, _) = render(spec, &geo, pose, &intr);
                d.iter().all(|v| v.is_finite() && *v > 0.3)
            });
            if near_ok {
                poses = Some(p);
                break;
            }
        }
    }
    let poses = poses.ok_or_else(|| {
        Error::InfeasibleScene(format!("no admissible trajectory after {} attempts", spec.max_retries))
    })?;

    let frames: Vec<FrameRender> = poses
        .par_iter()
        .enumerate()
        .map(|(f, pose)| build_frame(spec, &geo, pose, &intr, f))
        .collect::<Result<_>>()?;

    // landmarks spawned from every frame
    let mut landmarks = Vec::new();
    for (f, pose) in poses.iter().enumerate() {
        let mut lrng = frame_rng(spec.seed, 1_000_000 + f as u64);
        let mut spawned = 0;
        let mut attempts = 0;
        while spawned < spec.keypoints_per_frame && attempts < 50 * spec.keypoints_per_frame {
            attempts += 1;
            let p = Pixel::new(
                lrng.random_range(1.0..spec.width as f64 - 2.0),
                lrng.random_range(1.0..spec.height as f64 - 2.0),
            );
            let (t, id) = geo.cast(&pose.translation, &(pose.rotation * intr.ray(p)));
            let position = pose.translation + pose.rotation * intr.ray(p) * t;
            let lm = Landmark {
                position,
                surface: id,
                priority: lrng.random(),
                descriptor: unit_vector(&mut lrng, spec.descriptor_dim),
            };
            if visible_pixel(&lm, pose, &intr, &geo, &frames[f].basis, &frames[f].depth, &frames[f].surface).is_some() {
                landmarks.push(lm);
                spawned += 1;
            }
        }
    }

    let per_frame: Vec<(KeypointSet, Vec<usize>)> = poses
        .par_iter()
        .enumerate()
        .map(|(f, pose)| {
            let mut krng = frame_rng(spec.seed, 2_000_000 + f as u64);
            let mut seen: Vec<(usize, Pixel)> = landmarks
                .iter()
                .enumerate()
                .filter_map(|(l, lm)| visible_pixel(lm, pose, &intr, &geo, &frames[f].basis, &frames[f].depth, &frames[f].surface).map(|q| (l, q)))
                .collect();
            seen.sort_by(|a, b| landmarks[b.0].priority.total_cmp(&landmarks[a.0].priority).then(a.0.cmp(&b.0)));
            seen.truncate(spec.keypoints_per_frame);
            seen.sort_by_key(|a| a.0);
            let pixel_noise = Normal::new(0.0, spec.pixel_noise).map_err(|e| Error::Config(e.to_string()))?;
            let desc_noise = Normal::new(0.0, spec.descriptor_noise).map_err(|e| Error::Config(e.to_string()))?;
            let mut pixels = Vec::with_capacity(seen.len());
            let mut descriptors = Vec::with_capacity(seen.len() * spec.descriptor_dim);
            for (l, q) in &seen {
                let u = (q.u + pixel_noise.sample(&mut krng)).clamp(0.0, spec.width as f64 - 1e-6);
                let v = (q.v + pixel_noise.sample(&mut krng)).clamp(0.0, spec.height as f64 - 1e-6);
                pixels.push(Pixel::new(u, v));
                descriptors.extend(landmarks[*l].descriptor.iter().map(|d| d + desc_noise.sample(&mut krng)));
            }
            let ids = seen.iter().map(|(l, _)| *l).collect();
            Ok((KeypointSet::new(pixels, spec.descriptor_dim, descriptors)?, ids))
        })
        .collect::<Result<_>>()?;

    let (keypoints, keypoint_landmarks) = per_frame.into_iter().unzip();
    let mut bases = Vec::with_capacity(frames.len());
    let mut codes = Vec::with_capacity(frames.len());
    let mut depths = Vec::with_capacity(frames.len());
    for fr in frames {
        bases.push(fr.basis);
        codes.push(fr.code);
        depths.push(fr.depth);
    }
    Ok(GroundTruth {
        spec: spec.clone(),
        intrinsics: intr,
        poses,
        bases,
        codes,
        depths,
        keypoints,
        keypoint_landmarks,
        landmarks,
    })
}

/// Matches between two frames with inlier (`true`) / outlier labels.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedPair {
    pub keypoints_i: KeypointSet,
    pub keypoints_j: KeypointSet,
    pub matches: MatchSet,
    pub labels: Vec<bool>,
}

/// Outlier count `O` with `O = ceil(rate * (inliers + O))`.
pub fn outlier_count(inliers: usize, rate: f64) -> usize {
    if inliers == 0 || rate <= 0.0 {
        return 0;
    }
    if rate >= 1.0 {
        return inliers;
    }
    let mut o = 0usize;
    while o < (rate * (inliers + o) as f64).ceil() as usize {
        o += 1;
    }
    o
}

/// True correspondences between frames `i` and `j` (shared landmarks) plus
/// random outlier pairs at the spec's rate, outliers appended last.
pub fn render_matches(gt: &GroundTruth, i: usize, j: usize, outlier_rate: f64, seed: u64) -> Result<RenderedPair> {
    let n = gt.frame_count();
    if i >= n || j >= n {
        return Err(Error::Domain(format!("frame pair ({i}, {j}) outside 0..{n}")));
    }
    if !(0.0..=1.0).contains(&outlier_rate) {
        return Err(Error::Domain(format!("outlier rate {outlier_rate} outside [0, 1]")));
    }
    let index_j: HashMap<usize, usize> = gt.keypoint_landmarks[j].iter().enumerate().map(|(b, &l)| (l, b)).collect();
    let mut pairs: Vec<(usize, usize)> = gt.keypoint_landmarks[i]
        .iter()
        .enumerate()
        .filter_map(|(a, l)| index_j.get(l).map(|&b| (a, b)))
        .collect();
    let inliers = pairs.len();
    let mut labels = vec![true; inliers];
    if inliers > 0 {
        let wanted = outlier_count(inliers, outlier_rate);
        if outlier_rate >= 1.0 {
            pairs.clear();
            labels.clear();
        }
        let mut rng = frame_rng(seed ^ gt.spec.seed, 3_000_000 + (i * n + j) as u64);
        let (ni, nj) = (gt.keypoints[i].len(), gt.keypoints[j].len());
        let mut used: HashSet<(usize, usize)> = pairs.iter().copied().collect();
        let mut added = 0;
        let mut attempts = 0;
        while added < wanted && attempts < 1000 * (wanted + 1) {
            attempts += 1;
            let p = (rng.random_range(0..ni), rng.random_range(0..nj));
            if gt.keypoint_landmarks[i][p.0] == gt.keypoint_landmarks[j][p.1] || !used.insert(p) {
                continue;
            }
            pairs.push(p);
            labels.push(false);
            added += 1;
        }
        if added < wanted {
            return Err(Error::Domain(format!("could not place {wanted} outliers between frames {i} and {j}")));
        }
    }
    Ok(RenderedPair {
        keypoints_i: gt.keypoints[i].clone(),
        keypoints_j: gt.keypoints[j].clone(),
        matches: MatchSet::new(i, j, pairs),
        labels,
    })
}

/// Ground-truth relative pose (camera `i` to camera `j`) composed with a
/// random rotation of angle `~N(0, sigma_rot)` and per-axis translation noise.
pub fn perturb_pose(rel: &RigidPose, sigma_rot_deg: f64, sigma_t: f64, rng: &mut ChaCha8Rng) -> RigidPose {
    let axis = Unit::new_normalize(Vector3::from_fn(|_, _| StandardNormal.sample(rng)));
    let angle: f64 = StandardNormal.sample(rng);
    let noise = Rotation3::from_axis_angle(&axis, angle * sigma_rot_deg.to_radians());
    let dt = Vector3::from_fn(|_, _| {
        let v: f64 = StandardNormal.sample(rng);
        v * sigma_t
    });
    RigidPose {
        rotation: noise.matrix() * rel.rotation,
        translation: rel.translation + dt,
    }
}

/// Constraints for the given pairs with ground-truth matches (outliers
/// included at the spec's rate) and perturbed relative poses. Pairs that
/// share no landmarks are skipped.
pub fn perturb_relative_poses(
    gt: &GroundTruth,
    pairs: &[(usize, usize)],
    sigma_rot_deg: f64,
    sigma_t: f64,
    seed: u64,
) -> Result<Vec<PairConstraint>> {
    if !(sigma_rot_deg >= 0.0 && sigma_t >= 0.0) {
        return Err(Error::Domain("perturbation magnitudes must be nonnegative".into()));
    }
    let mut rng = frame_rng(seed, 4_000_000);
    let mut out = Vec::with_capacity(pairs.len());
    for &(i, j) in pairs {
        // draw noise for every pair so skipping one does not shift the others
        let rel = RigidPose::relative(&gt.poses[i], &gt.poses[j]);
        let noisy = perturb_pose(&rel, sigma_rot_deg, sigma_t, &mut rng);
        let rendered = render_matches(gt, i, j, gt.spec.outlier_rate, seed)?;
        if rendered.matches.is_empty() {
            continue;
        }
        let samples = PairSamples::new(&rendered.matches, gt.frame(i), gt.frame(j))?;
        out.push(PairConstraint::new(samples, noisy)?);
    }
    Ok(out)
}

/// Labels for a constraint built by [`perturb_relative_poses`].
pub fn constraint_labels(gt: &GroundTruth, c: &PairConstraint) -> Vec<bool> {
    c.matches
        .pairs
        .iter()
        .map(|&(a, b)| gt.keypoint_landmarks[c.frame_i][a] == gt.keypoint_landmarks[c.frame_j][b])
        .collect()
}

/// Mean rotation error (degrees) between two trajectories, no alignment.
pub fn mean_rotation_error(a: &[RigidPose], b: &[RigidPose]) -> f64 {
    a.iter().zip(b).map(|(p, q)| rotation_angle_deg(&p.rotation, &q.rotation)).sum::<f64>() / a.len().max(1) as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::backproject;
    use crate::pairwise::{ransac_progressive_grow, RansacConfig, PairState};

    fn small_spec() -> SceneSpec {
        SceneSpec {
            frames: 6,
            k: 8,
            keypoints_per_frame: 40,
            ..SceneSpec::default()
        }
    }

    #[test]
    fn dense_depth_is_the_basis_evaluated_at_the_true_code() {
        let gt = generate_scene(&small_spec()).unwrap();
        for f in 0..gt.frame_count() {
            let d = gt.bases[f].evaluate_dense(&gt.codes[f]).unwrap();
            assert_eq!(d, gt.depths[f]);
            assert!(d.values.iter().all(|v| *v > 0.0));
        }
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_scene(&small_spec()).unwrap();
        let b = generate_scene(&small_spec()).unwrap();
        assert_eq!(a.poses, b.poses);
        assert_eq!(a.depths, b.depths);
        assert_eq!(a.keypoints, b.keypoints);
        assert_eq!(a.bases, b.bases);
    }

    #[test]
    fn sigma_planes_have_unit_variance() {
        let gt = generate_scene(&small_spec()).unwrap();
        for b in &gt.bases {
            for v in b.row_variance().unwrap() {
                assert!((v - 1.0).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn ridge_fit_recovers_rendered_depth() {
        let spec = SceneSpec {
            frames: 1,
            ..small_spec()
        };
        let gt = generate_scene(&spec).unwrap();
        let code = gt.bases[0].ridge_fit(&gt.depths[0], 1e-3).unwrap();
        let fit = gt.bases[0].evaluate_dense(&code).unwrap();
        let n = fit.values.len() as f64;
        let rmse = (fit.values.iter().zip(&gt.depths[0].values).map(|(a, b)| (a - b).powi(2)).sum::<f64>() / n).sqrt();
        assert!(rmse < 0.01, "rmse {rmse}");
        assert!(gt.depth_noise_floor() > 0.01);
    }

    #[test]
    fn trajectory_respects_step_bounds() {
        let spec = SceneSpec {
            frames: 40,
            ..small_spec()
        };
        let gt = generate_scene(&spec).unwrap();
        for w in gt.poses.windows(2) {
            assert!(rotation_angle_deg(&w[0].rotation, &w[1].rotation) <= spec.max_step_rotation_deg + 1e-9);
            assert!((w[0].translation - w[1].translation).norm() <= spec.max_step_translation + 1e-12);
        }
    }

    #[test]
    fn identity_motion_gives_zero_error_matches() {
        let spec = SceneSpec {
            frames: 2,
            max_step_rotation_deg: 0.0,
            max_step_translation: 0.0,
            ..small_spec()
        };
        let gt = generate_scene(&spec).unwrap();
        let pair = render_matches(&gt, 0, 1, 0.0, 0).unwrap();
        assert!(pair.matches.len() > 10);
        let samples = PairSamples::new(&pair.matches, gt.frame(0), gt.frame(1)).unwrap();
        let state = PairState {
            pose: RigidPose::identity(),
            code_i: gt.codes[0].clone(),
            code_j: gt.codes[1].clone(),
        };
        for m in 0..samples.len() {
            assert!(samples.match_error(m, &state).unwrap() < 1e-18);
        }
    }

    #[test]
    fn ground_truth_matches_have_small_alignment_error() {
        let gt = generate_scene(&small_spec()).unwrap();
        let pair = render_matches(&gt, 0, 3, 0.0, 0).unwrap();
        assert!(!pair.matches.is_empty());
        let samples = PairSamples::new(&pair.matches, gt.frame(0), gt.frame(3)).unwrap();
        let state = PairState {
            pose: RigidPose::relative(&gt.poses[0], &gt.poses[3]),
            code_i: gt.codes[0].clone(),
            code_j: gt.codes[3].clone(),
        };
        for m in 0..samples.len() {
            // bilinear interpolation of exact node depths on one plane
            assert!(samples.match_error(m, &state).unwrap() < (2.0 * INTERPOLATION_TOL).powi(2));
        }
    }

    #[test]
    fn keypoints_backproject_to_their_landmarks() {
        let gt = generate_scene(&small_spec()).unwrap();
        for f in 0..gt.frame_count() {
            let sampled = gt.bases[f].sample_at(gt.keypoints[f].pixels()).unwrap();
            for (m, &l) in gt.keypoint_landmarks[f].iter().enumerate() {
                let d = sampled.depth(m, &gt.codes[f].beta);
                let x = backproject(gt.keypoints[f].pixel(m), d, &gt.intrinsics).unwrap();
                let w = gt.poses[f].transform(&x);
                let err = (w - gt.landmarks[l].position).norm();
                assert!(err < 2.0 * INTERPOLATION_TOL, "frame {f} kp {m} err {err} depth {d} surface {}", gt.landmarks[l].surface);
            }
        }
    }

    #[test]
    fn outlier_count_is_exact() {
        let gt = generate_scene(&small_spec()).unwrap();
        let pair = render_matches(&gt, 0, 1, 0.3, 5).unwrap();
        let outliers = pair.labels.iter().filter(|l| !**l).count();
        assert_eq!(outliers, (0.3 * pair.matches.len() as f64).ceil() as usize);
        for (inliers, rate) in [(1, 0.3), (7, 0.1), (100, 0.3), (350, 0.3), (10, 0.0), (9, 0.5)] {
            let o = outlier_count(inliers, rate);
            assert_eq!(o, (rate * (inliers + o) as f64).ceil() as usize);
        }
    }

    #[test]
    fn non_overlapping_frames_have_no_matches() {
        let spec = SceneSpec {
            frames: 2,
            ..small_spec()
        };
        let mut gt = generate_scene(&spec).unwrap();
        // relabel frame 1's landmarks so nothing is shared
        let offset = gt.landmarks.len();
        for l in &mut gt.keypoint_landmarks[1] {
            *l += offset;
        }
        let pair = render_matches(&gt, 0, 1, 0.3, 0).unwrap();
        assert!(pair.matches.is_empty());
    }

    #[test]
    fn zero_noise_pair_recovers_relative_pose() {
        let spec = SceneSpec {
            frames: 3,
            keypoints_per_frame: 150,
            depth_perturbation: 0.0,
            ..small_spec()
        };
        let gt = generate_scene(&spec).unwrap();
        let pair = render_matches(&gt, 0, 2, 0.0, 0).unwrap();
        let cfg = RansacConfig {
            runs: 4,
            ..RansacConfig::default()
        };
        let out = ransac_progressive_grow(&pair.matches, gt.frame(0), gt.frame(2), &cfg).unwrap();
        let truth = RigidPose::relative(&gt.poses[0], &gt.poses[2]);
        assert!(rotation_angle_deg(&out.relative_pose.rotation, &truth.rotation) < 0.05);
        let dt = (out.relative_pose.translation - truth.translation).norm();
        assert!(dt < 1e-3, "translation error {dt}, rot {}, inliers {} of {}", rotation_angle_deg(&out.relative_pose.rotation, &truth.rotation), out.inliers.len(), pair.matches.len());
    }

    #[test]
    fn perturbation_is_deterministic_and_exact_at_zero() {
        let gt = generate_scene(&small_spec()).unwrap();
        let pairs = [(0, 1), (1, 2), (0, 2)];
        let exact = perturb_relative_poses(&gt, &pairs, 0.0, 0.0, 1).unwrap();
        for c in &exact {
            let truth = RigidPose::relative(&gt.poses[c.frame_i], &gt.poses[c.frame_j]);
            assert!(rotation_angle_deg(&c.relative_pose.rotation, &truth.rotation) < 1e-9);
            assert!((c.relative_pose.translation - truth.translation).norm() < 1e-12);
        }
        let a = perturb_relative_poses(&gt, &pairs, 1.0, 0.02, 1).unwrap();
        let b = perturb_relative_poses(&gt, &pairs, 1.0, 0.02, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn infeasible_room_is_reported() {
        let spec = SceneSpec {
            room_size: [2.1, 2.1, 2.1],
            max_retries: 3,
            ..small_spec()
        };
        assert!(matches!(generate_scene(&spec), Err(Error::InfeasibleScene(_))));
    }
}
