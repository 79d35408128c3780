//! On-disk formats: binary depth bases and depth maps, ASCII keypoints,
//! matches, codes and trajectories, the per-scene frame manifest, and PLY
//! export.
//!
//! Every format has an in-memory `encode_*`/`decode_*` pair and a
//! path-based `save_*`/`load_*` pair. Decoders take the origin path only to
//! label error messages.

mod binary;
mod manifest;
mod ply;
mod text;

use std::fs;
use std::path::Path;

pub use binary::{decode_basis, decode_depths, encode_basis, encode_depths, BASIS_HEADER_LEN, BASIS_MAGIC, DEPTH_MAGIC};
pub use manifest::{decode_manifest, encode_manifest, load_scene, FrameEntry, Manifest};
pub use ply::{export_ply, write_ply, PlyVertex, MID_GRAY};
pub use text::{
    decode_codes, decode_keypoints, decode_matches, decode_trajectory, encode_codes, encode_keypoints, encode_matches,
    encode_trajectory, TrajectoryEntry, CODES_MAGIC, KEYPOINTS_MAGIC, MATCHES_MAGIC, QUATERNION_TOLERANCE,
};

use crate::depth_basis::{DepthBasis, DepthCode, DepthMap};
use crate::error::{FormatError, Result};
use crate::geometry::RigidPose;
use crate::matching::{KeypointSet, MatchSet};

pub(crate) fn read_bytes(path: &Path) -> Result<Vec<u8>> {
    Ok(fs::read(path).map_err(|e| FormatError::io(path, e))?)
}

pub(crate) fn read_text(path: &Path) -> Result<String> {
    Ok(fs::read_to_string(path).map_err(|e| FormatError::io(path, e))?)
}

pub(crate) fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| FormatError::io(dir, e))?;
    }
    Ok(fs::write(path, contents).map_err(|e| FormatError::io(path, e))?)
}

pub fn load_basis(path: &Path) -> Result<DepthBasis> {
    decode_basis(&read_bytes(path)?, path)
}

pub fn save_basis(path: &Path, basis: &DepthBasis) -> Result<()> {
    write_file(path, encode_basis(basis))
}

pub fn load_depths(path: &Path) -> Result<Vec<DepthMap>> {
    decode_depths(&read_bytes(path)?, path)
}

pub fn save_depths(path: &Path, depths: &[DepthMap]) -> Result<()> {
    write_file(path, encode_depths(depths)?)
}

pub fn load_keypoints(path: &Path) -> Result<KeypointSet> {
    decode_keypoints(&read_text(path)?, path)
}

pub fn save_keypoints(path: &Path, keypoints: &KeypointSet) -> Result<()> {
    write_file(path, encode_keypoints(keypoints))
}

/// Loads matches, checking indices against the keypoint counts when given.
pub fn load_matches(path: &Path, bounds: Option<(usize, usize)>) -> Result<MatchSet> {
    decode_matches(&read_text(path)?, path, bounds)
}

pub fn save_matches(path: &Path, matches: &MatchSet) -> Result<()> {
    write_file(path, encode_matches(matches))
}

pub fn load_codes(path: &Path) -> Result<Vec<DepthCode>> {
    decode_codes(&read_text(path)?, path)
}

pub fn save_codes(path: &Path, codes: &[DepthCode]) -> Result<()> {
    write_file(path, encode_codes(codes)?)
}

pub fn load_trajectory(path: &Path) -> Result<Vec<TrajectoryEntry>> {
    decode_trajectory(&read_text(path)?, path)
}

/// Poses in file order.
pub fn load_poses(path: &Path) -> Result<Vec<RigidPose>> {
    Ok(load_trajectory(path)?.iter().map(TrajectoryEntry::pose).collect())
}

pub fn save_trajectory(path: &Path, entries: &[TrajectoryEntry]) -> Result<()> {
    write_file(path, encode_trajectory(entries))
}

/// Saves poses numbered from zero.
pub fn save_poses(path: &Path, poses: &[RigidPose]) -> Result<()> {
    let entries: Vec<_> = poses.iter().enumerate().map(|(i, p)| TrajectoryEntry::from_pose(i, p)).collect();
    save_trajectory(path, &entries)
}

pub fn load_manifest(path: &Path) -> Result<Manifest> {
    decode_manifest(&read_text(path)?, path)
}

pub fn save_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    write_file(path, encode_manifest(manifest))
}
