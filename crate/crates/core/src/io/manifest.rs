use std::fmt::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::error::{FormatError, Result};
use crate::geometry::Intrinsics;
use crate::pipeline::SceneFrame;

/// One `frames.txt` line: `frame_id basis_path keypoint_path fx fy cx cy W H`.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameEntry {
    pub frame_id: usize,
    /// Relative paths resolve against the manifest's directory.
    pub basis: PathBuf,
    pub keypoints: PathBuf,
    pub intrinsics: Intrinsics,
}

/// Frame list in reconstruction order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Manifest {
    pub frames: Vec<FrameEntry>,
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> FormatError {
    FormatError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn encode_manifest(manifest: &Manifest) -> String {
    let mut out = String::from("# frame_id basis keypoints fx fy cx cy width height\n");
    for f in &manifest.frames {
        let k = &f.intrinsics;
        writeln!(
            out,
            "{} {} {} {} {} {} {} {} {}",
            f.frame_id,
            f.basis.display(),
            f.keypoints.display(),
            k.fx,
            k.fy,
            k.cx,
            k.cy,
            k.width,
            k.height
        )
        .unwrap();
    }
    out
}

/// Paths may not contain whitespace. Frame ids must be strictly increasing.
pub fn decode_manifest(text: &str, path: &Path) -> Result<Manifest> {
    let mut frames: Vec<FrameEntry> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let fields: Vec<&str> = raw.split_whitespace().collect();
        if fields.is_empty() || fields[0].starts_with('#') {
            continue;
        }
        if fields.len() != 9 {
            return Err(parse_error(path, line, format!("expected 9 fields, found {}", fields.len())).into());
        }
        let frame_id: usize = fields[0]
            .parse()
            .map_err(|_| parse_error(path, line, format!("bad frame id {:?}", fields[0])))?;
        if frames.last().is_some_and(|f| f.frame_id >= frame_id) {
            return Err(FormatError::Range {
                path: path.to_path_buf(),
                location: line.to_string(),
                message: format!("frame id {frame_id} is not increasing"),
            }
            .into());
        }
        let mut floats = [0.0; 4];
        for (slot, token) in floats.iter_mut().zip(&fields[3..7]) {
            *slot = token
                .parse()
                .map_err(|_| parse_error(path, line, format!("cannot parse {token:?}")))?;
        }
        let mut dims = [0usize; 2];
        for (slot, token) in dims.iter_mut().zip(&fields[7..9]) {
            *slot = token
                .parse()
                .map_err(|_| parse_error(path, line, format!("cannot parse {token:?}")))?;
        }
        let intrinsics = Intrinsics::new(floats[0], floats[1], floats[2], floats[3], dims[0], dims[1]).map_err(|e| FormatError::Range {
            path: path.to_path_buf(),
            location: line.to_string(),
            message: e.to_string(),
        })?;
        frames.push(FrameEntry {
            frame_id,
            basis: PathBuf::from(fields[1]),
            keypoints: PathBuf::from(fields[2]),
            intrinsics,
        });
    }
    Ok(Manifest { frames })
}

/// Loads every frame listed in a manifest, concurrently.
pub fn load_scene(manifest_path: &Path) -> Result<(Manifest, Vec<SceneFrame>)> {
    let manifest = super::load_manifest(manifest_path)?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let frames = manifest
        .frames
        .par_iter()
        .map(|entry| {
            let basis_path = dir.join(&entry.basis);
            let basis = super::load_basis(&basis_path)?;
            if basis.frame_width() != entry.intrinsics.width || basis.frame_height() != entry.intrinsics.height {
                return Err(FormatError::Range {
                    path: manifest_path.to_path_buf(),
                    location: format!("frame {}", entry.frame_id),
                    message: format!(
                        "basis is for {}x{} frames but the intrinsics say {}x{}",
                        basis.frame_width(),
                        basis.frame_height(),
                        entry.intrinsics.width,
                        entry.intrinsics.height
                    ),
                }
                .into());
            }
            let keypoints = super::load_keypoints(&dir.join(&entry.keypoints))?;
            Ok(SceneFrame {
                basis,
                keypoints,
                intrinsics: entry.intrinsics,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((manifest, frames))
}
