use std::io::Write;
use std::path::Path;

use crate::depth_basis::{grid_pixel, DepthMap};
use crate::error::{Error, FormatError, Result};
use crate::geometry::{Intrinsics, RigidPose};

pub const MID_GRAY: [u8; 3] = [128, 128, 128];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlyVertex {
    pub position: [f32; 3],
    pub color: [u8; 3],
}

/// Binary little-endian PLY with `x y z` floats and `red green blue` bytes.
pub fn write_ply(mut w: impl Write, vertices: &[PlyVertex]) -> std::io::Result<()> {
    write!(
        w,
        "ply\nformat binary_little_endian 1.0\nelement vertex {}\n\
         property float x\nproperty float y\nproperty float z\n\
         property uchar red\nproperty uchar green\nproperty uchar blue\nend_header\n",
        vertices.len()
    )?;
    let mut body = Vec::with_capacity(vertices.len() * 15);
    for v in vertices {
        for c in v.position {
            body.extend_from_slice(&c.to_le_bytes());
        }
        body.extend_from_slice(&v.color);
    }
    w.write_all(&body)?;
    w.flush()
}

/// Backprojects every `stride`-th pixel of each depth map (row-major over
/// the depth grid) into world space. Colors, when given, are per frame and
/// per depth pixel.
pub fn export_ply(
    path: &Path,
    poses: &[RigidPose],
    depths: &[DepthMap],
    intrinsics: &[Intrinsics],
    colors: Option<&[Vec<[u8; 3]>]>,
    stride: usize,
) -> Result<usize> {
    if stride == 0 {
        return Err(Error::Domain("stride must be positive".into()));
    }
    for (what, len) in [("depth maps", depths.len()), ("intrinsics", intrinsics.len())] {
        if len != poses.len() {
            return Err(Error::DimensionMismatch {
                what,
                expected: poses.len(),
                actual: len,
            });
        }
    }
    if let Some(c) = colors {
        if c.len() != poses.len() || c.iter().zip(depths).any(|(c, d)| c.len() != d.values.len()) {
            return Err(Error::Domain("colors must match the depth maps pixel for pixel".into()));
        }
    }
    let mut vertices = Vec::new();
    for (f, ((pose, depth), k)) in poses.iter().zip(depths).zip(intrinsics).enumerate() {
        for idx in (0..depth.values.len()).step_by(stride) {
            let (r, c) = (idx / depth.width, idx % depth.width);
            let ray = k.ray(grid_pixel(k.width, depth.width, r, c));
            let x = pose.transform(&(ray * depth.values[idx]));
            vertices.push(PlyVertex {
                position: [x.x as f32, x.y as f32, x.z as f32],
                color: colors.map_or(MID_GRAY, |c| c[f][idx]),
            });
        }
    }
    let file = std::fs::File::create(path).map_err(|e| FormatError::io(path, e))?;
    write_ply(std::io::BufWriter::new(file), &vertices).map_err(|e| FormatError::io(path, e))?;
    Ok(vertices.len())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Minimal reader for the exact layout written above.
    fn read_ply(bytes: &[u8]) -> Vec<PlyVertex> {
        let end = b"end_header\n";
        let split = bytes.windows(end.len()).position(|w| w == end).unwrap() + end.len();
        let header = std::str::from_utf8(&bytes[..split]).unwrap();
        assert!(header.starts_with("ply\nformat binary_little_endian 1.0\n"));
        let count: usize = header
            .lines()
            .find_map(|l| l.strip_prefix("element vertex "))
            .unwrap()
            .parse()
            .unwrap();
        let body = &bytes[split..];
        assert_eq!(body.len(), count * 15, "declared count disagrees with body");
        body.chunks(15)
            .map(|c| PlyVertex {
                position: [0, 4, 8].map(|o| f32::from_le_bytes(c[o..o + 4].try_into().unwrap())),
                color: [c[12], c[13], c[14]],
            })
            .collect()
    }

    #[test]
    fn constant_depth_backprojections() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cloud.ply");
        let k = Intrinsics::new(2.0, 2.0, 1.5, 1.5, 4, 4).unwrap();
        let depth = DepthMap::new(4, 4, vec![1.0; 16]).unwrap();
        let n = export_ply(&path, &[RigidPose::identity()], &[depth.clone()], &[k], None, 4).unwrap();
        assert_eq!(n, 4);
        let v = read_ply(&std::fs::read(&path).unwrap());
        // stride 4 keeps column 0 of each row
        for (r, vert) in v.iter().enumerate() {
            let expected = [(0.0 - 1.5) / 2.0, (r as f32 - 1.5) / 2.0, 1.0];
            assert_eq!(vert.position, expected);
            assert_eq!(vert.color, MID_GRAY);
        }
        let one = export_ply(&path, &[RigidPose::identity()], &[depth], &[k], None, 16).unwrap();
        assert_eq!(one, 1);
        assert_eq!(read_ply(&std::fs::read(&path).unwrap()).len(), 1);
    }

    #[test]
    fn colors_and_validation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.ply");
        let k = Intrinsics::new(2.0, 2.0, 0.5, 0.5, 2, 2).unwrap();
        let depth = DepthMap::new(2, 2, vec![2.0; 4]).unwrap();
        let colors = vec![vec![[1, 2, 3], [4, 5, 6], [7, 8, 9], [10, 11, 12]]];
        export_ply(&path, &[RigidPose::identity()], &[depth.clone()], &[k], Some(&colors), 1).unwrap();
        let v = read_ply(&std::fs::read(&path).unwrap());
        assert_eq!(v[3].color, [10, 11, 12]);
        assert!(export_ply(&path, &[RigidPose::identity()], &[depth.clone()], &[k], None, 0).is_err());
        assert!(export_ply(&path, &[RigidPose::identity()], &[], &[k], None, 1).is_err());
        assert!(export_ply(&dir.path().join("missing/x.ply"), &[RigidPose::identity()], &[depth], &[k], None, 1).is_err());
    }
}
