use std::fmt::Write;
use std::path::Path;
use std::str::FromStr;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};

use crate::depth_basis::DepthCode;
use crate::error::{Error, FormatError, Result};
use crate::geometry::{Pixel, RigidPose};
use crate::matching::{KeypointSet, MatchSet};

pub const KEYPOINTS_MAGIC: &str = "RSFMK1";
pub const MATCHES_MAGIC: &str = "RSFMM1";
pub const CODES_MAGIC: &str = "RSFMC1";
/// Allowed deviation of a stored quaternion's norm from one.
pub const QUATERNION_TOLERANCE: f64 = 1e-6;

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    FormatError::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
    .into()
}

fn range_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    FormatError::Range {
        path: path.to_path_buf(),
        location: line.to_string(),
        message: message.into(),
    }
    .into()
}

fn parse_token<T: FromStr>(token: &str, path: &Path, line: usize) -> Result<T> {
    token
        .parse()
        .map_err(|_| parse_error(path, line, format!("cannot parse {token:?}")))
}

fn parse_float(token: &str, path: &Path, line: usize) -> Result<f64> {
    let v: f64 = parse_token(token, path, line)?;
    if !v.is_finite() {
        return Err(FormatError::NonFinite {
            path: path.to_path_buf(),
            location: line.to_string(),
        }
        .into());
    }
    Ok(v)
}

/// Non-blank lines with their 1-based line numbers.
fn content_lines(text: &str) -> impl Iterator<Item = (usize, Vec<&str>)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.split_whitespace().collect::<Vec<_>>()))
        .filter(|(_, f)| !f.is_empty())
}

/// Header `MAGIC a b` followed by exactly `a` records.
struct Body<'a> {
    counts: Vec<usize>,
    records: Vec<(usize, Vec<&'a str>)>,
}

fn split_body<'a>(text: &'a str, magic: &'static str, header_counts: usize, path: &Path) -> Result<Body<'a>> {
    let mut lines = content_lines(text);
    let Some((line, header)) = lines.next() else {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: String::new(),
        }
        .into());
    };
    if header[0] != magic {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: header[0].to_string(),
        }
        .into());
    }
    if header.len() != header_counts + 1 {
        return Err(parse_error(path, line, format!("header needs {header_counts} counts")));
    }
    let counts = header[1..]
        .iter()
        .map(|t| parse_token::<usize>(t, path, line))
        .collect::<Result<Vec<_>>>()?;
    let records: Vec<_> = lines.collect();
    if records.len() < counts[0] {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            unit: "records",
            expected: counts[0],
            actual: records.len(),
        }
        .into());
    }
    if let Some((extra, _)) = records.get(counts[0]) {
        return Err(parse_error(path, *extra, format!("more than the {} declared records", counts[0])));
    }
    Ok(Body { counts, records })
}

fn check_fields(fields: &[&str], expected: usize, path: &Path, line: usize) -> Result<()> {
    if fields.len() != expected {
        return Err(parse_error(path, line, format!("expected {expected} fields, found {}", fields.len())));
    }
    Ok(())
}

pub fn encode_keypoints(keypoints: &KeypointSet) -> String {
    let mut out = format!("{KEYPOINTS_MAGIC} {} {}\n", keypoints.len(), keypoints.dim());
    for i in 0..keypoints.len() {
        let p = keypoints.pixel(i);
        write!(out, "{} {}", p.u, p.v).unwrap();
        for d in keypoints.descriptor(i) {
            write!(out, " {d}").unwrap();
        }
        out.push('\n');
    }
    out
}

/// Descriptors are re-normalized to unit length on load.
pub fn decode_keypoints(text: &str, path: &Path) -> Result<KeypointSet> {
    let body = split_body(text, KEYPOINTS_MAGIC, 2, path)?;
    let dim = body.counts[1];
    let mut pixels = Vec::with_capacity(body.counts[0]);
    let mut descriptors = Vec::with_capacity(body.counts[0] * dim);
    for (line, fields) in &body.records {
        check_fields(fields, dim + 2, path, *line)?;
        let values = fields
            .iter()
            .map(|t| parse_float(t, path, *line))
            .collect::<Result<Vec<_>>>()?;
        if values[0] < 0.0 || values[1] < 0.0 {
            return Err(range_error(path, *line, "negative pixel coordinate"));
        }
        pixels.push(Pixel::new(values[0], values[1]));
        descriptors.extend_from_slice(&values[2..]);
    }
    KeypointSet::new(pixels, dim, descriptors).map_err(|e| range_error(path, 0, e.to_string()))
}

pub fn encode_matches(matches: &MatchSet) -> String {
    let mut out = format!("{MATCHES_MAGIC} {}\n", matches.len());
    for (a, b) in &matches.pairs {
        writeln!(out, "{a} {b}").unwrap();
    }
    out
}

/// Frame ids are not stored; the result has both set to zero.
pub fn decode_matches(text: &str, path: &Path, bounds: Option<(usize, usize)>) -> Result<MatchSet> {
    let body = split_body(text, MATCHES_MAGIC, 1, path)?;
    let mut pairs = Vec::with_capacity(body.counts[0]);
    let mut seen_i = std::collections::HashSet::new();
    let mut seen_j = std::collections::HashSet::new();
    for (line, fields) in &body.records {
        check_fields(fields, 2, path, *line)?;
        let a: usize = parse_token(fields[0], path, *line)?;
        let b: usize = parse_token(fields[1], path, *line)?;
        if let Some((ni, nj)) = bounds {
            if a >= ni || b >= nj {
                return Err(range_error(path, *line, format!("match ({a}, {b}) outside {ni}x{nj} keypoints")));
            }
        }
        if !seen_i.insert(a) || !seen_j.insert(b) {
            return Err(range_error(path, *line, format!("keypoint reused by match ({a}, {b})")));
        }
        pairs.push((a, b));
    }
    Ok(MatchSet::new(0, 0, pairs))
}

pub fn encode_codes(codes: &[DepthCode]) -> Result<String> {
    let k = codes.first().map_or(0, DepthCode::len);
    if let Some(c) = codes.iter().find(|c| c.len() != k) {
        return Err(Error::DimensionMismatch {
            what: "code length",
            expected: k,
            actual: c.len(),
        });
    }
    let mut out = format!("{CODES_MAGIC} {} {k}\n", codes.len());
    for c in codes {
        let row: Vec<String> = c.beta.iter().map(|b| b.to_string()).collect();
        writeln!(out, "{}", row.join(" ")).unwrap();
    }
    Ok(out)
}

pub fn decode_codes(text: &str, path: &Path) -> Result<Vec<DepthCode>> {
    let body = split_body(text, CODES_MAGIC, 2, path)?;
    let k = body.counts[1];
    if k == 0 && body.counts[0] > 0 {
        return Err(range_error(path, 1, "codes must have at least one coefficient"));
    }
    body.records
        .iter()
        .map(|(line, fields)| {
            check_fields(fields, k, path, *line)?;
            let beta = fields
                .iter()
                .map(|t| parse_float(t, path, *line))
                .collect::<Result<Vec<_>>>()?;
            Ok(DepthCode { beta })
        })
        .collect()
}

/// One trajectory line: camera-to-world pose with a scalar-first quaternion.
/// The quaternion is kept exactly as stored so that saving reproduces the
/// file.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryEntry {
    pub frame_id: usize,
    pub translation: Vector3<f64>,
    /// `(w, x, y, z)`.
    pub quaternion: [f64; 4],
}

impl TrajectoryEntry {
    pub fn from_pose(frame_id: usize, pose: &RigidPose) -> Self {
        let q = UnitQuaternion::from_matrix(&pose.rotation);
        TrajectoryEntry {
            frame_id,
            translation: pose.translation,
            quaternion: [q.w, q.i, q.j, q.k],
        }
    }

    pub fn pose(&self) -> RigidPose {
        let [w, x, y, z] = self.quaternion;
        let q = UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z));
        RigidPose {
            rotation: *q.to_rotation_matrix().matrix(),
            translation: self.translation,
        }
    }
}

pub fn encode_trajectory(entries: &[TrajectoryEntry]) -> String {
    let mut out = String::new();
    for e in entries {
        let [w, x, y, z] = e.quaternion;
        let t = e.translation;
        writeln!(out, "{} {} {} {} {w} {x} {y} {z}", e.frame_id, t.x, t.y, t.z).unwrap();
    }
    out
}

pub fn decode_trajectory(text: &str, path: &Path) -> Result<Vec<TrajectoryEntry>> {
    content_lines(text)
        .filter(|(_, f)| !f[0].starts_with('#'))
        .map(|(line, fields)| {
            check_fields(&fields, 8, path, line)?;
            let frame_id = parse_token(fields[0], path, line)?;
            let v = fields[1..]
                .iter()
                .map(|t| parse_float(t, path, line))
                .collect::<Result<Vec<_>>>()?;
            let quaternion = [v[3], v[4], v[5], v[6]];
            let norm = quaternion.iter().map(|q| q * q).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > QUATERNION_TOLERANCE {
                return Err(range_error(path, line, format!("quaternion norm {norm} is not 1")));
            }
            Ok(TrajectoryEntry {
                frame_id,
                translation: Vector3::new(v[0], v[1], v[2]),
                quaternion,
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use std::path::PathBuf;

    use nalgebra::Rotation3;

    use super::*;
    use crate::geometry::rotation_angle_deg;

    fn path() -> PathBuf {
        PathBuf::from("test.txt")
    }

    #[test]
    fn keypoint_layout_and_renormalization() {
        let text = "RSFMK1 2 2\n1.5 2.5 3 4\n0 0 0 2\n";
        let k = decode_keypoints(text, &path()).unwrap();
        assert_eq!(k.len(), 2);
        assert_eq!(k.pixel(0), Pixel::new(1.5, 2.5));
        assert_eq!(k.descriptor(0), &[0.6, 0.8]);
        assert_eq!(k.descriptor(1), &[0.0, 1.0]);
        assert_eq!(encode_keypoints(&k), "RSFMK1 2 2\n1.5 2.5 0.6 0.8\n0 0 0 1\n");
    }

    #[test]
    fn keypoint_errors_carry_line_numbers() {
        let cases = [
            ("RSFMK1 2 2\n1 2 3 4\n", "truncated"),
            ("RSFMK1 1 2\n1 2 3\n", ":2: parse"),
            ("RSFMK1 1 2\n1 2 3 x\n", ":2: parse"),
            ("RSFMK1 1 2\n1 2 NaN 1\n", ":2: non-finite"),
            ("RSFMK1 1 2\n1 -2 1 1\n", ":2: value out of range"),
            ("RSFMK1 1 2\n1 2 1 1\n3 4 1 1\n", ":3: parse"),
            ("RSFMX1 1 2\n", "bad magic"),
            ("", "bad magic"),
        ];
        for (text, needle) in cases {
            let msg = decode_keypoints(text, &path()).unwrap_err().to_string();
            assert!(msg.contains(needle), "{text:?} gave {msg}");
        }
    }

    #[test]
    fn matches_check_bounds_and_reuse() {
        let text = "RSFMM1 2\n0 1\n2 0\n";
        let m = decode_matches(text, &path(), Some((3, 2))).unwrap();
        assert_eq!(m.pairs, vec![(0, 1), (2, 0)]);
        assert_eq!(encode_matches(&m), text);
        assert!(decode_matches(text, &path(), Some((2, 2))).unwrap_err().to_string().contains(":3:"));
        assert!(decode_matches("RSFMM1 2\n0 1\n0 0\n", &path(), None).is_err());
        assert!(decode_matches("RSFMM1 1\n-1 0\n", &path(), None).is_err());
    }

    #[test]
    fn codes_round_trip_exactly() {
        let codes = vec![
            DepthCode { beta: vec![0.1, -1e-300, 123456.789] },
            DepthCode { beta: vec![f64::MIN_POSITIVE, 0.0, -0.3] },
        ];
        let text = encode_codes(&codes).unwrap();
        assert!(text.starts_with("RSFMC1 2 3\n"));
        assert_eq!(decode_codes(&text, &path()).unwrap(), codes);
        assert!(decode_codes("RSFMC1 1 2\n1 inf\n", &path()).is_err());
        assert!(decode_codes("RSFMC1 1 2\n1\n", &path()).is_err());
    }

    #[test]
    fn trajectory_round_trip_and_norm_check() {
        let pose = RigidPose {
            rotation: *Rotation3::from_euler_angles(0.3, -0.2, 1.1).matrix(),
            translation: Vector3::new(1.0, -2.0, 0.25),
        };
        let e = TrajectoryEntry::from_pose(7, &pose);
        let text = encode_trajectory(&[e]);
        let back = decode_trajectory(&text, &path()).unwrap();
        assert_eq!(back, vec![e]);
        assert!(rotation_angle_deg(&back[0].pose().rotation, &pose.rotation) < 1e-9);

        let bad = "0 0 0 0 0.9 0 0 0\n";
        let msg = decode_trajectory(bad, &path()).unwrap_err().to_string();
        assert!(msg.contains("test.txt:1") && msg.contains("quaternion norm"), "{msg}");
        assert!(decode_trajectory("# id tx ty tz qw qx qy qz\n\n0 0 0 0 1 0 0 0\n", &path()).unwrap().len() == 1);
        assert!(decode_trajectory("0 0 0 0 1 0 0\n", &path()).is_err());
    }
}
