use std::path::Path;

use crate::depth_basis::{DepthBasis, DepthMap};
use crate::error::{Error, FormatError, Result};

pub const BASIS_MAGIC: &str = "RSFMB1";
pub const DEPTH_MAGIC: &str = "RSFMD1";
/// Magic plus five `u32` dimensions.
pub const BASIS_HEADER_LEN: usize = 6 + 5 * 4;
const DEPTH_HEADER_LEN: usize = 6 + 3 * 4;

fn check_magic(bytes: &[u8], magic: &'static str, path: &Path) -> Result<()> {
    let found = &bytes[..bytes.len().min(magic.len())];
    if found != magic.as_bytes() {
        return Err(FormatError::BadMagic {
            path: path.to_path_buf(),
            expected: magic,
            found: String::from_utf8_lossy(found).into_owned(),
        }
        .into());
    }
    Ok(())
}

fn check_len(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() != expected {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            unit: "bytes",
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(())
}

fn header_u32s(bytes: &[u8], count: usize, magic_len: usize, path: &Path) -> Result<Vec<usize>> {
    check_len_at_least(bytes, magic_len + 4 * count, path)?;
    Ok((0..count)
        .map(|i| {
            let at = magic_len + 4 * i;
            u32::from_le_bytes(bytes[at..at + 4].try_into().unwrap()) as usize
        })
        .collect())
}

fn check_len_at_least(bytes: &[u8], expected: usize, path: &Path) -> Result<()> {
    if bytes.len() < expected {
        return Err(FormatError::Truncated {
            path: path.to_path_buf(),
            unit: "bytes",
            expected,
            actual: bytes.len(),
        }
        .into());
    }
    Ok(())
}

/// Byte count of an `f32` payload with the given dimensions.
fn payload_len(dims: &[usize], path: &Path) -> Result<usize> {
    dims.iter()
        .try_fold(4usize, |acc, d| acc.checked_mul(*d))
        .filter(|n| *n < usize::MAX / 2)
        .ok_or_else(|| {
            FormatError::Range {
                path: path.to_path_buf(),
                location: "header".into(),
                message: format!("dimensions {dims:?} overflow"),
            }
            .into()
        })
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::Domain(format!("{what} {v} does not fit the file header")))
}

fn push_f32s(out: &mut Vec<u8>, values: &[f64]) {
    for v in values {
        out.extend_from_slice(&(*v as f32).to_le_bytes());
    }
}

/// Reads `count` floats starting at `offset`, rejecting non-finite values
/// with their byte offset.
fn read_f32s(bytes: &[u8], offset: usize, count: usize, path: &Path) -> Result<Vec<f64>> {
    (0..count)
        .map(|i| {
            let at = offset + 4 * i;
            let v = f32::from_le_bytes(bytes[at..at + 4].try_into().unwrap());
            if !v.is_finite() {
                return Err(FormatError::NonFinite {
                    path: path.to_path_buf(),
                    location: format!("byte {at}"),
                }
                .into());
            }
            Ok(v as f64)
        })
        .collect()
}

pub fn encode_basis(basis: &DepthBasis) -> Vec<u8> {
    let area = basis.area();
    let mut out = Vec::with_capacity(BASIS_HEADER_LEN + 4 * area * (basis.k() + 1));
    out.extend_from_slice(BASIS_MAGIC.as_bytes());
    for v in [
        basis.basis_height(),
        basis.basis_width(),
        basis.k(),
        basis.frame_height(),
        basis.frame_width(),
    ] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    push_f32s(&mut out, basis.mu());
    push_f32s(&mut out, basis.sigma());
    out
}

pub fn decode_basis(bytes: &[u8], path: &Path) -> Result<DepthBasis> {
    check_magic(bytes, BASIS_MAGIC, path)?;
    let dims = header_u32s(bytes, 5, BASIS_MAGIC.len(), path)?;
    let (bh, bw, k, fh, fw) = (dims[0], dims[1], dims[2], dims[3], dims[4]);
    if bh == 0 || bw == 0 || k == 0 || fh == 0 || fw == 0 {
        return Err(FormatError::Range {
            path: path.to_path_buf(),
            location: "header".into(),
            message: format!("zero dimension in {bh}x{bw}, K={k}, frame {fh}x{fw}"),
        }
        .into());
    }
    let area = bh * bw;
    let payload = payload_len(&[area, k + 1], path)?;
    check_len(bytes, BASIS_HEADER_LEN + payload, path)?;
    let mu = read_f32s(bytes, BASIS_HEADER_LEN, area, path)?;
    if let Some(i) = mu.iter().position(|m| !(*m > 0.0)) {
        return Err(FormatError::Range {
            path: path.to_path_buf(),
            location: format!("byte {}", BASIS_HEADER_LEN + 4 * i),
            message: format!("mean depth {} is not positive", mu[i]),
        }
        .into());
    }
    let sigma = read_f32s(bytes, BASIS_HEADER_LEN + 4 * area, area * k, path)?;
    DepthBasis::new(bw, bh, fw, fh, mu, sigma).map_err(|e| {
        FormatError::Range {
            path: path.to_path_buf(),
            location: "header".into(),
            message: e.to_string(),
        }
        .into()
    })
}

/// A stack of equally sized depth maps: magic, `u32` count, height, width,
/// then `f32` values map by map, row-major.
pub fn encode_depths(depths: &[DepthMap]) -> Result<Vec<u8>> {
    let (h, w) = depths.first().map_or((0, 0), |d| (d.height, d.width));
    if let Some(d) = depths.iter().find(|d| d.height != h || d.width != w) {
        return Err(Error::DimensionMismatch {
            what: "depth map size",
            expected: h * w,
            actual: d.height * d.width,
        });
    }
    let mut out = Vec::with_capacity(DEPTH_HEADER_LEN + 4 * depths.len() * h * w);
    out.extend_from_slice(DEPTH_MAGIC.as_bytes());
    for v in [depths.len(), h, w] {
        out.extend_from_slice(&to_u32(v, "depth dimension")?.to_le_bytes());
    }
    for d in depths {
        push_f32s(&mut out, &d.values);
    }
    Ok(out)
}

pub fn decode_depths(bytes: &[u8], path: &Path) -> Result<Vec<DepthMap>> {
    check_magic(bytes, DEPTH_MAGIC, path)?;
    let dims = header_u32s(bytes, 3, DEPTH_MAGIC.len(), path)?;
    let (n, h, w) = (dims[0], dims[1], dims[2]);
    let area = h * w;
    let payload = payload_len(&[n, area], path)?;
    check_len(bytes, DEPTH_HEADER_LEN + payload, path)?;
    (0..n)
        .map(|f| {
            let values = read_f32s(bytes, DEPTH_HEADER_LEN + 4 * f * area, area, path)?;
            DepthMap::new(w, h, values)
        })
        .collect()
}
