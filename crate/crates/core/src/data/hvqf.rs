//! HVQF tensor framing.
//!
//! ```text
//! "HVQF" | u32 version | u32 rows (T) | u32 cols (F) | rows·cols values, row-major
//! ```
//! All integers and values little-endian. Version 1 stores 32-bit floats
//! (feature files); version 2 stores 64-bit floats (checkpoint tensors).
//! Feature files may instead be plain comma-separated text, one frame per line.

use std::path::Path;

use ndarray::Array2;

use super::VideoFeatures;
use crate::error::{HvqError, Result};
use crate::numerics::SeqTensor;

pub const FEATURE_MAGIC: &[u8; 4] = b"HVQF";
pub const FEATURE_VERSION_F32: u32 = 1;
pub const FEATURE_VERSION_F64: u32 = 2;

const HEADER_LEN: usize = 16;

/// Appends one framed tensor to `out`.
pub fn write_tensor_block(out: &mut Vec<u8>, data: &Array2<f64>, version: u32) {
    out.extend_from_slice(FEATURE_MAGIC);
    out.extend_from_slice(&version.to_le_bytes());
    out.extend_from_slice(&(data.nrows() as u32).to_le_bytes());
    out.extend_from_slice(&(data.ncols() as u32).to_le_bytes());
    for v in data.iter() {
        if version == FEATURE_VERSION_F64 {
            out.extend_from_slice(&v.to_le_bytes());
        } else {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
}

fn format_err(path: &str, offset: usize, reason: impl Into<String>) -> HvqError {
    HvqError::Format {
        path: path.to_string(),
        offset: offset as u64,
        reason: reason.into(),
    }
}

fn read_u32(bytes: &[u8], at: usize, path: &str) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or_else(|| format_err(path, bytes.len(), "truncated header"))
}

/// Parses one framed tensor starting at `offset`; returns it with the offset
/// just past its payload.
pub fn read_tensor_block(bytes: &[u8], offset: usize, path: &str) -> Result<(Array2<f64>, usize)> {
    match bytes.get(offset..offset + 4) {
        Some(m) if m == FEATURE_MAGIC => {}
        Some(_) => return Err(format_err(path, offset, "bad magic, expected HVQF")),
        None => return Err(format_err(path, bytes.len(), "truncated header")),
    }
    let version = read_u32(bytes, offset + 4, path)?;
    let rows = read_u32(bytes, offset + 8, path)? as usize;
    let cols = read_u32(bytes, offset + 12, path)? as usize;
    let width = match version {
        FEATURE_VERSION_F32 => 4,
        FEATURE_VERSION_F64 => 8,
        v => return Err(format_err(path, offset + 4, format!("unsupported HVQF version {v}"))),
    };
    let start = offset + HEADER_LEN;
    let need = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(width))
        .ok_or_else(|| format_err(path, offset + 8, "tensor size overflows"))?;
    let end = start + need;
    if bytes.len() < end {
        return Err(format_err(
            path,
            bytes.len(),
            format!("truncated payload: {rows}x{cols} needs {need} bytes, {} present", bytes.len() - start),
        ));
    }
    let payload = &bytes[start..end];
    let values: Vec<f64> = if width == 8 {
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
    } else {
        payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64).collect()
    };
    let data = Array2::from_shape_vec((rows, cols), values).expect("payload length checked");
    Ok((data, end))
}

fn parse_csv(text: &str, path: &str) -> Result<Array2<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::new();
    let mut offset = 0usize;
    for line in text.split_inclusive('\n') {
        let trimmed = line.trim();
        if !trimmed.is_empty() {
            let row = trimmed
                .split(',')
                .map(|tok| tok.trim().parse::<f64>())
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(path, offset, format!("line {}: {e}", rows.len() + 1)))?;
            if let Some(first) = rows.first() {
                if first.len() != row.len() {
                    return Err(format_err(
                        path,
                        offset,
                        format!("line {} has {} values, expected {}", rows.len() + 1, row.len(), first.len()),
                    ));
                }
            }
            rows.push(row);
        }
        offset += line.len();
    }
    let cols = rows.first().map_or(0, Vec::len);
    let t = rows.len();
    Array2::from_shape_vec((t, cols), rows.into_iter().flatten().collect())
        .map_err(|e| format_err(path, 0, e.to_string()))
}

/// Loads a feature file (binary HVQF or comma-separated text). The video id
/// is the file stem.
pub fn load_features(path: &Path) -> Result<VideoFeatures> {
    let bytes = std::fs::read(path).map_err(|e| HvqError::io(path, e))?;
    let name = path.display().to_string();
    let data = if bytes.starts_with(FEATURE_MAGIC) {
        let (data, end) = read_tensor_block(&bytes, 0, &name)?;
        if end != bytes.len() {
            return Err(format_err(&name, end, "trailing bytes after tensor payload"));
        }
        data
    } else {
        let text = std::str::from_utf8(&bytes).map_err(|e| format_err(&name, e.valid_up_to(), "neither HVQF nor UTF-8 text"))?;
        parse_csv(text, &name)?
    };
    let frames = SeqTensor::new(data).map_err(|e| HvqError::Data(format!("{name}: {e}")))?;
    let id = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Ok(VideoFeatures::new(id, frames))
}

/// Writes features as an HVQF version-1 (32-bit) file.
pub fn save_features(path: &Path, frames: &SeqTensor) -> Result<()> {
    let mut out = Vec::with_capacity(HEADER_LEN + frames.frames() * frames.channels() * 4);
    write_tensor_block(&mut out, frames.as_array(), FEATURE_VERSION_F32);
    super::write_atomic(path, &out)
}
