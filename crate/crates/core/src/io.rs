//! On-disk formats shared by several modules.
//!
//! * Dense matrices: magic `IRNLM1`, `u32` rows, `u32` cols, then `f32`
//!   little-endian values in row-major order.
//! * Raw volumes (BOLD runs, voxel maps): bare `f32` little-endian values,
//!   described by a JSON sidecar next to the binary file.

use std::fs;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 6] = b"IRNLM1";

/// `foo/bar.bin` -> `foo/bar.json`.
pub fn sidecar_path(path: &Path) -> PathBuf {
    path.with_extension("json")
}

pub fn write_matrix(path: impl AsRef<Path>, rows: usize, cols: usize, row_major: &[f64]) -> Result<()> {
    let path = path.as_ref();
    if rows * cols != row_major.len() {
        return Err(Error::shape(format!(
            "{rows}x{cols} matrix given {} values",
            row_major.len()
        )));
    }
    let rows32 = u32::try_from(rows).map_err(|_| Error::invalid("too many rows"))?;
    let cols32 = u32::try_from(cols).map_err(|_| Error::invalid("too many columns"))?;
    let mut buf = Vec::with_capacity(14 + 4 * row_major.len());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&rows32.to_le_bytes());
    buf.extend_from_slice(&cols32.to_le_bytes());
    push_f32s(&mut buf, row_major);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

/// Returns `(rows, cols, row-major values)`.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, usize, Vec<f64>)> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 14 || &bytes[..6] != MAGIC {
        return Err(bad("missing IRNLM1 header"));
    }
    let rows = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let cols = u32::from_le_bytes(bytes[10..14].try_into().unwrap()) as usize;
    let body = &bytes[14..];
    if body.len() != 4 * rows * cols {
        return Err(bad(&format!(
            "expected {} values, found {} bytes",
            rows * cols,
            body.len()
        )));
    }
    Ok((rows, cols, read_f32s(body)))
}

pub fn write_f32_raw(path: impl AsRef<Path>, values: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut buf = Vec::with_capacity(4 * values.len());
    push_f32s(&mut buf, values);
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn read_f32_raw(path: impl AsRef<Path>, expected_len: usize) -> Result<Vec<f64>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != 4 * expected_len {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected {expected_len} f32 values, found {} bytes", bytes.len()),
        });
    }
    Ok(read_f32s(&bytes))
}

pub(crate) fn push_f32s(buf: &mut Vec<u8>, values: &[f64]) {
    for &v in values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
}

pub(crate) fn read_f32s(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect()
}

pub fn write_json<T: Serialize>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn read_json<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<T> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// Writes `time_s,amplitude` rows.
pub fn write_events_csv(path: impl AsRef<Path>, events: &[(f64, f64)]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("time_s,amplitude\n");
    for (t, a) in events {
        out.push_str(&format!("{t},{a}\n"));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_events_csv(path: impl AsRef<Path>) -> Result<Vec<(f64, f64)>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 && line.starts_with("time_s") || line.trim().is_empty() {
            continue;
        }
        let parse = |s: Option<&str>| s.and_then(|v| v.trim().parse::<f64>().ok());
        let mut parts = line.split(',');
        match (parse(parts.next()), parse(parts.next())) {
            (Some(t), Some(a)) => out.push((t, a)),
            _ => {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    line: i + 1,
                    msg: "expected time_s,amplitude".into(),
                })
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matrix_round_trip_and_header() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, 2, 3, &[1.0, 2.0, 3.0, 4.0, 5.0, -6.5]).unwrap();
        let bytes = fs::read(&p).unwrap();
        assert_eq!(&bytes[..6], b"IRNLM1");
        assert_eq!(bytes.len(), 14 + 24);
        let (r, c, v) = read_matrix(&p).unwrap();
        assert_eq!((r, c), (2, 3));
        assert_eq!(v, [1.0, 2.0, 3.0, 4.0, 5.0, -6.5]);
        assert!(write_matrix(&p, 2, 2, &[1.0]).is_err());
    }

    #[test]
    fn truncated_matrix_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("m.bin");
        write_matrix(&p, 2, 2, &[1.0; 4]).unwrap();
        let mut bytes = fs::read(&p).unwrap();
        bytes.pop();
        fs::write(&p, bytes).unwrap();
        assert!(matches!(read_matrix(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn events_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("e.csv");
        write_events_csv(&p, &[(0.5, 1.0), (2.25, -0.5)]).unwrap();
        assert_eq!(read_events_csv(&p).unwrap(), [(0.5, 1.0), (2.25, -0.5)]);
    }
}
