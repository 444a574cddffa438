//! Checkpoint layout: magic `IRNLM1`, `u32` header length, a JSON header
//! (model config, meta, and the name and shape of each tensor in order),
//! then each tensor's values as `f32` little-endian.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, ModelMeta, Parameters, Tensor};
use crate::error::{Error, Result};
use crate::io::{push_f32s, read_f32s, MAGIC};

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    meta: ModelMeta,
    tensors: Vec<TensorEntry>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

pub fn save_checkpoint(path: impl AsRef<Path>, params: &Parameters) -> Result<()> {
    let path = path.as_ref();
    let tensors = params.tensors();
    let header = Header {
        config: params.config.clone(),
        meta: params.meta.clone(),
        tensors: tensors
            .iter()
            .map(|(name, t)| TensorEntry {
                name: name.clone(),
                shape: t.shape.clone(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&header).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    let mut buf = Vec::with_capacity(10 + json.len() + 4 * params.n_params());
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(json.len() as u32).to_le_bytes());
    buf.extend_from_slice(&json);
    for (_, t) in &tensors {
        push_f32s(&mut buf, &t.data);
    }
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Parameters> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Format {
        path: path.to_path_buf(),
        msg,
    };
    if bytes.len() < 10 || &bytes[..6] != MAGIC {
        return Err(bad("missing IRNLM1 header".into()));
    }
    let hlen = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
    let body_start = 10 + hlen;
    if bytes.len() < body_start {
        return Err(bad("truncated header".into()));
    }
    let header: Header = serde_json::from_slice(&bytes[10..body_start]).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    header.config.validate()?;
    let mut named = HashMap::new();
    let mut offset = body_start;
    for entry in header.tensors {
        let n: usize = entry.shape.iter().product();
        let end = offset + 4 * n;
        if end > bytes.len() {
            return Err(bad(format!("truncated tensor {}", entry.name)));
        }
        named.insert(
            entry.name,
            Tensor {
                shape: entry.shape,
                data: read_f32s(&bytes[offset..end]),
            },
        );
        offset = end;
    }
    if offset != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
    }
    Parameters::from_tensors(header.config, header.meta, named)
}

/// `step,loss` rows, steps counted from 1.
pub fn write_loss_csv(path: impl AsRef<Path>, losses: &[f64]) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("step,loss\n");
    for (i, l) in losses.iter().enumerate() {
        out.push_str(&format!("{},{}\n", i + 1, l));
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::super::{forward, PositionalMode};
    use super::*;

    #[test]
    fn round_trip_preserves_outputs_to_f32_precision() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = ModelConfig {
            max_seq: 16,
            ..ModelConfig::toy(12, PositionalMode::RelativeBias)
        };
        let mut p = Parameters::init(&cfg).unwrap();
        p.meta.context_k = Some(5);
        p.meta.stream = Some("integral".into());
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let q = load_checkpoint(&path).unwrap();
        assert_eq!(q.config, p.config);
        assert_eq!(q.meta, p.meta);
        for ((na, a), (nb, b)) in p.tensors().into_iter().zip(q.tensors()) {
            assert_eq!(na, nb);
            for (x, y) in a.data.iter().zip(&b.data) {
                assert_eq!(*x as f32, *y as f32);
            }
        }
        let ids = [0, 4, 7, 11, 2];
        let (a, b) = (forward(&p, &ids).unwrap(), forward(&q, &ids).unwrap());
        for (x, y) in a.logits.iter().zip(&b.logits) {
            assert!((x - y).abs() < 1e-4);
        }
    }

    #[test]
    fn corrupt_checkpoints_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = Parameters::init(&ModelConfig::toy(6, PositionalMode::None)).unwrap();
        let path = dir.path().join("m.ckpt");
        save_checkpoint(&path, &p).unwrap();
        let mut bytes = fs::read(&path).unwrap();
        bytes.truncate(bytes.len() - 3);
        fs::write(&path, &bytes).unwrap();
        assert!(load_checkpoint(&path).is_err());
        fs::write(&path, b"nope").unwrap();
        assert!(load_checkpoint(&path).is_err());
    }
}
