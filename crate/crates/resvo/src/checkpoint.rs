//! Versioned binary parameter container.
//!
//! Layout: magic string, format version, a TOML metadata block describing
//! the run, then named tensors with shape and row-major f64 payloads, all
//! little-endian.

use crate::autodiff::Shape;
use crate::params::Tensor;
use std::fs;
use std::io::{self, Read};
use std::path::Path;
use thiserror::Error;

const MAGIC: &[u8; 8] = b"RESVOCK1";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] io::Error),
    #[error("not a checkpoint file (bad magic)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint is truncated or corrupt: {0}")]
    Corrupt(String),
    #[error("tensor {name} has shape {got_rows}x{got_cols}, expected {want_rows}x{want_cols}")]
    ShapeMismatch {
        name: String,
        got_rows: usize,
        got_cols: usize,
        want_rows: usize,
        want_cols: usize,
    },
    #[error("checkpoint is missing tensor {0}")]
    MissingTensor(String),
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    /// TOML block describing the run (environment, training dims, baseline).
    pub meta: String,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn find(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Copies payloads into an existing parameter set by prefixed name,
    /// enforcing shapes.
    pub fn load_into(
        &self,
        prefix: &str,
        params: &mut crate::params::ParamSet,
    ) -> Result<(), CheckpointError> {
        for tensor in &mut params.tensors {
            let full = format!("{prefix}/{}", tensor.name);
            let stored =
                self.find(&full).ok_or_else(|| CheckpointError::MissingTensor(full.clone()))?;
            if stored.shape != tensor.shape {
                return Err(CheckpointError::ShapeMismatch {
                    name: full,
                    got_rows: stored.shape.rows,
                    got_cols: stored.shape.cols,
                    want_rows: tensor.shape.rows,
                    want_cols: tensor.shape.cols,
                });
            }
            tensor.data.copy_from_slice(&stored.data);
        }
        Ok(())
    }
}

/// Appends every tensor of a parameter set under `prefix/name`.
pub fn push_params(out: &mut Vec<Tensor>, prefix: &str, params: &crate::params::ParamSet) {
    for t in &params.tensors {
        out.push(Tensor {
            name: format!("{prefix}/{}", t.name),
            shape: t.shape,
            data: t.data.clone(),
        });
    }
}

pub fn encode(ckpt: &Checkpoint) -> Vec<u8> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    let meta = ckpt.meta.as_bytes();
    buf.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    buf.extend_from_slice(meta);
    buf.extend_from_slice(&(ckpt.tensors.len() as u32).to_le_bytes());
    for t in &ckpt.tensors {
        let name = t.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(t.shape.rows as u64).to_le_bytes());
        buf.extend_from_slice(&(t.shape.cols as u64).to_le_bytes());
        for v in &t.data {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        if self.pos + n > self.data.len() {
            return Err(CheckpointError::Corrupt(format!(
                "wanted {n} bytes at offset {}, file has {}",
                self.pos,
                self.data.len()
            )));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(data: &[u8]) -> Result<Checkpoint, CheckpointError> {
    let mut cur = Cursor { data, pos: 0 };
    if cur.take(8)? != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let meta_len = cur.u32()? as usize;
    let meta = String::from_utf8(cur.take(meta_len)?.to_vec())
        .map_err(|e| CheckpointError::Corrupt(format!("meta is not utf-8: {e}")))?;
    let count = cur.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| CheckpointError::Corrupt(format!("tensor name is not utf-8: {e}")))?;
        let rows = cur.u64()? as usize;
        let cols = cur.u64()? as usize;
        let n = rows
            .checked_mul(cols)
            .ok_or_else(|| CheckpointError::Corrupt("tensor shape overflow".into()))?;
        let bytes = cur.take(8 * n)?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor { name, shape: Shape::new(rows, cols), data });
    }
    Ok(Checkpoint { meta, tensors })
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<(), CheckpointError> {
    let bytes = encode(ckpt);
    crate::metrics::write_atomic(path, &bytes)?;
    Ok(())
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint, CheckpointError> {
    let mut data = Vec::new();
    fs::File::open(path)?.read_to_end(&mut data)?;
    decode(&data)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamSet;

    fn sample() -> Checkpoint {
        let mut params = ParamSet::new();
        params.push_zeros("w1", 2, 3);
        params.tensors[0].data = vec![1.0, -2.5, 0.0, 3.25, 1e-9, 7.0];
        let mut tensors = Vec::new();
        push_params(&mut tensors, "policy/0", &params);
        Checkpoint { meta: "kind = \"test\"\n".into(), tensors }
    }

    #[test]
    fn round_trip_is_exact() {
        let ckpt = sample();
        let decoded = decode(&encode(&ckpt)).unwrap();
        assert_eq!(decoded.meta, ckpt.meta);
        assert_eq!(decoded.tensors.len(), 1);
        assert_eq!(decoded.tensors[0].name, "policy/0/w1");
        assert_eq!(decoded.tensors[0].data, ckpt.tensors[0].data);
    }

    #[test]
    fn bad_magic_and_truncation_are_rejected() {
        let bytes = encode(&sample());
        assert!(matches!(decode(b"NOTMAGIC"), Err(CheckpointError::BadMagic)));
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(CheckpointError::Corrupt(_))));
    }

    #[test]
    fn load_into_checks_shapes() {
        let ckpt = sample();
        let mut good = ParamSet::new();
        good.push_zeros("w1", 2, 3);
        ckpt.load_into("policy/0", &mut good).unwrap();
        assert_eq!(good.tensors[0].data[3], 3.25);

        let mut bad_shape = ParamSet::new();
        bad_shape.push_zeros("w1", 3, 2);
        assert!(matches!(
            ckpt.load_into("policy/0", &mut bad_shape),
            Err(CheckpointError::ShapeMismatch { .. })
        ));

        let mut missing = ParamSet::new();
        missing.push_zeros("w9", 2, 3);
        assert!(matches!(
            ckpt.load_into("policy/0", &mut missing),
            Err(CheckpointError::MissingTensor(_))
        ));
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        write_checkpoint(&path, &sample()).unwrap();
        let loaded = read_checkpoint(&path).unwrap();
        assert_eq!(loaded.tensors[0].data, sample().tensors[0].data);
    }
}
