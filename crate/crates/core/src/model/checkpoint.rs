//! `ckpt-v1` container: a text header of `key=value` lines followed by named
//! tensors stored as row-major little-endian `f64`.
//!
//! ```text
//! ckpt-v1
//! n_layers=2
//! ...
//! tensors=<count>
//! tensor <name> <d0>x<d1>...
//! <8 * product(dims) raw bytes>
//! ```
//!
//! Keys and tensors are written in insertion order, so writing a loaded
//! checkpoint reproduces the original bytes.

use std::io::{self, Read, Write};

use thiserror::Error;

const MAGIC: &str = "ckpt-v1";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("not a ckpt-v1 file")]
    BadMagic,
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("missing key `{0}`")]
    MissingKey(String),
    #[error("missing tensor `{0}`")]
    MissingTensor(String),
    #[error("tensor `{name}` has shape {found:?}, expected {expected:?}")]
    ShapeMismatch { name: String, expected: Vec<usize>, found: Vec<usize> },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub meta: Vec<(String, String)>,
    pub tensors: Vec<NamedTensor>,
}

impl Checkpoint {
    pub fn set(&mut self, key: &str, value: impl ToString) {
        let value = value.to_string();
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.meta.iter().find(|(k, _)| k == key).map(|(_, v)| v.as_str())
    }

    pub fn require<T: std::str::FromStr>(&self, key: &str) -> Result<T, CheckpointError> {
        let raw = self.get(key).ok_or_else(|| CheckpointError::MissingKey(key.into()))?;
        raw.parse().map_err(|_| CheckpointError::Malformed(format!("bad value for `{key}`: {raw:?}")))
    }

    pub fn push_tensor(&mut self, name: &str, shape: &[usize], data: &[f64]) {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.tensors.push(NamedTensor { name: name.into(), shape: shape.to_vec(), data: data.to_vec() });
    }

    pub fn tensor(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn expect_tensor(&self, name: &str, shape: &[usize]) -> Result<&NamedTensor, CheckpointError> {
        let t = self.tensor(name).ok_or_else(|| CheckpointError::MissingTensor(name.into()))?;
        if t.shape != shape {
            return Err(CheckpointError::ShapeMismatch {
                name: name.into(),
                expected: shape.to_vec(),
                found: t.shape.clone(),
            });
        }
        Ok(t)
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<(), CheckpointError> {
        writeln!(w, "{MAGIC}")?;
        for (k, v) in &self.meta {
            writeln!(w, "{k}={v}")?;
        }
        writeln!(w, "tensors={}", self.tensors.len())?;
        for t in &self.tensors {
            let dims: Vec<String> = t.shape.iter().map(|d| d.to_string()).collect();
            writeln!(w, "tensor {} {}", t.name, dims.join("x"))?;
            let mut buf = Vec::with_capacity(t.data.len() * 8);
            for v in &t.data {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self, CheckpointError> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, CheckpointError> {
        let mut cursor = 0usize;
        let next_line = |cursor: &mut usize| -> Result<String, CheckpointError> {
            let rest = &bytes[*cursor..];
            let end = rest
                .iter()
                .position(|&b| b == b'\n')
                .ok_or_else(|| CheckpointError::Malformed("unexpected end of header".into()))?;
            let line = std::str::from_utf8(&rest[..end])
                .map_err(|_| CheckpointError::Malformed("header is not UTF-8".into()))?
                .to_string();
            *cursor += end + 1;
            Ok(line)
        };

        if next_line(&mut cursor).map_err(|_| CheckpointError::BadMagic)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let mut ckpt = Checkpoint::default();
        let count: usize = loop {
            let line = next_line(&mut cursor)?;
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| CheckpointError::Malformed(format!("expected key=value, got {line:?}")))?;
            if k == "tensors" {
                break v.parse().map_err(|_| CheckpointError::Malformed("bad tensor count".into()))?;
            }
            ckpt.meta.push((k.to_string(), v.to_string()));
        };
        for _ in 0..count {
            let line = next_line(&mut cursor)?;
            let mut parts = line.split(' ');
            let (Some("tensor"), Some(name), Some(dims), None) = (parts.next(), parts.next(), parts.next(), parts.next())
            else {
                return Err(CheckpointError::Malformed(format!("bad tensor header {line:?}")));
            };
            let shape: Vec<usize> = dims
                .split('x')
                .map(|d| d.parse().map_err(|_| CheckpointError::Malformed(format!("bad shape {dims:?}"))))
                .collect::<Result<_, _>>()?;
            let n: usize = shape.iter().product();
            let len = n * 8;
            if bytes.len() < cursor + len {
                return Err(CheckpointError::Malformed(format!("tensor `{name}` truncated")));
            }
            let data = bytes[cursor..cursor + len]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                .collect();
            cursor += len;
            ckpt.tensors.push(NamedTensor { name: name.to_string(), shape, data });
        }
        if cursor != bytes.len() {
            return Err(CheckpointError::Malformed("trailing bytes".into()));
        }
        Ok(ckpt)
    }
}
