//! "PFCK" checkpoint container.
//!
//! Layout (little-endian): magic `PFCK`, `u32` format version, `u32` length
//! and bytes of a JSON config blob, then tensors as `u32` name length, name
//! bytes, `u32` rank, `u32` dims, f32 data; finally a CRC32 of everything
//! before it.

use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"PFCK";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: serde_json::Value,
    pub tensors: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    pub fn tensor(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = MAGIC.to_vec();
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        let blob = serde_json::to_vec(&self.config).expect("JSON value serializes");
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(&blob);
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn decode(bytes: &[u8]) -> std::result::Result<Self, String> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err("missing PFCK magic".into());
        }
        let body_len = bytes.len() - 4;
        let stored = u32::from_le_bytes(bytes[body_len..].try_into().unwrap());
        if crc32fast::hash(&bytes[..body_len]) != stored {
            return Err("CRC mismatch".into());
        }
        let body = &bytes[..body_len];
        let mut pos = 4;
        let u32_next = |pos: &mut usize| -> std::result::Result<u32, String> {
            let s = body
                .get(*pos..*pos + 4)
                .ok_or_else(|| format!("truncated at byte {pos}"))?;
            *pos += 4;
            Ok(u32::from_le_bytes(s.try_into().unwrap()))
        };
        let version = u32_next(&mut pos)?;
        if version != CHECKPOINT_VERSION {
            return Err(format!("unsupported checkpoint version {version}"));
        }
        let blob_len = u32_next(&mut pos)? as usize;
        let blob = body.get(pos..pos + blob_len).ok_or("truncated config blob")?;
        let config = serde_json::from_slice(blob).map_err(|e| format!("config blob: {e}"))?;
        pos += blob_len;
        let mut tensors = Vec::new();
        while pos < body.len() {
            let name_len = u32_next(&mut pos)? as usize;
            let name = body
                .get(pos..pos + name_len)
                .and_then(|s| std::str::from_utf8(s).ok())
                .ok_or_else(|| format!("bad tensor name at byte {pos}"))?
                .to_string();
            pos += name_len;
            let rank = u32_next(&mut pos)? as usize;
            let shape = (0..rank)
                .map(|_| u32_next(&mut pos).map(|d| d as usize))
                .collect::<std::result::Result<Vec<_>, _>>()?;
            let n: usize = shape.iter().product();
            let data = body
                .get(pos..pos + 4 * n)
                .ok_or_else(|| format!("tensor {name} truncated"))?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            pos += 4 * n;
            tensors.push((name, Tensor::new(shape, data).map_err(|e| e.to_string())?));
        }
        Ok(Self { config, tensors })
    }

    /// Atomic write (temporary sibling, then rename).
    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir).map_err(Error::io(dir))?;
        }
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, self.encode()).map_err(Error::io(&tmp))?;
        fs::rename(&tmp, path).map_err(Error::io(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::Missing(format!("missing checkpoint {}", path.display())),
            _ => Error::Io {
                path: path.into(),
                source: e,
            },
        })?;
        Self::decode(&bytes).map_err(|msg| Error::Corrupt { path: path.into(), msg })
    }
}
