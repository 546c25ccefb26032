//! "PFV1" feature container shared by feature and embedding caches.
//!
//! Layout: magic `PFV1`, then records of
//! `u32 id_len, id bytes, u32 chunk_index, u8 view tag, u32 rows, u32 cols,
//! rows·cols f32`, all little-endian, until end of file.

use std::collections::HashMap;
use std::fs;
use std::path::Path;

use crate::autodiff::Tensor;
use crate::{Error, Result, View};

const MAGIC: &[u8; 4] = b"PFV1";

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureRecord {
    pub clip_id: String,
    pub chunk_index: u32,
    pub view: View,
    pub rows: u32,
    pub cols: u32,
    pub data: Vec<f32>,
}

impl FeatureRecord {
    pub fn from_tensor(clip_id: &str, chunk_index: usize, view: View, t: &Tensor<f64>) -> Self {
        let (rows, cols) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            s => (s[0], s[1..].iter().product()),
        };
        Self {
            clip_id: clip_id.to_string(),
            chunk_index: chunk_index as u32,
            view,
            rows: rows as u32,
            cols: cols as u32,
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn to_tensor(&self) -> Tensor<f32> {
        Tensor::new(vec![self.rows as usize, self.cols as usize], self.data.clone())
            .expect("record payload matches dims")
    }
}

pub fn encode_records(records: &[FeatureRecord]) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for r in records {
        out.extend_from_slice(&(r.clip_id.len() as u32).to_le_bytes());
        out.extend_from_slice(r.clip_id.as_bytes());
        out.extend_from_slice(&r.chunk_index.to_le_bytes());
        out.push(r.view.tag());
        out.extend_from_slice(&r.rows.to_le_bytes());
        out.extend_from_slice(&r.cols.to_le_bytes());
        for v in &r.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

/// Writes via a temporary sibling and rename, so a failed run never leaves a
/// partial cache behind.
pub fn write_feature_cache(path: &Path, records: &[FeatureRecord]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, encode_records(records)).map_err(Error::io(&tmp))?;
    fs::rename(&tmp, path).map_err(Error::io(path))
}

pub fn decode_records(bytes: &[u8]) -> std::result::Result<Vec<FeatureRecord>, String> {
    if bytes.get(..4) != Some(MAGIC.as_slice()) {
        return Err("missing PFV1 magic".into());
    }
    let mut pos = 4;
    let take = |n: usize, pos: &mut usize| -> std::result::Result<&[u8], String> {
        let s = bytes
            .get(*pos..*pos + n)
            .ok_or_else(|| format!("truncated record at byte {}", *pos))?;
        *pos += n;
        Ok(s)
    };
    let u32_at = |s: &[u8]| u32::from_le_bytes([s[0], s[1], s[2], s[3]]);
    let mut out = Vec::new();
    while pos < bytes.len() {
        let start = pos;
        let id_len = u32_at(take(4, &mut pos)?) as usize;
        let clip_id = String::from_utf8(take(id_len, &mut pos)?.to_vec())
            .map_err(|_| format!("non-UTF-8 clip id at byte {start}"))?;
        let chunk_index = u32_at(take(4, &mut pos)?);
        let tag = take(1, &mut pos)?[0];
        let view = View::from_tag(tag).ok_or_else(|| format!("unknown view tag {tag} at byte {start}"))?;
        let rows = u32_at(take(4, &mut pos)?);
        let cols = u32_at(take(4, &mut pos)?);
        let n = rows as usize * cols as usize;
        let data = take(n * 4, &mut pos)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        out.push(FeatureRecord {
            clip_id,
            chunk_index,
            view,
            rows,
            cols,
            data,
        });
    }
    Ok(out)
}

pub fn read_feature_cache(path: &Path) -> Result<Vec<FeatureRecord>> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::Missing(format!("missing feature cache {}", path.display()))
        } else {
            Error::Io {
                path: path.into(),
                source: e,
            }
        }
    })?;
    decode_records(&bytes).map_err(|msg| Error::Corrupt { path: path.into(), msg })
}

/// Records indexed by `(clip_id, chunk_index, view)`.
#[derive(Clone, Debug, Default)]
pub struct FeatureCache {
    records: Vec<FeatureRecord>,
    index: HashMap<(String, u32, View), usize>,
}

impl FeatureCache {
    pub fn new(records: Vec<FeatureRecord>) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| ((r.clip_id.clone(), r.chunk_index, r.view), i))
            .collect();
        Self { records, index }
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(Self::new(read_feature_cache(path)?))
    }

    pub fn get(&self, clip_id: &str, chunk_index: usize, view: View) -> Option<&FeatureRecord> {
        self.index
            .get(&(clip_id.to_string(), chunk_index as u32, view))
            .map(|&i| &self.records[i])
    }

    /// Sorted chunk indices stored for a clip under `view`.
    pub fn chunk_indices(&self, clip_id: &str, view: View) -> Vec<u32> {
        let mut out: Vec<u32> = self
            .records
            .iter()
            .filter(|r| r.view == view && r.clip_id == clip_id)
            .map(|r| r.chunk_index)
            .collect();
        out.sort_unstable();
        out
    }

    pub fn records(&self) -> &[FeatureRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }
}
