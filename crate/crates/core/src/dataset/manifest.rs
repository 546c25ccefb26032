//! `clip_id,labels,split` CSV manifests with semicolon-separated labels.
//! Audio for clip `x` lives at `<manifest dir>/audio/x.wav`.

use std::collections::HashSet;
use std::path::{Path, PathBuf};

use super::{ClipRecord, LabelVocabulary, Split};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Manifest {
    pub vocab: LabelVocabulary,
    pub records: Vec<ClipRecord>,
}

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ClipRecord> {
        self.records.iter().filter(|r| r.split == split).collect()
    }

    pub fn n_classes(&self) -> usize {
        self.vocab.len()
    }
}

pub fn audio_path(manifest_path: &Path, clip_id: &str) -> PathBuf {
    manifest_path
        .parent()
        .unwrap_or(Path::new("."))
        .join("audio")
        .join(format!("{clip_id}.wav"))
}

pub fn load_manifest(path: &Path, vocab_path: &Path) -> Result<Manifest> {
    let vocab = LabelVocabulary::load(vocab_path)?;
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(false)
        .flexible(true)
        .from_path(path)
        .map_err(|e| Error::Io {
            path: path.into(),
            source: std::io::Error::other(e),
        })?;
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let line = i + 1;
        let bad = |msg: String| Error::Manifest {
            path: path.into(),
            line,
            msg,
        };
        let row = row.map_err(|e| bad(e.to_string()))?;
        if i == 0 && row.get(0) == Some("clip_id") {
            continue;
        }
        if row.len() != 3 {
            return Err(bad(format!("expected 3 columns, got {}", row.len())));
        }
        let clip_id = row[0].trim().to_string();
        if clip_id.is_empty() || clip_id.contains(['/', '\\']) {
            return Err(bad(format!("invalid clip_id {clip_id:?}")));
        }
        if !seen.insert(clip_id.clone()) {
            return Err(bad(format!("duplicate clip_id {clip_id:?}")));
        }
        let mut labels = Vec::new();
        for name in row[1].split(';').map(str::trim).filter(|s| !s.is_empty()) {
            let idx = vocab
                .index_of(name)
                .ok_or_else(|| bad(format!("unknown label {name:?} in row for {clip_id}")))?;
            labels.push(idx);
        }
        if labels.is_empty() {
            return Err(bad(format!("clip {clip_id} has no labels")));
        }
        labels.sort_unstable();
        labels.dedup();
        let split = Split::parse(row[2].trim()).ok_or_else(|| bad(format!("unknown split {:?}", &row[2])))?;
        records.push(ClipRecord {
            path: audio_path(path, &clip_id),
            clip_id,
            labels,
            split,
        });
    }
    Ok(Manifest { vocab, records })
}

pub fn write_manifest(path: &Path, manifest: &Manifest) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    })?;
    let io = |e: csv::Error| Error::Io {
        path: path.into(),
        source: std::io::Error::other(e),
    };
    w.write_record(["clip_id", "labels", "split"]).map_err(io)?;
    for r in &manifest.records {
        let labels: Vec<&str> = r.labels.iter().map(|&i| manifest.vocab.names()[i].as_str()).collect();
        w.write_record([r.clip_id.as_str(), &labels.join(";"), r.split.name()])
            .map_err(io)?;
    }
    w.flush().map_err(Error::io(path))
}
