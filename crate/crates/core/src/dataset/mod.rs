//! Manifests, WAV ingestion, resampling, chunking and the synthetic corpus.

mod manifest;
mod resample;
mod synth;
mod wav;

use std::path::{Path, PathBuf};

pub use manifest::{load_manifest, write_manifest, Manifest};
pub use resample::{resample, Resampler};
pub use synth::{generate_synthetic_corpus, synth_clip, SynthConfig};
pub use wav::{decode_wav, encode_wav, read_wav, SampleFormat, WavData, WavError};

use crate::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;
pub const CHUNK_LEN: usize = 16_000;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabelVocabulary {
    names: Vec<String>,
}

impl LabelVocabulary {
    pub fn new(names: Vec<String>) -> Result<Self> {
        if names.len() < 2 {
            return Err(Error::Invalid(format!(
                "vocabulary needs at least 2 classes, got {}",
                names.len()
            )));
        }
        for (i, n) in names.iter().enumerate() {
            if n.is_empty() || n.contains([',', ';', '\n']) {
                return Err(Error::Invalid(format!("invalid class name {n:?}")));
            }
            if names[..i].contains(n) {
                return Err(Error::Invalid(format!("duplicate class name {n:?}")));
            }
        }
        Ok(Self { names })
    }

    /// One name per line; the line number is the index.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(Error::io(path))?;
        let names: Vec<String> = text.lines().map(|l| l.trim().to_string()).collect();
        if let Some(i) = names.iter().position(String::is_empty) {
            return Err(Error::Manifest {
                path: path.into(),
                line: i + 1,
                msg: "empty class name".into(),
            });
        }
        Self::new(names)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut s = self.names.join("\n");
        s.push('\n');
        std::fs::write(path, s).map_err(Error::io(path))
    }

    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        self.names.is_empty()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub fn parse(s: &str) -> Option<Split> {
        match s {
            "train" => Some(Split::Train),
            "val" => Some(Split::Val),
            "test" => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub clip_id: String,
    /// Sorted, unique vocabulary indices.
    pub labels: Vec<usize>,
    pub split: Split,
    pub path: PathBuf,
}

impl ClipRecord {
    pub fn multi_hot(&self, n_classes: usize) -> MultiHotLabel {
        MultiHotLabel::from_indices(&self.labels, n_classes)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiHotLabel {
    pub bits: Vec<f32>,
}

impl MultiHotLabel {
    pub fn from_indices(indices: &[usize], n_classes: usize) -> Self {
        let mut bits = vec![0.0; n_classes];
        for &i in indices {
            bits[i] = 1.0;
        }
        Self { bits }
    }

    pub fn indices(&self) -> Vec<usize> {
        (0..self.bits.len()).filter(|&i| self.bits[i] == 1.0).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Chunk {
    pub clip_id: String,
    pub chunk_index: usize,
    pub samples: Vec<f64>,
    pub target: MultiHotLabel,
}

/// Reads a clip's WAV file, mixes it to mono and resamples to 16 kHz.
pub fn decode_and_resample(record: &ClipRecord) -> Result<AudioClip> {
    let wav = read_wav(&record.path)?;
    let mono = wav.to_mono();
    let mut samples = resample(&mono, wav.sample_rate, SAMPLE_RATE)?;
    for s in &mut samples {
        *s = s.clamp(-1.0, 1.0);
    }
    Ok(AudioClip {
        samples,
        sample_rate: SAMPLE_RATE,
    })
}

/// Number of chunks a clip of `n` samples yields.
pub fn chunk_count(n: usize) -> usize {
    match n {
        0 => 0,
        n if n < CHUNK_LEN => 1,
        n => n / CHUNK_LEN + usize::from(n % CHUNK_LEN >= CHUNK_LEN / 2),
    }
}

/// Splits into non-overlapping 1 s chunks. A trailing remainder of at least
/// 0.5 s is zero-padded; shorter remainders are dropped, except that a clip
/// shorter than 1 s always yields one padded chunk.
pub fn chunk_clip(clip: &AudioClip, record: &ClipRecord, n_classes: usize) -> Result<Vec<Chunk>> {
    if clip.sample_rate != SAMPLE_RATE {
        return Err(Error::Invalid(format!(
            "{}: chunking expects {SAMPLE_RATE} Hz, got {}",
            record.clip_id, clip.sample_rate
        )));
    }
    if clip.samples.is_empty() {
        return Err(Error::Invalid(format!("{}: empty clip", record.clip_id)));
    }
    let target = record.multi_hot(n_classes);
    Ok((0..chunk_count(clip.samples.len()))
        .map(|k| {
            let start = k * CHUNK_LEN;
            let end = (start + CHUNK_LEN).min(clip.samples.len());
            let mut samples = clip.samples[start..end].to_vec();
            samples.resize(CHUNK_LEN, 0.0);
            Chunk {
                clip_id: record.clip_id.clone(),
                chunk_index: k,
                samples,
                target: target.clone(),
            }
        })
        .collect())
}

/// Decodes and chunks every record, in manifest order.
pub fn load_chunks(records: &[&ClipRecord], n_classes: usize) -> Result<Vec<Chunk>> {
    let mut out = Vec::new();
    for r in records {
        let clip = decode_and_resample(r)?;
        out.extend(chunk_clip(&clip, r, n_classes)?);
    }
    Ok(out)
}
