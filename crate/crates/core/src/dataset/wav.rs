//! Minimal RIFF/WAVE codec: integer PCM (8/16/24-bit) and 32-bit float.

use std::path::Path;

use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SampleFormat {
    U8,
    I16,
    I24,
    F32,
}

impl SampleFormat {
    fn bytes(self) -> usize {
        match self {
            SampleFormat::U8 => 1,
            SampleFormat::I16 => 2,
            SampleFormat::I24 => 3,
            SampleFormat::F32 => 4,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct WavData {
    pub sample_rate: u32,
    pub format: SampleFormat,
    /// One vector per channel, samples scaled to [-1, 1].
    pub channels: Vec<Vec<f64>>,
}

impl WavData {
    pub fn to_mono(&self) -> Vec<f64> {
        let n = self.channels.first().map_or(0, Vec::len);
        let k = self.channels.len() as f64;
        (0..n)
            .map(|i| self.channels.iter().map(|c| c[i]).sum::<f64>() / k)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
#[error("byte {offset}: {msg}")]
pub struct WavError {
    pub offset: u64,
    pub msg: String,
}

fn err<T>(offset: usize, msg: impl Into<String>) -> Result<T, WavError> {
    Err(WavError {
        offset: offset as u64,
        msg: msg.into(),
    })
}

fn u16_at(b: &[u8], at: usize) -> Result<u16, WavError> {
    match b.get(at..at + 2) {
        Some(s) => Ok(u16::from_le_bytes([s[0], s[1]])),
        None => err(b.len(), "truncated header"),
    }
}

fn u32_at(b: &[u8], at: usize) -> Result<u32, WavError> {
    match b.get(at..at + 4) {
        Some(s) => Ok(u32::from_le_bytes([s[0], s[1], s[2], s[3]])),
        None => err(b.len(), "truncated header"),
    }
}

pub fn decode_wav(b: &[u8]) -> Result<WavData, WavError> {
    if b.len() < 12 {
        return err(b.len(), "truncated RIFF header");
    }
    if &b[0..4] != b"RIFF" {
        return err(0, "missing RIFF magic");
    }
    if &b[8..12] != b"WAVE" {
        return err(8, "missing WAVE form type");
    }
    let mut pos = 12;
    let mut fmt: Option<(SampleFormat, usize, u32)> = None;
    loop {
        if pos + 8 > b.len() {
            return err(pos, "no data chunk before end of file");
        }
        let id = &b[pos..pos + 4];
        let size = u32_at(b, pos + 4)? as usize;
        let body = pos + 8;
        if id == b"fmt " {
            if size < 16 || body + size > b.len() {
                return err(body, "truncated fmt chunk");
            }
            let mut tag = u16_at(b, body)?;
            let channels = u16_at(b, body + 2)? as usize;
            let rate = u32_at(b, body + 4)?;
            let bits = u16_at(b, body + 14)?;
            if tag == 0xFFFE {
                if size < 40 {
                    return err(body, "truncated extensible fmt chunk");
                }
                tag = u16_at(b, body + 24)?;
            }
            if channels == 0 {
                return err(body + 2, "zero channels");
            }
            if rate == 0 {
                return err(body + 4, "zero sample rate");
            }
            let f = match (tag, bits) {
                (1, 8) => SampleFormat::U8,
                (1, 16) => SampleFormat::I16,
                (1, 24) => SampleFormat::I24,
                (3, 32) => SampleFormat::F32,
                _ => {
                    return err(
                        body,
                        format!("unsupported encoding: format tag {tag}, {bits} bits per sample"),
                    )
                }
            };
            fmt = Some((f, channels, rate));
        } else if id == b"data" {
            let Some((format, n_ch, rate)) = fmt else {
                return err(pos, "data chunk before fmt chunk");
            };
            let frame = format.bytes() * n_ch;
            if body + size > b.len() {
                return err(b.len(), format!("data chunk truncated: {size} bytes declared"));
            }
            if size % frame != 0 {
                return err(body + size - size % frame, "partial sample frame at end of data");
            }
            let n = size / frame;
            let mut channels = vec![Vec::with_capacity(n); n_ch];
            for i in 0..n {
                for (c, ch) in channels.iter_mut().enumerate() {
                    let at = body + i * frame + c * format.bytes();
                    let s = &b[at..at + format.bytes()];
                    let v = match format {
                        SampleFormat::U8 => (s[0] as f64 - 128.0) / 128.0,
                        SampleFormat::I16 => i16::from_le_bytes([s[0], s[1]]) as f64 / 32768.0,
                        SampleFormat::I24 => {
                            let raw = i32::from_le_bytes([0, s[0], s[1], s[2]]) >> 8;
                            raw as f64 / 8_388_608.0
                        }
                        SampleFormat::F32 => {
                            let v = f32::from_le_bytes([s[0], s[1], s[2], s[3]]) as f64;
                            if !v.is_finite() {
                                return err(at, "non-finite float sample");
                            }
                            v.clamp(-1.0, 1.0)
                        }
                    };
                    ch.push(v);
                }
            }
            return Ok(WavData {
                sample_rate: rate,
                format,
                channels,
            });
        }
        // Chunks are word-aligned.
        pos = body + size + (size & 1);
    }
}

pub fn read_wav(path: &Path) -> Result<WavData> {
    let bytes = std::fs::read(path).map_err(Error::io(path))?;
    decode_wav(&bytes).map_err(|e| Error::Wav {
        path: path.into(),
        offset: e.offset,
        msg: e.msg,
    })
}

/// Encodes interleaved channels. Samples are clamped to [-1, 1] and
/// integer formats round to nearest.
pub fn encode_wav(channels: &[Vec<f64>], sample_rate: u32, format: SampleFormat) -> Vec<u8> {
    let n_ch = channels.len().max(1);
    let n = channels.first().map_or(0, Vec::len);
    let bps = format.bytes();
    let data_len = n * n_ch * bps;
    let mut out = Vec::with_capacity(44 + data_len);
    out.extend_from_slice(b"RIFF");
    out.extend_from_slice(&((36 + data_len) as u32).to_le_bytes());
    out.extend_from_slice(b"WAVEfmt ");
    out.extend_from_slice(&16u32.to_le_bytes());
    let tag: u16 = if format == SampleFormat::F32 { 3 } else { 1 };
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(n_ch as u16).to_le_bytes());
    out.extend_from_slice(&sample_rate.to_le_bytes());
    out.extend_from_slice(&(sample_rate * (n_ch * bps) as u32).to_le_bytes());
    out.extend_from_slice(&((n_ch * bps) as u16).to_le_bytes());
    out.extend_from_slice(&((bps * 8) as u16).to_le_bytes());
    out.extend_from_slice(b"data");
    out.extend_from_slice(&(data_len as u32).to_le_bytes());
    for i in 0..n {
        for ch in channels {
            let v = ch[i].clamp(-1.0, 1.0);
            match format {
                SampleFormat::U8 => out.push((v * 128.0 + 128.0).round().min(255.0) as u8),
                SampleFormat::I16 => out.extend_from_slice(&((v * 32767.0).round() as i16).to_le_bytes()),
                SampleFormat::I24 => {
                    let q = (v * 8_388_607.0).round() as i32;
                    out.extend_from_slice(&q.to_le_bytes()[..3]);
                }
                SampleFormat::F32 => out.extend_from_slice(&(v as f32).to_le_bytes()),
            }
        }
    }
    out
}
