//! Synthetic corpus engineered so that no single view suffices.
//!
//! Half the classes are pitch-coded: two low tones (plus a second harmonic)
//! placed on constant-Q bin centres, over a shared noise bed. Their spectral
//! envelope is the same, so MFCCs barely separate them. The other half are
//! timbre-coded: one shared pair of fundamentals, and a narrow high-frequency
//! resonance in the noise bed whose centre identifies the class. The peak map
//! ignores that resonance (it sits well above the tones and is broadband
//! compared to a bin) while MFCCs see it clearly.
//!
//! One clip in five mixes in a class from the other family and carries both
//! labels.

use std::f64::consts::{PI, SQRT_2};
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::manifest::audio_path;
use super::{encode_wav, write_manifest, ClipRecord, LabelVocabulary, Manifest, SampleFormat, Split};
use crate::{Error, Result};

const SR: f64 = 16_000.0;
const TONE_AMP: f64 = 0.12;
const OUTPUT_GAIN: f64 = 0.2;
const MIX_EVERY: usize = 5;
/// Semitones above 40 Hz of the shared timbre-family fundamentals.
const TIMBRE_SEMITONES: [u32; 2] = [2, 11];

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 7,
            n_classes: 8,
            clips_per_class: 60,
            duration_s: 3.0,
        }
    }
}

impl SynthConfig {
    fn validate(&self) -> Result<()> {
        if self.n_classes < 4 || self.n_classes % 2 != 0 {
            return Err(Error::Invalid(format!(
                "n_classes must be even and at least 4, got {}",
                self.n_classes
            )));
        }
        if self.clips_per_class == 0 {
            return Err(Error::Invalid("clips_per_class must be positive".into()));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 600.0) {
            return Err(Error::Invalid(format!("bad clip duration {}", self.duration_s)));
        }
        Ok(())
    }

    fn family_size(&self) -> usize {
        self.n_classes / 2
    }

    pub fn class_names(&self) -> Vec<String> {
        let k = self.family_size();
        (0..k)
            .map(|i| format!("pitch_{i}"))
            .chain((0..k).map(|i| format!("timbre_{i}")))
            .collect()
    }

    pub fn clip_id(&self, class: usize, index: usize) -> String {
        format!("c{class}_{index:03}")
    }

    /// Labels of clip `index` of `class`: the class itself, plus a partner
    /// from the other family for every fifth clip.
    pub fn labels(&self, class: usize, index: usize) -> Vec<usize> {
        let k = self.family_size();
        let mut labels = vec![class];
        if index % MIX_EVERY == MIX_EVERY - 1 {
            let partner = (class % k + index / MIX_EVERY) % k;
            labels.push(if class < k { k + partner } else { partner });
        }
        labels.sort_unstable();
        labels
    }

    /// 60/20/20 per class, in clip order.
    pub fn split(&self, index: usize) -> Split {
        let n = self.clips_per_class;
        if index * 5 < n * 3 {
            Split::Train
        } else if index * 5 < n * 4 {
            Split::Val
        } else {
            Split::Test
        }
    }
}

/// Semitone pairs (above 40 Hz) for the pitch family; the first four are
/// hand-picked, the rest enumerate further pairs avoiding the timbre notes.
fn pitch_semitones(k: usize) -> Vec<[u32; 2]> {
    let mut pairs = vec![[1, 6], [3, 10], [5, 8], [8, 12]];
    'outer: for a in 0..24u32 {
        for b in a + 3..=24 {
            if pairs.len() >= k {
                break 'outer;
            }
            if TIMBRE_SEMITONES.contains(&a) || TIMBRE_SEMITONES.contains(&b) || pairs.contains(&[a, b]) {
                continue;
            }
            pairs.push([a, b]);
        }
    }
    pairs.truncate(k);
    pairs
}

fn base_envelope(f: f64) -> f64 {
    1.0 / (1.0 + (f / 3000.0).powi(4)).sqrt()
}

fn resonance_centres(k: usize) -> Vec<f64> {
    (0..k).map(|i| 5000.0 + 2400.0 * i as f64 / (k - 1) as f64).collect()
}

fn semitone_hz(s: u32) -> f64 {
    40.0 * 2f64.powf(s as f64 / 12.0)
}

/// Two-partial tones on each fundamental plus spectrally shaped noise,
/// with a random gain.
fn family_signal(rng: &mut ChaCha8Rng, n: usize, fundamentals: &[f64], envelope: &dyn Fn(f64) -> f64) -> Vec<f64> {
    let detune = 1.0 + rng.gen_range(-0.01..0.01);
    let mut x = vec![0.0; n];
    for &f0 in fundamentals {
        for (h, a) in [(1.0, 1.0), (2.0, 0.5)] {
            let w = 2.0 * PI * h * f0 * detune / SR;
            let phase = rng.gen_range(0.0..2.0 * PI);
            for (i, v) in x.iter_mut().enumerate() {
                *v += TONE_AMP * a * (w * i as f64 + phase).sin();
            }
        }
    }
    let mut spec: Vec<Complex<f64>> = (0..n)
        .map(|_| Complex::new(rng.sample::<f64, _>(StandardNormal), 0.0))
        .collect();
    let mut planner = FftPlanner::new();
    planner.plan_fft_forward(n).process(&mut spec);
    for (k, c) in spec.iter_mut().enumerate() {
        let bin = k.min(n - k) as f64;
        *c *= envelope(bin * SR / n as f64);
    }
    planner.plan_fft_inverse(n).process(&mut spec);
    let gain = rng.gen_range(0.25..1.0);
    x.iter_mut()
        .zip(&spec)
        .for_each(|(v, c)| *v = (*v + c.re / n as f64) * gain);
    x
}

/// Samples (16 kHz mono) of one clip. Each clip has its own RNG stream so
/// clips can be regenerated independently.
pub fn synth_clip(cfg: &SynthConfig, class: usize, index: usize) -> Result<Vec<f64>> {
    cfg.validate()?;
    if class >= cfg.n_classes || index >= cfg.clips_per_class {
        return Err(Error::Invalid(format!("no clip {index} of class {class}")));
    }
    let k = cfg.family_size();
    let n = (cfg.duration_s * SR).round().max(1.0) as usize;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream((class * cfg.clips_per_class + index) as u64);

    let pitch = pitch_semitones(k);
    let centres = resonance_centres(k);
    let timbre_f0: Vec<f64> = TIMBRE_SEMITONES.iter().map(|&s| semitone_hz(s)).collect();
    let render = |c: usize, rng: &mut ChaCha8Rng| {
        if c < k {
            let f0: Vec<f64> = pitch[c].iter().map(|&s| semitone_hz(s)).collect();
            family_signal(rng, n, &f0, &base_envelope)
        } else {
            let centre = centres[c - k];
            let env =
                move |f: f64| (base_envelope(f).powi(2) + 4.0 * (-0.5 * ((f - centre) / 200.0).powi(2)).exp()).sqrt();
            family_signal(rng, n, &timbre_f0, &env)
        }
    };
    let labels = cfg.labels(class, index);
    let mut x = render(labels[0], &mut rng);
    if let Some(&second) = labels.get(1) {
        let y = render(second, &mut rng);
        x.iter_mut().zip(&y).for_each(|(a, b)| *a = (*a + b) / SQRT_2);
    }
    x.iter_mut().for_each(|v| *v = (*v * OUTPUT_GAIN).clamp(-1.0, 1.0));
    Ok(x)
}

/// Writes `audio/*.wav` (16-bit PCM), `manifest.csv` and `vocab.txt` under
/// `dir` and returns the manifest as loaded from those paths.
pub fn generate_synthetic_corpus(dir: &Path, cfg: &SynthConfig) -> Result<Manifest> {
    cfg.validate()?;
    let audio = dir.join("audio");
    fs::create_dir_all(&audio).map_err(Error::io(&audio))?;
    let manifest_path = dir.join("manifest.csv");
    let vocab = LabelVocabulary::new(cfg.class_names())?;
    let mut records = Vec::new();
    for class in 0..cfg.n_classes {
        for index in 0..cfg.clips_per_class {
            let id = cfg.clip_id(class, index);
            let samples = synth_clip(cfg, class, index)?;
            let path = audio_path(&manifest_path, &id);
            let bytes = encode_wav(&[samples], SR as u32, SampleFormat::I16);
            fs::write(&path, bytes).map_err(Error::io(&path))?;
            records.push(ClipRecord {
                clip_id: id,
                labels: cfg.labels(class, index),
                split: cfg.split(index),
                path,
            });
        }
    }
    vocab.save(&dir.join("vocab.txt"))?;
    let manifest = Manifest { vocab, records };
    write_manifest(&manifest_path, &manifest)?;
    Ok(manifest)
}
