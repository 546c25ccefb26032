mod common;

use std::fs;
use std::path::Path;

use polyview::dataset::{
    chunk_clip, chunk_count, decode_and_resample, decode_wav, encode_wav, generate_synthetic_corpus, load_manifest,
    resample, synth_clip, write_manifest, AudioClip, ClipRecord, LabelVocabulary, Manifest, SampleFormat, Split,
    SynthConfig,
};
use polyview::features::{cqt_log_magnitude, mfcc, peak_map};
use polyview::Error;
use proptest::prelude::*;

fn write(dir: &Path, name: &str, body: &str) -> std::path::PathBuf {
    let p = dir.join(name);
    fs::write(&p, body).unwrap();
    p
}

#[test]
fn manifest_row_resolves_labels() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write(dir.path(), "vocab.txt", "Bark\nDog\nSiren\n");
    let man = write(dir.path(), "m.csv", "clip_id,labels,split\nc1,Bark;Dog,train\n");
    let m = load_manifest(&man, &vocab).unwrap();
    assert_eq!(m.records.len(), 1);
    assert_eq!(m.records[0].labels, vec![0, 1]);
    assert_eq!(m.records[0].split, Split::Train);
    assert_eq!(m.records[0].path, dir.path().join("audio/c1.wav"));
}

#[test]
fn unknown_label_names_the_row() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write(dir.path(), "vocab.txt", "Bark\nDog\nSiren\n");
    let man = write(dir.path(), "m.csv", "c0,Dog,val\nc1,Cat,train\n");
    let err = load_manifest(&man, &vocab).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("unknown label"), "{msg}");
    assert!(msg.contains("line 2") && msg.contains("c1"), "{msg}");
    assert!(err.is_validation());
}

#[test]
fn duplicate_clip_id_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write(dir.path(), "vocab.txt", "a\nb\n");
    let man = write(dir.path(), "m.csv", "x,a,train\nx,b,test\n");
    assert!(load_manifest(&man, &vocab)
        .unwrap_err()
        .to_string()
        .contains("duplicate"));
}

#[test]
fn empty_manifest_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = write(dir.path(), "vocab.txt", "a\nb\n");
    for body in ["", "clip_id,labels,split\n"] {
        let man = write(dir.path(), "m.csv", body);
        assert!(load_manifest(&man, &vocab).unwrap().records.is_empty());
    }
}

#[test]
fn manifest_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let vocab = LabelVocabulary::new(vec!["a".into(), "b".into(), "c d".into()]).unwrap();
    let man_path = dir.path().join("manifest.csv");
    let records = vec![
        ClipRecord {
            clip_id: "one".into(),
            labels: vec![0, 2],
            split: Split::Val,
            path: dir.path().join("audio/one.wav"),
        },
        ClipRecord {
            clip_id: "two".into(),
            labels: vec![1],
            split: Split::Test,
            path: dir.path().join("audio/two.wav"),
        },
    ];
    let m = Manifest {
        vocab: vocab.clone(),
        records,
    };
    write_manifest(&man_path, &m).unwrap();
    vocab.save(&dir.path().join("vocab.txt")).unwrap();
    let back = load_manifest(&man_path, &dir.path().join("vocab.txt")).unwrap();
    assert_eq!(back, m);
}

#[test]
fn wav_formats_round_trip() {
    let x: Vec<f64> = (0..200).map(|i| ((i as f64) * 0.05).sin() * 0.9).collect();
    for (fmt, tol) in [
        (SampleFormat::U8, 1.0 / 100.0),
        (SampleFormat::I16, 1e-4),
        (SampleFormat::I24, 1e-6),
        (SampleFormat::F32, 1e-7),
    ] {
        let wav = decode_wav(&encode_wav(&[x.clone(), x.clone()], 22050, fmt)).unwrap();
        assert_eq!(wav.sample_rate, 22050);
        assert_eq!(wav.channels.len(), 2);
        for (a, b) in wav.to_mono().iter().zip(&x) {
            assert!((a - b).abs() < tol, "{fmt:?}: {a} vs {b}");
        }
    }
}

#[test]
fn opposite_stereo_channels_cancel() {
    let x: Vec<f64> = (0..500).map(|i| ((i * 37 % 101) as f64 / 101.0) - 0.5).collect();
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let wav = decode_wav(&encode_wav(&[x, neg], 16000, SampleFormat::F32)).unwrap();
    assert!(wav.to_mono().iter().all(|&v| v == 0.0));
}

#[test]
fn truncated_wav_reports_offset() {
    let bytes = encode_wav(&[vec![0.1; 100]], 16000, SampleFormat::I16);
    let err = decode_wav(&bytes[..150]).unwrap_err();
    assert_eq!(err.offset, 150);
    assert!(err.msg.contains("truncated"));
    let err = decode_wav(&bytes[..20]).unwrap_err();
    assert!(err.offset <= 20);
}

#[test]
fn unsupported_encoding_is_explicit() {
    let mut bytes = encode_wav(&[vec![0.1; 10]], 16000, SampleFormat::I16);
    bytes[20] = 2; // ADPCM format tag
    let err = decode_wav(&bytes).unwrap_err();
    assert!(err.msg.contains("unsupported encoding"), "{}", err.msg);
    assert_eq!(err.offset, 20);
}

#[test]
fn resampler_is_identity_at_matching_rate() {
    let x: Vec<f64> = (0..1234).map(|i| (i as f64 * 0.3).cos()).collect();
    assert_eq!(resample(&x, 16000, 16000).unwrap(), x);
}

#[test]
fn resampled_sine_keeps_its_frequency() {
    let x = common::sine(440.0, 0.9, 32000, 32000.0);
    let y = resample(&x, 32000, 16000).unwrap();
    assert_eq!(y.len(), 16000);
    // Direct DFT of the Hann-windowed output, 1 Hz per bin.
    let n = y.len();
    let mag = |k: usize| {
        let (mut re, mut im) = (0.0, 0.0);
        for (i, v) in y.iter().enumerate() {
            let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n as f64).cos();
            let ph = -2.0 * std::f64::consts::PI * (k * i % n) as f64 / n as f64;
            re += w * v * ph.cos();
            im += w * v * ph.sin();
        }
        re.hypot(im)
    };
    let peak = (300..600).max_by(|&a, &b| mag(a).total_cmp(&mag(b))).unwrap();
    assert!((439..=441).contains(&peak), "peak at {peak}");
    // Gain through the passband is close to unity.
    let rms = (y[1000..15000].iter().map(|v| v * v).sum::<f64>() / 14000.0).sqrt();
    assert!((rms - 0.9 / 2f64.sqrt()).abs() < 0.01, "rms {rms}");
}

#[test]
fn decode_and_resample_mixes_to_mono_first() {
    let dir = tempfile::tempdir().unwrap();
    let x = common::sine(300.0, 0.5, 44100, 44100.0);
    let neg: Vec<f64> = x.iter().map(|v| -v).collect();
    let path = dir.path().join("s.wav");
    fs::write(&path, encode_wav(&[x, neg], 44100, SampleFormat::F32)).unwrap();
    let rec = ClipRecord {
        clip_id: "s".into(),
        labels: vec![0],
        split: Split::Train,
        path,
    };
    let clip = decode_and_resample(&rec).unwrap();
    assert_eq!(clip.sample_rate, 16000);
    assert_eq!(clip.samples.len(), 16000);
    assert!(clip.samples.iter().all(|&v| v == 0.0));
}

#[test]
fn wav_errors_carry_path_and_offset() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.wav");
    fs::write(&path, b"RIFF\0\0\0\0WAVX").unwrap();
    let rec = ClipRecord {
        clip_id: "bad".into(),
        labels: vec![0],
        split: Split::Train,
        path,
    };
    match decode_and_resample(&rec) {
        Err(Error::Wav { offset, .. }) => assert_eq!(offset, 8),
        other => panic!("{other:?}"),
    }
}

fn record() -> ClipRecord {
    ClipRecord {
        clip_id: "r".into(),
        labels: vec![1, 3],
        split: Split::Train,
        path: "r.wav".into(),
    }
}

fn clip(n: usize) -> AudioClip {
    AudioClip {
        samples: vec![0.25; n],
        sample_rate: 16000,
    }
}

#[test]
fn chunking_examples() {
    let c = chunk_clip(&clip(43200), &record(), 5).unwrap();
    assert_eq!(c.len(), 3);
    assert_eq!(c[2].samples.iter().filter(|&&v| v == 0.0).count(), 4800);
    assert_eq!(chunk_clip(&clip(36800), &record(), 5).unwrap().len(), 2);
    let c = chunk_clip(&clip(6400), &record(), 5).unwrap();
    assert_eq!(c.len(), 1);
    assert_eq!(c[0].samples[6400..], vec![0.0; 9600][..]);
    assert!(chunk_clip(&clip(0), &record(), 5).is_err());
}

proptest! {
    #[test]
    fn chunks_follow_the_rule(n in 1usize..80_000) {
        let chunks = chunk_clip(&clip(n), &record(), 5).unwrap();
        let want = if n < 16000 { 1 } else { n / 16000 + usize::from(n % 16000 >= 8000) };
        prop_assert_eq!(chunks.len(), want);
        prop_assert_eq!(chunk_count(n), want);
        for (k, c) in chunks.iter().enumerate() {
            prop_assert_eq!(c.samples.len(), 16000);
            prop_assert_eq!(c.chunk_index, k);
            prop_assert_eq!(c.target.indices(), vec![1, 3]);
        }
    }

    #[test]
    fn resampled_length_matches_ratio(n in 1usize..3000, from in prop::sample::select(vec![8000u32, 11025, 22050, 44100, 48000])) {
        let x = vec![0.1; n];
        let y = resample(&x, from, 16000).unwrap();
        prop_assert_eq!(y.len(), (n * 16000).div_ceil(from as usize));
        prop_assert!(y.iter().all(|v| v.is_finite()));
    }
}

fn small_cfg(seed: u64) -> SynthConfig {
    SynthConfig {
        seed,
        n_classes: 4,
        clips_per_class: 10,
        duration_s: 1.5,
    }
}

#[test]
fn synthetic_corpus_is_deterministic() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let ma = generate_synthetic_corpus(a.path(), &small_cfg(7)).unwrap();
    generate_synthetic_corpus(b.path(), &small_cfg(7)).unwrap();
    for r in &ma.records {
        let name = format!("audio/{}.wav", r.clip_id);
        assert_eq!(
            fs::read(a.path().join(&name)).unwrap(),
            fs::read(b.path().join(&name)).unwrap()
        );
    }
    let back = load_manifest(&a.path().join("manifest.csv"), &a.path().join("vocab.txt")).unwrap();
    assert_eq!(back, ma);
    let c = tempfile::tempdir().unwrap();
    generate_synthetic_corpus(c.path(), &small_cfg(8)).unwrap();
    assert_ne!(
        fs::read(a.path().join("audio/c0_000.wav")).unwrap(),
        fs::read(c.path().join("audio/c0_000.wav")).unwrap()
    );
}

#[test]
fn synthetic_labels_and_splits() {
    let cfg = SynthConfig::default();
    let mut mixed = 0;
    let mut total = 0;
    for class in 0..cfg.n_classes {
        for i in 0..cfg.clips_per_class {
            let l = cfg.labels(class, i);
            total += 1;
            if l.len() == 2 {
                mixed += 1;
                // one label from each family
                assert!(l[0] < 4 && l[1] >= 4, "{l:?}");
            }
        }
        let splits: Vec<Split> = (0..cfg.clips_per_class).map(|i| cfg.split(i)).collect();
        assert_eq!(splits.iter().filter(|&&s| s == Split::Train).count(), 36);
        assert_eq!(splits.iter().filter(|&&s| s == Split::Val).count(), 12);
    }
    assert_eq!(mixed * 5, total);
    for bad in [2, 5, 7] {
        let cfg = SynthConfig {
            n_classes: bad,
            ..SynthConfig::default()
        };
        assert!(synth_clip(&cfg, 0, 0).is_err());
    }
}

#[test]
fn pitch_classes_differ_in_peaks_not_mfcc() {
    let cfg = SynthConfig {
        duration_s: 1.0,
        ..SynthConfig::default()
    };
    let n = 16;
    let mut mfcc_means = Vec::new();
    let mut rows = Vec::new();
    for class in 0..4 {
        let mut mean = vec![0.0; 12];
        let mut row = vec![0.0; 80];
        // every fifth clip is a two-label mix
        for i in (0..20).filter(|i| i % 5 != 4) {
            let x = synth_clip(&cfg, class, i).unwrap();
            let m = mfcc(&x).unwrap();
            for k in 0..12 {
                mean[k] += m.data()[k * 40..(k + 1) * 40].iter().sum::<f64>() / 40.0 / n as f64;
            }
            let p = peak_map(&cqt_log_magnitude(&x).unwrap());
            for b in 0..80 {
                row[b] += p.data()[b * 40..(b + 1) * 40].iter().sum::<f64>() / 40.0 / n as f64;
            }
        }
        mfcc_means.push(mean);
        rows.push(row);
    }
    for a in 0..4 {
        for b in a + 1..4 {
            let d = mfcc_means[a]
                .iter()
                .zip(&mfcc_means[b])
                .map(|(x, y)| (x - y).abs())
                .fold(0.0, f64::max);
            assert!(d < 0.15, "classes {a},{b}: mean MFCC differs by {d}");
            let sa: Vec<usize> = (0..80).filter(|&i| rows[a][i] > 0.5).collect();
            let sb: Vec<usize> = (0..80).filter(|&i| rows[b][i] > 0.5).collect();
            assert_ne!(sa, sb, "classes {a},{b} share peak support");
        }
    }
}
