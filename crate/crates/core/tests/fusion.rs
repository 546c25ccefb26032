use std::fs;
use std::sync::OnceLock;

use polyview::dataset::{generate_synthetic_corpus, ClipRecord, Manifest, Split, SynthConfig};
use polyview::encoder::{Encoder, EncoderConfig};
use polyview::eval::{top1_accuracy, Scored};
use polyview::features::{extract_view, read_feature_cache, ConvProjector, FeatureCache, FeatureRecord};
use polyview::fusion::{
    concat_embeddings, embed_to_file, extract_embeddings, fused_examples, split_embeddings, FusionHead, FusionSpec,
    EMBED_DIM,
};
use polyview::trainer::{examples_from_cache, train, Example, TrainConfig, TrainOptions};
use polyview::{Error, View};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// A 3 s synthetic corpus, its pitch features and a briefly trained pitch
/// encoder, shared by the slower tests.
struct Fixture {
    dir: tempfile::TempDir,
    manifest: Manifest,
    features: FeatureCache,
    encoder: Encoder<f32>,
}

impl Fixture {
    fn records(&self, split: Option<Split>) -> Vec<&ClipRecord> {
        match split {
            Some(s) => self.manifest.split(s),
            None => self.manifest.records.iter().collect(),
        }
    }

    fn n_classes(&self) -> usize {
        self.manifest.n_classes()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            clips_per_class: 20,
            ..SynthConfig::default()
        };
        let manifest = generate_synthetic_corpus(dir.path(), &cfg).unwrap();
        let nc = manifest.n_classes();
        let all: Vec<&ClipRecord> = manifest.records.iter().collect();
        let features = FeatureCache::new(extract_view(&all, nc, View::Pitch, &ConvProjector::new(1), 1).unwrap());
        let ex = |s| examples_from_cache(&manifest.split(s), &features, View::Pitch, nc).unwrap();
        let mut encoder = Encoder::<f32>::new(EncoderConfig::new(View::Pitch, nc), 1).unwrap();
        let tc = TrainConfig {
            epochs: 15,
            lr_start: 1e-3,
            ..TrainConfig::default()
        };
        train(
            &mut encoder,
            &ex(Split::Train),
            &ex(Split::Val),
            &tc,
            None,
            TrainOptions::default(),
        )
        .unwrap();
        Fixture {
            dir,
            manifest,
            features,
            encoder,
        }
    })
}

fn pitch_embeddings(f: &Fixture) -> FeatureCache {
    FeatureCache::new(
        extract_embeddings(&f.encoder, View::Pitch, &f.features, &f.records(None), f.n_classes()).unwrap(),
    )
}

fn vec_of(x: f32) -> Vec<f32> {
    (0..EMBED_DIM).map(|i| x + i as f32).collect()
}

fn head_config(epochs: usize, seed: u64) -> TrainConfig {
    TrainConfig {
        epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// Expected top-1 any-hit rate of a predictor that ignores its input and
/// picks a class uniformly: mean label count over the class count.
fn chance(items: &[Scored]) -> f64 {
    let c = items[0].scores.len() as f64;
    items.iter().map(|s| s.truth.len() as f64).sum::<f64>() / items.len() as f64 / c
}

#[test]
fn spec_is_canonical_and_validated() {
    let spec = FusionSpec::new(&[View::Neuralogram, View::Pitch, View::Timbre]).unwrap();
    assert_eq!(spec.views(), &[View::Pitch, View::Timbre, View::Neuralogram]);
    assert_eq!(spec.label(), "pitch+timbre+neuralogram");
    assert_eq!(FusionSpec::new(&View::ALL).unwrap().input_dim(), 256);
    assert!(matches!(FusionSpec::new(&[]), Err(Error::Invalid(_))));
    assert!(matches!(
        FusionSpec::new(&[View::Pitch, View::Pitch]),
        Err(Error::Invalid(_))
    ));
}

#[test]
fn single_view_concat_is_identity() {
    let spec = FusionSpec::new(&[View::Pitch]).unwrap();
    let a = vec_of(0.5);
    assert_eq!(concat_embeddings(&spec, &[(View::Pitch, &a)]).unwrap(), a);
}

#[test]
fn concat_follows_canonical_order() {
    let spec = FusionSpec::new(&[View::Timbre, View::Pitch]).unwrap();
    let (a, b) = (vec_of(1.0), vec_of(100.0));
    let fused = concat_embeddings(&spec, &[(View::Timbre, &b), (View::Pitch, &a)]).unwrap();
    assert_eq!(fused.len(), 128);
    assert_eq!(&fused[..64], &a[..]);
    assert_eq!(&fused[64..], &b[..]);
}

#[test]
fn concat_rejects_missing_view_and_bad_length() {
    let spec = FusionSpec::new(&[View::Pitch, View::Waveform]).unwrap();
    let a = vec_of(0.0);
    assert!(matches!(
        concat_embeddings(&spec, &[(View::Pitch, &a)]),
        Err(Error::Invalid(_))
    ));
    let short = vec![0.0; 10];
    assert!(matches!(
        concat_embeddings(&spec, &[(View::Pitch, &a), (View::Waveform, &short)]),
        Err(Error::Invalid(_))
    ));
}

proptest! {
    #[test]
    fn concat_split_round_trip(mask in 1u8..16, fused in prop::collection::vec(-1e3f32..1e3, 256)) {
        let views: Vec<View> = View::ALL.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &v)| v).collect();
        let spec = FusionSpec::new(&views).unwrap();
        let fused = &fused[..spec.input_dim()];
        let parts = split_embeddings(&spec, fused).unwrap();
        for (k, (v, p)) in parts.iter().enumerate() {
            prop_assert_eq!(*v, spec.views()[k]);
            prop_assert_eq!(&p[..], &fused[64 * k..64 * k + 64]);
        }
        let refs: Vec<(View, &[f32])> = parts.iter().map(|(v, p)| (*v, p.as_slice())).collect();
        prop_assert_eq!(concat_embeddings(&spec, &refs).unwrap(), fused.to_vec());
    }
}

#[test]
fn fused_examples_list_every_missing_triple() {
    let rec = |id: &str| ClipRecord {
        clip_id: id.into(),
        labels: vec![0],
        split: Split::Train,
        path: "unused.wav".into(),
    };
    let (a, b) = (rec("a"), rec("b"));
    let entry = |clip: &str, chunk: usize, view| FeatureRecord {
        clip_id: clip.into(),
        chunk_index: chunk as u32,
        view,
        rows: 1,
        cols: 64,
        data: vec_of(chunk as f32),
    };
    let cache = FeatureCache::new(vec![
        entry("a", 0, View::Pitch),
        entry("a", 1, View::Pitch),
        entry("a", 0, View::Timbre),
        entry("b", 0, View::Pitch),
        entry("b", 0, View::Timbre),
    ]);
    let spec = FusionSpec::new(&[View::Pitch, View::Timbre]).unwrap();
    let err = fused_examples(&spec, &cache, &[&a, &b], 2).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Missing(_)));
    assert!(msg.contains("(a, 1, timbre)"), "{msg}");
    assert!(!msg.contains("(b,"), "{msg}");

    let pitch_only = FusionSpec::new(&[View::Pitch]).unwrap();
    let ex = fused_examples(&pitch_only, &cache, &[&a, &b], 2).unwrap();
    assert_eq!(ex.len(), 3);
    let err = fused_examples(&FusionSpec::new(&[View::Waveform]).unwrap(), &cache, &[&a], 2).unwrap_err();
    assert!(err.to_string().contains("(a, 0, waveform)"), "{err}");
}

#[test]
fn head_checkpoint_round_trip_records_spec() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("head.pfck");
    let spec = FusionSpec::new(&[View::Waveform, View::Pitch]).unwrap();
    let head = FusionHead::new(spec.clone(), 32, 8, 4);
    head.checkpoint().save(&path).unwrap();
    let back = FusionHead::load(&path).unwrap();
    assert_eq!(back.spec, spec);
    assert_eq!(back.params, head.params);
    let input = polyview::autodiff::Tensor::new(vec![1, 128], vec_of(0.1).repeat(2)).unwrap();
    let ex = Example {
        clip_id: "x".into(),
        chunk_index: 0,
        input,
        target: vec![0.0; 8],
    };
    assert_eq!(head.predict(&[ex.clone()]).unwrap(), back.predict(&[ex]).unwrap());
}

#[test]
fn embedding_extraction_is_complete_and_deterministic() {
    let f = fixture();
    let all = f.records(None);
    let a = extract_embeddings(&f.encoder, View::Pitch, &f.features, &all, f.n_classes()).unwrap();
    let b = extract_embeddings(&f.encoder, View::Pitch, &f.features, &all, f.n_classes()).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.len(), f.features.len());
    assert!(a
        .iter()
        .all(|r| r.data.len() == 64 && r.view == View::Pitch && r.data.iter().all(|v| v.is_finite())));
}

#[test]
fn extraction_rejects_a_view_mismatch() {
    let f = fixture();
    let err = extract_embeddings(&f.encoder, View::Timbre, &f.features, &f.records(None), f.n_classes()).unwrap_err();
    assert!(matches!(err, Error::Invalid(_)), "{err}");
    let narrow = Encoder::<f32>::new(
        EncoderConfig {
            d_model: 16,
            ..EncoderConfig::new(View::Pitch, 8)
        },
        0,
    )
    .unwrap();
    let err = extract_embeddings(&narrow, View::Pitch, &f.features, &f.records(None), f.n_classes()).unwrap_err();
    assert!(err.to_string().contains("64-dim"), "{err}");
}

#[test]
fn corrupt_checkpoint_writes_no_cache() {
    let f = fixture();
    let dir = tempfile::tempdir().unwrap();
    let ck = dir.path().join("enc.pfck");
    let mut bytes = f.encoder.checkpoint().encode();
    let mid = bytes.len() / 3;
    bytes[mid] ^= 0x10;
    fs::write(&ck, bytes).unwrap();
    let out = dir.path().join("emb.pfv");
    let err = embed_to_file(&ck, View::Pitch, &f.features, &f.records(None), f.n_classes(), &out).unwrap_err();
    assert!(matches!(err, Error::Corrupt { .. }), "{err}");
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 1);

    f.encoder.checkpoint().save(&ck).unwrap();
    let n = embed_to_file(&ck, View::Pitch, &f.features, &f.records(None), f.n_classes(), &out).unwrap();
    assert_eq!(read_feature_cache(&out).unwrap().len(), n);
}

#[test]
fn pitch_head_beats_chance_and_leaves_encoder_file_untouched() {
    let f = fixture();
    let ck = f.dir.path().join("pitch_encoder.pfck");
    f.encoder.checkpoint().save(&ck).unwrap();
    let before = fs::read(&ck).unwrap();

    let cache = pitch_embeddings(f);
    let spec = FusionSpec::new(&[View::Pitch]).unwrap();
    let ex = |s| fused_examples(&spec, &cache, &f.records(Some(s)), f.n_classes()).unwrap();
    let (tr, va) = (ex(Split::Train), ex(Split::Val));
    let mut head = FusionHead::new(spec.clone(), 2048, f.n_classes(), 2);
    train(&mut head, &tr, &va, &head_config(50, 2), None, TrainOptions::default()).unwrap();
    let top1 = top1_accuracy(&head.predict(&va).unwrap()).unwrap();
    assert!(top1 > 1.0 / 8.0, "val top-1 {top1}");

    assert_eq!(fs::read(&ck).unwrap(), before, "encoder checkpoint changed");
}

// Training targets are permuted across examples, so the embeddings carry no
// usable information about the label. Averaging five permutations keeps the
// sampling spread (about 1.5 points) well inside the ±5 point band.
#[test]
fn shuffled_pairing_control_sits_at_chance() {
    let f = fixture();
    let cache = pitch_embeddings(f);
    let spec = FusionSpec::new(&[View::Pitch]).unwrap();
    let ex = |s| fused_examples(&spec, &cache, &f.records(Some(s)), f.n_classes()).unwrap();
    let (tr, va) = (ex(Split::Train), ex(Split::Val));
    let mut accs = Vec::new();
    let mut expected = 0.0;
    for seed in 0..5u64 {
        let mut targets: Vec<Vec<f32>> = tr.iter().map(|e| e.target.clone()).collect();
        targets.shuffle(&mut ChaCha8Rng::seed_from_u64(100 + seed));
        let shuffled: Vec<Example> = tr
            .iter()
            .zip(targets)
            .map(|(e, target)| Example { target, ..e.clone() })
            .collect();
        let mut head = FusionHead::new(spec.clone(), 2048, f.n_classes(), seed);
        train(
            &mut head,
            &shuffled,
            &va,
            &head_config(50, seed),
            None,
            TrainOptions::default(),
        )
        .unwrap();
        let scored = head.predict(&va).unwrap();
        expected = chance(&scored);
        accs.push(top1_accuracy(&scored).unwrap());
    }
    let mean = accs.iter().sum::<f64>() / accs.len() as f64;
    assert!(
        (mean - expected).abs() <= 0.05,
        "shuffled top-1 {mean:.3} vs chance {expected:.3} ({accs:?})"
    );
}
