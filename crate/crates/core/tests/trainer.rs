use std::fs;

use polyview::autodiff::{Graph, Mode, Tensor, Var};
use polyview::dataset::{generate_synthetic_corpus, SynthConfig};
use polyview::encoder::{Checkpoint, Encoder, EncoderConfig};
use polyview::features::{extract_view, ConvProjector, FeatureCache};
use polyview::trainer::{
    clip_grad_norm, examples_from_cache, lr_at, restore, train, train_step, Adam, Continue, Example, Network,
    TrainConfig, TrainOptions,
};
use polyview::{Error, View};
use proptest::prelude::*;

fn corpus_examples(view: View, clips_per_class: usize) -> Vec<Example> {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        clips_per_class,
        duration_s: 1.0,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic_corpus(dir.path(), &cfg).unwrap();
    let records: Vec<_> = manifest.records.iter().collect();
    let feats = extract_view(&records, manifest.n_classes(), view, &ConvProjector::new(1), 1).unwrap();
    examples_from_cache(&records, &FeatureCache::new(feats), view, manifest.n_classes()).unwrap()
}

fn small(view: View, n_classes: usize) -> EncoderConfig {
    EncoderConfig {
        d_model: 16,
        n_heads: 2,
        head_dim: 8,
        mlp_dim: 32,
        head_hidden: 64,
        conv_filters: 8,
        conv_kernel: 20,
        ..EncoderConfig::new(view, n_classes)
    }
}

fn fixed_loss(net: &Encoder<f32>, batch: &[Example]) -> f64 {
    let mut g = Graph::new();
    let vars: Vec<Var> = net.params.iter().map(|(_, t)| g.input(t.clone())).collect();
    let inputs: Vec<&Tensor<f32>> = batch.iter().map(|e| &e.input).collect();
    let input = g.input(net.batch_input(&inputs).unwrap());
    let c = batch[0].target.len();
    let target = g.input(
        Tensor::new(
            vec![batch.len(), c],
            batch.iter().flat_map(|e| e.target.clone()).collect(),
        )
        .unwrap(),
    );
    let mut rng = rand::SeedableRng::seed_from_u64(0);
    let s = Network::scores(net, &mut g, &vars, input, Mode::Eval, &mut rng).unwrap();
    let l = g.huber(s, target, 1.0).unwrap();
    f64::from(g.value(l).item())
}

#[test]
fn lr_endpoints_are_exact() {
    let cfg = TrainConfig::default();
    assert_eq!(lr_at(0, &cfg).unwrap(), 2e-4);
    assert_eq!(lr_at(299, &cfg).unwrap(), 1e-6);
    let mid = lr_at(149, &cfg).unwrap() + lr_at(150, &cfg).unwrap();
    assert!((mid - (2e-4 + 1e-6)).abs() < 1e-8);
    assert!(matches!(lr_at(300, &cfg), Err(Error::Invalid(_))));
}

proptest! {
    #[test]
    fn lr_is_non_increasing(epochs in 2usize..600, lo in 1e-7f64..1e-4, span in 1e-6f64..1e-2) {
        let cfg = TrainConfig { epochs, lr_start: lo + span, lr_end: lo, ..TrainConfig::default() };
        let lrs: Vec<f64> = (0..epochs).map(|e| lr_at(e, &cfg).unwrap()).collect();
        prop_assert_eq!(lrs[0], cfg.lr_start);
        prop_assert_eq!(lrs[epochs - 1], cfg.lr_end);
        prop_assert!(lrs.windows(2).all(|w| w[1] <= w[0]));
    }

    #[test]
    fn clipping_bounds_the_norm(v in prop::collection::vec(-100f32..100.0, 1..50), max in 0.1f64..10.0) {
        let mut g = vec![Tensor::new(vec![v.len()], v.clone()).unwrap()];
        let before = clip_grad_norm(&mut g, max).unwrap();
        let after = f64::from(g[0].sum_squares()).sqrt();
        if before <= max {
            prop_assert_eq!(g[0].data(), &v[..]);
        } else {
            prop_assert!((after - max).abs() < 1e-4 * max);
        }
    }
}

#[test]
fn clipping_examples() {
    let mut g = vec![Tensor::new(vec![2], vec![3.0f32, 4.0]).unwrap()];
    assert_eq!(clip_grad_norm(&mut g, 1.0).unwrap(), 5.0);
    assert_eq!(g[0].data(), &[0.6, 0.8]);
    let mut g = vec![Tensor::new(vec![2], vec![1.2f32, 1.6]).unwrap()];
    clip_grad_norm(&mut g, 5.0).unwrap();
    assert_eq!(g[0].data(), &[1.2, 1.6]);
    let mut g = vec![Tensor::<f32>::zeros(&[3])];
    clip_grad_norm(&mut g, 5.0).unwrap();
    assert_eq!(g[0].data(), &[0.0; 3]);
    let mut g = vec![Tensor::new(vec![1], vec![f32::NAN]).unwrap()];
    assert!(matches!(clip_grad_norm(&mut g, 5.0), Err(Error::Diverged(_))));
}

#[test]
fn zero_learning_rate_leaves_weights_bit_identical() {
    let examples = corpus_examples(View::Timbre, 1);
    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 1).unwrap();
    let before = net.params.clone();
    let mut adam = Adam::new(&net.params);
    let batch: Vec<&Example> = examples.iter().take(4).collect();
    train_step(&mut net, &mut adam, &batch, 0.0, 0, &TrainConfig::default()).unwrap();
    assert_eq!(net.params, before);
    assert_eq!(adam.t, 1);
}

#[test]
fn single_clip_overfits() {
    let examples: Vec<Example> = corpus_examples(View::Pitch, 1).into_iter().take(1).collect();
    let mut net = Encoder::<f32>::new(EncoderConfig::new(View::Pitch, 8), 2).unwrap();
    let initial = fixed_loss(&net, &examples);
    let cfg = TrainConfig {
        epochs: 50,
        ..TrainConfig::default()
    };
    let out = train(&mut net, &examples, &[], &cfg, None, TrainOptions::default()).unwrap();
    assert_eq!(out.log.len(), 50);
    let last = out.log.last().unwrap().train_loss;
    assert!(
        last * 10.0 <= out.log[0].train_loss,
        "{} -> {last}",
        out.log[0].train_loss
    );
    let final_eval = fixed_loss(&net, &examples);
    assert!(final_eval * 10.0 <= initial, "{initial} -> {final_eval}");
}

#[test]
fn fixed_batch_eval_loss_falls_over_twenty_steps() {
    let examples: Vec<Example> = corpus_examples(View::Timbre, 1).into_iter().take(8).collect();
    let mut net = Encoder::<f32>::new(EncoderConfig::new(View::Timbre, 8), 3).unwrap();
    let cfg = TrainConfig::default();
    let mut adam = Adam::new(&net.params);
    let batch: Vec<&Example> = examples.iter().collect();
    let mut losses = vec![fixed_loss(&net, &examples)];
    for step in 0..20 {
        train_step(&mut net, &mut adam, &batch, cfg.lr_start, step, &cfg).unwrap();
        losses.push(fixed_loss(&net, &examples));
    }
    assert!(losses[20] < losses[0], "{losses:?}");
}

fn run_dir(examples: &[Example], val: &[Example], cfg: &TrainConfig, dir: &std::path::Path) -> Encoder<f32> {
    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 9).unwrap();
    let opts = TrainOptions {
        out_dir: Some(dir.to_path_buf()),
        ..TrainOptions::default()
    };
    train(&mut net, examples, val, cfg, None, opts).unwrap();
    net
}

fn small_run_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 4,
        lr_start: 1e-3,
        checkpoint_every: 2,
        seed: 5,
        ..TrainConfig::default()
    }
}

#[test]
fn same_seed_gives_identical_checkpoints_and_logs() {
    let examples = corpus_examples(View::Timbre, 2);
    let (train_set, val) = examples.split_at(10);
    let cfg = small_run_cfg();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    run_dir(train_set, val, &cfg, a.path());
    run_dir(train_set, val, &cfg, b.path());
    for name in [
        "last.pfck",
        "best.pfck",
        "epoch_0002.pfck",
        "epoch_0004.pfck",
        "log.csv",
    ] {
        let (x, y) = (
            fs::read(a.path().join(name)).unwrap(),
            fs::read(b.path().join(name)).unwrap(),
        );
        assert!(x == y, "{name} differs");
    }
    let log = fs::read_to_string(a.path().join("log.csv")).unwrap();
    let lines: Vec<&str> = log.lines().collect();
    assert_eq!(lines[0], "epoch,step,lr,train_loss,val_top5");
    assert_eq!(lines.len(), 5);
    assert!(lines[1].starts_with("0,3,"), "{}", lines[1]);
}

#[test]
fn resume_mid_epoch_is_step_identical() {
    let examples = corpus_examples(View::Timbre, 2);
    let (train_set, val) = examples.split_at(10);
    let cfg = small_run_cfg();
    let full_dir = tempfile::tempdir().unwrap();
    let full = run_dir(train_set, val, &cfg, full_dir.path());

    let part_dir = tempfile::tempdir().unwrap();
    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 9).unwrap();
    let opts = TrainOptions {
        out_dir: Some(part_dir.path().to_path_buf()),
        stop_after_steps: Some(5),
        ..TrainOptions::default()
    };
    let out = train(&mut net, train_set, val, &cfg, None, opts).unwrap();
    assert_eq!((out.state.epoch, out.state.batch, out.state.step), (1, 2, 5));

    let ck = Checkpoint::load(&part_dir.path().join("last.pfck")).unwrap();
    let mut resumed = Encoder::<f32>::new(small(View::Timbre, 8), 123).unwrap();
    let opts = TrainOptions {
        out_dir: Some(part_dir.path().to_path_buf()),
        ..TrainOptions::default()
    };
    train(&mut resumed, train_set, val, &cfg, Some(&ck), opts).unwrap();
    assert_eq!(resumed.params, full.params);
    assert_eq!(
        fs::read(part_dir.path().join("last.pfck")).unwrap(),
        fs::read(full_dir.path().join("last.pfck")).unwrap()
    );
    assert_eq!(
        fs::read_to_string(part_dir.path().join("log.csv")).unwrap(),
        fs::read_to_string(full_dir.path().join("log.csv")).unwrap()
    );
}

#[test]
fn restore_rejects_a_different_model() {
    let examples = corpus_examples(View::Timbre, 1);
    let dir = tempfile::tempdir().unwrap();
    run_dir(
        &examples[..6],
        &[],
        &TrainConfig {
            epochs: 1,
            ..small_run_cfg()
        },
        dir.path(),
    );
    let ck = Checkpoint::load(&dir.path().join("last.pfck")).unwrap();
    let mut other = Encoder::<f32>::new(small(View::Pitch, 8), 9).unwrap();
    assert!(matches!(restore(&mut other, &ck), Err(Error::Invalid(_))));
}

#[test]
fn observer_can_stop_early() {
    let examples = corpus_examples(View::Timbre, 1);
    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 9).unwrap();
    let mut seen = 0;
    let mut stop = |_: &polyview::trainer::LogRow, _: &dyn Network| {
        seen += 1;
        if seen == 2 {
            Continue::Stop
        } else {
            Continue::Yes
        }
    };
    let opts = TrainOptions {
        on_epoch: Some(&mut stop),
        ..TrainOptions::default()
    };
    let out = train(&mut net, &examples, &[], &small_run_cfg(), None, opts).unwrap();
    assert_eq!(out.log.len(), 2);
}

#[test]
fn non_finite_loss_names_step_lr_and_batch() {
    let mut examples: Vec<Example> = corpus_examples(View::Timbre, 1).into_iter().take(2).collect();
    examples[1].input.data_mut()[0] = f32::NAN;
    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 2,
        batch_size: 2,
        ..TrainConfig::default()
    };
    let err = train(&mut net, &examples, &[], &cfg, None, TrainOptions::default()).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Diverged(_)), "{msg}");
    assert!(msg.contains("step 0") && msg.contains("lr 2e-4"), "{msg}");
    assert!(
        msg.contains(&format!("{}#{}", examples[1].clip_id, examples[1].chunk_index)),
        "{msg}"
    );
}

#[test]
fn missing_features_fail_before_training() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        clips_per_class: 1,
        duration_s: 1.0,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic_corpus(dir.path(), &cfg).unwrap();
    let records: Vec<_> = manifest.records.iter().collect();
    let feats = extract_view(&records[..3], 8, View::Timbre, &ConvProjector::new(1), 1).unwrap();
    let err = examples_from_cache(&records, &FeatureCache::new(feats), View::Timbre, 8).unwrap_err();
    assert!(matches!(err, Error::Missing(_)));
    assert!(
        err.to_string()
            .contains(&format!("({}, 0, timbre)", records[3].clip_id)),
        "{err}"
    );

    let mut net = Encoder::<f32>::new(small(View::Timbre, 8), 1).unwrap();
    let err = train(
        &mut net,
        &[],
        &[],
        &TrainConfig::default(),
        None,
        TrainOptions::default(),
    )
    .unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn extraction_is_independent_of_thread_count() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig {
        clips_per_class: 1,
        duration_s: 1.0,
        ..SynthConfig::default()
    };
    let manifest = generate_synthetic_corpus(dir.path(), &cfg).unwrap();
    let records: Vec<_> = manifest.records.iter().collect();
    let one = extract_view(&records, 8, View::Timbre, &ConvProjector::new(1), 1).unwrap();
    let four = extract_view(&records, 8, View::Timbre, &ConvProjector::new(1), 4).unwrap();
    assert_eq!(one, four);
}
