//! One function per subcommand. Artifacts live at fixed places under the
//! configured directories:
//!
//! ```text
//! data_dir/manifest.csv, vocab.txt, audio/       synth-data
//! cache_dir/features_<view>.pfv                  features
//! checkpoint_dir/encoder_<view>/{best,last}.pfck train-encoder
//! cache_dir/embed_<view>.pfv                     embed
//! checkpoint_dir/head_<views>/{best,last}.pfck   train-head
//! report_dir/<views>/metrics.csv, ...            eval
//! ```

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use polyview::autodiff::{gradcheck, op_set, primitive_case, GradcheckConfig};
use polyview::dataset::{generate_synthetic_corpus, load_manifest, ClipRecord, Manifest, Split};
use polyview::encoder::{Encoder, EncoderConfig, EncoderGradcheck};
use polyview::eval::evaluate;
use polyview::features::{
    extract_view, read_feature_cache, write_feature_cache, ConvProjector, FeatureCache, PrecomputedProjector, Projector,
};
use polyview::fusion::{embed_to_file, fused_examples, FusionHead, FusionSpec, HEAD_HIDDEN};
use polyview::trainer::{examples_from_cache, train, Continue, LogRow, Network, TrainOptions};
use polyview::View;

use crate::config::{ProjectorConfig, RunConfig};
use crate::Failure;

pub struct Ctx {
    pub cfg: RunConfig,
    pub jobs: usize,
}

fn missing(path: &Path, hint: &str) -> Failure {
    Failure::Validation(format!("missing {}; run `polyview {hint}` first", path.display()))
}

fn require(path: &Path, hint: &str) -> Result<(), Failure> {
    if path.is_file() {
        Ok(())
    } else {
        Err(missing(path, hint))
    }
}

/// `best.pfck` if validation ever improved, else `last.pfck`.
fn pick_checkpoint(dir: &Path, hint: &str) -> Result<PathBuf, Failure> {
    ["best.pfck", "last.pfck"]
        .iter()
        .map(|n| dir.join(n))
        .find(|p| p.is_file())
        .ok_or_else(|| missing(&dir.join("best.pfck"), hint))
}

impl Ctx {
    fn manifest_path(&self) -> PathBuf {
        match &self.cfg.dataset.manifest {
            Some(m) => m.clone(),
            None => self.cfg.paths.data_dir.join("manifest.csv"),
        }
    }

    fn manifest(&self) -> Result<Manifest, Failure> {
        let path = self.manifest_path();
        let vocab = match &self.cfg.dataset.vocab {
            Some(v) => v.clone(),
            None => path.with_file_name("vocab.txt"),
        };
        require(&path, "synth-data")?;
        Ok(load_manifest(&path, &vocab)?)
    }

    fn features_path(&self, view: View) -> PathBuf {
        self.cfg.paths.cache_dir.join(format!("features_{view}.pfv"))
    }

    fn embed_path(&self, view: View) -> PathBuf {
        self.cfg.paths.cache_dir.join(format!("embed_{view}.pfv"))
    }

    fn encoder_dir(&self, view: View) -> PathBuf {
        self.cfg.paths.checkpoint_dir.join(format!("encoder_{view}"))
    }

    fn head_dir(&self, spec: &FusionSpec) -> PathBuf {
        self.cfg.paths.checkpoint_dir.join(format!("head_{}", spec.label()))
    }

    fn projector(&self) -> Result<Box<dyn Projector>, Failure> {
        Ok(match &self.cfg.projector {
            ProjectorConfig::Builtin { seed } => Box::new(ConvProjector::new(*seed)),
            ProjectorConfig::File { path } => Box::new(PrecomputedProjector::load(path)?),
        })
    }

    /// Runs `f` once per view, on up to `jobs` threads. The first error wins.
    fn per_view<F>(&self, views: &[View], f: F) -> Result<(), Failure>
    where
        F: Fn(View, usize) -> Result<(), Failure> + Sync,
    {
        let workers = self.jobs.clamp(1, views.len().max(1));
        if workers == 1 {
            return views.iter().try_for_each(|&v| f(v, self.jobs));
        }
        let inner = (self.jobs / views.len()).max(1);
        let next = std::sync::atomic::AtomicUsize::new(0);
        let results: Vec<Result<(), Failure>> = std::thread::scope(|s| {
            let handles: Vec<_> = (0..workers)
                .map(|_| {
                    s.spawn(|| {
                        let mut out = Ok(());
                        loop {
                            let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                            let Some(&v) = views.get(i) else { break };
                            if let Err(e) = f(v, inner) {
                                out = Err(e);
                                break;
                            }
                        }
                        out
                    })
                })
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().expect("worker panicked"))
                .collect()
        });
        results.into_iter().collect()
    }
}

pub fn synth_data(ctx: &Ctx) -> Result<(), Failure> {
    if ctx.cfg.dataset.manifest.is_some() {
        return Err(Failure::Validation(
            "dataset.manifest is set; synth-data only builds the synthetic corpus".into(),
        ));
    }
    let dir = &ctx.cfg.paths.data_dir;
    let m = generate_synthetic_corpus(dir, &ctx.cfg.dataset.synthetic.to_core())?;
    eprintln!("wrote {} clips and manifest.csv to {}", m.records.len(), dir.display());
    Ok(())
}

pub fn features(ctx: &Ctx, views: &[View]) -> Result<(), Failure> {
    let manifest = ctx.manifest()?;
    let projector = ctx.projector()?;
    let records: Vec<&ClipRecord> = manifest.records.iter().collect();
    ctx.per_view(views, |view, jobs| {
        let feats = extract_view(&records, manifest.n_classes(), view, projector.as_ref(), jobs)?;
        let path = ctx.features_path(view);
        write_feature_cache(&path, &feats)?;
        eprintln!("[{view}] {} chunks -> {}", feats.len(), path.display());
        Ok(())
    })
}

fn progress(tag: String, epochs: usize) -> impl FnMut(&LogRow, &dyn Network) -> Continue {
    move |row, _| {
        let val = row.val_top5.map_or_else(|| "-".to_string(), |v| format!("{v:.4}"));
        eprintln!(
            "[{tag}] epoch {}/{epochs} lr {:.3e} loss {:.6} val_top5 {val}",
            row.epoch + 1,
            row.lr,
            row.train_loss
        );
        Continue::Yes
    }
}

pub fn train_encoder(ctx: &Ctx, views: &[View], resume: bool) -> Result<(), Failure> {
    let manifest = ctx.manifest()?;
    let nc = manifest.n_classes();
    ctx.per_view(views, |view, _| {
        let fpath = ctx.features_path(view);
        require(&fpath, &format!("features --view {view}"))?;
        let cache = FeatureCache::load(&fpath)?;
        let ex = |s| examples_from_cache(&manifest.split(s), &cache, view, nc);
        let (tr, va) = (ex(Split::Train)?, ex(Split::Val)?);
        let tc = ctx.cfg.view_train(view)?;
        let dir = ctx.encoder_dir(view);
        let mut enc = Encoder::<f32>::new(EncoderConfig::new(view, nc), ctx.cfg.seed)?;
        let ck = match resume.then(|| dir.join("last.pfck")).filter(|p| p.is_file()) {
            Some(p) => Some(polyview::encoder::Checkpoint::load(&p)?),
            None => None,
        };
        let mut obs = progress(view.to_string(), tc.epochs);
        let opts = TrainOptions {
            out_dir: Some(dir.clone()),
            on_epoch: Some(&mut obs),
            ..TrainOptions::default()
        };
        let out = train(&mut enc, &tr, &va, &tc, ck.as_ref(), opts)?;
        eprintln!(
            "[{view}] {} steps, best val top-5 {:?} -> {}",
            out.state.step,
            out.state.best_val,
            dir.display()
        );
        Ok(())
    })
}

pub fn embed(ctx: &Ctx, views: &[View]) -> Result<(), Failure> {
    let manifest = ctx.manifest()?;
    let records: Vec<&ClipRecord> = manifest.records.iter().collect();
    ctx.per_view(views, |view, _| {
        let ck = pick_checkpoint(&ctx.encoder_dir(view), &format!("train-encoder --view {view}"))?;
        let fpath = ctx.features_path(view);
        require(&fpath, &format!("features --view {view}"))?;
        let cache = FeatureCache::load(&fpath)?;
        let out = ctx.embed_path(view);
        let n = embed_to_file(&ck, view, &cache, &records, manifest.n_classes(), &out)?;
        eprintln!("[{view}] {n} embeddings from {} -> {}", ck.display(), out.display());
        Ok(())
    })
}

fn embedding_cache(ctx: &Ctx, spec: &FusionSpec) -> Result<FeatureCache, Failure> {
    let mut all = Vec::new();
    for &view in spec.views() {
        let p = ctx.embed_path(view);
        require(&p, &format!("embed --view {view}"))?;
        all.extend(read_feature_cache(&p)?);
    }
    Ok(FeatureCache::new(all))
}

pub fn train_head(ctx: &Ctx, spec: &FusionSpec) -> Result<(), Failure> {
    let manifest = ctx.manifest()?;
    let nc = manifest.n_classes();
    let cache = embedding_cache(ctx, spec)?;
    let ex = |s| fused_examples(spec, &cache, &manifest.split(s), nc);
    let (tr, va) = (ex(Split::Train)?, ex(Split::Val)?);
    let mut head = FusionHead::new(spec.clone(), HEAD_HIDDEN, nc, ctx.cfg.seed);
    let dir = ctx.head_dir(spec);
    let mut obs = progress(format!("head {}", spec.label()), ctx.cfg.head.epochs);
    let opts = TrainOptions {
        out_dir: Some(dir.clone()),
        on_epoch: Some(&mut obs),
        ..TrainOptions::default()
    };
    let out = train(&mut head, &tr, &va, &ctx.cfg.head, None, opts)?;
    eprintln!(
        "[head {}] best val top-5 {:?} -> {}",
        spec.label(),
        out.state.best_val,
        dir.display()
    );
    Ok(())
}

pub fn eval(ctx: &Ctx, spec: &FusionSpec, split: Split) -> Result<(), Failure> {
    let ck = pick_checkpoint(&ctx.head_dir(spec), &format!("train-head --views {}", spec.views_arg()))?;
    let manifest = ctx.manifest()?;
    let head = FusionHead::load(&ck)?;
    if head.spec != *spec {
        return Err(Failure::Validation(format!(
            "{} holds a head for {}, not {}",
            ck.display(),
            head.spec.label(),
            spec.label()
        )));
    }
    let cache = embedding_cache(ctx, spec)?;
    let examples = fused_examples(spec, &cache, &manifest.split(split), manifest.n_classes())?;
    let report = evaluate(&head.predict(&examples)?)?;
    let dir = ctx.cfg.paths.report_dir.join(spec.label());
    report.write(&dir, "", manifest.vocab.names())?;
    println!(
        "{} ({} split, {} clips): top5_chunk {:.4} top5_clip {:.4} top1_clip {:.4} mAP {:.4}",
        spec.label(),
        split.name(),
        report.n_clips,
        report.top5_chunk,
        report.top5_clip,
        report.top1_clip,
        report.map_macro
    );
    Ok(())
}

trait ViewsArg {
    fn views_arg(&self) -> String;
}

impl ViewsArg for FusionSpec {
    fn views_arg(&self) -> String {
        self.views().iter().map(|v| v.name()).collect::<Vec<_>>().join(",")
    }
}

/// Every primitive on a few seeds, then the full encoder per view.
pub fn gradcheck_all(ctx: &Ctx, views: &[View], floor: Option<f64>) -> Result<(), Failure> {
    let n_classes = match ctx.manifest() {
        Ok(m) => m.n_classes(),
        Err(_) => ctx.cfg.dataset.synthetic.n_classes,
    };
    let mut cfg = GradcheckConfig {
        seed: ctx.cfg.seed,
        ..GradcheckConfig::default()
    };
    if let Some(f) = floor {
        cfg.floor = f;
    }
    let mut lines = Vec::new();
    let mut ok = true;
    let mut record = |line: String, passed: bool| {
        println!("{line}");
        lines.push(line);
        ok &= passed;
    };
    for op in op_set() {
        for seed in 0..3 {
            let case = primitive_case(op, ctx.cfg.seed.wrapping_add(seed))?;
            let r = gradcheck(&case, &cfg);
            record(r.to_string(), r.passed);
        }
    }
    for &view in views {
        let model = EncoderGradcheck::new(EncoderConfig::new(view, n_classes), ctx.cfg.seed)?;
        let r = gradcheck(&model, &cfg);
        record(r.to_string(), r.passed);
        for p in r.params.iter().filter(|p| p.max_rel_error >= cfg.tolerance) {
            record(format!("    {} max rel err {:.3e}", p.name, p.max_rel_error), false);
        }
    }
    let dir = &ctx.cfg.paths.report_dir;
    fs::create_dir_all(dir).map_err(|e| Failure::Runtime(format!("{}: {e}", dir.display())))?;
    let path = dir.join("gradcheck.txt");
    let mut f = fs::File::create(&path).map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    for l in &lines {
        writeln!(f, "{l}").map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?;
    }
    if ok {
        Ok(())
    } else {
        Err(Failure::Runtime(format!("gradcheck failed; see {}", path.display())))
    }
}

/// All stages in order: corpus (if synthetic), features, encoders,
/// embeddings, then a head and report for each single view and for the
/// fused set.
pub fn pipeline(ctx: &Ctx) -> Result<(), Failure> {
    let views = ctx.cfg.fusion.views.clone();
    if ctx.cfg.dataset.manifest.is_none() {
        synth_data(ctx)?;
    }
    features(ctx, &views)?;
    train_encoder(ctx, &views, false)?;
    embed(ctx, &views)?;
    let mut specs: Vec<FusionSpec> = views.iter().map(|&v| FusionSpec::new(&[v])).collect::<Result<_, _>>()?;
    if views.len() > 1 {
        specs.push(FusionSpec::new(&views)?);
    }
    for spec in &specs {
        train_head(ctx, spec)?;
    }
    for spec in &specs {
        eval(ctx, spec, Split::Test)?;
    }
    Ok(())
}
