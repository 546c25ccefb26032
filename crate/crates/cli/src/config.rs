//! The JSON run configuration.
//!
//! Every section is optional and unknown keys are rejected. Errors carry a
//! JSON pointer to the offending field, e.g. `/train/epochs`.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use polyview::dataset::SynthConfig;
use polyview::fusion::head_train_config;
use polyview::trainer::TrainConfig;
use polyview::View;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::Failure;

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Seeds weight initialisation of encoders and heads. Shuffling and
    /// dropout follow `train.seed` / `head.seed`.
    pub seed: u64,
    pub paths: Paths,
    pub dataset: Dataset,
    pub projector: ProjectorConfig,
    /// Encoder training defaults for every view.
    pub train: TrainConfig,
    /// Per-view overrides of `train`, e.g. `{"waveform": {"epochs": 50}}`.
    pub views: BTreeMap<String, Map<String, Value>>,
    pub head: TrainConfig,
    pub fusion: Fusion,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            paths: Paths::default(),
            dataset: Dataset::default(),
            projector: ProjectorConfig::default(),
            train: TrainConfig::default(),
            views: BTreeMap::new(),
            head: head_train_config(),
            fusion: Fusion::default(),
        }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Paths {
    pub data_dir: PathBuf,
    pub cache_dir: PathBuf,
    pub checkpoint_dir: PathBuf,
    pub report_dir: PathBuf,
}

impl Default for Paths {
    fn default() -> Self {
        Self {
            data_dir: "data".into(),
            cache_dir: "cache".into(),
            checkpoint_dir: "checkpoints".into(),
            report_dir: "reports".into(),
        }
    }
}

#[derive(Clone, Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Dataset {
    /// An existing `clip_id,labels,split` manifest. When absent the synthetic
    /// corpus under `paths.data_dir` is used.
    pub manifest: Option<PathBuf>,
    /// Defaults to `vocab.txt` beside the manifest.
    pub vocab: Option<PathBuf>,
    pub synthetic: Synthetic,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Synthetic {
    pub seed: u64,
    pub n_classes: usize,
    pub clips_per_class: usize,
    pub duration_s: f64,
}

impl Default for Synthetic {
    fn default() -> Self {
        let d = SynthConfig::default();
        Self {
            seed: d.seed,
            n_classes: d.n_classes,
            clips_per_class: d.clips_per_class,
            duration_s: d.duration_s,
        }
    }
}

impl Synthetic {
    pub fn to_core(&self) -> SynthConfig {
        SynthConfig {
            seed: self.seed,
            n_classes: self.n_classes,
            clips_per_class: self.clips_per_class,
            duration_s: self.duration_s,
        }
    }
}

/// Source of the 1024-dim vectors behind the neuralogram view.
#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ProjectorConfig {
    /// The seeded stand-in network.
    Builtin { seed: u64 },
    /// A feature cache of precomputed 1024 × 10 matrices.
    File { path: PathBuf },
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        ProjectorConfig::Builtin { seed: 1 }
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Fusion {
    pub views: Vec<View>,
}

impl Default for Fusion {
    fn default() -> Self {
        Self {
            views: View::ALL.to_vec(),
        }
    }
}

fn pointer(path: &serde_path_to_error::Path) -> String {
    use serde_path_to_error::Segment;
    let mut s = String::new();
    for seg in path.iter() {
        match seg {
            Segment::Seq { index } => s.push_str(&format!("/{index}")),
            Segment::Map { key } => s.push_str(&format!("/{}", key.replace('~', "~0").replace('/', "~1"))),
            Segment::Enum { variant } => s.push_str(&format!("/{variant}")),
            Segment::Unknown => s.push_str("/?"),
        }
    }
    if s.is_empty() {
        s.push('/');
    }
    s
}

fn invalid_at(ptr: &str, msg: impl std::fmt::Display) -> Failure {
    Failure::Validation(format!("config error at {ptr}: {msg}"))
}

fn parse<T: serde::de::DeserializeOwned>(v: Value, prefix: &str) -> Result<T, Failure> {
    serde_path_to_error::deserialize(v).map_err(|e| {
        let p = pointer(e.path());
        let p = if p == "/" && !prefix.is_empty() {
            String::new()
        } else {
            p
        };
        invalid_at(&format!("{prefix}{p}"), e.inner())
    })
}

fn check_train(cfg: &TrainConfig, prefix: &str) -> Result<(), Failure> {
    cfg.check()
        .map_err(|(field, msg)| invalid_at(&format!("{prefix}/{field}"), msg))
}

impl RunConfig {
    /// Parses, fills defaults, resolves relative paths against `base` and
    /// validates.
    pub fn from_value(v: Value, base: &Path) -> Result<Self, Failure> {
        let mut cfg: RunConfig = parse(v, "")?;
        check_train(&cfg.train, "/train")?;
        check_train(&cfg.head, "/head")?;
        for name in cfg.views.keys() {
            let view: View = name.parse().map_err(|e| invalid_at(&format!("/views/{name}"), e))?;
            cfg.view_train(view)?;
        }
        if cfg.fusion.views.is_empty() {
            return Err(invalid_at("/fusion/views", "needs at least one view"));
        }
        cfg.fusion.views = View::parse_list(&cfg.fusion.views.iter().map(|v| v.name()).collect::<Vec<_>>().join(","))
            .map_err(|e| invalid_at("/fusion/views", e))?;
        cfg.dataset.synthetic.to_core_checked()?;

        let abs = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        abs(&mut cfg.paths.data_dir);
        abs(&mut cfg.paths.cache_dir);
        abs(&mut cfg.paths.checkpoint_dir);
        abs(&mut cfg.paths.report_dir);
        if let Some(dir) = std::env::var_os("PF_CACHE_DIR").filter(|d| !d.is_empty()) {
            cfg.paths.cache_dir = PathBuf::from(dir);
        }
        if let Some(m) = cfg.dataset.manifest.as_mut() {
            abs(m);
            if !m.is_file() {
                return Err(invalid_at("/dataset/manifest", format!("no such file {}", m.display())));
            }
            let vocab = cfg
                .dataset
                .vocab
                .get_or_insert_with(|| m.parent().unwrap_or(Path::new(".")).join("vocab.txt"));
            abs(vocab);
            if !vocab.is_file() {
                return Err(invalid_at(
                    "/dataset/vocab",
                    format!("no such file {}", vocab.display()),
                ));
            }
        } else if cfg.dataset.vocab.is_some() {
            return Err(invalid_at(
                "/dataset/vocab",
                "only meaningful together with dataset.manifest",
            ));
        }
        if let ProjectorConfig::File { path } = &mut cfg.projector {
            abs(path);
            if !path.is_file() {
                return Err(invalid_at(
                    "/projector/path",
                    format!("no such file {}", path.display()),
                ));
            }
        }
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        match path {
            None => Self::from_value(Value::Object(Map::new()), &std::env::current_dir().unwrap_or_default()),
            Some(p) => {
                let text = std::fs::read_to_string(p)
                    .map_err(|e| Failure::Validation(format!("cannot read config {}: {e}", p.display())))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| Failure::Validation(format!("config {} is not valid JSON: {e}", p.display())))?;
                let base = p
                    .parent()
                    .filter(|b| !b.as_os_str().is_empty())
                    .unwrap_or(Path::new("."));
                Self::from_value(v, base)
            }
        }
    }

    /// `train` with the view's overrides applied.
    pub fn view_train(&self, view: View) -> Result<TrainConfig, Failure> {
        let Some(over) = self.views.get(view.name()) else {
            return Ok(self.train.clone());
        };
        let mut base = serde_json::to_value(&self.train).expect("config serializes");
        let obj = base.as_object_mut().expect("struct is an object");
        for (k, v) in over {
            obj.insert(k.clone(), v.clone());
        }
        let prefix = format!("/views/{view}");
        let cfg: TrainConfig = parse(base, &prefix)?;
        check_train(&cfg, &prefix)?;
        Ok(cfg)
    }

    /// Fully resolved form, per-view training configs included.
    pub fn resolved(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("config serializes");
        let per_view: Map<String, Value> = View::ALL
            .iter()
            .map(|&view| {
                let cfg = self.view_train(view).expect("validated on load");
                (
                    view.name().to_string(),
                    serde_json::to_value(cfg).expect("config serializes"),
                )
            })
            .collect();
        v["views"] = Value::Object(per_view);
        v
    }
}

impl Synthetic {
    fn to_core_checked(&self) -> Result<(), Failure> {
        if self.n_classes < 4 || self.n_classes % 2 != 0 {
            return Err(invalid_at(
                "/dataset/synthetic/n_classes",
                "must be even and at least 4",
            ));
        }
        if self.clips_per_class == 0 {
            return Err(invalid_at("/dataset/synthetic/clips_per_class", "must be positive"));
        }
        if !(self.duration_s > 0.0 && self.duration_s <= 600.0) {
            return Err(invalid_at("/dataset/synthetic/duration_s", "must be in (0, 600]"));
        }
        Ok(())
    }
}
