//! Frozen per-view embeddings, their concatenation and the head trained on
//! top of them.
//!
//! Views always concatenate in canonical order (pitch, timbre, waveform,
//! neuralogram), so `[a ‖ b]` for `{timbre, pitch}` is pitch first.

use std::collections::BTreeSet;
use std::path::Path;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::dataset::ClipRecord;
use crate::encoder::{head_forward, head_layout, init_params, Bound, Checkpoint, Encoder, ParamSet};
use crate::features::{write_feature_cache, FeatureCache, FeatureRecord};
use crate::trainer::{predict, Example, Network, TrainConfig};
use crate::{Error, Result, View};

pub const EMBED_DIM: usize = 64;
pub const HEAD_HIDDEN: usize = 2048;

/// Encoder defaults, but 100 epochs: a head on frozen embeddings converges
/// long before 300.
pub fn head_train_config() -> TrainConfig {
    TrainConfig {
        epochs: 100,
        ..TrainConfig::default()
    }
}

/// Non-empty set of views in canonical order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionSpec {
    views: Vec<View>,
}

impl FusionSpec {
    pub fn new(views: &[View]) -> Result<Self> {
        let set: BTreeSet<View> = views.iter().copied().collect();
        if set.is_empty() {
            return Err(Error::Invalid("fusion needs at least one view".into()));
        }
        if set.len() != views.len() {
            return Err(Error::Invalid("duplicate view in fusion spec".into()));
        }
        Ok(Self {
            views: set.into_iter().collect(),
        })
    }

    pub fn views(&self) -> &[View] {
        &self.views
    }

    pub fn input_dim(&self) -> usize {
        EMBED_DIM * self.views.len()
    }

    /// e.g. `pitch+timbre`; used for run directory names.
    pub fn label(&self) -> String {
        self.views.iter().map(|v| v.name()).collect::<Vec<_>>().join("+")
    }
}

/// Concatenates one 64-dim vector per view of `spec`, in canonical order.
pub fn concat_embeddings(spec: &FusionSpec, per_view: &[(View, &[f32])]) -> Result<Vec<f32>> {
    let mut out = Vec::with_capacity(spec.input_dim());
    for &v in spec.views() {
        let (_, vec) = per_view
            .iter()
            .find(|(w, _)| *w == v)
            .ok_or_else(|| Error::Invalid(format!("no embedding for view {v}")))?;
        if vec.len() != EMBED_DIM {
            return Err(Error::Invalid(format!(
                "{v} embedding has {} values, expected {EMBED_DIM}",
                vec.len()
            )));
        }
        out.extend_from_slice(vec);
    }
    Ok(out)
}

/// Inverse of [`concat_embeddings`].
pub fn split_embeddings(spec: &FusionSpec, fused: &[f32]) -> Result<Vec<(View, Vec<f32>)>> {
    if fused.len() != spec.input_dim() {
        return Err(Error::Invalid(format!(
            "fused vector has {} values, expected {}",
            fused.len(),
            spec.input_dim()
        )));
    }
    Ok(spec
        .views()
        .iter()
        .zip(fused.chunks(EMBED_DIM))
        .map(|(&v, c)| (v, c.to_vec()))
        .collect())
}

/// Eval-mode embeddings for every cached chunk of `records`, tagged with the
/// encoder's view and shaped `1 × 64`.
pub fn extract_embeddings(
    encoder: &Encoder<f32>,
    view: View,
    features: &FeatureCache,
    records: &[&ClipRecord],
    n_classes: usize,
) -> Result<Vec<FeatureRecord>> {
    if encoder.config.view != view {
        return Err(Error::Invalid(format!(
            "checkpoint holds a {} encoder but view {view} was requested",
            encoder.config.view
        )));
    }
    if encoder.config.d_model != EMBED_DIM {
        return Err(Error::Invalid(format!(
            "fusion expects {EMBED_DIM}-dim embeddings, encoder width is {}",
            encoder.config.d_model
        )));
    }
    let examples = crate::trainer::examples_from_cache(records, features, view, n_classes)?;
    let mut out = Vec::with_capacity(examples.len());
    for batch in examples.chunks(32) {
        let inputs: Vec<&Tensor<f32>> = batch.iter().map(|e| &e.input).collect();
        let (emb, _) = encoder.infer(&inputs)?;
        for (e, row) in batch.iter().zip(emb.data().chunks(EMBED_DIM)) {
            if row.iter().any(|v| !v.is_finite()) {
                return Err(Error::Diverged(format!(
                    "non-finite embedding for {}#{}",
                    e.clip_id, e.chunk_index
                )));
            }
            out.push(FeatureRecord {
                clip_id: e.clip_id.clone(),
                chunk_index: e.chunk_index,
                view,
                rows: 1,
                cols: EMBED_DIM as u32,
                data: row.to_vec(),
            });
        }
    }
    Ok(out)
}

/// Loads the encoder checkpoint, embeds and writes the cache. Nothing is
/// written if any step fails.
pub fn embed_to_file(
    checkpoint: &Path,
    view: View,
    features: &FeatureCache,
    records: &[&ClipRecord],
    n_classes: usize,
    out: &Path,
) -> Result<usize> {
    let encoder = Encoder::<f32>::load(checkpoint)?;
    let emb = extract_embeddings(&encoder, view, features, records, n_classes)?;
    write_feature_cache(out, &emb)?;
    Ok(emb.len())
}

/// One example per chunk with the views of `spec` concatenated.
///
/// The chunk set is the union over views; any `(clip, chunk, view)` absent
/// from `cache` is reported, all at once.
pub fn fused_examples(
    spec: &FusionSpec,
    cache: &FeatureCache,
    records: &[&ClipRecord],
    n_classes: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for r in records {
        let chunks: BTreeSet<u32> = spec
            .views()
            .iter()
            .flat_map(|&v| cache.chunk_indices(&r.clip_id, v))
            .collect();
        let chunks = if chunks.is_empty() { BTreeSet::from([0]) } else { chunks };
        let target = r.multi_hot(n_classes).bits;
        for c in chunks {
            let mut parts = Vec::new();
            for &v in spec.views() {
                match cache.get(&r.clip_id, c as usize, v) {
                    Some(rec) => parts.push((v, rec.data.as_slice())),
                    None => missing.push(format!("({}, {c}, {v})", r.clip_id)),
                }
            }
            if parts.len() == spec.views().len() {
                let fused = concat_embeddings(spec, &parts)?;
                out.push(Example {
                    clip_id: r.clip_id.clone(),
                    chunk_index: c,
                    input: Tensor::new(vec![1, fused.len()], fused)?,
                    target: target.clone(),
                });
            }
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!(
            "embedding cache incomplete, missing (clip, chunk, view): {}",
            missing.join(", ")
        )));
    }
    Ok(out)
}

/// `64·k → hidden → GELU → n_classes` over fused embeddings.
#[derive(Clone, Debug)]
pub struct FusionHead {
    pub spec: FusionSpec,
    pub hidden: usize,
    pub n_classes: usize,
    pub params: ParamSet<f32>,
}

impl FusionHead {
    pub fn new(spec: FusionSpec, hidden: usize, n_classes: usize, seed: u64) -> Self {
        let params = init_params(&head_layout("head", spec.input_dim(), hidden, n_classes), seed);
        Self {
            spec,
            hidden,
            n_classes,
            params,
        }
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: json!({ "model": self.describe() }),
            tensors: self.params.clone(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.config.get("model").cloned().unwrap_or_default();
        if model.get("kind").and_then(|k| k.as_str()) != Some("fusion_head") {
            return Err(Error::Invalid("checkpoint does not hold a fusion head".into()));
        }
        let bad = |e: serde_json::Error| Error::Invalid(format!("fusion head config: {e}"));
        let spec: FusionSpec = serde_json::from_value(model["spec"].clone()).map_err(bad)?;
        let spec = FusionSpec::new(spec.views())?;
        let hidden: usize = serde_json::from_value(model["hidden"].clone()).map_err(bad)?;
        let n_classes: usize = serde_json::from_value(model["n_classes"].clone()).map_err(bad)?;
        let mut params = Vec::new();
        for (name, shape) in head_layout("head", spec.input_dim(), hidden, n_classes) {
            let t = ck
                .tensor(&name)
                .filter(|t| t.shape() == shape.as_slice())
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks {name} of shape {shape:?}")))?;
            params.push((name, t.clone()));
        }
        Ok(Self {
            spec,
            hidden,
            n_classes,
            params,
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }

    /// Chunk-level eval scores.
    pub fn predict(&self, examples: &[Example]) -> Result<Vec<crate::eval::Scored>> {
        predict(self, examples, 256)
    }
}

impl Network for FusionHead {
    fn describe(&self) -> serde_json::Value {
        json!({
            "kind": "fusion_head",
            "spec": self.spec,
            "hidden": self.hidden,
            "n_classes": self.n_classes,
        })
    }

    fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    fn batch_input(&self, inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        let d = self.spec.input_dim();
        let mut data = Vec::with_capacity(inputs.len() * d);
        for t in inputs {
            if t.numel() != d {
                return Err(Error::Invalid(format!(
                    "fused input has {} values, expected {d}",
                    t.numel()
                )));
            }
            data.extend_from_slice(t.data());
        }
        Ok(Tensor::new(vec![inputs.len(), d], data)?)
    }

    fn scores(&self, g: &mut Graph<f32>, vars: &[Var], input: Var, _mode: Mode, _rng: &mut ChaCha8Rng) -> Result<Var> {
        head_forward(g, &Bound::new(&self.params, vars), "head", input)
    }
}
