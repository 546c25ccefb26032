//! Supervised training loop shared by the per-view encoders and the fusion
//! head: seeded shuffling, Adam, cosine learning-rate decay, gradient
//! clipping, CSV logging and resumable checkpoints.
//!
//! Randomness is derived rather than carried: the shuffle for epoch `e` comes
//! from stream `e` of the shuffle generator and dropout masks for step `s`
//! from stream `s` of the dropout generator. A checkpoint therefore only needs
//! the counters to resume step-identically, even mid-epoch.

use std::fs::{self, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::json;

use crate::autodiff::{Graph, Mode, Tensor, Var};
use crate::encoder::Checkpoint;
use crate::eval::{self, Scored};
use crate::{Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr_start: f64,
    pub lr_end: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Global gradient-norm ceiling; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Write `epoch_NNNN.pfck` every this many epochs (0 = never).
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 300,
            lr_start: 2e-4,
            lr_end: 1e-6,
            batch_size: 32,
            seed: 0,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            clip_norm: Some(5.0),
            checkpoint_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        self.check().map_err(|(_, msg)| Error::Invalid(msg))
    }

    /// Like [`Self::validate`], but names the offending field.
    pub fn check(&self) -> std::result::Result<(), (&'static str, String)> {
        if self.epochs == 0 {
            return Err(("epochs", "epochs must be at least 1".into()));
        }
        if !(self.lr_end > 0.0) {
            return Err(("lr_end", format!("lr_end must be positive, got {}", self.lr_end)));
        }
        if !(self.lr_start > self.lr_end) {
            return Err((
                "lr_start",
                format!("need lr_start > lr_end, got {} and {}", self.lr_start, self.lr_end),
            ));
        }
        if self.batch_size == 0 {
            return Err(("batch_size", "batch_size must be at least 1".into()));
        }
        if let Some(c) = self.clip_norm {
            if !(c > 0.0 && c.is_finite()) {
                return Err(("clip_norm", format!("clip_norm must be positive, got {c}")));
            }
        }
        Ok(())
    }
}

/// Cosine decay from `lr_start` at epoch 0 to `lr_end` at the last epoch.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::Invalid(format!("epoch {epoch} outside 0..{}", cfg.epochs)));
    }
    if cfg.epochs == 1 {
        return Ok(cfg.lr_start);
    }
    let frac = epoch as f64 / (cfg.epochs - 1) as f64;
    // lr_end + ½Δ(1 + cos) rearranged as a convex blend so both endpoints
    // come out exactly (cos 0 = 1 and cos π = -1 are exact).
    let w = 0.5 * (1.0 + (std::f64::consts::PI * frac).cos());
    Ok(w * cfg.lr_start + (1.0 - w) * cfg.lr_end)
}

/// Rescales all gradients together when their global L2 norm exceeds
/// `max_norm`. Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut [Tensor<f32>], max_norm: f64) -> Result<f64> {
    let norm = grads
        .iter()
        .flat_map(|g| g.data())
        .map(|&v| f64::from(v) * f64::from(v))
        .sum::<f64>()
        .sqrt();
    if !norm.is_finite() {
        return Err(Error::Diverged(format!("gradient norm is {norm}")));
    }
    if norm > max_norm {
        let s = (max_norm / norm) as f32;
        for g in grads.iter_mut() {
            g.data_mut().iter_mut().for_each(|v| *v *= s);
        }
    }
    Ok(norm)
}

/// Adam with bias correction. Moments are kept in f32 alongside the weights.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
    pub t: u64,
}

impl Adam {
    pub fn new(params: &[(String, Tensor<f32>)]) -> Self {
        let zeros = || params.iter().map(|(_, p)| Tensor::zeros(p.shape())).collect();
        Self {
            m: zeros(),
            v: zeros(),
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [(String, Tensor<f32>)], grads: &[Tensor<f32>], lr: f64, cfg: &TrainConfig) {
        self.t += 1;
        let t = self.t as i32;
        let (b1, b2) = (cfg.beta1, cfg.beta2);
        let bc1 = 1.0 - b1.powi(t);
        let bc2 = 1.0 - b2.powi(t);
        let (b1f, b2f, eps) = (b1 as f32, b2 as f32, cfg.adam_eps as f32);
        let step = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        for (i, (_, p)) in params.iter_mut().enumerate() {
            let (m, v) = (self.m[i].data_mut(), self.v[i].data_mut());
            for (((w, &g), m), v) in p.data_mut().iter_mut().zip(grads[i].data()).zip(m).zip(v) {
                *m = b1f * *m + (1.0 - b1f) * g;
                *v = b2f * *v + (1.0 - b2f) * g * g;
                *w -= step * *m / ((*v).sqrt() / bc2_sqrt + eps);
            }
        }
    }
}

/// A model the loop can fit: named f32 parameters plus a scoring graph.
pub trait Network {
    /// JSON stored in checkpoints to rebuild the model.
    fn describe(&self) -> serde_json::Value;
    fn params(&self) -> &[(String, Tensor<f32>)];
    fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)];
    /// Stacks per-example inputs into one batch tensor.
    fn batch_input(&self, inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>>;
    /// `[B, n_classes]` scores; `vars` are bound to `params()` in order.
    fn scores(&self, g: &mut Graph<f32>, vars: &[Var], input: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var>;
}

/// One training or validation item: a chunk's model input and multi-hot target.
#[derive(Clone, Debug)]
pub struct Example {
    pub clip_id: String,
    pub chunk_index: u32,
    pub input: Tensor<f32>,
    pub target: Vec<f32>,
}

impl Example {
    pub fn truth(&self) -> Vec<usize> {
        self.target
            .iter()
            .enumerate()
            .filter(|(_, &v)| v > 0.5)
            .map(|(i, _)| i)
            .collect()
    }
}

/// Counters that locate a run in its schedule.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainState {
    /// Epoch in progress (or next to start when `batch == 0`).
    pub epoch: usize,
    /// Next batch within `epoch`.
    pub batch: usize,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub best_val: Option<f64>,
    /// Running loss sum and batch count for the epoch in progress.
    pub epoch_loss_sum: f64,
    pub epoch_batches: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub lr: f64,
    pub train_loss: f64,
    pub val_top5: Option<f64>,
}

impl LogRow {
    fn csv(&self) -> String {
        let val = self.val_top5.map(|v| format!("{v:.6}")).unwrap_or_default();
        format!(
            "{},{},{:.6e},{:.8},{val}\n",
            self.epoch, self.step, self.lr, self.train_loss
        )
    }
}

const LOG_HEADER: &str = "epoch,step,lr,train_loss,val_top5\n";

/// What the epoch observer wants next.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Continue {
    Yes,
    Stop,
}

pub struct TrainOptions<'a> {
    /// Directory for `log.csv` and checkpoints; nothing is written if `None`.
    pub out_dir: Option<PathBuf>,
    /// Stop (after saving `last.pfck`) once this many optimizer steps exist.
    pub stop_after_steps: Option<u64>,
    /// Called after every epoch with its log row.
    pub on_epoch: Option<&'a mut dyn FnMut(&LogRow, &dyn Network) -> Continue>,
}

impl Default for TrainOptions<'_> {
    fn default() -> Self {
        Self {
            out_dir: None,
            stop_after_steps: None,
            on_epoch: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub state: TrainState,
    pub log: Vec<LogRow>,
}

/// Checkpoint with weights, optimizer moments and run counters.
pub fn training_checkpoint(net: &dyn Network, cfg: &TrainConfig, state: &TrainState, adam: &Adam) -> Checkpoint {
    let mut tensors: Vec<(String, Tensor<f32>)> = net.params().to_vec();
    for (i, (name, _)) in net.params().iter().enumerate() {
        tensors.push((format!("adam.m.{name}"), adam.m[i].clone()));
        tensors.push((format!("adam.v.{name}"), adam.v[i].clone()));
    }
    Checkpoint {
        config: json!({
            "model": net.describe(),
            "train": cfg,
            "state": state,
            "adam_t": adam.t,
        }),
        tensors,
    }
}

/// Restores weights, moments and counters from [`training_checkpoint`] output.
pub fn restore(net: &mut dyn Network, ck: &Checkpoint) -> Result<(TrainState, Adam)> {
    if ck.config.get("model") != Some(&net.describe()) {
        return Err(Error::Invalid("checkpoint was written for a different model".into()));
    }
    let state: TrainState = serde_json::from_value(ck.config["state"].clone())
        .map_err(|e| Error::Invalid(format!("checkpoint state: {e}")))?;
    let t = ck.config["adam_t"]
        .as_u64()
        .ok_or_else(|| Error::Invalid("checkpoint lacks adam_t".into()))?;
    let mut adam = Adam::new(net.params());
    adam.t = t;
    for (i, (name, p)) in net.params_mut().iter_mut().enumerate() {
        let fetch = |n: String| {
            ck.tensor(&n)
                .filter(|t| t.shape() == p.shape())
                .cloned()
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {n} of shape {:?}", p.shape())))
        };
        adam.m[i] = fetch(format!("adam.m.{name}"))?;
        adam.v[i] = fetch(format!("adam.v.{name}"))?;
        *p = fetch(name.clone())?;
    }
    Ok((state, adam))
}

/// Eval-mode scores for every example, in batches. Items carry the clip id so
/// they can be grouped into clips.
pub fn predict(net: &dyn Network, examples: &[Example], batch_size: usize) -> Result<Vec<Scored>> {
    let mut out = Vec::with_capacity(examples.len());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for batch in examples.chunks(batch_size.max(1)) {
        let mut g = Graph::new();
        let vars: Vec<Var> = net.params().iter().map(|(_, t)| g.input(t.clone())).collect();
        let inputs: Vec<&Tensor<f32>> = batch.iter().map(|e| &e.input).collect();
        let input = g.input(net.batch_input(&inputs)?);
        let s = net.scores(&mut g, &vars, input, Mode::Eval, &mut rng)?;
        let c = g.shape(s)[1];
        for (i, e) in batch.iter().enumerate() {
            out.push(Scored {
                id: e.clip_id.clone(),
                scores: g.value(s).data()[i * c..(i + 1) * c]
                    .iter()
                    .map(|&v| f64::from(v))
                    .collect(),
                truth: e.truth(),
            });
        }
    }
    Ok(out)
}

/// Chunk-level top-5 accuracy, or `None` when there is nothing to rank.
fn val_top5(net: &dyn Network, val: &[Example], batch_size: usize) -> Result<Option<f64>> {
    if val.is_empty() || val[0].target.len() < 5 {
        return Ok(None);
    }
    Ok(Some(eval::top5_accuracy(&predict(net, val, batch_size)?)?))
}

fn check_examples(net: &dyn Network, train: &[Example], val: &[Example]) -> Result<()> {
    let Some(first) = train.first() else {
        return Err(Error::Invalid("no training examples".into()));
    };
    for e in train.iter().chain(val) {
        if e.input.shape() != first.input.shape() || e.target.len() != first.target.len() {
            return Err(Error::Invalid(format!(
                "{}#{}: input {:?} / {} targets, expected {:?} / {}",
                e.clip_id,
                e.chunk_index,
                e.input.shape(),
                e.target.len(),
                first.input.shape(),
                first.target.len()
            )));
        }
    }
    net.batch_input(&[&first.input])?;
    Ok(())
}

fn shuffle_rng(seed: u64, epoch: usize) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x5348_5546);
    r.set_stream(epoch as u64);
    r
}

fn dropout_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0x4452_4f50);
    r.set_stream(step);
    r
}

/// Batches (as example indices) of epoch `epoch`.
pub fn epoch_batches(n: usize, cfg: &TrainConfig, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut shuffle_rng(cfg.seed, epoch));
    order.chunks(cfg.batch_size).map(<[usize]>::to_vec).collect()
}

/// One Adam step on `batch`; returns the batch loss.
pub fn train_step(
    net: &mut dyn Network,
    adam: &mut Adam,
    examples: &[&Example],
    lr: f64,
    step: u64,
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut g = Graph::new();
    let vars: Vec<Var> = net.params().iter().map(|(_, t)| g.param(t.clone())).collect();
    let inputs: Vec<&Tensor<f32>> = examples.iter().map(|e| &e.input).collect();
    let input = g.input(net.batch_input(&inputs)?);
    let c = examples[0].target.len();
    let target = Tensor::new(
        vec![examples.len(), c],
        examples.iter().flat_map(|e| e.target.iter().copied()).collect(),
    )?;
    let target = g.input(target);
    let mut rng = dropout_rng(cfg.seed, step);
    let scores = net.scores(&mut g, &vars, input, Mode::Train, &mut rng)?;
    let loss = g.huber(scores, target, 1.0)?;
    let value = f64::from(g.value(loss).item());
    let diverged = |what: String| {
        let ids: Vec<String> = examples
            .iter()
            .map(|e| format!("{}#{}", e.clip_id, e.chunk_index))
            .collect();
        Error::Diverged(format!("{what} at step {step} (lr {lr:e}), batch [{}]", ids.join(", ")))
    };
    if !value.is_finite() {
        return Err(diverged(format!("loss is {value}")));
    }
    g.backward(loss)?;
    let mut grads: Vec<Tensor<f32>> = vars
        .iter()
        .zip(net.params())
        .map(|(&v, (_, p))| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();
    match cfg.clip_norm {
        Some(max) => {
            clip_grad_norm(&mut grads, max).map_err(|e| diverged(e.to_string()))?;
        }
        None => {
            if grads.iter().flat_map(|t| t.data()).any(|v| !v.is_finite()) {
                return Err(diverged("non-finite gradient".into()));
            }
        }
    }
    adam.step(net.params_mut(), &grads, lr, cfg);
    Ok(value)
}

fn append(path: &Path, text: &str) -> Result<()> {
    let mut f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(path)
        .map_err(Error::io(path))?;
    f.write_all(text.as_bytes()).map_err(Error::io(path))
}

/// Trains `net` on `train`, validating on `val` after each epoch.
///
/// With `resume`, weights, optimizer and counters come from that checkpoint
/// and the run continues exactly where it stopped.
pub fn train(
    net: &mut dyn Network,
    train: &[Example],
    val: &[Example],
    cfg: &TrainConfig,
    resume: Option<&Checkpoint>,
    mut opts: TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    check_examples(net, train, val)?;
    let (mut state, mut adam) = match resume {
        Some(ck) => restore(net, ck)?,
        None => (TrainState::default(), Adam::new(net.params())),
    };
    let log_path = opts.out_dir.as_ref().map(|d| d.join("log.csv"));
    if let Some(dir) = &opts.out_dir {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let path = log_path.as_ref().unwrap();
        if resume.is_none() || !path.exists() {
            fs::write(path, LOG_HEADER).map_err(Error::io(path))?;
        }
    }
    let save = |name: &str, net: &dyn Network, state: &TrainState, adam: &Adam| -> Result<()> {
        match &opts.out_dir {
            Some(dir) => training_checkpoint(net, cfg, state, adam).save(&dir.join(name)),
            None => Ok(()),
        }
    };

    let mut log = Vec::new();
    while state.epoch < cfg.epochs {
        let lr = lr_at(state.epoch, cfg)?;
        let batches = epoch_batches(train.len(), cfg, state.epoch);
        while state.batch < batches.len() {
            if opts.stop_after_steps.is_some_and(|s| state.step >= s) {
                save("last.pfck", net, &state, &adam)?;
                return Ok(TrainOutcome { state, log });
            }
            let batch: Vec<&Example> = batches[state.batch].iter().map(|&i| &train[i]).collect();
            let loss = train_step(net, &mut adam, &batch, lr, state.step, cfg)?;
            state.step += 1;
            state.batch += 1;
            state.epoch_loss_sum += loss;
            state.epoch_batches += 1;
        }
        let val_top5 = val_top5(net, val, cfg.batch_size)?;
        let row = LogRow {
            epoch: state.epoch,
            step: state.step,
            lr,
            train_loss: state.epoch_loss_sum / state.epoch_batches as f64,
            val_top5,
        };
        if let Some(path) = &log_path {
            append(path, &row.csv())?;
        }
        let improved = val_top5.is_some_and(|v| state.best_val.is_none_or(|b| v > b));
        state.epoch += 1;
        state.batch = 0;
        state.epoch_loss_sum = 0.0;
        state.epoch_batches = 0;
        if improved {
            state.best_val = val_top5;
            save("best.pfck", net, &state, &adam)?;
        }
        if cfg.checkpoint_every > 0 && state.epoch % cfg.checkpoint_every == 0 {
            save(&format!("epoch_{:04}.pfck", state.epoch), net, &state, &adam)?;
        }
        let verdict = match opts.on_epoch.as_mut() {
            Some(f) => f(&row, net),
            None => Continue::Yes,
        };
        log.push(row);
        if verdict == Continue::Stop {
            break;
        }
    }
    save("last.pfck", net, &state, &adam)?;
    Ok(TrainOutcome { state, log })
}

/// Training examples for `view` from a feature (or embedding) cache, one per
/// cached chunk of each record.
///
/// A record with no cached chunk is an error naming `(clip, chunk 0, view)`.
pub fn examples_from_cache(
    records: &[&crate::dataset::ClipRecord],
    cache: &crate::features::FeatureCache,
    view: crate::View,
    n_classes: usize,
) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    let mut missing = Vec::new();
    for r in records {
        let chunks = cache.chunk_indices(&r.clip_id, view);
        if chunks.is_empty() {
            missing.push(format!("({}, 0, {view})", r.clip_id));
        }
        let target = r.multi_hot(n_classes).bits;
        for c in chunks {
            let rec = cache.get(&r.clip_id, c as usize, view).expect("index just listed");
            out.push(Example {
                clip_id: r.clip_id.clone(),
                chunk_index: c,
                input: rec.to_tensor(),
                target: target.clone(),
            });
        }
    }
    if !missing.is_empty() {
        return Err(Error::Missing(format!("missing features: {}", missing.join(", "))));
    }
    Ok(out)
}
