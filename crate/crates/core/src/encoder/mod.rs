//! Per-view transformer encoder.
//!
//! front-end → + sinusoidal positions → 6 pre-norm layers (token max-pool
//! after layers 2 and 4) → mean over tokens = 64-dim embedding → head
//! `64 → 2048 → GELU → n_classes`.
//!
//! 64 does not split into 12 heads, so attention keeps 12 heads of width 16
//! and projects 64 → 192 for q, k, v and 192 → 64 on the way out.

mod check;
mod checkpoint;

pub use check::EncoderGradcheck;
pub use checkpoint::{Checkpoint, CHECKPOINT_VERSION};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Mode, Scalar, Tensor, Var};
use crate::{Error, Result, View};

pub type ParamSet<T> = Vec<(String, Tensor<T>)>;

const LN_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub view: View,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub head_dim: usize,
    pub mlp_dim: usize,
    pub dropout: f64,
    pub head_hidden: usize,
    pub n_classes: usize,
    pub conv_filters: usize,
    pub conv_kernel: usize,
}

impl EncoderConfig {
    pub fn new(view: View, n_classes: usize) -> Self {
        Self {
            view,
            d_model: 64,
            n_layers: 6,
            n_heads: 12,
            head_dim: 16,
            mlp_dim: 256,
            dropout: 0.3,
            head_hidden: 2048,
            n_classes,
            conv_filters: 128,
            conv_kernel: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.d_model,
            self.n_layers,
            self.n_heads,
            self.head_dim,
            self.mlp_dim,
            self.head_hidden,
            self.n_classes,
            self.conv_filters,
            self.conv_kernel,
        ];
        if dims.contains(&0) {
            return Err(Error::Invalid("encoder dimensions must be at least 1".into()));
        }
        if self.n_layers % 2 != 0 {
            return Err(Error::Invalid(format!("n_layers must be even, got {}", self.n_layers)));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    /// Whether token pooling follows layer `i` (0-based): after every second
    /// layer except the last.
    pub fn pools_after(&self, i: usize) -> bool {
        i % 2 == 1 && i + 1 < self.n_layers
    }

    /// Tokens entering the stack.
    pub fn tokens(&self) -> usize {
        match self.view {
            View::Waveform => self.view.feature_dims().0,
            v => v.feature_dims().1,
        }
    }

    /// Token counts after each pooling stage, starting with the input length.
    pub fn token_schedule(&self, t: usize) -> Vec<usize> {
        let mut out = vec![t];
        for i in 0..self.n_layers {
            if self.pools_after(i) {
                out.push(out.last().unwrap().div_ceil(2));
            }
        }
        out
    }

    fn inner(&self) -> usize {
        self.n_heads * self.head_dim
    }
}

/// `(name, shape)` of every parameter, in a fixed order.
pub fn param_layout(cfg: &EncoderConfig) -> Vec<(String, Vec<usize>)> {
    let d = cfg.d_model;
    let mut out: Vec<(String, Vec<usize>)> = Vec::new();
    let mut p = |name: String, shape: Vec<usize>| out.push((name, shape));
    match cfg.view {
        View::Waveform => {
            p("front.conv.w".into(), vec![cfg.conv_filters, 1, cfg.conv_kernel]);
            p("front.conv.b".into(), vec![cfg.conv_filters]);
            p("front.proj.w".into(), vec![cfg.conv_filters, d]);
            p("front.proj.b".into(), vec![d]);
        }
        v => {
            p("front.w".into(), vec![v.feature_dims().0, d]);
            p("front.b".into(), vec![d]);
        }
    }
    let inner = cfg.inner();
    for i in 0..cfg.n_layers {
        let l = format!("layers.{i}");
        p(format!("{l}.ln1.g"), vec![d]);
        p(format!("{l}.ln1.b"), vec![d]);
        for q in ["q", "k", "v"] {
            p(format!("{l}.attn.w{q}"), vec![d, inner]);
            // A key bias only shifts each softmax row by a constant, so its
            // gradient is identically zero; it is left out.
            if q != "k" {
                p(format!("{l}.attn.b{q}"), vec![inner]);
            }
        }
        p(format!("{l}.attn.wo"), vec![inner, d]);
        p(format!("{l}.attn.bo"), vec![d]);
        p(format!("{l}.ln2.g"), vec![d]);
        p(format!("{l}.ln2.b"), vec![d]);
        p(format!("{l}.mlp.w1"), vec![d, cfg.mlp_dim]);
        p(format!("{l}.mlp.b1"), vec![cfg.mlp_dim]);
        p(format!("{l}.mlp.w2"), vec![cfg.mlp_dim, d]);
        p(format!("{l}.mlp.b2"), vec![d]);
    }
    out.extend(head_layout("head", d, cfg.head_hidden, cfg.n_classes));
    out
}

pub fn head_layout(prefix: &str, input: usize, hidden: usize, classes: usize) -> Vec<(String, Vec<usize>)> {
    vec![
        (format!("{prefix}.w1"), vec![input, hidden]),
        (format!("{prefix}.b1"), vec![hidden]),
        (format!("{prefix}.w2"), vec![hidden, classes]),
        (format!("{prefix}.b2"), vec![classes]),
    ]
}

/// Glorot-uniform weights, zero biases, unit layer-norm gains.
pub fn init_params<T: Scalar>(layout: &[(String, Vec<usize>)], seed: u64) -> ParamSet<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    layout
        .iter()
        .map(|(name, shape)| {
            let t = if name.ends_with(".g") {
                Tensor::full(shape, T::one())
            } else if shape.len() == 1 {
                Tensor::zeros(shape)
            } else {
                let (fan_in, fan_out) = match shape.as_slice() {
                    [i, o] => (*i, *o),
                    [o, i, k] => (i * k, o * k),
                    s => (s[0], s[1..].iter().product()),
                };
                let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                Tensor::from_fn(shape, |_| T::from_f64_lossy(rng.gen_range(-limit..limit)))
            };
            (name.clone(), t)
        })
        .collect()
}

/// Sinusoidal position table `[t, d]`.
pub fn positional_encoding<T: Scalar>(t: usize, d: usize) -> Tensor<T> {
    Tensor::from_fn(&[t, d], |idx| {
        let (pos, j) = (idx / d, idx % d);
        let i2 = (j - j % 2) as f64;
        let angle = pos as f64 / 10000f64.powf(i2 / d as f64);
        T::from_f64_lossy(if j % 2 == 0 { angle.sin() } else { angle.cos() })
    })
}

/// Looks up parameter vars by name.
pub struct Bound<'a, T: Scalar> {
    params: &'a [(String, Tensor<T>)],
    vars: &'a [Var],
}

impl<'a, T: Scalar> Bound<'a, T> {
    pub fn new(params: &'a [(String, Tensor<T>)], vars: &'a [Var]) -> Self {
        Self { params, vars }
    }

    pub fn get(&self, name: &str) -> Result<Var> {
        self.params
            .iter()
            .position(|(n, _)| n == name)
            .map(|i| self.vars[i])
            .ok_or_else(|| Error::Invalid(format!("no parameter {name}")))
    }
}

/// `x[N, in] · w + b`.
pub fn linear<T: Scalar>(g: &mut Graph<T>, x: Var, w: Var, b: Var) -> Result<Var> {
    let y = g.matmul(x, w)?;
    Ok(g.add(y, b)?)
}

/// `in → hidden → GELU → classes` on `[B, in]`.
pub fn head_forward<T: Scalar>(g: &mut Graph<T>, p: &Bound<T>, prefix: &str, x: Var) -> Result<Var> {
    let h = linear(g, x, p.get(&format!("{prefix}.w1"))?, p.get(&format!("{prefix}.b1"))?)?;
    let h = g.gelu(h);
    linear(g, h, p.get(&format!("{prefix}.w2"))?, p.get(&format!("{prefix}.b2"))?)
}

pub struct EncoderOutput {
    /// `[B, d_model]`
    pub embedding: Var,
    /// `[B, n_classes]`
    pub scores: Var,
}

#[derive(Clone, Debug)]
pub struct Encoder<T: Scalar> {
    pub config: EncoderConfig,
    pub params: ParamSet<T>,
}

impl<T: Scalar> Encoder<T> {
    pub fn new(config: EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let params = init_params(&param_layout(&config), seed);
        Ok(Self { config, params })
    }

    /// Rebuilds from named tensors, checking names and shapes.
    pub fn from_params(config: EncoderConfig, mut named: ParamSet<T>) -> Result<Self> {
        config.validate()?;
        let mut params = Vec::new();
        for (name, shape) in param_layout(&config) {
            let i = named
                .iter()
                .position(|(n, _)| *n == name)
                .ok_or_else(|| Error::Invalid(format!("checkpoint lacks tensor {name}")))?;
            let (_, t) = named.swap_remove(i);
            if t.shape() != shape.as_slice() {
                return Err(Error::Invalid(format!(
                    "tensor {name} has shape {:?}, expected {shape:?}",
                    t.shape()
                )));
            }
            params.push((name, t));
        }
        Ok(Self { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> Encoder<U> {
        Encoder {
            config: self.config.clone(),
            params: self.params.iter().map(|(n, t)| (n.clone(), t.cast())).collect(),
        }
    }

    /// Number of scalars in the transformer layers (front-end and head excluded).
    pub fn stack_param_count(&self) -> usize {
        self.params
            .iter()
            .filter(|(n, _)| n.starts_with("layers."))
            .map(|(_, t)| t.numel())
            .sum()
    }

    /// Stacks feature matrices (`rows × cols` as produced by the features
    /// module) into the front-end input layout: `[B·T, F]` token rows for the
    /// linear front-ends, `[B·40, 1, 400]` for the waveform.
    pub fn batch_input<U: Scalar>(&self, feats: &[&Tensor<U>]) -> Result<Tensor<T>> {
        let (rows, cols) = self.config.view.feature_dims();
        let mut data = Vec::with_capacity(feats.len() * rows * cols);
        for f in feats {
            if f.shape() != [rows, cols] {
                return Err(Error::Invalid(format!(
                    "{} feature has shape {:?}, expected [{rows}, {cols}]",
                    self.config.view,
                    f.shape()
                )));
            }
            let v = f.data();
            match self.config.view {
                View::Waveform => data.extend(v.iter().map(|x| T::from_f64_lossy(x.to_f64().unwrap()))),
                _ => {
                    for t in 0..cols {
                        data.extend((0..rows).map(|r| T::from_f64_lossy(v[r * cols + t].to_f64().unwrap())));
                    }
                }
            }
        }
        let b = feats.len();
        let shape = match self.config.view {
            View::Waveform => vec![b * rows, 1, cols],
            _ => vec![b * cols, rows],
        };
        Ok(Tensor::new(shape, data)?)
    }

    /// Front-end tokens `[B, T, d]` including positional encodings.
    pub fn front_end(&self, g: &mut Graph<T>, p: &Bound<T>, input: Var) -> Result<Var> {
        let d = self.config.d_model;
        let (tokens, t) = match self.config.view {
            View::Waveform => {
                let conv = g.conv1d(input, p.get("front.conv.w")?, p.get("front.conv.b")?)?;
                let pooled = g.max_axis(conv, 2)?;
                let y = linear(g, pooled, p.get("front.proj.w")?, p.get("front.proj.b")?)?;
                (y, self.config.view.feature_dims().0)
            }
            v => {
                let y = linear(g, input, p.get("front.w")?, p.get("front.b")?)?;
                (y, v.feature_dims().1)
            }
        };
        let n = g.shape(tokens)[0];
        if n % t != 0 {
            return Err(Error::Invalid(format!("input rows {n} not a multiple of {t} tokens")));
        }
        let x = g.reshape(tokens, &[n / t, t, d])?;
        let pe = g.input(positional_encoding(t, d));
        Ok(g.add(x, pe)?)
    }

    fn attention<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        l: &str,
        h: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let s = g.shape(h).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);
        let (nh, hd) = (self.config.n_heads, self.config.head_dim);
        let flat = g.reshape(h, &[b * t, d])?;
        let mut qkv = Vec::with_capacity(3);
        for q in ["q", "k", "v"] {
            let w = p.get(&format!("{l}.attn.w{q}"))?;
            let y = match q {
                "k" => g.matmul(flat, w)?,
                _ => linear(g, flat, w, p.get(&format!("{l}.attn.b{q}"))?)?,
            };
            let y = g.reshape(y, &[b, t, nh, hd])?;
            let y = g.permute(y, &[0, 2, 1, 3])?;
            qkv.push(g.reshape(y, &[b * nh, t, hd])?);
        }
        let scores = g.bmm(qkv[0], qkv[1], true)?;
        let scores = g.scale(scores, T::from_f64_lossy(1.0 / (hd as f64).sqrt()));
        let attn = g.softmax(scores)?;
        let attn = g.dropout(attn, T::from_f64_lossy(self.config.dropout), mode, rng)?;
        let ctx = g.bmm(attn, qkv[2], false)?;
        let ctx = g.reshape(ctx, &[b, nh, t, hd])?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b * t, nh * hd])?;
        let out = linear(g, ctx, p.get(&format!("{l}.attn.wo"))?, p.get(&format!("{l}.attn.bo"))?)?;
        Ok(g.reshape(out, &[b, t, d])?)
    }

    fn layer<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        i: usize,
        x: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let l = format!("layers.{i}");
        let eps = T::from_f64_lossy(LN_EPS);
        let s = g.shape(x).to_vec();
        let (b, t, d) = (s[0], s[1], s[2]);

        let h = g.layer_norm(x, p.get(&format!("{l}.ln1.g"))?, p.get(&format!("{l}.ln1.b"))?, eps)?;
        let a = self.attention(g, p, &l, h, mode, rng)?;
        let x = g.add(x, a)?;

        let h = g.layer_norm(x, p.get(&format!("{l}.ln2.g"))?, p.get(&format!("{l}.ln2.b"))?, eps)?;
        let h = g.reshape(h, &[b * t, d])?;
        let h = linear(g, h, p.get(&format!("{l}.mlp.w1"))?, p.get(&format!("{l}.mlp.b1"))?)?;
        let h = g.gelu(h);
        let h = g.dropout(h, T::from_f64_lossy(self.config.dropout), mode, rng)?;
        let h = linear(g, h, p.get(&format!("{l}.mlp.w2"))?, p.get(&format!("{l}.mlp.b2"))?)?;
        let h = g.reshape(h, &[b, t, d])?;
        Ok(g.add(x, h)?)
    }

    /// Transformer stack over `[B, T, d]` tokens → `[B, d]` embedding.
    pub fn stack<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        p: &Bound<T>,
        tokens: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<Var> {
        let s = g.shape(tokens);
        if s.len() != 3 || s[1] == 0 {
            return Err(Error::Invalid(format!(
                "transformer input must be [B, T>0, d], got {s:?}"
            )));
        }
        let mut x = tokens;
        for i in 0..self.config.n_layers {
            x = self.layer(g, p, i, x, mode, rng)?;
            if self.config.pools_after(i) {
                x = g.maxpool_tokens(x)?;
            }
        }
        Ok(g.mean_axis(x, 1)?)
    }

    /// Full forward pass given vars bound to `self.params` in order.
    pub fn forward<R: Rng + ?Sized>(
        &self,
        g: &mut Graph<T>,
        vars: &[Var],
        input: Var,
        mode: Mode,
        rng: &mut R,
    ) -> Result<EncoderOutput> {
        let p = Bound::new(&self.params, vars);
        let tokens = self.front_end(g, &p, input)?;
        let embedding = self.stack(g, &p, tokens, mode, rng)?;
        let scores = head_forward(g, &p, "head", embedding)?;
        Ok(EncoderOutput { embedding, scores })
    }

    /// Eval-mode embeddings `[B, d]` and scores `[B, C]` for a batch of features.
    pub fn infer<U: Scalar>(&self, feats: &[&Tensor<U>]) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = self.params.iter().map(|(_, t)| g.input(t.clone())).collect();
        let input = g.input(self.batch_input(feats)?);
        // Eval mode never draws from the RNG.
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = self.forward(&mut g, &vars, input, Mode::Eval, &mut rng)?;
        Ok((g.value(out.embedding).clone(), g.value(out.scores).clone()))
    }
}

impl Encoder<f32> {
    /// Weights-only checkpoint (training checkpoints add optimizer state).
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: serde_json::json!({ "model": crate::trainer::Network::describe(self) }),
            tensors: self.params.clone(),
        }
    }

    /// Rebuilds an encoder from any checkpoint written for one.
    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let model = ck.config.get("model");
        if model.and_then(|m| m.get("kind")).and_then(|k| k.as_str()) != Some("encoder") {
            return Err(Error::Invalid("checkpoint does not hold an encoder".into()));
        }
        let config: EncoderConfig = serde_json::from_value(model.unwrap()["encoder"].clone())
            .map_err(|e| Error::Invalid(format!("encoder config in checkpoint: {e}")))?;
        let named = ck
            .tensors
            .iter()
            .filter(|(n, _)| !n.starts_with("adam."))
            .cloned()
            .collect();
        Self::from_params(config, named)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        Self::from_checkpoint(&Checkpoint::load(path)?)
    }
}

impl crate::trainer::Network for Encoder<f32> {
    fn describe(&self) -> serde_json::Value {
        serde_json::json!({ "kind": "encoder", "encoder": self.config })
    }

    fn params(&self) -> &[(String, Tensor<f32>)] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [(String, Tensor<f32>)] {
        &mut self.params
    }

    fn batch_input(&self, inputs: &[&Tensor<f32>]) -> Result<Tensor<f32>> {
        Encoder::batch_input(self, inputs)
    }

    fn scores(&self, g: &mut Graph<f32>, vars: &[Var], input: Var, mode: Mode, rng: &mut ChaCha8Rng) -> Result<Var> {
        Ok(self.forward(g, vars, input, mode, rng)?.scores)
    }
}
