//! Finite-difference harness for a complete encoder in double precision.

use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{Bound, Encoder, EncoderConfig};
use crate::autodiff::{AutodiffError, GradcheckModel, Graph, Mode, Tensor, Var};
use crate::View;

/// One random chunk through front-end, stack, head and Huber loss, dropout
/// off.
///
/// Targets are a random multi-hot vector, as in training. Waveform inputs
/// are one impulse per patch, which keeps the max over conv positions clear
/// of near-ties that a perturbation could flip.
pub struct EncoderGradcheck {
    encoder: Encoder<f64>,
    input: Tensor<f64>,
    target: Tensor<f64>,
    /// Pooled conv output keyed by the conv parameters it came from.
    conv_cache: Mutex<Option<(Vec<f64>, Tensor<f64>)>>,
}

impl EncoderGradcheck {
    pub fn new(config: EncoderConfig, seed: u64) -> crate::Result<Self> {
        let encoder = Encoder::<f64>::new(config, seed)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let (rows, cols) = encoder.config.view.feature_dims();
        let feat = match encoder.config.view {
            View::Pitch => Tensor::from_fn(&[rows, cols], |_| f64::from(rng.gen_bool(0.2) as u8)),
            View::Timbre => Tensor::from_fn(&[rows, cols], |_| rng.gen_range(-3.0..3.0)),
            View::Waveform => {
                let mut t = Tensor::zeros(&[rows, cols]);
                for r in 0..rows {
                    let at = rng.gen_range(0..cols);
                    let amp = rng.gen_range(0.5..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
                    t.data_mut()[r * cols + at] = amp;
                }
                t
            }
            View::Neuralogram => Tensor::from_fn(&[rows, cols], |_| rng.gen_range(0.0..1.0)),
        };
        let input = encoder.batch_input(&[&feat])?;
        let c = encoder.config.n_classes;
        let target = Tensor::from_fn(&[1, c], |_| f64::from(rng.gen_bool(0.25) as u8));
        Ok(Self {
            encoder,
            input,
            target,
            conv_cache: Mutex::new(None),
        })
    }

    pub fn encoder(&self) -> &Encoder<f64> {
        &self.encoder
    }

    fn tokens(&self, g: &mut Graph<f64>, p: &Bound<f64>, input: Var) -> crate::Result<Var> {
        if self.encoder.config.view != View::Waveform {
            return self.encoder.front_end(g, p, input);
        }
        let (w, b) = (p.get("front.conv.w")?, p.get("front.conv.b")?);
        let differentiating = g.grad(w).is_some() || g.grad(b).is_some();
        let key: Vec<f64> = g.value(w).data().iter().chain(g.value(b).data()).copied().collect();
        let cached = if differentiating {
            None
        } else {
            let cache = self.conv_cache.lock().unwrap();
            cache.as_ref().filter(|(k, _)| *k == key).map(|(_, t)| t.clone())
        };
        let pooled = match cached {
            Some(t) => g.input(t),
            None => {
                let conv = g.conv1d(input, w, b)?;
                let pooled = g.max_axis(conv, 2)?;
                if !differentiating {
                    *self.conv_cache.lock().unwrap() = Some((key, g.value(pooled).clone()));
                }
                pooled
            }
        };
        let y = super::linear(g, pooled, p.get("front.proj.w")?, p.get("front.proj.b")?)?;
        let (t, d) = (self.encoder.config.tokens(), self.encoder.config.d_model);
        let n = g.shape(y)[0];
        let x = g.reshape(y, &[n / t, t, d])?;
        let pe = g.input(super::positional_encoding(t, d));
        Ok(g.add(x, pe)?)
    }
}

fn to_autodiff(e: crate::Error) -> AutodiffError {
    match e {
        crate::Error::Autodiff(e) => e,
        other => AutodiffError::Invalid {
            op: "encoder",
            msg: other.to_string(),
        },
    }
}

impl GradcheckModel for EncoderGradcheck {
    fn name(&self) -> String {
        format!("encoder[{}]", self.encoder.config.view)
    }

    fn parameters(&self) -> Vec<(String, Tensor<f64>)> {
        self.encoder.params.clone()
    }

    fn loss(&self, g: &mut Graph<f64>, params: &[Var]) -> Result<Var, AutodiffError> {
        let p = Bound::new(&self.encoder.params, params);
        let input = g.input(self.input.clone());
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tokens = self.tokens(g, &p, input).map_err(to_autodiff)?;
        let emb = self
            .encoder
            .stack(g, &p, tokens, Mode::Eval, &mut rng)
            .map_err(to_autodiff)?;
        let scores = super::head_forward(g, &p, "head", emb).map_err(to_autodiff)?;
        let target = g.input(self.target.clone());
        g.huber(scores, target, 1.0)
    }
}
