//! Finite-difference verification of analytic gradients.

use std::fmt;

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{AutodiffError, Graph, Mode, Tensor, Var};

#[derive(Clone, Debug)]
pub struct GradcheckConfig {
    /// Central-difference step.
    pub eps: f64,
    /// Coordinates sampled per parameter tensor (all of them if the tensor is smaller).
    pub coords_per_param: usize,
    /// Pass threshold on `|a - n| / max(|a|, |n|, floor)`.
    pub tolerance: f64,
    /// Denominator floor of the relative error. Gradients below it are judged
    /// on absolute error `tolerance · floor`.
    pub floor: f64,
    pub seed: u64,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            eps: 1e-5,
            coords_per_param: 20,
            tolerance: 1e-5,
            floor: 1e-8,
            seed: 0,
        }
    }
}

/// A double-precision model whose scalar loss can be rebuilt for any
/// parameter values.
pub trait GradcheckModel {
    fn name(&self) -> String;
    fn parameters(&self) -> Vec<(String, Tensor<f64>)>;
    /// Builds the loss given parameter vars in the order of [`Self::parameters`].
    fn loss(&self, g: &mut Graph<f64>, params: &[Var]) -> Result<Var, AutodiffError>;
}

#[derive(Clone, Debug)]
pub struct ParamReport {
    pub name: String,
    pub numel: usize,
    pub coords_checked: usize,
    pub max_rel_error: f64,
    /// (flat index, analytic, numeric) at the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

#[derive(Clone, Debug)]
pub struct GradcheckReport {
    pub model: String,
    pub params: Vec<ParamReport>,
    pub max_rel_error: f64,
    pub tolerance: f64,
    pub passed: bool,
    /// Set when evaluation itself failed (non-finite values, shape errors).
    pub failure: Option<String>,
}

impl fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(
            f,
            "{status} {}: max rel err {:.3e} (tol {:.0e}, {} tensors)",
            self.model,
            self.max_rel_error,
            self.tolerance,
            self.params.len()
        )?;
        if let Some(msg) = &self.failure {
            write!(f, " [{msg}]")?;
        }
        Ok(())
    }
}

pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

fn eval_loss<M: GradcheckModel + ?Sized>(model: &M, params: &[(String, Tensor<f64>)]) -> Result<f64, String> {
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.input(t.clone())).collect();
    let loss = model.loss(&mut g, &vars).map_err(|e| e.to_string())?;
    if let Some((node, op)) = g.first_non_finite() {
        return Err(format!("non-finite value from {op} at node {node}"));
    }
    Ok(g.value(loss).item())
}

/// Compares analytic gradients with central differences on sampled coordinates
/// of every parameter tensor.
pub fn gradcheck<M: GradcheckModel + ?Sized>(model: &M, cfg: &GradcheckConfig) -> GradcheckReport {
    let mut report = GradcheckReport {
        model: model.name(),
        params: Vec::new(),
        max_rel_error: 0.0,
        tolerance: cfg.tolerance,
        passed: false,
        failure: None,
    };
    let params = model.parameters();

    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|(_, t)| g.param(t.clone())).collect();
    let analytic = model
        .loss(&mut g, &vars)
        .and_then(|loss| {
            g.check_finite()?;
            g.backward(loss)
        })
        .map(|_| {
            vars.iter()
                .map(|v| g.grad(*v).cloned().expect("param leaves carry grads"))
                .collect::<Vec<_>>()
        });
    let analytic = match analytic {
        Ok(a) => a,
        Err(e) => {
            report.failure = Some(e.to_string());
            return report;
        }
    };
    drop(g);

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut work = params.clone();
    for (pi, (name, tensor)) in params.iter().enumerate() {
        let numel = tensor.numel();
        let coords: Vec<usize> = if numel <= cfg.coords_per_param {
            (0..numel).collect()
        } else {
            let mut idx = sample(&mut rng, numel, cfg.coords_per_param).into_vec();
            idx.sort_unstable();
            idx
        };
        let mut pr = ParamReport {
            name: name.clone(),
            numel,
            coords_checked: coords.len(),
            max_rel_error: 0.0,
            worst: None,
        };
        for &c in &coords {
            let orig = tensor.data()[c];
            work[pi].1.data_mut()[c] = orig + cfg.eps;
            let plus = eval_loss(model, &work);
            work[pi].1.data_mut()[c] = orig - cfg.eps;
            let minus = eval_loss(model, &work);
            work[pi].1.data_mut()[c] = orig;
            let (plus, minus) = match (plus, minus) {
                (Ok(p), Ok(m)) => (p, m),
                (Err(e), _) | (_, Err(e)) => {
                    report.failure = Some(format!("{name}[{c}]: {e}"));
                    report.params.push(pr);
                    report.max_rel_error = f64::INFINITY;
                    return report;
                }
            };
            let numeric = (plus - minus) / (2.0 * cfg.eps);
            let a = analytic[pi].data()[c];
            let err = relative_error(a, numeric, cfg.floor);
            if err > pr.max_rel_error || pr.worst.is_none() {
                pr.max_rel_error = err.max(pr.max_rel_error);
                pr.worst = Some((c, a, numeric));
            }
        }
        report.max_rel_error = report.max_rel_error.max(pr.max_rel_error);
        report.params.push(pr);
    }
    report.passed = report.max_rel_error < cfg.tolerance;
    report
}

/// A single built-in primitive wrapped in a random-shape scalar loss.
///
/// Non-scalar outputs are reduced as `sum(out ⊙ R)` with a fixed random `R`
/// so that every output element contributes a distinct weight.
pub struct PrimitiveCase {
    pub op: &'static str,
    pub seed: u64,
    inputs: Vec<(String, Tensor<f64>)>,
    weights: Option<Tensor<f64>>,
    aux: Vec<usize>,
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.gen_range(-1.0..1.0))
}

/// Builds the test case for one op from [`super::op_set`].
pub fn primitive_case(op: &'static str, seed: u64) -> Result<PrimitiveCase, AutodiffError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut dim = |lo: usize, hi: usize| rng.gen_range(lo..=hi);
    let (a, b, c, d) = (dim(1, 4), dim(1, 5), dim(2, 5), dim(1, 3));
    let mut aux = Vec::new();
    let shapes: Vec<Vec<usize>> = match op {
        "matmul" => vec![vec![a, b], vec![b, c]],
        "bmm" => {
            aux.push(seed as usize % 2);
            if aux[0] == 1 {
                vec![vec![d, a, b], vec![d, c, b]]
            } else {
                vec![vec![d, a, b], vec![d, b, c]]
            }
        }
        "add" | "mul" => {
            aux.push(seed as usize % 2);
            if aux[0] == 1 {
                vec![vec![a, c], vec![c]]
            } else {
                vec![vec![a, c], vec![a, c]]
            }
        }
        "scale" | "tanh" | "gelu" | "relu" | "softmax" | "dropout" | "sum" => vec![vec![a, c]],
        // Two features normalize to ±1 whatever the input, leaving only an
        // ε-sized gradient that finite differences cannot resolve.
        "layer_norm" => {
            let c = c.max(3);
            vec![vec![a, c], vec![c], vec![c]]
        }
        "conv1d" => {
            let (cin, cout, k, len) = (d, dim(1, 3), dim(1, 5), dim(3, 9));
            vec![vec![a, cin, len], vec![cout, cin, k], vec![cout]]
        }
        "max_axis" | "mean_axis" => {
            aux.push(seed as usize % 3);
            vec![vec![a, c, d + 1]]
        }
        "maxpool_tokens" => vec![vec![a, dim(1, 7), d]],
        "concat" => {
            aux.push(seed as usize % 2);
            if aux[0] == 1 {
                vec![vec![a, c], vec![a, b]]
            } else {
                vec![vec![a, c], vec![b, c]]
            }
        }
        "huber" => vec![vec![a, c], vec![a, c]],
        "gather" => {
            let n = dim(1, 6);
            let mut idx_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(1));
            aux.extend((0..n).map(|_| idx_rng.gen_range(0..c)));
            vec![vec![a, c]]
        }
        "reshape" => vec![vec![a, c, d]],
        "permute" => vec![vec![a, c, d]],
        other => {
            return Err(AutodiffError::Invalid {
                op: "gradcheck",
                msg: format!("no primitive case for {other}"),
            })
        }
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs: Vec<(String, Tensor<f64>)> = shapes
        .iter()
        .enumerate()
        .map(|(i, s)| (format!("{op}.in{i}"), rand_tensor(&mut rng, s)))
        .collect();
    match op {
        // Spread residuals across both branches of the loss.
        "huber" => inputs[0].1.data_mut().iter_mut().for_each(|v| *v *= 3.0),
        // Keep every input well clear of the kink at zero.
        "relu" => inputs[0]
            .1
            .data_mut()
            .iter_mut()
            .for_each(|v| *v = v.signum() * (0.05 + v.abs())),
        // Distinct values spaced ≥ 0.02 apart, so no pair is within ε of a tie.
        "max_axis" | "maxpool_tokens" => {
            let data = inputs[0].1.data_mut();
            let n = data.len() as f64;
            let mut levels: Vec<f64> = (0..data.len()).map(|i| 2.0 * i as f64 / n - 1.0).collect();
            levels.shuffle(&mut rng);
            data.copy_from_slice(&levels);
        }
        _ => {}
    }
    let mut case = PrimitiveCase {
        op,
        seed,
        inputs,
        weights: None,
        aux,
    };
    if op != "huber" && op != "sum" {
        let out_shape = {
            let mut g = Graph::new();
            let vars: Vec<Var> = case.inputs.iter().map(|(_, t)| g.input(t.clone())).collect();
            let out = case.forward(&mut g, &vars)?;
            g.shape(out).to_vec()
        };
        // Weights bounded away from zero keep every output gradient resolvable.
        case.weights = Some(Tensor::from_fn(&out_shape, |_| {
            let m = rng.gen_range(0.5..1.0);
            if rng.gen_bool(0.5) {
                m
            } else {
                -m
            }
        }));
    }
    Ok(case)
}

impl PrimitiveCase {
    fn forward(&self, g: &mut Graph<f64>, v: &[Var]) -> Result<Var, AutodiffError> {
        match self.op {
            "matmul" => g.matmul(v[0], v[1]),
            "bmm" => g.bmm(v[0], v[1], self.aux[0] == 1),
            "add" => g.add(v[0], v[1]),
            "mul" => g.mul(v[0], v[1]),
            "scale" => Ok(g.scale(v[0], -1.7)),
            "tanh" => Ok(g.tanh(v[0])),
            "gelu" => Ok(g.gelu(v[0])),
            "relu" => Ok(g.relu(v[0])),
            "softmax" => g.softmax(v[0]),
            "layer_norm" => g.layer_norm(v[0], v[1], v[2], 1e-5),
            "dropout" => {
                // Fixed mask per evaluation keeps the function deterministic.
                let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
                g.dropout(v[0], 0.3, Mode::Train, &mut rng)
            }
            "conv1d" => g.conv1d(v[0], v[1], v[2]),
            "max_axis" => g.max_axis(v[0], self.aux[0]),
            "mean_axis" => g.mean_axis(v[0], self.aux[0]),
            "maxpool_tokens" => g.maxpool_tokens(v[0]),
            "concat" => g.concat(&[v[0], v[1]], self.aux[0]),
            "huber" => g.huber(v[0], v[1], 1.0),
            "sum" => Ok(g.sum(v[0])),
            "gather" => g.gather(v[0], 1, &self.aux),
            "reshape" => {
                let n = g.value(v[0]).numel();
                g.reshape(v[0], &[n])
            }
            "permute" => g.permute(v[0], &[2, 0, 1]),
            other => Err(AutodiffError::Invalid {
                op: "gradcheck",
                msg: format!("no primitive case for {other}"),
            }),
        }
    }
}

impl GradcheckModel for PrimitiveCase {
    fn name(&self) -> String {
        format!("{} (seed {})", self.op, self.seed)
    }

    fn parameters(&self) -> Vec<(String, Tensor<f64>)> {
        self.inputs.clone()
    }

    fn loss(&self, g: &mut Graph<f64>, params: &[Var]) -> Result<Var, AutodiffError> {
        let out = self.forward(g, params)?;
        match &self.weights {
            Some(w) => {
                let w = g.input(w.clone());
                let prod = g.mul(out, w)?;
                Ok(g.sum(prod))
            }
            None => Ok(out),
        }
    }
}
