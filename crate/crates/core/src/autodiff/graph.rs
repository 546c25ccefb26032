use std::sync::Arc;

use rand::Rng;

use super::kernels;
use super::tensor::split_axis;
use super::{AutodiffError, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Forward-pass mode; controls dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// A differentiable operation supplied from outside the engine.
///
/// The engine calls `forward` once when the node is created and `backward`
/// during reverse traversal with the gradient of the node's output.
pub trait CustomOp<T: Scalar>: Send + Sync {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&Tensor<T>]) -> Result<Tensor<T>, AutodiffError>;
    /// Returns one gradient per input (`None` means zero).
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &Tensor<T>,
    ) -> Result<Vec<Option<Tensor<T>>>, AutodiffError>;
}

enum Op<T: Scalar> {
    Leaf,
    MatMul(Var, Var),
    BatchMatMul {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    Gelu(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
    },
    MaxAxis {
        x: Var,
        argmax: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        axis: usize,
    },
    MaxPoolTokens {
        x: Var,
        src: Vec<usize>,
    },
    Concat {
        inputs: Vec<Var>,
        axis: usize,
    },
    Huber {
        pred: Var,
        target: Var,
        delta: T,
    },
    Sum(Var),
    Gather {
        x: Var,
        axis: usize,
        indices: Vec<usize>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Custom {
        op: Arc<dyn CustomOp<T>>,
        inputs: Vec<Var>,
    },
}

impl<T: Scalar> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "bmm",
            Op::Add(..) => "add",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Tanh(_) => "tanh",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax(_) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Dropout { .. } => "dropout",
            Op::Conv1d { .. } => "conv1d",
            Op::MaxAxis { .. } => "max_axis",
            Op::MeanAxis { .. } => "mean_axis",
            Op::MaxPoolTokens { .. } => "maxpool_tokens",
            Op::Concat { .. } => "concat",
            Op::Huber { .. } => "huber",
            Op::Sum(_) => "sum",
            Op::Gather { .. } => "gather",
            Op::Reshape(_) => "reshape",
            Op::Permute { .. } => "permute",
            Op::Custom { op, .. } => op.name(),
        }
    }
}

/// Names of the built-in differentiable primitives.
pub fn op_set() -> &'static [&'static str] {
    &[
        "matmul",
        "bmm",
        "add",
        "mul",
        "scale",
        "tanh",
        "gelu",
        "relu",
        "softmax",
        "layer_norm",
        "dropout",
        "conv1d",
        "max_axis",
        "mean_axis",
        "maxpool_tokens",
        "concat",
        "huber",
        "sum",
        "gather",
        "reshape",
        "permute",
    ]
}

struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    /// Accumulated gradient; populated for leaves that require grad.
    grad: Option<Tensor<T>>,
}

/// Tape of operations recorded in creation (= topological) order.
pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, shapes: &[&[usize]]) -> AutodiffError {
    AutodiffError::Shape {
        op,
        shapes: shapes.iter().map(|s| s.to_vec()).collect(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Trainable leaf; its gradient buffer starts at zero.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        let zeros = Tensor::zeros(value.shape());
        let v = self.push(value, Op::Leaf, true);
        self.nodes[v.0].grad = Some(zeros);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Accumulated gradient of a leaf created with [`Graph::param`].
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    /// First node (in creation order) holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<(usize, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.is_finite())
            .map(|(i, n)| (i, n.op.name()))
    }

    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_non_finite() {
            Some((node, op)) => Err(AutodiffError::NonFinite { op, node }),
            None => Ok(()),
        }
    }

    // ---- primitives -------------------------------------------------------

    /// `[m,k] × [k,n] → [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", &[sa, sb]));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        super::gemm(
            m,
            k,
            n,
            self.value(a).data(),
            false,
            self.value(b).data(),
            false,
            &mut out,
            T::zero(),
        );
        let rg = self.needs(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// Batched product `[B,m,k] × [B,k,n]` (or `[B,n,k]` when `trans_b`) → `[B,m,n]`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let ok =
            sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && if trans_b { sa[2] == sb[2] } else { sa[2] == sb[1] };
        if !ok {
            return Err(shape_err("bmm", &[sa, sb]));
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b { sb[1] } else { sb[2] };
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            super::gemm(
                m,
                k,
                n,
                &av[i * m * k..(i + 1) * m * k],
                false,
                &bv[i * k * n..(i + 1) * k * n],
                trans_b,
                &mut out[i * m * n..(i + 1) * m * n],
                T::zero(),
            );
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![batch, m, n], out)?,
            Op::BatchMatMul { a, b, trans_b },
            rg,
        ))
    }

    fn broadcast_check(&self, op: &'static str, a: Var, b: Var) -> Result<usize, AutodiffError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(shape_err(op, &[sa, sb]));
        }
        Ok(self.value(b).numel().max(1))
    }

    /// Elementwise sum; `b` may match a trailing suffix of `a`'s shape (broadcast).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let period = self.broadcast_check("add", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o + bv[i % period];
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Elementwise product with the same suffix broadcasting rule as [`Graph::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let period = self.broadcast_check("mul", a, b)?;
        let bv = self.value(b).data();
        let mut out = self.value(a).clone();
        for (i, o) in out.data_mut().iter_mut().enumerate() {
            *o = *o * bv[i % period];
        }
        let rg = self.needs(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = *v * s);
        let rg = self.needs(&[a]);
        self.push(out, Op::Scale(a, s), rg)
    }

    fn unary(&mut self, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let mut out = self.value(a).clone();
        out.data_mut().iter_mut().for_each(|v| *v = f(*v));
        let rg = self.needs(&[a]);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.tanh(), Op::Tanh(a))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, kernels::gelu, Op::Gelu(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |v| v.max(T::zero()), Op::Relu(a))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let x = self.value(a);
        if x.rank() == 0 {
            return Err(shape_err("softmax", &[x.shape()]));
        }
        let out = kernels::softmax_last(x);
        let rg = self.needs(&[a]);
        Ok(self.push(out, Op::Softmax(a), rg))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, AutodiffError> {
        let sx = self.shape(x);
        let d = *sx.last().ok_or_else(|| shape_err("layer_norm", &[sx]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err("layer_norm", &[sx, self.shape(gamma), self.shape(beta)]));
        }
        let xv = self.value(x).data();
        let (gv, bv) = (self.value(gamma).data(), self.value(beta).data());
        let rows = xv.len() / d;
        let dn = T::from_usize(d).unwrap();
        let mut out = vec![T::zero(); xv.len()];
        let mut xhat = vec![T::zero(); xv.len()];
        let mut rstd = vec![T::zero(); rows];
        for r in 0..rows {
            let row = &xv[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|v| (*v - mean) * (*v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gv[j] + bv[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.needs(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Inverted dropout: kept activations are scaled by `1/(1-p)` in train mode.
    /// Identity (returns `x` itself) in eval mode or when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: T, mode: Mode, rng: &mut R) -> Result<Var, AutodiffError> {
        if p < T::zero() || p >= T::one() {
            return Err(AutodiffError::Invalid {
                op: "dropout",
                msg: format!("drop probability {p:?} outside [0, 1)"),
            });
        }
        if mode == Mode::Eval || p == T::zero() {
            return Ok(x);
        }
        let keep = T::one() - p;
        let scale = T::one() / keep;
        let p64 = p.to_f64().unwrap();
        let mask: Vec<T> = (0..self.value(x).numel())
            .map(|_| if rng.gen::<f64>() < p64 { T::zero() } else { scale })
            .collect();
        let mut out = self.value(x).clone();
        for (o, m) in out.data_mut().iter_mut().zip(&mask) {
            *o = *o * *m;
        }
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Dropout { x, mask }, rg))
    }

    /// 1-D convolution with "same" output length.
    ///
    /// `x: [N, C_in, L]`, `w: [C_out, C_in, K]`, `b: [C_out]` → `[N, C_out, L]`.
    /// Padding is `(K-1)/2` zeros on the left and the remainder on the right.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, AutodiffError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 3 || sw[1] != sx[1] || sb != [sw[0]] {
            return Err(shape_err("conv1d", &[sx, sw, sb]));
        }
        let out = kernels::conv1d_same(self.value(x), self.value(w), self.value(b));
        let rg = self.needs(&[x, w, b]);
        Ok(self.push(out, Op::Conv1d { x, w, b }, rg))
    }

    /// Maximum over `axis` (axis removed). Ties resolve to the lowest index.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(shape_err("max_axis", &[&sx]));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * inner);
        let mut argmax = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut best = base;
                for j in 1..len {
                    let idx = base + j * inner;
                    if xv[idx] > xv[best] {
                        best = idx;
                    }
                }
                out.push(xv[best]);
                argmax.push(best);
            }
        }
        let mut shape = sx;
        shape.remove(axis);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MaxAxis { x, argmax }, rg))
    }

    /// Arithmetic mean over `axis` (axis removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || sx[axis] == 0 {
            return Err(shape_err("mean_axis", &[&sx]));
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let inv = T::one() / T::from_usize(len).unwrap();
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let row = &xv[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (acc, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(row) {
                    *acc = *acc + *v;
                }
            }
        }
        out.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = sx;
        shape.remove(axis);
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(shape, out)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Token max-pooling on `[B, T, D]`: window 2, stride 2; an odd final token
    /// is carried through as its own output token.
    pub fn maxpool_tokens(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 || sx[1] == 0 {
            return Err(shape_err("maxpool_tokens", &[&sx]));
        }
        let (b, t, d) = (sx[0], sx[1], sx[2]);
        let t_out = t.div_ceil(2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(b * t_out * d);
        let mut src = Vec::with_capacity(b * t_out * d);
        for bi in 0..b {
            for k in 0..t_out {
                for j in 0..d {
                    let first = (bi * t + 2 * k) * d + j;
                    let mut best = first;
                    if 2 * k + 1 < t {
                        let second = first + d;
                        if xv[second] > xv[first] {
                            best = second;
                        }
                    }
                    out.push(xv[best]);
                    src.push(best);
                }
            }
        }
        let rg = self.needs(&[x]);
        Ok(self.push(Tensor::new(vec![b, t_out, d], out)?, Op::MaxPoolTokens { x, src }, rg))
    }

    /// Concatenation along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var, AutodiffError> {
        let first = inputs.first().ok_or_else(|| AutodiffError::Invalid {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(shape_err("concat", &[&s0]));
        }
        let mut total = 0;
        for v in inputs {
            let s = self.shape(*v);
            let compatible =
                s.len() == s0.len() && s.iter().zip(&s0).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
                return Err(shape_err("concat", &shapes));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&s0, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for v in inputs {
                let len = self.shape(*v)[axis];
                let data = self.value(*v).data();
                out.extend_from_slice(&data[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let rg = self.needs(inputs);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Mean Huber loss with threshold `delta` over all elements → scalar.
    pub fn huber(&mut self, pred: Var, target: Var, delta: T) -> Result<Var, AutodiffError> {
        let (sp, st) = (self.shape(pred), self.shape(target));
        if sp != st || self.value(pred).numel() == 0 {
            return Err(shape_err("huber", &[sp, st]));
        }
        let value = kernels::huber_mean(self.value(pred).data(), self.value(target).data(), delta);
        let rg = self.needs(&[pred, target]);
        Ok(self.push(Tensor::scalar(value), Op::Huber { pred, target, delta }, rg))
    }

    /// Sum of all elements → scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        let rg = self.needs(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, indices: &[usize]) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() || indices.iter().any(|&i| i >= sx[axis]) {
            return Err(AutodiffError::Invalid {
                op: "gather",
                msg: format!("indices {indices:?} out of range for axis {axis} of {sx:?}"),
            });
        }
        let (outer, len, inner) = split_axis(&sx, axis);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(outer * indices.len() * inner);
        for o in 0..outer {
            for &i in indices {
                let start = (o * len + i) * inner;
                out.extend_from_slice(&xv[start..start + inner]);
            }
        }
        let mut shape = sx;
        shape[axis] = indices.len();
        let rg = self.needs(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Gather {
                x,
                axis,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let idx: Vec<usize> = (start..start + len).collect();
        self.gather(x, axis, &idx)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, AutodiffError> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var, AutodiffError> {
        let sx = self.shape(x).to_vec();
        let mut seen = vec![false; sx.len()];
        let valid = perm.len() == sx.len()
            && perm
                .iter()
                .all(|&p| p < sx.len() && !std::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(AutodiffError::Invalid {
                op: "permute",
                msg: format!("permutation {perm:?} invalid for shape {sx:?}"),
            });
        }
        let out = kernels::permute(self.value(x), perm);
        let rg = self.needs(&[x]);
        Ok(self.push(out, Op::Permute { x, perm: perm.to_vec() }, rg))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(shape_err("transpose", &[self.shape(x)]));
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn custom(&mut self, op: Arc<dyn CustomOp<T>>, inputs: &[Var]) -> Result<Var, AutodiffError> {
        let values: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
        let out = op.forward(&values)?;
        let rg = self.needs(inputs);
        Ok(self.push(
            out,
            Op::Custom {
                op,
                inputs: inputs.to_vec(),
            },
            rg,
        ))
    }

    // ---- reverse mode -----------------------------------------------------

    /// Reverse-mode sweep from a scalar `loss`. Gradients are added (`+=`) into
    /// the buffers of every leaf created by [`Graph::param`].
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let ls = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(AutodiffError::NonScalarLoss(ls.to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(ls, T::one()));
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                if let Some(buf) = self.nodes[idx].grad.as_mut() {
                    buf.add_assign(&g);
                }
                continue;
            }
            for (var, gi) in self.backward_node(idx, &g)? {
                if !self.nodes[var.0].requires_grad {
                    continue;
                }
                match &mut grads[var.0] {
                    Some(acc) => acc.add_assign(&gi),
                    slot @ None => *slot = Some(gi),
                }
            }
        }
        Ok(())
    }

    fn backward_node(&self, idx: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>, AutodiffError> {
        let node = &self.nodes[idx];
        let out = &node.value;
        let gd = g.data();
        let val = |v: &Var| &self.nodes[v.0].value;
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        let mut res = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if rg(a) {
                    let mut ga = vec![T::zero(); m * k];
                    super::gemm(m, n, k, gd, false, val(b).data(), true, &mut ga, T::zero());
                    res.push((*a, Tensor::new(sa.to_vec(), ga)?));
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); k * n];
                    super::gemm(k, m, n, val(a).data(), true, gd, false, &mut gb, T::zero());
                    res.push((*b, Tensor::new(sb.to_vec(), gb)?));
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (sa, sb) = (val(a).shape(), val(b).shape());
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = if *trans_b { sb[1] } else { sb[2] };
                let (av, bv) = (val(a).data(), val(b).data());
                if rg(a) {
                    let mut ga = vec![T::zero(); batch * m * k];
                    for i in 0..batch {
                        // trans_b: out = A Bᵀ, B stored [n,k] → gA = g B; else gA = g Bᵀ.
                        super::gemm(
                            m,
                            n,
                            k,
                            &gd[i * m * n..(i + 1) * m * n],
                            false,
                            &bv[i * k * n..(i + 1) * k * n],
                            !*trans_b,
                            &mut ga[i * m * k..(i + 1) * m * k],
                            T::zero(),
                        );
                    }
                    res.push((*a, Tensor::new(sa.to_vec(), ga)?));
                }
                if rg(b) {
                    let mut gb = vec![T::zero(); batch * k * n];
                    for i in 0..batch {
                        let (gi, ai) = (&gd[i * m * n..(i + 1) * m * n], &av[i * m * k..(i + 1) * m * k]);
                        let dst = &mut gb[i * k * n..(i + 1) * k * n];
                        if *trans_b {
                            super::gemm(n, m, k, gi, true, ai, false, dst, T::zero());
                        } else {
                            super::gemm(k, m, n, ai, true, gi, false, dst, T::zero());
                        }
                    }
                    res.push((*b, Tensor::new(sb.to_vec(), gb)?));
                }
            }
            Op::Add(a, b) => {
                if rg(a) {
                    res.push((*a, g.clone()));
                }
                if rg(b) {
                    res.push((*b, kernels::reduce_to_suffix(gd, val(b).shape())));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                let period = bv.len().max(1);
                if rg(a) {
                    let ga: Vec<T> = gd.iter().enumerate().map(|(i, g)| *g * bv[i % period]).collect();
                    res.push((*a, Tensor::new(val(a).shape().to_vec(), ga)?));
                }
                if rg(b) {
                    let prod: Vec<T> = gd.iter().zip(av).map(|(g, x)| *g * *x).collect();
                    res.push((*b, kernels::reduce_to_suffix(&prod, val(b).shape())));
                }
            }
            Op::Scale(a, s) => {
                let ga: Vec<T> = gd.iter().map(|g| *g * *s).collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), ga)?));
            }
            Op::Tanh(a) => {
                let ga: Vec<T> = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| *g * (T::one() - *y * *y))
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), ga)?));
            }
            Op::Gelu(a) => {
                let ga: Vec<T> = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| *g * kernels::gelu_grad(*x))
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), ga)?));
            }
            Op::Relu(a) => {
                let ga: Vec<T> = gd
                    .iter()
                    .zip(val(a).data())
                    .map(|(g, x)| if *x > T::zero() { *g } else { T::zero() })
                    .collect();
                res.push((*a, Tensor::new(g.shape().to_vec(), ga)?));
            }
            Op::Softmax(a) => {
                res.push((*a, kernels::softmax_last_backward(out, g)));
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = *out.shape().last().unwrap();
                let gv = val(gamma).data();
                let rows = gd.len() / d;
                let dn = T::from_usize(d).unwrap();
                if rg(x) {
                    let mut gx = vec![T::zero(); gd.len()];
                    for r in 0..rows {
                        let (gr, hr) = (&gd[r * d..(r + 1) * d], &xhat[r * d..(r + 1) * d]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            s1 = s1 + dh;
                            s2 = s2 + dh * hr[j];
                        }
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            gx[r * d + j] = rstd[r] / dn * (dn * dh - s1 - hr[j] * s2);
                        }
                    }
                    res.push((*x, Tensor::new(out.shape().to_vec(), gx)?));
                }
                if rg(gamma) {
                    let mut gg = vec![T::zero(); d];
                    for (i, (gi, h)) in gd.iter().zip(xhat).enumerate() {
                        gg[i % d] = gg[i % d] + *gi * *h;
                    }
                    res.push((*gamma, Tensor::new(vec![d], gg)?));
                }
                if rg(beta) {
                    res.push((*beta, kernels::reduce_to_suffix(gd, &[d])));
                }
            }
            Op::Dropout { x, mask } => {
                let gx: Vec<T> = gd.iter().zip(mask).map(|(g, m)| *g * *m).collect();
                res.push((*x, Tensor::new(g.shape().to_vec(), gx)?));
            }
            Op::Conv1d { x, w, b } => {
                let (gx, gw, gb) = kernels::conv1d_same_backward(val(x), val(w), g, rg(x), rg(w));
                if let Some(gx) = gx {
                    res.push((*x, gx));
                }
                if let Some(gw) = gw {
                    res.push((*w, gw));
                }
                if rg(b) {
                    res.push((*b, gb));
                }
            }
            Op::MaxAxis { x, argmax } => {
                let mut gx = vec![T::zero(); val(x).numel()];
                for (gi, &src) in gd.iter().zip(argmax) {
                    gx[src] = gx[src] + *gi;
                }
                res.push((*x, Tensor::new(val(x).shape().to_vec(), gx)?));
            }
            Op::MeanAxis { x, axis } => {
                let sx = val(x).shape();
                let (outer, len, inner) = split_axis(sx, *axis);
                let inv = T::one() / T::from_usize(len).unwrap();
                let mut gx = vec![T::zero(); val(x).numel()];
                for o in 0..outer {
                    for j in 0..len {
                        for i in 0..inner {
                            gx[(o * len + j) * inner + i] = gd[o * inner + i] * inv;
                        }
                    }
                }
                res.push((*x, Tensor::new(sx.to_vec(), gx)?));
            }
            Op::MaxPoolTokens { x, src } => {
                let mut gx = vec![T::zero(); val(x).numel()];
                for (gi, &s) in gd.iter().zip(src) {
                    gx[s] = gx[s] + *gi;
                }
                res.push((*x, Tensor::new(val(x).shape().to_vec(), gx)?));
            }
            Op::Concat { inputs, axis } => {
                let (outer, total, inner) = split_axis(out.shape(), *axis);
                let mut offset = 0;
                for v in inputs {
                    let len = val(v).shape()[*axis];
                    if rg(v) {
                        let mut gv = Vec::with_capacity(val(v).numel());
                        for o in 0..outer {
                            let start = (o * total + offset) * inner;
                            gv.extend_from_slice(&gd[start..start + len * inner]);
                        }
                        res.push((*v, Tensor::new(val(v).shape().to_vec(), gv)?));
                    }
                    offset += len;
                }
            }
            Op::Huber { pred, target, delta } => {
                let (pv, tv) = (val(pred).data(), val(target).data());
                let scale = gd[0] / T::from_usize(pv.len()).unwrap();
                let dp: Vec<T> = pv
                    .iter()
                    .zip(tv)
                    .map(|(p, t)| kernels::huber_grad(*p - *t, *delta) * scale)
                    .collect();
                if rg(target) {
                    let dt: Vec<T> = dp.iter().map(|v| -*v).collect();
                    res.push((*target, Tensor::new(val(target).shape().to_vec(), dt)?));
                }
                if rg(pred) {
                    res.push((*pred, Tensor::new(val(pred).shape().to_vec(), dp)?));
                }
            }
            Op::Sum(x) => {
                res.push((*x, Tensor::full(val(x).shape(), gd[0])));
            }
            Op::Gather { x, axis, indices } => {
                let sx = val(x).shape();
                let (outer, len, inner) = split_axis(sx, *axis);
                let mut gx = vec![T::zero(); val(x).numel()];
                for o in 0..outer {
                    for (k, &i) in indices.iter().enumerate() {
                        let src = (o * indices.len() + k) * inner;
                        let dst = (o * len + i) * inner;
                        for j in 0..inner {
                            gx[dst + j] = gx[dst + j] + gd[src + j];
                        }
                    }
                }
                res.push((*x, Tensor::new(sx.to_vec(), gx)?));
            }
            Op::Reshape(x) => {
                res.push((*x, g.clone().reshaped(val(x).shape())?));
            }
            Op::Permute { x, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                res.push((*x, kernels::permute(g, &inv)));
            }
            Op::Custom { op, inputs } => {
                let values: Vec<&Tensor<T>> = inputs.iter().map(val).collect();
                let grads = op.backward(&values, out, g)?;
                if grads.len() != inputs.len() {
                    return Err(AutodiffError::Invalid {
                        op: op.name(),
                        msg: format!("backward returned {} grads for {} inputs", grads.len(), inputs.len()),
                    });
                }
                for (v, gi) in inputs.iter().zip(grads) {
                    if let Some(gi) = gi {
                        if gi.shape() != val(v).shape() {
                            return Err(shape_err(op.name(), &[gi.shape(), val(v).shape()]));
                        }
                        res.push((*v, gi));
                    }
                }
            }
        }
        Ok(res)
    }
}
