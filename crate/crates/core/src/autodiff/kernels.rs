//! Forward/backward numeric kernels shared by the graph primitives.

use super::tensor::strides;
use super::{Scalar, Tensor};

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_COEFF: f64 = 0.044_715;

// Tanh-approximated GELU written as x·σ(2u): 0.5·(1 + tanh(u)) = σ(2u), but
// the sigmoid form avoids cancelling 1 + tanh(u) ≈ 0 for large negative x.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_COEFF);
    let two_u = (c + c) * (x + a * x * x * x);
    T::one() / (T::one() + (-two_u).exp())
}

pub fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::from_f64_lossy(SQRT_2_OVER_PI);
    let a = T::from_f64_lossy(GELU_COEFF);
    let three = T::from_f64_lossy(3.0);
    let two = T::from_f64_lossy(2.0);
    let s = gelu_gate(x);
    // d/dx σ(2u) = 2σ(1-σ)·u'
    s + x * two * s * (T::one() - s) * c * (T::one() + three * a * x * x)
}

/// Numerically stable softmax over the last axis.
pub fn softmax_last<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let d = *x.shape().last().unwrap_or(&1);
    let mut out = x.clone();
    if d == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    out
}

/// `dx = y ⊙ (g − Σ g⊙y)` row by row.
pub fn softmax_last_backward<T: Scalar>(y: &Tensor<T>, g: &Tensor<T>) -> Tensor<T> {
    let d = *y.shape().last().unwrap_or(&1);
    let mut gx = g.clone();
    if d == 0 {
        return gx;
    }
    for (grow, yrow) in gx.data_mut().chunks_mut(d).zip(y.data().chunks(d)) {
        let dot: T = grow.iter().zip(yrow).map(|(a, b)| *a * *b).sum();
        for (gv, yv) in grow.iter_mut().zip(yrow) {
            *gv = *yv * (*gv - dot);
        }
    }
    gx
}

pub fn huber_elem<T: Scalar>(r: T, delta: T) -> T {
    let half = T::from_f64_lossy(0.5);
    if r.abs() <= delta {
        half * r * r
    } else {
        delta * (r.abs() - half * delta)
    }
}

pub fn huber_grad<T: Scalar>(r: T, delta: T) -> T {
    if r.abs() <= delta {
        r
    } else {
        delta * r.signum()
    }
}

pub fn huber_mean<T: Scalar>(pred: &[T], target: &[T], delta: T) -> T {
    let total: T = pred.iter().zip(target).map(|(p, t)| huber_elem(*p - *t, delta)).sum();
    total / T::from_usize(pred.len()).unwrap()
}

/// Sums `g` (whose shape ends with `suffix`) over its leading dimensions.
pub fn reduce_to_suffix<T: Scalar>(g: &[T], suffix: &[usize]) -> Tensor<T> {
    let period: usize = suffix.iter().product::<usize>().max(1);
    let mut out = vec![T::zero(); period];
    for (i, v) in g.iter().enumerate() {
        out[i % period] = out[i % period] + *v;
    }
    Tensor::new(suffix.to_vec(), out).expect("suffix shape matches period")
}

/// Output axis `i` takes input axis `perm[i]`.
pub fn permute<T: Scalar>(x: &Tensor<T>, perm: &[usize]) -> Tensor<T> {
    let sx = x.shape();
    let in_strides = strides(sx);
    let out_shape: Vec<usize> = perm.iter().map(|&p| sx[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = x.numel();
    let xv = x.data();
    let mut out = Vec::with_capacity(n);
    let rank = out_shape.len();
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    for _ in 0..n {
        out.push(xv[src]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            src += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(out_shape, out).expect("permutation preserves size")
}

fn conv_pad(k: usize) -> usize {
    (k - 1) / 2
}

/// Zero-padded copy of one channel: length `L + K - 1`.
fn padded_channel<T: Scalar>(x: &[T], k: usize) -> Vec<T> {
    let left = conv_pad(k);
    let mut buf = vec![T::zero(); x.len() + k - 1];
    buf[left..left + x.len()].copy_from_slice(x);
    buf
}

/// Same-length 1-D convolution (cross-correlation, as in deep-learning libraries).
pub fn conv1d_same<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let (n, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let mut out = vec![T::zero(); n * cout * len];
    let (xv, wv, bv) = (x.data(), w.data(), b.data());
    for ni in 0..n {
        let dst = &mut out[ni * cout * len..(ni + 1) * cout * len];
        for (f, row) in dst.chunks_mut(len).enumerate() {
            row.iter_mut().for_each(|v| *v = bv[f]);
        }
        for c in 0..cin {
            let start = (ni * cin + c) * len;
            let xpad = padded_channel(&xv[start..start + len], k);
            // Window matrix M[k', p] = xpad[k' + p] viewed in place with unit strides.
            // SAFETY: max index read is (k-1) + (len-1) < xpad.len(); W slice has
            // cout rows of stride cin*k starting at c*k.
            unsafe {
                T::gemm_raw(
                    cout,
                    k,
                    len,
                    T::one(),
                    wv.as_ptr().add(c * k),
                    (cin * k) as isize,
                    1,
                    xpad.as_ptr(),
                    1,
                    1,
                    T::one(),
                    dst.as_mut_ptr(),
                    len as isize,
                    1,
                );
            }
        }
    }
    Tensor::new(vec![n, cout, len], out).expect("conv output shape")
}

/// Gradients of [`conv1d_same`]. Sparse output gradients (e.g. behind a max
/// reduction) are handled entry by entry; dense ones go through GEMM.
#[allow(clippy::type_complexity)]
pub fn conv1d_same_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    need_x: bool,
    need_w: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Tensor<T>) {
    let (n, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let left = conv_pad(k);
    let (xv, wv, gd) = (x.data(), w.data(), g.data());
    let mut gw = vec![T::zero(); cout * cin * k];
    let mut gb = vec![T::zero(); cout];
    let mut gx = if need_x {
        vec![T::zero(); n * cin * len]
    } else {
        Vec::new()
    };
    for ni in 0..n {
        let gn = &gd[ni * cout * len..(ni + 1) * cout * len];
        for (f, row) in gn.chunks(len).enumerate() {
            gb[f] = gb[f] + row.iter().copied().sum::<T>();
        }
        let nnz = gn.iter().filter(|v| **v != T::zero()).count();
        if nnz == 0 {
            continue;
        }
        let dense = nnz * 4 > gn.len();
        for c in 0..cin {
            let start = (ni * cin + c) * len;
            let xpad = padded_channel(&xv[start..start + len], k);
            let mut gxpad = if need_x {
                vec![T::zero(); len + k - 1]
            } else {
                Vec::new()
            };
            if dense {
                if need_w {
                    // gW_c[f, k'] += Σ_p g[f,p] · xpad[p + k']
                    // SAFETY: reads xpad up to (len-1)+(k-1); writes gw rows of stride cin*k.
                    unsafe {
                        T::gemm_raw(
                            cout,
                            len,
                            k,
                            T::one(),
                            gn.as_ptr(),
                            len as isize,
                            1,
                            xpad.as_ptr(),
                            1,
                            1,
                            T::one(),
                            gw.as_mut_ptr().add(c * k),
                            (cin * k) as isize,
                            1,
                        );
                    }
                }
                if need_x {
                    // Z[p, k'] = Σ_f g[f,p] · w[f,c,k'], then scatter along diagonals.
                    let mut z = vec![T::zero(); len * k];
                    // SAFETY: gn is cout×len read transposed; W slice as in forward.
                    unsafe {
                        T::gemm_raw(
                            len,
                            cout,
                            k,
                            T::one(),
                            gn.as_ptr(),
                            1,
                            len as isize,
                            wv.as_ptr().add(c * k),
                            (cin * k) as isize,
                            1,
                            T::zero(),
                            z.as_mut_ptr(),
                            k as isize,
                            1,
                        );
                    }
                    for p in 0..len {
                        for kk in 0..k {
                            gxpad[p + kk] = gxpad[p + kk] + z[p * k + kk];
                        }
                    }
                }
            } else {
                for f in 0..cout {
                    let wrow = &wv[(f * cin + c) * k..(f * cin + c + 1) * k];
                    for (p, gval) in gn[f * len..(f + 1) * len].iter().enumerate() {
                        if *gval == T::zero() {
                            continue;
                        }
                        if need_w {
                            let dst = &mut gw[(f * cin + c) * k..(f * cin + c + 1) * k];
                            for (d, xs) in dst.iter_mut().zip(&xpad[p..p + k]) {
                                *d = *d + *gval * *xs;
                            }
                        }
                        if need_x {
                            for (d, wk) in gxpad[p..p + k].iter_mut().zip(wrow) {
                                *d = *d + *gval * *wk;
                            }
                        }
                    }
                }
            }
            if need_x {
                gx[start..start + len].copy_from_slice(&gxpad[left..left + len]);
            }
        }
    }
    (
        need_x.then(|| Tensor::new(vec![n, cin, len], gx).expect("shape")),
        need_w.then(|| Tensor::new(vec![cout, cin, k], gw).expect("shape")),
        Tensor::new(vec![cout], gb).expect("shape"),
    )
}
