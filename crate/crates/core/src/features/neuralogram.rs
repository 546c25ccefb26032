//! Neuralogram: one projector vector per 100 ms segment.

use std::collections::HashMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::autodiff::{gemm, Tensor};
use crate::dataset::{Chunk, CHUNK_LEN};
use crate::{Error, Result, View};

use super::{check_len, read_feature_cache};

pub const SEGMENT_LEN: usize = 1600;
pub const SEGMENTS: usize = CHUNK_LEN / SEGMENT_LEN;
pub const EMBED_DIM: usize = 1024;

/// Which segment a projector call is for.
#[derive(Clone, Copy, Debug)]
pub struct SegmentKey<'a> {
    pub clip_id: &'a str,
    pub chunk_index: usize,
    pub segment: usize,
}

/// Maps 1600 samples to a 1024-dim vector. Implementations must be
/// immutable once built.
pub trait Projector: Send + Sync {
    fn project(&self, key: SegmentKey<'_>, samples: &[f64]) -> Result<Vec<f64>>;
}

/// 1024 × 10 matrix whose column `k` is the projection of samples
/// `[1600k, 1600k + 1600)`.
pub fn neuralogram(chunk: &Chunk, projector: &dyn Projector) -> Result<Tensor<f64>> {
    check_len(&chunk.samples)?;
    let mut out = Tensor::zeros(&[EMBED_DIM, SEGMENTS]);
    for k in 0..SEGMENTS {
        let key = SegmentKey {
            clip_id: &chunk.clip_id,
            chunk_index: chunk.chunk_index,
            segment: k,
        };
        let v = projector.project(key, &chunk.samples[k * SEGMENT_LEN..(k + 1) * SEGMENT_LEN])?;
        if v.len() != EMBED_DIM {
            return Err(Error::Invalid(format!(
                "projector returned {} values for {} chunk {} segment {k}, expected {EMBED_DIM}",
                v.len(),
                chunk.clip_id,
                chunk.chunk_index
            )));
        }
        if let Some(i) = v.iter().position(|x| !x.is_finite()) {
            return Err(Error::Invalid(format!(
                "projector returned non-finite value at {i} for {} chunk {} segment {k}",
                chunk.clip_id, chunk.chunk_index
            )));
        }
        for (d, x) in v.into_iter().enumerate() {
            out.data_mut()[d * SEGMENTS + k] = x;
        }
    }
    Ok(out)
}

struct ConvLayer {
    out_ch: usize,
    in_ch: usize,
    kernel: usize,
    stride: usize,
    /// `out_ch × (in_ch·kernel)`, row-major.
    w: Vec<f64>,
}

impl ConvLayer {
    /// Valid (unpadded) strided convolution followed by ReLU.
    /// `x` is `in_ch × len`; returns `out_ch × out_len`.
    fn forward(&self, x: &[f64], len: usize) -> (Vec<f64>, usize) {
        let out_len = (len - self.kernel) / self.stride + 1;
        let fan = self.in_ch * self.kernel;
        let mut cols = vec![0.0; out_len * fan];
        for p in 0..out_len {
            for c in 0..self.in_ch {
                let src = &x[c * len + p * self.stride..][..self.kernel];
                cols[p * fan + c * self.kernel..][..self.kernel].copy_from_slice(src);
            }
        }
        let mut y = vec![0.0; self.out_ch * out_len];
        gemm(self.out_ch, fan, out_len, &self.w, false, &cols, true, &mut y, 0.0);
        y.iter_mut().for_each(|v| *v = v.max(0.0));
        (y, out_len)
    }
}

/// Gaussian matrix with orthonormal rows (or columns, if taller than wide),
/// via modified Gram-Schmidt.
fn orthogonal(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let (n, m) = (rows.max(cols), rows.min(cols));
    // m vectors of length n
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|_| (0..n).map(|_| StandardNormal.sample(rng)).collect())
        .collect();
    for i in 0..m {
        for j in 0..i {
            let dot: f64 = v[i].iter().zip(&v[j]).map(|(a, b)| a * b).sum();
            let (head, tail) = v.split_at_mut(i);
            tail[0].iter_mut().zip(&head[j]).for_each(|(a, b)| *a -= dot * b);
        }
        let norm = v[i].iter().map(|a| a * a).sum::<f64>().sqrt();
        v[i].iter_mut().for_each(|a| *a /= norm);
    }
    let mut w = vec![0.0; rows * cols];
    for (i, vi) in v.iter().enumerate() {
        for (j, &x) in vi.iter().enumerate() {
            if rows <= cols {
                w[i * cols + j] = x;
            } else {
                w[j * cols + i] = x;
            }
        }
    }
    w
}

/// Frozen stand-in for a pretrained audio network: three strided ReLU
/// convolutions with seeded orthogonal weights, then a global max over time.
/// Each layer is scaled by √2 (the ReLU gain), times √(out/fan) where it
/// expands, so activations keep their scale instead of halving per layer.
///
/// 1600 samples → 32 ch × 99 → 128 ch × 24 → 1024 ch × 12 → max → 1024.
pub struct ConvProjector {
    layers: Vec<ConvLayer>,
}

impl ConvProjector {
    pub fn new(seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let spec = [(1, 32, 32, 16), (32, 128, 4, 4), (128, EMBED_DIM, 2, 2)];
        let layers = spec
            .into_iter()
            .map(|(in_ch, out_ch, kernel, stride)| {
                let fan = in_ch * kernel;
                let gain = (2.0 * (out_ch as f64 / fan as f64).max(1.0)).sqrt();
                let mut w = orthogonal(out_ch, fan, &mut rng);
                w.iter_mut().for_each(|v| *v *= gain);
                ConvLayer {
                    in_ch,
                    out_ch,
                    kernel,
                    stride,
                    w,
                }
            })
            .collect();
        Self { layers }
    }
}

impl Projector for ConvProjector {
    fn project(&self, _key: SegmentKey<'_>, samples: &[f64]) -> Result<Vec<f64>> {
        if samples.len() != SEGMENT_LEN {
            return Err(Error::Invalid(format!(
                "projector expects {SEGMENT_LEN} samples, got {}",
                samples.len()
            )));
        }
        let mut x = samples.to_vec();
        let mut len = SEGMENT_LEN;
        for layer in &self.layers {
            (x, len) = layer.forward(&x, len);
        }
        Ok(x.chunks(len)
            .map(|row| row.iter().copied().fold(f64::NEG_INFINITY, f64::max))
            .collect())
    }
}

/// Serves precomputed neuralogram matrices from a feature cache file.
pub struct PrecomputedProjector {
    matrices: HashMap<(String, u32), Vec<f32>>,
}

impl PrecomputedProjector {
    pub fn load(path: &Path) -> Result<Self> {
        let mut matrices = HashMap::new();
        for r in read_feature_cache(path)? {
            if r.view != View::Neuralogram {
                continue;
            }
            if (r.rows as usize, r.cols as usize) != (EMBED_DIM, SEGMENTS) {
                return Err(Error::Corrupt {
                    path: path.into(),
                    msg: format!("precomputed embedding for {} is {}x{}", r.clip_id, r.rows, r.cols),
                });
            }
            matrices.insert((r.clip_id, r.chunk_index), r.data);
        }
        Ok(Self { matrices })
    }
}

impl Projector for PrecomputedProjector {
    fn project(&self, key: SegmentKey<'_>, _samples: &[f64]) -> Result<Vec<f64>> {
        let m = self
            .matrices
            .get(&(key.clip_id.to_string(), key.chunk_index as u32))
            .ok_or_else(|| {
                Error::Missing(format!(
                    "missing precomputed embedding for {} chunk {}",
                    key.clip_id, key.chunk_index
                ))
            })?;
        Ok((0..EMBED_DIM).map(|d| m[d * SEGMENTS + key.segment] as f64).collect())
    }
}
