//! Direct constant-Q transform and binary peak picking.

use std::sync::OnceLock;

use crate::autodiff::Tensor;
use crate::dataset::CHUNK_LEN;
use crate::Result;

use super::{check_len, reflect};

pub const CQT_BINS: usize = 80;
pub const CQT_FRAMES: usize = 40;
pub const CQT_HOP: usize = 400;
pub const LOG_FLOOR: f64 = 1e-10;
const F_MIN: f64 = 40.0;
const BINS_PER_OCTAVE: f64 = 12.0;
const SR: f64 = 16_000.0;

pub fn cqt_center_hz(bin: usize) -> f64 {
    F_MIN * 2f64.powf(bin as f64 / BINS_PER_OCTAVE)
}

/// `min(ceil(Q·sr/f_b), 16000)` with `Q = 1/(2^(1/12) - 1)`.
pub fn cqt_window_len(bin: usize) -> usize {
    let q = 1.0 / (2f64.powf(1.0 / BINS_PER_OCTAVE) - 1.0);
    ((q * SR / cqt_center_hz(bin)).ceil() as usize).min(CHUNK_LEN)
}

struct Kernel {
    len: usize,
    re: Vec<f64>,
    im: Vec<f64>,
}

fn kernels() -> &'static [Kernel] {
    static K: OnceLock<Vec<Kernel>> = OnceLock::new();
    K.get_or_init(|| {
        (0..CQT_BINS)
            .map(|b| {
                let len = cqt_window_len(b);
                let w = 2.0 * std::f64::consts::PI * cqt_center_hz(b) / SR;
                let half = (len / 2) as f64;
                let (mut re, mut im) = (Vec::with_capacity(len), Vec::with_capacity(len));
                for n in 0..len {
                    let hann = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / len as f64).cos();
                    let phi = -w * (n as f64 - half);
                    re.push(hann * phi.cos());
                    im.push(hann * phi.sin());
                }
                Kernel { len, re, im }
            })
            .collect()
    })
}

/// 80 × 40 matrix of `ln(max(|X_b(t)|, 1e-10))`, where `X_b(t)` is the inner
/// product of the signal around `t·400` with a Hann-windowed complex
/// exponential at bin `b`'s centre frequency. Edges are reflection-padded.
pub fn cqt_log_magnitude(samples: &[f64]) -> Result<Tensor<f64>> {
    check_len(samples)?;
    let ks = kernels();
    let pad = ks.iter().map(|k| k.len / 2).max().unwrap_or(0);
    let padded: Vec<f64> = (0..CHUNK_LEN + 2 * pad)
        .map(|i| samples[reflect(i as isize - pad as isize, CHUNK_LEN)])
        .collect();
    let mut out = Tensor::zeros(&[CQT_BINS, CQT_FRAMES]);
    let data = out.data_mut();
    for (b, k) in ks.iter().enumerate() {
        for t in 0..CQT_FRAMES {
            let start = pad + t * CQT_HOP - k.len / 2;
            let seg = &padded[start..start + k.len];
            let (mut re, mut im) = (0.0, 0.0);
            for ((x, kr), ki) in seg.iter().zip(&k.re).zip(&k.im) {
                re += x * kr;
                im += x * ki;
            }
            data[b * CQT_FRAMES + t] = re.hypot(im).max(LOG_FLOOR).ln();
        }
    }
    Ok(out)
}

/// Binary mask: `(b, t)` is set iff it is a maximum within ±2 bins of its
/// frame (ties all qualify) and at least the lower median of all entries.
pub fn peak_map(logmag: &Tensor<f64>) -> Tensor<f64> {
    let (rows, cols) = (logmag.shape()[0], logmag.shape()[1]);
    let v = logmag.data();
    let mut sorted = v.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(sorted.len() - 1) / 2];
    Tensor::from_fn(&[rows, cols], |i| {
        let (b, t) = (i / cols, i % cols);
        let x = v[i];
        let lo = b.saturating_sub(2);
        let hi = (b + 2).min(rows - 1);
        let is_max = (lo..=hi).all(|bb| x >= v[bb * cols + t]);
        if is_max && x >= median {
            1.0
        } else {
            0.0
        }
    })
}
