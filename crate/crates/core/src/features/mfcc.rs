//! MFCCs: Hann 1024 window, 40 area-normalised mel bands up to 8 kHz,
//! orthonormal DCT-II, coefficients 1..=12.

use std::sync::{Arc, OnceLock};

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::autodiff::Tensor;
use crate::dataset::CHUNK_LEN;
use crate::Result;

use super::{check_len, reflect, CQT_FRAMES, CQT_HOP, LOG_FLOOR};

pub const MFCC_WINDOW: usize = 1024;
pub const MEL_BANDS: usize = 40;
pub const MFCC_COEFFS: usize = 12;
const SR: f64 = 16_000.0;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// `MEL_BANDS × (MFCC_WINDOW/2 + 1)` triangular filters, each with unit area.
pub fn mel_filterbank() -> Vec<Vec<f64>> {
    let top = hz_to_mel(SR / 2.0);
    let edges: Vec<f64> = (0..MEL_BANDS + 2)
        .map(|i| mel_to_hz(top * i as f64 / (MEL_BANDS + 1) as f64))
        .collect();
    let n_bins = MFCC_WINDOW / 2 + 1;
    (0..MEL_BANDS)
        .map(|m| {
            let (l, c, r) = (edges[m], edges[m + 1], edges[m + 2]);
            (0..n_bins)
                .map(|k| {
                    let f = k as f64 * SR / MFCC_WINDOW as f64;
                    let tri = ((f - l) / (c - l)).min((r - f) / (r - c)).max(0.0);
                    tri * 2.0 / (r - l)
                })
                .collect()
        })
        .collect()
}

struct Tables {
    window: Vec<f64>,
    bank: Vec<Vec<f64>>,
    dct: Vec<Vec<f64>>,
    fft: Arc<dyn Fft<f64>>,
}

fn tables() -> &'static Tables {
    static T: OnceLock<Tables> = OnceLock::new();
    T.get_or_init(|| {
        let n = MFCC_WINDOW as f64;
        let window = (0..MFCC_WINDOW)
            .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / n).cos())
            .collect();
        let m = MEL_BANDS as f64;
        let dct = (1..=MFCC_COEFFS)
            .map(|k| {
                (0..MEL_BANDS)
                    .map(|i| {
                        (2.0 / m).sqrt() * (std::f64::consts::PI * k as f64 * (2 * i + 1) as f64 / (2.0 * m)).cos()
                    })
                    .collect()
            })
            .collect();
        Tables {
            window,
            bank: mel_filterbank(),
            dct,
            fft: FftPlanner::new().plan_fft_forward(MFCC_WINDOW),
        }
    })
}

/// 12 × 40 MFCC matrix, one column per 25 ms hop (frames centred on `t·400`).
pub fn mfcc(samples: &[f64]) -> Result<Tensor<f64>> {
    check_len(samples)?;
    let tb = tables();
    let half = (MFCC_WINDOW / 2) as isize;
    let mut out = Tensor::zeros(&[MFCC_COEFFS, CQT_FRAMES]);
    let mut buf = vec![Complex::new(0.0, 0.0); MFCC_WINDOW];
    let mut logmel = vec![0.0; MEL_BANDS];
    for t in 0..CQT_FRAMES {
        let start = (t * CQT_HOP) as isize - half;
        for (i, c) in buf.iter_mut().enumerate() {
            let x = samples[reflect(start + i as isize, CHUNK_LEN)];
            *c = Complex::new(x * tb.window[i], 0.0);
        }
        tb.fft.process(&mut buf);
        for (lm, filt) in logmel.iter_mut().zip(&tb.bank) {
            let e: f64 = filt.iter().zip(&buf).map(|(w, c)| w * c.norm_sqr()).sum();
            *lm = e.max(LOG_FLOOR).ln();
        }
        for (k, row) in tb.dct.iter().enumerate() {
            let v: f64 = row.iter().zip(&logmel).map(|(a, b)| a * b).sum();
            out.data_mut()[k * CQT_FRAMES + t] = v;
        }
    }
    Ok(out)
}
