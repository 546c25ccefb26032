//! Independent reference implementations shared by the test targets.
#![allow(dead_code)]

use std::f64::consts::PI;

pub const SR: f64 = 16_000.0;

pub fn sine(freq: f64, amp: f64, n: usize, sr: f64) -> Vec<f64> {
    (0..n).map(|i| amp * (2.0 * PI * freq * i as f64 / sr).sin()).collect()
}

fn reflect(i: i64, n: i64) -> usize {
    let mut i = i.abs();
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

/// |X_b(t)| evaluated straight from the definition with complex arithmetic.
pub fn cqt_magnitude_oracle(x: &[f64], b: usize, t: usize) -> f64 {
    let f = 40.0 * 2f64.powf(b as f64 / 12.0);
    let q = 1.0 / (2f64.powf(1.0 / 12.0) - 1.0);
    let n = ((q * SR / f).ceil() as usize).min(16000);
    let start = (t * 400) as i64 - (n / 2) as i64;
    let (mut re, mut im) = (0.0, 0.0);
    for k in 0..n {
        let w = 0.5 * (1.0 - (2.0 * PI * k as f64 / n as f64).cos());
        let s = x[reflect(start + k as i64, x.len() as i64)];
        let ph = -2.0 * PI * f * (k as f64 - (n / 2) as f64) / SR;
        re += s * w * ph.cos();
        im += s * w * ph.sin();
    }
    (re * re + im * im).sqrt()
}

/// Single-frame MFCC using a naive DFT, its own mel triangles and DCT.
pub fn mfcc_frame_oracle(x: &[f64], t: usize) -> Vec<f64> {
    let start = (t * 400) as i64 - 512;
    let frame: Vec<f64> = (0..1024)
        .map(|k| {
            let w = 0.5 * (1.0 - (2.0 * PI * k as f64 / 1024.0).cos());
            w * x[reflect(start + k as i64, x.len() as i64)]
        })
        .collect();
    let power: Vec<f64> = (0..=512)
        .map(|k| {
            let (mut re, mut im) = (0.0, 0.0);
            for (n, v) in frame.iter().enumerate() {
                let ph = -2.0 * PI * (k * n % 1024) as f64 / 1024.0;
                re += v * ph.cos();
                im += v * ph.sin();
            }
            re * re + im * im
        })
        .collect();
    let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
    let inv = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
    let top = mel(8000.0);
    let pts: Vec<f64> = (0..42).map(|i| inv(top * i as f64 / 41.0)).collect();
    let mut logmel = vec![0.0; 40];
    for (m, lm) in logmel.iter_mut().enumerate() {
        let (l, c, r) = (pts[m], pts[m + 1], pts[m + 2]);
        let mut e = 0.0;
        for (k, p) in power.iter().enumerate() {
            let f = k as f64 * 16000.0 / 1024.0;
            let h = if f > l && f <= c {
                (f - l) / (c - l)
            } else if f > c && f < r {
                (r - f) / (r - c)
            } else {
                0.0
            };
            e += h * 2.0 / (r - l) * p;
        }
        *lm = e.max(1e-10).ln();
    }
    (1..=12)
        .map(|k| {
            (0..40)
                .map(|n| (2.0f64 / 40.0).sqrt() * logmel[n] * (PI * k as f64 * (n as f64 + 0.5) / 40.0).cos())
                .sum()
        })
        .collect()
}

/// Entries of `mask` (rows × cols) that disagree with the two-clause peak
/// definition applied to `m`, checked one entry at a time.
pub fn peak_map_violations(m: &[f64], mask: &[f64], rows: usize, cols: usize) -> usize {
    // Lower median by counting: the smallest v with #{x <= v} >= n/2 ... for
    // even n the lower-middle statistic is the (n/2)-th smallest.
    let n = m.len();
    let median = m
        .iter()
        .copied()
        .filter(|&v| {
            let le = m.iter().filter(|&&x| x <= v).count();
            let lt = m.iter().filter(|&&x| x < v).count();
            lt < n.div_ceil(2) && le >= n.div_ceil(2)
        })
        .next()
        .unwrap();
    let mut bad = 0;
    for b in 0..rows {
        for t in 0..cols {
            let v = m[b * cols + t];
            let mut local = true;
            for d in -2i64..=2 {
                let bb = b as i64 + d;
                if bb >= 0 && (bb as usize) < rows && m[bb as usize * cols + t] > v {
                    local = false;
                }
            }
            let want = if local && v >= median { 1.0 } else { 0.0 };
            if mask[b * cols + t] != want {
                bad += 1;
            }
        }
    }
    bad
}

/// Any-hit top-5 by counting, for each true label, how many classes beat it.
pub fn top5_brute(scores: &[Vec<f64>], truth: &[Vec<usize>]) -> f64 {
    let mut hits = 0;
    for (s, t) in scores.iter().zip(truth) {
        let hit = t.iter().any(|&c| {
            let ahead = (0..s.len()).filter(|&o| s[o] > s[c] || (s[o] == s[c] && o < c)).count();
            ahead < 5
        });
        hits += usize::from(hit);
    }
    hits as f64 / scores.len() as f64
}

/// Macro AP with ranks found by pairwise comparison.
pub fn map_brute(ids: &[String], scores: &[Vec<f64>], truth: &[Vec<usize>]) -> (f64, Vec<Option<f64>>) {
    let n = ids.len();
    let n_classes = scores[0].len();
    let mut per = Vec::new();
    for c in 0..n_classes {
        let ahead =
            |i: usize, j: usize| scores[j][c] > scores[i][c] || (scores[j][c] == scores[i][c] && ids[j] < ids[i]);
        let pos: Vec<usize> = (0..n).filter(|&i| truth[i].contains(&c)).collect();
        if pos.is_empty() {
            per.push(None);
            continue;
        }
        let mut sum = 0.0;
        for &i in &pos {
            let rank = 1 + (0..n).filter(|&j| j != i && ahead(i, j)).count();
            let tp = 1 + pos.iter().filter(|&&j| j != i && ahead(i, j)).count();
            sum += tp as f64 / rank as f64;
        }
        per.push(Some(sum / pos.len() as f64));
    }
    let vals: Vec<f64> = per.iter().flatten().copied().collect();
    (vals.iter().sum::<f64>() / vals.len() as f64, per)
}
