//! Windowed-sinc polyphase resampling (Kaiser β = 8, 64 taps per phase).

use crate::{Error, Result};

const TAPS: usize = 64;
const BETA: f64 = 8.0;

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Zeroth-order modified Bessel function of the first kind (power series).
fn bessel_i0(x: f64) -> f64 {
    let q = x * x / 4.0;
    let mut term = 1.0;
    let mut sum = 1.0;
    for k in 1..200 {
        term *= q / (k * k) as f64;
        sum += term;
        if term < sum * 1e-17 {
            break;
        }
    }
    sum
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

/// Conversion by the rational factor `up/down`, with one 64-tap filter per
/// output phase. Cutoff sits at the lower of the two Nyquist rates.
pub struct Resampler {
    up: usize,
    down: usize,
    phases: Vec<[f64; TAPS]>,
}

impl Resampler {
    pub fn new(from_rate: u32, to_rate: u32) -> Result<Self> {
        if from_rate == 0 || to_rate == 0 {
            return Err(Error::Invalid("sample rate must be positive".into()));
        }
        let g = gcd(from_rate as u64, to_rate as u64);
        let up = (to_rate as u64 / g) as usize;
        let down = (from_rate as u64 / g) as usize;
        let cutoff = (up as f64 / down as f64).min(1.0);
        let half = (TAPS / 2) as f64;
        let norm = bessel_i0(BETA);
        let phases = (0..up)
            .map(|p| {
                let frac = p as f64 / up as f64;
                let mut h = [0.0; TAPS];
                for (k, hk) in h.iter_mut().enumerate() {
                    // Distance from the output instant to input sample k.
                    let tau = frac + (half - 1.0) - k as f64;
                    let r = tau / half;
                    let w = if r.abs() >= 1.0 {
                        0.0
                    } else {
                        bessel_i0(BETA * (1.0 - r * r).sqrt()) / norm
                    };
                    *hk = cutoff * sinc(cutoff * tau) * w;
                }
                let sum: f64 = h.iter().sum();
                h.iter_mut().for_each(|v| *v /= sum);
                h
            })
            .collect();
        Ok(Self { up, down, phases })
    }

    pub fn process(&self, x: &[f64]) -> Vec<f64> {
        if self.up == self.down {
            return x.to_vec();
        }
        let n_out = (x.len() * self.up).div_ceil(self.down);
        let half = TAPS / 2;
        (0..n_out)
            .map(|n| {
                let pos = n * self.down;
                let base = pos / self.up;
                let h = &self.phases[pos % self.up];
                let mut acc = 0.0;
                for (k, hk) in h.iter().enumerate() {
                    let j = base as isize + k as isize - (half as isize - 1);
                    if j >= 0 && (j as usize) < x.len() {
                        acc += hk * x[j as usize];
                    }
                }
                acc
            })
            .collect()
    }
}

/// Identity when the rates match.
pub fn resample(x: &[f64], from_rate: u32, to_rate: u32) -> Result<Vec<f64>> {
    if from_rate == to_rate {
        return Ok(x.to_vec());
    }
    Ok(Resampler::new(from_rate, to_rate)?.process(x))
}
