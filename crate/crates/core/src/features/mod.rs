//! Per-chunk view matrices.
//!
//! All views are computed in f64 from a 16000-sample chunk:
//!
//! | view        | shape      | source                                  |
//! |-------------|------------|-----------------------------------------|
//! | pitch       | 80 × 40    | binary peak map of the log-magnitude CQT |
//! | timbre      | 12 × 40    | MFCC 1..=12                              |
//! | waveform    | 40 × 400   | raw 25 ms patches                        |
//! | neuralogram | 1024 × 10  | projector output per 100 ms segment      |

mod cache;
mod cqt;
mod mfcc;
mod neuralogram;

pub use cache::{read_feature_cache, write_feature_cache, FeatureCache, FeatureRecord};
pub use cqt::{cqt_center_hz, cqt_log_magnitude, cqt_window_len, peak_map, CQT_BINS, CQT_FRAMES, CQT_HOP, LOG_FLOOR};
pub use mfcc::{mel_filterbank, mfcc, MEL_BANDS, MFCC_COEFFS, MFCC_WINDOW};
pub use neuralogram::{neuralogram, ConvProjector, PrecomputedProjector, Projector, SegmentKey};

use crate::autodiff::Tensor;
use crate::dataset::{chunk_clip, decode_and_resample, Chunk, ClipRecord, CHUNK_LEN};
use crate::{Error, Result, View};

pub const PATCH_LEN: usize = 400;

/// Index `i` reflected into `[0, n)` without repeating the edge sample.
pub(crate) fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i.abs();
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

pub(crate) fn check_len(samples: &[f64]) -> Result<()> {
    if samples.len() != CHUNK_LEN {
        return Err(Error::Invalid(format!(
            "chunk must have {CHUNK_LEN} samples, got {}",
            samples.len()
        )));
    }
    Ok(())
}

/// 40 × 400 reshape in time order.
pub fn patch_waveform(samples: &[f64]) -> Result<Tensor<f64>> {
    check_len(samples)?;
    Ok(Tensor::new(vec![CHUNK_LEN / PATCH_LEN, PATCH_LEN], samples.to_vec())?)
}

/// Computes the feature matrix of `view` for one chunk.
pub fn compute_view(view: View, chunk: &Chunk, projector: &dyn Projector) -> Result<Tensor<f64>> {
    match view {
        View::Pitch => Ok(peak_map(&cqt_log_magnitude(&chunk.samples)?)),
        View::Timbre => mfcc(&chunk.samples),
        View::Waveform => patch_waveform(&chunk.samples),
        View::Neuralogram => neuralogram(chunk, projector),
    }
}

/// Decodes, chunks and computes `view` for every record, using up to `jobs`
/// worker threads. Output order follows `records` then chunk index, whatever
/// the thread count.
pub fn extract_view(
    records: &[&ClipRecord],
    n_classes: usize,
    view: View,
    projector: &dyn Projector,
    jobs: usize,
) -> Result<Vec<FeatureRecord>> {
    let work = |r: &ClipRecord| -> Result<Vec<FeatureRecord>> {
        let clip = decode_and_resample(r)?;
        chunk_clip(&clip, r, n_classes)?
            .iter()
            .map(|c| {
                Ok(FeatureRecord::from_tensor(
                    &c.clip_id,
                    c.chunk_index,
                    view,
                    &compute_view(view, c, projector)?,
                ))
            })
            .collect()
    };
    let jobs = jobs.clamp(1, records.len().max(1));
    let per_clip: Vec<Result<Vec<FeatureRecord>>> = if jobs == 1 {
        records.iter().map(|r| work(r)).collect()
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots: Vec<std::sync::Mutex<Option<Result<Vec<FeatureRecord>>>>> =
            records.iter().map(|_| std::sync::Mutex::new(None)).collect();
        std::thread::scope(|s| {
            for _ in 0..jobs {
                s.spawn(|| loop {
                    let i = next.fetch_add(1, std::sync::atomic::Ordering::Relaxed);
                    let Some(r) = records.get(i) else { break };
                    *slots[i].lock().unwrap() = Some(work(r));
                });
            }
        });
        slots
            .into_iter()
            .map(|m| m.into_inner().unwrap().expect("every slot filled"))
            .collect()
    };
    let mut out = Vec::new();
    for r in per_clip {
        out.extend(r?);
    }
    Ok(out)
}
