//! Top-k accuracy and clip-level mean average precision.
//!
//! Ties are broken deterministically: by lower class index when ranking
//! classes, by ascending clip id when ranking clips.

use std::cmp::Ordering;
use std::collections::HashMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use crate::{Error, Result};

/// Score vector for one item (chunk or clip) plus its true label indices.
#[derive(Clone, Debug, PartialEq)]
pub struct Scored {
    pub id: String,
    pub scores: Vec<f64>,
    pub truth: Vec<usize>,
}

/// All chunk score vectors belonging to one clip.
#[derive(Clone, Debug)]
pub struct ClipGroup {
    pub clip_id: String,
    pub truth: Vec<usize>,
    pub chunks: Vec<Vec<f64>>,
}

/// Class indices ordered by descending score, ties to the lower index.
pub fn ranked_classes(scores: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

/// Any-hit: true iff some true label is among the `k` highest-scoring classes.
pub fn top_k_hit(scores: &[f64], truth: &[usize], k: usize) -> bool {
    ranked_classes(scores).into_iter().take(k).any(|c| truth.contains(&c))
}

fn top_k_accuracy(items: &[Scored], k: usize) -> Result<f64> {
    let Some(first) = items.first() else {
        return Err(Error::Invalid("accuracy over zero items".into()));
    };
    let n_classes = first.scores.len();
    if n_classes < k {
        return Err(Error::Invalid(format!(
            "top-{k} accuracy needs at least {k} classes, got {n_classes}"
        )));
    }
    let mut hits = 0usize;
    for it in items {
        if it.scores.len() != n_classes {
            return Err(Error::Invalid(format!(
                "{}: {} scores, expected {n_classes}",
                it.id,
                it.scores.len()
            )));
        }
        hits += usize::from(top_k_hit(&it.scores, &it.truth, k));
    }
    Ok(hits as f64 / items.len() as f64)
}

pub fn top5_accuracy(items: &[Scored]) -> Result<f64> {
    top_k_accuracy(items, 5)
}

pub fn top1_accuracy(items: &[Scored]) -> Result<f64> {
    top_k_accuracy(items, 1)
}

/// Average precision of one class given per-clip `(id, score, positive)`.
/// `None` when the class has no positives.
pub fn average_precision(entries: &[(&str, f64, bool)]) -> Option<f64> {
    let mut order: Vec<usize> = (0..entries.len()).collect();
    order.sort_by(|&a, &b| {
        entries[b]
            .1
            .partial_cmp(&entries[a].1)
            .unwrap_or(Ordering::Equal)
            .then_with(|| entries[a].0.cmp(entries[b].0))
    });
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in order.iter().enumerate() {
        if entries[i].2 {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    (tp > 0).then(|| sum / tp as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MapResult {
    pub map_macro: f64,
    /// Per-class AP; `None` for classes without positives.
    pub per_class: Vec<Option<f64>>,
}

/// Macro mAP over classes that have at least one positive clip.
pub fn mean_average_precision(clips: &[Scored]) -> Result<MapResult> {
    let Some(first) = clips.first() else {
        return Err(Error::Invalid("mAP over zero clips".into()));
    };
    let n_classes = first.scores.len();
    if let Some(bad) = clips.iter().find(|c| c.scores.len() != n_classes) {
        return Err(Error::Invalid(format!("{}: inconsistent score length", bad.id)));
    }
    let per_class: Vec<Option<f64>> = (0..n_classes)
        .map(|c| {
            let entries: Vec<(&str, f64, bool)> = clips
                .iter()
                .map(|clip| (clip.id.as_str(), clip.scores[c], clip.truth.contains(&c)))
                .collect();
            average_precision(&entries)
        })
        .collect();
    let aps: Vec<f64> = per_class.iter().flatten().copied().collect();
    if aps.is_empty() {
        return Err(Error::Invalid("no class has a positive clip".into()));
    }
    Ok(MapResult {
        map_macro: aps.iter().sum::<f64>() / aps.len() as f64,
        per_class,
    })
}

/// Groups chunk-level items by id, keeping first-appearance order.
pub fn group_chunks(chunks: &[Scored]) -> Vec<ClipGroup> {
    let mut pos: HashMap<&str, usize> = HashMap::new();
    let mut groups: Vec<ClipGroup> = Vec::new();
    for ch in chunks {
        let i = *pos.entry(ch.id.as_str()).or_insert_with(|| {
            groups.push(ClipGroup {
                clip_id: ch.id.clone(),
                truth: ch.truth.clone(),
                chunks: Vec::new(),
            });
            groups.len() - 1
        });
        groups[i].chunks.push(ch.scores.clone());
    }
    groups
}

/// Per-class arithmetic mean of each clip's chunk scores.
pub fn average_chunk_scores(groups: &[ClipGroup]) -> Result<Vec<Scored>> {
    groups
        .iter()
        .map(|g| {
            let Some(first) = g.chunks.first() else {
                return Err(Error::Invalid(format!("clip {} has no chunks", g.clip_id)));
            };
            let mut mean = vec![0.0; first.len()];
            for ch in &g.chunks {
                if ch.len() != mean.len() {
                    return Err(Error::Invalid(format!(
                        "clip {}: chunk score lengths differ",
                        g.clip_id
                    )));
                }
                for (m, s) in mean.iter_mut().zip(ch) {
                    *m += s;
                }
            }
            let n = g.chunks.len() as f64;
            mean.iter_mut().for_each(|m| *m /= n);
            Ok(Scored {
                id: g.clip_id.clone(),
                scores: mean,
                truth: g.truth.clone(),
            })
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct MetricsReport {
    pub n_chunks: usize,
    pub n_clips: usize,
    pub top5_chunk: f64,
    pub top5_clip: f64,
    pub top1_chunk: f64,
    pub top1_clip: f64,
    pub map_macro: f64,
    pub per_class_ap: Vec<Option<f64>>,
}

/// Scores chunk-level predictions at both chunk and clip level.
pub fn evaluate(chunks: &[Scored]) -> Result<MetricsReport> {
    let clips = average_chunk_scores(&group_chunks(chunks))?;
    let map = mean_average_precision(&clips)?;
    Ok(MetricsReport {
        n_chunks: chunks.len(),
        n_clips: clips.len(),
        top5_chunk: top5_accuracy(chunks)?,
        top5_clip: top5_accuracy(&clips)?,
        top1_chunk: top1_accuracy(chunks)?,
        top1_clip: top1_accuracy(&clips)?,
        map_macro: map.map_macro,
        per_class_ap: map.per_class,
    })
}

impl MetricsReport {
    pub fn metrics_csv(&self) -> String {
        let mut s = String::from("metric,value\n");
        for (k, v) in [
            ("top5_chunk", self.top5_chunk),
            ("top5_clip", self.top5_clip),
            ("top1_chunk", self.top1_chunk),
            ("top1_clip", self.top1_clip),
            ("map_macro", self.map_macro),
        ] {
            s.push_str(&format!("{k},{v}\n"));
        }
        s
    }

    pub fn per_class_csv(&self, class_names: &[String]) -> String {
        let mut s = String::from("class,ap\n");
        for (i, ap) in self.per_class_ap.iter().enumerate() {
            let name = class_names.get(i).map_or_else(|| i.to_string(), Clone::clone);
            match ap {
                Some(v) => s.push_str(&format!("{name},{v}\n")),
                None => s.push_str(&format!("{name},\n")),
            }
        }
        s
    }

    /// Writes `<prefix>metrics.csv`, `<prefix>report.json` and
    /// `<prefix>per_class_ap.csv` into `dir`.
    pub fn write(&self, dir: &Path, prefix: &str, class_names: &[String]) -> Result<()> {
        fs::create_dir_all(dir).map_err(Error::io(dir))?;
        let put = |name: &str, body: String| {
            let p = dir.join(format!("{prefix}{name}"));
            fs::write(&p, body).map_err(Error::io(p))
        };
        put("metrics.csv", self.metrics_csv())?;
        let json = serde_json::to_string_pretty(self).expect("report serializes");
        put("report.json", json + "\n")?;
        put("per_class_ap.csv", self.per_class_csv(class_names))
    }
}
