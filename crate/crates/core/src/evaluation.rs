//! Task metrics: top-1 error, IoU, AP at IoU 0.5 and NMS-based merging.

use std::collections::{BTreeSet, HashMap};
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box `(x_min, y_min, x_max, y_max)`; serialized as a 4-array.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl From<[f64; 4]> for BBox {
    fn from(v: [f64; 4]) -> Self {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        [b.x_min, b.y_min, b.x_max, b.y_max]
    }
}

impl BBox {
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.x_min < self.x_max && self.y_min < self.y_max
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min).max(0.0) * (self.y_max - self.y_min).max(0.0)
    }
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let iw = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let ih = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: u64,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: u64,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
}

/// Percentage of predictions that differ from the labels.
pub fn top1_error(predictions: &[usize], labels: &[usize]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(Error::shape("predictions vs labels", &[labels.len()], &[predictions.len()]));
    }
    if labels.is_empty() {
        return Err(Error::Invalid("top-1 error of an empty set".into()));
    }
    let wrong = predictions.iter().zip(labels).filter(|(p, l)| p != l).count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Indices of `dets` sorted by descending confidence; ties keep input order.
fn ranking(dets: &[&Detection]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&a, &b| dets[b].confidence.total_cmp(&dets[a].confidence));
    order
}

/// Greedy one-to-one matching in rank order: each detection claims the
/// unmatched same-image ground truth with the highest IoU, if that IoU
/// reaches `iou_threshold`. Returns the true-positive flag per ranked
/// detection.
fn match_ranked(ranked: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> Vec<bool> {
    let mut by_image: HashMap<u64, Vec<usize>> = HashMap::new();
    for (i, g) in gts.iter().enumerate() {
        by_image.entry(g.image_id).or_default().push(i);
    }
    let mut taken = vec![false; gts.len()];
    ranked
        .iter()
        .map(|d| {
            let mut best: Option<(usize, f64)> = None;
            for &gi in by_image.get(&d.image_id).map(Vec::as_slice).unwrap_or(&[]) {
                if taken[gi] {
                    continue;
                }
                let v = iou(&d.bbox, &gts[gi].bbox);
                if best.is_none_or(|(_, b)| v > b) {
                    best = Some((gi, v));
                }
            }
            match best {
                Some((gi, v)) if v >= iou_threshold => {
                    taken[gi] = true;
                    true
                }
                _ => false,
            }
        })
        .collect()
}

/// All-point interpolated average precision for one class.
fn class_ap(dets: &[&Detection], gts: &[&GroundTruth], iou_threshold: f64) -> f64 {
    let order = ranking(dets);
    let ranked: Vec<&Detection> = order.iter().map(|&i| dets[i]).collect();
    let tp = match_ranked(&ranked, gts, iou_threshold);
    let mut precision = Vec::with_capacity(tp.len());
    let mut hits = 0usize;
    for (k, &is_tp) in tp.iter().enumerate() {
        hits += usize::from(is_tp);
        precision.push(hits as f64 / (k + 1) as f64);
    }
    // Interpolated precision at rank k: the best precision at any rank >= k.
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let npos = gts.len() as f64;
    tp.iter()
        .zip(&precision)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p / npos)
        .sum()
}

fn validate_inputs(detections: &[Detection], ground_truths: &[GroundTruth]) -> Result<()> {
    if ground_truths.is_empty() {
        return Err(Error::Invalid("average precision is undefined without ground truth".into()));
    }
    if let Some(d) = detections.iter().find(|d| !d.confidence.is_finite()) {
        return Err(Error::NonFinite(format!("detection confidence {}", d.confidence)));
    }
    Ok(())
}

/// Mean over ground-truth classes of the all-point interpolated AP, with a
/// detection counting as correct at IoU >= `iou_threshold`.
pub fn average_precision(detections: &[Detection], ground_truths: &[GroundTruth], iou_threshold: f64) -> Result<f64> {
    validate_inputs(detections, ground_truths)?;
    let classes: BTreeSet<u32> = ground_truths.iter().map(|g| g.class_id).collect();
    let mut sum = 0.0;
    for &c in &classes {
        let dets: Vec<&Detection> = detections.iter().filter(|d| d.class_id == c).collect();
        let gts: Vec<&GroundTruth> = ground_truths.iter().filter(|g| g.class_id == c).collect();
        sum += class_ap(&dets, &gts, iou_threshold);
    }
    Ok(sum / classes.len() as f64)
}

pub fn ap50(detections: &[Detection], ground_truths: &[GroundTruth]) -> Result<f64> {
    average_precision(detections, ground_truths, 0.5)
}

/// Union of two prediction sets followed by greedy NMS per (image, class):
/// the most confident box is kept and every box overlapping it with
/// IoU > `iou_threshold` is dropped. Kept boxes come out in input order
/// (`preds_a` first).
pub fn nms_merge(preds_a: &[Detection], preds_b: &[Detection], iou_threshold: f64) -> Result<Vec<Detection>> {
    if !(iou_threshold > 0.0 && iou_threshold <= 1.0) {
        return Err(Error::Config(format!("NMS threshold must be in (0, 1], got {iou_threshold}")));
    }
    let all: Vec<&Detection> = preds_a.iter().chain(preds_b).collect();
    let mut groups: HashMap<(u64, u32), Vec<usize>> = HashMap::new();
    for (i, d) in all.iter().enumerate() {
        groups.entry((d.image_id, d.class_id)).or_default().push(i);
    }
    let mut keep = vec![false; all.len()];
    for idx in groups.values() {
        let mut order = idx.clone();
        order.sort_by(|&a, &b| all[b].confidence.total_cmp(&all[a].confidence));
        let mut suppressed = vec![false; order.len()];
        for i in 0..order.len() {
            if suppressed[i] {
                continue;
            }
            keep[order[i]] = true;
            for j in i + 1..order.len() {
                if !suppressed[j] && iou(&all[order[i]].bbox, &all[order[j]].bbox) > iou_threshold {
                    suppressed[j] = true;
                }
            }
        }
    }
    Ok(all
        .into_iter()
        .zip(keep)
        .filter(|(_, k)| *k)
        .map(|(d, _)| d.clone())
        .collect())
}

/// One JSON-lines record; records without `confidence` are ground truth.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxRecord {
    pub image_id: u64,
    pub class_id: u32,
    #[serde(rename = "box")]
    pub bbox: BBox,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

/// Splits a JSON-lines box file into detections and ground truth.
pub fn parse_box_records(text: &str) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    let mut dets = Vec::new();
    let mut gts = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let r: BoxRecord = serde_json::from_str(line).map_err(|e| Error::Format {
            path: "<jsonl>".into(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        if !r.bbox.is_valid() {
            return Err(Error::Invalid(format!("line {}: degenerate box {:?}", i + 1, r.bbox)));
        }
        match r.confidence {
            Some(c) => dets.push(Detection {
                image_id: r.image_id,
                class_id: r.class_id,
                bbox: r.bbox,
                confidence: c,
            }),
            None => gts.push(GroundTruth {
                image_id: r.image_id,
                class_id: r.class_id,
                bbox: r.bbox,
            }),
        }
    }
    Ok((dets, gts))
}

pub fn read_box_records(path: &Path) -> Result<(Vec<Detection>, Vec<GroundTruth>)> {
    parse_box_records(&fs::read_to_string(path)?).map_err(|e| match e {
        Error::Format { reason, .. } => Error::Format {
            path: path.display().to_string(),
            reason,
        },
        e => e,
    })
}

pub fn write_detections(path: &Path, dets: &[Detection]) -> Result<()> {
    let mut f = std::io::BufWriter::new(fs::File::create(path)?);
    for d in dets {
        let r = BoxRecord {
            image_id: d.image_id,
            class_id: d.class_id,
            bbox: d.bbox,
            confidence: Some(d.confidence),
        };
        writeln!(f, "{}", serde_json::to_string(&r)?)?;
    }
    f.flush()?;
    Ok(())
}
