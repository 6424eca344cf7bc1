//! Box-IoU detection and end-to-end recognition scoring.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_IOU_THRESHOLD: f64 = 0.5;

/// IoU of two `[x0, y0, x1, y1]` boxes; 0 when the union is empty.
pub fn iou(a: [f64; 4], b: [f64; 4]) -> f64 {
    let area = |r: [f64; 4]| (r[2] - r[0]).max(0.0) * (r[3] - r[1]).max(0.0);
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    let union = area(a) + area(b) - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// `(cx, cy, w, h)` to `[x0, y0, x1, y1]`.
pub fn corners(b: [f64; 4]) -> [f64; 4] {
    [
        b[0] - b[2] / 2.0,
        b[1] - b[3] / 2.0,
        b[0] + b[2] / 2.0,
        b[1] + b[3] / 2.0,
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    /// `[x0, y0, x1, y1]`.
    pub bbox: [f64; 4],
    pub score: f64,
    pub text: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthBox {
    pub bbox: [f64; 4],
    pub text: String,
}

/// Greedy one-to-one matching in descending score order (ties by index).
///
/// Each prediction takes the free ground truth with the highest IoU above
/// `iou_thresh`, also requiring an exact, case-sensitive text match when
/// `require_text_match` is set. Returns `(prediction, ground truth)` pairs.
pub fn match_detections(
    preds: &[ScoredBox],
    gts: &[GroundTruthBox],
    iou_thresh: f64,
    require_text_match: bool,
) -> Vec<(usize, usize)> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].score.total_cmp(&preds[a].score).then(a.cmp(&b)));
    let mut taken = vec![false; gts.len()];
    let mut matches = Vec::new();
    for p in order {
        let mut best: Option<(usize, f64)> = None;
        for (g, gt) in gts.iter().enumerate() {
            if taken[g] || (require_text_match && preds[p].text != gt.text) {
                continue;
            }
            let o = iou(preds[p].bbox, gt.bbox);
            if o > iou_thresh && best.is_none_or(|(_, b)| o > b) {
                best = Some((g, o));
            }
        }
        if let Some((g, _)) = best {
            taken[g] = true;
            matches.push((p, g));
        }
    }
    matches
}

/// Harmonic mean of precision and recall; 0 when both are 0.
pub fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Prf {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub true_positives: usize,
    pub predictions: usize,
    pub ground_truths: usize,
}

impl Prf {
    pub fn from_counts(true_positives: usize, predictions: usize, ground_truths: usize) -> Self {
        let ratio = |a: usize, b: usize| if b > 0 { a as f64 / b as f64 } else { 0.0 };
        let precision = ratio(true_positives, predictions);
        let recall = ratio(true_positives, ground_truths);
        Self {
            precision,
            recall,
            f1: f1(precision, recall),
            true_positives,
            predictions,
            ground_truths,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageMatches {
    pub image_id: String,
    pub detection: Vec<(usize, usize)>,
    pub recognition: Vec<(usize, usize)>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub images: usize,
    pub iou_threshold: f64,
    pub detection: Prf,
    /// `f1` here is the end-to-end H score.
    pub recognition: Prf,
    pub per_image: Vec<ImageMatches>,
}

impl EvalResult {
    pub const CSV_HEADER: &'static str =
        "images,det_precision,det_recall,det_f1,rec_precision,rec_recall,h";

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_line(&self) -> String {
        let (d, r) = (&self.detection, &self.recognition);
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.images, d.precision, d.recall, d.f1, r.precision, r.recall, r.f1
        )
    }
}

/// One evaluated image.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageEval {
    pub image_id: String,
    pub predictions: Vec<ScoredBox>,
    pub ground_truth: Vec<GroundTruthBox>,
}

/// Detection (IoU only) and recognition (IoU plus exact text) scores pooled
/// over all images.
pub fn end_to_end_metrics(images: &[ImageEval], iou_thresh: f64) -> Result<EvalResult> {
    if images.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if !(0.0..1.0).contains(&iou_thresh) {
        return Err(Error::InvalidArgument(format!(
            "IoU threshold {iou_thresh} outside [0, 1)"
        )));
    }
    let (mut det_tp, mut rec_tp, mut preds, mut gts) = (0, 0, 0, 0);
    let mut per_image = Vec::with_capacity(images.len());
    for im in images {
        let detection = match_detections(&im.predictions, &im.ground_truth, iou_thresh, false);
        let recognition = match_detections(&im.predictions, &im.ground_truth, iou_thresh, true);
        det_tp += detection.len();
        rec_tp += recognition.len();
        preds += im.predictions.len();
        gts += im.ground_truth.len();
        per_image.push(ImageMatches {
            image_id: im.image_id.clone(),
            detection,
            recognition,
        });
    }
    Ok(EvalResult {
        images: images.len(),
        iou_threshold: iou_thresh,
        detection: Prf::from_counts(det_tp, preds, gts),
        recognition: Prf::from_counts(rec_tp, preds, gts),
        per_image,
    })
}
