//! Turning head outputs into scored, transcribed detections.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{image_tensor, Spotter};
use crate::error::{Error, Result};
use crate::fscrs::Point;
use crate::metrics::{
    corners, end_to_end_metrics, iou, EvalResult, GroundTruthBox, ImageEval, ScoredBox,
};
use crate::raster::GrayImage;
use crate::synth::{alphabet, Scene};
use crate::tensor::{sigmoid, Scalar, Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Index of the proposal that produced it.
    pub query: usize,
    pub score: f64,
    /// Normalized `(cx, cy, w, h)`.
    pub bbox: [f64; 4],
    pub center_points: Vec<Point>,
    pub text: String,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InferenceOptions {
    pub score_threshold: f64,
    /// Lower-scored detections overlapping a kept one by more than this are
    /// dropped.
    pub nms_iou: f64,
}

impl Default for InferenceOptions {
    fn default() -> Self {
        Self {
            score_threshold: 0.5,
            nms_iou: 0.5,
        }
    }
}

/// Per-point argmax, repeats collapsed, blanks dropped. `char_logits` is
/// `[n, classes + 1]` with the blank last.
pub fn transcribe<T: Scalar>(char_logits: &Tensor<T>) -> Result<String> {
    let s = char_logits.shape();
    if s.len() != 2 || s[1] < 2 {
        return Err(Error::Shape(format!(
            "character logits must be [n, classes + 1], got {s:?}"
        )));
    }
    if !char_logits.is_finite() {
        return Err(Error::non_finite("character logits"));
    }
    let blank = s[1] - 1;
    let argmax: Vec<usize> = (0..s[0])
        .map(|r| {
            let row = char_logits.row(r);
            let mut best = 0;
            for (i, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect();
    collapse(&argmax, blank)
}

/// Collapses an argmax class sequence into text.
pub fn collapse(classes: &[usize], blank: usize) -> Result<String> {
    let chars = alphabet();
    let mut out = String::new();
    let mut prev = None;
    for &c in classes {
        if c != blank && Some(c) != prev {
            let ch = chars.get(c).ok_or_else(|| {
                Error::InvalidArgument(format!(
                    "class {c} is outside the {}-symbol alphabet",
                    chars.len()
                ))
            })?;
            out.push(*ch);
        }
        prev = Some(c);
    }
    Ok(out)
}

/// Greedy non-maximum suppression on box IoU, highest score first (ties by
/// query index).
pub fn nms(mut detections: Vec<Detection>, iou_thresh: f64) -> Vec<Detection> {
    detections.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.query.cmp(&b.query)));
    let mut kept: Vec<Detection> = Vec::new();
    for d in detections {
        if kept
            .iter()
            .all(|k| iou(corners(k.bbox), corners(d.bbox)) <= iou_thresh)
        {
            kept.push(d);
        }
    }
    kept
}

/// Detections for one image, after thresholding and NMS.
pub fn predict<T: Scalar>(
    model: &Spotter<T>,
    image: &GrayImage,
    options: &InferenceOptions,
) -> Result<Vec<Detection>> {
    let tape = Tape::inference();
    let out = model.forward(&tape, &image_tensor(image))?;
    let (n, classes) = (model.config.num_points, model.config.num_classes + 1);
    let logits = tape.value(out.heads.instance_logits);
    let chars = tape.value(out.heads.char_logits);
    let points = tape.value(out.heads.center_points);
    let boxes = tape.value(out.heads.bbox);
    let mut dets = Vec::new();
    for (q, &l) in logits.data().iter().enumerate() {
        let score = sigmoid(l.to_f64_lossy());
        if score < options.score_threshold {
            continue;
        }
        let rows = &chars.data()[q * n * classes..(q + 1) * n * classes];
        let text = transcribe(&Tensor::from_vec(&[n, classes], rows.to_vec()))?;
        let pts = &points.data()[q * n * 2..(q + 1) * n * 2];
        dets.push(Detection {
            query: q,
            score,
            bbox: std::array::from_fn(|i| boxes.row(q)[i].to_f64_lossy()),
            center_points: pts
                .chunks(2)
                .map(|p| [p[0].to_f64_lossy(), p[1].to_f64_lossy()])
                .collect(),
            text,
        });
    }
    Ok(nms(dets, options.nms_iou))
}

/// Copy of `image` with each detection's centerline drawn white and its
/// box drawn black.
pub fn draw_overlay(image: &GrayImage, detections: &[Detection]) -> GrayImage {
    let mut out = image.clone();
    let (w, h) = (image.width as f64, image.height as f64);
    let px = |p: [f64; 2]| [p[0] * w, p[1] * h];
    for d in detections {
        let [x0, y0, x1, y1] = corners(d.bbox);
        let c = [[x0, y0], [x1, y0], [x1, y1], [x0, y1]];
        for i in 0..4 {
            out.draw_segment(px(c[i]), px(c[(i + 1) % 4]), 1.0, 0.0);
        }
        for seg in d.center_points.windows(2) {
            out.draw_segment(px(seg[0]), px(seg[1]), 1.5, 255.0);
        }
    }
    out
}

/// Runs [`predict`] on every scene and scores it against the annotations.
/// Images are processed in parallel; results do not depend on scheduling.
pub fn evaluate<T: Scalar>(
    model: &Spotter<T>,
    scenes: &[Scene],
    options: &InferenceOptions,
    iou_thresh: f64,
) -> Result<(EvalResult, Vec<Vec<Detection>>)> {
    if scenes.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let detections: Vec<Vec<Detection>> = scenes
        .par_iter()
        .map(|s| predict(model, &s.image, options))
        .collect::<Result<_>>()?;
    let images: Vec<ImageEval> = scenes
        .iter()
        .zip(&detections)
        .map(|(s, dets)| ImageEval {
            image_id: s.annotation.image_id.clone(),
            predictions: dets
                .iter()
                .map(|d| ScoredBox {
                    bbox: corners(d.bbox),
                    score: d.score,
                    text: d.text.clone(),
                })
                .collect(),
            ground_truth: s
                .annotation
                .instances
                .iter()
                .map(|i| GroundTruthBox {
                    bbox: corners(i.bbox),
                    text: i.text.clone(),
                })
                .collect(),
        })
        .collect();
    Ok((end_to_end_metrics(&images, iou_thresh)?, detections))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn collapse_rules() {
        let blank = 96;
        let a = crate::synth::class_of('A').unwrap();
        let b = crate::synth::class_of('B').unwrap();
        let one = crate::synth::class_of('1').unwrap();
        assert_eq!(collapse(&[a, a, blank, b], blank).unwrap(), "AB");
        assert_eq!(collapse(&[blank; 5], blank).unwrap(), "");
        assert_eq!(collapse(&[one, one, one, blank, one], blank).unwrap(), "11");
        assert!(collapse(&[200], blank).is_err());
    }

    #[test]
    fn transcribe_takes_row_argmax() {
        let mut data = vec![0.0f64; 3 * 97];
        data[crate::synth::class_of('x').unwrap()] = 2.0;
        data[97 + 96] = 1.0;
        data[2 * 97 + crate::synth::class_of('y').unwrap()] = 3.0;
        assert_eq!(transcribe(&Tensor::from_vec(&[3, 97], data)).unwrap(), "xy");
        assert!(transcribe(&Tensor::<f64>::zeros(&[3])).is_err());
    }

    #[test]
    fn nms_keeps_best_of_overlapping() {
        let det = |query, score, bbox| Detection {
            query,
            score,
            bbox,
            center_points: vec![],
            text: String::new(),
        };
        let kept = nms(
            vec![
                det(0, 0.6, [0.5, 0.5, 0.2, 0.2]),
                det(1, 0.9, [0.51, 0.5, 0.2, 0.2]),
                det(2, 0.7, [0.1, 0.1, 0.1, 0.1]),
            ],
            0.5,
        );
        assert_eq!(kept.iter().map(|d| d.query).collect::<Vec<_>>(), [1, 2]);
    }
}
