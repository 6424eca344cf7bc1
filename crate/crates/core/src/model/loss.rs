//! Set-prediction loss: Hungarian matching, then focal instance
//! classification, per-point character cross-entropy and L1 on points and
//! boxes.

use serde::{Deserialize, Serialize};

use super::matcher::hungarian;
use super::{ForwardOutput, SpotterConfig};
use crate::error::{Error, Result};
use crate::fscrs::{sample_curve, ControlPointSet, Point};
use crate::synth::{encode_text, SceneAnnotation};
use crate::tensor::{Scalar, Tape, Var};

pub const FOCAL_ALPHA: f64 = 0.25;
pub const FOCAL_GAMMA: f64 = 2.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub instance: f64,
    pub character: f64,
    pub points: f64,
    pub bbox: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            instance: 2.0,
            character: 1.0,
            points: 5.0,
            bbox: 2.0,
        }
    }
}

/// Ground truth for one instance in model coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceTarget {
    pub control_points: ControlPointSet,
    /// The centerline sampled exactly as proposals are.
    pub points: Vec<Point>,
    pub bbox: [f64; 4],
    /// One class per sampled point; `blank` between and around characters.
    pub chars: Vec<usize>,
}

/// Per-point character labels for a string of `classes`.
///
/// Point `j` sits at `u = j / (n − 1)` along the centerline and character
/// `i` is centered at `(i + 0.5) / L`; the point takes that character when
/// it lies within a quarter character width of the center, else blank.
pub fn char_targets(classes: &[usize], n: usize, blank: usize) -> Result<Vec<usize>> {
    let len = classes.len();
    if len == 0 {
        return Err(Error::InvalidArgument("transcription is empty".into()));
    }
    // Every character needs a point inside its window and every pair of
    // neighbours a blank point between them; both hold while the point
    // spacing in character units stays below one half.
    if n < 2 || (len as f64) / ((n - 1) as f64) >= 0.5 {
        return Err(Error::InvalidArgument(format!(
            "{len} characters cannot be labelled with {n} points"
        )));
    }
    Ok((0..n)
        .map(|j| {
            let pos = j as f64 / (n - 1) as f64 * len as f64;
            let i = (pos.floor() as usize).min(len - 1);
            if (pos - (i as f64 + 0.5)).abs() <= 0.25 {
                classes[i]
            } else {
                blank
            }
        })
        .collect())
}

pub fn prepare_targets(
    annotation: &SceneAnnotation,
    config: &SpotterConfig,
) -> Result<Vec<InstanceTarget>> {
    annotation
        .instances
        .iter()
        .map(|inst| {
            let classes = encode_text(&inst.text)?;
            if let Some(&c) = classes.iter().find(|&&c| c >= config.num_classes) {
                return Err(Error::InvalidArgument(format!(
                    "class {c} exceeds the model's {} classes",
                    config.num_classes
                )));
            }
            Ok(InstanceTarget {
                control_points: inst.control_points,
                points: sample_curve(
                    &inst.control_points,
                    config.num_points,
                    config.tension,
                    config.sampling,
                )?,
                bbox: inst.bbox,
                chars: char_targets(&classes, config.num_points, config.blank())?,
            })
        })
        .collect()
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTerms {
    pub total: f64,
    pub instance: f64,
    pub character: f64,
    pub points: f64,
    pub bbox: f64,
    pub proposal_class: f64,
    pub proposal_points: f64,
}

#[derive(Clone, Debug)]
pub struct LossOutput {
    pub total: Var,
    pub terms: LossTerms,
    /// `(target, prediction)` pairs.
    pub matches: Vec<(usize, usize)>,
}

fn focal_cost(p: f64) -> f64 {
    let p = p.clamp(1e-8, 1.0 - 1e-8);
    let pos = FOCAL_ALPHA * (1.0 - p).powf(FOCAL_GAMMA) * -p.ln();
    let neg = (1.0 - FOCAL_ALPHA) * p.powf(FOCAL_GAMMA) * -(1.0 - p).ln();
    pos - neg
}

fn mean_abs(a: impl Iterator<Item = f64>, b: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for (x, y) in a.zip(b) {
        s += (x - y).abs();
        n += 1;
    }
    s / n.max(1) as f64
}

/// Matches targets to the `K` decoder outputs and to the per-token proposals
/// (when present), and builds the weighted loss on the tape.
pub fn compute_loss<T: Scalar>(
    tape: &Tape<T>,
    out: &ForwardOutput,
    targets: &[InstanceTarget],
    config: &SpotterConfig,
    weights: &LossWeights,
) -> Result<LossOutput> {
    let (n, classes) = (config.num_points, config.num_classes + 1);
    let h = &out.heads;
    let logits = tape.value(h.instance_logits);
    let k = logits.len();
    let points = tape.value(h.center_points);
    let boxes = tape.value(h.bbox);
    let probs: Vec<f64> = logits
        .data()
        .iter()
        .map(|&v| crate::tensor::sigmoid(v.to_f64_lossy()))
        .collect();

    let cost: Vec<Vec<f64>> = targets
        .iter()
        .map(|t| {
            (0..k)
                .map(|q| {
                    let pts = &points.data()[q * n * 2..(q + 1) * n * 2];
                    let pl1 = mean_abs(
                        pts.iter().map(|v| v.to_f64_lossy()),
                        t.points.iter().flatten().copied(),
                    );
                    let bl1 = mean_abs(
                        boxes.row(q).iter().map(|v| v.to_f64_lossy()),
                        t.bbox.iter().copied(),
                    );
                    weights.instance * focal_cost(probs[q])
                        + weights.points * pl1
                        + weights.bbox * bl1
                })
                .collect()
        })
        .collect();
    let matches = hungarian(&cost)?;
    let norm = T::from_usize(targets.len().max(1)).unwrap();
    let alpha = T::from_f64_lossy(FOCAL_ALPHA);
    let gamma = T::from_f64_lossy(FOCAL_GAMMA);

    let mut labels = vec![T::zero(); k];
    for &(_, q) in &matches {
        labels[q] = T::one();
    }
    let instance = tape.scale(
        tape.focal_loss(h.instance_logits, &labels, alpha, gamma),
        T::one() / norm,
    );
    let mut parts = vec![(instance, weights.instance)];
    let mut terms = LossTerms {
        instance: tape.value(instance).data()[0].to_f64_lossy(),
        ..Default::default()
    };

    if !matches.is_empty() {
        let rows: Vec<usize> = matches
            .iter()
            .flat_map(|&(_, q)| (q * n)..(q * n + n))
            .collect();
        let char_targets: Vec<usize> = matches
            .iter()
            .flat_map(|&(g, _)| targets[g].chars.iter().copied())
            .collect();
        let logits_flat = tape.reshape(h.char_logits, &[k * n, classes]);
        let character = tape.cross_entropy(tape.select_rows(logits_flat, &rows), &char_targets);

        let pts_flat = tape.reshape(h.center_points, &[k * n, 2]);
        let pt_target: Vec<T> = matches
            .iter()
            .flat_map(|&(g, _)| {
                targets[g]
                    .points
                    .iter()
                    .flatten()
                    .map(|&v| T::from_f64_lossy(v))
            })
            .collect();
        let pts = tape.l1_loss(tape.select_rows(pts_flat, &rows), &pt_target);

        let box_rows: Vec<usize> = matches.iter().map(|&(_, q)| q).collect();
        let box_target: Vec<T> = matches
            .iter()
            .flat_map(|&(g, _)| targets[g].bbox.map(T::from_f64_lossy))
            .collect();
        let bbox = tape.l1_loss(tape.select_rows(h.bbox, &box_rows), &box_target);

        terms.character = tape.value(character).data()[0].to_f64_lossy();
        terms.points = tape.value(pts).data()[0].to_f64_lossy();
        terms.bbox = tape.value(bbox).data()[0].to_f64_lossy();
        parts.extend([
            (character, weights.character),
            (pts, weights.points),
            (bbox, weights.bbox),
        ]);
    }

    if let (Some(scores), Some(crp)) = (out.token_scores, out.token_control_points) {
        let sv = tape.value(scores);
        let cv = tape.value(crp);
        let nt = sv.len();
        let cost: Vec<Vec<f64>> = targets
            .iter()
            .map(|t| {
                (0..nt)
                    .map(|i| {
                        let p = crate::tensor::sigmoid(sv.data()[i].to_f64_lossy());
                        let l1 = mean_abs(
                            cv.row(i).iter().map(|v| v.to_f64_lossy()),
                            t.control_points.0.iter().flatten().copied(),
                        );
                        weights.instance * focal_cost(p) + weights.points * l1
                    })
                    .collect()
            })
            .collect();
        let token_matches = hungarian(&cost)?;
        let mut labels = vec![T::zero(); nt];
        for &(_, i) in &token_matches {
            labels[i] = T::one();
        }
        let class = tape.scale(
            tape.focal_loss(scores, &labels, alpha, gamma),
            T::one() / norm,
        );
        terms.proposal_class = tape.value(class).data()[0].to_f64_lossy();
        parts.push((class, weights.instance));
        if !token_matches.is_empty() {
            let rows: Vec<usize> = token_matches.iter().map(|&(_, i)| i).collect();
            let target: Vec<T> = token_matches
                .iter()
                .flat_map(|&(g, _)| {
                    targets[g]
                        .control_points
                        .0
                        .iter()
                        .flatten()
                        .map(|&v| T::from_f64_lossy(v))
                })
                .collect();
            let l1 = tape.l1_loss(tape.select_rows(crp, &rows), &target);
            terms.proposal_points = tape.value(l1).data()[0].to_f64_lossy();
            parts.push((l1, weights.points));
        }
    }

    let mut total = tape.scale(parts[0].0, T::from_f64_lossy(parts[0].1));
    for &(v, w) in &parts[1..] {
        total = tape.add(total, tape.scale(v, T::from_f64_lossy(w)));
    }
    terms.total = tape.value(total).data()[0].to_f64_lossy();
    if !terms.total.is_finite() {
        return Err(Error::non_finite(format!(
            "loss (instance {}, character {}, points {}, bbox {}, proposal class {}, proposal points {})",
            terms.instance, terms.character, terms.points, terms.bbox, terms.proposal_class, terms.proposal_points
        )));
    }
    Ok(LossOutput {
        total,
        terms,
        matches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn char_labels_place_characters_at_their_centers() {
        let t = char_targets(&[7, 8], 9, 99).unwrap();
        // u·L for j = 0..8 is 0, .25, .5, .75, 1, 1.25, 1.5, 1.75, 2.
        assert_eq!(t, [99, 7, 7, 7, 99, 8, 8, 8, 99]);
        let t = char_targets(&[1, 1, 1], 25, 96).unwrap();
        let mut collapsed = Vec::new();
        for (j, &c) in t.iter().enumerate() {
            if c != 96 && (j == 0 || t[j - 1] != c) {
                collapsed.push(c);
            }
        }
        assert_eq!(collapsed, [1, 1, 1]);
        assert!(char_targets(&[1; 12], 25, 96).is_err());
        assert!(char_targets(&[], 25, 96).is_err());
    }

    #[test]
    fn every_length_up_to_eleven_round_trips() {
        for len in 1..=11 {
            let classes: Vec<usize> = (0..len).map(|i| i % 3).collect();
            let t = char_targets(&classes, 25, 96).unwrap();
            let mut out = Vec::new();
            let mut prev = None;
            for &c in &t {
                if Some(c) != prev && c != 96 {
                    out.push(c);
                }
                prev = Some(c);
            }
            assert_eq!(out, classes, "len {len}");
        }
    }
}
