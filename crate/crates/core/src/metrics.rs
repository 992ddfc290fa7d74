//! Localisation metrics: mask overlap, peak detection, and recall that
//! punishes firing on the wrong class.

use crate::data::{Annotation, AnnotationSet};
use crate::error::{Error, Result};
use crate::field::Field2;
use crate::scalar::Real;

/// One predicted object center.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub cx: f64,
    pub cy: f64,
    pub score: f64,
}

/// Soerensen-Dice overlap between two binary masks.
///
/// Two empty masks count as perfect agreement (1.0).
pub fn dice(pred: &Field2<bool>, truth: &Field2<bool>) -> Result<f64> {
    pred.check_same_shape(truth, "pred vs truth")?;
    let mut intersection = 0usize;
    let mut total = 0usize;
    for (&a, &b) in pred.as_slice().iter().zip(truth.as_slice()) {
        intersection += (a && b) as usize;
        total += a as usize + b as usize;
    }
    if total == 0 {
        Ok(1.0)
    } else {
        Ok(2.0 * intersection as f64 / total as f64)
    }
}

/// Extracts local maxima of a score field as detections.
///
/// A pixel is a candidate if it reaches `score_threshold` and no 8-neighbor
/// beats it; equal-scoring plateau neighbors are broken lexicographically
/// by (row, col) so exactly one candidate survives per tie. Candidates are
/// then greedily suppressed in descending-score order (same tie-break)
/// until the survivors are pairwise at least `min_distance` apart.
pub fn extract_peaks<T: Real>(
    score: &Field2<T>,
    score_threshold: f64,
    min_distance: f64,
) -> Result<Vec<Detection>> {
    if !score_threshold.is_finite() {
        return Err(Error::Range(format!("score_threshold = {score_threshold} must be finite")));
    }
    if !(min_distance.is_finite() && min_distance >= 0.0) {
        return Err(Error::Range(format!("min_distance = {min_distance} must be nonnegative")));
    }
    let (h, w) = (score.height(), score.width());
    let mut candidates: Vec<(usize, usize, f64)> = Vec::new();
    for r in 0..h {
        for c in 0..w {
            let s = score.get(r, c).to_f64().unwrap();
            if s < score_threshold {
                continue;
            }
            let mut is_peak = true;
            'scan: for dr in -1i64..=1 {
                for dc in -1i64..=1 {
                    if dr == 0 && dc == 0 {
                        continue;
                    }
                    let (nr, nc) = (r as i64 + dr, c as i64 + dc);
                    if nr < 0 || nr >= h as i64 || nc < 0 || nc >= w as i64 {
                        continue;
                    }
                    let n = score.get(nr as usize, nc as usize).to_f64().unwrap();
                    // A strictly greater neighbor wins outright; an equal
                    // neighbor wins iff it precedes us lexicographically.
                    if n > s || (n == s && (nr as usize, nc as usize) < (r, c)) {
                        is_peak = false;
                        break 'scan;
                    }
                }
            }
            if is_peak {
                candidates.push((r, c, s));
            }
        }
    }

    candidates.sort_by(|a, b| {
        b.2.partial_cmp(&a.2).unwrap().then_with(|| (a.0, a.1).cmp(&(b.0, b.1)))
    });

    let mut kept: Vec<Detection> = Vec::new();
    let min_sq = min_distance * min_distance;
    for (r, c, s) in candidates {
        let (cx, cy) = (c as f64, r as f64);
        let far_enough = kept.iter().all(|d| {
            let (dx, dy) = (d.cx - cx, d.cy - cy);
            dx * dx + dy * dy >= min_sq
        });
        if far_enough {
            kept.push(Detection { cx, cy, score: s });
        }
    }
    Ok(kept)
}

/// Result of greedy one-to-one matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
    /// Matched `(prediction index, annotation index)` pairs.
    pub pairs: Vec<(usize, usize)>,
}

/// Greedily matches predictions to annotations within `radius`.
///
/// Candidate pairs are taken in ascending-distance order, ties broken by
/// prediction index then annotation index; each side matches at most once.
pub fn match_detections(
    predictions: &[Detection],
    annotations: &AnnotationSet,
    radius: f64,
) -> Result<MatchResult> {
    if !(radius.is_finite() && radius >= 0.0) {
        return Err(Error::Range(format!("match radius = {radius} must be nonnegative")));
    }
    let mut candidates: Vec<(f64, usize, usize)> = Vec::new();
    for (pi, p) in predictions.iter().enumerate() {
        for (ai, a) in annotations.items.iter().enumerate() {
            let d = ((p.cx - a.cx).powi(2) + (p.cy - a.cy).powi(2)).sqrt();
            if d <= radius {
                candidates.push((d, pi, ai));
            }
        }
    }
    candidates.sort_by(|a, b| {
        a.0.partial_cmp(&b.0).unwrap().then_with(|| (a.1, a.2).cmp(&(b.1, b.2)))
    });

    let mut pred_used = vec![false; predictions.len()];
    let mut ann_used = vec![false; annotations.len()];
    let mut pairs = Vec::new();
    for (_, pi, ai) in candidates {
        if !pred_used[pi] && !ann_used[ai] {
            pred_used[pi] = true;
            ann_used[ai] = true;
            pairs.push((pi, ai));
        }
    }
    Ok(MatchResult {
        true_positives: pairs.len(),
        false_positives: predictions.len() - pairs.len(),
        false_negatives: annotations.len() - pairs.len(),
        pairs,
    })
}

/// Recall on the target class discounted by recall on everything else:
/// `rec_target * (1 - rec_other)`. Detecting every wrong-class object
/// zeroes the score no matter how good target recall is.
pub fn exclusive_recall(rec_target: f64, rec_other: f64) -> Result<f64> {
    for (name, v) in [("rec_target", rec_target), ("rec_other", rec_other)] {
        if !((0.0..=1.0).contains(&v) && v.is_finite()) {
            return Err(Error::Range(format!("{name} = {v} outside [0, 1]")));
        }
    }
    Ok(rec_target * (1.0 - rec_other))
}

/// Per-image (or aggregated) evaluation summary.
///
/// On a per-image report `precision`, `recall`, and `f1` are consistent
/// with the counts; an aggregate report carries macro averages next to
/// pooled counts, from which micro scores can be recomputed.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub dice: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Recall per ground-truth class id, ascending by class.
    pub recall_per_class: Vec<(u32, f64)>,
    pub exclusive_recall: f64,
    pub true_positives: usize,
    pub false_positives: usize,
    pub false_negatives: usize,
}

impl MetricReport {
    /// Precision/recall/F1 from raw counts; empty denominators give 0,
    /// except the vacuous perfect case of nothing predicted and nothing
    /// annotated, which scores 1.
    pub fn prf(tp: usize, fp: usize, fn_count: usize) -> (f64, f64, f64) {
        if tp + fp + fn_count == 0 {
            return (1.0, 1.0, 1.0);
        }
        let precision = if tp + fp == 0 { 0.0 } else { tp as f64 / (tp + fp) as f64 };
        let recall = if tp + fn_count == 0 { 0.0 } else { tp as f64 / (tp + fn_count) as f64 };
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        (precision, recall, f1)
    }
}

/// Recall of one annotation subset against a shared prediction list.
pub(crate) fn class_recall(
    predictions: &[Detection],
    annotations: &[Annotation],
    radius: f64,
) -> Result<f64> {
    if annotations.is_empty() {
        return Ok(0.0);
    }
    let set = AnnotationSet::new("class", annotations.to_vec());
    let result = match_detections(predictions, &set, radius)?;
    Ok(result.true_positives as f64 / annotations.len() as f64)
}
