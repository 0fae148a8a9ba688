//! Pose-alignment metrics: OKS, COCO-style OKS mAP, prediction-file
//! ingestion and a color-centroid keypoint estimator for synthetic images.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};
use crate::pose::{PoseInstance, PoseSet, SkeletonSpec};

/// OKS thresholds 0.50, 0.55, ..., 0.95.
pub const OKS_THRESHOLDS: [f64; 10] = [0.50, 0.55, 0.60, 0.65, 0.70, 0.75, 0.80, 0.85, 0.90, 0.95];

/// Detections kept per image, highest score first.
pub const MAX_DETECTIONS: usize = 20;

const RECALL_POINTS: usize = 101;

/// Object keypoint similarity with `k_i = 2 sigma_i` and `s^2 = gt_area`.
/// Predicted positions of keypoints the ground truth lacks are ignored.
pub fn oks(pred: &[(f64, f64)], gt: &PoseInstance, gt_area: f64, sigmas: &[f64]) -> Result<f64> {
    let n = gt.keypoints.len();
    if pred.len() != n || sigmas.len() != n {
        return Err(Error::Eval(format!(
            "{} predicted keypoints and {} sigmas for {n} ground-truth keypoints",
            pred.len(),
            sigmas.len()
        )));
    }
    if !(gt_area > 0.0 && gt_area.is_finite()) {
        return Err(Error::Eval(format!("ground-truth area {gt_area} must be positive")));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    for i in gt.valid_indices() {
        let g = gt.keypoints[i];
        let (px, py) = pred[i];
        let d2 = (px - g.x).powi(2) + (py - g.y).powi(2);
        let k = 2.0 * sigmas[i];
        sum += (-d2 / (2.0 * gt_area * k * k)).exp();
        count += 1;
    }
    if count == 0 {
        return Err(Error::Eval("ground truth has no valid keypoints".into()));
    }
    Ok(sum / count as f64)
}

/// One detected instance: `[x, y, confidence]` per keypoint and an instance score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictedInstance {
    pub keypoints: Vec<[f64; 3]>,
    pub score: f64,
}

impl PredictedInstance {
    pub fn positions(&self) -> Vec<(f64, f64)> {
        self.keypoints.iter().map(|k| (k[0], k[1])).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImagePredictions {
    pub image_id: u64,
    pub instances: Vec<PredictedInstance>,
}

/// Estimator output for a set of images, in the JSON file layout.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PredictionSet(pub Vec<ImagePredictions>);

impl PredictionSet {
    /// Parses and checks the file layout; errors name the offending row.
    pub fn from_json(text: &str, spec: &SkeletonSpec) -> Result<Self> {
        let set: PredictionSet = serde_json::from_str(text).map_err(|e| Error::Eval(format!("prediction file: {e}")))?;
        set.validate(spec)?;
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>, spec: &SkeletonSpec) -> Result<Self> {
        Self::from_json(&read_to_string(path.as_ref())?, spec)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("plain data serializes")
    }

    pub fn validate(&self, spec: &SkeletonSpec) -> Result<()> {
        let n = spec.num_keypoints();
        let mut seen = BTreeSet::new();
        for (row, img) in self.0.iter().enumerate() {
            if !seen.insert(img.image_id) {
                return Err(Error::Eval(format!("row {row}: duplicate image_id {}", img.image_id)));
            }
            for (j, inst) in img.instances.iter().enumerate() {
                let at = || format!("row {row} (image_id {}), instance {j}", img.image_id);
                if inst.keypoints.len() != n {
                    return Err(Error::Eval(format!(
                        "{}: {} keypoints, skeleton `{}` has {n}",
                        at(),
                        inst.keypoints.len(),
                        spec.name()
                    )));
                }
                if !inst.score.is_finite() {
                    return Err(Error::Eval(format!("{}: non-finite score", at())));
                }
                if let Some(k) = inst.keypoints.iter().position(|k| k.iter().any(|v| !v.is_finite())) {
                    return Err(Error::Eval(format!("{}: keypoint {k} is not finite", at())));
                }
            }
        }
        Ok(())
    }
}

/// Converts ground-truth poses into the prediction layout with confidence
/// 1 on valid keypoints and instance score 1.
pub fn predictions_from_poses(gts: &[PoseSet]) -> Result<PredictionSet> {
    gts.iter()
        .map(|g| {
            let image_id = g
                .image_id
                .ok_or_else(|| Error::Eval("ground-truth pose set without image_id".into()))?;
            let instances = g
                .instances
                .iter()
                .map(|inst| PredictedInstance {
                    keypoints: inst
                        .keypoints
                        .iter()
                        .map(|k| [k.x, k.y, if k.is_valid() { 1.0 } else { 0.0 }])
                        .collect(),
                    score: 1.0,
                })
                .collect();
            Ok(ImagePredictions { image_id, instances })
        })
        .collect::<Result<Vec<_>>>()
        .map(PredictionSet)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MapResult {
    /// Mean AP over the thresholds, in percent.
    #[serde(rename = "mAP")]
    pub map: f64,
    /// AP in percent at each of [`OKS_THRESHOLDS`].
    pub per_threshold: Vec<f64>,
}

/// One scored detection after per-image matching.
#[derive(Debug, Clone, Copy)]
struct Scored {
    score: f64,
    image_id: u64,
    rank: usize,
    matched: [bool; OKS_THRESHOLDS.len()],
}

/// A ground truth takes part when it has a valid keypoint and a positive area.
fn counted(gt: &PoseInstance) -> Option<f64> {
    (gt.num_valid() > 0).then(|| gt.scale_area()).flatten()
}

/// COCO keypoint mAP. Within an image, detections are visited by descending
/// score and each takes the unmatched ground truth of highest OKS at or above
/// the threshold. Ground truths without valid keypoints or area are dropped.
/// AP uses 101-point interpolated precision; results are in percent.
pub fn pose_map(preds: &PredictionSet, gts: &[PoseSet], spec: &SkeletonSpec) -> Result<MapResult> {
    preds.validate(spec)?;
    let sigmas = spec.oks_sigmas();
    let by_id: BTreeMap<u64, &ImagePredictions> = preds.0.iter().map(|p| (p.image_id, p)).collect();
    let mut gt_ids = BTreeSet::new();
    for g in gts {
        g.validate(spec)?;
        let id = g
            .image_id
            .ok_or_else(|| Error::Eval("ground-truth pose set without image_id".into()))?;
        if !gt_ids.insert(id) {
            return Err(Error::Eval(format!("duplicate ground-truth image_id {id}")));
        }
    }
    if let Some(extra) = by_id.keys().find(|id| !gt_ids.contains(id)) {
        return Err(Error::Eval(format!("predictions for image_id {extra} which has no ground truth")));
    }

    let mut detections = Vec::new();
    let mut n_gt = 0usize;
    for g in gts {
        let id = g.image_id.expect("checked above");
        let targets: Vec<(&PoseInstance, f64)> = g.instances.iter().filter_map(|i| counted(i).map(|a| (i, a))).collect();
        n_gt += targets.len();
        let Some(p) = by_id.get(&id) else { continue };
        let mut order: Vec<usize> = (0..p.instances.len()).collect();
        order.sort_by(|&a, &b| p.instances[b].score.total_cmp(&p.instances[a].score));
        order.truncate(MAX_DETECTIONS);
        let sims: Vec<Vec<f64>> = order
            .iter()
            .map(|&d| {
                let pos = p.instances[d].positions();
                targets.iter().map(|(gt, area)| oks(&pos, gt, *area, sigmas)).collect()
            })
            .collect::<Result<_>>()?;
        let mut scored: Vec<Scored> = order
            .iter()
            .enumerate()
            .map(|(rank, &d)| Scored {
                score: p.instances[d].score,
                image_id: id,
                rank,
                matched: [false; OKS_THRESHOLDS.len()],
            })
            .collect();
        for (ti, &thr) in OKS_THRESHOLDS.iter().enumerate() {
            let mut taken = vec![false; targets.len()];
            for (di, row) in sims.iter().enumerate() {
                let mut best = thr.min(1.0 - 1e-10);
                let mut hit = None;
                for (gi, &s) in row.iter().enumerate() {
                    if taken[gi] || s < best {
                        continue;
                    }
                    best = s;
                    hit = Some(gi);
                }
                if let Some(gi) = hit {
                    taken[gi] = true;
                    scored[di].matched[ti] = true;
                }
            }
        }
        detections.extend(scored);
    }
    if n_gt == 0 {
        return Err(Error::Eval("no ground-truth instance with valid keypoints".into()));
    }
    // Ties across images break by image id, so the input order never matters.
    detections.sort_by(|a, b| {
        b.score
            .total_cmp(&a.score)
            .then(a.image_id.cmp(&b.image_id))
            .then(a.rank.cmp(&b.rank))
    });

    let per_threshold: Vec<f64> = (0..OKS_THRESHOLDS.len())
        .map(|ti| 100.0 * interpolated_ap(detections.iter().map(|d| d.matched[ti]), n_gt))
        .collect();
    let map = per_threshold.iter().sum::<f64>() / per_threshold.len() as f64;
    Ok(MapResult { map, per_threshold })
}

/// 101-point interpolated AP of detections already in rank order.
fn interpolated_ap(hits: impl Iterator<Item = bool>, n_gt: usize) -> f64 {
    let (mut tp, mut fp) = (0.0, 0.0);
    let mut recall = Vec::new();
    let mut precision = Vec::new();
    for hit in hits {
        if hit {
            tp += 1.0;
        } else {
            fp += 1.0;
        }
        recall.push(tp / n_gt as f64);
        precision.push(tp / (tp + fp));
    }
    for i in (1..precision.len()).rev() {
        if precision[i] > precision[i - 1] {
            precision[i - 1] = precision[i];
        }
    }
    let mut sum = 0.0;
    for r in 0..RECALL_POINTS {
        let level = r as f64 / (RECALL_POINTS - 1) as f64;
        let idx = recall.partition_point(|&x| x < level);
        if idx < precision.len() {
            sum += precision[idx];
        }
    }
    sum / RECALL_POINTS as f64
}

/// Report slots for metrics that need external models.
pub const NOT_COMPUTED: &str = "not computed";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    #[serde(rename = "mAP")]
    pub map: f64,
    pub per_threshold: Vec<f64>,
    pub thresholds: Vec<f64>,
    pub n_images: usize,
    pub fid: String,
    pub clip_score: String,
    pub detection_ap75: String,
}

/// Scores estimator predictions against the ground-truth poses the images
/// were generated from. Every ground-truth image needs a prediction row.
pub fn evaluate_generations(preds: &PredictionSet, gts: &[PoseSet], spec: &SkeletonSpec) -> Result<EvaluationReport> {
    let have: BTreeSet<u64> = preds.0.iter().map(|p| p.image_id).collect();
    for g in gts {
        if let Some(id) = g.image_id.filter(|id| !have.contains(id)) {
            return Err(Error::Eval(format!("predictions file has no entry for image_id {id}")));
        }
    }
    let r = pose_map(preds, gts, spec)?;
    Ok(EvaluationReport {
        map: r.map,
        per_threshold: r.per_threshold,
        thresholds: OKS_THRESHOLDS.to_vec(),
        n_images: gts.len(),
        fid: NOT_COMPUTED.into(),
        clip_score: NOT_COMPUTED.into(),
        detection_ap75: NOT_COMPUTED.into(),
    })
}

/// Largest L-infinity distance, in 0..255 units, at which a pixel still
/// counts as a keypoint's render color. Half the smallest palette step.
pub const COLOR_TOLERANCE: f64 = 40.0;

/// Locates keypoints in an image drawn with the skeleton's render colors.
/// Each pixel goes to its nearest palette color when within tolerance; each
/// keypoint is placed at the centroid of its largest 4-connected component.
/// Keypoint confidence is the component size over `expected_pixels` capped
/// at 1; the instance score is the mean confidence. Keypoints with no pixels
/// get position (0, 0) and confidence 0.
pub fn centroid_estimate(
    height: usize,
    width: usize,
    hwc: &[f32],
    spec: &SkeletonSpec,
    expected_pixels: f64,
) -> Result<PredictedInstance> {
    if hwc.len() != height * width * 3 {
        return Err(Error::Shape(format!("{} values for {height}x{width}x3", hwc.len())));
    }
    let palette = spec.render_colors();
    let label: Vec<Option<usize>> = hwc
        .chunks_exact(3)
        .map(|px| {
            let mut best: Option<(usize, f64)> = None;
            for (k, c) in palette.iter().enumerate() {
                let d = px
                    .iter()
                    .zip(c)
                    .map(|(&v, &c)| (f64::from(v) * 255.0 - f64::from(c)).abs())
                    .fold(0.0, f64::max);
                if d <= COLOR_TOLERANCE && best.is_none_or(|(_, b)| d < b) {
                    best = Some((k, d));
                }
            }
            best.map(|(k, _)| k)
        })
        .collect();

    // (size, sum_x, sum_y) of the largest component per keypoint.
    let mut best: Vec<Option<(usize, f64, f64)>> = vec![None; palette.len()];
    let mut seen = vec![false; label.len()];
    let mut stack = Vec::new();
    for start in 0..label.len() {
        let Some(k) = label[start] else { continue };
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut n, mut sx, mut sy) = (0usize, 0.0, 0.0);
        while let Some(i) = stack.pop() {
            let (row, col) = (i / width, i % width);
            n += 1;
            sx += col as f64;
            sy += row as f64;
            let mut visit = |j: usize| {
                if !seen[j] && label[j] == Some(k) {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if row > 0 {
                visit(i - width);
            }
            if row + 1 < height {
                visit(i + width);
            }
            if col > 0 {
                visit(i - 1);
            }
            if col + 1 < width {
                visit(i + 1);
            }
        }
        if best[k].is_none_or(|(m, _, _)| n > m) {
            best[k] = Some((n, sx, sy));
        }
    }
    let keypoints: Vec<[f64; 3]> = best
        .iter()
        .map(|b| match b {
            Some((n, sx, sy)) => {
                let n = *n as f64;
                [sx / n, sy / n, (n / expected_pixels).min(1.0)]
            }
            None => [0.0, 0.0, 0.0],
        })
        .collect();
    let score = keypoints.iter().map(|k| k[2]).sum::<f64>() / keypoints.len().max(1) as f64;
    Ok(PredictedInstance { keypoints, score })
}
