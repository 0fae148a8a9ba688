//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use spctrl_core::evaluation::{
    ImagePredictions, PredictedInstance, PredictionSet, MAX_DETECTIONS, OKS_THRESHOLDS,
};
use spctrl_core::pose::{Keypoint, PoseInstance, PoseSet, SkeletonSpec};
use spctrl_core::spr::RenderStyle;

pub const CH: usize = 4;

pub fn random_embedding(n: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    (0..n * CH).map(|_| rng.gen_range(-3.0f32..3.0)).collect()
}

/// Keypoints land anywhere in a margin around the image so clipping is hit.
pub fn random_pose(spec: &SkeletonSpec, size: (usize, usize), rng: &mut ChaCha8Rng) -> PoseSet {
    let (h, w) = size;
    let instances = (0..rng.gen_range(1..=3))
        .map(|_| {
            PoseInstance::new(
                (0..spec.num_keypoints())
                    .map(|_| {
                        if rng.gen_bool(0.25) {
                            Keypoint::absent()
                        } else {
                            Keypoint::visible(
                                rng.gen_range(-4.0..w as f64 + 4.0),
                                rng.gen_range(-4.0..h as f64 + 4.0),
                            )
                        }
                    })
                    .collect(),
            )
        })
        .collect();
    PoseSet::new(size, instances)
}

/// Per-pixel pull renderer: walks the paint order backwards and returns the
/// first primitive covering the pixel centre.
pub fn reference_pixel(
    set: &PoseSet,
    spec: &SkeletonSpec,
    e_kpt: &[f32],
    out: (usize, usize),
    style: RenderStyle,
    row: usize,
    col: usize,
) -> Vec<f32> {
    let sx = out.1 as f64 / set.width() as f64;
    let sy = out.0 as f64 / set.height() as f64;
    let (px, py) = (col as f64, row as f64);
    for inst in set.instances.iter().rev() {
        let at = |i: usize| (inst.keypoints[i].x * sx, inst.keypoints[i].y * sy);
        for i in (0..spec.num_keypoints()).rev() {
            if !inst.keypoints[i].is_valid() {
                continue;
            }
            let (x, y) = at(i);
            if (px - x).powi(2) + (py - y).powi(2) <= style.point_radius.powi(2) {
                return e_kpt[i * CH..(i + 1) * CH].to_vec();
            }
        }
        for &(i, j) in spec.edges().iter().rev() {
            if !(inst.keypoints[i].is_valid() && inst.keypoints[j].is_valid()) {
                continue;
            }
            if dist2_to_segment((px, py), at(i), at(j)) <= (style.line_width / 2.0).powi(2) {
                return vec![1.0; CH];
            }
        }
    }
    vec![0.0; CH]
}

/// Endpoint distance outside the segment's slab, perpendicular distance inside.
fn dist2_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (ux, uy) = (b.0 - a.0, b.1 - a.1);
    let (vx, vy) = (p.0 - a.0, p.1 - a.1);
    let dot = ux * vx + uy * vy;
    let len2 = ux * ux + uy * uy;
    if dot <= 0.0 || len2 == 0.0 {
        vx * vx + vy * vy
    } else if dot >= len2 {
        (p.0 - b.0).powi(2) + (p.1 - b.1).powi(2)
    } else {
        let cross = ux * vy - uy * vx;
        cross * cross / len2
    }
}

/// Reference OKS written out term by term.
pub fn reference_oks(pred: &[(f64, f64)], gt: &PoseInstance, area: f64, sigmas: &[f64]) -> f64 {
    let terms: Vec<f64> = gt
        .keypoints
        .iter()
        .zip(pred)
        .zip(sigmas)
        .filter(|((g, _), _)| g.v() > 0)
        .map(|((g, p), s)| {
            let d2 = (p.0 - g.x) * (p.0 - g.x) + (p.1 - g.y) * (p.1 - g.y);
            let var = 4.0 * s * s;
            (-d2 / (2.0 * area * var)).exp()
        })
        .collect();
    terms.iter().sum::<f64>() / terms.len() as f64
}

// Brute-force reference for pose mAP: matching and AP are recomputed from
// their definitions without sharing code with the library.

struct Det {
    image: u64,
    rank: usize,
    score: f64,
    pos: Vec<(f64, f64)>,
}

pub fn reference_map(preds: &PredictionSet, gts: &[PoseSet], sigmas: &[f64]) -> Vec<f64> {
    let mut out = Vec::new();
    for &thr in &OKS_THRESHOLDS {
        let mut dets: Vec<(f64, u64, usize, bool)> = Vec::new();
        let mut n_gt = 0;
        for g in gts {
            let id = g.image_id.unwrap();
            let targets: Vec<&PoseInstance> = g
                .instances
                .iter()
                .filter(|i| i.num_valid() > 0 && i.scale_area().is_some())
                .collect();
            n_gt += targets.len();
            let Some(p) = preds.0.iter().find(|p| p.image_id == id) else { continue };
            let mut mine: Vec<Det> = p
                .instances
                .iter()
                .map(|d| Det {
                    image: id,
                    rank: 0,
                    score: d.score,
                    pos: d.keypoints.iter().map(|k| (k[0], k[1])).collect(),
                })
                .collect();
            // Stable selection sort by descending score.
            let mut sorted = Vec::new();
            while !mine.is_empty() {
                let mut b = 0;
                for i in 1..mine.len() {
                    if mine[i].score > mine[b].score {
                        b = i;
                    }
                }
                sorted.push(mine.remove(b));
            }
            sorted.truncate(MAX_DETECTIONS);
            let mut used = vec![false; targets.len()];
            for (rank, d) in sorted.iter_mut().enumerate() {
                d.rank = rank;
                let mut choice: Option<(usize, f64)> = None;
                for (gi, t) in targets.iter().enumerate() {
                    if used[gi] {
                        continue;
                    }
                    let o = reference_oks(&d.pos, t, t.scale_area().unwrap(), sigmas);
                    let floor = choice.map_or(thr.min(1.0 - 1e-10), |c| c.1);
                    if o >= floor {
                        choice = Some((gi, o));
                    }
                }
                if let Some((gi, _)) = choice {
                    used[gi] = true;
                }
                dets.push((d.score, d.image, d.rank, choice.is_some()));
            }
        }
        dets.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let mut prec = Vec::new();
        let mut rec = Vec::new();
        for k in 1..=dets.len() {
            let tp = dets[..k].iter().filter(|d| d.3).count() as f64;
            prec.push(tp / k as f64);
            rec.push(tp / n_gt as f64);
        }
        let mut ap = 0.0;
        for r in 0..=100 {
            let level = r as f64 / 100.0;
            let best = (0..dets.len())
                .filter(|&k| rec[k] >= level)
                .map(|k| prec[k])
                .fold(0.0, f64::max);
            ap += best;
        }
        out.push(100.0 * ap / 101.0);
    }
    out
}

/// Up to three ground-truth instances per image with noisy, partly spurious predictions.
pub fn random_fixture(seed: u64, images: usize) -> (PredictionSet, Vec<PoseSet>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut gts = Vec::new();
    let mut preds = Vec::new();
    for img in 0..images {
        let n_gt = rng.gen_range(0..=3);
        let instances: Vec<PoseInstance> = (0..n_gt)
            .map(|_| {
                let (ox, oy) = (rng.gen_range(10.0..200.0), rng.gen_range(10.0..200.0));
                PoseInstance::new(
                    (0..17)
                        .map(|_| {
                            if rng.gen_bool(0.2) {
                                Keypoint::absent()
                            } else {
                                Keypoint::visible(ox + rng.gen_range(0.0..60.0), oy + rng.gen_range(0.0..60.0))
                            }
                        })
                        .collect(),
                )
            })
            .collect();
        let mut dets = Vec::new();
        for inst in &instances {
            if rng.gen_bool(0.8) {
                let noise = rng.gen_range(0.0..8.0);
                dets.push(PredictedInstance {
                    keypoints: inst
                        .keypoints
                        .iter()
                        .map(|k| [k.x + rng.gen_range(-noise..=noise), k.y + rng.gen_range(-noise..=noise), 0.9])
                        .collect(),
                    // Coarse scores so ties across images occur.
                    score: (rng.gen_range(0..5) as f64) / 4.0,
                });
            }
        }
        for _ in 0..rng.gen_range(0..=2) {
            dets.push(PredictedInstance {
                keypoints: (0..17)
                    .map(|_| [rng.gen_range(0.0..256.0), rng.gen_range(0.0..256.0), 0.3])
                    .collect(),
                score: (rng.gen_range(0..5) as f64) / 4.0,
            });
        }
        let id = 7 * img as u64 + 1;
        gts.push(PoseSet {
            image_id: Some(id),
            ..PoseSet::new((256, 256), instances)
        });
        preds.push(ImagePredictions {
            image_id: id,
            instances: dets,
        });
    }
    (PredictionSet(preds), gts)
}
