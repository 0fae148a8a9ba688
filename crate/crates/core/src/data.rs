//! Synthetic "blob animal" dataset: template skeletons under random affine
//! perturbation, each valid keypoint drawn as a disk of its skeleton color
//! over gray limbs and a tinted, textured background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pose::{Keypoint, PoseInstance, PoseSet, SkeletonSpec};
use crate::prompts::{fill_prompt_template, BACKGROUNDS, SPECIES, TEMPLATES};
use crate::spr::{rasterize_labels, Owner, RenderStyle};

/// Radius of drawn keypoint disks and width of limbs: 2 px at 64x64.
pub fn disk_radius(image_size: usize) -> f64 {
    (image_size as f64 / 32.0).round().max(1.0)
}

const DROP_KEYPOINT_PROB: f64 = 0.1;
const MAX_LAYOUT_TRIES: usize = 10_000;

/// Muted base color of each background category.
const BACKGROUND_TINTS: [[f32; 3]; 8] = [
    [0.55, 0.62, 0.45],
    [0.36, 0.47, 0.37],
    [0.50, 0.45, 0.40],
    [0.86, 0.88, 0.91],
    [0.60, 0.57, 0.54],
    [0.40, 0.48, 0.46],
    [0.78, 0.71, 0.56],
    [0.52, 0.52, 0.54],
];

/// Limb color of each species.
const LIMB_COLORS: [[f32; 3]; 8] = [
    [0.42, 0.34, 0.27],
    [0.30, 0.30, 0.32],
    [0.35, 0.24, 0.18],
    [0.70, 0.48, 0.22],
    [0.62, 0.52, 0.38],
    [0.22, 0.18, 0.16],
    [0.12, 0.12, 0.12],
    [0.66, 0.38, 0.20],
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub count: usize,
    pub seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { count: 512, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSample {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3`, values in [0, 1].
    pub image: Vec<f32>,
    pub pose_set: PoseSet,
    pub caption: String,
    pub species: String,
    pub background: String,
    pub template_id: usize,
}

/// Unit-square layout of the quadruped template, facing left.
const QUADRUPED: [(f64, f64); 17] = [
    (0.14, 0.14),
    (0.30, 0.14),
    (0.06, 0.30),
    (0.26, 0.32),
    (0.80, 0.32),
    (0.22, 0.50),
    (0.20, 0.68),
    (0.18, 0.86),
    (0.38, 0.50),
    (0.38, 0.68),
    (0.38, 0.86),
    (0.66, 0.50),
    (0.64, 0.68),
    (0.62, 0.86),
    (0.84, 0.50),
    (0.84, 0.68),
    (0.86, 0.86),
];

/// Template layout in the unit square: the quadruped for 17-keypoint
/// mammal skeletons, otherwise keypoints evenly spaced on a circle.
pub fn template_layout(spec: &SkeletonSpec) -> Vec<(f64, f64)> {
    if spec.name() == "ap10k" {
        return QUADRUPED.to_vec();
    }
    let n = spec.num_keypoints();
    (0..n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            (0.5 + 0.4 * a.cos(), 0.5 + 0.4 * a.sin())
        })
        .collect()
}

fn perturbed_layout(template: &[(f64, f64)], size: f64, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    let n = template.len() as f64;
    let cx = template.iter().map(|p| p.0).sum::<f64>() / n;
    let cy = template.iter().map(|p| p.1).sum::<f64>() / n;
    let scale = rng.gen_range(0.75..1.0) * size;
    let flip = if rng.gen_bool(0.5) { -1.0 } else { 1.0 };
    let angle = rng.gen_range(-15f64..15.0).to_radians();
    let (s, c) = angle.sin_cos();
    let pts: Vec<(f64, f64)> = template
        .iter()
        .map(|&(x, y)| {
            let (dx, dy) = (flip * (x - cx) * scale, (y - cy) * scale);
            (c * dx - s * dy, s * dx + c * dy)
        })
        .collect();
    let r = disk_radius(size as usize);
    let (lo, hi) = (r + 1.0, size - r - 2.0);
    let (min_x, max_x) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.0), a.1.max(p.0)));
    let (min_y, max_y) = pts.iter().fold((f64::MAX, f64::MIN), |a, p| (a.0.min(p.1), a.1.max(p.1)));
    let pick = |rng: &mut ChaCha8Rng, a: f64, b: f64| if a < b { rng.gen_range(a..b) } else { (a + b) / 2.0 };
    let tx = pick(rng, lo - min_x, hi - max_x);
    let ty = pick(rng, lo - min_y, hi - max_y);
    pts.iter().map(|&(x, y)| (x + tx, y + ty)).collect()
}

fn layout_ok(points: &[(f64, f64)], valid: &[bool], size: f64) -> bool {
    let r = disk_radius(size as usize);
    let (lo, hi) = (r + 1.0, size - r - 2.0);
    let min_gap = 2.0 * r + 2.0;
    for (i, &(x, y)) in points.iter().enumerate() {
        if !valid[i] {
            continue;
        }
        if !(lo..=hi).contains(&x) || !(lo..=hi).contains(&y) {
            return false;
        }
        for (j, &(u, w)) in points.iter().enumerate().skip(i + 1) {
            if valid[j] && (x - u).hypot(y - w) < min_gap {
                return false;
            }
        }
    }
    valid.iter().any(|&v| v)
}

fn background(tint: [f32; 3], size: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let fx = rng.gen_range(0.15f32..0.6);
    let fy = rng.gen_range(0.15f32..0.6);
    let phase = rng.gen_range(0.0f32..std::f32::consts::TAU);
    let mut img = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let wave = 0.04 * (fx * col as f32 + fy * row as f32 + phase).sin();
            for t in tint {
                let grain: f32 = rng.sample::<f32, _>(StandardNormal) * 0.015;
                img.push((t + wave + grain).clamp(0.0, 1.0));
            }
        }
    }
    img
}

fn make_sample(spec: &SkeletonSpec, template: &[(f64, f64)], size: usize, rng: &mut ChaCha8Rng) -> Result<SyntheticSample> {
    let n = spec.num_keypoints();
    let fsize = size as f64;
    let (points, valid) = (0..MAX_LAYOUT_TRIES)
        .find_map(|_| {
            let pts = perturbed_layout(template, fsize, rng);
            let valid: Vec<bool> = (0..n).map(|_| !rng.gen_bool(DROP_KEYPOINT_PROB)).collect();
            layout_ok(&pts, &valid, fsize).then_some((pts, valid))
        })
        .ok_or_else(|| Error::InvalidArgument(format!("no valid layout for {} at {size}px", spec.name())))?;
    let keypoints = points
        .iter()
        .zip(&valid)
        .map(|(&(x, y), &v)| if v { Keypoint::visible(x, y) } else { Keypoint::absent() })
        .collect();
    let pose_set = PoseSet::new((size, size), vec![PoseInstance::new(keypoints)]);

    let species_idx = rng.gen_range(0..SPECIES.len());
    let bg_idx = rng.gen_range(0..BACKGROUNDS.len());
    let template_id = rng.gen_range(1..=TEMPLATES.len());
    let caption = fill_prompt_template(template_id, SPECIES[species_idx], BACKGROUNDS[bg_idx])?;

    let mut image = background(BACKGROUND_TINTS[bg_idx], size, rng);
    let r = disk_radius(size);
    let style = RenderStyle {
        point_radius: r,
        line_width: r,
    };
    let labels = rasterize_labels(&pose_set, spec, (size, size), style)?;
    let colors = spec.render_colors();
    for row in 0..size {
        for col in 0..size {
            let px = &mut image[(row * size + col) * 3..][..3];
            match labels.owner(row, col) {
                Owner::Background => {}
                Owner::Edge(_) => px.copy_from_slice(&LIMB_COLORS[species_idx]),
                Owner::Keypoint(k) => {
                    for (d, &c) in px.iter_mut().zip(&colors[k]) {
                        *d = c as f32 / 255.0;
                    }
                }
            }
        }
    }
    Ok(SyntheticSample {
        height: size,
        width: size,
        image,
        pose_set,
        caption,
        species: SPECIES[species_idx].to_string(),
        background: BACKGROUNDS[bg_idx].to_string(),
        template_id,
    })
}

/// Generates `count` samples of `image_size`² pixels; sample `i` depends only
/// on `seed` and `i`.
pub fn make_synthetic_dataset(
    count: usize,
    spec: &SkeletonSpec,
    seed: u64,
    image_size: usize,
) -> Result<Vec<SyntheticSample>> {
    if count == 0 {
        return Err(Error::InvalidArgument("dataset count must be at least 1".into()));
    }
    if image_size < 16 {
        return Err(Error::InvalidArgument(format!("image size {image_size} below 16")));
    }
    let template = template_layout(spec);
    (0..count)
        .map(|i| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            make_sample(spec, &template, image_size, &mut rng)
        })
        .collect()
}
