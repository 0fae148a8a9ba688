//! File-driven commands behind the CLI.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use spctrl_core::checkpoint::load_model;
use spctrl_core::data::disk_radius;
use spctrl_core::evaluation::{
    centroid_estimate, evaluate_generations, EvaluationReport, ImagePredictions, PredictionSet,
};
use spctrl_core::pose::{load_skeleton_spec, parse_coco_keypoints, PoseSet, SkeletonSpec};
use spctrl_core::sampler::{SampleRequest, Sampler, SamplerConfig};
use spctrl_core::spr::{render_openpose_rgb, RenderStyle};
use spctrl_core::tensor_io::png_from_unit_rgb;

fn write(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    std::fs::write(path, bytes).with_context(|| format!("writing {}", path.display()))
}

/// Samples one image for the pose document at `pose` and writes it as PNG.
pub fn generate(checkpoint: &Path, pose: &Path, prompt: &str, seed: u64, sampler: &SamplerConfig, out: &Path) -> Result<()> {
    let model = load_model(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let pose_set = PoseSet::load(pose)?;
    let req = SampleRequest {
        steps: sampler.steps,
        cfg_scale: sampler.cfg_scale,
        cond_scale: sampler.cond_scale,
        ..SampleRequest::new(pose_set, prompt, seed)
    };
    let image = Sampler::new(&model, sampler.clone())?.sample(&req)?;
    write(out, &image.png()?)
}

/// Scores a prediction file against COCO keypoint annotations and writes
/// the JSON report.
pub fn evaluate(pred: &Path, gt: &Path, spec: &Path, out: &Path) -> Result<EvaluationReport> {
    let spec = load_skeleton_spec(spec)?;
    let gts = parse_coco_keypoints(gt, &spec)?;
    let preds = PredictionSet::load(pred, &spec)?;
    let report = evaluate_generations(&preds, &gts, &spec)?;
    write(out, serde_json::to_string_pretty(&report)?.as_bytes())?;
    Ok(report)
}

fn read_rgb(path: &Path) -> Result<(usize, usize, Vec<f32>)> {
    let img = image::open(path)
        .with_context(|| format!("reading {}", path.display()))?
        .to_rgb8();
    let (w, h) = img.dimensions();
    let data = img.into_raw().into_iter().map(|v| f32::from(v) / 255.0).collect();
    Ok((h as usize, w as usize, data))
}

/// Runs the color-centroid estimator on `<images>/<image_id>.png` for every
/// image in the annotations and writes a prediction file.
pub fn estimate(images: &Path, gt: &Path, spec: &SkeletonSpec, out: &Path) -> Result<PredictionSet> {
    let gts = parse_coco_keypoints(gt, spec)?;
    let mut rows = Vec::new();
    for g in &gts {
        let id = g.image_id.context("annotation image without id")?;
        let path = images.join(format!("{id}.png"));
        if !path.exists() {
            bail!("no generated image for image_id {id} at {}", path.display());
        }
        let (h, w, data) = read_rgb(&path)?;
        let r = disk_radius(h.min(w));
        let inst = centroid_estimate(h, w, &data, spec, std::f64::consts::PI * r * r)?;
        rows.push(ImagePredictions {
            image_id: id,
            instances: vec![inst],
        });
    }
    let set = PredictionSet(rows);
    write(out, set.to_json().as_bytes())?;
    Ok(set)
}

/// Draws the pose document as an OpenPose-style skeleton image.
pub fn render(pose: &Path, spec: &SkeletonSpec, out: &Path) -> Result<()> {
    let pose_set = PoseSet::load(pose)?;
    pose_set.validate(spec)?;
    let (h, w) = pose_set.image_size;
    let rgb = render_openpose_rgb(&pose_set, spec, (h, w), RenderStyle::for_height(h))?;
    write(out, &png_from_unit_rgb(h, w, &rgb.data)?)
}

pub fn default_checkpoint(configured: Option<PathBuf>) -> Result<PathBuf> {
    configured.context("no checkpoint given: pass --checkpoint or set serve.checkpoint in the config")
}
