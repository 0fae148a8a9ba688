//! The keypoint-concept-learning efficacy experiment: a shared base
//! pretraining run, then one adapter run per heatmap-loss weight with
//! identical seeds.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::backbone::Model;
use crate::checkpoint::load_model;
use crate::config::Config;
use crate::data::{disk_radius, make_synthetic_dataset, SyntheticSample};
use crate::error::{Error, Result};
use crate::evaluation::{centroid_estimate, pose_map, ImagePredictions, PredictionSet};
use crate::pose::{resolve_skeleton, serialize_pose, PoseSet};
use crate::sampler::{KeypointAttention, SampleRequest, Sampler, SamplerConfig};
use crate::error::write_string;
use crate::train::{initial_model, latest_checkpoint, run_loop, run_pretraining, Stage, TrainConfig, Trainer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub etas: Vec<f64>,
    pub out_dir: PathBuf,
    /// Generations per arm for evaluation.
    pub generations: usize,
    /// Seed of the held-out pose set used for evaluation.
    pub eval_seed: u64,
    /// Sampling settings for the evaluation generations. The attention
    /// window and block are taken from the training gate.
    pub steps: usize,
    pub cfg_scale: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            etas: vec![0.0, 0.1],
            out_dir: PathBuf::from("runs/kcl_efficacy"),
            generations: 64,
            eval_seed: 1000,
            steps: 50,
            cfg_scale: 7.5,
        }
    }
}

fn dataset(cfg: &Config) -> Result<Vec<SyntheticSample>> {
    let spec = resolve_skeleton(&cfg.model.skeleton)?;
    make_synthetic_dataset(cfg.data.count, &spec, cfg.data.seed, cfg.model.image_size)
}

pub fn arm_dir(cfg: &ExperimentConfig, eta: f64) -> PathBuf {
    cfg.out_dir.join(format!("eta-{eta}"))
}

/// Training config of the arm with heatmap-loss weight `eta`.
pub fn arm_config(cfg: &Config, eta: f64, base: &Path) -> TrainConfig {
    TrainConfig {
        eta,
        base_checkpoint: Some(base.to_path_buf()),
        out_dir: arm_dir(&cfg.experiment, eta),
        ..cfg.train.clone()
    }
}

/// Runs (or resumes) the base stage and every arm; returns the final
/// checkpoint of each arm in `etas` order.
pub fn run_experiment_training(cfg: &Config) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let data = dataset(cfg)?;
    let base = run_pretraining(&cfg.model, &cfg.pretrain, &data)?;
    let mut finals = Vec::new();
    for &eta in &cfg.experiment.etas {
        let tc = arm_config(cfg, eta, &base);
        tc.validate(&cfg.model)?;
        let resume = latest_checkpoint(&tc.out_dir)?;
        let model = match &resume {
            Some(dir) => load_model(dir)?,
            None => initial_model(&cfg.model, &tc)?,
        };
        let mut trainer = Trainer::new(model, tc.clone(), Stage::Adapter, &data)?;
        if let Some(dir) = &resume {
            trainer.restore(dir)?;
        }
        log::info!("arm eta={eta} from step {}", trainer.step());
        finals.push(run_loop(&mut trainer, &tc.out_dir, tc.max_steps, tc.checkpoint_every)?);
    }
    Ok(finals)
}

/// File holding the evaluation of every arm.
pub const RESULTS_FILE: &str = "results.json";

/// Per-arm directory of evaluation generations.
pub const SAMPLES_DIR: &str = "samples";

/// Share of a keypoint token's attention that falls within `radius` map
/// pixels of the keypoint, with the keypoint scaled from image to map
/// resolution as for heatmaps.
pub fn attention_mass(map: &[Vec<f64>], x: f64, y: f64, image_size: (usize, usize), radius: f64) -> f64 {
    let rows = map.len();
    let cols = map.first().map_or(0, Vec::len);
    let qx = x * cols as f64 / image_size.1 as f64;
    let qy = y * rows as f64 / image_size.0 as f64;
    let (mut inside, mut total) = (0.0, 0.0);
    for (r, row) in map.iter().enumerate() {
        for (c, &v) in row.iter().enumerate() {
            total += v;
            if (c as f64 - qx).hypot(r as f64 - qy) <= radius {
                inside += v;
            }
        }
    }
    if total > 0.0 {
        inside / total
    } else {
        0.0
    }
}

/// Mean attention mass over the valid keypoints of the first instance.
fn mean_mass(maps: &[KeypointAttention], pose: &PoseSet, radius: f64) -> Result<f64> {
    let inst = pose
        .instances
        .first()
        .ok_or_else(|| Error::Eval("evaluation pose without instances".into()))?;
    let masses: Vec<f64> = maps
        .iter()
        .filter(|m| inst.keypoints[m.keypoint].is_valid())
        .map(|m| {
            let k = inst.keypoints[m.keypoint];
            attention_mass(&m.map, k.x, k.y, pose.image_size, radius)
        })
        .collect();
    if masses.is_empty() {
        return Err(Error::Eval("no keypoint attention maps to score".into()));
    }
    Ok(masses.iter().sum::<f64>() / masses.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArmMetrics {
    pub eta: f64,
    pub checkpoint_hash: String,
    pub generations: usize,
    /// Mean share of keypoint-token attention within 2 sigma of the keypoint.
    pub attention_mass: f64,
    /// OKS mAP in percent of the centroid estimator on the generations.
    pub centroid_map: f64,
    pub per_threshold: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentResults {
    pub arms: Vec<ArmMetrics>,
}

/// The held-out poses and captions used for every arm.
pub fn evaluation_set(cfg: &Config) -> Result<Vec<SyntheticSample>> {
    let spec = resolve_skeleton(&cfg.model.skeleton)?;
    make_synthetic_dataset(cfg.experiment.generations, &spec, cfg.experiment.eval_seed, cfg.model.image_size)
}

pub fn sampler_config(cfg: &Config) -> SamplerConfig {
    SamplerConfig {
        steps: cfg.experiment.steps,
        cfg_scale: cfg.experiment.cfg_scale,
        cond_scale: cfg.train.cond_scale,
        attention: cfg.train.gating.clone(),
    }
}

/// Generates one image per held-out pose and scores attention locality and
/// centroid pose mAP. Generation `i` uses seed `eval_seed + i`. With
/// `samples`, writes `<i>.png` and the pose document `<i>.json` there.
pub fn evaluate_arm(model: &Model, eta: f64, cfg: &Config, samples: Option<&Path>) -> Result<ArmMetrics> {
    let set = evaluation_set(cfg)?;
    let sc = sampler_config(cfg);
    let sampler = Sampler::new(model, sc.clone())?;
    let spec = model.skeleton();
    let size = cfg.model.image_size;
    let block_size = cfg.model.level_size(sc.attention.blocks[0].level);
    // Heatmap sigma is in attention-map pixels.
    let radius = 2.0 * cfg.train.heatmap_sigma;
    let disk = std::f64::consts::PI * disk_radius(size).powi(2);
    let mut masses = Vec::new();
    let mut preds = Vec::new();
    let mut gts = Vec::new();
    if let Some(dir) = samples {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    for (i, s) in set.iter().enumerate() {
        let req = SampleRequest {
            steps: sc.steps,
            cfg_scale: sc.cfg_scale,
            cond_scale: sc.cond_scale,
            capture_attention: true,
            ..SampleRequest::new(s.pose_set.clone(), s.caption.clone(), cfg.experiment.eval_seed + i as u64)
        };
        let out = sampler.sample(&req)?;
        let maps = out.attention.as_deref().unwrap_or_default();
        debug_assert!(maps.iter().all(|m| m.map.len() == block_size));
        masses.push(mean_mass(maps, &s.pose_set, radius)?);
        let id = i as u64;
        preds.push(ImagePredictions {
            image_id: id,
            instances: vec![centroid_estimate(out.height, out.width, &out.image, spec, disk)?],
        });
        let gt = PoseSet {
            image_id: Some(id),
            ..s.pose_set.clone()
        };
        if let Some(dir) = samples {
            let png = dir.join(format!("{id}.png"));
            std::fs::write(&png, out.png()?).map_err(|e| Error::io(&png, e))?;
            write_string(&dir.join(format!("{id}.json")), &serialize_pose(&gt))?;
        }
        gts.push(gt);
        if (i + 1) % 16 == 0 {
            log::info!("eta={eta}: {} / {} generations", i + 1, set.len());
        }
    }
    let r = pose_map(&PredictionSet(preds), &gts, spec)?;
    Ok(ArmMetrics {
        eta,
        checkpoint_hash: model.checkpoint_hash(),
        generations: set.len(),
        attention_mass: masses.iter().sum::<f64>() / masses.len() as f64,
        centroid_map: r.map,
        per_threshold: r.per_threshold,
    })
}

/// Evaluates the latest checkpoint of every arm and writes the results file.
pub fn run_experiment_eval(cfg: &Config) -> Result<ExperimentResults> {
    cfg.validate()?;
    let mut arms = Vec::new();
    for &eta in &cfg.experiment.etas {
        let dir = arm_dir(&cfg.experiment, eta);
        let ckpt = latest_checkpoint(&dir)?
            .ok_or_else(|| Error::Checkpoint(format!("no checkpoint under {}", dir.display())))?;
        log::info!("evaluating {}", ckpt.display());
        let model = load_model(&ckpt)?;
        arms.push(evaluate_arm(&model, eta, cfg, Some(&dir.join(SAMPLES_DIR)))?);
    }
    let results = ExperimentResults { arms };
    write_string(
        &cfg.experiment.out_dir.join(RESULTS_FILE),
        &serde_json::to_string_pretty(&results)?,
    )?;
    Ok(results)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mass_of_concentrated_and_uniform_maps() {
        let mut map = vec![vec![0.0; 16]; 16];
        map[4][8] = 0.3;
        assert_eq!(attention_mass(&map, 32.0, 16.0, (64, 64), 4.0), 1.0);
        map[15][0] = 0.3;
        assert_eq!(attention_mass(&map, 32.0, 16.0, (64, 64), 4.0), 0.5);
        let uniform = vec![vec![1.0; 16]; 16];
        let inside = (0..16)
            .flat_map(|r| (0..16).map(move |c| (r, c)))
            .filter(|&(r, c)| (c as f64 - 8.0f64).hypot(r as f64 - 8.0) <= 4.0)
            .count();
        let m = attention_mass(&uniform, 32.0, 32.0, (64, 64), 4.0);
        assert!((m - inside as f64 / 256.0).abs() < 1e-15);
        assert_eq!(attention_mass(&vec![vec![0.0; 4]; 4], 1.0, 1.0, (8, 8), 1.0), 0.0);
    }
}
