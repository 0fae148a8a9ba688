//! Joint training of the adapter, the keypoint-embedding module and the
//! keypoint tokens against `L_ldm + η·L_ht`, and the base pretraining stage
//! that stands in for a pretrained text-to-image model.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::backbone::{add_noise, CaptureRequest, Conditioning, Model, ModelConfig, ParamGroup};
use crate::checkpoint::{
    load_model, load_parameters, read_train_state, save_checkpoint, TrainState, MANIFEST_FILE, OPTIMIZER_FILE,
};
use crate::data::SyntheticSample;
use crate::error::{Error, Result};
use crate::kcl::{augment_prompt, heatmap_loss, GatingConfig};
use crate::optim::Adam;
use crate::spr::{rasterize_labels, render_heatmaps, HeatmapStack, LabelMap, RenderStyle};

pub const METRICS_FILE: &str = "metrics.ndjson";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Weight of the heatmap loss.
    pub eta: f64,
    pub lr: f64,
    pub prompt_drop_prob: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub gating: GatingConfig,
    /// Checkpoint period in steps; 0 writes only the initial and final ones.
    pub checkpoint_every: usize,
    /// Dropped prompts lose their keypoint tokens too.
    pub drop_kpt_tokens_with_prompt: bool,
    /// Heatmap σ in pixels at the attention-map resolution.
    pub heatmap_sigma: f64,
    /// Conditioning scale `λ` during training.
    pub cond_scale: f64,
    /// Pretrained base checkpoint providing the base U-Net and text encoder.
    pub base_checkpoint: Option<PathBuf>,
    pub out_dir: PathBuf,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            eta: 0.1,
            lr: 1e-5,
            prompt_drop_prob: 0.5,
            batch_size: 8,
            max_steps: 10_000,
            seed: 0,
            gating: GatingConfig::default(),
            checkpoint_every: 1000,
            drop_kpt_tokens_with_prompt: true,
            heatmap_sigma: 2.0,
            cond_scale: 1.0,
            base_checkpoint: None,
            out_dir: PathBuf::from("runs/train"),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta {} must be >= 0", self.eta)));
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..=1.0).contains(&self.prompt_drop_prob) {
            return Err(Error::Config(format!("prompt_drop_prob {} outside [0, 1]", self.prompt_drop_prob)));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.heatmap_sigma.is_finite() && self.heatmap_sigma > 0.0) {
            return Err(Error::Config(format!("heatmap_sigma {} must be > 0", self.heatmap_sigma)));
        }
        if !(self.cond_scale.is_finite() && self.cond_scale >= 0.0) {
            return Err(Error::Config(format!("cond_scale {} must be >= 0", self.cond_scale)));
        }
        self.gating.validate(model.schedule.timesteps)?;
        if let Some(b) = self.gating.blocks.iter().find(|b| b.level >= model.channels.len()) {
            return Err(Error::Config(format!("gated block {b} does not exist")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PretrainConfig {
    pub lr: f64,
    pub prompt_drop_prob: f64,
    pub batch_size: usize,
    pub max_steps: usize,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub out_dir: PathBuf,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            prompt_drop_prob: 0.2,
            batch_size: 8,
            max_steps: 6000,
            seed: 0,
            checkpoint_every: 2000,
            out_dir: PathBuf::from("runs/base"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub l_ldm: f64,
    pub l_ht: f64,
    pub total: f64,
}

/// What one batch element of a step uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SamplePlan {
    pub index: usize,
    pub timestep: usize,
    pub drop_prompt: bool,
}

/// The random stream of training step `step`; a run's draws depend only on
/// the seed and the step index, so resuming replays them exactly.
pub fn step_rng(seed: u64, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(step as u64);
    rng
}

/// Per-sample dataset index, timestep in `[0, timesteps)` and prompt-drop flag.
pub fn draw_plan(
    rng: &mut ChaCha8Rng,
    batch: usize,
    dataset_len: usize,
    timesteps: usize,
    drop_prob: f64,
) -> Vec<SamplePlan> {
    (0..batch)
        .map(|_| SamplePlan {
            index: rng.gen_range(0..dataset_len),
            timestep: rng.gen_range(0..timesteps),
            drop_prompt: rng.gen_bool(drop_prob),
        })
        .collect()
}

/// `H x W x 3` in [0, 1] to `3 x H x W` in [-1, 1].
pub fn image_to_model(sample: &SyntheticSample) -> Tensor {
    Tensor::from_slice(&sample.image)
        .reshape([sample.height as i64, sample.width as i64, 3])
        .permute([2, 0, 1])
        .contiguous()
        * 2.0
        - 1.0
}

fn gaussian(rng: &mut ChaCha8Rng, shape: &[i64]) -> Tensor {
    let n: i64 = shape.iter().product();
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_slice(&v).reshape(shape)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Base U-Net and text encoder, no pose condition.
    Base,
    /// Adapter, zero convolutions, keypoint embedding module and tokens.
    Adapter,
}

impl Stage {
    pub fn trainable_groups(self) -> &'static [ParamGroup] {
        match self {
            Stage::Base => &[ParamGroup::Base, ParamGroup::TextEncoder],
            Stage::Adapter => &[
                ParamGroup::Adapter,
                ParamGroup::ZeroConvs,
                ParamGroup::SprModule,
                ParamGroup::KptTokens,
            ],
        }
    }
}

struct Prepared {
    x0: Tensor,
    caption: String,
    augmented: String,
    tokens_only: String,
    labels: LabelMap,
    /// One stack per attention resolution among the gated blocks.
    heatmaps: Vec<HeatmapStack>,
}

pub struct Trainer {
    model: Model,
    cfg: TrainConfig,
    stage: Stage,
    opt: Adam,
    step: usize,
    data: Vec<Prepared>,
}

impl std::fmt::Debug for Trainer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Trainer")
            .field("stage", &self.stage)
            .field("step", &self.step)
            .field("samples", &self.data.len())
            .finish_non_exhaustive()
    }
}

impl Trainer {
    pub fn new(model: Model, cfg: TrainConfig, stage: Stage, dataset: &[SyntheticSample]) -> Result<Self> {
        cfg.validate(model.config())?;
        if dataset.is_empty() {
            return Err(Error::InvalidArgument("empty training set".into()));
        }
        let mc = model.config();
        let size = mc.image_size;
        if let Some(s) = dataset.iter().find(|s| s.height != size || s.width != size) {
            return Err(Error::Shape(format!("sample {}x{} but model is {size}x{size}", s.height, s.width)));
        }
        let sizes: BTreeSet<usize> = cfg.gating.blocks.iter().map(|b| mc.level_size(b.level)).collect();
        let r = mc.cond_resolution;
        let data = dataset
            .iter()
            .map(|s| {
                let registry = model.registry();
                Ok(Prepared {
                    x0: image_to_model(s),
                    caption: s.caption.clone(),
                    augmented: augment_prompt(&s.caption, &s.pose_set, registry),
                    tokens_only: augment_prompt("", &s.pose_set, registry),
                    labels: rasterize_labels(&s.pose_set, model.skeleton(), (r, r), RenderStyle::for_height(r))?,
                    heatmaps: sizes
                        .iter()
                        .map(|&n| render_heatmaps(&s.pose_set, (n, n), cfg.heatmap_sigma))
                        .collect::<Result<_>>()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        model.set_trainable(stage.trainable_groups());
        let opt = Adam::new(cfg.lr)?;
        Ok(Self {
            model,
            cfg,
            stage,
            opt,
            step: 0,
            data,
        })
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    pub fn into_model(self) -> Model {
        self.model
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Completed steps.
    pub fn step(&self) -> usize {
        self.step
    }

    fn prompt_for(&self, p: &Prepared, plan: &SamplePlan) -> String {
        match (self.stage, plan.drop_prompt) {
            (Stage::Base, false) => p.caption.clone(),
            (Stage::Base, true) => String::new(),
            (Stage::Adapter, false) => p.augmented.clone(),
            (Stage::Adapter, true) if self.cfg.drop_kpt_tokens_with_prompt => String::new(),
            (Stage::Adapter, true) => p.tokens_only.clone(),
        }
    }

    /// One optimizer step. A non-finite loss aborts before any update.
    pub fn train_step(&mut self) -> Result<StepMetrics> {
        let mc = self.model.config();
        let mut rng = step_rng(self.cfg.seed, self.step);
        let plan = draw_plan(
            &mut rng,
            self.cfg.batch_size,
            self.data.len(),
            self.model.schedule().len(),
            self.cfg.prompt_drop_prob,
        );
        let s = mc.image_size as i64;
        let b = plan.len() as i64;
        let eps = gaussian(&mut rng, &[b, mc.in_channels as i64, s, s]);
        let x0 = Tensor::stack(&plan.iter().map(|p| self.data[p.index].x0.shallow_clone()).collect::<Vec<_>>(), 0);
        let timesteps: Vec<usize> = plan.iter().map(|p| p.timestep).collect();
        let x_t = add_noise(&x0, &eps, &timesteps, self.model.schedule())?;
        let prompts: Vec<String> = plan.iter().map(|p| self.prompt_for(&self.data[p.index], p)).collect();
        let prompt_refs: Vec<&str> = prompts.iter().map(String::as_str).collect();
        let text = self.model.encode_prompts(&prompt_refs)?;

        let (l_ldm, l_ht) = match self.stage {
            Stage::Base => {
                let (pred, _) = self
                    .model
                    .denoise_forward(&x_t, &timesteps, &text.hidden, None, &CaptureRequest::none())?;
                (pred.mse_loss(&eps, tch::Reduction::Mean), Tensor::zeros([], (Kind::Float, tch::Device::Cpu)))
            }
            Stage::Adapter => {
                let labels: Vec<&LabelMap> = plan.iter().map(|p| &self.data[p.index].labels).collect();
                let cond = self.model.condition(&labels, Some(&mut rng))?;
                let capture = CaptureRequest::blocks(self.cfg.gating.blocks.iter().copied(), true);
                let (pred, record) = self.model.denoise_forward(
                    &x_t,
                    &timesteps,
                    &text.hidden,
                    Some(Conditioning {
                        image: &cond,
                        scale: self.cfg.cond_scale,
                    }),
                    &capture,
                )?;
                let positions: Vec<_> = text.prompts.iter().map(|p| &p.kpt_positions).collect();
                let stacks: Vec<&[HeatmapStack]> =
                    plan.iter().map(|p| self.data[p.index].heatmaps.as_slice()).collect();
                let l_ht = heatmap_loss(&record, &positions, &stacks, &self.cfg.gating)?;
                (pred.mse_loss(&eps, tch::Reduction::Mean), l_ht)
            }
        };
        let total = &l_ldm + &l_ht * self.cfg.eta;
        let metrics = StepMetrics {
            step: self.step,
            l_ldm: l_ldm.double_value(&[]),
            l_ht: l_ht.double_value(&[]),
            total: total.double_value(&[]),
        };
        if !(metrics.l_ldm.is_finite() && metrics.l_ht.is_finite() && metrics.total.is_finite()) {
            return Err(Error::NonFiniteLoss {
                step: self.step,
                l_ldm: metrics.l_ldm,
                l_ht: metrics.l_ht,
            });
        }
        let params = self.model.trainable_parameters();
        Adam::zero_grad(&params);
        total.backward();
        self.opt.step(&params);
        self.step += 1;
        Ok(metrics)
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        save_checkpoint(
            &self.model,
            dir,
            Some((
                &self.opt,
                TrainState {
                    step: self.step,
                    optimizer_steps: self.opt.steps(),
                },
            )),
        )
    }

    /// Restores parameters, optimizer moments and the step counter.
    pub fn restore(&mut self, dir: &Path) -> Result<()> {
        let state = read_train_state(dir)?
            .ok_or_else(|| Error::Checkpoint(format!("{} has no training state", dir.display())))?;
        load_parameters(&self.model, dir, None)?;
        self.opt.load(&dir.join(OPTIMIZER_FILE), state.optimizer_steps)?;
        self.step = state.step;
        Ok(())
    }
}

pub fn checkpoint_dir(out_dir: &Path, step: usize) -> PathBuf {
    out_dir.join(format!("ckpt-{step:06}"))
}

/// Keeps the lines of an existing metrics log for steps before `keep_below`.
fn open_metrics(path: &Path, keep_below: usize) -> Result<BufWriter<File>> {
    let mut kept = Vec::new();
    if keep_below > 0 && path.exists() {
        let f = File::open(path).map_err(|e| Error::io(path, e))?;
        for line in BufReader::new(f).lines() {
            let line = line.map_err(|e| Error::io(path, e))?;
            let m: StepMetrics = serde_json::from_str(&line)?;
            if m.step < keep_below {
                kept.push(line);
            }
        }
    }
    let f = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(f);
    for line in kept {
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    Ok(w)
}

/// Trains until `max_steps`, logging one JSON line per step and writing
/// checkpoints to `out_dir/ckpt-NNNNNN`. Returns the final checkpoint.
pub fn run_loop(trainer: &mut Trainer, out_dir: &Path, max_steps: usize, checkpoint_every: usize) -> Result<PathBuf> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let log_path = out_dir.join(METRICS_FILE);
    let mut log = open_metrics(&log_path, trainer.step())?;
    if trainer.step() == 0 {
        trainer.save(&checkpoint_dir(out_dir, 0))?;
    }
    while trainer.step() < max_steps {
        let m = trainer.train_step()?;
        writeln!(log, "{}", serde_json::to_string(&m)?).map_err(|e| Error::io(&log_path, e))?;
        if checkpoint_every > 0 && trainer.step() % checkpoint_every == 0 {
            log.flush().map_err(|e| Error::io(&log_path, e))?;
            trainer.save(&checkpoint_dir(out_dir, trainer.step()))?;
        }
        if trainer.step() % 100 == 0 {
            log::info!("step {} l_ldm {:.4} l_ht {:.5}", m.step, m.l_ldm, m.l_ht);
        }
    }
    log.flush().map_err(|e| Error::io(&log_path, e))?;
    let last = checkpoint_dir(out_dir, trainer.step());
    if !last.join(MANIFEST_FILE).exists() {
        trainer.save(&last)?;
    }
    Ok(last)
}

/// Builds the adapter-stage model: fresh, or with base U-Net and text
/// encoder taken from `cfg.base_checkpoint`, the adapter re-copied from the
/// base encoder and the keypoint tokens re-seeded from the loaded words.
pub fn initial_model(model_cfg: &ModelConfig, cfg: &TrainConfig) -> Result<Model> {
    let model = Model::new(model_cfg)?;
    if let Some(base) = &cfg.base_checkpoint {
        load_parameters(&model, base, Some(&[ParamGroup::Base, ParamGroup::TextEncoder]))?;
        model.copy_base_encoder_to_adapter()?;
        model.reset_keypoint_tokens();
    }
    Ok(model)
}

/// Adapter-stage training on `dataset`, optionally resuming from a checkpoint.
pub fn run_training(
    model_cfg: &ModelConfig,
    cfg: &TrainConfig,
    dataset: &[SyntheticSample],
    resume: Option<&Path>,
) -> Result<PathBuf> {
    let model = match resume {
        Some(dir) => load_model(dir)?,
        None => initial_model(model_cfg, cfg)?,
    };
    let mut trainer = Trainer::new(model, cfg.clone(), Stage::Adapter, dataset)?;
    if let Some(dir) = resume {
        trainer.restore(dir)?;
    }
    run_loop(&mut trainer, &cfg.out_dir, cfg.max_steps, cfg.checkpoint_every)
}

/// Latest `ckpt-NNNNNN` in `dir` carrying training state.
pub fn latest_checkpoint(dir: &Path) -> Result<Option<PathBuf>> {
    if !dir.exists() {
        return Ok(None);
    }
    let mut best: Option<(usize, PathBuf)> = None;
    for entry in std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))? {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
        if !name.starts_with("ckpt-") || !path.join(MANIFEST_FILE).exists() {
            continue;
        }
        if let Some(state) = read_train_state(&path)? {
            if best.as_ref().is_none_or(|(s, _)| state.step > *s) {
                best = Some((state.step, path));
            }
        }
    }
    Ok(best.map(|(_, p)| p))
}

/// Base-stage training: the base U-Net and text encoder learn the dataset
/// from captions alone, resuming from the latest checkpoint in `out_dir`.
/// The result, `out_dir/base`, has the adapter copied from the trained base
/// encoder and keypoint tokens seeded from the trained words; an existing
/// result is reused.
pub fn run_pretraining(model_cfg: &ModelConfig, cfg: &PretrainConfig, dataset: &[SyntheticSample]) -> Result<PathBuf> {
    let out = cfg.out_dir.join("base");
    if out.join(MANIFEST_FILE).exists() {
        return Ok(out);
    }
    let tc = TrainConfig {
        eta: 0.0,
        lr: cfg.lr,
        prompt_drop_prob: cfg.prompt_drop_prob,
        batch_size: cfg.batch_size,
        max_steps: cfg.max_steps,
        seed: cfg.seed,
        checkpoint_every: cfg.checkpoint_every,
        out_dir: cfg.out_dir.clone(),
        ..Default::default()
    };
    let mut trainer = Trainer::new(Model::new(model_cfg)?, tc, Stage::Base, dataset)?;
    if let Some(ckpt) = latest_checkpoint(&cfg.out_dir)? {
        trainer.restore(&ckpt)?;
    }
    run_loop(&mut trainer, &cfg.out_dir, cfg.max_steps, cfg.checkpoint_every)?;
    let model = trainer.into_model();
    model.copy_base_encoder_to_adapter()?;
    model.reset_keypoint_tokens();
    save_checkpoint(&model, &out, None)?;
    Ok(out)
}

/// Reads a metrics log.
pub fn read_metrics(path: &Path) -> Result<Vec<StepMetrics>> {
    let f = File::open(path).map_err(|e| Error::io(path, e))?;
    BufReader::new(f)
        .lines()
        .map(|l| Ok(serde_json::from_str(&l.map_err(|e| Error::io(path, e))?)?))
        .collect()
}
