//! Deterministic DDIM sampling with classifier-free guidance and optional
//! keypoint-token attention introspection.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::backbone::{BlockId, CaptureRequest, Conditioning, Model};
use crate::error::{Error, Result};
use crate::kcl::{augment_prompt, GatingConfig};
use crate::pose::PoseSet;
use crate::spr::{rasterize_labels, RenderStyle};
use crate::tensor_io::png_from_unit_rgb;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SamplerConfig {
    pub steps: usize,
    pub cfg_scale: f64,
    pub cond_scale: f64,
    /// Window and block whose keypoint-token maps are reported.
    pub attention: GatingConfig,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            steps: 50,
            cfg_scale: 7.5,
            cond_scale: 1.0,
            attention: GatingConfig::default(),
        }
    }
}

fn default_steps() -> usize {
    SamplerConfig::default().steps
}

fn default_cfg_scale() -> f64 {
    SamplerConfig::default().cfg_scale
}

fn default_cond_scale() -> f64 {
    SamplerConfig::default().cond_scale
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SampleRequest {
    pub pose_set: PoseSet,
    pub caption: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_steps")]
    pub steps: usize,
    #[serde(default = "default_cfg_scale")]
    pub cfg_scale: f64,
    #[serde(default = "default_cond_scale")]
    pub cond_scale: f64,
    #[serde(default)]
    pub capture_attention: bool,
}

impl SampleRequest {
    pub fn new(pose_set: PoseSet, caption: impl Into<String>, seed: u64) -> Self {
        Self {
            pose_set,
            caption: caption.into(),
            seed,
            steps: default_steps(),
            cfg_scale: default_cfg_scale(),
            cond_scale: default_cond_scale(),
            capture_attention: false,
        }
    }

    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.steps == 0 || self.steps > timesteps {
            return Err(Error::InvalidArgument(format!("steps {} must be in 1..={timesteps}", self.steps)));
        }
        if !(self.cfg_scale.is_finite() && self.cfg_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("cfg_scale {} must be >= 0", self.cfg_scale)));
        }
        if !(self.cond_scale.is_finite() && self.cond_scale >= 0.0) {
            return Err(Error::InvalidArgument(format!("cond_scale {} must be >= 0", self.cond_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KeypointAttention {
    pub keypoint: usize,
    pub name: String,
    /// Head-averaged map, `rows x cols` at the block resolution.
    pub map: Vec<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutput {
    pub height: usize,
    pub width: usize,
    /// Row-major `H x W x 3` in [0, 1].
    pub image: Vec<f32>,
    pub timesteps: Vec<usize>,
    /// Maps averaged over the sampling steps inside the gate window.
    pub attention: Option<Vec<KeypointAttention>>,
    /// Maps of every sampling step, aligned with `timesteps`.
    pub attention_by_step: Vec<Vec<KeypointAttention>>,
}

impl SampleOutput {
    pub fn png(&self) -> Result<Vec<u8>> {
        png_from_unit_rgb(self.height, self.width, &self.image)
    }

    /// Maps of the sampling step whose timestep is nearest `t`.
    pub fn attention_at(&self, t: usize) -> Option<(usize, &[KeypointAttention])> {
        let i = (0..self.attention_by_step.len()).min_by_key(|&i| self.timesteps[i].abs_diff(t))?;
        Some((self.timesteps[i], &self.attention_by_step[i]))
    }
}

/// `steps` descending timesteps with uniform stride, starting at `T - 1`.
pub fn ddim_timesteps(total: usize, steps: usize) -> Result<Vec<usize>> {
    if steps == 0 || steps > total {
        return Err(Error::InvalidArgument(format!("steps {steps} must be in 1..={total}")));
    }
    Ok((0..steps).map(|i| (steps - i) * total / steps - 1).collect())
}

/// One deterministic DDIM update from `t` to `t_prev` (`None` = data).
/// The predicted clean sample is clipped to [-1, 1] and the noise
/// re-derived from it.
pub fn ddim_step(x: &Tensor, eps: &Tensor, alpha_bar_t: f64, alpha_bar_prev: f64) -> Tensor {
    let x0 = ((x - eps * (1.0 - alpha_bar_t).sqrt()) / alpha_bar_t.sqrt()).clamp(-1.0, 1.0);
    let eps = (x - &x0 * alpha_bar_t.sqrt()) / (1.0 - alpha_bar_t).sqrt();
    x0 * alpha_bar_prev.sqrt() + eps * (1.0 - alpha_bar_prev).sqrt()
}

/// Initial noise of a request: `1 x C x S x S` standard normal from `seed`.
pub fn initial_noise(seed: u64, channels: usize, size: usize) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = channels * size * size;
    let v: Vec<f32> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
    Tensor::from_slice(&v).reshape([1, channels as i64, size as i64, size as i64])
}

pub struct Sampler<'a> {
    model: &'a Model,
    cfg: SamplerConfig,
}

impl<'a> Sampler<'a> {
    pub fn new(model: &'a Model, cfg: SamplerConfig) -> Result<Self> {
        cfg.attention.validate(model.schedule().len())?;
        if let Some(b) = cfg.attention.blocks.iter().find(|b| b.level >= model.config().channels.len()) {
            return Err(Error::Config(format!("attention block {b} does not exist")));
        }
        Ok(Self { model, cfg })
    }

    pub fn config(&self) -> &SamplerConfig {
        &self.cfg
    }

    fn attention_block(&self) -> BlockId {
        self.cfg.attention.blocks[0]
    }

    /// Runs the guided trajectory. The conditional branch sees the augmented
    /// caption and the rendered pose at scale `λ`; the unconditional branch
    /// sees the empty prompt and no condition.
    pub fn sample(&self, req: &SampleRequest) -> Result<SampleOutput> {
        let model = self.model;
        let mc = model.config();
        let sched = model.schedule();
        req.validate(sched.len())?;
        req.pose_set.validate(model.skeleton())?;
        let timesteps = ddim_timesteps(sched.len(), req.steps)?;
        let prompt = augment_prompt(&req.caption, &req.pose_set, model.registry());
        let r = mc.cond_resolution;
        let labels = rasterize_labels(&req.pose_set, model.skeleton(), (r, r), RenderStyle::for_height(r))?;
        let block = self.attention_block();

        let capture = if req.capture_attention {
            CaptureRequest::blocks([block], false)
        } else {
            CaptureRequest::none()
        };

        tch::no_grad(|| {
            let cond_text = model.encode_prompts(&[&prompt])?;
            let uncond_text = model.encode_prompts(&[""])?;
            let positions: BTreeMap<usize, usize> = cond_text.prompts[0].kpt_positions.clone();
            let cond = model.condition(&[&labels], None)?;
            let mut x = initial_noise(req.seed, mc.in_channels, mc.image_size).to_kind(model.kind());
            let mut per_step: Vec<Vec<(usize, Tensor)>> = Vec::new();
            for (i, &t) in timesteps.iter().enumerate() {
                let (eps_u, _) = model.denoise_forward(&x, &[t], &uncond_text.hidden, None, &CaptureRequest::none())?;
                let (eps_c, record) = model.denoise_forward(
                    &x,
                    &[t],
                    &cond_text.hidden,
                    Some(Conditioning {
                        image: &cond,
                        scale: req.cond_scale,
                    }),
                    &capture,
                )?;
                if req.capture_attention {
                    let maps = positions
                        .iter()
                        .map(|(&k, &pos)| {
                            let m = record
                                .token_map(block, 0, pos)
                                .ok_or_else(|| Error::InvalidArgument(format!("block {block} not captured")))?;
                            Ok((k, m.to_kind(Kind::Double)))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    per_step.push(maps);
                }
                let eps = &eps_u + (eps_c - &eps_u) * req.cfg_scale;
                let prev = timesteps.get(i + 1).map_or(1.0, |&p| sched.alpha_bar(p));
                x = ddim_step(&x, &eps, sched.alpha_bar(t), prev);
            }
            let image: Vec<f32> = Vec::try_from(
                &((x.get(0).permute([1, 2, 0]) + 1.0) / 2.0)
                    .clamp(0.0, 1.0)
                    .to_kind(Kind::Float)
                    .contiguous()
                    .view([-1]),
            )?;
            let names = model.skeleton().keypoint_names();
            let to_maps = |maps: &[(usize, Tensor)]| -> Result<Vec<KeypointAttention>> {
                maps.iter()
                    .map(|(k, m)| {
                        Ok(KeypointAttention {
                            keypoint: *k,
                            name: names[*k].clone(),
                            map: Vec::try_from(m)?,
                        })
                    })
                    .collect()
            };
            let attention = if req.capture_attention {
                let gated: Vec<&Vec<(usize, Tensor)>> = per_step
                    .iter()
                    .zip(&timesteps)
                    .filter(|(_, &t)| self.cfg.attention.admits(t))
                    .map(|(m, _)| m)
                    .collect();
                let n = gated.len().max(1) as f64;
                let avg: Vec<(usize, Tensor)> = positions
                    .keys()
                    .enumerate()
                    .map(|(j, &k)| {
                        let sum = gated
                            .iter()
                            .fold(per_step[0][j].1.zeros_like(), |acc, m| acc + &m[j].1);
                        (k, sum / n)
                    })
                    .collect();
                Some(to_maps(&avg)?)
            } else {
                None
            };
            let attention_by_step = per_step.iter().map(|m| to_maps(m)).collect::<Result<Vec<_>>>()?;
            Ok(SampleOutput {
                height: mc.image_size,
                width: mc.image_size,
                image,
                timesteps: timesteps.clone(),
                attention,
                attention_by_step,
            })
        })
    }
}
