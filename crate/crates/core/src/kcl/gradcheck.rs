//! Finite-difference verification of the heatmap-loss gradient with respect
//! to the keypoint token embeddings, on a float64 toy model.
//!
//! The loss is taken on the first transformer block. Its queries do not
//! depend on the text, so detaching them leaves the true derivative intact
//! and central differences are a valid oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use super::{augment_prompt, heatmap_loss, GatingConfig};
use crate::backbone::{
    AttentionSource, BlockId, CaptureRequest, Conditioning, Model, ModelConfig, ScheduleConfig, TextConfig,
};
use crate::error::{Error, Result};
use crate::pose::{Keypoint, PoseInstance, PoseSet, SkeletonSpec};
use crate::spr::{rasterize_labels, render_heatmaps, RenderStyle};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToyDims {
    pub keypoints: usize,
    /// Side of the attention map the loss is taken on.
    pub map_size: usize,
    pub heads: usize,
    pub text_dim: usize,
    pub timestep: usize,
    pub heatmap_sigma: f64,
    pub step: f64,
    pub seed: u64,
}

impl Default for ToyDims {
    fn default() -> Self {
        Self {
            keypoints: 2,
            map_size: 4,
            heads: 2,
            text_dim: 8,
            timestep: 300,
            heatmap_sigma: 1.0,
            step: 1e-6,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub loss: f64,
    /// Largest entry-wise disagreement divided by the largest gradient entry.
    pub max_rel_err: f64,
    pub max_abs_err: f64,
    pub max_abs_grad: f64,
    /// Largest gradient on any trainable parameter other than the token
    /// embeddings and the gated block's key projection; zero when the query
    /// path is detached.
    pub query_path_grad_max: f64,
    pub entries_checked: usize,
}

struct Toy {
    model: Model,
    prompt: String,
    x_t: Tensor,
    labels: crate::spr::LabelMap,
    heatmaps: crate::spr::HeatmapStack,
    gating: GatingConfig,
    timestep: usize,
}

impl Toy {
    fn build(d: &ToyDims) -> Result<Self> {
        if d.keypoints == 0 || d.map_size == 0 {
            return Err(Error::InvalidArgument("toy dims must be positive".into()));
        }
        let names = (0..d.keypoints).map(|i| format!("part {i}")).collect();
        let edges = (1..d.keypoints).map(|i| (i - 1, i)).collect();
        let colors = (0..d.keypoints).map(|i| [(40 * i % 256) as u8, 128, 200]).collect();
        let spec = SkeletonSpec::new("toy", names, edges, vec![0.05; d.keypoints], colors)?;
        let image = d.map_size;
        let cfg = ModelConfig {
            skeleton: "toy".into(),
            image_size: image,
            channels: vec![2 * d.heads, 2 * d.heads],
            heads: d.heads,
            time_dim: 8,
            ff_mult: 1,
            text: TextConfig {
                vocab_size: 64,
                dim: d.text_dim,
                layers: 1,
                heads: 1,
                context_len: d.keypoints + 6,
            },
            schedule: ScheduleConfig::default(),
            cond_resolution: image,
            cond_embed_widths: [2, 2, 2, 2],
            seed_dim: 4,
            spr_hidden: 4,
            spr_dropout: 0.0,
            init_seed: d.seed,
            ..Default::default()
        };
        let mut model = Model::with_skeleton(&cfg, spec)?;
        model.to_double();
        let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
        // pose coordinates live on a frame of at least 8x8; rendering rescales
        let frame = image.max(8);
        let kps = (0..d.keypoints)
            .map(|_| Keypoint::visible(rng.gen_range(0.0..frame as f64), rng.gen_range(0.0..frame as f64)))
            .collect();
        let pose = PoseSet::new((frame, frame), vec![PoseInstance::new(kps)]);
        let prompt = augment_prompt("a toy", &pose, model.registry());
        let noise: Vec<f64> = (0..3 * image * image).map(|_| rng.sample(StandardNormal)).collect();
        let x_t = Tensor::from_slice(&noise).reshape([1, 3, image as i64, image as i64]);
        let labels = rasterize_labels(&pose, model.skeleton(), (image, image), RenderStyle::for_height(image))?;
        let heatmaps = render_heatmaps(&pose, (d.map_size, d.map_size), d.heatmap_sigma)?;
        let gating = GatingConfig {
            t_low: 250,
            t_high: 500,
            blocks: vec![BlockId::new(AttentionSource::Adapter, 0)],
        };
        Ok(Self {
            model,
            prompt,
            x_t,
            labels,
            heatmaps,
            gating,
            timestep: d.timestep,
        })
    }

    fn loss(&self) -> Result<Tensor> {
        let text = self.model.encode_prompts(&[&self.prompt])?;
        let cond = self.model.condition(&[&self.labels], None)?;
        let capture = CaptureRequest::blocks(self.gating.blocks.iter().copied(), true);
        let (_, rec) = self.model.denoise_forward(
            &self.x_t,
            &[self.timestep],
            &text.hidden,
            Some(Conditioning { image: &cond, scale: 1.0 }),
            &capture,
        )?;
        heatmap_loss(
            &rec,
            &[&text.prompts[0].kpt_positions],
            &[std::slice::from_ref(&self.heatmaps)],
            &self.gating,
        )
    }
}

fn max_abs_grad(t: &Tensor) -> f64 {
    let g = t.grad();
    if g.defined() {
        g.abs().max().double_value(&[])
    } else {
        0.0
    }
}

/// Compares the backpropagated `∂L/∂V_kpt` with central differences over every entry.
pub fn loss_gradient_check(dims: &ToyDims) -> Result<GradCheckReport> {
    let toy = Toy::build(dims)?;
    let v = toy.model.registry().v_kpt().shallow_clone();
    for (_, p) in toy.model.trainable_parameters() {
        let mut g = p.grad();
        if g.defined() {
            let _ = g.zero_();
        }
    }
    let loss = toy.loss()?;
    let loss_value = loss.double_value(&[]);
    if loss.requires_grad() {
        loss.backward();
    }
    let analytic = {
        let g = v.grad();
        if g.defined() {
            g.copy()
        } else {
            v.zeros_like()
        }
    };
    let key_name = format!("adapter.enc.attn.{}.attn.to_k.weight", toy.gating.blocks[0].level);
    let query_path_grad_max = toy
        .model
        .trainable_parameters()
        .iter()
        .filter(|(n, _)| n != "kpt_tokens.v_kpt" && *n != key_name)
        .map(|(_, p)| max_abs_grad(p))
        .fold(0.0, f64::max);

    let flat = v.view([-1]);
    let n = flat.numel() as i64;
    let h = dims.step;
    let mut numeric = vec![0.0f64; n as usize];
    tch::no_grad(|| -> Result<()> {
        for i in 0..n {
            let orig = flat.double_value(&[i]);
            let _ = flat.get(i).fill_(orig + h);
            let up = toy.loss()?.double_value(&[]);
            let _ = flat.get(i).fill_(orig - h);
            let down = toy.loss()?.double_value(&[]);
            let _ = flat.get(i).fill_(orig);
            numeric[i as usize] = (up - down) / (2.0 * h);
        }
        Ok(())
    })?;
    let analytic: Vec<f64> = Vec::<f64>::try_from(&analytic.to_kind(Kind::Double).view([-1]))?;
    let max_abs_err = analytic
        .iter()
        .zip(&numeric)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    let scale = analytic
        .iter()
        .chain(&numeric)
        .map(|x| x.abs())
        .fold(0.0, f64::max);
    Ok(GradCheckReport {
        loss: loss_value,
        max_rel_err: if scale > 0.0 { max_abs_err / scale } else { 0.0 },
        max_abs_err,
        max_abs_grad: scale,
        query_path_grad_max,
        entries_checked: n as usize,
    })
}
