use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use tch::nn::{self, Module};
use tch::{Device, Kind, Tensor};

use super::schedule::{make_schedule, NoiseSchedule, ScheduleConfig};
use super::text::{TextBatch, TextConfig, TextEncoder};
use super::unet::{zero_conv, CapturedAttention, ConditionEmbedding, Decoder, Encoder, LevelCapture, UNetDims};
use crate::error::{Error, Result};
use crate::kcl::KeypointTokenRegistry;
use crate::pose::{resolve_skeleton, SkeletonSpec};
use crate::spr::{init_seed, render_condition, seed_tensor, InitMode, LabelMap, SpatialPoseEmbedding};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttentionSource {
    Base,
    Adapter,
}

/// A cross-attention block: which encoder and which resolution level.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct BlockId {
    pub source: AttentionSource,
    pub level: usize,
}

impl BlockId {
    pub fn new(source: AttentionSource, level: usize) -> Self {
        Self { source, level }
    }
}

impl fmt::Display for BlockId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self.source {
            AttentionSource::Base => "base",
            AttentionSource::Adapter => "adapter",
        };
        write!(f, "{s}.{}", self.level)
    }
}

impl FromStr for BlockId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::InvalidArgument(format!("block id `{s}` is not `base.N` or `adapter.N`"));
        let (src, level) = s.split_once('.').ok_or_else(bad)?;
        let source = match src {
            "base" => AttentionSource::Base,
            "adapter" => AttentionSource::Adapter,
            _ => return Err(bad()),
        };
        Ok(Self {
            source,
            level: level.parse().map_err(|_| bad())?,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Built-in skeleton name or path to a skeleton file.
    pub skeleton: String,
    pub image_size: usize,
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub time_dim: usize,
    pub ff_mult: usize,
    pub text: TextConfig,
    pub schedule: ScheduleConfig,
    /// Channels of the rendered condition (`C'`).
    pub cond_channels: usize,
    pub cond_resolution: usize,
    pub cond_embed_widths: [usize; 4],
    /// Dimension of the frozen keypoint seed vectors (`C`).
    pub seed_dim: usize,
    pub seed_init: InitMode,
    pub seed_file: Option<PathBuf>,
    pub seed_rng: u64,
    pub spr_hidden: usize,
    pub spr_dropout: f64,
    pub attention_source: AttentionSource,
    /// Seed for weight initialization.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            skeleton: "ap10k".into(),
            image_size: 64,
            in_channels: 3,
            channels: vec![16, 32, 32],
            heads: 4,
            time_dim: 64,
            ff_mult: 2,
            text: TextConfig::default(),
            schedule: ScheduleConfig::default(),
            cond_channels: 3,
            cond_resolution: 64,
            cond_embed_widths: [8, 8, 16, 16],
            seed_dim: 768,
            seed_init: InitMode::Random,
            seed_file: None,
            seed_rng: 0,
            spr_hidden: 256,
            spr_dropout: 0.1,
            attention_source: AttentionSource::Adapter,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.text.validate()?;
        let levels = self.channels.len();
        if levels == 0 || self.image_size % (1 << (levels - 1)) != 0 {
            return Err(Error::Config(format!(
                "image_size {} must be divisible by 2^{}",
                self.image_size,
                levels.saturating_sub(1)
            )));
        }
        if self.cond_resolution < self.image_size || self.cond_resolution % self.image_size != 0 {
            return Err(Error::Config(format!(
                "cond_resolution {} must be a multiple of image_size {}",
                self.cond_resolution, self.image_size
            )));
        }
        if !(0.0..1.0).contains(&self.spr_dropout) {
            return Err(Error::Config(format!("spr_dropout {} outside [0, 1)", self.spr_dropout)));
        }
        if self.time_dim % 2 != 0 || self.channels[0] % 2 != 0 {
            return Err(Error::Config("time_dim and channels[0] must be even".into()));
        }
        Ok(())
    }

    /// Spatial size of the attention maps at `level`.
    pub fn level_size(&self, level: usize) -> usize {
        self.image_size >> level
    }

    pub fn default_loss_block(&self) -> BlockId {
        BlockId::new(self.attention_source, self.channels.len() - 1)
    }
}

/// Named parameter groups of the checkpoint container.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Adapter,
    ZeroConvs,
    SprModule,
    KptTokens,
    TextEncoder,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Base,
        ParamGroup::Adapter,
        ParamGroup::ZeroConvs,
        ParamGroup::SprModule,
        ParamGroup::KptTokens,
        ParamGroup::TextEncoder,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Adapter => "adapter",
            ParamGroup::ZeroConvs => "zero_convs",
            ParamGroup::SprModule => "spr_module",
            ParamGroup::KptTokens => "kpt_tokens",
            ParamGroup::TextEncoder => "text_encoder",
        }
    }

    pub fn of(name: &str) -> Option<Self> {
        let head = name.split('.').next()?;
        Self::ALL.into_iter().find(|g| g.as_str() == head)
    }
}

const SEED_VAR: &str = "spr_module.seed";

/// Scaled adapter input: the rendered condition and the strength `λ`.
#[derive(Debug)]
pub struct Conditioning<'a> {
    pub image: &'a Tensor,
    pub scale: f64,
}

#[derive(Debug, Clone, Default)]
pub struct CaptureRequest {
    pub blocks: BTreeSet<BlockId>,
    /// Also record maps computed from a detached query, for the heatmap loss.
    pub detached_query: bool,
}

impl CaptureRequest {
    pub fn none() -> Self {
        Self::default()
    }

    pub fn blocks(blocks: impl IntoIterator<Item = BlockId>, detached_query: bool) -> Self {
        Self {
            blocks: blocks.into_iter().collect(),
            detached_query,
        }
    }

    fn levels(&self, source: AttentionSource) -> LevelCapture {
        LevelCapture {
            levels: self
                .blocks
                .iter()
                .filter(|b| b.source == source)
                .map(|b| b.level)
                .collect(),
            detached_query: self.detached_query,
        }
    }
}

/// Cross-attention maps of one forward pass, keyed by block.
#[derive(Debug, Default)]
pub struct AttentionRecord {
    pub entries: BTreeMap<BlockId, CapturedAttention>,
    /// Timestep of each batch element.
    pub timesteps: Vec<usize>,
}

impl AttentionRecord {
    /// Head-averaged `H' x W'` map of token `position` for batch element `sample`.
    pub fn token_map(&self, block: BlockId, sample: usize, position: usize) -> Option<Tensor> {
        let e = self.entries.get(&block)?;
        let m = e.maps.get(sample as i64).select(2, position as i64).mean_dim(0, false, e.maps.kind());
        Some(m.reshape([e.height as i64, e.width as i64]))
    }
}

/// The full conditional denoiser with its text encoder, keypoint tokens and
/// spatial-pose embedding. All weights live in one variable store whose
/// top-level path component names the parameter group.
pub struct Model {
    cfg: ModelConfig,
    spec: SkeletonSpec,
    schedule: NoiseSchedule,
    vs: nn::VarStore,
    base_enc: Encoder,
    base_dec: Decoder,
    adapter_enc: Encoder,
    cond_embed: ConditionEmbedding,
    zero_in: nn::Conv2D,
    zero_skips: Vec<nn::Conv2D>,
    zero_mid: nn::Conv2D,
    text: TextEncoder,
    spr: SpatialPoseEmbedding,
    seed: Tensor,
    registry: KeypointTokenRegistry,
}

impl fmt::Debug for Model {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Model")
            .field("skeleton", &self.spec.name())
            .field("image_size", &self.cfg.image_size)
            .field("channels", &self.cfg.channels)
            .finish_non_exhaustive()
    }
}

impl Model {
    /// Builds a freshly initialized model: adapter encoder copied from the
    /// base encoder, zero convolutions at zero, keypoint tokens seeded from
    /// the mean embedding of their name words.
    pub fn new(cfg: &ModelConfig) -> Result<Self> {
        Self::with_skeleton(cfg, resolve_skeleton(&cfg.skeleton)?)
    }

    /// Like [`Model::new`] with an explicit skeleton instead of `cfg.skeleton`.
    pub fn with_skeleton(cfg: &ModelConfig, spec: SkeletonSpec) -> Result<Self> {
        cfg.validate()?;
        let schedule = make_schedule(cfg.schedule)?;
        let vs = nn::VarStore::new(Device::Cpu);
        let root = vs.root();
        let dims = UNetDims {
            in_channels: cfg.in_channels,
            channels: cfg.channels.clone(),
            heads: cfg.heads,
            time_dim: cfg.time_dim,
            text_dim: cfg.text.dim,
            ff_mult: cfg.ff_mult,
        };
        let base = &root / ParamGroup::Base.as_str();
        let base_enc = Encoder::new(&(&base / "enc"), &dims)?;
        let base_dec = Decoder::new(&(&base / "dec"), &dims);
        let adapter = &root / ParamGroup::Adapter.as_str();
        let adapter_enc = Encoder::new(&(&adapter / "enc"), &dims)?;
        let cond_embed = ConditionEmbedding::new(
            &(&adapter / "cond_embed"),
            cfg.cond_channels,
            &cfg.cond_embed_widths,
            cfg.cond_resolution / cfg.image_size,
        )?;
        let zp = &root / ParamGroup::ZeroConvs.as_str();
        let zero_in = zero_conv(&zp / "input", cfg.cond_embed_widths[3], cfg.channels[0]);
        let zero_skips = cfg
            .channels
            .iter()
            .enumerate()
            .map(|(i, &c)| zero_conv(&zp / "skip" / i, c, c))
            .collect();
        let last = *cfg.channels.last().expect("validated non-empty");
        let zero_mid = zero_conv(&zp / "mid", last, last);
        let text = TextEncoder::new(&(&root / ParamGroup::TextEncoder.as_str()), &cfg.text)?;
        let sp = &root / ParamGroup::SprModule.as_str();
        let spr = SpatialPoseEmbedding::new(&(&sp / "net"), cfg.seed_dim, cfg.spr_hidden, cfg.cond_channels, cfg.spr_dropout)?;
        init_weights(&vs, cfg.init_seed);
        let e0 = init_seed(spec.num_keypoints(), cfg.seed_dim, cfg.seed_rng, cfg.seed_init, cfg.seed_file.as_deref())?;
        let seed = sp.var_copy("seed", &seed_tensor(&e0, Kind::Float, Device::Cpu));
        let rows: Vec<Tensor> = spec
            .keypoint_names()
            .iter()
            .map(|n| text.mean_word_embedding(n))
            .collect();
        let v_kpt = (&root / ParamGroup::KptTokens.as_str()).var_copy("v_kpt", &Tensor::stack(&rows, 0));
        let registry = KeypointTokenRegistry::new(&spec, v_kpt)?;
        let model = Self {
            cfg: cfg.clone(),
            spec,
            schedule,
            vs,
            base_enc,
            base_dec,
            adapter_enc,
            cond_embed,
            zero_in,
            zero_skips,
            zero_mid,
            text,
            spr,
            seed,
            registry,
        };
        model.copy_base_encoder_to_adapter()?;
        model.set_trainable(&[ParamGroup::Adapter, ParamGroup::ZeroConvs, ParamGroup::SprModule, ParamGroup::KptTokens]);
        Ok(model)
    }

    /// Overwrites the adapter encoder with the base encoder weights.
    pub fn copy_base_encoder_to_adapter(&self) -> Result<()> {
        let vars = self.vs.variables();
        tch::no_grad(|| {
            for (name, dst) in &vars {
                if let Some(rest) = name.strip_prefix("adapter.enc.") {
                    let src = vars
                        .get(&format!("base.enc.{rest}"))
                        .ok_or_else(|| Error::Checkpoint(format!("no base counterpart for {name}")))?;
                    dst.shallow_clone().copy_(src);
                }
            }
            Ok(())
        })
    }

    /// Re-seeds each keypoint token from the mean embedding of its name words
    /// under the current word table.
    pub fn reset_keypoint_tokens(&self) {
        let rows: Vec<Tensor> = self
            .spec
            .keypoint_names()
            .iter()
            .map(|n| self.text.mean_word_embedding(n))
            .collect();
        tch::no_grad(|| {
            self.registry.v_kpt().shallow_clone().copy_(&Tensor::stack(&rows, 0));
        });
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn skeleton(&self) -> &SkeletonSpec {
        &self.spec
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.schedule
    }

    pub fn registry(&self) -> &KeypointTokenRegistry {
        &self.registry
    }

    pub fn text_encoder(&self) -> &TextEncoder {
        &self.text
    }

    pub fn var_store(&self) -> &nn::VarStore {
        &self.vs
    }

    pub fn var_store_mut(&mut self) -> &mut nn::VarStore {
        &mut self.vs
    }

    pub fn kind(&self) -> Kind {
        self.seed.kind()
    }

    /// Switches all weights to float64; used by gradient checks.
    pub fn to_double(&mut self) {
        self.vs.double();
    }

    /// All parameters sorted by name.
    pub fn named_parameters(&self) -> Vec<(String, Tensor)> {
        let mut v: Vec<_> = self.vs.variables().into_iter().collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn group_parameters(&self, group: ParamGroup) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(n, _)| ParamGroup::of(n) == Some(group))
            .collect()
    }

    /// Enables gradients for `groups` only; the seed vectors stay frozen.
    pub fn set_trainable(&self, groups: &[ParamGroup]) {
        for (name, t) in self.vs.variables() {
            let on = name != SEED_VAR && ParamGroup::of(&name).is_some_and(|g| groups.contains(&g));
            let _ = t.set_requires_grad(on);
        }
    }

    pub fn trainable_parameters(&self) -> Vec<(String, Tensor)> {
        self.named_parameters()
            .into_iter()
            .filter(|(_, t)| t.requires_grad())
            .collect()
    }

    /// sha256 over the little-endian bytes of the group's tensors in name order.
    pub fn group_hash(&self, group: ParamGroup) -> String {
        let mut h = Sha256::new();
        for (name, t) in self.group_parameters(group) {
            h.update(name.as_bytes());
            h.update(tensor_bytes(&t));
        }
        hex::encode(h.finalize())
    }

    /// Hash of every group, used as the checkpoint identity.
    pub fn checkpoint_hash(&self) -> String {
        let mut h = Sha256::new();
        for g in ParamGroup::ALL {
            h.update(self.group_hash(g).as_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `E_kpt = G(E_0)`, `N x C'`; dropout runs when an RNG is supplied.
    pub fn keypoint_embeddings(&self, dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        self.spr.forward_t(&self.seed, dropout_rng)
    }

    /// Renders label maps into the differentiable condition tensor.
    pub fn condition(&self, labels: &[&LabelMap], dropout_rng: Option<&mut ChaCha8Rng>) -> Result<Tensor> {
        let r = self.cfg.cond_resolution;
        if let Some(l) = labels.iter().find(|l| l.height != r || l.width != r) {
            return Err(Error::Shape(format!(
                "label map {}x{} does not match condition resolution {r}",
                l.height, l.width
            )));
        }
        render_condition(labels, &self.keypoint_embeddings(dropout_rng)?)
    }

    pub fn encode_prompts(&self, prompts: &[&str]) -> Result<TextBatch> {
        self.text.encode_batch(prompts, &self.registry)
    }

    /// Predicts the noise in `x_t`. Without conditioning only the base
    /// network runs; with it, the adapter encoder sees `x_t` plus the
    /// zero-convolved condition features and its outputs reach the base
    /// decoder through zero convolutions scaled by `λ`.
    pub fn denoise_forward(
        &self,
        x_t: &Tensor,
        timesteps: &[usize],
        context: &Tensor,
        cond: Option<Conditioning<'_>>,
        capture: &CaptureRequest,
    ) -> Result<(Tensor, AttentionRecord)> {
        let (b, c, h, w) = x_t.size4()?;
        let s = self.cfg.image_size as i64;
        if c != self.cfg.in_channels as i64 || h != s || w != s {
            return Err(Error::Shape(format!(
                "x_t {:?} does not match {}x{s}x{s}",
                x_t.size(),
                self.cfg.in_channels
            )));
        }
        if timesteps.len() != b as usize {
            return Err(Error::Shape(format!("{} timesteps for batch {b}", timesteps.len())));
        }
        if let Some(&t) = timesteps.iter().find(|&&t| t >= self.schedule.len()) {
            return Err(Error::InvalidArgument(format!("timestep {t} out of range")));
        }
        let (cb, _, cd) = context.size3()?;
        if cb != b || cd != self.cfg.text.dim as i64 {
            return Err(Error::Shape(format!("context {:?} does not match batch {b}", context.size())));
        }
        for blk in &capture.blocks {
            if blk.level >= self.cfg.channels.len() {
                return Err(Error::InvalidArgument(format!("no attention block {blk}")));
            }
        }
        let tf: Vec<f64> = timesteps.iter().map(|&t| t as f64).collect();
        let t = Tensor::from_slice(&tf).to_kind(x_t.kind());
        let mut record = AttentionRecord {
            entries: BTreeMap::new(),
            timesteps: timesteps.to_vec(),
        };
        let base = self
            .base_enc
            .forward(x_t, &t, context, None, &capture.levels(AttentionSource::Base));
        for (level, a) in base.attention {
            record.entries.insert(BlockId::new(AttentionSource::Base, level), a);
        }
        let (mut skips, mut mid) = (base.skips, base.mid);
        if let Some(Conditioning { image, scale }) = cond {
            let r = self.cfg.cond_resolution as i64;
            if image.size() != [b, self.cfg.cond_channels as i64, r, r] {
                return Err(Error::Shape(format!(
                    "condition {:?} does not match {b}x{}x{r}x{r}",
                    image.size(),
                    self.cfg.cond_channels
                )));
            }
            if !(scale.is_finite() && scale >= 0.0) {
                return Err(Error::InvalidArgument(format!("conditioning scale {scale} must be >= 0")));
            }
            let hint = self.zero_in.forward(&self.cond_embed.forward(&image.to_kind(x_t.kind())));
            let a = self.adapter_enc.forward(
                x_t,
                &t,
                context,
                Some(&hint),
                &capture.levels(AttentionSource::Adapter),
            );
            for (level, att) in a.attention {
                record.entries.insert(BlockId::new(AttentionSource::Adapter, level), att);
            }
            skips = skips
                .iter()
                .zip(&a.skips)
                .zip(&self.zero_skips)
                .map(|((s, r), z)| s + z.forward(r) * scale)
                .collect();
            mid = mid + self.zero_mid.forward(&a.mid) * scale;
        }
        let eps = self.base_dec.forward(&mid, &skips, &base.temb);
        Ok((eps, record))
    }
}

fn name_seed(seed: u64, name: &str) -> u64 {
    let d = Sha256::digest(name.as_bytes());
    seed ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

/// Deterministic initialization from per-variable ChaCha streams, so the
/// result depends only on `seed` and the variable names. Norm scales start
/// at one, biases and zero convolutions at zero, other weights uniform in
/// `±1/sqrt(fan_in)`, embedding tables normal.
fn init_weights(vs: &nn::VarStore, seed: u64) {
    tch::no_grad(|| {
        for (name, var) in vs.variables() {
            let mut rng = ChaCha8Rng::seed_from_u64(name_seed(seed, &name));
            let size = var.size();
            let n = var.numel();
            let parent = name.rsplit('.').nth(1).unwrap_or("");
            let is_norm = parent.starts_with("norm") || parent.starts_with("ln") || parent == "final_norm";
            let vals: Vec<f64> = if name.starts_with("zero_convs.") || name.ends_with(".bias") {
                vec![0.0; n]
            } else if is_norm {
                vec![1.0; n]
            } else if name.ends_with("word_table") {
                (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
            } else if name.ends_with("positions") {
                (0..n).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect()
            } else {
                let fan_in: i64 = size[1..].iter().product();
                let bound = 1.0 / (fan_in.max(1) as f64).sqrt();
                (0..n).map(|_| rng.gen_range(-bound..bound)).collect()
            };
            let mut v = var.shallow_clone();
            v.copy_(&Tensor::from_slice(&vals).reshape(size.as_slice()).to_kind(var.kind()));
        }
    });
}

pub(crate) fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    let flat = t.detach().to_device(Device::Cpu).contiguous().view([-1]);
    match flat.kind() {
        Kind::Double => Vec::<f64>::try_from(&flat)
            .expect("double tensor")
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
        _ => Vec::<f32>::try_from(&flat.to_kind(Kind::Float))
            .expect("float tensor")
            .iter()
            .flat_map(|v| v.to_le_bytes())
            .collect(),
    }
}
