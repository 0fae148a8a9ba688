//! U-Net pieces shared by the frozen base network and its trainable encoder
//! copy: residual blocks, cross-attention transformer blocks, the encoder
//! stack and the skip-connected decoder.

use std::collections::BTreeSet;

use tch::nn::{self, Module};
use tch::Tensor;

use crate::error::{Error, Result};

pub(crate) fn group_count(channels: usize) -> i64 {
    (1..=8).rev().find(|g| channels % g == 0).unwrap_or(1) as i64
}

fn group_norm(p: nn::Path, c: usize) -> nn::GroupNorm {
    nn::group_norm(p, group_count(c), c as i64, Default::default())
}

fn conv(p: nn::Path, i: usize, o: usize, k: i64, stride: i64) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        stride,
        padding: k / 2,
        ..Default::default()
    };
    nn::conv2d(p, i as i64, o as i64, k, cfg)
}

pub(crate) fn zero_conv(p: nn::Path, i: usize, o: usize) -> nn::Conv2D {
    let cfg = nn::ConvConfig {
        ws_init: nn::Init::Const(0.0),
        bs_init: nn::Init::Const(0.0),
        ..Default::default()
    };
    nn::conv2d(p, i as i64, o as i64, 1, cfg)
}

/// Sinusoidal features of (possibly fractional) timesteps, `B x dim`.
pub fn timestep_features(t: &Tensor, dim: usize) -> Tensor {
    let half = (dim / 2) as i64;
    let opts = (t.kind(), t.device());
    let freqs = (Tensor::arange(half, opts) * (-(10000f64.ln()) / half as f64)).exp();
    let args = t.unsqueeze(1) * freqs.unsqueeze(0);
    Tensor::cat(&[args.cos(), args.sin()], 1)
}

#[derive(Debug)]
struct TimeEmbedding {
    lin1: nn::Linear,
    lin2: nn::Linear,
    feature_dim: usize,
}

impl TimeEmbedding {
    fn new(p: &nn::Path, feature_dim: usize, dim: usize) -> Self {
        Self {
            lin1: nn::linear(p / "lin1", feature_dim as i64, dim as i64, Default::default()),
            lin2: nn::linear(p / "lin2", dim as i64, dim as i64, Default::default()),
            feature_dim,
        }
    }

    fn forward(&self, t: &Tensor) -> Tensor {
        let f = timestep_features(t, self.feature_dim);
        self.lin2.forward(&self.lin1.forward(&f).silu())
    }
}

#[derive(Debug)]
struct ResBlock {
    norm1: nn::GroupNorm,
    conv1: nn::Conv2D,
    temb: nn::Linear,
    norm2: nn::GroupNorm,
    conv2: nn::Conv2D,
    skip: Option<nn::Conv2D>,
}

impl ResBlock {
    fn new(p: &nn::Path, i: usize, o: usize, temb_dim: usize) -> Self {
        Self {
            norm1: group_norm(p / "norm1", i),
            conv1: conv(p / "conv1", i, o, 3, 1),
            temb: nn::linear(p / "temb", temb_dim as i64, o as i64, Default::default()),
            norm2: group_norm(p / "norm2", o),
            conv2: conv(p / "conv2", o, o, 3, 1),
            skip: (i != o).then(|| conv(p / "skip", i, o, 1, 1)),
        }
    }

    fn forward(&self, x: &Tensor, temb: &Tensor) -> Tensor {
        let h = self.conv1.forward(&self.norm1.forward(x).silu());
        let h = h + self.temb.forward(&temb.silu()).unsqueeze(-1).unsqueeze(-1);
        let h = self.conv2.forward(&self.norm2.forward(&h).silu());
        match &self.skip {
            Some(s) => s.forward(x) + h,
            None => x + h,
        }
    }
}

/// Attention probabilities of one block, `B x heads x HW x L`.
#[derive(Debug)]
pub struct CapturedAttention {
    pub maps: Tensor,
    /// Same maps recomputed from a detached query; only present when requested.
    pub detached_query: Option<Tensor>,
    pub height: usize,
    pub width: usize,
}

#[derive(Debug)]
struct CrossAttention {
    to_q: nn::Linear,
    to_k: nn::Linear,
    to_v: nn::Linear,
    to_out: nn::Linear,
    heads: i64,
}

impl CrossAttention {
    fn new(p: &nn::Path, c: usize, ctx_dim: usize, heads: usize) -> Self {
        let nobias = nn::LinearConfig {
            bias: false,
            ..Default::default()
        };
        Self {
            to_q: nn::linear(p / "to_q", c as i64, c as i64, nobias),
            to_k: nn::linear(p / "to_k", ctx_dim as i64, c as i64, nobias),
            to_v: nn::linear(p / "to_v", ctx_dim as i64, c as i64, nobias),
            to_out: nn::linear(p / "to_out", c as i64, c as i64, Default::default()),
            heads: heads as i64,
        }
    }

    /// `x`: `B x HW x C`, `ctx`: `B x L x D`. Returns the output and, when
    /// `capture` is set, `(maps, detached-query maps if wanted)`.
    fn forward(&self, x: &Tensor, ctx: &Tensor, capture: Option<bool>) -> (Tensor, Option<(Tensor, Option<Tensor>)>) {
        let (b, n, c) = x.size3().expect("tokens are B x HW x C");
        let l = ctx.size()[1];
        let dh = c / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let split = |t: Tensor, len: i64| t.reshape([b, len, self.heads, dh]).permute([0, 2, 1, 3]);
        let q = split(self.to_q.forward(x), n);
        let k = split(self.to_k.forward(ctx), l);
        let v = split(self.to_v.forward(ctx), l);
        let kt = k.transpose(-2, -1);
        let attn = (q.matmul(&kt) * scale).softmax(-1, x.kind());
        let out = attn.matmul(&v).permute([0, 2, 1, 3]).reshape([b, n, c]);
        let captured = capture.map(|want_detached| {
            let detached = want_detached.then(|| (q.detach().matmul(&kt) * scale).softmax(-1, x.kind()));
            (attn.shallow_clone(), detached)
        });
        (self.to_out.forward(&out), captured)
    }
}

#[derive(Debug)]
struct TransformerBlock {
    norm: nn::GroupNorm,
    proj_in: nn::Linear,
    ln_attn: nn::LayerNorm,
    attn: CrossAttention,
    ln_ff: nn::LayerNorm,
    ff1: nn::Linear,
    ff2: nn::Linear,
    proj_out: nn::Linear,
}

impl TransformerBlock {
    fn new(p: &nn::Path, c: usize, ctx_dim: usize, heads: usize, ff_mult: usize) -> Self {
        let ci = c as i64;
        let lin = |name: &str, i: i64, o: i64| nn::linear(p / name, i, o, Default::default());
        Self {
            norm: group_norm(p / "norm", c),
            proj_in: lin("proj_in", ci, ci),
            ln_attn: nn::layer_norm(p / "ln_attn", vec![ci], Default::default()),
            attn: CrossAttention::new(&(p / "attn"), c, ctx_dim, heads),
            ln_ff: nn::layer_norm(p / "ln_ff", vec![ci], Default::default()),
            ff1: lin("ff1", ci, ci * ff_mult as i64),
            ff2: lin("ff2", ci * ff_mult as i64, ci),
            proj_out: lin("proj_out", ci, ci),
        }
    }

    fn forward(&self, x: &Tensor, ctx: &Tensor, capture: Option<bool>) -> (Tensor, Option<CapturedAttention>) {
        let (b, c, h, w) = x.size4().expect("features are B x C x H x W");
        let tokens = self
            .norm
            .forward(x)
            .reshape([b, c, h * w])
            .transpose(1, 2);
        let t = self.proj_in.forward(&tokens);
        let (a, cap) = self.attn.forward(&self.ln_attn.forward(&t), ctx, capture);
        let t = t + a;
        let t = &t + self.ff2.forward(&self.ff1.forward(&self.ln_ff.forward(&t)).gelu("none"));
        let out = self.proj_out.forward(&t).transpose(1, 2).reshape([b, c, h, w]);
        let cap = cap.map(|(maps, detached_query)| CapturedAttention {
            maps,
            detached_query,
            height: h as usize,
            width: w as usize,
        });
        (x + out, cap)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct UNetDims {
    pub in_channels: usize,
    pub channels: Vec<usize>,
    pub heads: usize,
    pub time_dim: usize,
    pub text_dim: usize,
    pub ff_mult: usize,
}

/// Levels whose attention is wanted and whether the detached-query maps are needed.
#[derive(Debug, Clone, Default)]
pub struct LevelCapture {
    pub levels: BTreeSet<usize>,
    pub detached_query: bool,
}

#[derive(Debug)]
pub struct EncoderOutput {
    pub skips: Vec<Tensor>,
    pub mid: Tensor,
    pub temb: Tensor,
    pub attention: Vec<(usize, CapturedAttention)>,
}

/// Encoder half: time embedding, input conv, one residual + transformer
/// block per level with stride-2 downsampling between levels, and a middle
/// residual block.
#[derive(Debug)]
pub struct Encoder {
    time: TimeEmbedding,
    conv_in: nn::Conv2D,
    res: Vec<ResBlock>,
    attn: Vec<TransformerBlock>,
    down: Vec<nn::Conv2D>,
    mid: ResBlock,
}

impl Encoder {
    pub fn new(p: &nn::Path, d: &UNetDims) -> Result<Self> {
        let ch = &d.channels;
        if ch.is_empty() || ch.iter().any(|&c| c == 0 || c % d.heads != 0) {
            return Err(Error::Config(format!(
                "channels {ch:?} must be non-empty multiples of {} heads",
                d.heads
            )));
        }
        let res = (0..ch.len())
            .map(|i| ResBlock::new(&(p / "res" / i), if i == 0 { ch[0] } else { ch[i - 1] }, ch[i], d.time_dim))
            .collect();
        let attn = (0..ch.len())
            .map(|i| TransformerBlock::new(&(p / "attn" / i), ch[i], d.text_dim, d.heads, d.ff_mult))
            .collect();
        let down = (0..ch.len() - 1)
            .map(|i| conv(p / "down" / i, ch[i], ch[i], 3, 2))
            .collect();
        Ok(Self {
            time: TimeEmbedding::new(&(p / "time"), ch[0], d.time_dim),
            conv_in: conv(p / "conv_in", d.in_channels, ch[0], 3, 1),
            res,
            attn,
            down,
            mid: ResBlock::new(&(p / "mid"), ch[ch.len() - 1], ch[ch.len() - 1], d.time_dim),
        })
    }

    pub fn levels(&self) -> usize {
        self.res.len()
    }

    /// Runs the encoder; `inject` is added to the input-conv features.
    pub fn forward(
        &self,
        x: &Tensor,
        t: &Tensor,
        ctx: &Tensor,
        inject: Option<&Tensor>,
        capture: &LevelCapture,
    ) -> EncoderOutput {
        let temb = self.time.forward(t);
        let mut h = self.conv_in.forward(x);
        if let Some(extra) = inject {
            h = h + extra;
        }
        let mut skips = Vec::with_capacity(self.levels());
        let mut attention = Vec::new();
        for level in 0..self.levels() {
            h = self.res[level].forward(&h, &temb);
            let want = capture.levels.contains(&level).then_some(capture.detached_query);
            let (out, cap) = self.attn[level].forward(&h, ctx, want);
            h = out;
            if let Some(c) = cap {
                attention.push((level, c));
            }
            skips.push(h.shallow_clone());
            if let Some(d) = self.down.get(level) {
                h = d.forward(&h);
            }
        }
        let mid = self.mid.forward(&h, &temb);
        EncoderOutput {
            skips,
            mid,
            temb,
            attention,
        }
    }
}

/// Decoder half: per level, concatenate the skip, apply a residual block,
/// then upsample to the next finer level.
#[derive(Debug)]
pub struct Decoder {
    res: Vec<ResBlock>,
    up: Vec<nn::Conv2D>,
    norm_out: nn::GroupNorm,
    conv_out: nn::Conv2D,
}

impl Decoder {
    pub fn new(p: &nn::Path, d: &UNetDims) -> Self {
        let ch = &d.channels;
        let res = (0..ch.len())
            .map(|i| ResBlock::new(&(p / "res" / i), 2 * ch[i], ch[i], d.time_dim))
            .collect();
        let up = (1..ch.len())
            .map(|i| conv(p / "up" / i, ch[i], ch[i - 1], 3, 1))
            .collect();
        Self {
            res,
            up,
            norm_out: group_norm(p / "norm_out", ch[0]),
            conv_out: conv(p / "conv_out", ch[0], d.in_channels, 3, 1),
        }
    }

    pub fn forward(&self, mid: &Tensor, skips: &[Tensor], temb: &Tensor) -> Tensor {
        let mut h = mid.shallow_clone();
        for level in (0..self.res.len()).rev() {
            h = self.res[level].forward(&Tensor::cat(&[&h, &skips[level]], 1), temb);
            if level > 0 {
                let (_, _, hh, ww) = h.size4().expect("features are B x C x H x W");
                let up = h.upsample_nearest2d([hh * 2, ww * 2], None, None);
                h = self.up[level - 1].forward(&up);
            }
        }
        self.conv_out.forward(&self.norm_out.forward(&h).silu())
    }
}

/// Maps the rendered condition to the input-conv feature size with four
/// convolutions; the total stride is the ratio of condition to image size.
#[derive(Debug)]
pub struct ConditionEmbedding {
    convs: Vec<nn::Conv2D>,
}

impl ConditionEmbedding {
    pub fn new(p: &nn::Path, in_channels: usize, widths: &[usize; 4], downscale: usize) -> Result<Self> {
        if !downscale.is_power_of_two() || downscale > 16 {
            return Err(Error::Config(format!(
                "condition/image size ratio {downscale} must be a power of two up to 16"
            )));
        }
        let mut remaining = downscale;
        let mut prev = in_channels;
        let convs = widths
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let stride = if remaining > 1 {
                    remaining /= 2;
                    2
                } else {
                    1
                };
                let c = conv(p / "convs" / i, prev, w, 3, stride);
                prev = w;
                c
            })
            .collect();
        Ok(Self { convs })
    }

    pub fn forward(&self, c: &Tensor) -> Tensor {
        let mut h = c.shallow_clone();
        let last = self.convs.len() - 1;
        for (i, conv) in self.convs.iter().enumerate() {
            h = conv.forward(&h);
            if i < last {
                h = h.silu();
            }
        }
        h
    }
}
