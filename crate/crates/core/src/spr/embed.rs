//! The keypoint embedding MLP: an input projection, three blocks of
//! `linear -> GeLU -> dropout -> linear -> layer-norm`, and an output projection.

use rand::Rng;
use tch::nn::{self, Module};
use tch::Tensor;

use super::seed::EmbeddingSeed;
use crate::error::{Error, Result};

#[derive(Debug)]
struct Block {
    fc1: nn::Linear,
    fc2: nn::Linear,
    norm: nn::LayerNorm,
}

#[derive(Debug)]
pub struct SpatialPoseEmbedding {
    input: nn::Linear,
    blocks: Vec<Block>,
    output: nn::Linear,
    dropout: f64,
    in_dim: usize,
    out_dim: usize,
}

impl SpatialPoseEmbedding {
    pub fn new(
        p: &nn::Path,
        in_dim: usize,
        hidden: usize,
        out_dim: usize,
        dropout: f64,
    ) -> Result<Self> {
        if in_dim == 0 || hidden == 0 || out_dim == 0 {
            return Err(Error::InvalidArgument(
                "embedding module dimensions must be positive".into(),
            ));
        }
        let lin = |p: nn::Path, i: usize, o: usize| nn::linear(p, i as i64, o as i64, Default::default());
        let blocks = (0..3)
            .map(|b| {
                let bp = p / "blocks" / b;
                Block {
                    fc1: lin(&bp / "fc1", hidden, hidden),
                    fc2: lin(&bp / "fc2", hidden, hidden),
                    norm: nn::layer_norm(&bp / "norm", vec![hidden as i64], Default::default()),
                }
            })
            .collect();
        Ok(Self {
            input: lin(p / "input", in_dim, hidden),
            blocks,
            output: lin(p / "output", hidden, out_dim),
            dropout,
            in_dim,
            out_dim,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    /// `E_kpt = G(E_0)`, `N x C'`. Dropout is active only when an RNG is
    /// given; masks are drawn from it so training stays reproducible.
    pub fn forward_t<R: Rng>(&self, e0: &Tensor, mut dropout_rng: Option<&mut R>) -> Result<Tensor> {
        let (_, c) = e0.size2()?;
        if c as usize != self.in_dim {
            return Err(Error::Shape(format!(
                "seed dimension {c} does not match module input {}",
                self.in_dim
            )));
        }
        let mut h = self.input.forward(e0);
        for b in &self.blocks {
            let mut y = b.fc1.forward(&h).gelu("none");
            if let Some(rng) = dropout_rng.as_deref_mut() {
                let mask = dropout_mask(rng, &y, self.dropout);
                y = y * mask;
            }
            h = b.norm.forward(&b.fc2.forward(&y));
        }
        Ok(self.output.forward(&h))
    }

    /// Zeroes the output projection weight; used by tests and ablations.
    pub fn zero_output_weight(&mut self) {
        tch::no_grad(|| {
            let _ = self.output.ws.zero_();
        });
    }

    pub fn output_bias(&self) -> Option<&Tensor> {
        self.output.bs.as_ref()
    }
}

/// Inverted-dropout mask shaped like `like`: `0` with probability `p`, else `1 / (1 - p)`.
fn dropout_mask<R: Rng>(rng: &mut R, like: &Tensor, p: f64) -> Tensor {
    let keep = 1.0 / (1.0 - p);
    let vals: Vec<f64> = (0..like.numel())
        .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
        .collect();
    Tensor::from_slice(&vals)
        .reshape(like.size())
        .to_kind(like.kind())
        .to_device(like.device())
}

/// Loads an [`EmbeddingSeed`] into an `N x C` tensor of the given kind.
pub fn seed_tensor(seed: &EmbeddingSeed, kind: tch::Kind, device: tch::Device) -> Tensor {
    Tensor::from_slice(&seed.vectors)
        .reshape([seed.num_keypoints as i64, seed.dim as i64])
        .to_kind(kind)
        .to_device(device)
}
