//! Frozen toy text encoder: a hashed word vocabulary, a token-embedding
//! table extended by the learnable keypoint rows, and a small causal
//! pre-norm transformer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use tch::nn::{self, Module};
use tch::Tensor;

use crate::error::{Error, Result};
use crate::kcl::KeypointTokenRegistry;

pub const PAD_ID: i64 = 0;
pub const BOS_ID: i64 = 1;
pub const EOS_ID: i64 = 2;
const FIRST_WORD_ID: i64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub context_len: usize,
}

impl Default for TextConfig {
    fn default() -> Self {
        Self {
            vocab_size: 4096,
            dim: 128,
            layers: 2,
            heads: 4,
            context_len: 77,
        }
    }
}

impl TextConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size <= FIRST_WORD_ID as usize {
            return Err(Error::Config(format!("vocab_size {} too small", self.vocab_size)));
        }
        if self.context_len < 2 || self.context_len > 77 {
            return Err(Error::Config(format!(
                "context_len {} must lie in [2, 77]",
                self.context_len
            )));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::Config(format!(
                "text dim {} not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        Ok(())
    }
}

/// Lowercased word and punctuation pieces of `text`, split on whitespace
/// and on every character that is neither alphanumeric nor `_`.
pub fn split_words(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    for chunk in text.split_whitespace() {
        let mut word = String::new();
        for ch in chunk.chars() {
            if ch.is_alphanumeric() || ch == '_' {
                word.extend(ch.to_lowercase());
            } else {
                if !word.is_empty() {
                    out.push(std::mem::take(&mut word));
                }
                out.push(ch.to_string());
            }
        }
        if !word.is_empty() {
            out.push(word);
        }
    }
    out
}

fn word_id(word: &str, vocab_size: usize) -> i64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in word.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    FIRST_WORD_ID + (h % (vocab_size as u64 - FIRST_WORD_ID as u64)) as i64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Piece {
    Word(i64),
    Keypoint(usize),
}

/// Token ids padded to the context length, with keypoint index -> position.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenizedPrompt {
    pub token_ids: Vec<i64>,
    pub kpt_positions: BTreeMap<usize, usize>,
    /// Number of non-padding tokens, BOS and EOS included.
    pub length: usize,
}

/// Tokenizes `prompt`. Whole whitespace-separated chunks equal to a registry
/// token become keypoint ids `vocab_size + k`. When the prompt is too long the
/// trailing ordinary words are dropped; keypoint tokens are never dropped.
pub fn tokenize(prompt: &str, registry: &KeypointTokenRegistry, cfg: &TextConfig) -> Result<TokenizedPrompt> {
    let mut pieces = Vec::new();
    for chunk in prompt.split_whitespace() {
        match registry.index_of_token(chunk) {
            Some(k) => pieces.push(Piece::Keypoint(k)),
            None => pieces.extend(
                split_words(chunk)
                    .iter()
                    .map(|w| Piece::Word(word_id(w, cfg.vocab_size))),
            ),
        }
    }
    let capacity = cfg.context_len - 2;
    let kpt_count = pieces.iter().filter(|p| matches!(p, Piece::Keypoint(_))).count();
    if kpt_count > capacity {
        return Err(Error::PromptOverflow(format!(
            "{kpt_count} keypoint tokens exceed the context of {}",
            cfg.context_len
        )));
    }
    let mut words_left = capacity - kpt_count;
    pieces.retain(|p| match p {
        Piece::Keypoint(_) => true,
        Piece::Word(_) if words_left > 0 => {
            words_left -= 1;
            true
        }
        Piece::Word(_) => false,
    });

    let mut token_ids = Vec::with_capacity(cfg.context_len);
    let mut kpt_positions = BTreeMap::new();
    token_ids.push(BOS_ID);
    for p in pieces {
        match p {
            Piece::Word(id) => token_ids.push(id),
            Piece::Keypoint(k) => {
                if kpt_positions.insert(k, token_ids.len()).is_some() {
                    return Err(Error::InvalidArgument(format!(
                        "keypoint token {} appears twice",
                        registry.tokens[k]
                    )));
                }
                token_ids.push(cfg.vocab_size as i64 + k as i64);
            }
        }
    }
    token_ids.push(EOS_ID);
    let length = token_ids.len();
    token_ids.resize(cfg.context_len, PAD_ID);
    Ok(TokenizedPrompt {
        token_ids,
        kpt_positions,
        length,
    })
}

/// Encoded prompt: token embeddings before the transformer and the final
/// hidden states used as cross-attention context.
#[derive(Debug)]
pub struct TextEncoding {
    pub token_ids: Vec<i64>,
    pub kpt_positions: BTreeMap<usize, usize>,
    /// `L x D` lookups, keypoint positions reading the current `V_kpt` rows.
    pub embeddings: Tensor,
    /// `L x D` transformer output.
    pub hidden: Tensor,
}

/// Batched context for the denoiser.
#[derive(Debug)]
pub struct TextBatch {
    pub prompts: Vec<TokenizedPrompt>,
    /// `B x L x D`.
    pub hidden: Tensor,
}

#[derive(Debug)]
struct Layer {
    ln1: nn::LayerNorm,
    qkv: nn::Linear,
    out: nn::Linear,
    ln2: nn::LayerNorm,
    fc1: nn::Linear,
    fc2: nn::Linear,
}

#[derive(Debug)]
pub struct TextEncoder {
    cfg: TextConfig,
    word_table: Tensor,
    positions: Tensor,
    layers: Vec<Layer>,
    final_norm: nn::LayerNorm,
}

impl TextEncoder {
    pub fn new(p: &nn::Path, cfg: &TextConfig) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.dim as i64;
        let word_table = p.var(
            "word_table",
            &[cfg.vocab_size as i64, d],
            nn::Init::Randn { mean: 0.0, stdev: 1.0 },
        );
        let positions = p.var(
            "positions",
            &[cfg.context_len as i64, d],
            nn::Init::Randn { mean: 0.0, stdev: 0.1 },
        );
        let layers = (0..cfg.layers)
            .map(|i| {
                let lp = p / "layers" / i;
                Layer {
                    ln1: nn::layer_norm(&lp / "ln1", vec![d], Default::default()),
                    qkv: nn::linear(&lp / "qkv", d, 3 * d, Default::default()),
                    out: nn::linear(&lp / "out", d, d, Default::default()),
                    ln2: nn::layer_norm(&lp / "ln2", vec![d], Default::default()),
                    fc1: nn::linear(&lp / "fc1", d, 2 * d, Default::default()),
                    fc2: nn::linear(&lp / "fc2", 2 * d, d, Default::default()),
                }
            })
            .collect();
        Ok(Self {
            cfg: cfg.clone(),
            word_table,
            positions,
            layers,
            final_norm: nn::layer_norm(p / "final_norm", vec![d], Default::default()),
        })
    }

    pub fn config(&self) -> &TextConfig {
        &self.cfg
    }

    /// Mean embedding of the words of `text`; seeds a keypoint row from its name.
    pub fn mean_word_embedding(&self, text: &str) -> Tensor {
        let ids: Vec<i64> = split_words(&text.replace('_', " "))
            .iter()
            .map(|w| word_id(w, self.cfg.vocab_size))
            .collect();
        let idx = Tensor::from_slice(&ids).to_device(self.word_table.device());
        self.word_table.index_select(0, &idx).mean_dim(0, false, self.word_table.kind())
    }

    fn lookup(&self, ids: &Tensor, registry: &KeypointTokenRegistry) -> Result<Tensor> {
        let v = registry.v_kpt();
        if v.size() != [registry.len() as i64, self.cfg.dim as i64] {
            return Err(Error::Shape(format!(
                "V_kpt {:?} does not match {} tokens of dim {}",
                v.size(),
                registry.len(),
                self.cfg.dim
            )));
        }
        let table = Tensor::cat(&[self.word_table.shallow_clone(), v.to_kind(self.word_table.kind())], 0);
        let flat = ids.reshape([-1]);
        let (b, l) = ids.size2()?;
        Ok(table.index_select(0, &flat).reshape([b, l, self.cfg.dim as i64]))
    }

    fn transform(&self, emb: &Tensor) -> Result<Tensor> {
        let (b, l, d) = emb.size3()?;
        let heads = self.cfg.heads as i64;
        let dh = d / heads;
        let opts = (emb.kind(), emb.device());
        let mask = Tensor::full([l, l], f64::NEG_INFINITY, opts).triu(1);
        let mut x = emb + self.positions.to_kind(emb.kind()).unsqueeze(0);
        for layer in &self.layers {
            let h = layer.ln1.forward(&x);
            let qkv = layer
                .qkv
                .forward(&h)
                .reshape([b, l, 3, heads, dh])
                .permute([2, 0, 3, 1, 4]);
            let (q, k, v) = (qkv.get(0), qkv.get(1), qkv.get(2));
            let att = (q.matmul(&k.transpose(-2, -1)) / (dh as f64).sqrt() + &mask).softmax(-1, emb.kind());
            let o = att.matmul(&v).transpose(1, 2).reshape([b, l, d]);
            x = x + layer.out.forward(&o);
            let h = layer.ln2.forward(&x);
            x = x + layer.fc2.forward(&layer.fc1.forward(&h).gelu("none"));
        }
        Ok(self.final_norm.forward(&x))
    }

    pub fn encode_batch(&self, prompts: &[&str], registry: &KeypointTokenRegistry) -> Result<TextBatch> {
        if prompts.is_empty() {
            return Err(Error::InvalidArgument("empty prompt batch".into()));
        }
        let tokenized = prompts
            .iter()
            .map(|p| tokenize(p, registry, &self.cfg))
            .collect::<Result<Vec<_>>>()?;
        let flat: Vec<i64> = tokenized.iter().flat_map(|t| t.token_ids.iter().copied()).collect();
        let ids = Tensor::from_slice(&flat)
            .reshape([prompts.len() as i64, self.cfg.context_len as i64])
            .to_device(self.word_table.device());
        let hidden = self.transform(&self.lookup(&ids, registry)?)?;
        Ok(TextBatch {
            prompts: tokenized,
            hidden,
        })
    }

    pub fn encode_text(&self, prompt: &str, registry: &KeypointTokenRegistry) -> Result<TextEncoding> {
        let tok = tokenize(prompt, registry, &self.cfg)?;
        let ids = Tensor::from_slice(&tok.token_ids)
            .unsqueeze(0)
            .to_device(self.word_table.device());
        let emb = self.lookup(&ids, registry)?;
        let hidden = self.transform(&emb)?;
        Ok(TextEncoding {
            token_ids: tok.token_ids,
            kpt_positions: tok.kpt_positions,
            embeddings: emb.squeeze_dim(0),
            hidden: hidden.squeeze_dim(0),
        })
    }
}
