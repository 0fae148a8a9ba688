//! Keypoint concept learning: one learnable text token per keypoint,
//! appended to captions for the keypoints present, and a loss pulling each
//! token's cross-attention map toward the keypoint's Gaussian heatmap.

use std::collections::{BTreeMap, HashMap};

use serde::{Deserialize, Serialize};
use tch::{Kind, Tensor};

use crate::backbone::{AttentionRecord, AttentionSource, BlockId};
use crate::error::{Error, Result};
use crate::pose::{PoseSet, SkeletonSpec};
use crate::spr::HeatmapStack;

/// Token string of a keypoint name: `<kpt_{name}>`, spaces as underscores.
pub fn keypoint_token(name: &str) -> String {
    format!("<kpt_{}>", name.replace(' ', "_"))
}

#[derive(Debug)]
pub struct KeypointTokenRegistry {
    pub spec_name: String,
    pub tokens: Vec<String>,
    v_kpt: Tensor,
    index: HashMap<String, usize>,
}

impl KeypointTokenRegistry {
    /// `v_kpt` holds one row per keypoint of `spec`; the registry shares its
    /// storage, so updates to the variable are seen here.
    pub fn new(spec: &SkeletonSpec, v_kpt: Tensor) -> Result<Self> {
        let n = spec.num_keypoints();
        if v_kpt.dim() != 2 || v_kpt.size()[0] != n as i64 {
            return Err(Error::Shape(format!(
                "V_kpt {:?} needs {n} rows",
                v_kpt.size()
            )));
        }
        let tokens: Vec<String> = spec.keypoint_names().iter().map(|n| keypoint_token(n)).collect();
        let index: HashMap<String, usize> = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        if index.len() != n {
            return Err(Error::InvalidSkeleton("keypoint names map to duplicate tokens".into()));
        }
        Ok(Self {
            spec_name: spec.name().to_string(),
            tokens,
            v_kpt,
            index,
        })
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn v_kpt(&self) -> &Tensor {
        &self.v_kpt
    }

    pub fn index_of_token(&self, token: &str) -> Option<usize> {
        self.index.get(token).copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GatingConfig {
    pub t_low: usize,
    pub t_high: usize,
    pub blocks: Vec<BlockId>,
}

impl Default for GatingConfig {
    fn default() -> Self {
        Self {
            t_low: 250,
            t_high: 500,
            blocks: vec![BlockId::new(AttentionSource::Adapter, 2)],
        }
    }
}

impl GatingConfig {
    pub fn validate(&self, timesteps: usize) -> Result<()> {
        if self.t_low >= self.t_high || self.t_high > timesteps {
            return Err(Error::Config(format!(
                "gate [{}, {}) must satisfy 0 <= low < high <= {timesteps}",
                self.t_low, self.t_high
            )));
        }
        if self.blocks.is_empty() {
            return Err(Error::Config("gate needs at least one block".into()));
        }
        Ok(())
    }

    pub fn admits(&self, t: usize) -> bool {
        (self.t_low..self.t_high).contains(&t)
    }
}

/// Appends the tokens of every keypoint valid in at least one instance, in
/// skeleton order. Tokens already present in the caption are not repeated.
pub fn augment_prompt(caption: &str, pose_set: &PoseSet, registry: &KeypointTokenRegistry) -> String {
    let present: Vec<&str> = caption.split_whitespace().collect();
    let mut out = caption.to_string();
    for k in pose_set.valid_keypoints() {
        let Some(tok) = registry.tokens.get(k) else { continue };
        if present.contains(&tok.as_str()) {
            continue;
        }
        if !out.is_empty() {
            out.push(' ');
        }
        out.push_str(tok);
    }
    out
}

/// Heatmap loss of one batch element, or `None` when it contributes nothing
/// (timestep outside the gate, no valid keypoints, or no keypoint tokens in
/// the prompt because it was dropped).
///
/// For each gated block the head-averaged attention column of every valid
/// keypoint's token is compared to its heatmap by mean squared error over
/// keypoints and pixels; blocks are averaged. Maps come from the
/// detached-query copy so the image-feature path receives no gradient.
/// `heatmaps` holds one stack per attention resolution in use; each block
/// takes the stack matching its size.
pub fn heatmap_loss_sample(
    record: &AttentionRecord,
    sample: usize,
    kpt_positions: &BTreeMap<usize, usize>,
    heatmaps: &[HeatmapStack],
    gating: &GatingConfig,
) -> Result<Option<Tensor>> {
    let t = *record
        .timesteps
        .get(sample)
        .ok_or_else(|| Error::InvalidArgument(format!("no timestep for sample {sample}")))?;
    let Some(first) = heatmaps.first() else {
        return Ok(None);
    };
    if !gating.admits(t) || first.is_empty() || kpt_positions.is_empty() {
        return Ok(None);
    }
    if heatmaps.iter().any(|h| h.valid_indices != first.valid_indices) {
        return Err(Error::InvalidArgument("heatmap stacks disagree on valid keypoints".into()));
    }
    let positions = first
        .valid_indices
        .iter()
        .map(|k| kpt_positions.get(k).map(|&p| p as i64).ok_or(Error::MissingToken(*k)))
        .collect::<Result<Vec<_>>>()?;
    let mut per_block = Vec::with_capacity(gating.blocks.len());
    for block in &gating.blocks {
        let cap = record
            .entries
            .get(block)
            .ok_or_else(|| Error::InvalidArgument(format!("block {block} was not captured")))?;
        let heatmaps = heatmaps
            .iter()
            .find(|h| h.height == cap.height && h.width == cap.width)
            .ok_or_else(|| {
                Error::Shape(format!(
                    "attention at {block} is {}x{} and no heatmap stack has that size",
                    cap.height, cap.width
                ))
            })?;
        let maps = cap
            .detached_query
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("block {block} lacks detached-query maps")))?;
        let kind = maps.kind();
        let idx = Tensor::from_slice(&positions).to_device(maps.device());
        // heads x HW x K -> HW x K
        let m = maps.get(sample as i64).index_select(2, &idx).mean_dim(0, false, kind);
        let hw = (heatmaps.height * heatmaps.width) as i64;
        let flat: Vec<f64> = heatmaps.maps.iter().flatten().copied().collect();
        let target = Tensor::from_slice(&flat)
            .reshape([positions.len() as i64, hw])
            .transpose(0, 1)
            .to_kind(kind)
            .to_device(maps.device());
        per_block.push((m - target).square().mean(kind));
    }
    let n = per_block.len() as f64;
    Ok(Some(Tensor::stack(&per_block, 0).sum(per_block[0].kind()) / n))
}

/// Mean of [`heatmap_loss_sample`] over the batch; samples contributing
/// nothing count as zero. Returns a scalar with no graph when nothing contributes.
pub fn heatmap_loss<H: AsRef<[HeatmapStack]>>(
    record: &AttentionRecord,
    kpt_positions: &[&BTreeMap<usize, usize>],
    heatmaps: &[H],
    gating: &GatingConfig,
) -> Result<Tensor> {
    let b = record.timesteps.len();
    if kpt_positions.len() != b || heatmaps.len() != b {
        return Err(Error::Shape(format!(
            "batch of {b} with {} prompts and {} heatmap stacks",
            kpt_positions.len(),
            heatmaps.len()
        )));
    }
    let mut terms = Vec::new();
    for i in 0..b {
        if let Some(l) = heatmap_loss_sample(record, i, kpt_positions[i], heatmaps[i].as_ref(), gating)? {
            terms.push(l);
        }
    }
    let kind = record
        .entries
        .values()
        .next()
        .map(|c| c.maps.kind())
        .unwrap_or(Kind::Float);
    if terms.is_empty() || b == 0 {
        return Ok(Tensor::zeros([], (kind, tch::Device::Cpu)));
    }
    Ok(Tensor::stack(&terms, 0).sum(kind) / b as f64)
}

pub mod gradcheck;

pub use gradcheck::{loss_gradient_check, GradCheckReport, ToyDims};

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::CapturedAttention;
    use crate::pose::{Keypoint, PoseInstance};

    fn registry() -> KeypointTokenRegistry {
        let spec = SkeletonSpec::ap10k();
        KeypointTokenRegistry::new(&spec, Tensor::zeros([17, 4], (Kind::Float, tch::Device::Cpu))).unwrap()
    }

    fn pose(valid: &[usize]) -> PoseSet {
        let mut kps = vec![Keypoint::absent(); 17];
        for &k in valid {
            kps[k] = Keypoint::visible(1.0 + k as f64, 2.0);
        }
        PoseSet::new((64, 64), vec![PoseInstance::new(kps)])
    }

    #[test]
    fn token_strings() {
        assert_eq!(keypoint_token("root of tail"), "<kpt_root_of_tail>");
        let r = registry();
        assert_eq!(r.tokens[0], "<kpt_left_eye>");
        assert_eq!(r.index_of_token("<kpt_nose>"), Some(2));
        assert_eq!(r.index_of_token("nose"), None);
    }

    #[test]
    fn appends_only_valid_tokens() {
        let r = registry();
        let mut p = pose(&[0]);
        p.instances[0].keypoints[2] = Keypoint::new(5.0, 5.0, 0).unwrap();
        assert_eq!(augment_prompt("A dog.", &p, &r), "A dog. <kpt_left_eye>");
        assert_eq!(augment_prompt("A dog.", &pose(&[]), &r), "A dog.");
        assert_eq!(augment_prompt("", &pose(&[1]), &r), "<kpt_right_eye>");
    }

    #[test]
    fn all_tokens_in_spec_order_and_idempotent() {
        let r = registry();
        let all: Vec<usize> = (0..17).rev().collect();
        let once = augment_prompt("x", &pose(&all), &r);
        assert_eq!(once, format!("x {}", r.tokens.join(" ")));
        assert_eq!(augment_prompt(&once, &pose(&all), &r), once);
    }

    fn record(maps: Tensor, t: usize, h: usize) -> AttentionRecord {
        let mut entries = BTreeMap::new();
        entries.insert(
            BlockId::new(AttentionSource::Adapter, 2),
            CapturedAttention {
                detached_query: Some(maps.shallow_clone()),
                maps,
                height: h,
                width: h,
            },
        );
        AttentionRecord {
            entries,
            timesteps: vec![t],
        }
    }

    #[test]
    fn gated_out_timestep_is_none() {
        let hm = crate::spr::render_heatmaps(&pose(&[0]), (4, 4), 1.0).unwrap();
        let rec = record(Tensor::ones([1, 1, 16, 3], (Kind::Double, tch::Device::Cpu)) / 3.0, 700, 4);
        let pos = BTreeMap::from([(0, 1)]);
        let g = GatingConfig::default();
        assert!(heatmap_loss_sample(&rec, 0, &pos, std::slice::from_ref(&hm), &g).unwrap().is_none());
        let rec = record(Tensor::ones([1, 1, 16, 3], (Kind::Double, tch::Device::Cpu)) / 3.0, 300, 4);
        assert!(heatmap_loss_sample(&rec, 0, &pos, std::slice::from_ref(&hm), &g).unwrap().is_some());
        assert!(matches!(
            heatmap_loss_sample(&rec, 0, &BTreeMap::from([(1, 1)]), std::slice::from_ref(&hm), &g),
            Err(Error::MissingToken(0))
        ));
    }

    #[test]
    fn gate_bounds_validated() {
        let mut g = GatingConfig::default();
        assert!(g.validate(1000).is_ok());
        g.t_high = 250;
        assert!(g.validate(1000).is_err());
        g.t_high = 1001;
        assert!(g.validate(1000).is_err());
    }
}
