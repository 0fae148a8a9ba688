//! Checkpoint directories: parameters as safetensors plus a JSON manifest
//! with the model config, skeleton and per-group hashes, and optionally the
//! optimizer moments and training step.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use tch::Tensor;

use crate::backbone::{Model, ModelConfig, ParamGroup};
use crate::error::{read_to_string, write_string, Error, Result};
use crate::optim::Adam;
use crate::pose::SkeletonSpec;
use crate::spr::InitMode;

pub const PARAMS_FILE: &str = "params.safetensors";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const OPTIMIZER_FILE: &str = "optimizer.safetensors";
pub const STATE_FILE: &str = "state.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<i64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub model: ModelConfig,
    pub skeleton: SkeletonSpec,
    pub checkpoint_hash: String,
    pub group_hashes: BTreeMap<String, String>,
    pub params: Vec<ParamEntry>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TrainState {
    /// Completed training steps.
    pub step: usize,
    pub optimizer_steps: u64,
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

pub fn manifest_of(model: &Model) -> Manifest {
    Manifest {
        model: model.config().clone(),
        skeleton: model.skeleton().clone(),
        checkpoint_hash: model.checkpoint_hash(),
        group_hashes: ParamGroup::ALL
            .iter()
            .map(|&g| (g.as_str().to_string(), model.group_hash(g)))
            .collect(),
        params: model
            .named_parameters()
            .into_iter()
            .map(|(name, t)| ParamEntry { name, shape: t.size() })
            .collect(),
    }
}

/// Writes `model` to `dir`, plus optimizer state when given.
pub fn save_checkpoint(model: &Model, dir: &Path, train: Option<(&Adam, TrainState)>) -> Result<()> {
    create_dir(dir)?;
    let params = model.named_parameters();
    Tensor::write_safetensors(&params, dir.join(PARAMS_FILE))?;
    if let Some((opt, state)) = train {
        opt.save(&dir.join(OPTIMIZER_FILE))?;
        write_string(&dir.join(STATE_FILE), &serde_json::to_string_pretty(&state)?)?;
    }
    write_string(&dir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest_of(model))?)
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    Ok(serde_json::from_str(&read_to_string(&dir.join(MANIFEST_FILE))?)?)
}

pub fn read_train_state(dir: &Path) -> Result<Option<TrainState>> {
    let path = dir.join(STATE_FILE);
    if !path.exists() {
        return Ok(None);
    }
    Ok(Some(serde_json::from_str(&read_to_string(&path)?)?))
}

/// Copies stored parameters into `model`, restricted to `groups` when given.
/// Every selected model parameter must be present with the same shape.
pub fn load_parameters(model: &Model, dir: &Path, groups: Option<&[ParamGroup]>) -> Result<()> {
    let path = dir.join(PARAMS_FILE);
    if !path.exists() {
        return Err(Error::Checkpoint(format!("no {PARAMS_FILE} in {}", dir.display())));
    }
    let stored: BTreeMap<String, Tensor> = Tensor::read_safetensors(&path)?.into_iter().collect();
    let selected = |name: &str| groups.is_none_or(|gs| ParamGroup::of(name).is_some_and(|g| gs.contains(&g)));
    tch::no_grad(|| {
        for (name, dst) in model.named_parameters() {
            if !selected(&name) {
                continue;
            }
            let src = stored
                .get(&name)
                .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks parameter {name}")))?;
            if src.size() != dst.size() {
                return Err(Error::Checkpoint(format!(
                    "resume shape mismatch for {name}: checkpoint {:?}, model {:?}",
                    src.size(),
                    dst.size()
                )));
            }
            dst.shallow_clone().copy_(&src.to_kind(dst.kind()));
        }
        Ok(())
    })
}

/// Rebuilds the model stored in `dir` and checks its hash.
pub fn load_model(dir: &Path) -> Result<Model> {
    let manifest = read_manifest(dir)?;
    let mut cfg = manifest.model.clone();
    // the frozen seed is restored from the parameters, not regenerated
    cfg.seed_init = InitMode::Random;
    cfg.seed_file = None;
    let model = Model::with_skeleton(&cfg, manifest.skeleton.clone())?;
    load_parameters(&model, dir, None)?;
    let hash = model.checkpoint_hash();
    if hash != manifest.checkpoint_hash {
        return Err(Error::Checkpoint(format!(
            "parameter hash {hash} does not match manifest {}",
            manifest.checkpoint_hash
        )));
    }
    Ok(model)
}
