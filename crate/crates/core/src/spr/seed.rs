use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{read_to_string, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    Random,
    Text,
}

/// Frozen per-keypoint input vectors fed to the embedding module.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSeed {
    pub num_keypoints: usize,
    pub dim: usize,
    pub seed: u64,
    pub init_mode: InitMode,
    /// Row-major `num_keypoints x dim`.
    pub vectors: Vec<f32>,
}

impl EmbeddingSeed {
    /// Standard-normal vectors drawn from a ChaCha8 stream seeded with `seed`.
    pub fn random(num_keypoints: usize, dim: usize, seed: u64) -> Result<Self> {
        check_dims(num_keypoints, dim)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let vectors = (0..num_keypoints * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        Ok(Self {
            num_keypoints,
            dim,
            seed,
            init_mode: InitMode::Random,
            vectors,
        })
    }

    /// Externally supplied vectors, one per keypoint.
    pub fn from_vectors(num_keypoints: usize, dim: usize, rows: &[Vec<f32>]) -> Result<Self> {
        check_dims(num_keypoints, dim)?;
        if rows.len() != num_keypoints {
            return Err(Error::Shape(format!(
                "text-init file has {} vectors, expected {num_keypoints}",
                rows.len()
            )));
        }
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != dim) {
            return Err(Error::Shape(format!(
                "text-init vector {i} has length {}, expected {dim}",
                r.len()
            )));
        }
        Ok(Self {
            num_keypoints,
            dim,
            seed: 0,
            init_mode: InitMode::Text,
            vectors: rows.concat(),
        })
    }

    /// Loads a JSON list of `num_keypoints` vectors of length `dim`.
    pub fn from_text_file(num_keypoints: usize, dim: usize, path: impl AsRef<Path>) -> Result<Self> {
        let rows: Vec<Vec<f32>> = serde_json::from_str(&read_to_string(path.as_ref())?)?;
        Self::from_vectors(num_keypoints, dim, &rows)
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.vectors[i * self.dim..(i + 1) * self.dim]
    }
}

fn check_dims(n: usize, c: usize) -> Result<()> {
    if n == 0 || c == 0 {
        return Err(Error::InvalidArgument(format!("seed shape {n} x {c} must be non-empty")));
    }
    Ok(())
}

/// Builds the seed for `mode`; text mode reads `text_file`.
pub fn init_seed(
    num_keypoints: usize,
    dim: usize,
    seed: u64,
    mode: InitMode,
    text_file: Option<&Path>,
) -> Result<EmbeddingSeed> {
    match mode {
        InitMode::Random => EmbeddingSeed::random(num_keypoints, dim, seed),
        InitMode::Text => {
            let path = text_file
                .ok_or_else(|| Error::InvalidArgument("text init mode needs a vector file".into()))?;
            EmbeddingSeed::from_text_file(num_keypoints, dim, path)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_is_reproducible() {
        let a = init_seed(17, 768, 0, InitMode::Random, None).unwrap();
        let b = init_seed(17, 768, 0, InitMode::Random, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.vectors.len(), 17 * 768);
    }

    #[test]
    fn seeds_differ() {
        let a = EmbeddingSeed::random(2, 4, 1).unwrap();
        let b = EmbeddingSeed::random(2, 4, 2).unwrap();
        assert_ne!(a.vectors, b.vectors);
    }

    #[test]
    fn text_file_must_cover_every_keypoint() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.json");
        std::fs::write(&path, serde_json::to_string(&vec![vec![0.5f32; 4]; 16]).unwrap()).unwrap();
        let err = init_seed(17, 4, 0, InitMode::Text, Some(&path)).unwrap_err();
        assert!(err.to_string().contains("16 vectors"), "{err}");
        let ok = init_seed(16, 4, 0, InitMode::Text, Some(&path)).unwrap();
        assert_eq!(ok.row(3), &[0.5; 4]);
        assert!(init_seed(16, 4, 0, InitMode::Text, None).is_err());
    }

    #[test]
    fn empty_shape_rejected() {
        assert!(EmbeddingSeed::random(0, 4, 0).is_err());
    }
}
