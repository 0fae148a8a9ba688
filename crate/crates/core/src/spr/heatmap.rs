use crate::error::{Error, Result};
use crate::pose::PoseSet;

/// Gaussian target maps for the keypoints valid in at least one instance.
#[derive(Debug, Clone, PartialEq)]
pub struct HeatmapStack {
    pub height: usize,
    pub width: usize,
    pub sigma: f64,
    /// Keypoint index of each map, ascending.
    pub valid_indices: Vec<usize>,
    /// One row-major `height x width` map per entry of `valid_indices`.
    pub maps: Vec<Vec<f64>>,
}

impl HeatmapStack {
    pub fn map_for(&self, keypoint: usize) -> Option<&[f64]> {
        self.valid_indices
            .iter()
            .position(|&k| k == keypoint)
            .map(|i| self.maps[i].as_slice())
    }

    pub fn is_empty(&self) -> bool {
        self.valid_indices.is_empty()
    }
}

/// `H_i(p) = max over instances of exp(-|p - q_i|² / 2σ²)`, with `q_i` scaled
/// from image to heatmap resolution and pixel `(row, col)` sampled at
/// `(x = col, y = row)`.
pub fn render_heatmaps(
    pose_set: &PoseSet,
    out_size: (usize, usize),
    sigma: f64,
) -> Result<HeatmapStack> {
    if !(sigma.is_finite() && sigma > 0.0) {
        return Err(Error::InvalidArgument(format!("heatmap sigma {sigma} must be positive")));
    }
    let (h, w) = out_size;
    let sx = w as f64 / pose_set.width() as f64;
    let sy = h as f64 / pose_set.height() as f64;
    let denom = 2.0 * sigma * sigma;
    let valid_indices = pose_set.valid_keypoints();
    let maps = valid_indices
        .iter()
        .map(|&k| {
            let mut map = vec![0.0f64; h * w];
            for inst in &pose_set.instances {
                let kp = inst.keypoints[k];
                if !kp.is_valid() {
                    continue;
                }
                let (qx, qy) = (kp.x * sx, kp.y * sy);
                for row in 0..h {
                    let dy = row as f64 - qy;
                    for col in 0..w {
                        let dx = col as f64 - qx;
                        let g = (-(dx * dx + dy * dy) / denom).exp();
                        let cell = &mut map[row * w + col];
                        if g > *cell {
                            *cell = g;
                        }
                    }
                }
            }
            map
        })
        .collect();
    Ok(HeatmapStack {
        height: h,
        width: w,
        sigma,
        valid_indices,
        maps,
    })
}
